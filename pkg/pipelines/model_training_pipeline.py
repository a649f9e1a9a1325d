import json
import logging
from typing import Dict, List

import numpy as np
import pandas as pd

from pipelines.context import StageContext
from src.bench import evenly_spaced_indices, fixed_subset_baseline, topk_accuracy
from src.data_utils import BeamDataset, Split, augment, load_dataset, save_dataset
from src.experiment_utils import log_stage_to_mlflow
from src.mlp import MlpModel, finetune, load_model, save_model, train
from src.shap_utils import ShapReport, select_features

logger = logging.getLogger(__name__)


def _model_files(name: str) -> List[str]:
    return [f"{name}.btmd", f"{name}.json"]


def _save(ctx: StageContext, model: MlpModel, name: str, **metadata) -> List[str]:
    save_model(model, ctx.store.path(f"{name}.btmd"), metadata={"name": name, **metadata})
    return _model_files(name)


def _test_accuracy(model: MlpModel, ds: BeamDataset, ks: List[int]) -> Dict[int, float]:
    features, labels = ds.rows(Split.TEST)
    return {k: topk_accuracy(model, features, labels, k) for k in ks}


def run_pretrain(ctx: StageContext) -> List[str]:
    """Twin-pretrained model and, for comparison, a model trained on real data only."""
    cfg, store = ctx.cfg, ctx.store
    twin = load_dataset(store.path("twin.btds"))
    real = load_dataset(store.path("real.btds"))
    hidden = cfg.train.hidden

    logger.info("Step 1: Training the twin model...")
    twin_model = train(
        MlpModel.initialize(twin.n_features, twin.n_classes, hidden, seed=ctx.seed("init:twin")),
        twin,
        ctx.train_config(cfg.train, "twin"),
    )
    logger.info("Step 2: Training the real-only reference model...")
    real_model = train(
        MlpModel.initialize(real.n_features, real.n_classes, hidden, seed=ctx.seed("init:real")),
        real,
        ctx.train_config(cfg.train, "real"),
    )
    outputs = _save(ctx, twin_model, "twin_model", trained_on="twin")
    outputs += _save(ctx, real_model, "real_only_model", trained_on="real")
    log_stage_to_mlflow(
        "pretrain",
        params={"epochs": cfg.train.epochs, "batch_size": cfg.train.batch_size},
        metrics={"twin_final_loss": twin_model.history[-1], "real_final_loss": real_model.history[-1]},
    )
    return outputs


def run_finetune(ctx: StageContext) -> List[str]:
    """
    Fine-tune the twin model on twin + real_fraction of the real train rows.

    Also tabulates top-k real-test accuracy for twin-only, fine-tuned and real-only models.
    """
    cfg, store = ctx.cfg, ctx.store
    twin = load_dataset(store.path("twin.btds"))
    real = load_dataset(store.path("real.btds"))
    twin_model = load_model(store.path("twin_model.btmd"))
    real_model = load_model(store.path("real_only_model.btmd"))

    logger.info(f"Step 1: Augmenting twin data with {cfg.dataset.real_fraction:.0%} real data...")
    augmented = augment(real, twin, cfg.dataset.real_fraction, seed=ctx.seed("augment"))
    save_dataset(augmented, store.path("augmented.btds"))

    logger.info("Step 2: Fine-tuning the twin model...")
    tuned = finetune(twin_model, augmented, ctx.train_config(cfg.finetune, "finetune"))
    outputs = ["augmented.btds"] + _save(ctx, tuned, "finetuned_model", trained_on="augmented")

    logger.info("Step 3: Comparing models on real test data...")
    rows = []
    for label, model in [("twin_only", twin_model), ("finetuned", tuned), ("real_only", real_model)]:
        for k, acc in _test_accuracy(model, real, cfg.eval.ks).items():
            rows.append({"model": label, "k": k, "accuracy": acc})
            logger.info(f"{label} top-{k} accuracy on real test: {acc:.4f}")
    pd.DataFrame(rows).to_csv(store.path("transfer.csv"), index=False)
    log_stage_to_mlflow(
        "finetune",
        params={"real_fraction": cfg.dataset.real_fraction},
        metrics={f"{r['model']}_top{r['k']}": r["accuracy"] for r in rows},
    )
    return outputs + ["transfer.csv"]


def _pretrain_then_finetune(
    ctx: StageContext,
    name: str,
    twin: BeamDataset,
    real: BeamDataset,
    columns: np.ndarray,
) -> MlpModel:
    cfg = ctx.cfg
    twin_cols, real_cols = twin.select_columns(columns), real.select_columns(columns)
    model = MlpModel.initialize(len(columns), twin.n_classes, cfg.train.hidden, seed=ctx.seed(f"init:{name}"))
    model = train(model, twin_cols, ctx.train_config(cfg.train, name))
    augmented = augment(real_cols, twin_cols, cfg.dataset.real_fraction, seed=ctx.seed("augment"))
    return finetune(model, augmented, ctx.train_config(cfg.finetune, f"{name}:finetune"))


def run_select(ctx: StageContext) -> List[str]:
    """
    Pick sensing-beam subsets from the SHAP ranking and retrain reduced models.

    Reduced models follow the full model's recipe (pretrain on twin columns,
    fine-tune on augmented columns). Evenly spaced narrow-beam subsets of the
    same sizes give the fixed-subset baseline.
    """
    cfg, store = ctx.cfg, ctx.store
    report = ShapReport.load(store.root)
    twin, real = load_dataset(store.path("twin.btds")), load_dataset(store.path("real.btds"))
    twin_narrow = load_dataset(store.path("twin_narrow.btds"))
    real_narrow = load_dataset(store.path("real_narrow.btds"))

    # Step 1: Threshold selection for every delta
    logger.info("Step 1: Selecting sensing beams by SHAP mass threshold...")
    by_delta = {}
    for delta in sorted(set(cfg.selection.deltas) | {cfg.selection.delta}):
        chosen = select_features(report.psi_bar, delta)
        by_delta[f"{delta:g}"] = [int(i) for i in chosen]
        logger.info(f"delta={delta:g}: |selected|={len(chosen)} beams {by_delta[f'{delta:g}'][:12]}")
    selected = np.asarray(by_delta[f"{cfg.selection.delta:g}"])

    # Step 2: Reduced model for the configured delta
    logger.info(f"Step 2: Retraining the reduced model on {len(selected)} selected beams...")
    outputs = []
    models = {"reduced_delta": _pretrain_then_finetune(ctx, "reduced_delta", twin, real, selected)}

    # Step 3: Reduced and fixed-subset models over the sensing-beam grid
    grid = {}
    fixed_aug = augment(real_narrow, twin_narrow, cfg.dataset.real_fraction, seed=ctx.seed("augment"))
    for m in cfg.selection.m_grid:
        logger.info(f"Step 3: M~={m}: SHAP top-{m} and evenly spaced {m} narrow beams...")
        top = report.ranking[:m]
        grid[m] = {
            "shap": [int(i) for i in top],
            "fixed": [int(i) for i in evenly_spaced_indices(m, twin_narrow.n_features)],
        }
        models[f"reduced_m{m}"] = _pretrain_then_finetune(ctx, f"reduced_m{m}", twin, real, top)
        fixed_twin = fixed_subset_baseline(
            twin_narrow, ctx.train_config(cfg.train, f"fixed_m{m}"), m,
            init_seed=ctx.seed(f"init:fixed_m{m}"), hidden=cfg.train.hidden,
        )
        models[f"fixed_m{m}"] = fixed_subset_baseline(
            fixed_aug, ctx.train_config(cfg.finetune, f"fixed_m{m}:finetune"), m, pretrained=fixed_twin
        )

    # Step 4: Top-k accuracy on real test data
    rows = []
    for m in cfg.selection.m_grid:
        for method, ds, cols in [("shap", real, grid[m]["shap"]), ("fixed", real_narrow, grid[m]["fixed"])]:
            model = models[f"{'reduced' if method == 'shap' else 'fixed'}_m{m}"]
            for k, acc in _test_accuracy(model, ds.select_columns(cols), cfg.eval.ks).items():
                rows.append({"method": method, "m_tilde": m, "k": k, "accuracy": acc})
    pd.DataFrame(rows).to_csv(store.path("topk.csv"), index=False)

    for name, model in models.items():
        outputs += _save(ctx, model, name)
    selection = {
        "delta": cfg.selection.delta,
        "selected": [int(i) for i in selected],
        "by_delta": by_delta,
        "grid": {str(m): v for m, v in grid.items()},
    }
    store.path("selection.json").write_text(json.dumps(selection, indent=2, sort_keys=True) + "\n")
    log_stage_to_mlflow(
        "select",
        params={"delta": cfg.selection.delta},
        metrics={"n_selected": len(selected)},
    )
    return outputs + ["topk.csv", "selection.json"]


if __name__ == "__main__":
    from pipelines.cli import main

    raise SystemExit(main(["run", "--stage", "pretrain"]))
