import json
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from pipelines.context import StageContext
from src.bench import (
    TimingConfig,
    average_snr,
    binary_search,
    codebook_snr,
    effective_se,
    exhaustive_search,
    hierarchical_search,
    learned_search,
    measure_predict_time,
    metrics_frame,
    oracle_snr,
    svd_bound,
    sweep_frame,
)
from src.data_utils import MeasurementConfig, Split, load_dataset
from src.dknn import (
    build_index,
    calibrate,
    classify_batch,
    records_frame,
    reliability_from_scores,
    robustness_summary,
)
from src.experiment_utils import log_stage_to_mlflow
from src.inference import get_model_predictions
from src.mlp import MlpModel, fgsm, load_model

logger = logging.getLogger(__name__)

DKNN_OUTPUTS = [
    "credibility_clean.csv",
    "credibility_adversarial.csv",
    "reliability.csv",
    "robustness.csv",
]
SEARCHES = ["exhaustive", "hierarchical", "binary"]


def dknn_epsilon(ctx: StageContext) -> float:
    return ctx.cfg.dknn.epsilon if ctx.epsilon is None else ctx.epsilon


def _eval_rows(n_available: int, n_wanted: int, seed: int) -> np.ndarray:
    n = min(n_wanted, n_available)
    return np.sort(np.random.default_rng(seed).choice(n_available, n, replace=False))


def run_dknn(ctx: StageContext) -> List[str]:
    """
    Credibility of the fine-tuned model on clean and FGSM-perturbed real test rows.

    The index holds the augmented train rows; the real holdout split calibrates.
    """
    cfg, store = ctx.cfg, ctx.store
    epsilon = dknn_epsilon(ctx)
    model = load_model(store.path("finetuned_model.btmd"))
    augmented = load_dataset(store.path("augmented.btds"))
    real = load_dataset(store.path("real.btds"))

    # Step 1: Index and calibration
    logger.info("Step 1: Building the DkNN index and calibrating on real holdout rows...")
    index = build_index(model, augmented, ctx.lsh_config())
    calibration = calibrate(index, real)

    # Step 2: Clean and adversarial inputs
    test_features, test_labels = real.rows(Split.TEST)
    rows = _eval_rows(len(test_labels), cfg.dknn.n_eval, ctx.seed("dknn:rows"))
    clean, labels = test_features[rows].astype(np.float64), test_labels[rows]
    adversarial = fgsm(model, clean, labels, epsilon)
    logger.info(f"Step 2: Classifying {len(rows)} clean and FGSM (epsilon={epsilon:g}) rows...")

    frames, scores = {}, {}
    for name, inputs in [("clean", clean), ("adversarial", adversarial)]:
        records = classify_batch(index, calibration, inputs, n_jobs=ctx.n_jobs)
        frames[name] = records_frame(records, labels, row_ids=rows)
        frames[name].to_csv(store.path(f"credibility_{name}.csv"), index=False)
        softmax = get_model_predictions(model, inputs, k=1)
        scores[name] = {
            "dknn": (frames[name]["credibility"].to_numpy(), frames[name]["prediction"].to_numpy() == labels),
            "softmax": (softmax["confidence"].to_numpy(), softmax["beam_1"].to_numpy() == labels),
        }

    # Step 3: Reliability bins and robustness summary
    logger.info("Step 3: Writing reliability bins and the robustness summary...")
    reliability = []
    for inputs, by_scorer in scores.items():
        for scorer, (score, correct) in by_scorer.items():
            bins = reliability_from_scores(score, correct, cfg.dknn.n_bins)
            bins.insert(0, "inputs", inputs)
            bins.insert(0, "scorer", scorer)
            reliability.append(bins)
    pd.concat(reliability, ignore_index=True).to_csv(store.path("reliability.csv"), index=False)

    summary = robustness_summary(
        frames["clean"]["credibility"].to_numpy(),
        frames["adversarial"]["credibility"].to_numpy(),
        cfg.dknn.thresholds,
    )
    summary.insert(0, "epsilon", epsilon)
    summary.to_csv(store.path("robustness.csv"), index=False)
    for row in summary.itertuples():
        logger.info(
            f"credibility < {row.threshold:g}: clean {row.clean_below:.3f}, "
            f"adversarial {row.adversarial_below:.3f}"
        )

    log_stage_to_mlflow(
        "dknn",
        params={"epsilon": epsilon, "k": cfg.dknn.k, "n_tables": cfg.dknn.n_tables},
        metrics={
            "clean_mean_credibility": float(summary["clean_mean_credibility"].iloc[0]),
            "adversarial_mean_credibility": float(summary["adversarial_mean_credibility"].iloc[0]),
        },
    )
    return DKNN_OUTPUTS


def eval_methods(ctx: StageContext) -> List[str]:
    return list(ctx.methods or ctx.cfg.eval.methods)


def eval_inputs(ctx: StageContext) -> List[str]:
    """Artifacts the eval stage reads for the selected methods."""
    methods = eval_methods(ctx)
    names = ["channels_real.npy", "channel_scale.json", "real.btds"]
    if "learned" in methods or "fixed" in methods:
        names += ["selection.json", "real_narrow.btds"]
        for m in ctx.cfg.selection.m_grid:
            if "learned" in methods:
                names.append(f"reduced_m{m}.btmd")
            if "fixed" in methods:
                names.append(f"fixed_m{m}.btmd")
    return names


def eval_outputs(ctx: StageContext) -> List[str]:
    return [f"sweep_{m}.csv" for m in eval_methods(ctx) if m in SEARCHES] + ["metrics.csv"]


def _metric_row(
    method: str,
    m_tilde: int,
    k: int,
    snr_linear: np.ndarray,
    correct: np.ndarray,
    ctx: StageContext,
    timing: Optional[TimingConfig],
) -> Dict:
    low, high = ctx.cfg.measurement.noise_dbm_range
    if timing is None:
        se = np.log2(1.0 + snr_linear)
    else:
        se = effective_se(snr_linear, timing, m_tilde, k)
    return {
        "method": method,
        "m_tilde": int(m_tilde),
        "k": int(k),
        "noise": f"{low:g}..{high:g}dBm",
        "seed": ctx.cfg.seed,
        "n_trials": int(len(snr_linear)),
        "accuracy": float(np.mean(correct)),
        "average_snr_db": average_snr(snr_linear),
        "effective_se": float(np.mean(se)),
        "t_frame_ms": ctx.cfg.timing.t_frame_ms,
    }


def _physical_channels(ctx: StageContext) -> np.ndarray:
    """Real-site channels in physical units (stored peak-normalized)."""
    scale = json.loads(ctx.store.path("channel_scale.json").read_text())["real"]
    return np.load(ctx.store.path("channels_real.npy")) * scale


def _t_predict(ctx: StageContext, model: MlpModel) -> float:
    configured = ctx.cfg.timing.t_predict_ms
    return measure_predict_time(model, seed=ctx.seed("timing")) if configured is None else configured


def _learned_rows(
    ctx: StageContext,
    method: str,
    models: Dict[int, MlpModel],
    columns: Dict[int, Sequence[int]],
    features: np.ndarray,
    channels: np.ndarray,
    labels: np.ndarray,
    mc: MeasurementConfig,
) -> List[Dict]:
    rows = []
    candidates = ctx.candidates()
    for m, model in models.items():
        timing = ctx.timing(_t_predict(ctx, model))
        sliced = features[:, np.asarray(columns[m], dtype=int)]
        for k in ctx.cfg.eval.ks:
            chosen = learned_search(
                model, sliced, channels, candidates, mc, k, ctx.seed(f"eval:{method}:m{m}:k{k}")
            )
            snr = codebook_snr(channels, candidates, chosen, mc)
            rows.append(_metric_row(method, m, k, snr, chosen == labels, ctx, timing))
    return rows


def run_eval(ctx: StageContext) -> List[str]:
    """Beam-search baselines and learned policies on the same real test UEs."""
    cfg, store = ctx.cfg, ctx.store
    methods = eval_methods(ctx)
    mc = ctx.measurement()
    real = load_dataset(store.path("real.btds"))

    # Step 1: Real test UEs and their physical channels
    test = np.flatnonzero(real.split == Split.TEST)
    picked = test[_eval_rows(len(test), cfg.eval.n_trials, ctx.seed("eval:rows"))]
    channels = _physical_channels(ctx)[real.ue_index[picked]]
    labels = real.labels[picked]
    logger.info(f"Step 1: Evaluating {', '.join(methods)} on {len(picked)} real test rows...")

    rows = []
    outputs = []
    # Step 2: Classic sweeps, one noise seed per trial
    trial_seeds = [
        int(s.generate_state(1)[0])
        for s in np.random.SeedSequence(ctx.seed("eval:trials")).spawn(len(picked))
    ]
    timing = ctx.timing(0.0)
    candidates, wide = ctx.candidates(), ctx.wide()
    searches = {
        "exhaustive": lambda h, seed: exhaustive_search(h, candidates, mc, seed, timing),
        "hierarchical": lambda h, seed: hierarchical_search(h, wide, candidates, mc, seed, timing),
        "binary": lambda h, seed: binary_search(h, candidates, mc, seed, timing),
    }
    for method in [m for m in methods if m in SEARCHES]:
        results = [searches[method](h, seed) for h, seed in zip(channels, trial_seeds)]
        frame = sweep_frame(results, labels)
        frame.to_csv(store.path(f"sweep_{method}.csv"), index=False)
        outputs.append(f"sweep_{method}.csv")
        n = int(frame["n_measurements"].iloc[0])
        snr = 10.0 ** (frame["achieved_snr_db"].to_numpy() / 10.0)
        rows.append(_metric_row(method, n, 1, snr, frame["chosen_beam"].to_numpy() == labels, ctx, timing))
        logger.info(f"{method}: {n} measurements, accuracy {rows[-1]['accuracy']:.3f}")

    # Step 3: Learned policies over the sensing-beam grid
    if "learned" in methods or "fixed" in methods:
        grid = json.loads(store.path("selection.json").read_text())["grid"]
        if "learned" in methods:
            models = {m: load_model(store.path(f"reduced_m{m}.btmd")) for m in cfg.selection.m_grid}
            columns = {m: grid[str(m)]["shap"] for m in cfg.selection.m_grid}
            rows += _learned_rows(ctx, "learned", models, columns, real.features[picked], channels, labels, mc)
        if "fixed" in methods:
            narrow = load_dataset(store.path("real_narrow.btds"))
            models = {m: load_model(store.path(f"fixed_m{m}.btmd")) for m in cfg.selection.m_grid}
            columns = {m: grid[str(m)]["fixed"] for m in cfg.selection.m_grid}
            rows += _learned_rows(ctx, "fixed", models, columns, narrow.features[picked], channels, labels, mc)

    # Step 4: Perfect-CSI references without alignment overhead
    if "oracle" in methods:
        snr = oracle_snr(channels, candidates, mc)
        rows.append(_metric_row("oracle", 0, 1, snr, np.ones(len(labels), dtype=bool), ctx, None))
    if "svd" in methods:
        snr = svd_bound(channels, mc, cfg.eval.svd_bits)
        rows.append(_metric_row("svd", 0, 1, snr, np.ones(len(labels), dtype=bool), ctx, None))

    metrics_frame(rows).to_csv(store.path("metrics.csv"), index=False)
    log_stage_to_mlflow(
        "eval",
        params={"methods": ",".join(methods), "n_trials": len(picked)},
        metrics={f"{r['method']}_m{r['m_tilde']}_k{r['k']}_se": r["effective_se"] for r in rows},
    )
    return outputs + ["metrics.csv"]


if __name__ == "__main__":
    from pipelines.cli import main

    raise SystemExit(main(["dknn"]))
