import logging
from typing import List

import numpy as np

from pipelines.context import StageContext
from src.data_utils import Split, load_dataset
from src.experiment_utils import log_stage_to_mlflow
from src.mlp import load_model
from src.shap_utils import explain

logger = logging.getLogger(__name__)

OUTPUTS = ["shap_report.json", "shap_bar.csv", "shap_psi.npy"]


def run_shap(ctx: StageContext) -> List[str]:
    """Attribute the twin model's decisions to its sensing beams."""
    cfg, store = ctx.cfg, ctx.store
    model = load_model(store.path("twin_model.btmd"))
    twin = load_dataset(store.path("twin.btds"))
    background = load_dataset(store.path("background.btds"))

    # Step 1: Pick the explained rows from the twin test split
    test_features, _ = twin.rows(Split.TEST)
    n_explain = min(cfg.shap.n_explain, len(test_features))
    rng = np.random.default_rng(ctx.seed("shap:rows"))
    rows = np.sort(rng.choice(len(test_features), n_explain, replace=False))
    logger.info(f"Step 1: Explaining {n_explain} twin test rows...")

    # Step 2: Shapley values against background references
    report = explain(model, test_features[rows], background.features, ctx.shap_config(), cfg.selection.delta)
    report.extra["n_explain"] = int(n_explain)
    report.save(store.root, prefix="shap")
    logger.info(f"Step 2: Top sensing beams by mean |SHAP|: {[int(i) for i in report.ranking[:12]]}")
    logger.info(f"delta={cfg.selection.delta:g}: |selected|={len(report.selected)}")

    log_stage_to_mlflow(
        "shap",
        params={"estimator": report.estimator, "n_explain": n_explain},
        metrics={"n_selected": len(report.selected)},
    )
    return OUTPUTS


if __name__ == "__main__":
    from pipelines.cli import main

    raise SystemExit(main(["shap"]))
