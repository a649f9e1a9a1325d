"""Desk-scale experiments on configs/default.json; each takes minutes."""

import numpy as np
import pandas as pd
import pytest

from pipelines.cli import run_pipeline
from src.config import CONFIGS_DIR, load_experiment_config, parse_experiment_config
from src.pipeline_utils import STAGES

pytestmark = pytest.mark.slow

THROUGH_SELECT = STAGES[: STAGES.index("select") + 1]


def desk_config(out, seed=0, m_grid=None):
    """default.json with a lighter SHAP pass, rooted at ``out``."""
    document = load_experiment_config(CONFIGS_DIR / "default.json").model_dump(mode="json")
    document.update(seed=seed, output_dir=str(out))
    document["shap"].update(n_explain=50, n_permutations=128, n_background_refs=32)
    if m_grid is not None:
        document["selection"]["m_grid"] = m_grid
    return parse_experiment_config(document)


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default")
    return run_pipeline(desk_config(out), [s for s in STAGES if s != "report"]).root


@pytest.fixture(scope="module")
def transfer(default_run):
    return pd.read_csv(default_run / "transfer.csv").pivot(index="k", columns="model", values="accuracy")


def test_topk_accuracy_grows_with_k(transfer):
    for model in transfer.columns:
        assert transfer[model].is_monotonic_increasing


def test_finetuning_beats_the_twin_alone(transfer):
    assert transfer.loc[1, "finetuned"] > transfer.loc[1, "twin_only"]


def test_finetuning_nears_real_only_training(transfer):
    assert transfer.loc[2, "finetuned"] >= transfer.loc[2, "real_only"] - 0.05


def test_adversarial_inputs_lose_credibility(default_run):
    robustness = pd.read_csv(default_run / "robustness.csv").set_index("threshold")
    row = robustness.loc[0.2]
    assert row["adversarial_mean_credibility"] < row["clean_mean_credibility"]
    assert row["adversarial_below"] >= 2 * row["clean_below"]


def test_softmax_stays_confident_on_adversarial_inputs(default_run):
    bins = pd.read_csv(default_run / "reliability.csv").query("inputs == 'adversarial' and count > 0")
    mean = {
        scorer: (group["mean_score"] * group["count"]).sum() / group["count"].sum()
        for scorer, group in bins.groupby("scorer")
    }
    assert mean["softmax"] > mean["dknn"]


def test_shap_beams_beat_evenly_spaced_beams(default_run, tmp_path_factory):
    roots = [default_run] + [
        run_pipeline(desk_config(tmp_path_factory.mktemp(f"seed{s}"), seed=s, m_grid=[8]), THROUGH_SELECT).root
        for s in (1, 2)
    ]
    wins = 0
    for root in roots:
        top1 = pd.read_csv(root / "topk.csv").query("m_tilde == 8 and k == 1").set_index("method")["accuracy"]
        wins += top1["shap"] > top1["fixed"]
    assert wins >= 2


def test_effective_se_peaks_inside_the_sensing_grid(default_run):
    metrics = pd.read_csv(default_run / "metrics.csv")
    learned = metrics.query("method == 'learned' and k == 1").sort_values("m_tilde")
    exhaustive = metrics.query("method == 'exhaustive'")["effective_se"].iloc[0]
    curve = np.append(learned["effective_se"].to_numpy(), exhaustive)
    assert 0 < np.argmax(curve) < len(curve) - 1
