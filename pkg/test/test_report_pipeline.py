import numpy as np
import pandas as pd
import pytest

from pipelines.report_pipeline import build_tables, long_format, shap_bar_table
from src.experiment_utils import log_stage_to_mlflow
from src.inference import get_model_predictions
from src.mlp import MlpModel, topk


@pytest.fixture
def bars():
    return pd.DataFrame(
        {
            "rank": np.arange(1, 21),
            "beam": np.arange(20)[::-1],
            "mean_abs_shap": np.linspace(2.0, 0.1, 20),
            "selected": [True] * 5 + [False] * 15,
        }
    )


def test_shap_bar_table_sums_the_tail(bars):
    table = shap_bar_table(bars)
    assert len(table) == 13
    assert table["label"].iloc[-1] == "Others" and table["beam"].iloc[-1] == -1
    assert table["mean_abs_shap"].sum() == pytest.approx(bars["mean_abs_shap"].sum())
    assert table["label"].iloc[0] == "beam 19"


def test_shap_bar_table_without_tail(bars):
    assert "Others" not in shap_bar_table(bars.head(5))["label"].tolist()


def test_long_format_splits_numbers_and_labels():
    tables = {"transfer_topk.csv": pd.DataFrame({"model": ["twin_only", "finetuned"], "k": [1, 1], "accuracy": [0.4, 0.6]})}
    frame = long_format(tables)
    assert list(frame.columns) == ["figure", "row", "column", "value", "label"]
    assert len(frame) == 6
    assert set(frame["figure"]) == {"transfer_topk"}
    model_cells = frame[frame["column"] == "model"]
    assert model_cells["label"].tolist() == ["twin_only", "finetuned"]
    assert model_cells["value"].isna().all()
    accuracy = frame[frame["column"] == "accuracy"]
    assert accuracy["value"].tolist() == [0.4, 0.6]


def test_build_tables_names(bars):
    metrics = pd.DataFrame(
        {"method": ["oracle"], "m_tilde": [0], "k": [1], "average_snr_db": [20.0], "effective_se": [6.0]}
    )
    inputs = {
        "transfer.csv": pd.DataFrame({"model": ["twin_only"], "k": [1], "accuracy": [0.5]}),
        "topk.csv": pd.DataFrame({"method": ["shap"], "m_tilde": [4], "k": [1], "accuracy": [0.3]}),
        "shap_bar.csv": bars,
        "metrics.csv": metrics,
        "reliability.csv": pd.DataFrame({"scorer": ["dknn"], "inputs": ["clean"], "bin": [0]}),
    }
    tables = build_tables(inputs)
    assert sorted(tables) == sorted(
        ["transfer_topk.csv", "topk_vs_sensing.csv", "shap_bars.csv", "average_snr.csv", "effective_se.csv", "reliability_bins.csv"]
    )
    assert list(tables["effective_se.csv"].columns) == ["method", "m_tilde", "k", "effective_se"]


def test_model_predictions_frame():
    model = MlpModel.initialize(4, n_classes=6, hidden=(8,), seed=0)
    features = np.random.default_rng(0).standard_normal((5, 4))
    frame = get_model_predictions(model, features, k=2)
    assert list(frame.columns) == ["beam_1", "beam_2", "confidence"]
    np.testing.assert_array_equal(frame[["beam_1", "beam_2"]].to_numpy(), topk(model, features, 2))
    assert frame["confidence"].between(1.0 / 6, 1.0).all()


def test_mlflow_logging_is_off_without_tracking_uri(monkeypatch):
    monkeypatch.setattr("src.config.MLFLOW_TRACKING_URI", None)
    assert log_stage_to_mlflow("eval", params={"a": 1}, metrics={"b": 2.0}) is False
