import json

import numpy as np
import pandas as pd
import pytest

from pipelines.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, REGISTRY, execute_stage, main
from pipelines.context import StageContext
from pipelines.inference_pipeline import _physical_channels, eval_inputs
from src.channel import ArrayConfig, channel_matrix, generate_scene, normalize_channels
from src.config import CONFIGS_DIR, ExperimentConfig, load_experiment_config
from src.pipeline_utils import STAGES, ArtifactStore

SMOKE = str(CONFIGS_DIR / "smoke.json")


def test_report_without_upstream_is_a_dependency_error(tmp_path):
    out = tmp_path / "empty"
    assert main(["report", "--out", str(out)]) == EXIT_DEPENDENCY
    assert not out.exists()


def test_unknown_config_key_is_a_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"momentum": 0.9}}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_zero_threads_is_a_config_error(tmp_path):
    assert main(["generate", "--threads", "0", "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_eval_reads_stored_channels_in_physical_units(tmp_path):
    array = ArrayConfig(n_bs=32)
    physical = channel_matrix(generate_scene(20, array, seed=2, los_fraction=0.5), array)
    normalized, scale = normalize_channels(physical)
    store = ArtifactStore(tmp_path).ensure()
    np.save(store.path("channels_real.npy"), normalized)
    store.path("channel_scale.json").write_text(json.dumps({"real": scale}))
    ctx = StageContext(ExperimentConfig(output_dir=str(tmp_path)), store, methods=["exhaustive"])
    np.testing.assert_allclose(_physical_channels(ctx), physical, rtol=1e-12)
    assert eval_inputs(ctx) == ["channels_real.npy", "channel_scale.json", "real.btds"]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["run", "--config", SMOKE, "--out", str(out)]) == EXIT_OK
    return out


@pytest.mark.slow
class TestSmokeRun:
    def test_every_stage_recorded(self, smoke_run):
        manifest = json.loads((smoke_run / "manifest.json").read_text())
        assert sorted(manifest["stages"]) == sorted(STAGES)
        assert (smoke_run / "resolved_config.json").exists()
        assert (smoke_run / "figure_data.parquet").exists()
        assert np.max(np.abs(np.load(smoke_run / "channels_real.npy"))) == pytest.approx(1.0, abs=1e-12)

    def test_rerun_is_byte_identical(self, smoke_run, tmp_path):
        out = tmp_path / "again"
        assert main(["run", "--config", SMOKE, "--out", str(out)]) == EXIT_OK
        first = json.loads((smoke_run / "manifest.json").read_text())
        second = json.loads((out / "manifest.json").read_text())
        assert first == second

    def test_report_tables_carry_frame_note(self, smoke_run):
        assert (smoke_run / "effective_se.csv").read_text().startswith("# t_frame_ms=10")

    def test_single_method_eval(self, smoke_run):
        assert main(["eval", "--config", SMOKE, "--out", str(smoke_run), "--method", "exhaustive"]) == EXIT_OK
        sweep = pd.read_csv(smoke_run / "sweep_exhaustive.csv")
        assert (sweep["n_measurements"] == 128).all()
        assert pd.read_csv(smoke_run / "metrics.csv")["method"].tolist() == ["exhaustive"]

    def test_epsilon_override(self, smoke_run):
        assert main(["dknn", "--config", SMOKE, "--out", str(smoke_run), "--epsilon", "0.25"]) == EXIT_OK
        robustness = pd.read_csv(smoke_run / "robustness.csv")
        assert (robustness["epsilon"] == 0.25).all()

    def test_only_stale_stages_rerun(self, smoke_run):
        # restore the default method set and epsilon first
        assert main(["run", "--config", SMOKE, "--out", str(smoke_run)]) == EXIT_OK
        (smoke_run / "metrics.csv").unlink()
        ctx = StageContext(load_experiment_config(SMOKE).model_copy(update={"output_dir": str(smoke_run)}), ArtifactStore(smoke_run))
        ran = {name: execute_stage(REGISTRY[name], ctx) for name in STAGES[: STAGES.index("eval") + 1]}
        assert ran == {name: name == "eval" for name in ran}
