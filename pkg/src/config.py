import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

load_dotenv()

# Define directories
PARENT_DIR = Path(__file__).resolve().parent.parent
CONFIGS_DIR = PARENT_DIR / "configs"
OUTPUT_DIR = Path(os.getenv("BEAMLAB_OUTPUT_DIR", str(PARENT_DIR / "outputs")))

THREADS = int(os.getenv("BEAMLAB_THREADS", "1"))
LOG_LEVEL = os.getenv("BEAMLAB_LOG_LEVEL", "INFO")
MLFLOW_TRACKING_URI = os.getenv("MLFLOW_TRACKING_URI")
EXPERIMENT_NAME = os.getenv("BEAMLAB_EXPERIMENT_NAME", "beam_alignment_lab")

SCHEMA_VERSION = 1

# Full-site sample counts: twin, real, background
SITE_DATASET_SIZES = (57144, 24485, 8162)
SENSING_GRID = (2, 4, 8, 12, 16, 24, 32)
SHAP_DELTAS = (0.71, 0.82, 0.92, 0.96, 0.99)

SEED_NAMES = (
    "scene",
    "twin",
    "noise",
    "init",
    "shuffle",
    "shap",
    "lsh",
    "fgsm",
    "eval",
    "augment",
)


def derive_seed(root_seed: int, name: str) -> int:
    """
    Derive a named sub-seed from the root seed.

    The name is hashed so adding a new stream never shifts the existing ones.
    """
    tag = int.from_bytes(hashlib.sha256(name.encode("utf8")).digest()[:8], "little")
    state = np.random.SeedSequence([int(root_seed), tag]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SceneSection(_Section):
    n_ue: int = Field(622, ge=1)
    los_fraction: float = Field(0.5, ge=0.0, le=1.0)
    max_paths: int = Field(5, ge=1)
    n_scatterers: int = Field(12, ge=1)
    x_range_m: Tuple[float, float] = (-100.0, 100.0)
    y_range_m: Tuple[float, float] = (20.0, 250.0)
    cluster_spread_m: float = Field(3.0, ge=0.0)
    nlos_excess_db: Tuple[float, float] = (15.0, 6.0)
    los_advantage_db: Tuple[float, float] = (10.0, 20.0)

    @field_validator("y_range_m")
    @classmethod
    def _positive_depth(cls, value):
        if value[0] <= 0 or value[1] < value[0]:
            raise ValueError("y range must be positive and ordered")
        return value


class TwinSection(_Section):
    scatterer_shift_m: float = Field(2.0, ge=0.0)
    path_drop_prob: float = Field(0.3, ge=0.0, le=1.0)
    gain_jitter_db: float = Field(1.0, ge=0.0)


class ArraySection(_Section):
    n_bs: int = Field(32, ge=2)
    carrier_hz: float = Field(28e9, gt=0)
    spacing_wavelengths: float = Field(0.5, gt=0)


class MeasurementSection(_Section):
    tx_power_dbm: float = 30.0
    noise_dbm_range: Tuple[float, float] = (-114.0, -94.0)
    noiseless_labels: bool = True
    noise_enabled: bool = True
    feature_scale: Literal["linear", "db"] = "linear"

    @field_validator("noise_dbm_range")
    @classmethod
    def _ordered(cls, value):
        if value[0] > value[1]:
            raise ValueError("noise range low must not exceed high")
        return value


class DatasetSection(_Section):
    n_twin: int = Field(SITE_DATASET_SIZES[0], ge=1)
    n_real: int = Field(SITE_DATASET_SIZES[1], ge=1)
    n_background: int = Field(SITE_DATASET_SIZES[2], ge=1)
    split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    real_fraction: float = Field(0.3, ge=0.0, le=1.0)
    sensing_oversampling: int = Field(1, ge=1)
    candidate_oversampling: int = Field(4, ge=1)

    @field_validator("split_fractions")
    @classmethod
    def _sums_to_one(cls, value):
        if any(v < 0 for v in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")
        return value


class TrainSection(_Section):
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(256, ge=1)
    hidden: Tuple[int, ...] = (64, 64, 128)


class ShapSection(_Section):
    n_background_refs: int = Field(64, ge=1)
    estimator: Literal["auto", "exact", "permutation"] = "auto"
    n_permutations: int = Field(2048, ge=1)
    target: Literal["logit", "probability"] = "logit"
    n_explain: int = Field(200, ge=1)


class SelectionSection(_Section):
    delta: float = Field(0.96, gt=0, le=1)
    deltas: List[float] = list(SHAP_DELTAS)
    m_grid: List[int] = list(SENSING_GRID)

    @field_validator("deltas")
    @classmethod
    def _delta_range(cls, value):
        if any(not 0 < d <= 1 for d in value):
            raise ValueError("every delta must lie in (0, 1]")
        return value


class DknnSection(_Section):
    k: int = Field(10, ge=1)
    n_tables: int = Field(16, ge=1)
    n_hash_bits: int = Field(12, ge=1)
    include_logits: bool = True
    exact: bool = False
    epsilon: float = Field(0.5, ge=0)
    thresholds: List[float] = [0.2, 0.4]
    n_bins: int = Field(10, ge=1)
    n_eval: int = Field(1000, ge=1)


class TimingSection(_Section):
    t_s_ms: float = Field(5.0 / 64.0, gt=0)
    t_frame_ms: float = Field(10.0, gt=0)
    t_predict_ms: Optional[float] = Field(None, ge=0)


class EvalSection(_Section):
    ks: List[int] = [1, 2, 3, 4, 5]
    n_wide: int = Field(32, ge=1)
    n_trials: int = Field(1000, ge=1)
    svd_bits: int = Field(3, ge=1)
    methods: List[
        Literal["exhaustive", "hierarchical", "binary", "learned", "fixed", "svd", "oracle"]
    ] = ["exhaustive", "hierarchical", "binary", "learned", "fixed", "svd", "oracle"]


class ExperimentConfig(_Section):
    """One structured experiment document; unknown keys are rejected."""

    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    threads: int = Field(THREADS, ge=1)
    output_dir: Optional[str] = None
    scene: SceneSection = SceneSection()
    twin: TwinSection = TwinSection()
    array: ArraySection = ArraySection()
    measurement: MeasurementSection = MeasurementSection()
    dataset: DatasetSection = DatasetSection()
    train: TrainSection = TrainSection()
    finetune: TrainSection = TrainSection()
    shap: ShapSection = ShapSection()
    selection: SelectionSection = SelectionSection()
    dknn: DknnSection = DknnSection()
    timing: TimingSection = TimingSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _grid_fits_array(self):
        if self.array.n_bs % self.eval.n_wide != 0:
            raise ValueError(f"eval.n_wide={self.eval.n_wide} must divide array.n_bs")
        n_sensing = self.array.n_bs * self.dataset.sensing_oversampling
        if any(m < 1 or m > n_sensing for m in self.selection.m_grid):
            raise ValueError(f"selection.m_grid entries must lie in [1, {n_sensing}]")
        return self

    def seed_for(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else OUTPUT_DIR

    def section_payload(self, *names: str) -> dict:
        """JSON-ready dump of the named sections, used for stage fingerprints."""
        dump = self.model_dump(mode="json")
        return {name: dump[name] for name in names}


def _pointer(loc: Tuple[Union[str, int], ...]) -> str:
    return "/" + "/".join(str(part) for part in loc)


def parse_experiment_config(document: dict) -> ExperimentConfig:
    """
    Validate a config document.

    Raises:
        ConfigError: With the JSON pointer of the first invalid key.
    """
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(first["msg"], pointer=_pointer(first["loc"])) from e


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return parse_experiment_config(document)


def dump_experiment_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path
