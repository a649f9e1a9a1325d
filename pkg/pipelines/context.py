from dataclasses import dataclass
from typing import Dict, List, Optional

from src.bench import TimingConfig
from src.channel import ArrayConfig, SceneGeometry, TwinPerturbation
from src.codebook import Codebook, dft_codebook, wide_codebook
from src.config import ExperimentConfig, TrainSection, derive_seed
from src.data_utils import MeasurementConfig
from src.dknn import LshConfig
from src.mlp import TrainConfig
from src.pipeline_utils import ArtifactStore, fingerprint
from src.shap_utils import ShapConfig


@dataclass
class StageContext:
    """Resolved config plus the artifact store a stage reads from and writes to."""

    cfg: ExperimentConfig
    store: ArtifactStore
    epsilon: Optional[float] = None
    methods: Optional[List[str]] = None

    @property
    def n_jobs(self) -> int:
        return self.cfg.threads

    def seed(self, name: str) -> int:
        return derive_seed(self.cfg.seed, name)

    def array(self) -> ArrayConfig:
        a = self.cfg.array
        return ArrayConfig(a.n_bs, a.carrier_hz, a.spacing_wavelengths)

    def geometry(self) -> SceneGeometry:
        s = self.cfg.scene
        return SceneGeometry(
            max_paths=s.max_paths,
            n_scatterers=s.n_scatterers,
            x_range_m=tuple(s.x_range_m),
            y_range_m=tuple(s.y_range_m),
            cluster_spread_m=s.cluster_spread_m,
            nlos_excess_db=tuple(s.nlos_excess_db),
            los_advantage_db=tuple(s.los_advantage_db),
        )

    def twin_perturbation(self) -> TwinPerturbation:
        t = self.cfg.twin
        return TwinPerturbation(t.scatterer_shift_m, t.path_drop_prob, t.gain_jitter_db)

    def measurement(self) -> MeasurementConfig:
        m = self.cfg.measurement
        return MeasurementConfig(
            tx_power_dbm=m.tx_power_dbm,
            noise_dbm_range=tuple(m.noise_dbm_range),
            noiseless_labels=m.noiseless_labels,
            noise_enabled=m.noise_enabled,
            feature_scale=m.feature_scale,
        )

    def train_config(self, section: TrainSection, name: str) -> TrainConfig:
        return TrainConfig(
            learning_rate=section.learning_rate,
            beta1=section.beta1,
            beta2=section.beta2,
            epsilon=section.epsilon,
            epochs=section.epochs,
            batch_size=section.batch_size,
            seed=self.seed(f"shuffle:{name}"),
        )

    def shap_config(self) -> ShapConfig:
        s = self.cfg.shap
        return ShapConfig(
            n_background_refs=s.n_background_refs,
            estimator=s.estimator,
            n_permutations=s.n_permutations,
            target=s.target,
            n_jobs=self.n_jobs,
            seed=self.seed("shap"),
        )

    def lsh_config(self) -> LshConfig:
        d = self.cfg.dknn
        return LshConfig(
            n_tables=d.n_tables,
            n_hash_bits=d.n_hash_bits,
            k=d.k,
            include_logits=d.include_logits,
            exact=d.exact,
            seed=self.seed("lsh"),
        )

    def timing(self, t_predict_ms: float = 0.0) -> TimingConfig:
        t = self.cfg.timing
        return TimingConfig(t_s_ms=t.t_s_ms, t_frame_ms=t.t_frame_ms, t_predict_ms=t_predict_ms)

    def sensing(self) -> Codebook:
        return dft_codebook(self.array(), self.cfg.dataset.sensing_oversampling)

    def candidates(self) -> Codebook:
        return dft_codebook(self.array(), self.cfg.dataset.candidate_oversampling)

    def wide(self) -> Codebook:
        return wide_codebook(self.array(), self.cfg.eval.n_wide)

    def stage_fingerprint(self, stage: str, sections: List[str], upstream: Dict[str, str], extra: Optional[dict] = None) -> str:
        payload = {"stage": stage, "seed": self.cfg.seed, **self.cfg.section_payload(*sections)}
        payload.update(extra or {})
        return fingerprint(payload, upstream)
