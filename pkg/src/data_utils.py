import logging
import math
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from fractions import Fraction
from pathlib import Path
from typing import Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from src.channel import ArrayConfig, Scene, channel_matrix
from src.codebook import Codebook, beam_gains
from src.errors import ArtifactFormatError, ConfigError, DomainError, ShapeError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"BTDS"
DATASET_VERSION = 1
# received powers below this (mW) are clipped before converting to dBm
POWER_FLOOR_MW = 1e-20


class Split(IntEnum):
    TRAIN = 0
    HOLDOUT = 1
    TEST = 2


class Origin(IntEnum):
    TWIN = 0
    REAL = 1


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(np.maximum(mw, POWER_FLOOR_MW))


@dataclass(frozen=True)
class MeasurementConfig:
    tx_power_dbm: float = 30.0
    noise_dbm_range: Tuple[float, float] = (-114.0, -94.0)
    noiseless_labels: bool = True
    noise_enabled: bool = True
    feature_scale: Literal["linear", "db"] = "linear"

    def __post_init__(self):
        low, high = self.noise_dbm_range
        if low > high:
            raise ConfigError(f"noise range low {low} exceeds high {high}")
        if self.feature_scale not in ("linear", "db"):
            raise ConfigError(f"feature_scale must be 'linear' or 'db', got {self.feature_scale}")

    @property
    def tx_power_mw(self) -> float:
        return float(dbm_to_mw(self.tx_power_dbm))

    @property
    def reference_noise_mw(self) -> float:
        """Noise power at the midpoint (in dBm) of the noise range."""
        return float(dbm_to_mw(0.5 * sum(self.noise_dbm_range)))

    def noiseless(self) -> "MeasurementConfig":
        return replace(self, noise_enabled=False)


def received_power(
    channels: np.ndarray,
    beams: np.ndarray,
    mc: MeasurementConfig,
    rng: np.random.Generator,
    noise_mw: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    |sqrt(P) h^H w + z|^2 for each channel row and beam column, in mW.

    One noise power per channel row, uniform in dBm over the noise range unless
    ``noise_mw`` is given.
    """
    channels = np.atleast_2d(channels)
    signal = math.sqrt(mc.tx_power_mw) * (np.conj(channels) @ beams)
    if not mc.noise_enabled:
        return np.abs(signal) ** 2
    if noise_mw is None:
        noise_mw = dbm_to_mw(rng.uniform(*mc.noise_dbm_range, size=channels.shape[0]))
    sigma = np.sqrt(np.broadcast_to(noise_mw, (channels.shape[0],)) / 2.0)[:, None]
    z = sigma * (rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape))
    return np.abs(signal + z) ** 2


def rssi_features(
    h: np.ndarray, sensing: Codebook, mc: MeasurementConfig, seed: int
) -> np.ndarray:
    """
    RSSI reported for each sensing beam, x_i = |sqrt(P) h^H w_i + z_i|^2 (mW).

    Args:
        h (np.ndarray): Physical channel of one UE (length N).
        sensing (Codebook): Sensing beams that are swept.
        mc (MeasurementConfig): Transmit power and noise range.
        seed (int): Seed of the noise draw.

    Returns:
        np.ndarray: Linear received power per sensing beam.
    """
    rng = np.random.default_rng(seed)
    return received_power(np.asarray(h), sensing.vectors, mc, rng)[0]


def optimal_label(h: np.ndarray, candidates: Codebook) -> int:
    """Noise-free exhaustive search; ties resolve to the lowest beam index."""
    return int(np.argmax(beam_gains(np.asarray(h), candidates)))


def optimal_labels(channels: np.ndarray, candidates: Codebook) -> np.ndarray:
    return np.argmax(beam_gains(channels, candidates), axis=1)


def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, ...]:
    """Round-half-up split sizes in exact arithmetic; the last split takes the rest."""
    sizes = [int(math.floor(Fraction(str(f)) * n + Fraction(1, 2))) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ConfigError(f"split fractions {fractions} do not fit {n} rows")
    return tuple(sizes)


@dataclass(frozen=True, eq=False)
class BeamDataset:
    """
    Standardized RSSI features with their optimal O-DFT beam labels.

    ``mean`` and ``scale`` are the per-column statistics that were used for
    standardization, so ``raw_features()`` recovers the measured values.
    """

    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    origin: np.ndarray
    ue_index: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    n_classes: int = 128
    feature_scale: str = "linear"

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ShapeError(f"features must be a matrix, got shape {self.features.shape}")
        for name in ("labels", "split", "origin", "ue_index"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have one entry per row ({n})")
        if self.mean.shape != (self.n_features,) or self.scale.shape != (self.n_features,):
            raise ShapeError("mean and scale must have one entry per feature column")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DomainError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DomainError("features must be finite")

    @classmethod
    def from_arrays(
        cls,
        features: np.ndarray,
        labels: np.ndarray,
        split: Optional[np.ndarray] = None,
        n_classes: int = 128,
        origin: Origin = Origin.TWIN,
    ) -> "BeamDataset":
        """Wrap already standardized arrays; rows default to the train split."""
        features = np.asarray(features, dtype=np.float32)
        n, m = features.shape
        return cls(
            features=features,
            labels=np.asarray(labels, dtype=np.int64),
            split=np.full(n, Split.TRAIN, np.uint8) if split is None else np.asarray(split, np.uint8),
            origin=np.full(n, origin, np.uint8),
            ue_index=np.arange(n, dtype=np.int64),
            mean=np.zeros(m),
            scale=np.ones(m),
            n_classes=n_classes,
        )

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def rows(self, split: Split) -> Tuple[np.ndarray, np.ndarray]:
        mask = self.split == split
        return self.features[mask], self.labels[mask]

    def subset(self, mask: np.ndarray) -> "BeamDataset":
        return replace(
            self,
            features=self.features[mask],
            labels=self.labels[mask],
            split=self.split[mask],
            origin=self.origin[mask],
            ue_index=self.ue_index[mask],
        )

    def select_columns(self, columns: Sequence[int]) -> "BeamDataset":
        columns = np.asarray(columns, dtype=int)
        if columns.size == 0:
            raise ConfigError("at least one feature column must be selected")
        return replace(
            self,
            features=np.ascontiguousarray(self.features[:, columns]),
            mean=self.mean[columns],
            scale=self.scale[columns],
        )

    def raw_features(self) -> np.ndarray:
        return self.features.astype(np.float64) * self.scale + self.mean

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=[f"x{i}" for i in range(self.n_features)])
        frame["label"] = self.labels
        frame["split"] = [Split(s).name.lower() for s in self.split]
        frame["origin"] = [Origin(o).name.lower() for o in self.origin]
        frame["ue_index"] = self.ue_index
        return frame

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path


def _standardize(
    raw: np.ndarray, train_mask: np.ndarray, reference: Optional[BeamDataset]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if reference is not None:
        if reference.n_features != raw.shape[1]:
            raise ShapeError(
                f"reference has {reference.n_features} columns, data has {raw.shape[1]}"
            )
        mean, scale = reference.mean, reference.scale
        return (raw - mean) / scale, mean, scale
    scaler = StandardScaler().fit(raw[train_mask])
    return scaler.transform(raw), scaler.mean_, scaler.scale_


def build_dataset(
    scene: Scene,
    sensing: Codebook,
    candidates: Codebook,
    mc: MeasurementConfig,
    n_samples: int,
    origin: Origin,
    seed: int,
    cfg: ArrayConfig = ArrayConfig(),
    split_fractions: Sequence[float] = (0.7, 0.1, 0.2),
    reference: Optional[BeamDataset] = None,
) -> BeamDataset:
    """
    Sample (UE, noise) rows from a scene and label them with the best O-DFT beam.

    UEs are drawn by cycling seeded permutations of the scene, so every UE
    appears before any repeats. Features are standardized with the train-split
    statistics, or with ``reference``'s when given (the real site is scaled the
    way the twin-trained model expects).

    Raises:
        ConfigError: If ``n_samples`` is not positive.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be at least 1, got {n_samples}")

    rows_ss, noise_ss, split_ss = np.random.SeedSequence(seed).spawn(3)
    rows_rng = np.random.default_rng(rows_ss)
    reps = math.ceil(n_samples / scene.n_ue)
    ue_index = np.concatenate([rows_rng.permutation(scene.n_ue) for _ in range(reps)])[:n_samples]

    channels = channel_matrix(scene, cfg)
    sampled = channels[ue_index]
    noise_rng = np.random.default_rng(noise_ss)
    noise_mw = dbm_to_mw(noise_rng.uniform(*mc.noise_dbm_range, size=n_samples))
    power = received_power(sampled, sensing.vectors, mc, noise_rng, noise_mw=noise_mw)

    if mc.noiseless_labels:
        labels = optimal_labels(channels, candidates)[ue_index]
    else:
        labels = np.argmax(
            received_power(sampled, candidates.vectors, mc, noise_rng, noise_mw=noise_mw), axis=1
        )

    sizes = split_sizes(n_samples, split_fractions)
    split = np.empty(n_samples, dtype=np.uint8)
    order = np.random.default_rng(split_ss).permutation(n_samples)
    split[order] = np.repeat(np.arange(len(sizes), dtype=np.uint8), sizes)

    raw = mw_to_dbm(power) if mc.feature_scale == "db" else power
    features, mean, scale = _standardize(raw, split == Split.TRAIN, reference)

    ds = BeamDataset(
        features=features.astype(np.float32),
        labels=labels.astype(np.int64),
        split=split,
        origin=np.full(n_samples, origin, dtype=np.uint8),
        ue_index=ue_index.astype(np.int64),
        mean=np.asarray(mean, dtype=np.float64),
        scale=np.asarray(scale, dtype=np.float64),
        n_classes=candidates.n_beams,
        feature_scale=mc.feature_scale,
    )
    logger.info(
        f"Built {Origin(origin).name.lower()} dataset: {n_samples} rows, "
        f"{ds.n_features} features, splits {sizes}"
    )
    return ds


def restandardize(ds: BeamDataset, mean: np.ndarray, scale: np.ndarray) -> BeamDataset:
    """Re-express a dataset in another set of standardization statistics."""
    raw = ds.raw_features()
    return replace(
        ds,
        features=((raw - mean) / scale).astype(np.float32),
        mean=np.asarray(mean, dtype=np.float64),
        scale=np.asarray(scale, dtype=np.float64),
    )


def augment(
    real: BeamDataset, twin: BeamDataset, real_fraction: float, seed: int = 0
) -> BeamDataset:
    """
    Twin train rows plus a seeded floor(real_fraction * n) sample of real train rows.

    Holdout and test rows stay purely real. Real rows are moved onto the twin's
    standardization when the two differ.

    Raises:
        ConfigError: If ``real_fraction`` is outside [0, 1].
    """
    if not 0.0 <= real_fraction <= 1.0:
        raise ConfigError(f"real_fraction must lie in [0, 1], got {real_fraction}")
    if real.n_features != twin.n_features:
        raise ShapeError(
            f"real has {real.n_features} features, twin has {twin.n_features}"
        )
    if not (np.array_equal(real.mean, twin.mean) and np.array_equal(real.scale, twin.scale)):
        real = restandardize(real, twin.mean, twin.scale)

    real_train = np.flatnonzero(real.split == Split.TRAIN)
    n_pick = int(math.floor(Fraction(str(real_fraction)) * len(real_train)))
    picked = np.sort(np.random.default_rng(seed).choice(real_train, n_pick, replace=False))
    real_eval = np.flatnonzero(real.split != Split.TRAIN)
    twin_train = twin.subset(twin.split == Split.TRAIN)
    real_part = real.subset(np.concatenate([picked, real_eval]))

    logger.info(
        f"Augmented {twin_train.n_rows} twin train rows with {n_pick} of "
        f"{len(real_train)} real train rows"
    )
    return replace(
        twin,
        features=np.concatenate([twin_train.features, real_part.features]),
        labels=np.concatenate([twin_train.labels, real_part.labels]),
        split=np.concatenate([twin_train.split, real_part.split]),
        origin=np.concatenate([twin_train.origin, real_part.origin]),
        ue_index=np.concatenate([twin_train.ue_index, real_part.ue_index]),
    )


# ---------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<4sHIIHB")
_SCALES = {"linear": 0, "db": 1}


def save_dataset(ds: BeamDataset, path: Union[str, Path]) -> Path:
    """Write the binary dataset file (little endian, row-major float32 features)."""
    path = Path(path)
    if ds.n_classes > np.iinfo(np.uint16).max:
        raise ConfigError(f"{ds.n_classes} classes do not fit u16 labels")
    header = _HEADER.pack(
        DATASET_MAGIC,
        DATASET_VERSION,
        ds.n_rows,
        ds.n_features,
        ds.n_classes,
        _SCALES[ds.feature_scale],
    )
    path.write_bytes(
        b"".join(
            [
                header,
                ds.mean.astype("<f8").tobytes(),
                ds.scale.astype("<f8").tobytes(),
                np.ascontiguousarray(ds.features, dtype="<f4").tobytes(),
                ds.labels.astype("<u2").tobytes(),
                ds.split.astype("u1").tobytes(),
                ds.origin.astype("u1").tobytes(),
                ds.ue_index.astype("<u4").tobytes(),
            ]
        )
    )
    return path


def load_dataset(path: Union[str, Path]) -> BeamDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ArtifactFormatError(f"{path} is too short to be a dataset file")
    magic, version, n, m, n_classes, scale_code = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise ArtifactFormatError(f"{path} has magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise ArtifactFormatError(f"unsupported dataset version {version} in {path}")

    offset = _HEADER.size

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr

    mean = take("<f8", m).astype(np.float64)
    scale = take("<f8", m).astype(np.float64)
    features = take("<f4", n * m).reshape(n, m).astype(np.float32)
    labels = take("<u2", n).astype(np.int64)
    split = take("u1", n).copy()
    origin = take("u1", n).copy()
    ue_index = take("<u4", n).astype(np.int64)
    feature_scale = {v: k for k, v in _SCALES.items()}[scale_code]
    return BeamDataset(
        features=features,
        labels=labels,
        split=split,
        origin=origin,
        ue_index=ue_index,
        mean=mean,
        scale=scale,
        n_classes=n_classes,
        feature_scale=feature_scale,
    )
