"""
Shapley-value attribution of the beam classifier's outputs to its sensing beams.

Absent features are filled in from background reference rows, so the value of a
coalition S is the mean model output over references with the features in S
taken from the explained sample.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.data_utils import BeamDataset
from src.errors import ConfigError, EstimatorError
from src.mlp import MlpModel, TrainConfig, forward, train

logger = logging.getLogger(__name__)

OutputFn = Callable[[np.ndarray], np.ndarray]
# rows pushed through the model per call
EVAL_CHUNK_ROWS = 65536


@dataclass(frozen=True)
class ShapConfig:
    n_background_refs: int = 64
    estimator: Literal["auto", "exact", "permutation"] = "auto"
    n_permutations: int = 2048
    target: Literal["logit", "probability"] = "logit"
    antithetic: bool = True
    max_exact_features: int = 14
    n_jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_background_refs < 1:
            raise ConfigError(f"n_background_refs must be at least 1, got {self.n_background_refs}")
        if self.n_permutations < 1:
            raise ConfigError(f"n_permutations must be at least 1, got {self.n_permutations}")
        if self.estimator not in ("auto", "exact", "permutation"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.target not in ("logit", "probability"):
            raise ConfigError(f"unknown attribution target {self.target!r}")


def output_function(model: Union[MlpModel, OutputFn], target: str = "logit") -> OutputFn:
    """Map rows of features to the attributed outputs (logits or probabilities)."""
    if isinstance(model, MlpModel):
        if target == "probability":
            return lambda X: forward(model, X).probs
        return lambda X: forward(model, X).logits
    return model


def _coalition_values(f: OutputFn, x: np.ndarray, masks: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Value of every coalition in ``masks`` (K x M booleans), shape (K, Q)."""
    n_refs, n_features = refs.shape
    per_chunk = max(1, EVAL_CHUNK_ROWS // n_refs)
    out = []
    for start in range(0, len(masks), per_chunk):
        block = masks[start : start + per_chunk]
        rows = np.where(block[:, None, :], x[None, None, :], refs[None, :, :])
        values = f(rows.reshape(-1, n_features))
        out.append(values.reshape(len(block), n_refs, -1).mean(axis=1))
    return np.concatenate(out, axis=0)


def value_function(
    model: Union[MlpModel, OutputFn],
    x: np.ndarray,
    subset: Sequence[int],
    refs: np.ndarray,
    target: str = "logit",
) -> np.ndarray:
    """
    Mean output over references with the features in ``subset`` set to ``x``.

    The empty subset gives the base value, the full subset gives f(x).
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.zeros((1, x.size), dtype=bool)
    subset = np.asarray(subset, dtype=int)
    if subset.size and (subset.min() < 0 or subset.max() >= x.size):
        raise ConfigError(f"subset indices must lie in [0, {x.size})")
    mask[0, subset] = True
    return _coalition_values(output_function(model, target), x, mask, np.asarray(refs, float))[0]


def shapley_exact(
    model: Union[MlpModel, OutputFn],
    x: np.ndarray,
    refs: np.ndarray,
    cfg: ShapConfig = ShapConfig(),
) -> np.ndarray:
    """
    Exact Shapley values by enumerating all 2^M coalitions, shape (M, Q).

    Raises:
        EstimatorError: If M exceeds ``cfg.max_exact_features``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n > cfg.max_exact_features:
        raise EstimatorError(
            f"exact enumeration supports at most {cfg.max_exact_features} features, "
            f"got {n}; use estimator='permutation'"
        )
    codes = np.arange(2**n)
    masks = ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    values = _coalition_values(output_function(model, cfg.target), x, masks, np.asarray(refs, float))
    sizes = masks.sum(axis=1)
    weights = np.array(
        [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    )

    psi = np.zeros((n, values.shape[1]))
    for i in range(n):
        bit = 1 << i
        without = codes[(codes & bit) == 0]
        psi[i] = weights[sizes[without]] @ (values[without | bit] - values[without])
    return psi


def _permutations(rng: np.random.Generator, n_perm: int, n_features: int, antithetic: bool) -> np.ndarray:
    if not antithetic:
        return np.array([rng.permutation(n_features) for _ in range(n_perm)])
    base = np.array([rng.permutation(n_features) for _ in range((n_perm + 1) // 2)])
    paired = np.empty((2 * len(base), n_features), dtype=int)
    paired[0::2] = base
    paired[1::2] = base[:, ::-1]
    return paired[:n_perm]


def shapley_sampled(
    model: Union[MlpModel, OutputFn],
    x: np.ndarray,
    refs: np.ndarray,
    cfg: ShapConfig = ShapConfig(),
    seed: Optional[int] = None,
) -> np.ndarray:
    """
    Permutation-sampling Shapley estimate, shape (M, Q).

    Each sampled ordering adds features one at a time and credits every
    feature with its marginal change; with ``cfg.antithetic`` orderings come
    in reversed pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    n = x.size
    f = output_function(model, cfg.target)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    perms = _permutations(rng, cfg.n_permutations, n, cfg.antithetic)

    ends = _coalition_values(f, x, np.array([np.zeros(n, bool), np.ones(n, bool)]), refs)
    v_empty, v_full = ends[0], ends[1]
    if n == 1:
        return (v_full - v_empty)[None, :]
    psi = np.zeros((n, v_full.size))

    per_chunk = max(1, EVAL_CHUNK_ROWS // (max(n - 1, 1) * len(refs)))
    for start in range(0, len(perms), per_chunk):
        chunk = perms[start : start + per_chunk]
        ranks = np.argsort(chunk, axis=1)
        # prefix k of each ordering holds the features ranked below k
        prefix = ranks[:, None, :] < np.arange(1, n)[None, :, None]
        inner = _coalition_values(f, x, prefix.reshape(-1, n), refs)
        inner = inner.reshape(len(chunk), n - 1, -1)
        chain = np.concatenate(
            [
                np.broadcast_to(v_empty, (len(chunk), 1, v_empty.size)),
                inner,
                np.broadcast_to(v_full, (len(chunk), 1, v_full.size)),
            ],
            axis=1,
        )
        np.add.at(psi, chunk.ravel(), np.diff(chain, axis=1).reshape(-1, v_full.size))
    return psi / len(perms)


def aggregate(psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean |psi| per feature over samples and classes, and the descending ranking.

    Args:
        psi (np.ndarray): Attributions shaped (D, M, Q) or (M, Q).

    Returns:
        Tuple[np.ndarray, np.ndarray]: psi_bar (M,) and a stable descending ranking.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.size == 0:
        raise ConfigError("cannot aggregate an empty attribution tensor")
    if psi.ndim == 2:
        psi = psi[None]
    psi_bar = np.abs(psi).mean(axis=(0, 2))
    ranking = np.argsort(-psi_bar, kind="stable")
    return psi_bar, ranking


def select_features(psi_bar: np.ndarray, delta: float) -> np.ndarray:
    """
    Smallest top-ranked prefix whose mean |SHAP| mass reaches delta of the total.

    The selection is never empty and grows monotonically with ``delta``.
    """
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"delta must lie in (0, 1], got {delta}")
    psi_bar = np.asarray(psi_bar, dtype=np.float64)
    ranking = np.argsort(-psi_bar, kind="stable")
    total = psi_bar.sum()
    if total <= 0.0:
        return ranking[:1]
    mass = np.cumsum(psi_bar[ranking])
    reached = np.flatnonzero(mass >= delta * total - 1e-12 * total)
    n_keep = int(reached[0]) + 1 if reached.size else len(ranking)
    return ranking[:n_keep]


@dataclass
class ShapReport:
    psi_bar: np.ndarray
    ranking: np.ndarray
    selected: np.ndarray
    delta: float
    estimator: str
    psi: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def reselect(self, delta: float) -> "ShapReport":
        return ShapReport(
            psi_bar=self.psi_bar,
            ranking=self.ranking,
            selected=select_features(self.psi_bar, delta),
            delta=delta,
            estimator=self.estimator,
            psi=self.psi,
            extra=dict(self.extra),
        )

    def to_dict(self) -> dict:
        return {
            "psi_bar": [float(v) for v in self.psi_bar],
            "ranking": [int(i) for i in self.ranking],
            "selected": [int(i) for i in self.selected],
            "delta": float(self.delta),
            "estimator": self.estimator,
            **self.extra,
        }

    def bar_frame(self) -> pd.DataFrame:
        """Mean |SHAP| per sensing beam in ranking order."""
        chosen = set(int(i) for i in self.selected)
        return pd.DataFrame(
            {
                "rank": np.arange(1, len(self.ranking) + 1),
                "beam": self.ranking,
                "mean_abs_shap": self.psi_bar[self.ranking],
                "selected": [int(i) in chosen for i in self.ranking],
            }
        )

    def save(self, directory: Union[str, Path], prefix: str = "shap") -> list:
        """Write ``{prefix}_report.json``, ``{prefix}_bar.csv`` and, if present, ``{prefix}_psi.npy``."""
        directory = Path(directory)
        paths = [directory / f"{prefix}_report.json", directory / f"{prefix}_bar.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        self.bar_frame().to_csv(paths[1], index=False)
        if self.psi is not None:
            psi_path = directory / f"{prefix}_psi.npy"
            np.save(psi_path, self.psi)
            paths.append(psi_path)
        return paths

    @classmethod
    def load(cls, directory: Union[str, Path], prefix: str = "shap") -> "ShapReport":
        directory = Path(directory)
        doc = json.loads((directory / f"{prefix}_report.json").read_text())
        psi_path = directory / f"{prefix}_psi.npy"
        known = {"psi_bar", "ranking", "selected", "delta", "estimator"}
        return cls(
            psi_bar=np.asarray(doc["psi_bar"]),
            ranking=np.asarray(doc["ranking"], dtype=int),
            selected=np.asarray(doc["selected"], dtype=int),
            delta=doc["delta"],
            estimator=doc["estimator"],
            psi=np.load(psi_path) if psi_path.exists() else None,
            extra={k: v for k, v in doc.items() if k not in known},
        )


def sample_references(background: np.ndarray, n_refs: int, seed: int) -> np.ndarray:
    """Seeded subsample of the background rows used as references."""
    background = np.asarray(background, dtype=np.float64)
    if n_refs > len(background):
        raise ConfigError(
            f"n_background_refs={n_refs} exceeds the {len(background)} background rows"
        )
    rng = np.random.default_rng(seed)
    return background[np.sort(rng.choice(len(background), n_refs, replace=False))]


def explain(
    model: Union[MlpModel, OutputFn],
    samples: np.ndarray,
    background: np.ndarray,
    cfg: ShapConfig,
    delta: float,
) -> ShapReport:
    """
    Attribute every sample, rank the sensing beams and select a subset.

    Each sample gets its own seed spawned from ``cfg.seed``, so results do not
    depend on ``cfg.n_jobs``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    ref_ss, sample_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    refs = sample_references(background, cfg.n_background_refs, int(ref_ss.generate_state(1)[0]))
    n_features = samples.shape[1]

    estimator = cfg.estimator
    if estimator == "auto":
        estimator = "exact" if n_features <= cfg.max_exact_features else "permutation"
    seeds = [int(s.generate_state(1)[0]) for s in sample_ss.spawn(len(samples))]
    logger.info(
        f"Explaining {len(samples)} samples over {n_features} features "
        f"with the {estimator} estimator and {len(refs)} references"
    )

    def one(x: np.ndarray, seed: int) -> np.ndarray:
        if estimator == "exact":
            return shapley_exact(model, x, refs, cfg)
        return shapley_sampled(model, x, refs, cfg, seed=seed)

    psi = np.stack(
        Parallel(n_jobs=cfg.n_jobs, prefer="threads")(
            delayed(one)(x, seed) for x, seed in zip(samples, seeds)
        )
    )
    psi_bar, ranking = aggregate(psi)
    selected = select_features(psi_bar, delta)
    logger.info(f"delta={delta}: selected {len(selected)} of {n_features} sensing beams")
    return ShapReport(
        psi_bar=psi_bar,
        ranking=ranking,
        selected=selected,
        delta=delta,
        estimator=estimator,
        psi=psi,
    )


def retrain_reduced(
    ds: BeamDataset,
    selected: Sequence[int],
    tc: TrainConfig,
    init_seed: int = 0,
    hidden: Sequence[int] = (64, 64, 128),
) -> MlpModel:
    """Train a fresh classifier on the selected feature columns only."""
    selected = np.asarray(selected, dtype=int)
    if selected.size == 0:
        raise ConfigError("retrain_reduced needs a non-empty feature selection")
    reduced = ds.select_columns(selected)
    model = MlpModel.initialize(len(selected), ds.n_classes, hidden=hidden, seed=init_seed)
    return train(model, reduced, tc)
