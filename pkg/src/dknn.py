"""
Deep k-nearest-neighbour credibility for a frozen beam classifier.

Every hidden layer (and optionally the logits) gets its own cosine LSH index
over the training representations. The labels of the k nearest training
points in each space give a nonconformity score per candidate beam, which a
holdout calibration set turns into conformal p-values.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.data_utils import BeamDataset, Split
from src.errors import BuildError, ConfigError
from src.mlp import MlpModel, forward

logger = logging.getLogger(__name__)

ZERO_BUCKET = -1
QUERY_CHUNK = 512


@dataclass(frozen=True)
class LshConfig:
    n_tables: int = 16
    n_hash_bits: int = 12
    k: int = 10
    include_logits: bool = True
    exact: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.n_tables < 1 or self.n_hash_bits < 1:
            raise ConfigError("n_tables and n_hash_bits must be at least 1")


def _unit_rows(data: np.ndarray):
    data = np.asarray(data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = norms == 0.0
    unit = data / np.where(zero, 1.0, norms)[:, None]
    return unit, zero


def hash_layout(padded_dim: int, n_hash_bits: int):
    """
    Number of cross-polytope hashes per table and the dimension of the last one.

    A full hash over d dimensions yields log2(2d) bits; the last hash is cut to
    fewer dimensions so the table key has exactly ``n_hash_bits`` bits.
    """
    bits_per_hash = int(math.log2(padded_dim)) + 1
    n_functions = math.ceil(n_hash_bits / bits_per_hash)
    remaining = n_hash_bits - (n_functions - 1) * bits_per_hash
    return n_functions, 2 ** (remaining - 1)


def _random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


class CosineLsh:
    """
    Cross-polytope LSH tables over unit-normalized rows with exact re-ranking.

    Attributes:
        n_rows: Number of indexed rows.
        n_functions: Hashes concatenated per table.
        last_cp_dim: Rotated coordinates used by the last hash of a table.
    """

    def __init__(self, data: np.ndarray, n_tables: int = 16, n_hash_bits: int = 12, seed: int = 0):
        if len(data) == 0:
            raise BuildError("cannot index an empty set of representations")
        self.unit, self.zero = _unit_rows(data)
        self.n_rows, self.dim = self.unit.shape
        self.padded_dim = 1 << max(0, (self.dim - 1).bit_length())
        self.n_functions, self.last_cp_dim = hash_layout(self.padded_dim, n_hash_bits)
        rng = np.random.default_rng(seed)
        self.rotations = [
            [_random_rotation(rng, self.padded_dim) for _ in range(self.n_functions)]
            for _ in range(n_tables)
        ]
        self.tables = [self._bucket(self._codes(self.unit, self.zero, t)) for t in range(n_tables)]

    def _codes(self, unit: np.ndarray, zero: np.ndarray, table: int) -> np.ndarray:
        padded = np.zeros((len(unit), self.padded_dim))
        padded[:, : self.dim] = unit
        codes = np.zeros(len(unit), dtype=np.int64)
        for f, rotation in enumerate(self.rotations[table]):
            y = padded @ rotation.T
            if f == self.n_functions - 1:
                y = y[:, : self.last_cp_dim]
            width = y.shape[1]
            axis = np.argmax(np.abs(y), axis=1)
            vertex = axis + width * (y[np.arange(len(y)), axis] < 0)
            codes = codes * (2 * width) + vertex
        codes[zero] = ZERO_BUCKET
        return codes

    @staticmethod
    def _bucket(codes: np.ndarray):
        order = np.argsort(codes, kind="stable")
        keys, starts = np.unique(codes[order], return_index=True)
        ends = np.append(starts[1:], len(codes))
        return keys, starts, ends, order

    def _candidates(self, query_codes: Sequence[int]) -> np.ndarray:
        found = []
        for (keys, starts, ends, order), code in zip(self.tables, query_codes):
            pos = np.searchsorted(keys, code)
            if pos < len(keys) and keys[pos] == code:
                found.append(order[starts[pos] : ends[pos]])
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(found))

    def _rerank(self, q_unit: np.ndarray, q_zero: bool, candidates: np.ndarray, k: int) -> np.ndarray:
        if q_zero:
            sims = self.zero[candidates].astype(np.float64)
        else:
            sims = self.unit[candidates] @ q_unit
        order = np.lexsort((candidates, -sims))
        return candidates[order[:k]]

    def query(self, queries: np.ndarray, k: int, exact: bool = False) -> np.ndarray:
        """
        k nearest indexed rows by cosine similarity for every query row.

        Falls back to a full scan when the LSH candidates number fewer than k.
        Ties go to the lower row index.
        """
        q_unit, q_zero = _unit_rows(np.atleast_2d(queries))
        k = min(k, self.n_rows)
        everything = np.arange(self.n_rows)
        if exact:
            return np.array([self._rerank(u, z, everything, k) for u, z in zip(q_unit, q_zero)])

        codes = np.column_stack(
            [self._codes(q_unit, q_zero, t) for t in range(len(self.tables))]
        )
        out = np.empty((len(q_unit), k), dtype=np.int64)
        for i, (u, z) in enumerate(zip(q_unit, q_zero)):
            candidates = self._candidates(codes[i])
            if len(candidates) < k:
                candidates = everything
            out[i] = self._rerank(u, z, candidates, k)
        return out


@dataclass(eq=False)
class LayerIndex:
    model: MlpModel
    spaces: List[CosineLsh]
    labels: np.ndarray
    cfg: LshConfig

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def n_spaces(self) -> int:
        return len(self.spaces)

    @property
    def k(self) -> int:
        return min(self.cfg.k, self.n_rows)

    @property
    def n_classes(self) -> int:
        return self.model.n_classes

    def representations(self, features: np.ndarray) -> List[np.ndarray]:
        reps = forward(self.model, np.atleast_2d(features)).layer_reps
        return reps if self.cfg.include_logits else reps[:-1]

    def neighbors(self, features: np.ndarray) -> List[np.ndarray]:
        """Neighbour row ids per representation space, each (n_queries, k)."""
        return [
            space.query(rep, self.cfg.k, exact=self.cfg.exact)
            for space, rep in zip(self.spaces, self.representations(features))
        ]

    def neighbor_labels(self, features: np.ndarray) -> List[np.ndarray]:
        return [self.labels[ids] for ids in self.neighbors(features)]


def build_index(m: MlpModel, train: BeamDataset, cfg: LshConfig = LshConfig()) -> LayerIndex:
    """
    Index the train-split representations of ``m`` in every hidden layer (+ logits).

    Raises:
        BuildError: If the dataset has no train rows.
    """
    features, labels = train.rows(Split.TRAIN)
    if len(labels) == 0:
        raise BuildError("cannot build a DkNN index without training rows")
    reps = forward(m, features).layer_reps
    if not cfg.include_logits:
        reps = reps[:-1]
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(reps))
    spaces = [
        CosineLsh(rep, cfg.n_tables, cfg.n_hash_bits, seed=int(s.generate_state(1)[0]))
        for rep, s in zip(reps, seeds)
    ]
    logger.info(
        f"Built DkNN index: {len(labels)} rows, {len(spaces)} spaces, "
        f"{cfg.n_tables} tables x {cfg.n_hash_bits} bits, k={cfg.k}"
    )
    return LayerIndex(model=m, spaces=spaces, labels=labels.copy(), cfg=cfg)


def nonconformity_matrix(idx: LayerIndex, features: np.ndarray, neighbor_labels=None) -> np.ndarray:
    """Nonconformity of every candidate label for every row, shape (n, Q)."""
    if neighbor_labels is None:
        neighbor_labels = idx.neighbor_labels(features)
    n = neighbor_labels[0].shape[0]
    agree = np.zeros((n, idx.n_classes), dtype=np.int64)
    rows = np.repeat(np.arange(n), neighbor_labels[0].shape[1])
    for labels in neighbor_labels:
        np.add.at(agree, (rows, labels.ravel()), 1)
    return idx.n_spaces * idx.k - agree


def nonconformity(idx: LayerIndex, x: np.ndarray, j: int) -> int:
    """Number of neighbours, summed over all spaces, whose label differs from ``j``."""
    if not 0 <= j < idx.n_classes:
        raise ConfigError(f"candidate label must lie in [0, {idx.n_classes}), got {j}")
    return int(nonconformity_matrix(idx, x)[0, j])


@dataclass(frozen=True, eq=False)
class CalibrationScores:
    scores: np.ndarray

    def __post_init__(self):
        if len(self.scores) == 0:
            raise BuildError("calibration needs at least one holdout score")

    def __len__(self) -> int:
        return len(self.scores)


def calibrate_arrays(idx: LayerIndex, features: np.ndarray, labels: np.ndarray) -> CalibrationScores:
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise BuildError("calibration needs at least one holdout row")
    scores = nonconformity_matrix(idx, features)[np.arange(len(labels)), labels]
    return CalibrationScores(scores=np.sort(scores))


def calibrate(idx: LayerIndex, holdout: BeamDataset) -> CalibrationScores:
    """Nonconformity of every holdout row at its true label."""
    features, labels = holdout.rows(Split.HOLDOUT)
    scores = calibrate_arrays(idx, features, labels)
    logger.info(
        f"Calibrated on {len(scores)} holdout rows, median score {np.median(scores.scores):.1f}"
    )
    return scores


def p_values_from_scores(calibration: CalibrationScores, alpha: np.ndarray) -> np.ndarray:
    """p_j = |{c in C : c >= alpha_j}| / |C|."""
    alpha = np.asarray(alpha)
    below = np.searchsorted(calibration.scores, alpha, side="left")
    return (len(calibration) - below) / len(calibration)


def p_values(idx: LayerIndex, calibration: CalibrationScores, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    pv = p_values_from_scores(calibration, nonconformity_matrix(idx, x))
    return pv[0] if x.ndim == 1 else pv


@dataclass
class CredibilityRecord:
    prediction: int
    confidence: float
    credibility: float
    p_values: np.ndarray
    neighbor_labels: List[np.ndarray] = field(default_factory=list)


def record_from_p_values(pv: np.ndarray, neighbor_labels=None) -> CredibilityRecord:
    """Prediction = argmax p (lowest index on ties), credibility = max p, confidence = 1 - second max p."""
    order = np.argsort(-pv, kind="stable")
    second = pv[order[1]] if len(pv) > 1 else 0.0
    return CredibilityRecord(
        prediction=int(order[0]),
        confidence=float(1.0 - second),
        credibility=float(pv[order[0]]),
        p_values=pv,
        neighbor_labels=list(neighbor_labels or []),
    )


def _classify_rows(idx: LayerIndex, calibration: CalibrationScores, features: np.ndarray):
    neighbor_labels = idx.neighbor_labels(features)
    pv = p_values_from_scores(calibration, nonconformity_matrix(idx, features, neighbor_labels))
    return [
        record_from_p_values(pv[i], [labels[i] for labels in neighbor_labels])
        for i in range(len(pv))
    ]


def classify(idx: LayerIndex, calibration: CalibrationScores, x: np.ndarray) -> CredibilityRecord:
    return _classify_rows(idx, calibration, np.atleast_2d(x))[0]


def classify_batch(
    idx: LayerIndex, calibration: CalibrationScores, features: np.ndarray, n_jobs: int = 1
) -> List[CredibilityRecord]:
    """Classify many rows; chunks run on joblib threads and come back in row order."""
    features = np.atleast_2d(features)
    chunks = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_classify_rows)(idx, calibration, features[s : s + QUERY_CHUNK])
        for s in range(0, len(features), QUERY_CHUNK)
    )
    return [record for chunk in chunks for record in chunk]


def records_frame(
    records: Sequence[CredibilityRecord],
    true_labels: Sequence[int],
    row_ids: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "row_id": np.arange(len(records)) if row_ids is None else np.asarray(row_ids),
            "prediction": [r.prediction for r in records],
            "true_label": np.asarray(true_labels, dtype=int),
            "confidence": [r.confidence for r in records],
            "credibility": [r.credibility for r in records],
        }
    )


def _bin_index(scores: np.ndarray, n_bins: int) -> np.ndarray:
    # bin s covers (s/S, (s+1)/S]; a score of exactly 0 goes to bin 0
    raw = np.ceil(np.asarray(scores, dtype=np.float64) * n_bins - 1e-9).astype(int) - 1
    return np.clip(raw, 0, n_bins - 1)


def reliability_from_scores(scores: np.ndarray, correct: np.ndarray, n_bins: int = 10) -> pd.DataFrame:
    """
    Accuracy per score bin; empty bins get count 0 and NaN accuracy.

    Works for DkNN credibility as well as softmax confidence.
    """
    if n_bins < 1:
        raise ConfigError(f"n_bins must be at least 1, got {n_bins}")
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    bins = _bin_index(scores, n_bins)
    rows = []
    for s in range(n_bins):
        in_bin = bins == s
        count = int(in_bin.sum())
        rows.append(
            {
                "bin": s,
                "lower": s / n_bins,
                "upper": (s + 1) / n_bins,
                "count": count,
                "accuracy": float(correct[in_bin].mean()) if count else float("nan"),
                "mean_score": float(scores[in_bin].mean()) if count else float("nan"),
            }
        )
    return pd.DataFrame(rows)


def reliability_diagram(
    records: Sequence[CredibilityRecord], true_labels: Sequence[int], n_bins: int = 10
) -> pd.DataFrame:
    credibility = np.array([r.credibility for r in records])
    correct = np.array([r.prediction for r in records]) == np.asarray(true_labels)
    return reliability_from_scores(credibility, correct, n_bins)


def robustness_summary(
    clean_credibility: np.ndarray, adversarial_credibility: np.ndarray, thresholds: Sequence[float]
) -> pd.DataFrame:
    """Fraction of each set below every credibility threshold, plus mean credibilities."""
    clean = np.asarray(clean_credibility, dtype=np.float64)
    adversarial = np.asarray(adversarial_credibility, dtype=np.float64)
    if clean.size == 0 or adversarial.size == 0:
        raise ConfigError("robustness evaluation needs non-empty clean and adversarial sets")
    rows = []
    for t in thresholds:
        clean_below = float(np.mean(clean < t))
        adv_below = float(np.mean(adversarial < t))
        rows.append(
            {
                "threshold": float(t),
                "clean_below": clean_below,
                "adversarial_below": adv_below,
                "ratio": adv_below / clean_below if clean_below > 0 else float("nan"),
                "clean_mean_credibility": float(clean.mean()),
                "adversarial_mean_credibility": float(adversarial.mean()),
            }
        )
    return pd.DataFrame(rows)


def robustness_eval(
    idx: LayerIndex,
    calibration: CalibrationScores,
    clean: np.ndarray,
    adversarial: np.ndarray,
    thresholds: Sequence[float],
    n_jobs: int = 1,
) -> pd.DataFrame:
    clean = np.atleast_2d(clean)
    adversarial = np.atleast_2d(adversarial)
    if len(clean) == 0 or len(adversarial) == 0:
        raise ConfigError("robustness evaluation needs non-empty clean and adversarial sets")
    clean_cred = [r.credibility for r in classify_batch(idx, calibration, clean, n_jobs)]
    adv_cred = [r.credibility for r in classify_batch(idx, calibration, adversarial, n_jobs)]
    return robustness_summary(np.array(clean_cred), np.array(adv_cred), thresholds)
