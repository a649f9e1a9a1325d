"""
Beam-search baselines and the alignment metrics they are compared on.

Every search measures noisy RSSI with one noise power per trial, counts the
beams it swept and reports the SNR the chosen beam achieves at the reference
noise power.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.codebook import Codebook, beam_gains, child_indices, quantized_mrt, subarray_beam
from src.data_utils import BeamDataset, MeasurementConfig, dbm_to_mw, received_power
from src.errors import ConfigError, DomainError
from src.mlp import MlpModel, TrainConfig, forward, topk_from_probs, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimingConfig:
    t_s_ms: float = 5.0 / 64.0
    t_frame_ms: float = 10.0
    t_predict_ms: float = 0.0

    def __post_init__(self):
        if not (self.t_s_ms > 0 and self.t_frame_ms > 0):
            raise ConfigError("t_s_ms and t_frame_ms must be positive")
        if self.t_predict_ms < 0:
            raise ConfigError(f"t_predict_ms must be non-negative, got {self.t_predict_ms}")


@dataclass(frozen=True)
class SweepResult:
    chosen_beam: int
    n_measurements: int
    achieved_snr_db: float
    sweep_time_ms: float
    method: str = ""

    def __post_init__(self):
        if self.n_measurements < 1:
            raise ConfigError(f"n_measurements must be at least 1, got {self.n_measurements}")


def sweep_time_ms(n_measurements: int, timing: TimingConfig = TimingConfig()) -> float:
    return n_measurements * timing.t_s_ms


def ia_time_ms(n_measurements: int, k: int, timing: TimingConfig = TimingConfig()) -> float:
    """Initial-access time: (n + k 1{k>1}) t_s + t_predict."""
    extra = k if k > 1 else 0
    return (n_measurements + extra) * timing.t_s_ms + timing.t_predict_ms


def effective_se(snr_linear, timing: TimingConfig, n_measurements: int, k: int = 1):
    """
    Rate left after alignment: ((T_frame - T_IA) / T_frame) log2(1 + SNR).

    Returns 0 when alignment eats the whole frame.
    """
    t_ia = ia_time_ms(n_measurements, k, timing)
    if t_ia >= timing.t_frame_ms:
        return np.zeros_like(np.asarray(snr_linear, dtype=float)) if np.ndim(snr_linear) else 0.0
    return (timing.t_frame_ms - t_ia) / timing.t_frame_ms * np.log2(1.0 + np.asarray(snr_linear))


def average_snr(snr_linear: Sequence[float]) -> float:
    """10 log10 of the mean linear SNR over a policy's results."""
    snr_linear = np.asarray(snr_linear, dtype=float)
    if snr_linear.size == 0:
        raise ConfigError("average_snr needs at least one result")
    return float(10.0 * np.log10(np.mean(snr_linear)))


def sweep_complexity(m_tilde: int, n_users: int, k: int) -> int:
    """Beams swept for N_U users: M~ + N_U k 1{k>1}."""
    return m_tilde + n_users * k * int(k > 1)


def feedback_complexity(m_tilde: int, n_users: int, k: int) -> int:
    """Values fed back by N_U users: N_U M~ + N_U 1{k>1}."""
    return n_users * m_tilde + n_users * int(k > 1)


def achieved_snr(h: np.ndarray, w: np.ndarray, mc: MeasurementConfig) -> np.ndarray:
    """Linear SNR of beam(s) ``w`` on physical channel(s) ``h`` at the reference noise power."""
    return mc.tx_power_mw * beam_gains(h, w) / mc.reference_noise_mw


def _to_db(snr_linear: float) -> float:
    return float(10.0 * np.log10(max(snr_linear, 1e-30)))


def _noise_draw(mc: MeasurementConfig, rng: np.random.Generator) -> float:
    return float(dbm_to_mw(rng.uniform(*mc.noise_dbm_range)))


def _measure(h, beams, mc, rng, noise_mw) -> np.ndarray:
    return received_power(h, beams, mc, rng, noise_mw=noise_mw)[0]


def _result(method, h, w, n, mc, timing) -> SweepResult:
    return SweepResult(
        chosen_beam=-1,
        n_measurements=n,
        achieved_snr_db=_to_db(float(achieved_snr(h, w, mc))),
        sweep_time_ms=sweep_time_ms(n, timing),
        method=method,
    )


def exhaustive_search(
    h: np.ndarray,
    candidates: Codebook,
    mc: MeasurementConfig,
    seed: int,
    timing: TimingConfig = TimingConfig(),
) -> SweepResult:
    """Sweep every narrow beam and keep the strongest noisy RSSI."""
    rng = np.random.default_rng(seed)
    power = _measure(h, candidates.vectors, mc, rng, _noise_draw(mc, rng))
    chosen = int(np.argmax(power))
    result = _result("exhaustive", h, candidates.vectors[:, chosen], candidates.n_beams, mc, timing)
    return _with_beam(result, chosen)


def _with_beam(result: SweepResult, beam: int) -> SweepResult:
    return SweepResult(**{**asdict(result), "chosen_beam": beam})


def hierarchical_search(
    h: np.ndarray,
    wide: Codebook,
    candidates: Codebook,
    mc: MeasurementConfig,
    seed: int,
    timing: TimingConfig = TimingConfig(),
) -> SweepResult:
    """
    Two-tier search: best wide beam, then the best of its ceil(Q / M_w) children.

    Costs M_w + ceil(Q / M_w) measurements.
    """
    rng = np.random.default_rng(seed)
    noise_mw = _noise_draw(mc, rng)
    best_wide = int(np.argmax(_measure(h, wide.vectors, mc, rng, noise_mw)))
    children = child_indices(best_wide, wide.n_beams, candidates.n_beams)
    child_power = _measure(h, candidates.vectors[:, children], mc, rng, noise_mw)
    chosen = int(children[np.argmax(child_power)])
    n = wide.n_beams + math.ceil(candidates.n_beams / wide.n_beams)
    return _with_beam(_result("hierarchical", h, candidates.vectors[:, chosen], n, mc, timing), chosen)


def binary_search(
    h: np.ndarray,
    candidates: Codebook,
    mc: MeasurementConfig,
    seed: int,
    timing: TimingConfig = TimingConfig(),
) -> SweepResult:
    """
    Halve the candidate range log2(Q) times, sweeping two beams per level.

    A range of s candidates is covered by a subarray beam of min(N, Q / s)
    elements steered at the range centre; single candidates use the narrow beam
    itself. Costs 2 + 2 log2(Q / 2) measurements.
    """
    q = candidates.n_beams
    if q < 2 or q & (q - 1):
        raise ConfigError(f"binary search needs a power-of-two codebook, got Q={q}")
    n_bs = candidates.n_antennas
    rng = np.random.default_rng(seed)
    noise_mw = _noise_draw(mc, rng)

    lo, hi = 0, q
    n_measurements = 0
    while hi - lo > 1:
        half = (hi - lo) // 2
        halves = [(lo, lo + half), (lo + half, hi)]
        if half == 1:
            beams = candidates.vectors[:, [lo, lo + 1]]
        else:
            n_active = min(n_bs, q // half)
            beams = np.column_stack(
                [subarray_beam(-1.0 + (a + b) / q, n_active, n_bs) for a, b in halves]
            )
        power = _measure(h, beams, mc, rng, noise_mw)
        n_measurements += 2
        lo, hi = halves[int(np.argmax(power))]
    return _with_beam(
        _result("binary", h, candidates.vectors[:, lo], n_measurements, mc, timing), lo
    )


def evenly_spaced_indices(n_features: int, n_beams: int) -> np.ndarray:
    """(i * Q) // m for i < m: m narrow beams spread evenly over the codebook."""
    if not 1 <= n_features <= n_beams:
        raise ConfigError(f"subset size must lie in [1, {n_beams}], got {n_features}")
    return (np.arange(n_features) * n_beams) // n_features


def fixed_subset_baseline(
    ds: BeamDataset,
    tc: TrainConfig,
    n_features: int,
    init_seed: int = 0,
    hidden: Sequence[int] = (64, 64, 128),
    pretrained: Optional[MlpModel] = None,
) -> MlpModel:
    """
    Classifier on RSSI of an evenly spaced subset of narrow beams.

    ``ds`` holds RSSI over every narrow beam; its columns are sliced here.
    When ``pretrained`` is given it is fine-tuned instead of a fresh model.
    """
    columns = evenly_spaced_indices(n_features, ds.n_features)
    sliced = ds.select_columns(columns)
    model = pretrained or MlpModel.initialize(n_features, ds.n_classes, hidden=hidden, seed=init_seed)
    return train(model, sliced, tc)


def topk_accuracy_from_probs(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    top = topk_from_probs(probs, k)
    return float(np.mean(np.any(top == np.asarray(labels)[:, None], axis=1)))


def topk_accuracy(m: MlpModel, features: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose optimal beam is among the k most probable beams."""
    return topk_accuracy_from_probs(forward(m, features).probs, labels, k)


def learned_search(
    m: MlpModel,
    features: np.ndarray,
    channels: np.ndarray,
    candidates: Codebook,
    mc: MeasurementConfig,
    k: int,
    seed: int,
) -> np.ndarray:
    """
    Beam chosen by the classifier for every row.

    k = 1 takes the top prediction; k > 1 sweeps the k predicted beams with
    noisy RSSI and keeps the strongest.
    """
    top = topk_from_probs(forward(m, features).probs, k)
    if k == 1:
        return top[:, 0]
    rng = np.random.default_rng(seed)
    chosen = np.empty(len(top), dtype=np.int64)
    for i, (h, beams) in enumerate(zip(channels, top)):
        power = _measure(h, candidates.vectors[:, beams], mc, rng, _noise_draw(mc, rng))
        chosen[i] = beams[int(np.argmax(power))]
    return chosen


def codebook_snr(channels: np.ndarray, candidates: Codebook, beams: np.ndarray, mc: MeasurementConfig) -> np.ndarray:
    """Linear SNR of one chosen narrow beam per channel row."""
    w = candidates.vectors[:, beams]
    return mc.tx_power_mw * np.abs(np.sum(np.conj(channels) * w.T, axis=1)) ** 2 / mc.reference_noise_mw


def oracle_snr(channels: np.ndarray, candidates: Codebook, mc: MeasurementConfig) -> np.ndarray:
    """Best codebook SNR per channel (noise-free exhaustive choice)."""
    return mc.tx_power_mw * beam_gains(channels, candidates).max(axis=1) / mc.reference_noise_mw


def svd_bound(channels: np.ndarray, mc: MeasurementConfig, bits: int = 3) -> np.ndarray:
    """SNR of the quantized matched-filter beam with perfect channel knowledge."""
    channels = np.atleast_2d(channels)
    out = np.empty(len(channels))
    for i, h in enumerate(channels):
        if not np.any(h):
            raise DomainError(f"channel {i} is all zeros")
        out[i] = float(achieved_snr(h, quantized_mrt(h, bits), mc))
    return out


def measure_predict_time(m: MlpModel, n_runs: int = 1000, seed: int = 0) -> float:
    """Median wall time (ms) of a single-row forward pass."""
    x = np.random.default_rng(seed).standard_normal(m.n_inputs)
    forward(m, x)
    samples = []
    for _ in range(n_runs):
        start = time.perf_counter()
        forward(m, x)
        samples.append(time.perf_counter() - start)
    return float(np.median(samples) * 1e3)


METRIC_KEYS = ["method", "m_tilde", "k", "noise", "seed"]


def metrics_frame(rows: Iterable[dict]) -> pd.DataFrame:
    """Metric rows sorted by (method, M~, k, noise setting, seed)."""
    frame = pd.DataFrame(list(rows))
    if frame.empty:
        return frame
    missing = [key for key in METRIC_KEYS if key not in frame.columns]
    if missing:
        raise ConfigError(f"metric rows lack key columns {missing}")
    columns = METRIC_KEYS + [c for c in frame.columns if c not in METRIC_KEYS]
    return frame[columns].sort_values(METRIC_KEYS, kind="stable").reset_index(drop=True)


def sweep_frame(results: List[SweepResult], labels: Optional[Sequence[int]] = None) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in results])
    if labels is not None:
        frame["optimal_beam"] = np.asarray(labels, dtype=int)
    return frame
