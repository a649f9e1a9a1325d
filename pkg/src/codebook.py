import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.channel import ArrayConfig
from src.errors import ConfigError, DomainError, ShapeError

logger = logging.getLogger(__name__)


class BeamKind(str, Enum):
    DFT = "dft"
    ODFT = "odft"
    WIDE = "wide_tier1"
    QUANTIZED = "quantized"


CONSTANT_MODULUS_KINDS = (BeamKind.DFT, BeamKind.ODFT, BeamKind.QUANTIZED)


@dataclass(frozen=True, eq=False)
class Codebook:
    """
    Beamforming vectors stored column-wise (N x Q).

    ``centers`` holds the spatial frequency u each beam is steered to
    (u = sin(phi) for half-wavelength spacing), when it has one.
    """

    vectors: np.ndarray
    kind: BeamKind
    oversampling: int = 1
    centers: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ShapeError(f"codebook vectors must be a matrix, got shape {self.vectors.shape}")
        if self.oversampling < 1:
            raise ConfigError(f"oversampling must be at least 1, got {self.oversampling}")
        norms = np.linalg.norm(self.vectors, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-10):
            raise DomainError("every codebook vector must have unit norm")

    @property
    def n_antennas(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_beams(self) -> int:
        return self.vectors.shape[1]

    def subset(self, indices: Sequence[int]) -> "Codebook":
        indices = np.asarray(indices, dtype=int)
        return Codebook(
            vectors=self.vectors[:, indices],
            kind=self.kind,
            oversampling=self.oversampling,
            centers=None if self.centers is None else self.centers[indices],
        )

    def to_frame(self) -> pd.DataFrame:
        rows = {"beam": np.arange(self.n_beams)}
        for i in range(self.n_antennas):
            rows[f"re_{i}"] = self.vectors[i].real
            rows[f"im_{i}"] = self.vectors[i].imag
        return pd.DataFrame(rows)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path


def spatial_grid(n_beams: int, centered: bool = True) -> np.ndarray:
    """Uniform grid of ``n_beams`` spatial frequencies over [-1, 1)."""
    q = np.arange(n_beams)
    if centered:
        return -1.0 + (2.0 * q + 1.0) / n_beams
    return -1.0 + 2.0 * q / n_beams


def _dft_columns(centers: np.ndarray, n_active: int, n_bs: int) -> np.ndarray:
    i = np.arange(n_bs)[:, None]
    cols = np.exp(1j * np.pi * i * centers[None, :]) / math.sqrt(n_active)
    cols[n_active:, :] = 0.0
    return cols


def dft_codebook(cfg: ArrayConfig, oversampling: int = 1, centered: bool = True) -> Codebook:
    """
    (Oversampled) DFT codebook with N * oversampling beams.

    Beam q is steered to u_q = -1 + (2q + 1) / (N * os); with ``centered=False``
    the grid starts at -1 (u_q = -1 + 2q / (N * os)) and the os=1 beams become
    members of every oversampled book.
    """
    if oversampling < 1:
        raise ConfigError(f"oversampling must be at least 1, got {oversampling}")
    centers = spatial_grid(cfg.n_bs * oversampling, centered=centered)
    return Codebook(
        vectors=_dft_columns(centers, cfg.n_bs, cfg.n_bs),
        kind=BeamKind.DFT if oversampling == 1 else BeamKind.ODFT,
        oversampling=oversampling,
        centers=centers,
    )


def subarray_beam(center_u: float, n_active: int, n_bs: int) -> np.ndarray:
    """DFT beam of the first ``n_active`` elements, zero-padded to ``n_bs``."""
    if not 1 <= n_active <= n_bs:
        raise ConfigError(f"n_active must lie in [1, {n_bs}], got {n_active}")
    return _dft_columns(np.array([center_u]), n_active, n_bs)[:, 0]


def wide_codebook(cfg: ArrayConfig, n_wide: int) -> Codebook:
    """
    ``n_wide`` wide beams from an n_wide-element subarray.

    The main lobes tile [-1, 1) on the same centred grid as the DFT book, so
    ``n_wide == n_bs`` gives back the os=1 DFT codebook.
    """
    if n_wide < 1 or cfg.n_bs % n_wide != 0:
        raise ConfigError(f"n_wide={n_wide} must divide n_bs={cfg.n_bs}")
    centers = spatial_grid(n_wide)
    return Codebook(
        vectors=_dft_columns(centers, n_wide, cfg.n_bs),
        kind=BeamKind.WIDE,
        oversampling=1,
        centers=centers,
    )


def child_indices(m: int, n_wide: int, n_beams: int) -> np.ndarray:
    """Narrow beams under wide beam m: {m * r, ..., (m + 1) * r - 1} with r = ceil(Q / M_w)."""
    if not 0 <= m < n_wide:
        raise IndexError(f"wide beam {m} out of range for {n_wide} wide beams")
    r = math.ceil(n_beams / n_wide)
    return np.arange(m * r, min((m + 1) * r, n_beams))


def quantized_mrt(h: np.ndarray, bits: int) -> np.ndarray:
    """
    Matched-filter beam with phases rounded to a ``bits``-bit phase shifter.

    Raises:
        DomainError: For an all-zero channel.
    """
    if bits < 1:
        raise ConfigError(f"bits must be at least 1, got {bits}")
    h = np.asarray(h, dtype=complex)
    if not np.any(h):
        raise DomainError("quantized MRT needs a nonzero channel")
    step = 2.0 * np.pi / 2**bits
    phases = np.round(np.angle(h) / step) * step
    return np.exp(1j * phases) / math.sqrt(h.shape[-1])


def beam_gains(h: np.ndarray, codebook: Union[Codebook, np.ndarray]) -> np.ndarray:
    """|h^H w_q|^2 for every beam; ``h`` may hold one channel or one per row."""
    vectors = codebook.vectors if isinstance(codebook, Codebook) else codebook
    return np.abs(np.conj(h) @ vectors) ** 2
