"""
Site-specific narrowband multipath channels for a uniform linear array.

The base station sits at the origin with its array along the x axis and
broadside towards +y. UEs and buildings (scatterers) live in the half plane
y > 0, so every departure angle atan2(x, y) lies in (-pi/2, pi/2).
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ArtifactFormatError, ConfigError, DomainError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
SCENE_MAGIC = b"BTSC"
SCENE_VERSION = 1
MIN_BOUNCE_DEPTH_M = 5.0


@dataclass(frozen=True)
class ArrayConfig:
    n_bs: int = 32
    carrier_hz: float = 28e9
    spacing_wavelengths: float = 0.5

    def __post_init__(self):
        if self.n_bs < 2:
            raise ConfigError(f"n_bs must be at least 2, got {self.n_bs}")
        if not self.spacing_wavelengths > 0:
            raise ConfigError(
                f"spacing_wavelengths must be positive, got {self.spacing_wavelengths}"
            )
        if not self.carrier_hz > 0:
            raise ConfigError(f"carrier_hz must be positive, got {self.carrier_hz}")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz


@dataclass(frozen=True)
class PathComponent:
    gain: complex
    aod_rad: float
    is_los: bool = False
    scatterer_id: int = -1
    bounce_xy: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not abs(self.aod_rad) < math.pi / 2:
            raise DomainError(f"aod_rad must lie in (-pi/2, pi/2), got {self.aod_rad}")
        if not (math.isfinite(self.gain.real) and math.isfinite(self.gain.imag)):
            raise DomainError(f"path gain must be finite, got {self.gain}")


@dataclass(frozen=True)
class Scene:
    ue_positions: Tuple[Tuple[float, float], ...]
    paths_per_ue: Tuple[Tuple[PathComponent, ...], ...]
    rng_seed: int
    los_fraction: float
    scatterer_positions: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if len(self.ue_positions) != len(self.paths_per_ue):
            raise ConfigError(
                f"{len(self.ue_positions)} UE positions but {len(self.paths_per_ue)} path lists"
            )
        for ue, paths in enumerate(self.paths_per_ue):
            if len(paths) == 0:
                raise ConfigError(f"UE {ue} has no propagation paths")

    @property
    def n_ue(self) -> int:
        return len(self.ue_positions)

    def is_los(self, ue: int) -> bool:
        return any(p.is_los for p in self.paths_per_ue[ue])


@dataclass(frozen=True)
class TwinPerturbation:
    scatterer_shift_m: float = 2.0
    path_drop_prob: float = 0.0
    gain_jitter_db: float = 0.0

    def __post_init__(self):
        values = (self.scatterer_shift_m, self.path_drop_prob, self.gain_jitter_db)
        if not all(math.isfinite(v) for v in values):
            raise ConfigError(f"twin perturbation must be finite, got {values}")
        if self.scatterer_shift_m < 0 or self.gain_jitter_db < 0:
            raise ConfigError("scatterer_shift_m and gain_jitter_db must be non-negative")
        if not 0.0 <= self.path_drop_prob <= 1.0:
            raise ConfigError(f"path_drop_prob must lie in [0, 1], got {self.path_drop_prob}")

    @property
    def is_zero(self) -> bool:
        return (
            self.scatterer_shift_m == 0
            and self.path_drop_prob == 0
            and self.gain_jitter_db == 0
        )


@dataclass(frozen=True)
class SceneGeometry:
    """Knobs of the parametric scene generator that stand in for ray tracing."""

    max_paths: int = 5
    n_scatterers: int = 12
    x_range_m: Tuple[float, float] = (-100.0, 100.0)
    y_range_m: Tuple[float, float] = (20.0, 250.0)
    cluster_spread_m: float = 3.0
    nlos_excess_db: Tuple[float, float] = (15.0, 6.0)
    los_advantage_db: Tuple[float, float] = (10.0, 20.0)

    def __post_init__(self):
        if self.max_paths < 1:
            raise ConfigError(f"max_paths must be at least 1, got {self.max_paths}")
        if self.n_scatterers < 1:
            raise ConfigError(f"n_scatterers must be at least 1, got {self.n_scatterers}")
        if self.y_range_m[0] <= 0:
            raise ConfigError("scene must lie in front of the array (y > 0)")


def steering_vector(phi: float, cfg: ArrayConfig) -> np.ndarray:
    """
    ULA response towards departure angle ``phi``.

    Element i is exp(j 2 pi (d / lambda) i sin(phi)) / sqrt(N), so the vector has unit norm.

    Raises:
        DomainError: If |phi| >= pi/2 or phi is not finite.
    """
    if not abs(phi) < math.pi / 2:
        raise DomainError(f"phi must lie in (-pi/2, pi/2), got {phi}")
    return steering_matrix(np.array([phi], dtype=float), cfg)[:, 0]


def steering_matrix(phis: np.ndarray, cfg: ArrayConfig) -> np.ndarray:
    """Steering vectors for several angles, one per column (N x len(phis))."""
    phis = np.asarray(phis, dtype=float)
    i = np.arange(cfg.n_bs)[:, None]
    phase = 2.0 * np.pi * cfg.spacing_wavelengths * i * np.sin(phis)[None, :]
    return np.exp(1j * phase) / np.sqrt(cfg.n_bs)


def free_space_loss_db(distance_m: np.ndarray, cfg: ArrayConfig) -> np.ndarray:
    return 20.0 * np.log10(4.0 * np.pi * np.asarray(distance_m) / cfg.wavelength_m)


def _bearing(xy: Sequence[float]) -> float:
    return math.atan2(xy[0], xy[1])


def _db_to_amplitude(db: float) -> float:
    return 10.0 ** (db / 20.0)


def generate_scene(
    n_ue: int,
    cfg: ArrayConfig,
    seed: int,
    los_fraction: float,
    geometry: SceneGeometry = SceneGeometry(),
) -> Scene:
    """
    Draw a site: buildings, UE positions and per-UE propagation paths.

    LOS UEs get a direct path 10-20 dB stronger than each of their reflected
    paths. NLOS paths bounce off a Laplacian cluster around a building, so
    their departure angles cluster around building bearings.

    Args:
        n_ue: Number of UEs, at least 1.
        cfg: Array configuration (carrier sets the free-space loss).
        seed: Seed for every random draw; equal seeds give identical scenes.
        los_fraction: Probability that a UE has a line-of-sight path.
        geometry: Area, building count and gain distribution.

    Returns:
        Scene: The generated scene.
    """
    if n_ue < 1:
        raise ConfigError(f"n_ue must be at least 1, got {n_ue}")
    if not 0.0 <= los_fraction <= 1.0:
        raise ConfigError(f"los_fraction must lie in [0, 1], got {los_fraction}")

    rng = np.random.default_rng(seed)
    (x_lo, x_hi), (y_lo, y_hi) = geometry.x_range_m, geometry.y_range_m
    scatterers = np.column_stack(
        [
            rng.uniform(x_lo, x_hi, geometry.n_scatterers),
            rng.uniform(y_lo, y_hi, geometry.n_scatterers),
        ]
    )
    ues = np.column_stack([rng.uniform(x_lo, x_hi, n_ue), rng.uniform(y_lo, y_hi, n_ue)])
    excess_mean, excess_std = geometry.nlos_excess_db
    adv_lo, adv_hi = geometry.los_advantage_db

    paths_per_ue: List[Tuple[PathComponent, ...]] = []
    for ue_xy in ues:
        is_los = bool(rng.random() < los_fraction)
        n_paths = int(rng.integers(1, geometry.max_paths + 1))
        n_nlos = n_paths - 1 if is_los else n_paths

        nlos: List[PathComponent] = []
        nlos_db: List[float] = []
        for _ in range(n_nlos):
            sid = int(rng.integers(geometry.n_scatterers))
            bounce = scatterers[sid] + rng.laplace(0.0, geometry.cluster_spread_m, 2)
            bounce[1] = max(bounce[1], MIN_BOUNCE_DEPTH_M)
            length = np.hypot(*bounce) + np.hypot(*(ue_xy - bounce))
            excess = max(0.0, rng.normal(excess_mean, excess_std))
            nlos_db.append(-float(free_space_loss_db(length, cfg)) - excess)
            nlos.append(
                PathComponent(
                    gain=0j,
                    aod_rad=_bearing(bounce),
                    scatterer_id=sid,
                    bounce_xy=(float(bounce[0]), float(bounce[1])),
                )
            )

        if is_los:
            los_db = -float(free_space_loss_db(np.hypot(*ue_xy), cfg))
            # every reflected path sits 10-20 dB below the direct one
            nlos_db = [los_db - rng.uniform(adv_lo, adv_hi) for _ in nlos_db]
            los_phase = rng.uniform(0.0, 2.0 * np.pi)
            los = PathComponent(
                gain=complex(_db_to_amplitude(los_db) * np.exp(1j * los_phase)),
                aod_rad=_bearing(ue_xy),
                is_los=True,
            )
        phases = rng.uniform(0.0, 2.0 * np.pi, len(nlos))
        nlos = [
            replace(p, gain=complex(_db_to_amplitude(db) * np.exp(1j * ph)))
            for p, db, ph in zip(nlos, nlos_db, phases)
        ]
        paths_per_ue.append(tuple([los] + nlos) if is_los else tuple(nlos))

    scene = Scene(
        ue_positions=tuple((float(x), float(y)) for x, y in ues),
        paths_per_ue=tuple(paths_per_ue),
        rng_seed=int(seed),
        los_fraction=float(los_fraction),
        scatterer_positions=tuple((float(x), float(y)) for x, y in scatterers),
    )
    logger.info(
        f"Generated scene with {n_ue} UEs, "
        f"{sum(scene.is_los(u) for u in range(n_ue))} in line of sight"
    )
    return scene


def perturb_to_twin(scene: Scene, pert: TwinPerturbation, seed: int) -> Scene:
    """
    Build the digital-twin copy of a scene.

    Each building moves by ``scatterer_shift_m`` in a random direction and its
    reflected paths follow; reflected paths are dropped with ``path_drop_prob``
    (omitted foliage) and all gains get a uniform +/- ``gain_jitter_db`` error.
    The strongest path of a UE survives when every path would be dropped.
    A zero perturbation returns the scene unchanged.
    """
    if pert.is_zero:
        return scene

    rng = np.random.default_rng(seed)
    n_scat = len(scene.scatterer_positions)
    directions = rng.uniform(0.0, 2.0 * np.pi, n_scat)
    shifts = pert.scatterer_shift_m * np.column_stack([np.sin(directions), np.cos(directions)])
    moved_scatterers = tuple(
        (float(x + dx), float(y + dy))
        for (x, y), (dx, dy) in zip(scene.scatterer_positions, shifts)
    )

    twin_paths: List[Tuple[PathComponent, ...]] = []
    for paths in scene.paths_per_ue:
        drops = rng.random(len(paths)) < pert.path_drop_prob
        jitter_db = rng.uniform(-pert.gain_jitter_db, pert.gain_jitter_db, len(paths))
        kept: List[PathComponent] = []
        for path, drop, jit in zip(paths, drops, jitter_db):
            if drop and not path.is_los:
                continue
            kept.append(_move_path(path, shifts, jit))
        if not kept:
            strongest = int(np.argmax([abs(p.gain) for p in paths]))
            kept.append(_move_path(paths[strongest], shifts, jitter_db[strongest]))
        twin_paths.append(tuple(kept))

    return Scene(
        ue_positions=scene.ue_positions,
        paths_per_ue=tuple(twin_paths),
        rng_seed=scene.rng_seed,
        los_fraction=scene.los_fraction,
        scatterer_positions=moved_scatterers,
    )


def _move_path(path: PathComponent, shifts: np.ndarray, jitter_db: float) -> PathComponent:
    gain = path.gain * _db_to_amplitude(jitter_db)
    if path.bounce_xy is None or path.scatterer_id < 0:
        return replace(path, gain=gain)
    bx = path.bounce_xy[0] + shifts[path.scatterer_id, 0]
    by = max(path.bounce_xy[1] + shifts[path.scatterer_id, 1], 1.0)
    return replace(path, gain=gain, aod_rad=_bearing((bx, by)), bounce_xy=(float(bx), float(by)))


def aod_shift_bound(scene: Scene, shift_m: float) -> float:
    """Largest departure-angle change a building shift of ``shift_m`` can cause."""
    distances = [
        math.hypot(*p.bounce_xy)
        for paths in scene.paths_per_ue
        for p in paths
        if p.bounce_xy is not None
    ]
    if not distances:
        return 0.0
    return math.asin(min(1.0, shift_m / min(distances)))


def synthesize_channel(scene: Scene, ue: int, cfg: ArrayConfig) -> np.ndarray:
    """
    Physical (unnormalized) channel of one UE: h = sum_l alpha_l b(phi_l).

    Raises:
        IndexError: If ``ue`` is not a valid UE index.
    """
    if not 0 <= ue < scene.n_ue:
        raise IndexError(f"UE index {ue} out of range for a scene with {scene.n_ue} UEs")
    paths = scene.paths_per_ue[ue]
    gains = np.array([p.gain for p in paths], dtype=complex)
    aods = np.array([p.aod_rad for p in paths], dtype=float)
    return steering_matrix(aods, cfg) @ gains


def channel_matrix(scene: Scene, cfg: ArrayConfig) -> np.ndarray:
    """Physical channels of all UEs, one row per UE (n_ue x N)."""
    return np.vstack([synthesize_channel(scene, u, cfg) for u in range(scene.n_ue)])


def normalize_channels(channels: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Divide a channel matrix by its largest absolute entry.

    Returns:
        Tuple[np.ndarray, float]: Normalized channels and the scale that was divided out.
    """
    scale = float(np.max(np.abs(channels)))
    if scale == 0.0:
        raise DomainError("cannot normalize an all-zero channel matrix")
    return channels / scale, scale


# ---------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<4sHIQdI")
_PATH = struct.Struct("<dddBiBdd")


def save_scene(scene: Scene, path: Union[str, Path]) -> Path:
    """Write a scene to the versioned binary format."""
    path = Path(path)
    chunks = [
        _HEADER.pack(
            SCENE_MAGIC,
            SCENE_VERSION,
            scene.n_ue,
            scene.rng_seed,
            scene.los_fraction,
            len(scene.scatterer_positions),
        )
    ]
    chunks += [struct.pack("<dd", *xy) for xy in scene.scatterer_positions]
    for xy, paths in zip(scene.ue_positions, scene.paths_per_ue):
        chunks.append(struct.pack("<ddH", xy[0], xy[1], len(paths)))
        for p in paths:
            bx, by = p.bounce_xy if p.bounce_xy is not None else (0.0, 0.0)
            chunks.append(
                _PATH.pack(
                    p.gain.real,
                    p.gain.imag,
                    p.aod_rad,
                    int(p.is_los),
                    p.scatterer_id,
                    int(p.bounce_xy is not None),
                    bx,
                    by,
                )
            )
    path.write_bytes(b"".join(chunks))
    return path


def load_scene(path: Union[str, Path]) -> Scene:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ArtifactFormatError(f"{path} is too short to be a scene file")
    magic, version, n_ue, seed, los_fraction, n_scat = _HEADER.unpack_from(data, 0)
    if magic != SCENE_MAGIC:
        raise ArtifactFormatError(f"{path} has magic {magic!r}, expected {SCENE_MAGIC!r}")
    if version != SCENE_VERSION:
        raise ArtifactFormatError(f"unsupported scene version {version} in {path}")
    offset = _HEADER.size
    scatterers = []
    for _ in range(n_scat):
        scatterers.append(struct.unpack_from("<dd", data, offset))
        offset += 16
    positions, all_paths = [], []
    for _ in range(n_ue):
        x, y, n_paths = struct.unpack_from("<ddH", data, offset)
        offset += struct.calcsize("<ddH")
        paths = []
        for _ in range(n_paths):
            re, im, aod, los, sid, has_bounce, bx, by = _PATH.unpack_from(data, offset)
            offset += _PATH.size
            paths.append(
                PathComponent(
                    gain=complex(re, im),
                    aod_rad=aod,
                    is_los=bool(los),
                    scatterer_id=sid,
                    bounce_xy=(bx, by) if has_bounce else None,
                )
            )
        positions.append((x, y))
        all_paths.append(tuple(paths))
    return Scene(
        ue_positions=tuple(positions),
        paths_per_ue=tuple(all_paths),
        rng_seed=seed,
        los_fraction=los_fraction,
        scatterer_positions=tuple(scatterers),
    )


def scene_to_dict(scene: Scene) -> dict:
    return {
        "rng_seed": scene.rng_seed,
        "los_fraction": scene.los_fraction,
        "scatterer_positions": [list(xy) for xy in scene.scatterer_positions],
        "ue_positions": [list(xy) for xy in scene.ue_positions],
        "paths_per_ue": [
            [
                {
                    "gain": [p.gain.real, p.gain.imag],
                    "aod_rad": p.aod_rad,
                    "is_los": p.is_los,
                    "scatterer_id": p.scatterer_id,
                    "bounce_xy": list(p.bounce_xy) if p.bounce_xy is not None else None,
                }
                for p in paths
            ]
            for paths in scene.paths_per_ue
        ],
    }


def scene_from_dict(document: dict) -> Scene:
    return Scene(
        ue_positions=tuple(tuple(xy) for xy in document["ue_positions"]),
        paths_per_ue=tuple(
            tuple(
                PathComponent(
                    gain=complex(*p["gain"]),
                    aod_rad=p["aod_rad"],
                    is_los=p["is_los"],
                    scatterer_id=p["scatterer_id"],
                    bounce_xy=tuple(p["bounce_xy"]) if p["bounce_xy"] is not None else None,
                )
                for p in paths
            )
            for paths in document["paths_per_ue"]
        ),
        rng_seed=document["rng_seed"],
        los_fraction=document["los_fraction"],
        scatterer_positions=tuple(tuple(xy) for xy in document["scatterer_positions"]),
    )


def dump_scene_json(scene: Scene, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")
    return path
