"""Multiresolution grid geometry: level resolutions, voxel corners, index transform."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

# relative guard against 63.999999-style representation error before flooring
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class EncodingConfig:
    """Hyperparameters of the mixed-feature encoding.

    ``L`` levels are split into ``N`` contiguous groups of ``W = L // N`` levels;
    each group owns one hash table of at most ``T`` entries of ``F`` features.
    ``dim`` is 3 for radiance fields and 2 for the image-fitting task.
    """

    L: int = 16
    N: int = 8
    T: int = 2**19
    F: int = 2
    N_min: int = 16
    N_max: int = 1024
    dim: int = 3
    levels: "GridLevelSet" = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("L", "N", "T", "F", "N_min", "N_max", "dim"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.L < 2:
            raise ConfigError("L must be at least 2")
        if not 1 <= self.N <= self.L:
            raise ConfigError("N must lie in [1, L]")
        if self.L % self.N:
            raise ConfigError("L must be divisible by N")
        if self.T & (self.T - 1) or not 2**14 <= self.T <= 2**24:
            raise ConfigError("T must be a power of two in [2^14, 2^24]")
        if self.F < 1:
            raise ConfigError("F must be at least 1")
        if self.N_min < 1:
            raise ConfigError("N_min must be at least 1")
        if self.N_max < self.N_min:
            raise ConfigError("N_max must be >= N_min")
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")
        object.__setattr__(self, "levels", GridLevelSet.build(self.N_min, self.N_max, self.L))

    @property
    def W(self) -> int:
        return self.L // self.N

    @property
    def resolutions(self) -> list[int]:
        return self.levels.resolutions

    def group_of(self, level: int) -> int:
        """1-based table index owning the 1-based ``level``."""
        return (level - 1) // self.W + 1

    def group_finest_level(self, table: int) -> int:
        return table * self.W

    def capacities(self) -> list[int]:
        return [group_capacity(self, n) for n in range(1, self.N + 1)]


def compute_growth_factor(N_min: int, N_max: int, L: int) -> float:
    if L < 2:
        raise ConfigError("L must be at least 2")
    if N_min < 1 or N_max < N_min:
        raise ConfigError("need N_max >= N_min >= 1")
    return (N_max / N_min) ** (1.0 / (L - 1))


def level_resolution(l: int, N_min: int, b: float, L: int | None = None) -> int:
    """Resolution of 1-based level ``l``: floor(N_min * b^(l-1))."""
    if l < 1 or (L is not None and l > L):
        raise ConfigError(f"level {l} out of range")
    return int(math.floor(N_min * b ** (l - 1) * (1.0 + _FLOOR_EPS)))


@dataclass(frozen=True)
class GridLevelSet:
    b: float
    resolutions: list[int]

    @classmethod
    def build(cls, N_min: int, N_max: int, L: int) -> "GridLevelSet":
        b = compute_growth_factor(N_min, N_max, L)
        return cls(b, [level_resolution(l, N_min, b, L) for l in range(1, L + 1)])


@dataclass(frozen=True)
class GridIndex:
    level: int
    coords: tuple[int, ...]


@dataclass(frozen=True)
class CornerSet:
    corners: list[GridIndex]
    weights: np.ndarray


def voxel_corners(x, resolution: int, level: int = 1) -> CornerSet:
    """Corners of the voxel containing ``x`` and their multilinear weights.

    Works for 2D and 3D points. The base corner is clamped so that a point on
    the upper boundary still has all corners within ``0..resolution``.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < -1e-9) or np.any(x > 1 + 1e-9):
        raise DomainError(f"point {x.tolist()} outside the unit domain")
    x = np.clip(x, 0.0, 1.0)
    scaled = x * resolution
    base = np.minimum(np.floor(scaled), resolution - 1).astype(np.int64)
    frac = scaled - base
    corners, weights = [], []
    for offset in itertools.product((0, 1), repeat=len(x)):
        w = 1.0
        for axis, bit in enumerate(offset):
            w *= frac[axis] if bit else 1.0 - frac[axis]
        corners.append(GridIndex(level, tuple(int(c) for c in base + offset)))
        weights.append(w)
    return CornerSet(corners, np.array(weights))


def index_transform(coords, N_i: int, N_j: int) -> tuple[int, ...]:
    """Map integer corner coordinates from a grid of resolution ``N_i`` to ``N_j``.

    Multiply first, then floor-divide, so no floating-point rounding enters.
    """
    return tuple(int(c) * N_j // N_i for c in coords)


def group_capacity(config: EncodingConfig, n: int) -> int:
    """Entry count of table ``n`` (1-based): min(T, (finest resolution + 1)^dim)."""
    if not 1 <= n <= config.N:
        raise ConfigError(f"table index {n} out of range [1, {config.N}]")
    finest = config.resolutions[config.group_finest_level(n) - 1]
    return min(config.T, (finest + 1) ** config.dim)
