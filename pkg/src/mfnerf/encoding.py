"""Mixed-feature hash encoding: N shared tables fed by L grid levels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError
from .grid import EncodingConfig, group_capacity
from .kernels import MASK32, PI2, PI3

HASH_PRIMES = (1, PI2, PI3)
INIT_RANGE = 1e-4


def spatial_hash(coords, table_size: int) -> int:
    """XOR of prime-multiplied coordinates, each product wrapped to 32 bits."""
    h = 0
    for c, prime in zip(coords, HASH_PRIMES):
        h ^= (int(c) * prime) & MASK32
    return h % table_size


@dataclass
class FeatureTableBank:
    """All tables stored back to back in one ``(entries, F)`` array.

    ``tables[n]`` is a view into ``params``; ``grads`` mirrors ``params`` and
    ``touched`` lists the sorted entry ids that received gradient since the
    last :meth:`zero_grad`.
    """

    config: EncodingConfig
    params: np.ndarray
    grads: np.ndarray = field(default=None)

    def __post_init__(self):
        self.offsets = np.concatenate([[0], np.cumsum(self.config.capacities())]).astype(np.int64)
        expected = (int(self.offsets[-1]), self.config.F)
        if self.params.shape != expected:
            raise ShapeError(f"bank params shape {self.params.shape}, expected {expected}")
        if self.grads is None:
            self.grads = np.zeros_like(self.params)
        self.touched_mask = np.zeros(len(self.params), dtype=bool)
        cfg = self.config
        levels = np.arange(1, cfg.L + 1)
        groups = (levels - 1) // cfg.W  # 0-based table per level
        self.level_res = np.array(cfg.resolutions, dtype=np.int64)
        self.level_gres = self.level_res[(groups + 1) * cfg.W - 1]
        self.level_offset = self.offsets[groups]
        self.level_cap = np.diff(self.offsets)[groups]

    @property
    def tables(self) -> list[np.ndarray]:
        return [self.params[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    @property
    def touched(self) -> np.ndarray:
        return np.flatnonzero(self.touched_mask)

    def zero_grad(self) -> None:
        t = self.touched
        self.grads[t] = 0
        self.touched_mask[t] = False

    def astype(self, dtype) -> "FeatureTableBank":
        return FeatureTableBank(self.config, self.params.astype(dtype))

    def copy(self) -> "FeatureTableBank":
        bank = FeatureTableBank(self.config, self.params.copy(), self.grads.copy())
        bank.touched_mask[:] = self.touched_mask
        return bank


def init_tables(config: EncodingConfig, seed: int, dtype=np.float32) -> FeatureTableBank:
    """Uniform [-1e-4, 1e-4] features from a Philox (counter-based) stream."""
    entries = sum(config.capacities())
    rng = np.random.Generator(np.random.Philox(seed))
    values = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(entries, config.F))
    return FeatureTableBank(config, np.clip(values.astype(dtype), -INIT_RANGE, INIT_RANGE))


class EncodeCache(NamedTuple):
    """Hashed entry ids and interpolation weights, both shaped (points, L, corners)."""

    index: np.ndarray
    weights: np.ndarray


def _as_points(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ShapeError(f"points must have {dim} coordinates, got shape {x.shape}")
    if np.any(x < -1e-9) or np.any(x > 1 + 1e-9):
        raise DomainError("query point outside the unit domain")
    return np.ascontiguousarray(np.clip(x, 0.0, 1.0)), single


def encode(x, bank: FeatureTableBank, return_cache: bool = False):
    """Encode points in [0,1]^dim into the concatenated level features ``y``.

    Corners and weights come from each level's own grid; only the corner
    indices are rescaled to the group's finest grid before hashing.
    Returns ``(points, L*F)`` (or ``(L*F,)`` for a single point).
    """
    pts, single = _as_points(x, bank.config.dim)
    y, idx, wts = kernels.encode_forward(
        pts, bank.params, bank.level_res, bank.level_gres, bank.level_offset, bank.level_cap
    )
    if single:
        y = y[0]
    if return_cache:
        return y, EncodeCache(idx, wts)
    return y


def per_level(y: np.ndarray, config: EncodingConfig) -> np.ndarray:
    """Split ``y`` into its ``(..., L, F)`` per-level feature vectors."""
    return y.reshape(y.shape[:-1] + (config.L, config.F))


def encode_backward(x, bank: FeatureTableBank, dy, cache: EncodeCache | None = None) -> None:
    """Scatter ``dL/dy`` into ``bank.grads``; colliding entries accumulate."""
    if cache is None:
        _, cache = encode(x, bank, return_cache=True)
    dy = np.atleast_2d(np.asarray(dy, dtype=bank.grads.dtype))
    P, L, _ = cache.index.shape
    if dy.shape != (P, L * bank.config.F):
        raise ShapeError(f"dL/dy shape {dy.shape}, expected {(P, L * bank.config.F)}")
    kernels.encode_backward(bank.grads, cache.index, cache.weights, np.ascontiguousarray(dy))
    bank.touched_mask[cache.index.ravel()] = True


def count_parameters(config: EncodingConfig) -> tuple[int, int]:
    """(entries, scalars) over all tables; pure integer arithmetic."""
    entries = sum(group_capacity(config, n) for n in range(1, config.N + 1))
    return entries, entries * config.F


@dataclass
class CollisionStats:
    table: int
    capacity: int
    probes: int
    histogram: dict[int, int]  # hits per entry -> number of entries

    @property
    def load_factor(self) -> float:
        return self.probes / self.capacity

    @property
    def occupied(self) -> int:
        return self.capacity - self.histogram.get(0, 0)

    @property
    def multi_hit_entries(self) -> int:
        return sum(n for k, n in self.histogram.items() if k > 1)


def collision_stats(config: EncodingConfig, probe_resolution: int) -> list[CollisionStats]:
    """Hash every corner of an (R+1)^dim probe lattice into each table.

    Probe corners are treated as indices on a grid of resolution R and sent
    through the same transform-then-hash path as a level of that resolution.
    """
    R = int(probe_resolution)
    if R < 1:
        raise ValueError("probe resolution must be >= 1")
    axes = np.meshgrid(*[np.arange(R + 1)] * config.dim, indexing="ij")
    lattice = np.stack([a.ravel() for a in axes], axis=1).astype(np.int64)
    out = []
    for n in range(1, config.N + 1):
        finest = config.resolutions[config.group_finest_level(n) - 1]
        cap = group_capacity(config, n)
        coords = lattice * finest // R
        if config.dim == 2:
            coords = np.concatenate([coords, np.zeros_like(coords[:, :1])], axis=1)
        hits = np.bincount(kernels.hash_numpy(coords, cap), minlength=cap)
        ks, counts = np.unique(hits, return_counts=True)
        out.append(CollisionStats(n, cap, len(lattice), {int(k): int(c) for k, c in zip(ks, counts)}))
    return out
