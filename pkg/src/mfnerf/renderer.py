"""Density/colour networks with manual backprop, direction encoding, compositing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import DomainError, ShapeError

SIGMA_CLAMP = 15.0
COLOR_FEATURES = 16
SH_DIM = 16
STOP_EPS = 1e-4

# Real spherical harmonics, degrees 0..3, in (x, y, z) of a unit vector.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def encode_direction(d) -> np.ndarray:
    """16 real SH coefficients for unit direction(s) ``d`` of shape (..., 3)."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ShapeError("directions must have 3 components")
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-6):
        raise DomainError("direction is not unit length")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (SH_DIM,))
    out[..., 0] = _C0
    out[..., 1] = -_C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = -_C1 * x
    out[..., 4] = _C2[0] * x * y
    out[..., 5] = _C2[1] * y * z
    out[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = _C2[3] * x * z
    out[..., 8] = _C2[4] * (xx - yy)
    out[..., 9] = _C3[0] * y * (3 * xx - yy)
    out[..., 10] = _C3[1] * x * y * z
    out[..., 11] = _C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = _C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = _C3[5] * z * (xx - yy)
    out[..., 15] = _C3[6] * x * (xx - 3 * yy)
    return out


@dataclass
class MlpParameters:
    """Weights of the density net (``d*``) and colour net (``c*``).

    ``weights[i]`` has shape (fan_in, fan_out); ``biases[i]`` is None on each
    network's output layer.
    """

    density: list
    color: list

    @classmethod
    def init(cls, in_dim, dir_dim=SH_DIM, density_hidden=(64,), color_hidden=(128, 128), rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)

        def build(sizes):
            layers = []
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                last = i == len(sizes) - 2
                bound = np.sqrt((3.0 if last else 6.0) / a)
                w = rng.uniform(-bound, bound, size=(a, b)).astype(dtype)
                layers.append([w, None if last else np.zeros(b, dtype=dtype)])
            return layers

        return cls(
            build([in_dim, *density_hidden, COLOR_FEATURES]),
            build([COLOR_FEATURES + dir_dim, *color_hidden, 3]),
        )

    def arrays(self) -> list[np.ndarray]:
        """Flat list of every trainable array, in a fixed layer-major order."""
        out = []
        for w, b in self.density + self.color:
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def zeros_like(self) -> "MlpParameters":
        z = lambda layers: [[np.zeros_like(w), None if b is None else np.zeros_like(b)] for w, b in layers]
        return MlpParameters(z(self.density), z(self.color))

    def copy(self) -> "MlpParameters":
        c = lambda layers: [[w.copy(), None if b is None else b.copy()] for w, b in layers]
        return MlpParameters(c(self.density), c(self.color))

    def astype(self, dtype) -> "MlpParameters":
        c = lambda layers: [[w.astype(dtype), None if b is None else b.astype(dtype)] for w, b in layers]
        return MlpParameters(c(self.density), c(self.color))

    @property
    def in_dim(self) -> int:
        return self.density[0][0].shape[0]

    @property
    def dir_dim(self) -> int:
        return self.color[0][0].shape[0] - COLOR_FEATURES

    def num_scalars(self) -> int:
        return sum(a.size for a in self.arrays())


def _run(layers, h, acts):
    for i, (w, b) in enumerate(layers):
        acts.append(h)
        h = h @ w
        if b is not None:
            h = h + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0)
    return h


def _back(layers, grads, acts, g):
    for i in range(len(layers) - 1, -1, -1):
        w, b = layers[i]
        h_in = acts[i]
        grads[i][0][...] = h_in.T @ g
        if b is not None:
            grads[i][1][...] = g.sum(axis=0)
        g = g @ w.T
        if i > 0:
            g = g * (h_in > 0)
    return g


class MlpCache:
    __slots__ = ("density_acts", "color_acts", "raw_sigma", "sigma", "rgb", "n_dir")


def mlp_forward(y, dir_enc, params: MlpParameters):
    """Returns ``(sigma, rgb, f_c, cache)`` for a batch.

    sigma = exp(clamp(f_c[0], +-15)); rgb = logistic(colour logits).
    ``dir_enc`` may be None when the colour net takes no direction input.
    """
    y = np.atleast_2d(y)
    if y.shape[-1] != params.in_dim:
        raise ShapeError(f"y has {y.shape[-1]} features, network expects {params.in_dim}")
    cache = MlpCache()
    cache.density_acts = []
    f_c = _run(params.density, y, cache.density_acts)
    if params.dir_dim:
        dir_enc = np.atleast_2d(dir_enc).astype(f_c.dtype, copy=False)
        if dir_enc.shape[-1] != params.dir_dim:
            raise ShapeError("direction encoding has wrong width")
        if dir_enc.shape[0] != f_c.shape[0]:
            dir_enc = np.broadcast_to(dir_enc, (f_c.shape[0], params.dir_dim))
        h = np.concatenate([f_c, dir_enc], axis=1)
    else:
        h = f_c
    cache.color_acts = []
    logits = _run(params.color, h, cache.color_acts)
    raw = f_c[:, 0]
    sigma = np.exp(np.clip(raw, -SIGMA_CLAMP, SIGMA_CLAMP))
    rgb = expit(logits)
    if not (np.all(np.isfinite(sigma)) and np.all(np.isfinite(rgb))):
        raise FloatingPointError("non-finite activation")
    cache.raw_sigma, cache.sigma, cache.rgb = raw, sigma, rgb
    cache.n_dir = params.dir_dim
    return sigma, rgb, f_c, cache


def mlp_backward(cache: MlpCache | None, params: MlpParameters, dsigma, drgb):
    """Reverse pass. Returns ``(grads, dy)`` where ``grads`` mirrors ``params``."""
    if cache is None or not hasattr(cache, "rgb"):
        raise RuntimeError("mlp_backward called without a forward cache")
    grads = params.zeros_like()
    rgb = cache.rgb
    dlogits = (np.atleast_2d(drgb) * rgb * (1.0 - rgb)).astype(rgb.dtype)
    dh = _back(params.color, grads.color, cache.color_acts, dlogits)
    df_c = np.array(dh[:, :COLOR_FEATURES])  # direction part is discarded
    inside = np.abs(cache.raw_sigma) < SIGMA_CLAMP
    df_c[:, 0] += np.where(inside, np.ravel(dsigma) * cache.sigma, 0.0).astype(df_c.dtype)
    dy = _back(params.density, grads.density, cache.density_acts, df_c)
    return grads, dy


@dataclass
class CompositeResult:
    color: np.ndarray  # (R, 3)
    weights: np.ndarray  # (S,)
    transmittance: np.ndarray  # (R,) final


def _float_dtype(rgb):
    dt = np.asarray(rgb).dtype
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


def _packed(counts):
    counts = np.asarray(counts, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return starts, counts


def composite(sigma, rgb, delta, counts, background=(0.0, 0.0, 0.0), early_stop=False) -> CompositeResult:
    """Front-to-back alpha compositing of packed rays.

    ``counts[r]`` samples per ray, concatenated in ray order. Early termination
    (transmittance < 1e-4) is for inference only.
    """
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise DomainError("sample intervals must be positive")
    starts, counts = _packed(counts)
    dt = _float_dtype(rgb)
    bg = np.asarray(background, dtype=dt)
    color, w, tf = kernels.composite_forward(
        np.ascontiguousarray(sigma, dtype=dt),
        np.ascontiguousarray(rgb, dtype=dt),
        np.ascontiguousarray(delta, dtype=dt),
        starts,
        counts,
        bg,
        STOP_EPS if early_stop else -1.0,
    )
    return CompositeResult(color, w, tf)


def composite_backward(sigma, rgb, delta, counts, dcolor, background=(0.0, 0.0, 0.0)):
    """Returns ``(dL/dsigma, dL/drgb)`` for the packed samples."""
    starts, counts = _packed(counts)
    dt = _float_dtype(rgb)
    return kernels.composite_backward(
        np.ascontiguousarray(sigma, dtype=dt),
        np.ascontiguousarray(rgb, dtype=dt),
        np.ascontiguousarray(delta, dtype=dt),
        starts,
        counts,
        np.asarray(background, dtype=dt),
        np.ascontiguousarray(dcolor, dtype=dt),
    )


def check_sample_order(t_values, counts) -> None:
    """Raise unless sample distances increase strictly within every ray."""
    starts, counts = _packed(counts)
    t = np.asarray(t_values)
    for s, n in zip(starts, counts):
        if n > 1 and np.any(np.diff(t[s:s + n]) <= 0):
            raise DomainError("samples are not ordered front to back")
