"""Hot inner loops: hashed grid lookup/scatter and ray compositing.

Every kernel exists twice: a loop version compiled with numba and a vectorised
numpy version. Both take the same arguments and return the same arrays; the
module-level names (``encode_forward`` etc.) point at whichever backend
``_accel.USE_NUMBA`` selects.

Packed ray layout: samples of all rays are concatenated; ray ``r`` owns
``samples[starts[r] : starts[r] + counts[r]]``.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

PI2 = 2654435761
PI3 = 805459861
MASK32 = 0xFFFFFFFF


# --------------------------------------------------------------------------
# spatial hash


def hash_numpy(coords: np.ndarray, size) -> np.ndarray:
    """Vectorised hash of integer coords (..., 2 or 3). Wrapping 32-bit products."""
    c = np.asarray(coords, dtype=np.uint64)
    h = c[..., 0] & np.uint64(MASK32)
    h = h ^ ((c[..., 1] * np.uint64(PI2)) & np.uint64(MASK32))
    if c.shape[-1] == 3:
        h = h ^ ((c[..., 2] * np.uint64(PI3)) & np.uint64(MASK32))
    return (h % np.asarray(size, dtype=np.uint64)).astype(np.int64)


# --------------------------------------------------------------------------
# encoding: forward gathers, backward scatters


@njit
def _encode_forward_nb(x, table, res, gres, offset, cap):
    P, dim = x.shape
    L = res.shape[0]
    F = table.shape[1]
    C = 1 << dim
    out = np.empty((P, L * F), dtype=table.dtype)
    idx = np.empty((P, L, C), dtype=np.int64)
    wts = np.empty((P, L, C), dtype=np.float64)
    # per axis: hashed term and weight of the lower (0) and upper (1) corner
    hterm = np.zeros((3, 2), dtype=np.int64)
    waxis = np.ones((3, 2), dtype=np.float64)
    primes = (1, PI2, PI3)
    acc = np.empty(F, dtype=np.float64)
    for l in range(L):
        r = res[l]
        g = gres[l]
        size = cap[l]
        pow2 = (size & (size - 1)) == 0
        off = offset[l]
        for p in range(P):
            for a in range(dim):
                s = x[p, a] * r
                b = np.int64(np.floor(s))
                if b > r - 1:
                    b = r - 1
                f = s - b
                waxis[a, 0] = 1.0 - f
                waxis[a, 1] = f
                hterm[a, 0] = ((b * g // r) * primes[a]) & MASK32
                hterm[a, 1] = (((b + 1) * g // r) * primes[a]) & MASK32
            for f in range(F):
                acc[f] = 0.0
            for c in range(C):
                if dim == 3:
                    b0 = (c >> 2) & 1
                    b1 = (c >> 1) & 1
                    b2 = c & 1
                    w = waxis[0, b0] * waxis[1, b1] * waxis[2, b2]
                    h = hterm[0, b0] ^ hterm[1, b1] ^ hterm[2, b2]
                else:
                    b0 = (c >> 1) & 1
                    b1 = c & 1
                    w = waxis[0, b0] * waxis[1, b1]
                    h = hterm[0, b0] ^ hterm[1, b1]
                if pow2:
                    h = (h & (size - 1)) + off
                else:
                    h = h % size + off
                idx[p, l, c] = h
                wts[p, l, c] = w
                for f in range(F):
                    acc[f] += w * table[h, f]
            for f in range(F):
                out[p, l * F + f] = acc[f]
    return out, idx, wts


def _corner_bits(dim):
    c = np.arange(1 << dim)
    return np.stack([(c >> (dim - 1 - a)) & 1 for a in range(dim)], axis=1)


def _encode_forward_np(x, table, res, gres, offset, cap):
    P, dim = x.shape
    L = res.shape[0]
    F = table.shape[1]
    bits = _corner_bits(dim)  # (C, dim)
    out = np.empty((P, L * F), dtype=table.dtype)
    idx = np.empty((P, L, 1 << dim), dtype=np.int64)
    wts = np.empty((P, L, 1 << dim), dtype=np.float64)
    for l in range(L):
        r = int(res[l])
        s = x * r
        base = np.minimum(np.floor(s).astype(np.int64), r - 1)
        frac = s - base
        corners = base[:, None, :] + bits[None]  # (P, C, dim)
        w = np.ones(corners.shape[:2])
        for a in range(dim):
            w = w * np.where(bits[None, :, a] == 1, frac[:, None, a], 1.0 - frac[:, None, a])
        transformed = corners * int(gres[l]) // r
        if dim == 2:
            transformed = np.concatenate([transformed, np.zeros_like(transformed[..., :1])], axis=-1)
        h = hash_numpy(transformed, int(cap[l])) + int(offset[l])
        idx[:, l] = h
        wts[:, l] = w
        acc = np.zeros((P, F))
        for c in range(1 << dim):
            acc += w[:, c, None] * table[h[:, c]]
        out[:, l * F:(l + 1) * F] = acc
    return out, idx, wts


@njit
def _encode_backward_nb(grad_table, idx, wts, dy):
    P, L, C = idx.shape
    F = grad_table.shape[1]
    for p in range(P):
        for l in range(L):
            for c in range(C):
                h = idx[p, l, c]
                w = wts[p, l, c]
                for f in range(F):
                    grad_table[h, f] += w * dy[p, l * F + f]
    return grad_table


def _encode_backward_np(grad_table, idx, wts, dy):
    P, L, C = idx.shape
    F = grad_table.shape[1]
    contrib = wts[..., None] * dy.reshape(P, L, 1, F)
    np.add.at(grad_table, idx.reshape(-1), contrib.reshape(-1, F).astype(grad_table.dtype))
    return grad_table


# --------------------------------------------------------------------------
# compositing


@njit
def _composite_forward_nb(sigma, rgb, delta, starts, counts, bg, stop_eps):
    R = starts.shape[0]
    dt = rgb.dtype.type
    color = np.zeros((R, 3), dtype=rgb.dtype)
    weights = np.zeros(sigma.shape[0], dtype=rgb.dtype)
    trans_final = np.ones(R, dtype=rgb.dtype)
    for r in range(R):
        T = dt(1.0)
        for s in range(starts[r], starts[r] + counts[r]):
            if T < stop_eps:
                break
            a = np.exp(-sigma[s] * delta[s])
            w = T * (dt(1.0) - a)
            weights[s] = w
            for ch in range(3):
                color[r, ch] += w * rgb[s, ch]
            T = T * a
        trans_final[r] = T
        for ch in range(3):
            color[r, ch] += T * bg[ch]
    return color, weights, trans_final


def _pad(starts, counts):
    R = starts.shape[0]
    width = int(counts.max()) if R else 0
    col = np.arange(width)
    valid = col[None, :] < counts[:, None]
    gather = np.where(valid, starts[:, None] + col[None, :], 0)
    return gather, valid


def _composite_forward_np(sigma, rgb, delta, starts, counts, bg, stop_eps):
    dt = rgb.dtype
    R = starts.shape[0]
    color = np.zeros((R, 3), dtype=dt)
    weights = np.zeros(sigma.shape[0], dtype=dt)
    trans_final = np.ones(R, dtype=dt)
    if R == 0 or counts.max() == 0:
        color += bg.astype(dt)
        return color, weights, trans_final
    gather, valid = _pad(starts, counts)
    a = np.where(valid, np.exp(-sigma[gather] * delta[gather]), dt.type(1.0)).astype(dt)
    T_incl = np.cumprod(a, axis=1, dtype=dt)
    T = np.concatenate([np.ones((R, 1), dtype=dt), T_incl[:, :-1]], axis=1)
    alive = valid & (T >= stop_eps)
    w = np.where(alive, T * (dt.type(1.0) - a), dt.type(0.0)).astype(dt)
    # transmittance where the sweep stopped
    last_alive = np.where(alive, np.arange(alive.shape[1])[None], -1).max(axis=1)
    trans_final = np.where(last_alive >= 0, T_incl[np.arange(R), np.maximum(last_alive, 0)], dt.type(1.0)).astype(dt)
    weights[gather[alive]] = w[alive]
    cols = np.where(alive[..., None], rgb[gather], dt.type(0.0))
    for ch in range(3):
        acc = np.zeros(R, dtype=dt)
        for s in range(w.shape[1]):
            acc += w[:, s] * cols[:, s, ch]
        color[:, ch] = acc + trans_final * dt.type(bg[ch])
    return color, weights, trans_final


@njit
def _composite_backward_nb(sigma, rgb, delta, starts, counts, bg, dcolor):
    """One forward sweep per ray carrying the accumulated colour prefix.

    d color / d sigma_i = delta_i * (T_{i+1} c_i - (C - prefix_i)), where
    prefix_i is the colour composited through sample i and C includes the
    background term.
    """
    R = starts.shape[0]
    dt = rgb.dtype.type
    dsigma = np.zeros(sigma.shape[0], dtype=rgb.dtype)
    drgb = np.zeros(rgb.shape, dtype=rgb.dtype)
    total = np.zeros(3, dtype=rgb.dtype)
    prefix = np.zeros(3, dtype=rgb.dtype)
    for r in range(R):
        n = counts[r]
        s0 = starts[r]
        T = dt(1.0)
        total[:] = 0.0
        for s in range(s0, s0 + n):
            a = np.exp(-sigma[s] * delta[s])
            w = T * (dt(1.0) - a)
            for ch in range(3):
                total[ch] += w * rgb[s, ch]
            T = T * a
        for ch in range(3):
            total[ch] += T * bg[ch]
        T = dt(1.0)
        prefix[:] = 0.0
        for s in range(s0, s0 + n):
            a = np.exp(-sigma[s] * delta[s])
            w = T * (dt(1.0) - a)
            T_next = T * a
            g = dt(0.0)
            for ch in range(3):
                prefix[ch] += w * rgb[s, ch]
                drgb[s, ch] = w * dcolor[r, ch]
                g += (T_next * rgb[s, ch] - (total[ch] - prefix[ch])) * dcolor[r, ch]
            dsigma[s] = delta[s] * g
            T = T_next
    return dsigma, drgb


def _composite_backward_np(sigma, rgb, delta, starts, counts, bg, dcolor):
    dt = rgb.dtype
    R = starts.shape[0]
    dsigma = np.zeros(sigma.shape[0], dtype=dt)
    drgb = np.zeros(rgb.shape, dtype=dt)
    if R == 0 or counts.max() == 0:
        return dsigma, drgb
    gather, valid = _pad(starts, counts)
    a = np.where(valid, np.exp(-sigma[gather] * delta[gather]), dt.type(1.0)).astype(dt)
    T_incl = np.cumprod(a, axis=1, dtype=dt)
    T = np.concatenate([np.ones((R, 1), dtype=dt), T_incl[:, :-1]], axis=1)
    w = np.where(valid, T * (dt.type(1.0) - a), dt.type(0.0)).astype(dt)
    cols = np.where(valid[..., None], rgb[gather], dt.type(0.0))
    prefix = np.cumsum(w[..., None] * cols, axis=1, dtype=dt)
    total = prefix[:, -1] + T_incl[:, -1, None] * bg.astype(dt)
    g = ((T_incl[..., None] * cols - (total[:, None] - prefix)) * dcolor[:, None]).sum(-1)
    ds = np.where(valid, delta[gather] * g, dt.type(0.0))
    dsigma[gather[valid]] = ds[valid]
    drgb[gather[valid]] = (w[..., None] * dcolor[:, None])[valid]
    return dsigma, drgb


# --------------------------------------------------------------------------
# sparse Adam over table rows


@njit
def _adam_rows_nb(param, grad, m, v, rows, lr, b1, b2, eps, c1, c2):
    F = param.shape[1]
    for i in range(rows.shape[0]):
        r = rows[i]
        for f in range(F):
            g = grad[r, f]
            mm = b1 * m[r, f] + (1 - b1) * g
            vv = b2 * v[r, f] + (1 - b2) * g * g
            m[r, f] = mm
            v[r, f] = vv
            param[r, f] = param[r, f] - lr * (mm / c1) / (np.sqrt(vv / c2) + eps)


def _adam_rows_np(param, grad, m, v, rows, lr, b1, b2, eps, c1, c2):
    g = grad[rows]
    mm = b1 * m[rows] + (1 - b1) * g
    vv = b2 * v[rows] + (1 - b2) * g * g
    m[rows] = mm
    v[rows] = vv
    param[rows] = param[rows] - lr * (mm / c1) / (np.sqrt(vv / c2) + eps)


BACKENDS = {
    "numba": {
        "encode_forward": _encode_forward_nb,
        "encode_backward": _encode_backward_nb,
        "composite_forward": _composite_forward_nb,
        "composite_backward": _composite_backward_nb,
        "adam_rows": _adam_rows_nb,
    },
    "numpy": {
        "encode_forward": _encode_forward_np,
        "encode_backward": _encode_backward_np,
        "composite_forward": _composite_forward_np,
        "composite_backward": _composite_backward_np,
        "adam_rows": _adam_rows_np,
    },
}

BACKEND = "numba" if _accel.USE_NUMBA else "numpy"


def _dispatch(name):
    def call(*args):
        return BACKENDS[BACKEND][name](*args)

    call.__name__ = name
    return call


encode_forward = _dispatch("encode_forward")
encode_backward = _dispatch("encode_backward")
composite_forward = _dispatch("composite_forward")
composite_backward = _dispatch("composite_backward")
adam_rows = _dispatch("adam_rows")


def set_backend(name: str) -> None:
    """Switch backend at runtime ("numba" or "numpy"); used by tests and benchmarks."""
    global BACKEND
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _accel.HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    BACKEND = name
