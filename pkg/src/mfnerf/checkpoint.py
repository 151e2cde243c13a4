"""Binary checkpoint format.

Layout (little-endian)::

    b"MFNF" | u32 version | u32 meta_len | meta JSON (configs, step, RNG, mode)
    | bank | bank_m | bank_v          # u32 n_tables, then per table:
                                      #   u64 entries, u32 F, f32[entries*F]
    | mlp | mlp_m | mlp_v             # u32 n_arrays, then per array:
                                      #   u32 ndim, u64 dims..., f32[...]
    | u32 CRC32 of everything above

Entries are stored entry-major, feature-minor; weight matrices row-major
(fan_in, fan_out), layer by layer.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib

import numpy as np

from .encoding import FeatureTableBank
from .errors import CorruptFileError, IncompatibleConfigError
from .grid import EncodingConfig
from .renderer import MlpParameters
from .trainer import TrainConfig, TrainState, config_dict

MAGIC = b"MFNF"
VERSION = 1
_F32 = np.dtype("<f4")


def _write_tables(buf, tables):
    buf.write(struct.pack("<I", len(tables)))
    for t in tables:
        buf.write(struct.pack("<QI", t.shape[0], t.shape[1]))
        buf.write(np.ascontiguousarray(t, dtype=_F32).tobytes())


def _write_arrays(buf, arrays):
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype=_F32).tobytes())


def _rng_state(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": st["state"],
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def checkpoint_bytes(state: TrainState) -> bytes:
    meta = {
        "encoding": {k: int(v) for k, v in config_dict(state.encoding).items()},
        "train": config_dict(state.train),
        "step": state.step,
        "rng": _rng_state(state.rng),
        "meta": state.meta,
        "mlp_layout": {
            "density": [[list(w.shape), b is not None] for w, b in state.mlp.density],
            "color": [[list(w.shape), b is not None] for w, b in state.mlp.color],
        },
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    for params in (state.bank.params, state.bank_m, state.bank_v):
        _write_tables(buf, [params[a:b] for a, b in zip(state.bank.offsets[:-1], state.bank.offsets[1:])])
    for arrays in (state.mlp.arrays(), state.mlp_m, state.mlp_v):
        _write_arrays(buf, arrays)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def checkpoint_save(path, state: TrainState) -> None:
    """Write atomically: a crash mid-write never clobbers the previous file."""
    data = checkpoint_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFileError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count):
        return np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float32)

    def tables(self):
        (n,) = self.unpack("<I")
        out = []
        for _ in range(n):
            entries, F = self.unpack("<QI")
            out.append(self.floats(entries * F).reshape(entries, F))
        return out

    def arrays(self):
        (n,) = self.unpack("<I")
        out = []
        for _ in range(n):
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}Q")
            out.append(self.floats(int(np.prod(shape))).reshape(shape))
        return out


def _check_compatible(found: EncodingConfig, expected: EncodingConfig | None):
    if expected is None:
        return
    for name in ("L", "N", "T", "F", "N_min", "N_max", "dim"):
        a, b = getattr(expected, name), getattr(found, name)
        if a != b:
            raise IncompatibleConfigError(name, a, b)


def checkpoint_load(path, expect: EncodingConfig | None = None) -> TrainState:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptFileError(f"{path}: bad magic bytes")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFileError(f"{path}: CRC mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported format version {version}")
    meta = json.loads(r.take(meta_len).decode())
    enc = EncodingConfig(**meta["encoding"])
    _check_compatible(enc, expect)
    cfg = TrainConfig(**meta["train"])
    params, bank_m, bank_v = (np.concatenate(r.tables()) for _ in range(3))
    mlp_arrays, mlp_m, mlp_v = r.arrays(), r.arrays(), r.arrays()
    if r.pos != len(body):
        raise CorruptFileError(f"{path}: trailing bytes")

    it = iter(mlp_arrays)

    def rebuild(layout):
        return [[next(it), next(it) if has_bias else None] for _, has_bias in layout]

    mlp = MlpParameters(rebuild(meta["mlp_layout"]["density"]), rebuild(meta["mlp_layout"]["color"]))
    bank = FeatureTableBank(enc, params)
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    return TrainState(enc, cfg, bank, mlp, bank_m, bank_v, mlp_m, mlp_v, meta["step"], rng, meta["meta"])
