"""Joint optimisation of hash tables and networks."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from ._accel import flush_denormals
from .encoding import FeatureTableBank, encode, encode_backward, init_tables
from .errors import ConfigError, DomainError, ShapeError, TrainingDiverged
from .grid import EncodingConfig
from .renderer import (
    MlpParameters,
    composite,
    composite_backward,
    encode_direction,
    mlp_backward,
    mlp_forward,
)
from .scene import Dataset, Image2DTask, sample_rays

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "psnr", "lr", "rays_per_sec")
LOG_EVERY = 100


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    total_steps: int = 2000
    lr_init: float = 2e-2
    lr_final: float = 2e-4
    seed: int = 1337
    samples_per_ray: int = 64
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError("need 0 < lr_final <= lr_init")
        if self.samples_per_ray < 1:
            raise ConfigError("samples_per_ray must be >= 1")


def l2_loss(pred, target):
    """Summed squared error over the batch and its gradient 2 (pred - target)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.sum(diff.astype(np.float64) ** 2)), 2.0 * diff


def lr_schedule(t, cfg: TrainConfig) -> float:
    """Cosine decay from lr_init at t=0 to lr_final at t=total_steps."""
    if not 0 <= t <= cfg.total_steps:
        raise DomainError(f"step {t} outside [0, {cfg.total_steps}]")
    if cfg.total_steps == 0:
        return cfg.lr_init
    return cfg.lr_final + (cfg.lr_init - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_steps))


def _adam_math(p, g, m, v, lr, step, cfg):
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    c1, c2 = 1 - cfg.beta1**step, 1 - cfg.beta2**step
    return p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps), m, v


def adam_step(param, grad, m, v, lr, step, cfg: TrainConfig, rows=None) -> None:
    """In-place bias-corrected Adam update.

    With ``rows`` only those rows are updated and only their moments advance;
    the bias correction still uses the global ``step``.
    """
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ShapeError("parameter, gradient and moment shapes differ")
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    if rows is None:
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        param[...], m[...], v[...] = _adam_math(param, grad, m, v, lr, step, cfg)
        return
    if not np.all(np.isfinite(grad[rows])):
        raise FloatingPointError("non-finite gradient")
    kernels.adam_rows(
        param, grad, m, v, np.asarray(rows, dtype=np.int64), float(lr), cfg.beta1, cfg.beta2, cfg.eps,
        1 - cfg.beta1**step, 1 - cfg.beta2**step,
    )


# --------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    encoding: EncodingConfig
    train: TrainConfig
    bank: FeatureTableBank
    mlp: MlpParameters
    bank_m: np.ndarray
    bank_v: np.ndarray
    mlp_m: list
    mlp_v: list
    step: int = 0
    rng: np.random.Generator = None
    meta: dict = field(default_factory=dict)


def init_state(enc: EncodingConfig, cfg: TrainConfig, meta=None) -> TrainState:
    meta = dict(meta or {})
    meta.setdefault("dir_dim", 16 if enc.dim == 3 else 0)
    bank = init_tables(enc, cfg.seed)
    mlp = MlpParameters.init(
        enc.L * enc.F, dir_dim=meta["dir_dim"], rng=np.random.Generator(np.random.Philox(cfg.seed + 1))
    )
    arrays = mlp.arrays()
    return TrainState(
        enc, cfg, bank, mlp,
        np.zeros_like(bank.params), np.zeros_like(bank.params),
        [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
        0, np.random.Generator(np.random.PCG64(cfg.seed)), meta,
    )


# --------------------------------------------------------------------------
# tasks: each knows how to draw a batch, run forward+backward and predict


class ImageFitTask:
    """Encode pixel coordinates straight to colour (no compositing)."""

    kind = "image2d"

    def __init__(self, task: Image2DTask):
        self.task = task

    @property
    def n_rays(self):
        return len(self.task.coords)

    def meta(self):
        return {"mode": self.kind, "height": self.task.height, "width": self.task.width, "dir_dim": 0}

    def step(self, state: TrainState, rng, batch_size):
        sel = rng.integers(0, self.n_rays, batch_size)
        x = self.task.coords[sel]
        y, cache = encode(x, state.bank, return_cache=True)
        _, rgb, _, mcache = mlp_forward(y, None, state.mlp)
        loss, grad = l2_loss(rgb, self.task.targets[sel])
        grads, dy = mlp_backward(mcache, state.mlp, np.zeros(len(x), dtype=rgb.dtype), grad)
        encode_backward(x, state.bank, dy, cache)
        return loss, batch_size, grads

    def predict(self, state: TrainState, chunk=1 << 15):
        out = []
        for i in range(0, self.n_rays, chunk):
            y = encode(self.task.coords[i:i + chunk], state.bank)
            out.append(mlp_forward(y, None, state.mlp)[1])
        return self.task.image(np.concatenate(out))


class RayTask:
    """Volume rendering of rays drawn uniformly from all training pixels."""

    kind = "nerf3d"

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        o, d, self.near, self.far = dataset.unit_rays()
        self.origins = o.reshape(-1, 3)
        self.dirs = d.reshape(-1, 3)
        self.colors = dataset.images.reshape(-1, 3)
        self.background = np.asarray(dataset.background, dtype=np.float32)

    @property
    def n_rays(self):
        return len(self.origins)

    def meta(self):
        box = self.dataset.box
        return {
            "mode": self.kind,
            "background": list(map(float, self.dataset.background)),
            "box_center": list(map(float, box.center)),
            "box_scale": float(box.scale),
            "near": float(self.near),
            "far": float(self.far),
            "dir_dim": 16,
        }

    def step(self, state: TrainState, rng, batch_size):
        sel = rng.integers(0, self.n_rays, batch_size)
        n = state.train.samples_per_ray
        loss, grads = forward_backward_rays(
            state, self.origins[sel], self.dirs[sel], self.colors[sel], self.near, self.far, n, rng, self.background
        )
        return loss, batch_size, grads


def render_rays(state: TrainState, origins, dirs, near, far, n_samples, background, rng=None, early_stop=False):
    """Rendered colours (R, 3) plus the intermediates needed for backprop."""
    pos, deltas, counts, _ = sample_rays(origins, dirs, near, far, n_samples, rng)
    dt = state.bank.params.dtype
    if len(pos):
        y, ecache = encode(pos, state.bank, return_cache=True)
        sh = encode_direction(np.repeat(dirs, counts, axis=0)).astype(dt)
        sigma, rgb, _, mcache = mlp_forward(y, sh, state.mlp)
    else:
        ecache = mcache = None
        sigma = np.zeros(0, dtype=dt)
        rgb = np.zeros((0, 3), dtype=dt)
    res = composite(sigma, rgb, deltas.astype(dt), counts, background, early_stop=early_stop)
    return res.color, (pos, deltas.astype(dt), counts, sigma, rgb, ecache, mcache)


def forward_backward_rays(state, origins, dirs, target, near, far, n_samples, rng, background):
    color, (pos, deltas, counts, sigma, rgb, ecache, mcache) = render_rays(
        state, origins, dirs, near, far, n_samples, background, rng
    )
    loss, dcolor = l2_loss(color, target)
    if len(pos) == 0:
        return loss, state.mlp.zeros_like()
    dsigma, drgb = composite_backward(sigma, rgb, deltas, counts, dcolor, background)
    grads, dy = mlp_backward(mcache, state.mlp, dsigma, drgb)
    encode_backward(pos, state.bank, dy, ecache)
    return loss, grads


def render_camera(state: TrainState, camera, chunk=4096):
    """Render one view using the scene mapping stored in ``state.meta``."""
    from .scene import SceneBox

    meta = state.meta
    box = SceneBox(tuple(meta["box_center"]), meta["box_scale"])
    o, d = camera.all_rays()
    o = box.to_unit(o.reshape(-1, 3))
    d = d.reshape(-1, 3)
    near, far = camera.near * box.scale, camera.far * box.scale
    bg = np.asarray(meta["background"], dtype=np.float32)
    out = []
    for i in range(0, len(o), chunk):
        c, _ = render_rays(state, o[i:i + chunk], d[i:i + chunk], near, far,
                           state.train.samples_per_ray, bg, early_stop=True)
        out.append(c)
    return np.concatenate(out).reshape(camera.height, camera.width, 3)


# --------------------------------------------------------------------------
# main loop


def _optimizer_step(state: TrainState, grads: MlpParameters, lr: float) -> None:
    t = state.step
    rows = state.bank.touched
    adam_step(state.bank.params, state.bank.grads, state.bank_m, state.bank_v, lr, t, state.train, rows=rows)
    state.bank.zero_grad()
    for p, g, m, v in zip(state.mlp.arrays(), grads.arrays(), state.mlp_m, state.mlp_v):
        adam_step(p, g, m, v, lr, t, state.train)


def _write_metrics(path, rows, append):
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["step"]] + [format_float(row[k]) for k in METRIC_COLUMNS[1:]])


def format_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def train(task, enc: EncodingConfig, cfg: TrainConfig, state: TrainState | None = None,
          metrics_path=None, checkpoint_path=None, deterministic=True, stop_at=None):
    """Run optimisation until ``cfg.total_steps`` (or ``stop_at``) steps are done.

    ``task`` is an :class:`ImageFitTask` or :class:`RayTask`. Resuming from a
    restored ``state`` continues the same RNG stream and schedule. In
    deterministic mode the wall-clock throughput column is written as ``nan``
    so metric files are byte-identical across runs. Returns ``(state, rows)``.
    """
    if task.n_rays == 0:
        raise ValueError("empty dataset")
    with flush_denormals():
        return _train(task, enc, cfg, state, metrics_path, checkpoint_path, deterministic, stop_at)


def _train(task, enc, cfg, state, metrics_path, checkpoint_path, deterministic, stop_at):
    if state is None:
        state = init_state(enc, cfg, task.meta())
    from .checkpoint import checkpoint_save

    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    rows, pending = [], []
    last_good = state.step
    append = state.step > 0 and metrics_path is not None
    tic, rays = time.perf_counter(), 0
    while state.step < end:
        lr = lr_schedule(state.step, cfg)
        loss, n, grads = task.step(state, state.rng, cfg.batch_size)
        if not math.isfinite(loss):
            raise TrainingDiverged(state.step + 1, last_good)
        state.step += 1
        _optimizer_step(state, grads, lr)
        rays += n
        if state.step % LOG_EVERY == 0 or state.step == end:
            mse = loss / (n * 3)
            elapsed = time.perf_counter() - tic
            row = {
                "step": state.step,
                "loss": loss,
                "psnr": psnr_from_mse(mse),
                "lr": lr,
                "rays_per_sec": float("nan") if deterministic else rays / max(elapsed, 1e-12),
            }
            rows.append(row)
            pending.append(row)
            log.info("step %d loss %.6g psnr %.2f lr %.3g", state.step, loss, row["psnr"], lr)
            tic, rays = time.perf_counter(), 0
            if checkpoint_path is not None:
                checkpoint_save(checkpoint_path, state)
                last_good = state.step
            if metrics_path is not None:
                _write_metrics(metrics_path, pending, append)
                append, pending = True, []
    if metrics_path is not None and not append:
        _write_metrics(metrics_path, [], False)
    return state, rows


def psnr_from_mse(mse, peak=1.0) -> float:
    if mse <= 0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def config_dict(cfg) -> dict:
    return {k: v for k, v in asdict(cfg).items() if k != "levels"}
