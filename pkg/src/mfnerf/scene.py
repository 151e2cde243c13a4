"""Datasets, cameras, ray generation/sampling and the analytic oracle scene."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, DomainError

WHITE = (1.0, 1.0, 1.0)
BLACK = (0.0, 0.0, 0.0)


@dataclass
class Camera:
    """Pinhole camera; looks down -z in camera space with +x right, +y up."""

    c2w: np.ndarray
    fov_x: float
    width: int
    height: int
    near: float = 0.0
    far: float = 10.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape == (3, 4):
            self.c2w = np.vstack([self.c2w, [0, 0, 0, 1]])
        if self.c2w.shape != (4, 4):
            raise DataError(f"camera transform must be 4x4, got {self.c2w.shape}")
        rot = self.c2w[:3, :3]
        if not np.all(np.isfinite(rot)) or abs(np.linalg.det(rot)) < 1e-8:
            raise DataError("malformed transform: rotation block is not invertible")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-4:
            raise DataError("malformed transform: rotation block is not orthonormal")
        if not 0 < self.fov_x < math.pi:
            raise DataError("field of view must lie in (0, pi)")
        if not self.near < self.far:
            raise DataError("near must be < far")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.fov_x)

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()

    def pixel_directions(self, u, v) -> np.ndarray:
        """World-space unit directions through pixel centres (u + 0.5, v + 0.5)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        f = self.focal
        cam = np.stack(
            [(u + 0.5 - 0.5 * self.width) / f, -(v + 0.5 - 0.5 * self.height) / f, -np.ones_like(u)], axis=-1
        )
        d = cam @ self.c2w[:3, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def all_rays(self):
        v, u = np.mgrid[0:self.height, 0:self.width]
        d = self.pixel_directions(u, v)
        return np.broadcast_to(self.position, d.shape).copy(), d


def generate_ray(camera: Camera, u: int, v: int):
    """Origin and unit direction of the ray through pixel (u, v)."""
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise DomainError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    return camera.position, camera.pixel_directions(u, v)


def look_at(eye, target=(0.5, 0.5, 0.5), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross((0.0, 1.0, 0.0), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, back, eye
    return m


@dataclass(frozen=True)
class SceneBox:
    """Affine map world -> unit cube: (p - center) * scale + 0.5."""

    center: tuple = (0.5, 0.5, 0.5)
    scale: float = 1.0

    def to_unit(self, p):
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.center)) * self.scale + 0.5


def aabb_range(origins, dirs):
    """Entry/exit distances of rays against [0,1]^3 (slab method)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (0.0 - origins) * inv
        t_b = (1.0 - origins) * inv
    lo = np.where(np.isnan(t_a), -np.inf, np.minimum(t_a, t_b))
    hi = np.where(np.isnan(t_b), np.inf, np.maximum(t_a, t_b))
    return lo.max(axis=-1), hi.min(axis=-1)


def stratified_t(near, far, n, rng=None):
    """n stratified distances in [near, far]; bin midpoints when ``rng`` is None."""
    if not near < far:
        raise DomainError("near must be < far")
    if n < 1:
        raise DomainError("need at least one sample")
    width = (far - near) / n
    u = 0.5 if rng is None else rng.random(n)
    t = near + (np.arange(n) + u) * width
    return t, width


def sample_ray(origin, direction, near, far, n_samples, rng=None):
    """Stratified samples of one ray clipped to the unit cube.

    Returns ``(positions, deltas, t)``; all empty when the ray misses the cube.
    The last interval is the bin width.
    """
    if not near < far:
        raise DomainError("near must be < far")
    pos, deltas, counts, t = sample_rays(
        np.asarray(origin, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None],
        near, far, n_samples, rng,
    )
    return pos, deltas, t


def sample_rays(origins, dirs, near, far, n_samples, rng=None):
    """Packed stratified samples for a batch of rays (unit-cube coordinates).

    Returns ``(positions (S,3), deltas (S,), counts (R,), t (S,))``.
    """
    if n_samples < 1:
        raise DomainError("need at least one sample")
    lo, hi = aabb_range(origins, dirs)
    t0 = np.maximum(lo, near)
    t1 = np.minimum(hi, far)
    hit = t1 - t0 > 1e-9
    counts = np.where(hit, n_samples, 0).astype(np.int64)
    t0, t1 = t0[hit], t1[hit]
    width = ((t1 - t0) / n_samples)[:, None]
    u = 0.5 if rng is None else rng.random((len(t0), n_samples))
    t = t0[:, None] + (np.arange(n_samples)[None] + u) * width
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = width[:, 0]
    pos = origins[hit][:, None] + t[..., None] * dirs[hit][:, None]
    return np.clip(pos.reshape(-1, 3), 0.0, 1.0), deltas.ravel(), counts, t.ravel()


@dataclass
class Dataset:
    """Posed RGB images; rays are produced in unit-cube coordinates via ``box``."""

    split: str
    cameras: list
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    background: tuple = WHITE
    box: SceneBox = field(default_factory=SceneBox)
    alphas: np.ndarray | None = None

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DataError("need exactly one camera per image")

    @property
    def shape(self):
        return self.images.shape[1:3]

    def unit_rays(self):
        """Origins, directions and (near, far) of every pixel, in unit-cube space."""
        origins, dirs = [], []
        for cam in self.cameras:
            o, d = cam.all_rays()
            origins.append(self.box.to_unit(o))
            dirs.append(d)
        cam = self.cameras[0]
        return np.stack(origins), np.stack(dirs), cam.near * self.box.scale, cam.far * self.box.scale


def _read_rgba(path: Path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
    return arr[..., :3], arr[..., 3]


def load_nerf_synthetic(directory, split="train", background=WHITE, scale=1.0, near=2.0, far=6.0) -> Dataset:
    """Read ``transforms_<split>.json`` plus PNG frames; composite RGBA over ``background``.

    ``scale`` is the scene scaling hyperparameter: the scene is assumed to lie
    in [-1.5 * scale, 1.5 * scale]^3.
    """
    directory = Path(directory)
    path = directory / f"transforms_{split}.json"
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        meta = json.loads(path.read_text())
        fov = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed transforms file {path}: {exc}") from None
    cameras, images, alphas = [], [], []
    bg = np.asarray(background, dtype=np.float32)
    for frame in frames:
        image_path = directory / frame["file_path"]
        if image_path.suffix == "":
            image_path = image_path.with_suffix(".png")
        if not image_path.is_file():
            raise DataError(f"missing file: {image_path}")
        rgb, alpha = _read_rgba(image_path)
        if images and rgb.shape != images[0].shape:
            raise DataError(f"resolution mismatch: {image_path} is {rgb.shape[1]}x{rgb.shape[0]}")
        images.append(rgb * alpha[..., None] + bg * (1.0 - alpha[..., None]))
        alphas.append(alpha)
        h, w = rgb.shape[:2]
        cameras.append(Camera(np.array(frame["transform_matrix"], dtype=np.float64), fov, w, h, near, far))
    if not images:
        raise DataError(f"no frames in {path}")
    box = SceneBox(center=(0.0, 0.0, 0.0), scale=1.0 / (3.0 * scale))
    return Dataset(split, cameras, np.stack(images).astype(np.float32), tuple(background), box, np.stack(alphas))


@dataclass
class Image2DTask:
    """Pixel-centre coordinates in [0,1]^2 and their RGB targets."""

    coords: np.ndarray  # (H*W, 2)
    targets: np.ndarray  # (H*W, 3)
    height: int
    width: int

    def image(self, flat_rgb) -> np.ndarray:
        return np.asarray(flat_rgb).reshape(self.height, self.width, 3)


def make_image2d_dataset(image) -> Image2DTask:
    raw = np.asarray(image)
    if raw.size == 0:
        raise DataError("empty image")
    img = raw.astype(np.float32)
    if raw.dtype == np.uint8 or img.max() > 1.0:
        img = img / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    img = img[..., :3]
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise DataError("empty image")
    v, u = np.mgrid[0:h, 0:w]
    coords = np.stack([(u.ravel() + 0.5) / w, (v.ravel() + 0.5) / h], axis=1)
    return Image2DTask(coords, img.reshape(-1, 3).copy(), h, w)


def sample_image() -> np.ndarray:
    """128x128 crop-and-resize of scikit-image's astronaut photograph."""
    from skimage import data, transform

    img = data.astronaut()[30:330, 100:400] / 255.0
    return transform.resize(img, (128, 128), anti_aliasing=True).astype(np.float32)


# --------------------------------------------------------------------------
# analytic oracle scene


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class OracleScene:
    """Soft-edged sphere plus a soft-edged box, with closed-form density/colour."""

    sphere_center: tuple = (0.38, 0.5, 0.5)
    sphere_radius: float = 0.2
    sphere_color: tuple = (0.9, 0.25, 0.2)
    sphere_density: float = 40.0
    box_min: tuple = (0.6, 0.3, 0.3)
    box_max: tuple = (0.8, 0.7, 0.65)
    box_color: tuple = (0.2, 0.45, 0.9)
    box_density: float = 40.0
    softness: float = 0.015

    def _parts(self, x):
        x = np.asarray(x)
        dt = x.dtype if x.dtype in (np.float64, np.longdouble) else np.float64
        x = x.astype(dt, copy=False)
        c = np.asarray(self.sphere_center, dtype=dt)
        r = np.sqrt(((x - c) ** 2).sum(-1))
        s = self.sphere_density * _sigmoid((self.sphere_radius - r) / self.softness)
        lo = np.asarray(self.box_min, dtype=dt)
        hi = np.asarray(self.box_max, dtype=dt)
        inside = _sigmoid((x - lo) / self.softness) * _sigmoid((hi - x) / self.softness)
        b = self.box_density * inside.prod(-1)
        return s, b

    def density(self, x):
        s, b = self._parts(x)
        return s + b

    def color(self, x):
        s, b = self._parts(x)
        total = np.maximum(s + b, 1e-30)
        cs = np.asarray(self.sphere_color, dtype=s.dtype)
        cb = np.asarray(self.box_color, dtype=s.dtype)
        return (s[..., None] * cs + b[..., None] * cb) / total[..., None]

    # declarative text form: one "key = values" line per field
    def dumps(self) -> str:
        lines = []
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            text = " ".join(repr(float(v)) for v in value) if isinstance(value, tuple) else repr(float(value))
            lines.append(f"{name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "OracleScene":
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in cls.__dataclass_fields__:
                raise DataError(f"scene spec line {lineno}: cannot parse {line!r}")
            nums = tuple(float(v) for v in value.split())
            kwargs[key] = nums if len(nums) > 1 else nums[0]
        return cls(**kwargs)


def orbit_cameras(n, size=64, radius=1.6, elevation=0.35, fov=0.75, phase=0.0, center=(0.5, 0.5, 0.5)):
    """``n`` cameras evenly spaced in azimuth around ``center``, all looking at it."""
    cams = []
    for i in range(n):
        az = phase + 2 * math.pi * i / n
        eye = np.asarray(center) + radius * np.array(
            [math.cos(az) * math.cos(elevation), math.sin(az) * math.cos(elevation), math.sin(elevation)]
        )
        cams.append(Camera(look_at(eye, center), fov, size, size, radius - 0.9, radius + 0.9))
    return cams


def render_oracle(scene: OracleScene, camera: Camera, n_samples=512, background=BLACK) -> np.ndarray:
    """Ground-truth image by dense midpoint compositing in extended precision."""
    origins, dirs = camera.all_rays()
    H, W = camera.height, camera.width
    o = origins.reshape(-1, 3).astype(np.longdouble)
    d = dirs.reshape(-1, 3).astype(np.longdouble)
    lo, hi = aabb_range(origins.reshape(-1, 3), dirs.reshape(-1, 3))
    t0 = np.maximum(lo, camera.near).astype(np.longdouble)
    t1 = np.minimum(hi, camera.far).astype(np.longdouble)
    bg = np.asarray(background, dtype=np.longdouble)
    out = np.tile(bg, (len(o), 1))
    hit = np.flatnonzero(t1 > t0)
    for chunk in np.array_split(hit, max(1, len(hit) // 256)):
        if len(chunk) == 0:
            continue
        width = (t1[chunk] - t0[chunk]) / n_samples
        t = t0[chunk, None] + (np.arange(n_samples) + np.longdouble(0.5)) * width[:, None]
        x = o[chunk, None] + t[..., None] * d[chunk, None]
        sigma = scene.density(x)
        rgb = scene.color(x)
        tau = sigma * width[:, None]
        T = np.exp(-np.concatenate([np.zeros((len(chunk), 1), dtype=np.longdouble), np.cumsum(tau, axis=1)], axis=1))
        w = T[:, :-1] - T[:, 1:]
        out[chunk] = (w[..., None] * rgb).sum(1) + T[:, -1, None] * bg
    return out.reshape(H, W, 3).astype(np.float64)


def oracle_dataset(scene: OracleScene, cameras, n_samples=512, split="train") -> Dataset:
    images = np.stack([render_oracle(scene, cam, n_samples) for cam in cameras]).astype(np.float32)
    return Dataset(split, list(cameras), images, BLACK, SceneBox())


def save_png(path, image) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def oracle_views(split="train", n_views=16, size=64):
    """Cameras of the oracle task: an orbit for training, a raised, rotated orbit for testing."""
    if split == "train":
        return orbit_cameras(n_views, size)
    if split == "test":
        return orbit_cameras(max(1, n_views // 4), size, elevation=0.5, phase=math.pi / n_views)
    raise DataError(f"unknown split {split!r}")
