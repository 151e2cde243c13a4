import json
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from mfnerf.errors import DataError, DomainError
from mfnerf.grid import EncodingConfig
from mfnerf.metrics import psnr
from mfnerf.scene import (
    BLACK,
    Camera,
    OracleScene,
    SceneBox,
    generate_ray,
    load_nerf_synthetic,
    look_at,
    make_image2d_dataset,
    orbit_cameras,
    render_oracle,
    sample_ray,
    sample_rays,
    stratified_t,
)
from mfnerf.trainer import ImageFitTask, TrainConfig, train

from conftest import FIXTURES

MINI = FIXTURES / "mini_synthetic"


class TestLoadSynthetic:
    def test_poses_match_file(self):
        ds = load_nerf_synthetic(MINI, "train")
        doc = json.loads((MINI / "transforms_train.json").read_text())
        assert len(ds.cameras) == 3 and ds.images.shape == (3, 8, 8, 3)
        for cam, frame in zip(ds.cameras, doc["frames"]):
            assert np.array_equal(cam.c2w, np.array(frame["transform_matrix"]))
            assert cam.fov_x == doc["camera_angle_x"]
        assert len(load_nerf_synthetic(MINI, "test").cameras) == 1

    def test_round_trip_is_identical(self):
        a, b = load_nerf_synthetic(MINI), load_nerf_synthetic(MINI)
        assert a.images.tobytes() == b.images.tobytes()

    def test_transparent_pixel_over_white(self):
        ds = load_nerf_synthetic(MINI)
        assert np.array_equal(ds.images[0, 0, 0], [1.0, 1.0, 1.0])
        np.testing.assert_allclose(ds.images[0, 7, 7], np.array([10, 20, 30]) / 255, rtol=1e-6)
        black = load_nerf_synthetic(MINI, background=BLACK)
        assert np.array_equal(black.images[0, 0, 0], [0.0, 0.0, 0.0])

    def test_alpha_blend(self):
        ds = load_nerf_synthetic(MINI)
        with Image.open(MINI / "train/r_1.png") as im:
            raw = np.asarray(im, dtype=np.float64) / 255
        expected = raw[..., :3] * raw[..., 3:] + (1 - raw[..., 3:])
        np.testing.assert_allclose(ds.images[1], expected, atol=1e-6)

    def test_missing_transforms(self, tmp_path):
        with pytest.raises(DataError, match="transforms_train.json"):
            load_nerf_synthetic(tmp_path)

    def test_missing_frame(self, tmp_path):
        shutil.copytree(MINI, tmp_path / "d")
        (tmp_path / "d/train/r_1.png").unlink()
        with pytest.raises(DataError, match="r_1.png"):
            load_nerf_synthetic(tmp_path / "d")

    def test_resolution_mismatch(self, tmp_path):
        shutil.copytree(MINI, tmp_path / "d")
        Image.new("RGBA", (4, 4)).save(tmp_path / "d/train/r_2.png")
        with pytest.raises(DataError, match="resolution"):
            load_nerf_synthetic(tmp_path / "d")

    def test_singular_transform(self, tmp_path):
        shutil.copytree(MINI, tmp_path / "d")
        path = tmp_path / "d/transforms_train.json"
        doc = json.loads(path.read_text())
        doc["frames"][0]["transform_matrix"][0][:3] = [0.0, 0.0, 0.0]
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="malformed"):
            load_nerf_synthetic(tmp_path / "d")

    def test_unit_directions(self):
        for cam in load_nerf_synthetic(MINI).cameras:
            _, d = cam.all_rays()
            assert np.abs(np.linalg.norm(d, axis=-1) - 1).max() <= 1e-6


class TestCamera:
    def test_center_pixel_identity_pose(self):
        cam = Camera(np.eye(4), 0.8, 5, 5)
        o, d = generate_ray(cam, 2, 2)
        assert np.array_equal(o, [0, 0, 0])
        np.testing.assert_allclose(d, [0, 0, -1], atol=1e-15)

    def test_up_is_negative_v(self):
        cam = Camera(np.eye(4), 0.8, 6, 6)
        assert generate_ray(cam, 3, 0)[1][1] > 0 and generate_ray(cam, 5, 3)[1][0] > 0

    @given(st.integers(0, 20), st.integers(0, 14))
    def test_mirror_symmetry(self, u, v):
        cam = Camera(look_at((1.0, 2.0, 3.0), (0, 0, 0)), 1.1, 21, 15)
        a = cam.pixel_directions(u, v)
        b = cam.pixel_directions(20 - u, v)
        R = cam.c2w[:3, :3]
        ca, cb = R.T @ a, R.T @ b
        np.testing.assert_allclose(ca * [-1, 1, 1], cb, atol=1e-12)

    @pytest.mark.parametrize("size", [2, 7, 64])
    def test_corner_projection(self, size):
        cam = Camera(np.eye(4), math.pi / 2, size, size)
        d = generate_ray(cam, 0, 0)[1]
        # independent pinhole model: K^-1 [u, v, 1] with image y pointing down
        f = size / 2 / math.tan(math.pi / 4)
        K = np.array([[f, 0, size / 2], [0, f, size / 2], [0, 0, 1]])
        p = np.linalg.solve(K, [0.5, 0.5, 1.0])
        ref = np.array([p[0], -p[1], -1.0])
        np.testing.assert_allclose(d, ref / np.linalg.norm(ref), atol=1e-12)
        angle = math.acos(-d[2])
        assert angle == pytest.approx(math.atan(math.sqrt(2) * (1 - 1 / size)), abs=1e-12)

    def test_projection_round_trip(self, rng):
        cam = Camera(look_at((3.0, -1.0, 2.0), (0, 0, 0)), 0.9, 32, 24)
        R, o = cam.c2w[:3, :3], cam.position
        for _ in range(10):
            u, v = rng.integers(0, 32), rng.integers(0, 24)
            point = o + 2.5 * cam.pixel_directions(u, v)
            c = R.T @ (point - o)
            pu = -c[0] / c[2] * cam.focal + 16 - 0.5
            pv = c[1] / c[2] * cam.focal + 12 - 0.5
            assert pu == pytest.approx(u, abs=1e-9) and pv == pytest.approx(v, abs=1e-9)

    def test_out_of_bounds_pixel(self):
        with pytest.raises(DomainError):
            generate_ray(Camera(np.eye(4), 0.8, 4, 4), 4, 0)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(c2w=np.diag([1.0, 1.0, 2.0, 1.0])), dict(fov_x=math.pi), dict(near=2.0, far=1.0)],
    )
    def test_invalid(self, kwargs):
        base = dict(c2w=np.eye(4), fov_x=0.8, width=4, height=4)
        base.update(kwargs)
        with pytest.raises(DataError):
            Camera(**base)

    def test_scene_box(self):
        box = SceneBox(center=(0, 0, 0), scale=1 / 3)
        np.testing.assert_allclose(box.to_unit([[-1.5, 0, 1.5]]), [[0, 0.5, 1]])


class TestSampling:
    def test_midpoints(self):
        t, width = stratified_t(0.0, 1.0, 4)
        assert t.tolist() == [0.125, 0.375, 0.625, 0.875] and width == 0.25
        pos, deltas, t = sample_ray((0.5, 0.5, 0.0), (0.0, 0.0, 1.0), 0.0, 1.0, 4)
        np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(deltas, 0.25)
        np.testing.assert_allclose(pos[:, 2], t)

    def test_miss(self):
        pos, deltas, t = sample_ray((0.5, 0.5, -1.0), (0.0, 0.0, -1.0), 0.0, 5.0, 8)
        assert len(pos) == len(deltas) == len(t) == 0

    def test_clipped_to_box(self):
        pos, deltas, t = sample_ray((0.5, 0.5, -1.0), (0.0, 0.0, 1.0), 0.0, 5.0, 4)
        np.testing.assert_allclose(t, [1.125, 1.375, 1.625, 1.875])

    @given(st.integers(0, 2**32 - 1), st.integers(1, 40))
    @settings(max_examples=40)
    def test_jitter_stays_in_bins(self, seed, n):
        t, width = stratified_t(0.5, 2.0, n, np.random.default_rng(seed))
        k = np.arange(n)
        assert np.all(t >= 0.5 + k * width) and np.all(t < 0.5 + (k + 1) * width)
        assert np.all(np.diff(t) > 0)

    def test_packed_counts(self, rng):
        origins = np.array([[0.5, 0.5, -1.0], [0.5, 0.5, -1.0], [2.0, 2.0, 2.0]])
        dirs = np.array([[0, 0, 1.0], [0, 0, -1.0], [1.0, 0, 0]])
        pos, deltas, counts, t = sample_rays(origins, dirs, 0.0, 4.0, 5, rng)
        assert counts.tolist() == [5, 0, 0] and len(pos) == 5

    @pytest.mark.parametrize("near,far,n", [(1.0, 1.0, 4), (0.0, 1.0, 0)])
    def test_invalid(self, near, far, n):
        with pytest.raises(DomainError):
            stratified_t(near, far, n)


class TestImage2D:
    def test_single_pixel(self):
        task = make_image2d_dataset(np.full((1, 1, 3), 0.3))
        assert task.coords.tolist() == [[0.5, 0.5]]
        np.testing.assert_allclose(task.targets, [[0.3, 0.3, 0.3]], rtol=1e-6)

    def test_coordinates(self):
        task = make_image2d_dataset(np.zeros((2, 4, 3), np.uint8))
        assert task.coords[1].tolist() == [0.375, 0.25] and task.coords[4].tolist() == [0.125, 0.75]

    def test_empty(self):
        with pytest.raises(DataError):
            make_image2d_dataset(np.zeros((0, 3, 3)))

    def test_constant_image_converges(self):
        image = np.tile(np.float32([0.2, 0.6, 0.8]), (16, 16, 1))
        task = make_image2d_dataset(image)
        enc = EncodingConfig(L=4, N=2, T=2**14, F=2, N_min=4, N_max=16, dim=2)
        state, rows = train(ImageFitTask(task), enc, TrainConfig(batch_size=256, total_steps=200))
        assert rows[-1]["loss"] / (256 * 3) < 1e-4
        assert psnr(ImageFitTask(task).predict(state), image) > 40


class TestOracle:
    def test_density_non_negative(self, rng):
        scene = OracleScene()
        assert np.all(scene.density(rng.uniform(-1, 2, (1000, 3))) >= 0)

    def test_text_round_trip(self):
        scene = OracleScene(sphere_radius=0.15, box_color=(0.1, 0.2, 0.3))
        assert OracleScene.loads(scene.dumps()) == scene
        with pytest.raises(DataError):
            OracleScene.loads("radius 3")

    def test_empty_view_is_background(self):
        # looking away from the unit cube
        cam = Camera(look_at((3.0, 3.0, 3.0), (6.0, 6.0, 6.0)), 0.5, 8, 8, 0.1, 5.0)
        assert np.array_equal(render_oracle(OracleScene(), cam, 512, background=(0.25, 0.5, 0.75)),
                              np.tile([0.25, 0.5, 0.75], (8, 8, 1)))

    def test_mirror_symmetry(self):
        # sphere alone, centred in the cube and on the optical axis
        scene = OracleScene(sphere_center=(0.5, 0.5, 0.5), box_density=0.0)
        cam = Camera(look_at((0.5, -1.2, 0.5), (0.5, 0.5, 0.5)), 0.7, 16, 16, 0.5, 3.0)
        img = render_oracle(scene, cam, 512)
        assert img.max() > 0.3
        np.testing.assert_allclose(img, img[:, ::-1], atol=1e-9)

    def test_self_convergence(self):
        cam = orbit_cameras(1, size=12)[0]
        a = render_oracle(OracleScene(), cam, 512)
        b = render_oracle(OracleScene(), cam, 1024)
        assert np.abs(a - b).max() <= 1e-3
