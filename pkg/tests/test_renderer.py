import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfnerf.encoding import FeatureTableBank
from mfnerf.errors import DomainError, ShapeError
from mfnerf.grid import EncodingConfig
from mfnerf.renderer import (
    SIGMA_CLAMP,
    MlpParameters,
    check_sample_order,
    composite,
    composite_backward,
    encode_direction,
    mlp_backward,
    mlp_forward,
)
from mfnerf.trainer import TrainConfig, forward_backward_rays, init_state


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestDirectionEncoding:
    def test_pole(self):
        sh = encode_direction((0.0, 0.0, 1.0))
        assert sh.shape == (16,)
        np.testing.assert_allclose(sh[[0, 2, 6, 12]], [0.28209479, 0.48860251, 0.63078313, 0.74635267], atol=1e-8)
        mask = np.ones(16, bool)
        mask[[0, 2, 6, 12]] = False
        assert np.all(sh[mask] == 0)

    def test_parity(self, rng):
        d = _unit(rng.standard_normal((50, 3)))
        a, b = encode_direction(d), encode_direction(-d)
        degree = np.repeat([0, 1, 2, 3], [1, 3, 5, 7])
        np.testing.assert_allclose(b, a * (-1.0) ** degree, atol=1e-12)

    def test_orthonormal(self):
        # Gauss-Legendre in cos(theta), uniform in phi: exact for degree <= 6
        mu, wmu = np.polynomial.legendre.leggauss(12)
        phi = np.arange(24) * (2 * np.pi / 24)
        M, P = np.meshgrid(mu, phi, indexing="ij")
        s = np.sqrt(1 - M**2)
        d = np.stack([s * np.cos(P), s * np.sin(P), M], axis=-1).reshape(-1, 3)
        w = (wmu[:, None] * np.full(24, 2 * np.pi / 24)[None]).ravel()
        Y = encode_direction(d)
        np.testing.assert_allclose(Y.T @ (Y * w[:, None]), np.eye(16), atol=1e-10)

    def test_rejects_non_unit(self):
        with pytest.raises(DomainError):
            encode_direction((0.0, 0.0, 1.1))
        with pytest.raises(ShapeError):
            encode_direction((1.0, 0.0))


class TestMlp:
    def test_zero_weights(self):
        p = MlpParameters.init(8, rng=np.random.default_rng(0))
        z = p.zeros_like()
        sigma, rgb, f_c, _ = mlp_forward(np.ones((4, 8), np.float32), np.zeros((4, 16), np.float32), z)
        assert np.all(sigma == 1.0) and np.all(rgb == 0.5) and not f_c.any()

    def test_layout(self):
        p = MlpParameters.init(32, rng=np.random.default_rng(0))
        assert [w.shape for w, _ in p.density] == [(32, 64), (64, 16)]
        assert [w.shape for w, _ in p.color] == [(32, 128), (128, 128), (128, 3)]
        assert p.density[-1][1] is None and p.color[-1][1] is None
        assert p.num_scalars() == 32 * 64 + 64 + 64 * 16 + 32 * 128 + 128 + 128 * 128 + 128 + 128 * 3

    def test_matches_dense_reference(self, rng):
        p = MlpParameters.init(12, rng=rng, dtype=np.float64)
        y = rng.standard_normal((7, 12))
        d = encode_direction(_unit(rng.standard_normal((7, 3))))
        relu = lambda a: np.maximum(a, 0)
        (w1, b1), (w2, _) = p.density
        f = relu(y @ w1 + b1) @ w2
        (c1, e1), (c2, e2), (c3, _) = p.color
        logits = relu(relu(np.hstack([f, d]) @ c1 + e1) @ c2 + e2) @ c3
        sigma, rgb, f_c, _ = mlp_forward(y, d, p)
        np.testing.assert_allclose(f_c, f, rtol=1e-12)
        np.testing.assert_allclose(sigma, np.exp(f[:, 0]), rtol=1e-12)
        np.testing.assert_allclose(rgb, 1 / (1 + np.exp(-logits)), rtol=1e-12)

    def test_density_clamp(self):
        p = MlpParameters.init(2, rng=np.random.default_rng(0), dtype=np.float64).zeros_like()
        # f_c[0] = relu(y0) - relu(-y0) = y0
        p.density[0][0][0, :2] = (1.0, -1.0)
        p.density[1][0][:2, 0] = (1.0, -1.0)
        y = np.array([[100.0, 0.0], [-100.0, 0.0], [1.0, 0.0]])
        sigma, _, _, cache = mlp_forward(y, np.zeros((3, 16)), p)
        np.testing.assert_allclose(sigma[:2], np.exp([SIGMA_CLAMP, -SIGMA_CLAMP]), rtol=1e-12)
        _, dy = mlp_backward(cache, p, np.ones(3), np.zeros((3, 3)))
        assert not dy[:2].any()
        np.testing.assert_allclose(dy[2, 0], np.e, rtol=1e-12)

    def test_backward_without_forward(self):
        p = MlpParameters.init(4)
        with pytest.raises(RuntimeError):
            mlp_backward(None, p, np.zeros(1), np.zeros((1, 3)))

    def test_no_direction_input(self):
        p = MlpParameters.init(4, dir_dim=0, rng=np.random.default_rng(1))
        _, rgb, _, _ = mlp_forward(np.ones((3, 4), np.float32), None, p)
        assert rgb.shape == (3, 3)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = MlpParameters.init(6, density_hidden=(5,), color_hidden=(7, 4), rng=rng, dtype=np.float64)
        for w, b in p.density + p.color:
            if b is not None:
                b[:] = rng.uniform(-0.3, 0.3, b.shape)
        y = rng.standard_normal((4, 6))
        d = encode_direction(_unit(rng.standard_normal((4, 3))))
        ws, wc = rng.standard_normal(4), rng.standard_normal((4, 3))

        def objective(params, yy):
            s, c, _, _ = mlp_forward(yy, d, params)
            return np.sum(ws * s) + np.sum(wc * c)

        _, _, _, cache = mlp_forward(y, d, p)
        grads, dy = mlp_backward(cache, p, ws, wc)
        h = 1e-6
        for arr, g in zip(p.arrays(), grads.arrays()):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = objective(p, y)
                arr[idx] = old - h
                fm = objective(p, y)
                arr[idx] = old
                fd = (fp - fm) / (2 * h)
                assert abs(g[idx] - fd) <= 1e-5 * max(1.0, abs(fd))
        for idx in np.ndindex(y.shape):
            e = np.zeros_like(y)
            e[idx] = h
            fd = (objective(p, y + e) - objective(p, y - e)) / (2 * h)
            assert abs(dy[idx] - fd) <= 1e-5 * max(1.0, abs(fd))


def _oracle_composite(sigma, rgb, delta, counts, bg):
    """Front-to-back loop in extended precision."""
    ld = np.longdouble
    out, start = [], 0
    for n in counts:
        T, c = ld(1), np.zeros(3, dtype=ld)
        for i in range(start, start + n):
            a = np.exp(-ld(sigma[i]) * ld(delta[i]))
            c += T * (1 - a) * rgb[i].astype(ld)
            T *= a
        out.append(c + T * np.asarray(bg, dtype=ld))
        start += n
    return np.array(out, dtype=np.float64)


def _random_rays(rng, n_rays=6, max_samples=9):
    counts = rng.integers(0, max_samples, n_rays)
    S = counts.sum()
    return rng.exponential(3.0, S), rng.random((S, 3)), rng.uniform(0.01, 0.5, S), counts


class TestComposite:
    def test_single_sample(self, backend):
        res = composite([1.0], [[1.0, 0.0, 0.0]], [1.0], [1])
        np.testing.assert_allclose(res.color, [[1 - np.exp(-1), 0, 0]], rtol=1e-12)
        np.testing.assert_allclose(res.transmittance, [np.exp(-1)], rtol=1e-12)

    def test_two_samples_with_background(self, backend):
        res = composite([np.log(2), np.log(2)], [[1, 0, 0], [0, 1, 0]], [1.0, 1.0], [2], background=(0, 0, 1))
        np.testing.assert_allclose(res.color, [[0.5, 0.25, 0.25]], rtol=1e-12)
        np.testing.assert_allclose(res.weights, [0.5, 0.25], rtol=1e-12)

    def test_empty_ray_is_background(self, backend):
        res = composite(np.zeros(0), np.zeros((0, 3)), np.zeros(0), [0, 0], background=(1, 1, 1))
        assert np.all(res.color == 1.0)

    def test_rejects_non_positive_interval(self):
        with pytest.raises(DomainError):
            composite([1.0, 1.0], np.zeros((2, 3)), [0.1, 0.0], [2])

    def test_sample_order(self):
        check_sample_order([0.1, 0.2, 0.05, 0.3], [2, 2])
        with pytest.raises(DomainError):
            check_sample_order([0.1, 0.1], [2])

    @pytest.mark.parametrize("seed", range(5))
    def test_against_extended_precision(self, backend, seed):
        rng = np.random.default_rng(seed)
        sigma, rgb, delta, counts = _random_rays(rng)
        bg = rng.random(3)
        res = composite(sigma, rgb, delta, counts, background=bg)
        np.testing.assert_allclose(res.color, _oracle_composite(sigma, rgb, delta, counts, bg), atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_weight_conservation(self, seed):
        sigma, rgb, delta, counts = _random_rays(np.random.default_rng(seed))
        res = composite(sigma, rgb, delta, counts)
        sums = np.add.reduceat(np.append(res.weights, 0.0), np.concatenate([[0], np.cumsum(counts)[:-1]]))
        sums[counts == 0] = 0.0
        np.testing.assert_allclose(sums + res.transmittance, 1.0, atol=1e-12)

    def test_opaque_front_sample_wins(self, backend):
        res = composite([1e4, 1.0], [[0.2, 0.4, 0.6], [1, 1, 1]], [1.0, 1.0], [2], background=(1, 1, 1))
        np.testing.assert_allclose(res.color, [[0.2, 0.4, 0.6]], atol=1e-12)

    def test_splitting_an_interval_changes_nothing(self, rng):
        sigma, rgb, delta, counts = _random_rays(rng, n_rays=1, max_samples=9)
        counts = np.array([len(sigma)])
        split = composite(np.repeat(sigma, 2), np.repeat(rgb, 2, axis=0), np.repeat(delta / 2, 2), counts * 2)
        np.testing.assert_allclose(split.color, composite(sigma, rgb, delta, counts).color, atol=1e-12)

    def test_early_stop_bounded_error(self, backend, rng):
        sigma, rgb, delta, counts = _random_rays(rng, n_rays=20, max_samples=40)
        full = composite(sigma * 5, rgb, delta, counts, background=(1, 1, 1)).color
        fast = composite(sigma * 5, rgb, delta, counts, background=(1, 1, 1), early_stop=True).color
        assert np.abs(full - fast).max() <= 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_backward_finite_differences(self, backend, seed):
        rng = np.random.default_rng(seed)
        sigma, rgb, delta, counts = _random_rays(rng)
        bg = rng.random(3)
        dcolor = rng.standard_normal((len(counts), 3))
        ds, dr = composite_backward(sigma, rgb, delta, counts, dcolor, bg)
        f = lambda s, c: np.sum(dcolor * composite(s, c, delta, counts, background=bg).color)
        h = 1e-6
        for i in range(len(sigma)):
            e = np.zeros_like(sigma)
            e[i] = h
            fd = (f(sigma + e, rgb) - f(sigma - e, rgb)) / (2 * h)
            assert abs(ds[i] - fd) <= 1e-6 * max(1.0, abs(fd))
        for i in np.ndindex(rgb.shape):
            e = np.zeros_like(rgb)
            e[i] = h
            fd = (f(sigma, rgb + e) - f(sigma, rgb - e)) / (2 * h)
            assert abs(dr[i] - fd) <= 1e-6 * max(1.0, abs(fd))

    def test_backends_agree(self, rng):
        from mfnerf import kernels

        sigma, rgb, delta, counts = _random_rays(rng, n_rays=50, max_samples=30)
        dcolor = rng.standard_normal((50, 3))
        outs = {}
        for name in ("numpy", "numba"):
            kernels.set_backend(name)
            r = composite(sigma, rgb, delta, counts, background=(1, 1, 1), early_stop=True)
            outs[name] = (r.color, r.weights, *composite_backward(sigma, rgb, delta, counts, dcolor, (1, 1, 1)))
        for a, b in zip(outs["numpy"], outs["numba"]):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_full_pipeline_gradients():
    """Encoding, networks and compositing together against central differences."""
    enc = EncodingConfig(L=2, N=1, T=2**14, F=2, N_min=2, N_max=4)
    state = init_state(enc, TrainConfig(seed=3))
    rng = np.random.default_rng(4)
    state.bank = FeatureTableBank(enc, rng.standard_normal(state.bank.params.shape) * 0.5)
    state.mlp = MlpParameters.init(4, density_hidden=(6,), color_hidden=(5,), rng=rng, dtype=np.float64)
    origins = np.array([[0.5, 0.5, -1.0], [-0.5, 0.3, 0.4]])
    dirs = _unit([[0.05, -0.02, 1.0], [1.0, 0.1, 0.05]])
    target = rng.random((2, 3))
    args = (origins, dirs, target, 0.0, 4.0, 6, None, (1.0, 1.0, 1.0))

    state.bank.zero_grad()
    _, grads = forward_backward_rays(state, *args)
    bank_grad = state.bank.grads.copy()

    def loss():
        state.bank.zero_grad()
        return forward_backward_rays(state, *args)[0]

    h = 1e-6
    for e in state.bank.touched[:12]:
        for f in range(2):
            old = state.bank.params[e, f]
            state.bank.params[e, f] = old + h
            lp = loss()
            state.bank.params[e, f] = old - h
            lm = loss()
            state.bank.params[e, f] = old
            fd = (lp - lm) / (2 * h)
            assert abs(bank_grad[e, f] - fd) <= 1e-5 * max(1.0, abs(fd))
    for arr, g in zip(state.mlp.arrays(), grads.arrays()):
        for idx in list(np.ndindex(arr.shape))[:10]:
            old = arr[idx]
            arr[idx] = old + h
            lp = loss()
            arr[idx] = old - h
            lm = loss()
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(g[idx] - fd) <= 1e-5 * max(1.0, abs(fd))
