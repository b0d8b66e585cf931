import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cascade3d import nncore as nn
import gradcases

vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-20, 20))


class TestLayers:
    def test_identity_dense(self, rng):
        layer = nn.Dense(4, 4, rng, "d", init="identity")
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(layer.forward(x)[0], x)

    def test_linear_closed_form(self, rng):
        layer = nn.Dense(3, 2, rng, "d")
        x = rng.normal(size=(1, 3))
        dy = rng.normal(size=(1, 2))
        layer.backward(dy, layer.forward(x)[1])
        np.testing.assert_allclose(layer.W.grad, x.T @ dy)
        np.testing.assert_allclose(layer.b.grad, dy[0])

    def test_shape_errors(self, rng):
        layer = nn.Dense(3, 2, rng, "d")
        with pytest.raises(ValueError):
            layer.forward(np.zeros((1, 4)))
        with pytest.raises(ValueError):
            layer.backward(np.zeros((1, 3)), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            nn.Mlp((3,), rng, "m")
        with pytest.raises(ValueError):
            nn.Dense(2, 3, rng, "d", init="identity")

    def test_batched_dense_matches_flat(self, rng):
        layer = nn.Dense(5, 3, rng, "d")
        x = rng.normal(size=(2, 4, 5))
        np.testing.assert_allclose(layer.forward(x)[0].reshape(-1, 3), layer.forward(x.reshape(-1, 5))[0])

    @pytest.mark.parametrize("seed", range(5))
    def test_three_layer_gradcheck(self, seed):
        assert gradcases.case_mlp(seed) < 1e-4

    def test_dropout(self, rng):
        d = nn.Dropout(0.5)
        x = np.ones((200, 50))
        assert d.forward(x, False, None)[0] is x
        y, keep = d.forward(x, True, rng)
        assert 0.45 < (y == 0).mean() < 0.55
        assert set(np.unique(y)) <= {0.0, 2.0}
        np.testing.assert_array_equal(d.backward(np.ones_like(x), keep), keep)

    def test_state_dict_round_trip(self, rng):
        a = nn.Mlp((3, 4, 2), rng, "m")
        b = nn.Mlp((3, 4, 2), np.random.default_rng(99), "m")
        b.load_state_dict(a.state_dict())
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(a.forward(x)[0], b.forward(x)[0])
        with pytest.raises(KeyError):
            b.load_state_dict({})


class TestMaxpool:
    def test_single_row(self, rng):
        row = rng.normal(size=(1, 5))
        np.testing.assert_array_equal(nn.maxpool_set(row)[0], row[0])

    def test_duplicates(self, rng):
        rows = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(nn.maxpool_set(np.vstack([rows, rows]))[0], nn.maxpool_set(rows)[0])

    def test_gradient_routes_to_argmax(self):
        rows = np.array([[1.0, 5.0], [3.0, 2.0]])
        _, arg = nn.maxpool_set(rows)
        np.testing.assert_array_equal(nn.maxpool_set_backward(np.array([7.0, 9.0]), arg, 2), [[0, 9], [7, 0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        assert gradcases.case_maxpool(seed) < 1e-4


class TestConv:
    @pytest.mark.parametrize("kernel,stride", [(3, 1), (3, 2), (1, 1), (1, 2)])
    def test_matches_direct_convolution(self, rng, kernel, stride):
        conv = nn.Conv2d(3, 4, rng, "c", kernel, stride)
        x = rng.normal(size=(7, 9, 3))
        y, _ = conv.forward(x)
        pad = kernel // 2
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        ref = np.empty_like(y)
        for i in range(y.shape[0]):
            for j in range(y.shape[1]):
                patch = xp[i * stride:i * stride + kernel, j * stride:j * stride + kernel]
                ref[i, j] = np.einsum("abc,abcd->d", patch, conv.W.value) + conv.b.value
        np.testing.assert_allclose(y, ref, atol=1e-12)
        assert y.shape[:2] == ((7 - 1) // stride + 1, (9 - 1) // stride + 1)

    @pytest.mark.parametrize("kernel,stride", [(3, 1), (3, 2), (1, 2)])
    def test_gradcheck(self, rng, kernel, stride):
        conv = nn.Conv2d(2, 3, rng, "c", kernel, stride)
        x = rng.normal(size=(5, 6, 2))
        up = rng.normal(size=conv.forward(x)[0].shape)
        f = lambda: float(np.sum(conv.forward(x)[0] * up))
        conv.zero_grad()
        dx = conv.backward(up, conv.forward(x)[1])
        err = nn.gradcheck(f, {"x": dx, "W": conv.W.grad.copy(), "b": conv.b.grad.copy()},
                           {"x": x, "W": conv.W.value, "b": conv.b.value})
        assert err < 1e-6

    def test_only_small_kernels(self, rng):
        with pytest.raises(ValueError):
            nn.Conv2d(1, 1, rng, "c", kernel=5)

    def test_upsample_is_linear_and_adjoint(self, rng):
        x = rng.normal(size=(3, 4, 2))
        y, cache = nn.upsample(x, 12, 16)
        dy = rng.normal(size=y.shape)
        # <U x, dy> == <x, U^T dy>
        assert np.sum(y * dy) == pytest.approx(np.sum(x * nn.upsample_backward(dy, cache)), rel=1e-12)
        const, _ = nn.upsample(np.ones((3, 4, 1)), 12, 16)
        np.testing.assert_allclose(const, 1.0)


class TestLosses:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_smooth_l1_values(self, x, expected):
        assert nn.smooth_l1(np.array([x]), np.array([0.0]))[0] == pytest.approx(expected)

    def test_smooth_l1_c1_at_seam(self):
        eps = 1e-9
        lo = nn.smooth_l1(np.array([1 - eps]), 0.0)
        hi = nn.smooth_l1(np.array([1 + eps]), 0.0)
        assert lo[0] == pytest.approx(hi[0], abs=1e-8)
        assert lo[1][0] == pytest.approx(hi[1][0], abs=1e-8)

    def test_cross_entropy_uniform(self):
        assert nn.cross_entropy(np.zeros((1, 4)), np.array([2]))[0] == pytest.approx(np.log(4))

    def test_cross_entropy_confident(self):
        z = np.array([[50.0, 0.0, 0.0]])
        assert nn.cross_entropy(z, np.array([0]))[0] < 1e-20

    def test_cross_entropy_ignore(self, rng):
        z = rng.normal(size=(3, 4))
        loss, grad = nn.cross_entropy(z, np.array([-1, 2, -1]), ignore_index=-1)
        assert loss == pytest.approx(nn.cross_entropy(z[1:2], np.array([2]))[0])
        assert np.all(grad[[0, 2]] == 0)
        assert nn.cross_entropy(z, np.full(3, -1), ignore_index=-1) == (0.0, pytest.approx(np.zeros((3, 4))))

    @given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)), st.lists(st.integers(0, 2), min_size=4,
                                                                                  max_size=4))
    def test_cross_entropy_nonnegative(self, z, lab):
        assert nn.cross_entropy(z, np.array(lab))[0] >= 0

    def test_bce_values(self):
        assert nn.bce(np.array([0.5]), np.array([1.0]))[0] == pytest.approx(np.log(2))
        assert nn.bce(np.array([0.5]), np.array([0.0]))[0] == pytest.approx(np.log(2))
        assert nn.bce(np.array([1.0]), np.array([1.0]))[0] < 1e-6
        # clamped: an exactly wrong prediction stays finite
        assert nn.bce(np.array([0.0]), np.array([1.0]))[0] == pytest.approx(-np.log(1e-7))

    def test_bce_with_logits_matches_bce(self, rng):
        z = rng.normal(size=6)
        t = rng.uniform(size=6)
        assert nn.bce_with_logits(z, t)[0] == pytest.approx(nn.bce(nn.sigmoid(z), t)[0], rel=1e-10)
        assert np.isfinite(nn.bce_with_logits(np.array([1e4, -1e4]), np.array([0.0, 1.0]))[0])

    @given(vectors)
    def test_softmax_simplex(self, z):
        p = nn.softmax(z)
        assert p.sum() == pytest.approx(1.0) and np.all(p >= 0)
        np.testing.assert_allclose(np.exp(nn.log_softmax(z)), p, atol=1e-12)

    @pytest.mark.parametrize("name", ["smooth_l1", "cross_entropy", "bce", "seg_loss"])
    def test_gradchecks(self, name):
        case = gradcases.CASES[name]
        assert max(case(s) for s in range(5)) < 1e-4


class TestOptim:
    def _param(self, value, grad):
        p = nn.Param("p", np.array(value, dtype=float))
        p.grad[...] = grad
        return p

    def test_zero_grad_no_decay(self):
        p = self._param([1.0, -2.0], 0.0)
        nn.AdamW([([p], 0.0)], lr=0.1).step()
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_decoupled_decay(self):
        p = self._param([1.0, -2.0], 0.0)
        nn.AdamW([([p], 0.01)], lr=0.1).step()
        np.testing.assert_allclose(p.value, np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))

    def test_descends_quadratic(self):
        p = self._param([1.0], 0.0)
        opt = nn.AdamW([([p], 0.0)], lr=0.01)
        before = float(p.value[0] ** 2)
        p.grad[...] = 2 * p.value
        opt.step()
        assert float(p.value[0] ** 2) < before

    def test_groups_have_own_decay(self):
        a, b = self._param([1.0], 0.0), self._param([1.0], 0.0)
        nn.AdamW([([a], 0.5), ([b], 0.0)], lr=0.1).step()
        assert a.value[0] < 1.0 and b.value[0] == 1.0

    def test_functional_step(self):
        p = self._param([1.0], 1.0)
        opt = nn.adamw_step([p], lr=0.1)
        assert p.value[0] == pytest.approx(0.9, abs=1e-6)
        nn.adamw_step([p], lr=0.1, optimizer=opt)
        assert opt.t == 2

    @pytest.mark.parametrize("norm,scale", [(5.0, 1.0), (20.0, 0.5)])
    def test_clip(self, norm, scale):
        p = self._param([0.0, 0.0], [0.6 * norm, 0.8 * norm])
        assert nn.clip_grad_norm([p], 10.0) == pytest.approx(scale)
        assert nn.global_grad_norm([p]) <= 10 + 1e-9

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
    def test_clip_contract(self, g):
        p = self._param(np.zeros_like(g), g)
        nn.clip_grad_norm([p], 10.0)
        assert nn.global_grad_norm([p]) <= 10 + 1e-9


class TestGradcheckTool:
    def test_detects_wrong_gradient(self):
        x = np.array([1.0, 2.0])
        f = lambda: float(np.sum(x ** 2))
        assert nn.gradcheck(f, {"x": 2 * x}, {"x": x}) < 1e-8
        assert nn.gradcheck(f, {"x": 3 * x}, {"x": x}) > 0.1

    def test_relative_error_floor(self):
        assert nn.relative_error(0.0, 1e-9) == pytest.approx(1e-9 / 1e-6)
        assert nn.relative_error(0.0, 0.0) == 0.0
