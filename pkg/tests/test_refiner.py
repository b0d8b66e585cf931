import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascade3d import refiner
from cascade3d.geom3d import iou3d, wrap_angle

SMALL = refiner.RefinerConfig(pre_pool=(16, 16, 32), post_pool=(24, 24))


@pytest.fixture(scope="module")
def net():
    return refiner.RefinerNet(SMALL, np.random.default_rng(0))


def test_full_size_widths():
    big = refiner.RefinerNet(refiner.RefinerConfig(), np.random.default_rng(0))
    assert [l.W.value.shape[1] for l in big.point_mlp.layers] == [128, 128, 1024]
    assert [l.W.value.shape[1] for l in big.shared.layers] == [512, 512]
    assert big.cls_head.W.value.shape == (512, 4)
    assert big.reg_head.W.value.shape == (512, 7) and big.iou_head.W.value.shape == (512, 1)


def test_input_width_checked(net):
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 5, 11)))


def test_permutation_and_duplication_invariance(net, rng):
    x = rng.normal(size=(3, 20, 13))
    out = refiner.refine_forward(net, x)
    perm = refiner.refine_forward(net, x[:, rng.permutation(20)])
    dup = refiner.refine_forward(net, np.concatenate([x, x], axis=1))
    for k in ("residuals", "cls_logits", "iou_pred"):
        np.testing.assert_array_equal(out[k], perm[k])
        np.testing.assert_array_equal(out[k], dup[k])


def test_degenerate_row_is_finite(net):
    out = refiner.refine_forward(net, np.zeros((1, 1, 13)))
    assert all(np.all(np.isfinite(v)) for v in out.values())
    assert 0 < out["iou_pred"][0] < 1


def test_apply_residuals_examples():
    box = np.array([1.0, 2.0, 0.5, 1.0, 0.8, 0.6, np.pi / 2])
    np.testing.assert_array_equal(refiner.apply_residuals(box, np.zeros(7)), box)
    moved = refiner.apply_residuals(box, [1, 0, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(moved[:3], [1, 3, 0.5], atol=1e-15)
    shrunk = refiner.apply_residuals(box, [0, 0, 0, -(1.0 - 0.005), 0, 0, 0])
    assert shrunk[3] == 0.01
    turned = refiner.apply_residuals(box, [0, 0, 0, 0, 0, 0, np.pi])
    assert -np.pi <= turned[6] < np.pi


@given(st.integers(0, 10**6))
def test_residual_round_trip(seed):
    rng = np.random.default_rng(seed)
    props = np.concatenate([rng.normal(size=(5, 3)), rng.uniform(0.2, 2, (5, 3)), rng.uniform(-np.pi, np.pi, (5, 1))], 1)
    gt = np.concatenate([rng.normal(size=(5, 3)), rng.uniform(0.2, 2, (5, 3)), rng.uniform(-np.pi, np.pi, (5, 1))], 1)
    res = refiner.residual_targets(props, gt)
    assert np.all(res[:, 6] >= -np.pi / 2) and np.all(res[:, 6] < np.pi / 2)
    back = refiner.apply_residuals(props, res)
    np.testing.assert_allclose(back[:, :6], gt[:, :6], atol=1e-12)
    # heading agrees up to a half turn, and the boxes coincide
    d = wrap_angle(back[:, 6] - gt[:, 6])
    assert np.all(np.minimum(np.abs(d), np.pi - np.abs(d)) < 1e-9)
    for a, b in zip(back, gt):
        assert iou3d(a, b) == pytest.approx(1.0, abs=1e-6)


def test_iou_target_examples():
    assert refiner.iou_target(0.65) == 1.0
    assert refiner.iou_target(0.15) == 0.0
    assert refiner.iou_target(0.5) == pytest.approx(0.7, abs=1e-12)


def test_iou_target_grid():
    grid = np.linspace(0, 1, 1001)
    y = refiner.iou_target(grid)
    expect = np.array([min(1.0, max(0.0, 2 * v - 0.3)) for v in grid])
    np.testing.assert_allclose(y, expect, atol=1e-12, rtol=0)
    assert np.all(np.diff(y) >= 0)
    assert np.all(y[grid <= 0.15] == 0) and np.all(y[grid >= 0.65] == 1)


def _out(n, c=3, rng=None):
    rng = rng or np.random.default_rng(0)
    z = rng.normal(size=n)
    return {"residuals": rng.normal(size=(n, 7)), "cls_logits": rng.normal(size=(n, c + 1)), "iou_logit": z,
            "iou_pred": 1 / (1 + np.exp(-z))}


def test_rcnn_loss_perfect_proposal():
    gt = np.array([[0, 0, 0.5, 1, 1, 1, 0.2]])
    out = _out(1)
    out["residuals"][:] = 0
    total, parts, grads, info = refiner.rcnn_loss(gt, out, gt, [2], SMALL)
    assert parts["box_refine"] == 0.0
    assert info["fg"][0] and refiner.iou_target(info["iou"])[0] == 1.0
    assert total == parts["box_refine"] + parts["sem_cls"] + parts["iou"]


def test_rcnn_loss_without_gt():
    out = _out(4)
    total, parts, grads, info = refiner.rcnn_loss(np.zeros((4, 7)) + [0, 0, 0, 1, 1, 1, 0], out, np.zeros((0, 7)),
                                                  [], SMALL)
    assert parts["box_refine"] == 0.0 and not grads["residuals"].any()
    z = out["cls_logits"]
    ce = np.mean(np.log(np.exp(z).sum(1)) - z[:, 3])
    assert parts["sem_cls"] == pytest.approx(ce, abs=1e-12)
    bce = np.mean(np.log1p(np.exp(out["iou_logit"])))
    assert parts["iou"] == pytest.approx(bce, abs=1e-9)
    assert abs(total - sum(parts.values())) <= 1e-12


def test_rcnn_background_below_fg_iou():
    gt = np.array([[0, 0, 0.5, 1, 1, 1, 0.0]])
    far = gt + [0.9, 0, 0, 0, 0, 0, 0]
    _, _, grads, info = refiner.rcnn_loss(far, _out(1), gt, [1], SMALL)
    assert not info["fg"][0] and not grads["residuals"].any()


def test_fusion_score():
    logits = np.log(np.array([[0.6, 0.1, 0.1, 0.2], [0.05, 0.05, 0.1, 0.8]]))
    cls, score = refiner.fusion_score(logits, np.array([0.5, 1.0]), 3)
    assert cls.tolist() == [0, 2]
    np.testing.assert_allclose(score, [0.3, 0.1], atol=1e-12)
