import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascade3d import proposer
from cascade3d.geom3d import ProposalSet
from oracles import brute_ball, brute_fps

SMALL = proposer.ProposerConfig(sa1_centers=64, sa2_centers=32, sa1_mlp=(8, 8, 16), sa2_mlp=(16, 16, 24),
                                vote_mlp=(16, 16), n_proposals=8, cluster_mlp=(16, 16), head_mlp=(16, 16))


@pytest.fixture(scope="module")
def net():
    return proposer.Proposer(SMALL, np.random.default_rng(0))


@pytest.fixture(scope="module")
def cloud():
    rng = np.random.default_rng(2)
    xyz = rng.uniform([-1, 1, 0], [1, 3, 1], size=(400, 3))
    feats = rng.random((400, 5))
    return xyz, feats


def test_fps_line_examples():
    pts = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], 1)
    assert proposer.fps(pts, 2).tolist() == [0, 9]
    assert proposer.fps(pts, 3).tolist() == [0, 9, 4]
    assert sorted(proposer.fps(pts, 10).tolist()) == list(range(10))
    with pytest.raises(ValueError):
        proposer.fps(pts, 11)


@given(st.integers(0, 10**6), st.integers(1, 12))
def test_fps_matches_oracle(seed, m):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 4, size=(25, 3)).astype(float)  # many ties
    start = int(rng.integers(25))
    assert proposer.fps(pts, m, start).tolist() == brute_fps(pts, m, start)


def test_ball_group_radius_limits(rng):
    pts = rng.normal(size=(50, 3))
    pts[7] = pts[3]
    idx, counts = proposer.ball_group(pts, pts[[3]], 0.0, 4)
    assert set(idx[0]) == {3, 7} and counts[0] == 2
    idx, counts = proposer.ball_group(pts, pts[:2], np.inf, 50)
    assert all(sorted(r) == list(range(50)) for r in idx.tolist())


def test_ball_group_matches_brute_force():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, size=(1000, 3))
    centers = pts[rng.choice(1000, 20, replace=False)] + 0.01
    idx, counts = proposer.ball_group(pts, centers, 0.12, 16)
    for c, row, n in zip(centers, idx, counts):
        expect = brute_ball(pts, c, 0.12, 16)
        assert min(n, 16) == len(expect)
        assert row[:len(expect)].tolist() == expect
        if expect:
            assert np.all(row[len(expect):] == expect[0])


def test_ball_group_empty_ball_falls_back_to_nearest():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    idx, counts = proposer.ball_group(pts, np.array([[0.9, 0, 0]]), 0.01, 3)
    assert counts[0] == 0 and idx[0].tolist() == [1, 1, 1]


def test_seeds_are_deterministic_and_translation_equivariant(net, cloud):
    xyz, feats = cloud
    p1, f1, _ = net.encode_seeds(xyz, feats)
    p2, f2, _ = net.encode_seeds(xyz, feats)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(f1, f2)
    shift = np.array([0.5, -2.0, 0.25])  # dyadic: translation is exact in float
    p3, f3, _ = net.encode_seeds(xyz + shift, feats)
    np.testing.assert_allclose(p3, p1 + shift, atol=1e-12)
    np.testing.assert_allclose(f3, f1, atol=1e-9)
    assert f1.shape == (32, net.d_seed)


def test_zero_initialised_votes_sit_on_seeds(net, cloud):
    xyz, feats = cloud
    seeds, sfeat, _ = net.encode_seeds(xyz, feats)
    votes, vfeat, _ = net.vote(seeds, sfeat)
    assert votes.shape == seeds.shape
    np.testing.assert_array_equal(votes, seeds)
    np.testing.assert_array_equal(vfeat, sfeat)


def test_proposal_outputs(net, cloud):
    xyz, feats = cloud
    out, _ = net.forward(xyz, feats)
    props = proposer.to_proposals(out)
    assert isinstance(props, ProposalSet) and len(props) == 8
    np.testing.assert_allclose(props.class_probs.sum(1), 1.0, atol=1e-12)
    assert np.all(props.boxes[:, 3:6] > 0)
    assert np.all((props.objectness >= 0) & (props.objectness <= 1))
    assert np.all((props.boxes[:, 6] >= -np.pi) & (props.boxes[:, 6] < np.pi))
    with pytest.raises(ValueError):
        net.forward(xyz, feats[:, :4])


def _fake_out(cc, votes=None, seeds=None, rng=None):
    rng = rng or np.random.default_rng(0)
    n = len(cc)
    seeds = cc.copy() if seeds is None else seeds
    return dict(cluster_xyz=cc, center=cc.copy(), size=np.ones((n, 3)), heading=np.zeros(n),
                obj_logit=rng.normal(size=n), cls_logits=rng.normal(size=(n, 3)), seed_xyz=seeds,
                vote_xyz=seeds.copy() if votes is None else votes)


def test_rpn_loss_without_gt():
    out = _fake_out(np.random.default_rng(1).normal(size=(6, 3)))
    total, parts, grads = proposer.rpn_loss(out, np.zeros((0, 7)), [], SMALL)
    assert parts["vote"] == parts["box"] == parts["sem_cls"] == 0.0
    expect = np.mean(np.log1p(np.exp(out["obj_logit"])))
    assert parts["objectness"] == pytest.approx(expect, abs=1e-12)
    assert total == pytest.approx(0.5 * expect, abs=1e-12)
    assert not grads["vote_xyz"].any()


def test_rpn_loss_perfect_boxes():
    gt = np.array([[0, 0, 0.5, 1.0, 0.8, 0.6, 0.3], [3, 0, 0.5, 0.5, 0.5, 0.5, -1.0]])
    cc = gt[:, :3].copy()
    out = _fake_out(cc)
    out["size"] = gt[:, 3:6].copy()
    out["heading"] = gt[:, 6] + np.array([0.0, np.pi])  # half-turn equivalent
    total, parts, _ = proposer.rpn_loss(out, gt, [0, 2], SMALL)
    assert parts["box"] == pytest.approx(0.0, abs=1e-24)
    assert parts["vote"] == 0.0  # seeds sit on the GT centres
    expect = parts["vote"] + 0.5 * parts["objectness"] + 1.0 * parts["box"] + 0.1 * parts["sem_cls"]
    assert abs(total - expect) <= 1e-12


def test_rpn_loss_assignment_bands():
    gt = np.array([[0, 0, 0.5, 1, 1, 1, 0.0]])
    cc = np.array([[0.1, 0, 0.5], [0.45, 0, 0.5], [2.0, 0, 0.5]])
    out = _fake_out(cc)
    _, _, grads = proposer.rpn_loss(out, gt, [1], SMALL)
    g = grads["obj_logit"]
    assert g[0] != 0 and g[1] == 0 and g[2] != 0  # near, ignored, far
    assert grads["center"][0].any() and not grads["center"][1:].any()


def test_vote_loss_uses_nearest_centre_of_containing_box():
    gt = np.array([[0, 0, 0.5, 2, 1, 2, 0.0], [0.8, 0, 0.5, 1, 1, 1, 0.0]])
    seeds = np.array([[0.6, 0, 0.5], [5, 5, 5]])
    votes = seeds + [[0.1, 0, 0], [1, 1, 1]]
    out = _fake_out(np.array([[9.0, 9, 9]]), votes=votes, seeds=seeds)
    _, parts, grads = proposer.rpn_loss(out, gt, [0, 1], SMALL)
    assert parts["vote"] == pytest.approx(0.1, abs=1e-12)  # vote at 0.7 vs centre 0.8
    assert not grads["vote_xyz"][1].any()
