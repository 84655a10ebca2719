import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from limtr.data import AgentTrack
from limtr.dataset import build_dataset
from limtr.head import (LOG_2PI, HistoryEncoder, TrajectoryHead, TrajectorySet, decode_trajectories,
                        gmm_nll, history_features, kmeans, kmeans_intentions, mode_cross_entropy,
                        select_positive, total_loss, velocity_l1)
from limtr.model import LidarMotionModel, ModelConfig
from limtr.nn import grad_check
from limtr.sim import CueSpec, gen_scenario

F64 = np.float64


def unit_pred(b=1, k=2, s=3, mean=0.0, std=1.0, rho=0.0, vel=0.0):
    traj = np.zeros((b, k, s, 7))
    traj[..., 0:2] = mean
    traj[..., 2:4] = std
    traj[..., 4] = rho
    traj[..., 5:7] = vel
    return TrajectorySet(np.zeros((b, k)), traj)


def stationary_track(valid=None):
    valid = np.ones(11, bool) if valid is None else valid
    return AgentTrack(0, "vehicle", np.zeros((11, 3)), np.zeros((11, 2)), np.zeros(11),
                      np.tile([4.5, 2.0, 1.6], (11, 1)), valid, np.zeros((80, 2)), np.zeros((80, 2)),
                      np.ones(80, bool))


# --- history encoder --------------------------------------------------------------------

def test_history_features_stationary():
    feats, valid = history_features(stationary_track())
    assert feats.shape == (11, 11) and valid.all()
    np.testing.assert_array_equal(feats[:, 2], 1.0)
    np.testing.assert_array_equal(feats[:, :2], 0.0)


def test_history_encoder_invalid_steps_are_ignored():
    rng = np.random.default_rng(0)
    enc = HistoryEncoder((8, 8), rng, F64)
    feats = rng.normal(size=(3, 11, 11))
    valid = rng.uniform(size=(3, 11)) < 0.6
    valid[:, -1] = True
    feats[~valid] = 0.0
    ref = enc.forward(feats, valid)
    perm = feats.copy()
    for i in range(3):
        bad = np.flatnonzero(~valid[i])
        perm[i, bad] = rng.normal(size=(len(bad), 11))
        perm[i, bad] = perm[i, bad[::-1]]
    np.testing.assert_array_equal(enc.forward(perm, valid), ref)
    with pytest.raises(ValueError):
        enc.forward(feats, np.zeros((3, 11), bool))


def test_history_encoder_grad_check():
    rng = np.random.default_rng(1)
    enc = HistoryEncoder((6, 5), rng, F64)
    feats = rng.normal(size=(4, 11, 11))
    valid = rng.uniform(size=(4, 11)) < 0.8
    valid[:, -1] = True
    c = rng.normal(size=(4, 5))
    loss = lambda: float((enc.forward(feats, valid) * c).sum())
    loss()
    enc.zero_grad()
    gx = enc.backward(c)
    arrays, analytic = {"feats": feats}, {"feats": gx * valid[..., None]}
    for name, p, g in enc.named_parameters():
        arrays[name], analytic[name] = p, g
    # invalid steps do not affect the output, so their input gradient is zero in both routes
    rep = grad_check(loss, arrays, analytic, tolerance=1e-4)
    assert rep.passed, rep.errors


# --- k-means ----------------------------------------------------------------------------

def test_kmeans_zero_radius_clusters():
    pts = np.array([[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0]])
    cent, labels, _ = kmeans(pts, 3, seed=0)
    assert sorted(map(tuple, cent)) == sorted(map(tuple, pts))


def test_kmeans_two_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(50, 2)) * 0.3 + [10, 0]
    b = rng.normal(size=(60, 2)) * 0.3 + [-10, 5]
    cent, _, _ = kmeans(np.vstack([a, b]), 2, seed=3)
    cent = cent[np.argsort(-cent[:, 0])]
    np.testing.assert_allclose(cent[0], a.mean(0), atol=1e-6)
    np.testing.assert_allclose(cent[1], b.mean(0), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_kmeans_inertia_non_increasing(seed, k):
    pts = np.random.default_rng(seed).normal(size=(40, 2)) * 5
    c1, l1, inertia = kmeans(pts, k, seed)
    assert all(b <= a + 1e-9 for a, b in zip(inertia, inertia[1:]))
    c2, l2, _ = kmeans(pts, k, seed)
    np.testing.assert_array_equal(c1, c2)


def test_kmeans_intentions_errors_and_shape():
    rng = np.random.default_rng(3)
    out = kmeans_intentions({"vehicle": rng.normal(size=(20, 2))}, 6)
    assert out["vehicle"].shape == (6, 2)
    with pytest.raises(ValueError):
        kmeans_intentions({"cyclist": rng.normal(size=(5, 2))}, 6)


# --- head ----------------------------------------------------------------------------------

def make_head(seed=0, lidar_dim=4, steps=5):
    return TrajectoryHead(6, lidar_dim, (8,), 3, steps, 0.1, np.random.default_rng(seed), F64)


def test_head_probabilities_and_squashing():
    head = make_head()
    rng = np.random.default_rng(1)
    pred = head.forward(rng.normal(size=(4, 6)), rng.normal(size=(4, 4)), rng.normal(size=(4, 3, 2)))
    np.testing.assert_allclose(pred.probs.sum(-1), 1.0, atol=1e-6)
    head.out.weight[...] = 0
    for big in (1e6, -1e6):
        head.out.bias[...] = big
        pred = head.forward(rng.normal(size=(2, 6)), None, rng.normal(size=(2, 3, 2)))
        assert np.all(pred.traj[..., 2:4] > 0) and np.all(np.abs(pred.traj[..., 4]) < 1)
        assert np.all(np.isfinite(pred.traj))


def test_head_absent_lidar_differs_from_zero_only_with_trained_embedding():
    head = make_head()
    rng = np.random.default_rng(2)
    hist, anchors = rng.normal(size=(2, 6)), rng.normal(size=(2, 3, 2))
    zero = head.forward(hist, np.zeros((2, 4)), anchors).traj
    np.testing.assert_array_equal(head.forward(hist, None, anchors).traj, zero)
    head.no_lidar[...] = 0.5
    assert not np.array_equal(head.forward(hist, None, anchors).traj, zero)


def test_decode_unknown_class():
    head = make_head()
    with pytest.raises(ValueError):
        decode_trajectories(np.zeros((1, 6)), None, {"vehicle": np.zeros((3, 2))}, ["cyclist"], head)


# --- losses -----------------------------------------------------------------------------------

def test_gmm_nll_closed_forms():
    pred = unit_pred()
    gt = np.zeros((1, 3, 2))
    valid = np.ones((1, 3), bool)
    assert abs(gmm_nll(pred, gt, valid, 0)[0] - LOG_2PI) < 1e-9
    doubled = unit_pred(std=2.0)
    assert abs(gmm_nll(doubled, gt, valid, 0)[0] - gmm_nll(pred, gt, valid, 0)[0] - math.log(4)) < 1e-9
    with pytest.raises(ValueError):
        gmm_nll(pred, gt, np.zeros((1, 3), bool), 0)


def random_pred(rng, b=3, k=2, s=4):
    traj = rng.normal(size=(b, k, s, 7))
    traj[..., 2:4] = rng.uniform(0.5, 2.0, size=(b, k, s, 2))
    traj[..., 4] = rng.uniform(-0.8, 0.8, size=(b, k, s))
    return TrajectorySet(rng.normal(size=(b, k)), traj)


def test_gmm_nll_gradient():
    rng = np.random.default_rng(4)
    pred = random_pred(rng)
    gt = rng.normal(size=(3, 4, 2))
    valid = rng.uniform(size=(3, 4)) < 0.7
    valid[:, 0] = True
    pos = np.array([0, 1, 1])
    _, g = gmm_nll(pred, gt, valid, pos, return_grad=True)
    rep = grad_check(lambda: float(gmm_nll(pred, gt, valid, pos).sum()), {"traj": pred.traj}, {"traj": g})
    assert rep.max_rel_error < 1e-5


@settings(max_examples=50)
@given(st.floats(1e-3, 50), st.floats(1e-3, 50), st.floats(-0.99, 0.99), st.floats(-1e3, 1e3))
def test_gmm_nll_finite_and_covariance_positive_definite(sx, sy, rho, gx):
    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    pred = unit_pred(k=1, s=1)
    pred.traj[..., 2], pred.traj[..., 3], pred.traj[..., 4] = sx, sy, rho
    assert np.isfinite(gmm_nll(pred, np.full((1, 1, 2), gx), np.ones((1, 1), bool), 0)).all()


def test_velocity_l1_examples():
    pred = unit_pred(vel=0.0)
    valid = np.ones((1, 3), bool)
    assert velocity_l1(pred, np.zeros((1, 3, 2)), valid, 0)[0] == 0.0
    off = np.zeros((1, 3, 2))
    off[..., 0] = 1.0
    assert velocity_l1(pred, off, valid, 0)[0] == 0.5
    assert velocity_l1(pred, -off, valid, 0)[0] == 0.5


def test_mode_cross_entropy_examples():
    certain = TrajectorySet(np.array([[0.0, -1e4]]), np.zeros((1, 2, 1, 7)))
    assert mode_cross_entropy(certain, 0)[0] == 0.0
    uniform = TrajectorySet(np.zeros((1, 6)), np.zeros((1, 6, 1, 7)))
    assert abs(mode_cross_entropy(uniform, 2)[0] - math.log(6)) < 1e-12
    _, g = mode_cross_entropy(uniform, 2, return_grad=True)
    assert g[0, 2] == pytest.approx(1 / 6 - 1) and g[0, 2] < 0


def test_select_positive_and_total_loss():
    anchors = np.array([[[0, 0], [1, 0], [2, 0], [3, 3], [4, 0], [5, 0]]], float)
    gt = np.zeros((1, 4, 2))
    gt[0, -1] = [3, 3]
    valid = np.ones((1, 4), bool)
    assert select_positive(gt, valid, anchors)[0] == 3
    assert select_positive(gt, valid, anchors + 0.0)[0] == 3

    pred = random_pred(np.random.default_rng(5), b=1, k=6, s=4)
    loss, pos, _, _, parts = total_loss(pred, gt, np.zeros((1, 4, 2)), valid, anchors)
    hand = (gmm_nll(pred, gt, valid, pos)[0] + 0.5 * velocity_l1(pred, np.zeros((1, 4, 2)), valid, pos)[0]
            + mode_cross_entropy(pred, pos)[0])
    assert abs(loss - hand) < 1e-12
    assert set(parts) == {"nll", "vel", "ce"}
    with pytest.raises(ValueError):
        total_loss(pred, gt, np.zeros((1, 4, 2)), valid, anchors, (1, 0, 1))


def test_total_loss_zero_components():
    pred = TrajectorySet(np.array([[0.0, -1e4]]), np.zeros((1, 2, 1, 7)))
    pred.traj[..., 2:4] = 1.0
    gt = np.zeros((1, 1, 2))
    loss, _, _, _, parts = total_loss(pred, gt, gt, np.ones((1, 1), bool), np.zeros((1, 2, 2)), (1e-12, 1, 1))
    assert parts["vel"] == 0.0 and parts["ce"] == 0.0


def test_head_end_to_end_gradient():
    head = make_head(seed=6, steps=4)
    rng = np.random.default_rng(7)
    hist, lidar = rng.normal(size=(3, 6)), rng.normal(size=(3, 4))
    anchors = rng.normal(size=(3, 3, 2)) * 3
    gt = rng.normal(size=(3, 4, 2)) * 2
    gvel = rng.normal(size=(3, 4, 2))
    valid = np.ones((3, 4), bool)

    def loss():
        return total_loss(head.forward(hist, lidar, anchors), gt, gvel, valid, anchors)[0]

    pred = head.forward(hist, lidar, anchors)
    _, _, gl, gt_traj, _ = total_loss(pred, gt, gvel, valid, anchors)
    head.zero_grad()
    g_hist, g_lidar = head.backward(gl, gt_traj)
    arrays = {"hist": hist, "lidar": lidar}
    analytic = {"hist": g_hist, "lidar": g_lidar}
    for name, p, g in head.named_parameters():
        arrays[name], analytic[name] = p, g
    rep = grad_check(loss, arrays, analytic, tolerance=1e-4)
    assert rep.passed, rep.errors


# --- model wiring --------------------------------------------------------------------------------

def test_zeroed_lidar_matches_baseline_at_init():
    scenarios = [gen_scenario(i, 4, CueSpec(1.0)) for i in range(3)]
    cfg = ModelConfig.toy(n_points=16, width_anchors=(4, 6, 8), history_widths=(8,), head_widths=(8,), n_steps=80)
    data = build_dataset(scenarios, cfg.features, cfg.frames, cfg.n_points)
    with_lidar = LidarMotionModel(cfg)
    baseline = LidarMotionModel(ModelConfig.from_dict({**cfg.to_dict(), "use_lidar": False}))
    for m in (with_lidar, baseline):
        m.intentions = {c: np.random.default_rng(0).normal(size=(6, 2)).astype(np.float32) * 5
                        for c in m.intentions}
    a = with_lidar.loss(data, with_lidar.forward(data, zero_lidar=True))[0]
    b = baseline.loss(data, baseline.forward(data))[0]
    assert a == b
