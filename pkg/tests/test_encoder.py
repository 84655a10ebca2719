import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from limtr.encoder import EncoderConfig, LidarEncoder, count_parameters, encoder_forward
from limtr.lidar import LidarTensor
from limtr.nn import DimensionError, StateError, grad_check, grouped_maxpool

F64 = np.float64
TOY = EncoderConfig(depth_per_block=2, width_anchors=(6, 8, 10), out_dim=5, n_frames=3, n_points=8, in_dim=7)


def random_batch(rng, b=2, cfg=TOY, p_valid=0.7):
    data = rng.normal(size=(b, cfg.n_frames, cfg.n_points, cfg.in_dim))
    mask = rng.uniform(size=data.shape[:3]) < p_valid
    mask[..., 0] = True
    data[~mask] = 0.0
    return data, mask


def warmed(cfg=TOY, seed=0):
    enc = LidarEncoder(cfg, np.random.default_rng(seed), F64)
    rng = np.random.default_rng(seed + 100)
    for _ in range(3):
        enc.forward(*random_batch(rng, 4, cfg))
    return enc.eval()


def test_output_shapes():
    enc = LidarEncoder(EncoderConfig(2, (16, 32, 64), 256, 11, 32, 7), np.random.default_rng(0))
    data, mask = random_batch(np.random.default_rng(1), 3, enc.config)
    assert enc.point_compress(data.astype(np.float32), mask).shape == (3, 11, 32)
    assert enc.forward(data.astype(np.float32), mask).shape == (3, 256)


def test_shape_mismatch():
    enc = LidarEncoder(TOY, dtype=F64)
    with pytest.raises(DimensionError):
        enc.forward(np.zeros((1, 4, 8, 7)), np.ones((1, 4, 8), bool))
    with pytest.raises(DimensionError):
        enc.forward(np.zeros((1, 3, 8, 7)), np.ones((1, 3, 9), bool))


def test_all_masked_is_finite_and_fixed():
    enc = warmed()
    lt = LidarTensor(np.zeros((3, 8, 7)), np.zeros((3, 8), bool), "vehicle")
    a = encoder_forward(lt, enc)
    b = encoder_forward(lt, enc)
    assert a.shape == (5,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_eval_is_deterministic():
    enc = warmed()
    x = np.random.default_rng(3).normal(size=(2, 3, 8))
    np.testing.assert_array_equal(enc.time_compress(x), enc.time_compress(x))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 5))
def test_permutation_and_padding_invariance(seed, extra):
    enc = warmed()
    rng = np.random.default_rng(seed)
    data, mask = random_batch(rng, 1)
    ref = enc.forward(data, mask)
    perm = np.stack([rng.permutation(TOY.n_points) for _ in range(TOY.n_frames)])
    pd = np.take_along_axis(data[0], perm[..., None], axis=1)[None]
    pm = np.take_along_axis(mask[0], perm, axis=1)[None]
    np.testing.assert_array_equal(enc.forward(pd, pm), ref)
    padded = np.concatenate([data, np.zeros((1, 3, extra, 7))], axis=2)
    pmask = np.concatenate([mask, np.zeros((1, 3, extra), bool)], axis=2)
    np.testing.assert_array_equal(enc.forward(padded, pmask), ref)


def test_critical_points_suffice():
    enc = warmed()
    rng = np.random.default_rng(4)
    data, mask = random_batch(rng, 1)
    ref = enc.forward(data, mask)
    # points that win some pool in either point stage
    keep = np.zeros_like(mask)
    h = enc.block_a.forward(data[0], mask[0])
    g1, arg1 = grouped_maxpool(h, mask[0])
    cat = np.concatenate([h, np.broadcast_to(g1[:, None], h.shape)], axis=-1)
    _, arg2 = grouped_maxpool(enc.block_b.forward(cat, mask[0]), mask[0])
    for t in range(3):
        keep[0, t, arg1[t][arg1[t] >= 0]] = True
        keep[0, t, arg2[t][arg2[t] >= 0]] = True
    np.testing.assert_array_equal(enc.forward(data, keep), ref)


def encoder_grad_check(enc, data, mask, step=1e-5):
    c = np.random.default_rng(9).normal(size=(data.shape[0], enc.config.out_dim))
    loss = lambda: float((enc.forward(data, mask) * c).sum())
    loss()
    enc.zero_grad()
    g_in = enc.backward(c)
    arrays, analytic = {"data": data}, {"data": g_in}
    for name, p, g in enc.named_parameters():
        arrays[name], analytic[name] = p, g
    return grad_check(loss, arrays, analytic, step=step, tolerance=1e-4), g_in


def test_end_to_end_grad_check_train_mode():
    enc = LidarEncoder(TOY, np.random.default_rng(0), F64)
    data, mask = random_batch(np.random.default_rng(1), 3)
    rep, g_in = encoder_grad_check(enc, data, mask)
    assert rep.passed, rep.errors
    assert not g_in[~mask].any()


@pytest.mark.parametrize("depth", [2, 4, 6, 8, 10, 12, 14])
def test_depth_sweep_constructs_runs_and_grad_checks(depth):
    cfg = EncoderConfig(depth, (3, 4, 5), 4, 2, 4, 7)
    enc = LidarEncoder(cfg, np.random.default_rng(depth), F64)
    data, mask = random_batch(np.random.default_rng(depth + 1), 4, cfg)
    assert enc.num_parameters() == count_parameters(cfg)
    assert enc.forward(data, mask).shape == (4, 4)
    # deep train-mode batch-norm stacks are strongly curved, so the step must be small
    rep, _ = encoder_grad_check(enc, data, mask, step=1e-7)
    assert rep.passed, rep.errors


def test_time_compress_grad_check():
    enc = LidarEncoder(TOY, np.random.default_rng(2), F64)
    x = np.random.default_rng(3).normal(size=(4, 3, 8))
    c = np.random.default_rng(4).normal(size=(4, 5))
    loss = lambda: float((enc.time_compress(x) * c).sum())
    loss()
    enc.zero_grad()
    gx = enc.time_compress_backward(c)
    rep = grad_check(loss, {"x": x}, {"x": gx}, tolerance=1e-4)
    assert rep.passed, rep.errors


def test_backward_contracts():
    enc = LidarEncoder(TOY, np.random.default_rng(0), F64)
    with pytest.raises(StateError):
        enc.backward(np.zeros((1, 5)))
    data, mask = random_batch(np.random.default_rng(1), 2)
    enc.forward(data, mask)
    enc.zero_grad()
    enc.backward(np.zeros((2, 5)))
    assert all(not g.any() for _, _, g in enc.named_parameters())


def test_parameter_counts():
    counts = [count_parameters(EncoderConfig(d)) for d in range(2, 15, 2)]
    assert counts == sorted(set(counts))
    assert 20e6 <= count_parameters(EncoderConfig(12)) <= 24e6
    small = EncoderConfig(2, (4, 6, 8), 3, 2, 5, 7)
    assert LidarEncoder(small).num_parameters() == count_parameters(small)
