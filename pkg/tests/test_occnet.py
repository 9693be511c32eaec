"""Numpy encoder-decoder: layer gradients, optimizer, training loop."""

import inspect
import math

import numpy as np
import pytest

from radargrid.grid import FREE, IGNORE, OCCUPIED, UNOBSERVED, GridSpec, LabelGrid, visibility_label
from radargrid.occnet import (
    OccNetModel,
    TrainConfig,
    TrainingDivergedError,
    concat_channels,
    concat_channels_backward,
    conv3x3_backward,
    conv3x3_forward,
    flip_lateral,
    forward,
    grad_check,
    infer,
    init_model,
    loss_and_grads,
    maxpool2x2_backward,
    maxpool2x2_forward,
    pad_to_multiple,
    relu_backward,
    relu_forward,
    sgd_step,
    softmax_channels,
    softmax_channels_backward,
    train,
    upsample2x_backward,
    upsample2x_forward,
)

EPS = 1e-4


def _numeric_grad(f, x, eps=EPS):
    """Central-difference gradient of scalar f with respect to array x."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def _assert_close(analytic, numeric, tol=1e-4):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < tol, f"max rel err {rel.max():.3e}"


# ---------------------------------------------------------------------------
# convolution


def test_conv_identity_kernel_passes_through():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 1, 5, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = conv3x3_forward(x, w, np.zeros(1))
    assert np.array_equal(y, x)


def test_conv_shift_kernel_moves_columns():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 4, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 2] = 1.0  # tap one column to the right
    y = conv3x3_forward(x, w, np.zeros(1))
    assert np.allclose(y[0, 0, :, :-1], x[0, 0, :, 1:])
    assert np.allclose(y[0, 0, :, -1], 0.0)  # zero padding enters at the edge


def test_conv_bias_only():
    x = np.zeros((1, 2, 3, 3))
    w = np.zeros((4, 2, 3, 3))
    y = conv3x3_forward(x, w, np.array([1.0, -2.0, 0.5, 0.0]))
    assert np.allclose(y[0, 1], -2.0)
    assert y.shape == (1, 4, 3, 3)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 4, 3))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    probe = rng.normal(size=(2, 3, 4, 3))

    def loss():
        return float(np.vdot(conv3x3_forward(x, w, b), probe))

    dx, dw, db = conv3x3_backward(x, w, probe)
    _assert_close(dx, _numeric_grad(loss, x))
    _assert_close(dw, _numeric_grad(loss, w))
    _assert_close(db, _numeric_grad(loss, b))


# ---------------------------------------------------------------------------
# relu / pooling / upsampling / concat


def test_relu_values_and_gradient_gate():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert relu_forward(x).tolist() == [[0.0, 0.0, 2.0]]
    dy = np.ones_like(x)
    assert relu_backward(x, dy).tolist() == [[0.0, 0.0, 1.0]]


def test_relu_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4)) + 0.1  # keep clear of the kink
    probe = rng.normal(size=x.shape)

    def loss():
        return float(np.vdot(relu_forward(x), probe))

    _assert_close(relu_backward(x, probe), _numeric_grad(loss, x))


def test_maxpool_forward_hand_values():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert maxpool2x2_forward(x)[0, 0, 0, 0] == 4.0
    x2 = np.arange(16.0).reshape(1, 1, 4, 4)
    y = maxpool2x2_forward(x2)
    assert y[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ValueError):
        maxpool2x2_forward(np.zeros((1, 1, 3, 4)))


def test_maxpool_backward_tie_routes_to_first_in_window():
    x = np.full((1, 1, 2, 2), 5.0)
    dx = maxpool2x2_backward(x, np.array([[[[1.0]]]]))
    assert dx[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    # strictly distinct entries: no argmax flips inside the FD stencil
    x = rng.permutation(48).astype(float).reshape(2, 1, 4, 6) * 0.1
    probe = rng.normal(size=(2, 1, 2, 3))

    def loss():
        return float(np.vdot(maxpool2x2_forward(x), probe))

    _assert_close(maxpool2x2_backward(x, probe), _numeric_grad(loss, x))


def test_upsample_forward_and_inverse_relation():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    up = upsample2x_forward(x)
    assert up.shape == (1, 1, 4, 4)
    assert up[0, 0, 0].tolist() == [1.0, 1.0, 2.0, 2.0]
    assert np.array_equal(maxpool2x2_forward(up), x)  # constant blocks


def test_upsample_backward_sums_blocks():
    dy = np.ones((1, 1, 4, 4))
    assert np.allclose(upsample2x_backward(dy), 4.0)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 3, 2))
    probe = rng.normal(size=(1, 2, 6, 4))

    def loss():
        return float(np.vdot(upsample2x_forward(x), probe))

    _assert_close(upsample2x_backward(probe), _numeric_grad(loss, x))


def test_concat_roundtrip():
    a = np.ones((1, 2, 3, 3))
    b = np.zeros((1, 3, 3, 3))
    y = concat_channels(a, b)
    assert y.shape == (1, 5, 3, 3)
    da, db = concat_channels_backward(np.arange(45.0).reshape(1, 5, 3, 3), 2)
    assert da.shape == (1, 2, 3, 3) and db.shape == (1, 3, 3, 3)


def test_softmax_rows_sum_to_one_and_is_stable():
    logits = np.array([[1000.0, 1000.0, 999.0]]).reshape(1, 3, 1, 1)
    p = softmax_channels(logits)
    assert np.isfinite(p).all()
    assert p.sum(axis=1) == pytest.approx(1.0)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(2, 3, 2, 2))
    probe = rng.normal(size=logits.shape)

    def loss():
        return float(np.vdot(softmax_channels(logits), probe))

    p = softmax_channels(logits)
    _assert_close(softmax_channels_backward(p, probe), _numeric_grad(loss, logits))


def test_pad_to_multiple_reflects():
    x = np.arange(30.0).reshape(5, 6)
    padded, ph, pw = pad_to_multiple(x, 4)
    assert padded.shape == (8, 8) and (ph, pw) == (3, 2)
    assert np.array_equal(padded[:5, :6], x)
    assert np.array_equal(padded[5, :6], x[3])  # reflection below the edge
    assert np.array_equal(padded[:5, 6], x[:, 4])
    same, ph0, pw0 = pad_to_multiple(x, 1)
    assert same is x and ph0 == 0 and pw0 == 0


# ---------------------------------------------------------------------------
# model assembly


def test_init_model_is_seeded_and_typed():
    a = init_model(1, (4, 8), seed=3)
    b = init_model(1, (4, 8), seed=3)
    c = init_model(1, (4, 8), seed=4)
    assert sorted(a.params) == sorted(b.params)
    for k in a.params:
        assert a.params[k].dtype == np.float32
        assert np.array_equal(a.params[k], b.params[k])
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)
    assert all(not a.params[k].any() for k in a.params if k.endswith("_b"))


def test_init_model_needs_two_stages():
    with pytest.raises(ValueError):
        init_model(1, (8,))


def test_forward_full_grid_shape_and_normalization():
    spec = GridSpec(215, 50, 0.4, 0.4, 0.0, -10.0)
    model = init_model(1, (4, 8), seed=0)
    rng = np.random.default_rng(0)
    grid = (rng.random(spec.shape) < 0.05).astype(np.uint8)
    pm = forward(model, grid, spec)
    assert pm.probs.shape == (215, 50, 3)
    assert np.abs(pm.probs.sum(axis=-1) - 1.0).max() < 1e-6
    pm2 = forward(model, grid, spec)
    assert np.array_equal(pm.probs, pm2.probs)


def test_infer_uniform_logits_tie_breaks_to_free():
    spec = GridSpec(8, 8, 1.0, 1.0)
    model = init_model(1, (4, 8), seed=0)
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])
    lab = infer(model, np.zeros(spec.shape), spec)
    assert (lab.cells == FREE).all()


def test_infer_never_outputs_ignore():
    spec = GridSpec(12, 8, 1.0, 1.0)
    model = init_model(1, (4, 8), seed=9)
    rng = np.random.default_rng(2)
    lab = infer(model, (rng.random(spec.shape) < 0.2).astype(float), spec)
    assert lab.cells.max() <= UNOBSERVED


def test_forward_signature_has_no_pose_inputs():
    # the learned model maps one input grid to labels; sensor identity or
    # mounting never enters inference
    names = set(inspect.signature(forward).parameters)
    assert names == {"model", "grid", "spec"}
    assert set(inspect.signature(infer).parameters) == {"model", "grid", "spec"}


def _symmetrized(model):
    for k, v in model.params.items():
        if k.endswith("_w"):
            model.params[k] = ((v + v[..., ::-1]) / 2.0).astype(v.dtype)
    return model


def test_mirror_symmetric_model_is_flip_equivariant():
    spec = GridSpec(16, 8, 1.0, 1.0, 0.0, -4.0)
    model = _symmetrized(init_model(1, (4, 8), seed=1))
    rng = np.random.default_rng(3)
    x = (rng.random(spec.shape) < 0.15).astype(np.float32)
    a = forward(model, flip_lateral(x).copy(), spec).probs
    b = forward(model, x, spec).probs[:, ::-1]
    assert np.allclose(a, b, atol=1e-6)


def test_flip_augmentation_preserves_loss_for_symmetric_model():
    spec = GridSpec(16, 8, 1.0, 1.0, 0.0, -4.0)
    model = _symmetrized(init_model(1, (4, 8), seed=1))
    rng = np.random.default_rng(4)
    x = (rng.random(spec.shape) < 0.15).astype(np.float32)
    y = rng.integers(0, 3, spec.shape).astype(np.uint8)
    l1, _ = loss_and_grads(model, x[None], y[None], "lovasz")
    l2, _ = loss_and_grads(
        model, flip_lateral(x).copy()[None], flip_lateral(y).copy()[None], "lovasz"
    )
    assert l1 == pytest.approx(l2, abs=1e-6)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_zero_gradient_is_noop():
    params = {"p": np.array([1.0, 2.0], dtype=np.float32)}
    before = params["p"].copy()
    sgd_step(params, {"p": np.zeros(2)}, {}, lr=0.1, momentum=0.9)
    assert np.array_equal(params["p"], before)


def test_sgd_momentum_zero_is_plain_step():
    params = {"p": np.array([1.0, 2.0])}
    sgd_step(params, {"p": np.array([0.5, -1.0])}, {}, lr=0.1, momentum=0.0)
    assert params["p"] == pytest.approx([0.95, 2.1], abs=1e-12)


def test_sgd_two_steps_accumulate_momentum():
    lr, m = 0.1, 0.9
    g = np.array([1.0])
    params = {"p": np.array([0.0])}
    vel = {}
    sgd_step(params, {"p": g}, vel, lr, m)
    sgd_step(params, {"p": g}, vel, lr, m)
    # displacement lr*g + lr*(1+m)*g = lr*g*(2+m)
    assert params["p"][0] == pytest.approx(-lr * (2 + m), abs=1e-12)
    assert vel["p"][0] == pytest.approx(1 + m, abs=1e-12)


# ---------------------------------------------------------------------------
# losses on batches / degenerate gradients


def test_zero_input_zero_weight_gradients_are_defined():
    spec = GridSpec(8, 8, 1.0, 1.0)
    model = init_model(1, (4, 8), seed=0)
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])
    x = np.zeros((1, 8, 8), dtype=np.float32)
    y = np.zeros((1, 8, 8), dtype=np.uint8)
    y[0, :4] = OCCUPIED
    for kind in ("lovasz", "wce"):
        loss, grads = loss_and_grads(model, x, y, kind)
        assert math.isfinite(loss)
        for name, g in grads.items():
            assert np.isfinite(g).all()
            if name.endswith("_w"):
                # every activation is zero, so weight gradients vanish
                assert not np.asarray(g).any(), name


def test_all_ignore_example_raises():
    model = init_model(1, (4, 8), seed=0)
    x = np.zeros((1, 8, 8), dtype=np.float32)
    y = np.full((1, 8, 8), IGNORE, dtype=np.uint8)
    with pytest.raises(TrainingDivergedError):
        loss_and_grads(model, x, y, "lovasz")


# ---------------------------------------------------------------------------
# training loop


def _toy_pairs(n, spec, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        mask = rng.random(spec.shape) < 0.08
        lab = visibility_label(spec, (0.5, 0.0), mask, math.pi, 50.0)
        pairs.append((mask.astype(np.uint8), lab))
    return pairs


def test_train_validates_inputs():
    spec = GridSpec(8, 8, 1.0, 1.0, 0.0, -4.0)
    pairs = _toy_pairs(2, spec, 0)
    with pytest.raises(ValueError):
        train([], pairs, spec)
    with pytest.raises(ValueError):
        train(pairs, [], spec)
    with pytest.raises(ValueError):
        train(pairs, pairs, spec, loss_kind="hinge")


def test_train_is_bit_deterministic():
    spec = GridSpec(8, 8, 1.0, 1.0, 0.0, -4.0)
    pairs = _toy_pairs(4, spec, 1)
    cfg = TrainConfig(epochs=2, batch_size=2, seed=5)
    m1, log1 = train(pairs[:3], pairs[3:], spec, cfg, widths=(4, 8))
    m2, log2 = train(pairs[:3], pairs[3:], spec, cfg, widths=(4, 8))
    assert log1 == log2
    assert sorted(m1.params) == sorted(m2.params)
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_plateau_schedule_decays_after_forced_stalls():
    spec = GridSpec(8, 8, 1.0, 1.0, 0.0, -4.0)
    pairs = _toy_pairs(3, spec, 2)
    # a delta no epoch can beat: every epoch counts as a plateau, so the
    # rate decays after epochs 2 and 4 (patience 2)
    cfg = TrainConfig(epochs=4, batch_size=2, seed=0, plateau_delta=10.0, plateau_patience=2)
    model, log = train(pairs[:2], pairs[2:], spec, cfg, widths=(4, 8))
    assert [e["lr"] for e in log] == [0.05, 0.05 * 0.9, 0.05 * 0.9, 0.05 * 0.9 * 0.9]
    assert log[-1]["lr"] == pytest.approx(0.0405, abs=1e-12)
    # nothing ever beat the baseline: the returned weights are the init
    init = init_model(1, (4, 8), seed=0)
    for k in init.params:
        assert np.array_equal(model.params[k], init.params[k])


def test_train_single_example_overfits():
    spec = GridSpec(16, 16, 1.0, 1.0, 0.0, -8.0)
    pairs = _toy_pairs(1, spec, 3)
    # patience longer than the run keeps the rate constant for a pure
    # memorization check; the plateau arithmetic has its own test above
    cfg = TrainConfig(epochs=100, batch_size=1, seed=0, flip_prob=0.0, plateau_patience=1000)
    _, log = train(pairs, pairs, spec, cfg, widths=(16, 32))
    losses = [e["train_loss"] for e in log]
    assert losses[-1] < losses[0]
    assert losses[-1] < 0.15
    assert log[-1]["val_miou"] >= log[0]["val_miou"]


def test_train_diverges_with_absurd_learning_rate():
    spec = GridSpec(8, 8, 1.0, 1.0, 0.0, -4.0)
    pairs = _toy_pairs(3, spec, 4)
    cfg = TrainConfig(lr0=1e12, epochs=3, batch_size=2, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError):
            train(pairs[:2], pairs[2:], spec, cfg, widths=(4, 8))


def test_train_log_schema():
    spec = GridSpec(8, 8, 1.0, 1.0, 0.0, -4.0)
    pairs = _toy_pairs(3, spec, 5)
    _, log = train(pairs[:2], pairs[2:], spec, TrainConfig(epochs=2, batch_size=2), widths=(4, 8))
    assert [e["epoch"] for e in log] == [0, 1]
    for e in log:
        assert set(e) == {"epoch", "train_loss", "val_miou", "lr"}
        assert 0.0 <= e["val_miou"] <= 1.0


# ---------------------------------------------------------------------------
# end-to-end gradient check


# A strictly positive continuous input keeps every preactivation away from
# the relu kink at a zero-bias init (a sparse binary input parks all-empty
# neighborhoods exactly on it, where finite differences see half-weight
# flow-through that the analytic gate correctly excludes).


def test_grad_check_small_net_lovasz():
    spec = GridSpec(8, 6, 1.0, 1.0, 0.0, -3.0)
    rng = np.random.default_rng(12)
    model = init_model(1, (4, 8), seed=12)
    grid = rng.random(spec.shape)
    cells = rng.integers(0, 3, spec.shape).astype(np.uint8)
    cells[0, 0] = IGNORE
    err = grad_check(model, grid, LabelGrid(spec, cells), "lovasz")
    assert err < 1e-4


def test_grad_check_small_net_wce():
    spec = GridSpec(8, 6, 1.0, 1.0, 0.0, -3.0)
    rng = np.random.default_rng(13)
    model = init_model(1, (4, 8), seed=13)
    grid = rng.random(spec.shape)
    cells = rng.integers(0, 3, spec.shape).astype(np.uint8)
    err = grad_check(model, grid, LabelGrid(spec, cells), "wce")
    assert err < 1e-5
