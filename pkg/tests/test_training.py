"""Losses, the grouped Adam optimizer, and the train loop contract."""

import math

import numpy as np
import pytest

from ran.model import AnovaModel, build_anova_model
from ran.rng import stream
from ran.training import (AdamState, Dataset, TrainConfig, adam_step,
                          evaluate, group_lasso_penalty, loss_and_grad, train)

FD_STEP = 1e-6


def _dataset(d, n, fn, seed=0, offset=0.0):
    rng = stream(seed, "testdata")
    X = rng.uniform(-1.0, 1.0, size=(n, d))
    Y = fn(X) + offset
    return Dataset(X, Y)


# ---------------------------------------------------------------------------
# losses


def test_softmax_ce_uniform_logits_is_log_nclasses():
    model = build_anova_model(1, C=10, seed=0)
    model.head_w[:] = 0.0
    model.head_b[:] = 0.0
    X = stream(1, "x").uniform(-1, 1, size=(40, 1))
    labels = stream(2, "y").integers(0, 10, size=40)
    loss, grads, _ = loss_and_grad(model, X, labels, "softmax_ce")
    assert loss == pytest.approx(math.log(10.0), rel=1e-12)
    assert evaluate(model, X, labels, "softmax_ce") == pytest.approx(
        math.log(10.0), rel=1e-12)
    # uniform probabilities: bias gradient per class is 0.1 - class frequency
    db = grads.group("head")[-10:]
    freq = np.bincount(labels, minlength=10) / 40.0
    assert np.allclose(db, 0.1 - freq, rtol=0, atol=1e-12)


def test_perfect_fit_has_zero_mse():
    model = build_anova_model(2, seed=3, topology=[(0, 1)])
    X = stream(4, "x").uniform(-1, 1, size=(30, 2))
    Y = model.forward_batch(X, with_params=False).logits
    loss, grads, _ = loss_and_grad(model, X, Y, "mse")
    assert loss == 0.0
    assert np.allclose(grads.flat, 0.0, atol=1e-18)
    assert evaluate(model, X, Y, "mse") == 0.0


def test_loss_values_match_between_grad_and_eval_paths():
    rng = stream(11, "draw")
    model = build_anova_model(2, C=3, seed=7, topology=[(0, 1)])
    X = rng.uniform(-1, 1, size=(25, 2))
    Yr = rng.normal(size=(25, 3))
    labels = rng.integers(0, 3, size=25)
    for kind, Y in (("mse", Yr), ("mae", Yr), ("softmax_ce", labels)):
        loss, _, _ = loss_and_grad(model, X, Y, kind)
        assert evaluate(model, X, Y, kind) == pytest.approx(loss, rel=1e-12)


def test_softmax_ce_label_out_of_range():
    model = build_anova_model(1, C=3, seed=0)
    X = np.zeros((4, 1))
    with pytest.raises(ValueError, match=r"label out of range \[0, 3\)"):
        loss_and_grad(model, X, np.array([0, 1, 2, 3]), "softmax_ce")
    with pytest.raises(ValueError, match="label out of range"):
        loss_and_grad(model, X, np.array([-1, 0, 0, 0]), "softmax_ce")


def test_softmax_ce_rejects_float_labels():
    model = build_anova_model(1, C=3, seed=0)
    X = np.zeros((4, 1))
    with pytest.raises(ValueError, match="integer labels"):
        loss_and_grad(model, X, np.zeros(4), "softmax_ce")


def test_unknown_loss_kind_rejected():
    model = build_anova_model(1, seed=0)
    X = np.zeros((2, 1))
    with pytest.raises(ValueError, match="unknown loss"):
        loss_and_grad(model, X, np.zeros(2), "huber")
    with pytest.raises(ValueError, match="unknown loss"):
        evaluate(model, X, np.zeros(2), "huber")


def _fd_loss(model, X, Y, kind, i, h=FD_STEP):
    theta = model.get_flat()
    lo = theta.copy()
    hi = theta.copy()
    hi[i] += h
    lo[i] -= h
    model.set_flat(hi)
    lp, _, _ = loss_and_grad(model, X, Y, kind)
    model.set_flat(lo)
    lm, _, _ = loss_and_grad(model, X, Y, kind)
    model.set_flat(theta)
    return (lp - lm) / (2 * h)


@pytest.mark.parametrize("kind", ["mse", "mae", "softmax_ce"])
def test_loss_gradients_match_finite_differences(kind):
    rng = stream(101, "fd-" + kind)
    for draw in range(20):
        d = int(rng.integers(1, 4))
        pairs = [(0, 1)] if d >= 2 and rng.random() < 0.7 else []
        C = 3 if kind == "softmax_ce" else int(rng.integers(1, 3))
        model = build_anova_model(d, C=C, topology=pairs or None,
                                  seed=int(rng.integers(0, 10_000)))
        theta = model.get_flat()
        theta += rng.normal(0, 0.2, size=theta.shape)
        model.set_flat(theta)
        X = rng.uniform(-1, 1, size=(16, d))
        if kind == "softmax_ce":
            Y = rng.integers(0, C, size=16)
        else:
            # keep every residual away from zero so mae stays smooth
            base = model.forward_batch(X, with_params=False).logits
            Y = base + rng.uniform(0.05, 1.0, size=base.shape) \
                * np.where(rng.random(base.shape) < 0.5, -1.0, 1.0)
        _, grads, _ = loss_and_grad(model, X, Y, kind)
        for i in rng.choice(theta.size, size=8, replace=False):
            fd = _fd_loss(model, X, Y, kind, int(i))
            err = abs(grads.flat[i] - fd)
            assert err <= 1e-8 + 2e-5 * abs(fd), (
                f"{kind} draw {draw} coord {i}: {grads.flat[i]} vs {fd}")


# ---------------------------------------------------------------------------
# group lasso


def _pair_model(num_val=0.0, den_val=0.0):
    model = build_anova_model(2, topology=[(0, 1)], seed=0)
    u = model.pair_units[0]
    u.num_coeffs[:] = 0.0
    u.den_coeffs[:] = 0.0
    u.num_coeffs[0] = num_val
    u.den_coeffs[0] = den_val
    return model


def test_group_lasso_three_four_five():
    model = _pair_model(3.0, 4.0)
    pen, sub = group_lasso_penalty(model, 2.0)
    assert pen == pytest.approx(2.0 * 5.0, rel=1e-15)
    sl = dict(model.layout.unit_slices)["pair_0_1"]
    seg = sub[sl.start:sl.stop]
    # direction theta/||theta|| scaled by lambda; gate entry stays zero
    assert seg[0] == pytest.approx(2.0 * 3.0 / 5.0, rel=1e-15)
    assert seg[6] == pytest.approx(2.0 * 4.0 / 5.0, rel=1e-15)
    assert seg[-1] == 0.0
    outside = np.ones(len(sub), dtype=bool)
    outside[sl.start:sl.stop] = False
    assert not sub[outside].any()


def test_group_lasso_zero_lambda_and_zero_origin():
    model = _pair_model(3.0, 4.0)
    pen, sub = group_lasso_penalty(model, 0.0)
    assert pen == 0.0
    assert not sub.any()
    model = _pair_model(0.0, 0.0)
    pen, sub = group_lasso_penalty(model, 5.0)
    assert pen == 0.0
    assert not sub.any()


def test_group_lasso_negative_lambda_rejected():
    with pytest.raises(ValueError, match=">= 0"):
        group_lasso_penalty(_pair_model(), -1.0)


def test_group_lasso_ignores_main_units():
    model = build_anova_model(3, seed=1)  # no pairs at all
    for u in model.main_units:
        u.num_coeffs[:] = 7.0
    pen, sub = group_lasso_penalty(model, 1.0)
    assert pen == 0.0
    assert not sub.any()


def test_group_lasso_shrinks_pair_units_monotonically():
    def target(X):
        return np.sin(2.0 * X[:, 0]) + 0.3 * X[:, 1]

    ds = _dataset(2, 256, target, seed=21)
    norms = []
    for lam in (0.0, 0.03, 0.3):
        model = build_anova_model(2, topology=[(0, 1)], seed=9)
        cfg = TrainConfig(loss="mse", lr_main=1e-2, group_lasso_lambda=lam,
                          epochs=400, seed=0, val_fraction=0.0,
                          weight_decay_den=0.0)
        train(model, ds, cfg)
        u = model.pair_units[0]
        norms.append(float(np.linalg.norm(
            np.concatenate([u.num_coeffs, u.den_coeffs]))))
    assert norms[1] <= norms[0] * 1.05 + 1e-9
    assert norms[2] <= norms[1] * 1.05 + 1e-9
    assert norms[2] < norms[0] * 0.5


# ---------------------------------------------------------------------------
# Adam


def test_first_adam_step_moves_by_learning_rate():
    model = build_anova_model(2, topology=[(0, 1)], seed=2)
    layout = model.layout
    state = AdamState.fresh(layout.n_params)
    cfg = TrainConfig(lr_main=1e-2, lr_den_gate_scale=0.1,
                      weight_decay_den=0.0)
    before = model.get_flat()
    grad = np.ones(layout.n_params)
    assert adam_step(model, state, grad, cfg)
    delta = model.get_flat() - before
    slow = np.concatenate([layout.groups["denominators"],
                           layout.groups["gates"]]).astype(int)
    fast = np.setdiff1d(np.arange(layout.n_params), slow)
    # first step: m_hat = v_hat = g, so the move is lr * g/(|g| + eps)
    assert np.allclose(np.abs(delta[fast]), 1e-2, rtol=1e-6)
    assert np.allclose(np.abs(delta[slow]), 1e-3, rtol=1e-6)
    assert np.all(delta < 0)
    assert state.t == 1


def test_weight_decay_shrinks_denominators_only():
    model = build_anova_model(2, topology=[(0, 1)], seed=4)
    layout = model.layout
    before = model.get_flat()
    den = layout.groups["denominators"].astype(int)
    rest = np.setdiff1d(np.arange(layout.n_params), den)
    cfg = TrainConfig(lr_main=1e-2, lr_den_gate_scale=1.0,
                      weight_decay_den=0.1)
    state = AdamState.fresh(layout.n_params)
    assert adam_step(model, state, np.zeros(layout.n_params), cfg)
    after = model.get_flat()
    assert np.array_equal(after[rest], before[rest])
    assert np.allclose(after[den], before[den] * (1.0 - 1e-2 * 0.1),
                       rtol=1e-15)


def test_adam_skips_nonfinite_gradient():
    model = build_anova_model(1, seed=6)
    state = AdamState.fresh(model.layout.n_params)
    before = model.get_flat()
    grad = np.ones(model.layout.n_params)
    grad[0] = np.nan
    assert adam_step(model, state, grad, model_cfg := TrainConfig()) is False
    assert np.array_equal(model.get_flat(), before)
    assert state.t == 0
    grad[0] = np.inf
    assert adam_step(model, state, grad, model_cfg) is False
    assert state.t == 0


# ---------------------------------------------------------------------------
# config and dataset validation


def test_config_rejects_bad_fields():
    with pytest.raises(ValueError, match="epochs must be >= 1"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="unknown loss"):
        TrainConfig(loss="hinge")
    with pytest.raises(ValueError, match="lr_main"):
        TrainConfig(lr_main=0.0)
    with pytest.raises(ValueError, match=r"lr_den_gate_scale"):
        TrainConfig(lr_den_gate_scale=0.0)
    with pytest.raises(ValueError, match="lr_den_gate_scale"):
        TrainConfig(lr_den_gate_scale=1.5)
    with pytest.raises(ValueError, match="weight_decay_den"):
        TrainConfig(weight_decay_den=-1e-9)
    with pytest.raises(ValueError, match="group_lasso_lambda"):
        TrainConfig(group_lasso_lambda=-0.1)
    with pytest.raises(ValueError, match="val_fraction"):
        TrainConfig(val_fraction=1.0)


def test_dataset_validation_and_box_default():
    X = np.array([[0.0, -2.0], [1.0, 3.0], [0.5, 0.0]])
    ds = Dataset(X, np.zeros(3))
    assert ds.n == 3 and ds.d == 2
    assert np.array_equal(ds.box, [[0.0, 1.0], [-2.0, 3.0]])
    with pytest.raises(ValueError, match=r"\(N, d\)"):
        Dataset(np.zeros(4), np.zeros(4))
    with pytest.raises(ValueError, match="length mismatch"):
        Dataset(np.zeros((4, 1)), np.zeros(3))
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite inputs"):
        Dataset(bad, np.zeros(3))
    with pytest.raises(ValueError, match="non-finite targets"):
        Dataset(X, np.array([0.0, np.inf, 0.0]))


def test_dataset_keeps_supplied_box():
    ds = Dataset(np.zeros((2, 1)), np.zeros(2), box=[(-5.0, 5.0)])
    assert np.array_equal(ds.box, [[-5.0, 5.0]])


# ---------------------------------------------------------------------------
# train loop


def test_training_is_bit_reproducible_for_a_fixed_seed():
    ds = _dataset(2, 64, lambda X: X[:, 0] * X[:, 1], seed=31)
    cfg = TrainConfig(loss="mse", lr_main=1e-2, epochs=50, batch_size=16,
                      group_lasso_lambda=0.01, seed=12, val_fraction=0.25)
    runs = []
    for _ in range(2):
        model = build_anova_model(2, topology=[(0, 1)], seed=5)
        report = train(model, ds, cfg)
        runs.append((model.get_flat(), report))
    a, b = runs
    assert np.array_equal(a[0], b[0])
    assert a[1].train_losses == b[1].train_losses
    assert a[1].val_losses == b[1].val_losses
    assert a[1].grad_norms == b[1].grad_norms
    assert a[1].best_epoch == b[1].best_epoch


def test_shuffle_seed_changes_the_trajectory():
    ds = _dataset(2, 64, lambda X: X[:, 0] * X[:, 1], seed=31)
    outs = []
    for seed in (0, 1):
        model = build_anova_model(2, topology=[(0, 1)], seed=5)
        cfg = TrainConfig(loss="mse", epochs=20, batch_size=16, seed=seed)
        report = train(model, ds, cfg)
        outs.append(report.train_losses)
    assert outs[0] != outs[1]


def test_training_reduces_loss_and_checkpoints_best_epoch():
    ds = _dataset(1, 128, lambda X: 2.0 * X[:, 0] + 0.3, seed=41)
    model = build_anova_model(1, degree_num=2, degree_den=1, seed=8)
    cfg = TrainConfig(loss="mse", lr_main=2e-2, epochs=300, seed=3,
                      val_fraction=0.25)
    report = train(model, ds, cfg)
    assert not report.diverged
    assert report.train_losses[-1] < report.train_losses[0] * 1e-2
    assert report.best_epoch == int(np.argmin(report.val_losses))
    assert report.final_val_loss == pytest.approx(min(report.val_losses),
                                                  rel=1e-12)
    # the restored parameters really do reproduce the reported loss
    n = ds.n
    idx = stream(cfg.seed, "val_split").permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val_idx = idx[:n_val]
    got = evaluate(model, ds.inputs[val_idx], ds.targets[val_idx], "mse")
    assert got == pytest.approx(report.final_val_loss, rel=1e-12)
    assert len(report.train_losses) == cfg.epochs
    assert len(report.val_losses) == cfg.epochs
    assert report.wall_clock_s > 0


def test_divergence_is_flagged_and_initial_params_restored():
    X = stream(51, "x").uniform(-1, 1, size=(32, 1))
    ds = Dataset(X, np.full(32, 1e200))
    model = build_anova_model(1, seed=9)
    before = model.get_flat()
    cfg = TrainConfig(loss="mse", epochs=5, seed=0, val_fraction=0.0)
    with np.errstate(over="ignore"):
        report = train(model, ds, cfg)
    assert report.diverged
    assert np.isnan(report.final_val_loss)
    assert np.array_equal(model.get_flat(), before)
    assert len(report.train_losses) < cfg.epochs


def test_denominator_floor_tripwire():
    ds = _dataset(1, 16, lambda X: X[:, 0], seed=61)
    model = build_anova_model(1, seed=0)
    orig = model.forward_batch

    def doctored(X, with_params=True):
        cache = orig(X, with_params=with_params)
        cache.min_den = 0.5
        return cache

    model.forward_batch = doctored
    with pytest.raises(AssertionError, match="structural floor"):
        train(model, ds, TrainConfig(epochs=1, val_fraction=0.0))


def test_empty_training_split_rejected():
    ds = Dataset(np.zeros((2, 1)), np.zeros(2))
    model = build_anova_model(1, seed=0)
    with pytest.raises(ValueError, match="empty training split"):
        train(model, ds, TrainConfig(epochs=1, val_fraction=0.9))


def test_zero_val_fraction_tracks_train_loss():
    ds = _dataset(1, 32, lambda X: X[:, 0], seed=71)
    model = build_anova_model(1, seed=1)
    report = train(model, ds, TrainConfig(epochs=10, val_fraction=0.0))
    assert report.val_losses == report.train_losses
