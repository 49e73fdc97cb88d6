import math

import numpy as np
import pytest

from tripletgcn.graph import build_graph
from tripletgcn.metrics import auc, stratified_split
from tripletgcn.model import ModelDims, ModelParams, forward, init_params
from tripletgcn.preprocess import fit, transform
from tripletgcn.synth import SynthConfig, generate
from tripletgcn.train import (
    AdamState,
    TrainConfig,
    adam_step,
    backward,
    clip_gradients,
    finite_diff_grad,
    focal_loss,
    focal_loss_logits,
    predict_proba,
    train,
)

from conftest import gradient_errors, random_cohort


def scalar_focal(p, y, alpha, gamma):
    """Independent scalar oracle."""
    p_t = p if y == 1 else 1 - p
    a_t = alpha if y == 1 else 1 - alpha
    return -a_t * (1 - p_t) ** gamma * math.log(p_t)


# --------------------------------------------------------------------------
# focal loss


def test_focal_ce_reduction_example():
    assert focal_loss([0.5], [1], alpha=1.0, gamma=0.0, balanced=False) == pytest.approx(math.log(2), abs=1e-15)


def test_focal_scalar_example():
    assert focal_loss([0.9], [1], alpha=0.25, gamma=2.0) == pytest.approx(2.6341e-4, rel=1e-4)
    assert focal_loss([0.9], [1], 0.25, 2.0) == pytest.approx(scalar_focal(0.9, 1, 0.25, 2.0), rel=1e-14)


def test_focal_perfect_limit():
    assert focal_loss([1 - 1e-15], [1]) < 1e-30


def test_focal_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, 200)
    y = rng.integers(0, 2, 200)
    oracle = np.mean([scalar_focal(pi, yi, 0.25, 2.0) for pi, yi in zip(p, y)])
    assert focal_loss(p, y) == pytest.approx(oracle, rel=1e-13)


def test_focal_logits_agrees_with_probs():
    rng = np.random.default_rng(1)
    z = rng.normal(0, 3, 100)
    y = rng.integers(0, 2, 100)
    p = 1 / (1 + np.exp(-z))
    loss, _ = focal_loss_logits(z, y, 0.25, 2.0)
    assert loss == pytest.approx(focal_loss(p, y), rel=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
def test_focal_logit_derivative(gamma):
    rng = np.random.default_rng(2)
    z = rng.normal(0, 2, 20)
    y = rng.integers(0, 2, 20)
    _, dz = focal_loss_logits(z, y, 0.25, gamma)
    h = 1e-6
    for i in range(20):
        up, down = z.copy(), z.copy()
        up[i] += h
        down[i] -= h
        fd = (focal_loss_logits(up, y, 0.25, gamma)[0] - focal_loss_logits(down, y, 0.25, gamma)[0]) / (2 * h)
        assert dz[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_focal_saturation_gradient_bounded():
    # gamma = 0, alpha_t = 1, logits label-consistent and extreme
    _, dz = focal_loss_logits(np.array([800.0, -800.0]), np.array([1, 0]), 1.0, 0.0, balanced=False)
    assert np.abs(dz).max() <= 1e-12


def test_focal_rejects_mismatch():
    with pytest.raises(ValueError):
        focal_loss([0.5, 0.5], [1])


# --------------------------------------------------------------------------
# backward


@pytest.mark.parametrize("mode", ["eval", "train"])
@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_finite_differences(mode, seed):
    errors = gradient_errors(seed=seed, mode=mode)
    assert max(errors.values()) < 1e-4, errors


def test_backward_gamma_zero():
    assert max(gradient_errors(seed=3, gamma=0.0).values()) < 1e-4


def test_w1_gradient_vanishes_when_h1_is_zero():
    c = random_cohort(4, seed=0)
    p = transform(c, fit(c, range(4)))
    g = build_graph(p)
    params = init_params(ModelDims.for_cohort(p, d=4), 0)
    params["W0"] = np.zeros_like(params["W0"])
    tr = forward(g, p, params)
    assert not tr.H1.any()
    _, grads = backward(tr, g, p, params, c.labels, TrainConfig())
    assert not grads["W1"].any()


def test_backward_loss_indices_restrict_loss():
    c = random_cohort(6, seed=1)
    p = transform(c, fit(c, range(6)))
    g = build_graph(p)
    params = init_params(ModelDims.for_cohort(p, d=4), 0)
    tr = forward(g, p, params)
    cfg = TrainConfig()
    loss, _ = backward(tr, g, p, params, c.labels, cfg, [0, 5])
    assert loss == pytest.approx(focal_loss(tr.probs[[0, 5]], np.asarray(c.labels)[[0, 5]]), rel=1e-10)


# --------------------------------------------------------------------------
# finite differences


def _scalar_params(theta):
    dims = ModelDims(1, d=1, feat_embed=1)
    p = ModelParams(dims)
    p["Z"] = np.array([[theta]])
    return p


def test_finite_diff_quadratic():
    fd = finite_diff_grad(lambda p: 0.5 * float(p["Z"][0, 0]) ** 2, _scalar_params(3.0))
    assert fd["Z"][0, 0] == pytest.approx(3.0, abs=1e-9)


def test_finite_diff_second_order_convergence():
    f = lambda p: math.sin(float(p["Z"][0, 0])) ** 3  # noqa: E731
    theta = 0.7
    exact = 3 * math.sin(theta) ** 2 * math.cos(theta)
    e1 = abs(finite_diff_grad(f, _scalar_params(theta), h=1e-2)["Z"][0, 0] - exact)
    e2 = abs(finite_diff_grad(f, _scalar_params(theta), h=5e-3)["Z"][0, 0] - exact)
    assert e1 / e2 == pytest.approx(4.0, rel=0.05)


def test_finite_diff_rejects_nonpositive_h():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda p: 0.0, _scalar_params(1.0), h=0.0)


# --------------------------------------------------------------------------
# Adam


def test_adam_zero_gradients():
    p = init_params(ModelDims(2, d=3), 0)
    new, state = adam_step(p, p.zeros_like(), AdamState.zeros(p), 1e-3)
    for k in p:
        assert np.array_equal(new[k], p[k])
        assert not state.m[k].any() and not state.v[k].any()
    assert state.t == 1


def test_adam_first_step_is_lr():
    p = _scalar_params(0.0)
    g = p.zeros_like()
    g["Z"] = np.array([[1.0]])
    new, _ = adam_step(p, g, AdamState.zeros(p), 1e-3)
    assert new["Z"][0, 0] == pytest.approx(-1e-3, rel=1e-7)


def test_gradient_clipping():
    p = _scalar_params(0.0)
    g = p.zeros_like()
    g["Z"] = np.array([[6.0]])
    g["Psi.W"] = np.array([[8.0]])
    clipped = clip_gradients(g, 1.0)
    assert clipped["Z"][0, 0] == pytest.approx(0.6) and clipped["Psi.W"][0, 0] == pytest.approx(0.8)
    assert clip_gradients(g, 100.0) is g


# --------------------------------------------------------------------------
# training loop


def _small_problem(n=80, seed=0):
    c = generate(SynthConfig(n_patients=n, n_numeric=6, n_binary=2, n_categorical=1, seed=seed))
    tr, va = stratified_split(c.labels, 0.25, seed)
    return c, (tr, va)


def test_train_zero_epochs_returns_initial_params():
    c, split = _small_problem()
    params, _, hist = train(c, split, TrainConfig(epochs=0, hidden=8))
    init = init_params(params.dims, 0)
    assert len(hist) == 0
    for k in params:
        assert np.array_equal(params[k], init[k])


def test_train_is_deterministic():
    c, split = _small_problem()
    cfg = TrainConfig(epochs=15, hidden=8, deterministic=True)
    a = train(c, split, cfg)
    b = train(c, split, cfg)
    assert a[2].to_csv() == b[2].to_csv()
    for k in a[0]:
        assert np.array_equal(a[0][k], b[0][k])


def test_train_loss_decreases():
    c, split = _small_problem()
    _, _, hist = train(c, split, TrainConfig(epochs=40, hidden=16, dropout_rate=0.0, learning_rate=1e-2, early_stop_patience=None))
    assert hist.train_loss[-1] < hist.train_loss[0]


def test_train_rejects_bad_splits():
    from tripletgcn.schema import DataError

    c, (tr, va) = _small_problem()
    with pytest.raises(DataError, match="overlap"):
        train(c, (tr, [tr[0]]), TrainConfig(epochs=1))
    neg = [i for i in range(c.n_patients) if c.labels[i] == 0]
    with pytest.raises(DataError, match="no positive"):
        train(c, (neg, []), TrainConfig(epochs=1))


def test_train_inductive_runs():
    c, split = _small_problem()
    params, stats, hist = train(c, split, TrainConfig(epochs=5, hidden=8, inductive=True))
    assert len(hist) == 5
    assert predict_proba(c, stats, params, TrainConfig(hidden=8)).shape == (c.n_patients,)


@pytest.mark.slow
def test_separable_cohort_learns():
    c = generate(SynthConfig(n_patients=200, signal_strength=4.0, noise_std=0.0, missing_rate=0.0, seed=0))
    tr, va = stratified_split(c.labels, 0.2, 0)
    params, stats, hist = train(c, (tr, va), TrainConfig(seed=0))
    probs = predict_proba(c, stats, params, TrainConfig())
    assert auc(probs[va], np.asarray(c.labels)[va]) >= 0.95
