import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldppoison.data import synth_blobs
from ldppoison.models import (
    Batch,
    ModelSpec,
    error_rate,
    grad,
    init_params,
    logits,
    loss,
    per_sample_grads,
    reverse_grad,
)
from ldppoison.params import ParamVector, ShapeMismatchError, l2_norm

SPECS = [
    ModelSpec("logistic_regression", input_dim=4, num_classes=3),
    ModelSpec("mlp2", input_dim=4, num_classes=3, hidden_dim=5),
]


def random_instance(spec, seed, n=6):
    rng = np.random.default_rng(seed)
    theta = init_params(spec, seed).with_values(rng.standard_normal(spec.dim))
    x = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(spec.num_classes, size=n)
    return theta, Batch(x, y)


def naive_loss(theta, batch):
    # per-sample loop with math.exp, independent of the vectorised path
    z = logits(theta, batch.inputs)
    total = 0.0
    for row, label in zip(z, batch.labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[label]
    return total / len(batch)


def finite_diff(theta, batch, f, h=1e-5):
    out = np.empty(theta.dim)
    for j in range(theta.dim):
        e = np.zeros(theta.dim)
        e[j] = h
        out[j] = (f(theta.with_values(theta.values + e), batch) - f(theta.with_values(theta.values - e), batch)) / (2 * h)
    return out


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def test_init_shapes_and_determinism():
    lr = ModelSpec("logistic_regression", 4, 3)
    assert init_params(lr, 0).dim == 15
    mlp = ModelSpec("mlp2", 8, 2, hidden_dim=5)
    assert init_params(mlp, 0).dim == 57
    assert init_params(mlp, 7) == init_params(mlp, 7)
    p = init_params(mlp, 7)
    assert np.all(p.layer("b1") == 0) and np.all(p.layer("b2") == 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("logistic_regression", 4, 1)
    with pytest.raises(ValueError):
        ModelSpec("mlp2", 4, 3)
    with pytest.raises(ValueError):
        ModelSpec("cnn", 4, 3)


def test_zero_model_loss_is_log_classes():
    spec = ModelSpec("logistic_regression", 5, 7)
    theta = init_params(spec, 0).with_values(np.zeros(spec.dim))
    batch = Batch(np.random.default_rng(0).standard_normal((9, 5)), np.arange(9) % 7)
    assert loss(theta, batch) == pytest.approx(math.log(7), rel=1e-14)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_loss_matches_naive_and_duplication(spec):
    theta, batch = random_instance(spec, 1)
    assert loss(theta, batch) == pytest.approx(naive_loss(theta, batch), rel=1e-12)
    doubled = Batch(np.vstack([batch.inputs, batch.inputs]), np.concatenate([batch.labels, batch.labels]))
    assert loss(theta, doubled) == pytest.approx(loss(theta, batch), rel=1e-14)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_gradient_matches_finite_differences(spec):
    for seed in range(20):
        theta, batch = random_instance(spec, 100 + seed)
        fd = finite_diff(theta, batch, naive_loss)
        assert max_rel_err(grad(theta, batch).values, fd) <= 1e-4


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_reverse_grad(spec):
    theta, batch = random_instance(spec, 5)
    g, rg = grad(theta, batch), reverse_grad(theta, batch)
    assert np.array_equal(rg.values, -g.values)
    fd = finite_diff(theta, batch, lambda t, b: -naive_loss(t, b))
    assert max_rel_err(rg.values, fd) <= 1e-4


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_per_sample_grads_average_to_grad(spec):
    theta, batch = random_instance(spec, 9)
    g = per_sample_grads(theta, batch.inputs, batch.labels)
    np.testing.assert_allclose(g.mean(axis=0), grad(theta, batch).values, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_input_gradients(spec):
    theta, batch = random_instance(spec, 11, n=1)
    _, gx = per_sample_grads(theta, batch.inputs, batch.labels, with_inputs=True)
    h = 1e-5
    fd = []
    for j in range(spec.input_dim):
        e = np.zeros_like(batch.inputs)
        e[0, j] = h
        fd.append((naive_loss(theta, Batch(batch.inputs + e, batch.labels))
                   - naive_loss(theta, Batch(batch.inputs - e, batch.labels))) / (2 * h))
    assert max_rel_err(gx[0], np.array(fd)) <= 1e-4


def test_zero_gradient_point():
    # with two identical inputs of opposite labels, the zero model is stationary
    spec = ModelSpec("logistic_regression", 3, 2)
    theta = init_params(spec, 0).with_values(np.zeros(spec.dim))
    batch = Batch(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]), np.array([0, 1]))
    assert l2_norm(grad(theta, batch)) == 0.0
    assert l2_norm(reverse_grad(theta, batch)) == 0.0


def test_gradient_vanishes_at_convergence():
    # one sample, L2-free logistic regression: drive the loss down until the gradient is tiny
    spec = ModelSpec("logistic_regression", 2, 2)
    theta = init_params(spec, 0)
    batch = Batch(np.array([[1.0, -0.5]]), np.array([1]))
    for _ in range(20000):
        g = grad(theta, batch)
        if l2_norm(g) < 1e-6:
            break
        theta = theta.with_values(theta.values - 50.0 * g.values)
    assert l2_norm(grad(theta, batch)) < 1e-6


def test_loss_decreases_after_small_step():
    ds = synth_blobs(2, 3, 50, 0.3, seed=4)
    spec = ModelSpec("logistic_regression", 3, 2)
    theta = init_params(spec, 1)
    batch = ds.as_batch()
    before = loss(theta, batch)
    after = loss(theta.with_values(theta.values - 0.1 * grad(theta, batch).values), batch)
    assert after < before


def test_error_rate_examples():
    ds = synth_blobs(3, 4, 40, 0.05, seed=2)
    spec = ModelSpec("logistic_regression", 4, 3)
    theta = init_params(spec, 0)
    batch = ds.as_batch()
    for _ in range(300):
        theta = theta.with_values(theta.values - 1.0 * grad(theta, batch).values)
    assert error_rate(theta, batch) == 0.0
    single = Batch(batch.inputs[:1], batch.labels[:1])
    assert error_rate(theta, single) == 0.0


def test_zero_model_error_on_random_labels():
    rng = np.random.default_rng(8)
    spec = ModelSpec("logistic_regression", 5, 10)
    theta = init_params(spec, 0).with_values(np.zeros(spec.dim))
    batch = Batch(rng.standard_normal((2000, 5)), rng.integers(10, size=2000))
    # all logits tie, so class 0 is always predicted
    assert abs(error_rate(theta, batch) - 0.9) <= 0.05
    assert error_rate(theta, batch) == pytest.approx(np.mean(batch.labels != 0))


def test_shape_mismatch():
    theta = init_params(ModelSpec("logistic_regression", 4, 3), 0)
    with pytest.raises(ShapeMismatchError):
        loss(theta, Batch(np.zeros((2, 5)), np.array([0, 1])))
    with pytest.raises(ShapeMismatchError):
        loss(ParamVector.flat(np.zeros(15)), Batch(np.zeros((2, 4)), np.array([0, 1])))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(SPECS))
def test_loss_permutation_invariant(seed, spec):
    theta, batch = random_instance(spec, seed, n=8)
    perm = np.random.default_rng(seed).permutation(8)
    shuffled = Batch(batch.inputs[perm], batch.labels[perm])
    assert abs(loss(theta, shuffled) - loss(theta, batch)) <= 1e-12 * max(1.0, loss(theta, batch))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(-5, 5))
def test_error_rate_argmax_invariance(seed, a, c):
    # scaling (W, b) by a > 0 and shifting every bias by c maps logits z -> a*z + c
    spec = ModelSpec("logistic_regression", 4, 3)
    theta, batch = random_instance(spec, seed, n=30)
    moved = theta.with_values(np.concatenate([a * theta.layer("W"), a * theta.layer("b") + c]))
    assert error_rate(moved, batch) == error_rate(theta, batch)
