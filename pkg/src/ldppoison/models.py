"""Softmax classifiers with hand-written gradients.

Two model kinds stand in for the local networks of the clients: multinomial
logistic regression and a one-hidden-layer ReLU perceptron. Parameters live in
a :class:`~ldppoison.params.ParamVector` whose layer table fully determines the
architecture, so ``loss``/``grad`` need only the vector and a batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .params import ParamVector, ShapeMismatchError, make_shapes


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "logistic_regression" | "mlp2"
    input_dim: int
    num_classes: int
    hidden_dim: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("logistic_regression", "mlp2"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")
        if self.kind == "mlp2" and (self.hidden_dim is None or self.hidden_dim <= 0):
            raise ValueError("mlp2 needs a positive hidden_dim")

    def layers(self) -> list[tuple[str, int]]:
        if self.kind == "logistic_regression":
            return [("W", self.input_dim * self.num_classes), ("b", self.num_classes)]
        h = self.hidden_dim
        return [
            ("W1", self.input_dim * h),
            ("b1", h),
            ("W2", h * self.num_classes),
            ("b2", self.num_classes),
        ]

    @property
    def dim(self) -> int:
        return sum(n for _, n in self.layers())


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ShapeMismatchError(f"inputs {x.shape} do not match {y.size} labels")
        if y.size < 1:
            raise ValueError("batch must hold at least one sample")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size


def spec_of(theta: ParamVector) -> ModelSpec:
    """Recover the architecture from a parameter vector's layer table."""
    names = [s.name for s in theta.shapes]
    lengths = {s.name: s.length for s in theta.shapes}
    if names == ["W", "b"]:
        c = lengths["b"]
        return ModelSpec("logistic_regression", lengths["W"] // c, c)
    if names == ["W1", "b1", "W2", "b2"]:
        h, c = lengths["b1"], lengths["b2"]
        return ModelSpec("mlp2", lengths["W1"] // h, c, hidden_dim=h)
    raise ShapeMismatchError(f"unrecognised layer table {names}")


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Gaussian weights with per-layer std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    fan_in = {"W": spec.input_dim, "W1": spec.input_dim, "W2": spec.hidden_dim}
    for name, n in spec.layers():
        if name.startswith("W"):
            parts.append(rng.standard_normal(n) / np.sqrt(fan_in[name]))
        else:
            parts.append(np.zeros(n))
    return ParamVector(np.concatenate(parts), make_shapes(spec.layers()))


def _unpack(theta: ParamVector, spec: ModelSpec):
    if theta.dim != spec.dim:
        raise ShapeMismatchError(f"vector of dim {theta.dim} does not fit {spec}")
    if spec.kind == "logistic_regression":
        return (theta.layer("W").reshape(spec.input_dim, spec.num_classes), theta.layer("b"))
    h = spec.hidden_dim
    return (
        theta.layer("W1").reshape(spec.input_dim, h),
        theta.layer("b1"),
        theta.layer("W2").reshape(h, spec.num_classes),
        theta.layer("b2"),
    )


def _check_inputs(x: np.ndarray, spec: ModelSpec) -> None:
    if x.shape[1] != spec.input_dim:
        raise ShapeMismatchError(f"inputs have {x.shape[1]} features, model expects {spec.input_dim}")


def logits(theta: ParamVector, x: np.ndarray) -> np.ndarray:
    spec = spec_of(theta)
    x = np.asarray(x, dtype=np.float64)
    _check_inputs(x, spec)
    if spec.kind == "logistic_regression":
        w, b = _unpack(theta, spec)
        return x @ w + b
    w1, b1, w2, b2 = _unpack(theta, spec)
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(theta: ParamVector, batch: Batch) -> float:
    """Mean cross-entropy of the softmax outputs."""
    spec = spec_of(theta)
    if batch.labels.max() >= spec.num_classes or batch.labels.min() < 0:
        raise ValueError("label outside [0, num_classes)")
    logp = _log_softmax(logits(theta, batch.inputs))
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def per_sample_grads(theta: ParamVector, x: np.ndarray, y: np.ndarray, with_inputs: bool = False):
    """Per-sample gradients of the cross-entropy, one row per sample.

    Returns ``G`` of shape (B, d) laid out like ``theta``; with ``with_inputs``
    also returns the (B, input_dim) gradients with respect to the inputs,
    which the trainable input transform needs.
    """
    spec = spec_of(theta)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_inputs(x, spec)
    n = x.shape[0]
    if spec.kind == "logistic_regression":
        w, b = _unpack(theta, spec)
        z = x @ w + b
        delta = np.exp(_log_softmax(z))
        delta[np.arange(n), y] -= 1.0
        gw = np.einsum("bi,bc->bic", x, delta).reshape(n, -1)
        g = np.concatenate([gw, delta], axis=1)
        gx = delta @ w.T if with_inputs else None
    else:
        w1, b1, w2, b2 = _unpack(theta, spec)
        pre = x @ w1 + b1
        hid = np.maximum(pre, 0.0)
        z = hid @ w2 + b2
        delta2 = np.exp(_log_softmax(z))
        delta2[np.arange(n), y] -= 1.0
        # ReLU subgradient at 0 is 0
        delta1 = (delta2 @ w2.T) * (pre > 0)
        gw1 = np.einsum("bi,bh->bih", x, delta1).reshape(n, -1)
        gw2 = np.einsum("bh,bc->bhc", hid, delta2).reshape(n, -1)
        g = np.concatenate([gw1, delta1, gw2, delta2], axis=1)
        gx = delta1 @ w1.T if with_inputs else None
    if with_inputs:
        return g, gx
    return g


def grad(theta: ParamVector, batch: Batch) -> ParamVector:
    """Gradient of :func:`loss` with respect to ``theta``."""
    spec = spec_of(theta)
    x = batch.inputs
    _check_inputs(x, spec)
    n = len(batch)
    if spec.kind == "logistic_regression":
        w, b = _unpack(theta, spec)
        delta = np.exp(_log_softmax(x @ w + b))
        delta[np.arange(n), batch.labels] -= 1.0
        delta /= n
        return theta.with_values(np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)]))
    w1, b1, w2, b2 = _unpack(theta, spec)
    pre = x @ w1 + b1
    hid = np.maximum(pre, 0.0)
    delta2 = np.exp(_log_softmax(hid @ w2 + b2))
    delta2[np.arange(n), batch.labels] -= 1.0
    delta2 /= n
    delta1 = (delta2 @ w2.T) * (pre > 0)
    return theta.with_values(np.concatenate([
        (x.T @ delta1).ravel(), delta1.sum(axis=0), (hid.T @ delta2).ravel(), delta2.sum(axis=0),
    ]))


def reverse_grad(theta: ParamVector, batch: Batch) -> ParamVector:
    """Gradient of the negated loss, used by compromised clients."""
    g = grad(theta, batch)
    return g.with_values(-g.values)


def predict(theta: ParamVector, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(logits(theta, x), axis=1)


def error_rate(theta: ParamVector, test: Batch) -> float:
    return float(np.mean(predict(theta, test.inputs) != test.labels))
