"""Client-side LDP protocols: LDPSGD, PrivateFL and LDP-FL.

Each ``*_local_round`` starts from the downloaded global model and returns the
client's new local parameters. ``malicious`` flips the loss sign (gradient
ascent); ``apply_ldp=False`` skips clipping and noise, which is how a
compromised client bypasses the mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .models import per_sample_grads
from .params import ParamVector

PROTOCOLS = ("ldpsgd", "privatefl", "ldpfl")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    protocol: str
    eta: float
    epochs: int = 1
    sample_prob: float = 1.0
    clip_c: float = 1.0
    sigma: float = 0.0
    epsilon: float = 1.0
    range_floor: float = 1e-3

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.protocol!r}")
        if not self.eta > 0:
            raise ProtocolError("eta must be positive")
        if self.epochs < 1:
            raise ProtocolError("epochs must be at least 1")
        if not 0 < self.sample_prob <= 1:
            raise ProtocolError("sample_prob must lie in (0, 1]")
        if not self.clip_c > 0:
            raise ProtocolError("clip_c must be positive")
        if self.sigma < 0:
            raise ProtocolError("sigma must be non-negative")
        if not self.epsilon > 0:
            raise ProtocolError("epsilon must be positive")


@dataclass(frozen=True, eq=False)
class TransformLayer:
    """Per-feature affine input map ``x -> scale * x + shift`` (never uploaded)."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        a = np.array(self.scale, dtype=np.float64).reshape(-1)
        b = np.array(self.shift, dtype=np.float64).reshape(-1)
        if a.shape != b.shape:
            raise ValueError("scale and shift must have equal length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("transform layer must be finite")
        object.__setattr__(self, "scale", a)
        object.__setattr__(self, "shift", b)

    @classmethod
    def identity(cls, input_dim: int) -> "TransformLayer":
        return cls(np.ones(input_dim), np.zeros(input_dim))

    @property
    def dim(self) -> int:
        return self.scale.size

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.shift


@dataclass
class RoundStats:
    steps: int = 0
    skipped_batches: int = 0


def clip_rows(g: np.ndarray, c: float) -> np.ndarray:
    """Per-row ``g / max(1, ||g|| / c)``, with every row norm guaranteed <= c."""
    norms = np.linalg.norm(g, axis=1)
    out = g / np.maximum(1.0, norms / c)[:, None]
    over = np.linalg.norm(out, axis=1) > c
    while np.any(over):
        out[over] *= 1.0 - 1e-15
        over = np.linalg.norm(out, axis=1) > c
    return out


def _dpsgd_loop(theta_g, ds, cfg, malicious, apply_ldp, rng, epochs, stats, transform, train_transform):
    theta = theta_g.values.copy()
    shapes = theta_g.shapes
    d = theta.size
    a = b = None
    if transform is not None:
        if transform.dim != ds.input_dim:
            raise ValueError("transform layer does not match the input dimension")
        a, b = transform.scale.copy(), transform.shift.copy()
    n = len(ds)
    for _ in range(epochs):
        picked = np.flatnonzero(rng.random(n) < cfg.sample_prob)
        if picked.size == 0:
            if stats is not None:
                stats.skipped_batches += 1
            continue
        x = ds.inputs[picked]
        y = ds.labels[picked]
        cur = ParamVector(theta, shapes)
        if a is None:
            g = per_sample_grads(cur, x, y)
        elif train_transform:
            g, gx = per_sample_grads(cur, a * x + b, y, with_inputs=True)
            g = np.concatenate([g, gx * x, gx], axis=1)
        else:
            g = per_sample_grads(cur, a * x + b, y)
        if malicious:
            g = -g
        if apply_ldp:
            g = clip_rows(g, cfg.clip_c)
        total = g.sum(axis=0)
        if apply_ldp:
            # theta noise is drawn first so a frozen transform reproduces LDPSGD's stream
            noise = rng.normal(0.0, cfg.sigma * cfg.clip_c, size=d)
            if g.shape[1] > d:
                noise = np.concatenate([noise, rng.normal(0.0, cfg.sigma * cfg.clip_c, size=g.shape[1] - d)])
            total = total + noise
        step = total / picked.size
        theta = theta - cfg.eta * step[:d]
        if g.shape[1] > d:
            k = a.size
            a = a - cfg.eta * step[d:d + k]
            b = b - cfg.eta * step[d + k:]
        if stats is not None:
            stats.steps += 1
    out = ParamVector(theta, shapes)
    new_t = TransformLayer(a, b) if a is not None else None
    return out, new_t


def ldpsgd_local_round(
    theta_g: ParamVector,
    ds: Dataset,
    cfg: ProtocolConfig,
    rng: np.random.Generator,
    malicious: bool = False,
    apply_ldp: bool = True,
    epochs: Optional[int] = None,
    stats: Optional[RoundStats] = None,
) -> ParamVector:
    """Poisson-sampled, per-sample clipped, Gaussian-noised SGD.

    Runs ``epochs`` iterations (``cfg.epochs`` by default). Each iteration
    keeps every sample with probability ``cfg.sample_prob``; an empty draw is
    skipped and counted in ``stats``. The noised step is
    ``(sum of clipped grads + N(0, sigma^2 C^2 I)) / |B|``.
    """
    if cfg.protocol != "ldpsgd":
        raise ProtocolError(f"ldpsgd_local_round called with protocol {cfg.protocol!r}")
    out, _ = _dpsgd_loop(theta_g, ds, cfg, malicious, apply_ldp, rng,
                         epochs or cfg.epochs, stats, None, False)
    return out


def privatefl_local_round(
    theta_g: ParamVector,
    transform: TransformLayer,
    ds: Dataset,
    cfg: ProtocolConfig,
    rng: np.random.Generator,
    malicious: bool = False,
    apply_ldp: bool = True,
    epochs: Optional[int] = None,
    stats: Optional[RoundStats] = None,
    train_transform: bool = True,
) -> tuple[ParamVector, TransformLayer]:
    """LDPSGD over the joint parameters (transform, theta).

    Inputs pass through the client's private affine layer; clipping and noise
    act on the joint per-sample gradient. Only the returned ``ParamVector`` is
    meant for upload; the updated transform stays with the client.
    """
    if cfg.protocol != "privatefl":
        raise ProtocolError(f"privatefl_local_round called with protocol {cfg.protocol!r}")
    out, new_t = _dpsgd_loop(theta_g, ds, cfg, malicious, apply_ldp, rng,
                             epochs or cfg.epochs, stats, transform, train_transform)
    return out, new_t


def ldpfl_local_round(
    theta_g: ParamVector,
    ds: Dataset,
    cfg: ProtocolConfig,
    rng: np.random.Generator,
    malicious: bool = False,
    epochs: Optional[int] = None,
    stats: Optional[RoundStats] = None,
) -> ParamVector:
    """Plain per-sample SGD over the whole local dataset, shuffled each epoch.

    The result is raw; the caller applies data_perturbation or clip2val.
    """
    if cfg.protocol != "ldpfl":
        raise ProtocolError(f"ldpfl_local_round called with protocol {cfg.protocol!r}")
    theta = theta_g.values.copy()
    shapes = theta_g.shapes
    sign = -1.0 if malicious else 1.0
    for _ in range(epochs or cfg.epochs):
        for i in rng.permutation(len(ds)):
            g = per_sample_grads(ParamVector(theta, shapes), ds.inputs[i:i + 1], ds.labels[i:i + 1])[0]
            theta = theta - cfg.eta * sign * g
            if stats is not None:
                stats.steps += 1
    return ParamVector(theta, shapes)


# --- LDP-FL two-point randomisation -------------------------------------------

Ranges = Sequence[tuple[float, float]]


def server_ranges(theta_g: ParamVector, floor: float = 1e-3) -> list[tuple[float, float]]:
    """Per-layer (centre, radius): midpoint and half-width of the layer's values."""
    out = []
    for s in theta_g.shapes:
        w = theta_g.values[s.offset:s.offset + s.length]
        lo, hi = float(w.min()), float(w.max())
        out.append(((lo + hi) / 2.0, max((hi - lo) / 2.0, floor)))
    return out


def _expand(theta: ParamVector, ranges: Ranges) -> tuple[np.ndarray, np.ndarray]:
    if len(ranges) != len(theta.shapes):
        raise ProtocolError(f"{len(ranges)} ranges for {len(theta.shapes)} layers")
    c = np.empty(theta.dim)
    r = np.empty(theta.dim)
    for s, (ci, ri) in zip(theta.shapes, ranges):
        if not ri > 0:
            raise ProtocolError(f"range radius for layer {s.name!r} must be positive, got {ri}")
        c[s.offset:s.offset + s.length] = ci
        r[s.offset:s.offset + s.length] = ri
    return c, r


def amplification(epsilon: float) -> float:
    """K = (e^eps + 1) / (e^eps - 1)."""
    if not epsilon > 0:
        raise ProtocolError("epsilon must be positive")
    return (math.exp(epsilon) + 1.0) / math.expm1(epsilon)


def two_point_values(theta: ParamVector, ranges: Ranges, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate (low, high) = (c - rK, c + rK)."""
    c, r = _expand(theta, ranges)
    k = amplification(epsilon)
    return c - r * k, c + r * k


def high_probability(w, c, r, epsilon: float):
    """Probability that ``w`` (already inside [c - r, c + r]) maps to the high value."""
    e = math.exp(epsilon)
    return ((w - c) * (e - 1.0) + r * (e + 1.0)) / (2.0 * r * (e + 1.0))


def data_perturbation(theta: ParamVector, ranges: Ranges, epsilon: float, rng: np.random.Generator) -> ParamVector:
    """Unbiased randomised rounding of every weight to c - rK or c + rK.

    Weights outside [c - r, c + r] are clamped into it first.
    """
    c, r = _expand(theta, ranges)
    low, high = two_point_values(theta, ranges, epsilon)
    w = np.clip(theta.values, c - r, c + r)
    p = high_probability(w, c, r, epsilon)
    take_high = rng.random(theta.dim) < p
    return theta.with_values(np.where(take_high, high, low))


def clip2val(theta: ParamVector, ranges: Ranges, epsilon: float) -> ParamVector:
    """Deterministic two-point map: high value if w > c, else low value."""
    c, _ = _expand(theta, ranges)
    low, high = two_point_values(theta, ranges, epsilon)
    return theta.with_values(np.where(theta.values > c, high, low))


def is_two_point(theta: ParamVector, ranges: Ranges, epsilon: float) -> bool:
    low, high = two_point_values(theta, ranges, epsilon)
    return bool(np.all((theta.values == low) | (theta.values == high)))


@dataclass
class ClientState:
    """What a client keeps between rounds (only PrivateFL has anything)."""

    transform: Optional[TransformLayer] = None
    stats: RoundStats = field(default_factory=RoundStats)
