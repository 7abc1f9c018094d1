"""Compromised-client behaviour.

RPA is the random baseline. LLRA trains with the negated loss. TMMA solves for
the upload that makes the plain average land on a reverse-trained target.
AdaPA interleaves reverse training with a projection onto what the robust
aggregation rule will accept.

``mode="input"`` feeds the crafted model through the protocol's LDP mechanism;
``mode="output"`` bypasses it (for LDP-FL the bypass still has to emit two-point
values, so it uses :func:`~ldppoison.ldp.clip2val`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ldp
from .aggregation import AggregationConfig, AggregationConfigError, geometric_median, survivor_range
from .data import Dataset
from .ldp import ClientState, ProtocolConfig
from .models import grad
from .params import ParamVector, mean, stack

KINDS = ("rpa", "llra", "tmma", "adapa")
MODES = ("input", "output")
KNOWLEDGE = ("local", "partial", "global")


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackPlan:
    kind: str
    n_malicious: int
    n_total: int
    mode: str = "output"
    knowledge: str = "local"
    ate: int = 1
    scal: float = 1.0
    t_scale: float = 1.0
    # TMMA: estimate benign behaviour from eavesdropped uploads instead of own data
    est_from_view: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackConfigError(f"unknown attack kind {self.kind!r}")
        if self.mode not in MODES:
            raise AttackConfigError(f"unknown attack mode {self.mode!r}")
        if self.knowledge not in KNOWLEDGE:
            raise AttackConfigError(f"unknown knowledge level {self.knowledge!r}")
        if self.ate < 1:
            raise AttackConfigError("ate must be at least 1")
        if not self.scal > 0:
            raise AttackConfigError("scal must be positive")
        if self.t_scale < 0:
            raise AttackConfigError("t_scale must be non-negative")
        if not 0 <= self.n_malicious <= self.n_total:
            raise AttackConfigError("n_malicious must lie in [0, n_total]")
        if self.kind == "tmma" and self.knowledge == "local":
            raise AttackConfigError("tmma needs at least partial knowledge (N and n)")
        if self.kind == "adapa" and self.knowledge != "global":
            raise AttackConfigError("adapa needs global knowledge (eavesdropped benign uploads)")
        if self.est_from_view and self.knowledge != "global":
            raise AttackConfigError("est_from_view needs global knowledge")

    @property
    def label(self) -> str:
        if self.kind in ("llra", "tmma"):
            return f"{self.kind.upper()}-{'I' if self.mode == 'input' else 'O'}"
        return {"rpa": "RPA", "adapa": "AdaPA"}[self.kind]


@dataclass(frozen=True)
class EavesdropView:
    n_total: int
    n_malicious: int
    benign_uploads: Optional[tuple[ParamVector, ...]] = None

    def __post_init__(self):
        if self.benign_uploads is not None:
            object.__setattr__(self, "benign_uploads", tuple(self.benign_uploads))
            if len(self.benign_uploads) != self.n_total - self.n_malicious:
                raise AttackConfigError(
                    f"view holds {len(self.benign_uploads)} uploads, expected {self.n_total - self.n_malicious}")

    @classmethod
    def for_knowledge(cls, knowledge: str, n_total: int, n_malicious: int, benign_uploads) -> "EavesdropView":
        """Build the view an attacker at ``knowledge`` is allowed to see.

        Only global knowledge carries the benign uploads; at local knowledge
        the counts are withheld too (reported as 0).
        """
        if knowledge == "global":
            return cls(n_total, n_malicious, tuple(benign_uploads))
        if knowledge == "partial":
            return cls(n_total, n_malicious, None)
        return cls(0, 0, None)

    def require_uploads(self) -> tuple[ParamVector, ...]:
        if not self.benign_uploads:
            raise AttackConfigError("this attack needs the eavesdropped benign uploads")
        return self.benign_uploads


def _train(theta_g, ds, cfg: ProtocolConfig, rng, malicious, apply_ldp, epochs, client: Optional[ClientState],
           keep_transform=True):
    """One local round of the client's protocol; returns raw (unperturbed for LDP-FL) parameters."""
    stats = client.stats if client is not None else None
    if cfg.protocol == "ldpsgd":
        return ldp.ldpsgd_local_round(theta_g, ds, cfg, rng, malicious=malicious, apply_ldp=apply_ldp,
                                      epochs=epochs, stats=stats)
    if cfg.protocol == "privatefl":
        if client is None or client.transform is None:
            client = ClientState(transform=ldp.TransformLayer.identity(ds.input_dim))
        out, t = ldp.privatefl_local_round(theta_g, client.transform, ds, cfg, rng, malicious=malicious,
                                           apply_ldp=apply_ldp, epochs=epochs, stats=stats)
        if keep_transform:
            client.transform = t
        return out
    return ldp.ldpfl_local_round(theta_g, ds, cfg, rng, malicious=malicious, epochs=epochs, stats=stats)


def _ldpfl_finish(theta, cfg, mode, ranges, rng):
    if ranges is None:
        raise AttackConfigError("LDP-FL attacks need the server's per-layer ranges")
    if mode == "input":
        return ldp.data_perturbation(theta, ranges, cfg.epsilon, rng)
    return ldp.clip2val(theta, ranges, cfg.epsilon)


def rpa_update(theta_g: ParamVector, cfg: ProtocolConfig, plan: AttackPlan, rng: np.random.Generator,
               ranges=None) -> ParamVector:
    """Random poisoning baseline.

    LDPSGD/PrivateFL: a Gaussian direction rescaled to norm ``t * C * ATE``,
    uploaded as ``theta_g - eta * g``. LDP-FL: a uniformly random two-point vector.
    """
    if cfg.protocol == "ldpfl":
        if ranges is None:
            raise AttackConfigError("LDP-FL attacks need the server's per-layer ranges")
        low, high = ldp.two_point_values(theta_g, ranges, cfg.epsilon)
        return theta_g.with_values(np.where(rng.random(theta_g.dim) < 0.5, high, low))
    g = rng.standard_normal(theta_g.dim)
    target = plan.t_scale * cfg.clip_c * plan.ate
    norm = np.linalg.norm(g)
    g = g * (target / norm) if norm > 0 else np.zeros_like(g)
    return theta_g.with_values(theta_g.values - cfg.eta * g)


def llra_update(theta_g: ParamVector, ds: Dataset, cfg: ProtocolConfig, plan: AttackPlan,
                rng: np.random.Generator, ranges=None, client: Optional[ClientState] = None) -> ParamVector:
    """Local loss reversal: ATE epochs of gradient ascent on the local loss."""
    if plan.kind != "llra":
        raise AttackConfigError(f"llra_update called with a {plan.kind} plan")
    apply_ldp = plan.mode == "input"
    theta = _train(theta_g, ds, cfg, rng, True, apply_ldp, plan.ate, client)
    if cfg.protocol == "ldpfl":
        return _ldpfl_finish(theta, cfg, plan.mode, ranges, rng)
    return theta


def tmma_combine(target: ParamVector, est: ParamVector, n_total: int, n_malicious: int) -> ParamVector:
    """Upload that makes the average of (N - n) copies of ``est`` and n uploads equal ``target``."""
    if n_malicious < 1:
        raise AttackConfigError("tmma needs at least one compromised client")
    if n_malicious == n_total:
        return target
    vals = (n_total * target.values - (n_total - n_malicious) * est.values) / n_malicious
    return target.with_values(vals)


def tmma_update(theta_g: ParamVector, ds: Dataset, cfg: ProtocolConfig, plan: AttackPlan,
                rng: np.random.Generator, ranges=None, client: Optional[ClientState] = None,
                view: Optional[EavesdropView] = None) -> ParamVector:
    """Targeted model manipulation.

    The benign estimate is one normal local round from ``theta_g`` on the
    attacker's own data (benign-style, i.e. with the LDP mechanism); the target
    is one reverse-loss round of ATE epochs. For LDPSGD/PrivateFL ``mode``
    decides whether the target is trained with clipping and noise.
    """
    if plan.kind != "tmma":
        raise AttackConfigError(f"tmma_update called with a {plan.kind} plan")
    if plan.n_malicious < 1:
        raise AttackConfigError("tmma needs at least one compromised client")
    est_rng, target_rng, out_rng = rng.spawn(3)
    if plan.est_from_view:
        est = mean((view or EavesdropView(0, 0)).require_uploads())
    else:
        est = _train(theta_g, ds, cfg, est_rng, False, True, cfg.epochs, client, keep_transform=False)
    target = _train(theta_g, ds, cfg, target_rng, True, plan.mode == "input", plan.ate, client)
    adv = tmma_combine(target, est, plan.n_total, plan.n_malicious)
    if cfg.protocol == "ldpfl":
        return _ldpfl_finish(adv, cfg, plan.mode, ranges, out_rng)
    return adv


# --- AdaPA --------------------------------------------------------------------


def adapa_init(theta_g: ParamVector, view: Optional[EavesdropView], agg: AggregationConfig,
               protocol: str = "ldpsgd") -> ParamVector:
    """Starting point of adversarial training: where the defence is most likely to accept."""
    if protocol == "ldpfl" or agg.rule == "fedavg":
        return theta_g
    if view is None:
        raise AttackConfigError("adapa_init needs an eavesdrop view")
    uploads = view.require_uploads()
    if agg.rule == "multikrum":
        return geometric_median(uploads)
    return mean(uploads)


def _shrink_into_ball(center: np.ndarray, delta: np.ndarray, radius: float) -> np.ndarray:
    norm = np.linalg.norm(delta)
    out = center + delta / max(1.0, norm / radius)
    # the re-added centre can round the offset a hair past the radius
    while np.linalg.norm(out - center) > radius:
        delta = delta * (1.0 - 1e-12)
        out = center + delta / max(1.0, norm / radius)
    return out


def multikrum_radius(uploads: Sequence[ParamVector], geo: ParamVector, scal: float) -> float:
    """``scal`` times the distance from the geometric median to its nearest benign upload."""
    return scal * float(np.min(np.linalg.norm(stack(uploads) - geo.values, axis=1)))


def fit_on_def(theta_adv: ParamVector, view: Optional[EavesdropView], agg: AggregationConfig, scal: float,
               protocol: str = "ldpsgd", geo: Optional[ParamVector] = None) -> ParamVector:
    """Project an adversarial model onto the set the defence accepts.

    Multi-Krum: clip the offset from the benign geometric median to ``scal``
    times the median's distance to the nearest benign upload. Trimmed mean:
    clamp each coordinate into the benign survivor range. Otherwise identity.
    """
    if protocol == "ldpfl" or agg.rule == "fedavg":
        return theta_adv
    if view is None:
        raise AttackConfigError("fit_on_def needs an eavesdrop view")
    uploads = view.require_uploads()
    if agg.rule == "multikrum":
        if math.isinf(scal):
            return theta_adv
        if geo is None:
            geo = geometric_median(uploads)
        radius = multikrum_radius(uploads, geo, scal)
        if radius == 0.0:
            return geo
        return theta_adv.with_values(_shrink_into_ball(geo.values, theta_adv.values - geo.values, radius))
    lo, hi = survivor_range(stack(uploads), agg.beta)
    return theta_adv.with_values(np.clip(theta_adv.values, lo, hi))


def restricted_median(uploads: Sequence[ParamVector], ranges, epsilon: float) -> ParamVector:
    """Per-coordinate majority among two-point uploads; ties go to the low value."""
    if not uploads:
        raise AttackConfigError("restricted_median needs at least one upload")
    low, high = ldp.two_point_values(uploads[0], ranges, epsilon)
    x = stack(uploads)
    is_high = x == high
    if not np.all(is_high | (x == low)):
        raise AttackConfigError("restricted_median got an upload outside the two-point codomain")
    n_high = is_high.sum(axis=0)
    return uploads[0].with_values(np.where(2 * n_high > len(uploads), high, low))


def ldpfl_dimension_merge(theta_adv: ParamVector, theta_res: ParamVector, uploads: Sequence[ParamVector],
                          scal: float, rng: np.random.Generator) -> ParamVector:
    """Copy ``floor(scal * max_diff)`` adversarial coordinates into the restricted median.

    ``max_diff`` is the smallest Hamming distance from any upload to
    ``theta_res``; the copied coordinates are drawn uniformly among those where
    the adversarial vector and the median disagree.
    """
    if not 0 < scal <= 1:
        raise AttackConfigError(f"LDP-FL dimension merge needs 0 < scal <= 1, got {scal}")
    if not uploads:
        raise AttackConfigError("dimension merge needs the benign uploads")
    max_diff = min(int(np.sum(u.values != theta_res.values)) for u in uploads)
    want = math.floor(scal * max_diff + 1e-9)
    differing = np.flatnonzero(theta_adv.values != theta_res.values)
    take = min(want, differing.size)
    out = theta_res.values.copy()
    if take > 0:
        idx = rng.choice(differing, size=take, replace=False)
        out[idx] = theta_adv.values[idx]
    return theta_res.with_values(out)


def adapa_generate(theta_g: ParamVector, view: EavesdropView, ds: Dataset, cfg: ProtocolConfig, plan: AttackPlan,
                   agg: AggregationConfig, rng: np.random.Generator, ranges=None,
                   client: Optional[ClientState] = None) -> ParamVector:
    """Adaptive poisoning: ATE rounds of (reverse step, projection onto the defence)."""
    if plan.knowledge != "global":
        raise AttackConfigError("adapa needs global knowledge")
    if cfg.protocol == "ldpfl" and agg.rule == "trimmedmean":
        raise AggregationConfigError("trimmed mean is not used with LDP-FL's two-point uploads")
    uploads = view.require_uploads()
    transform = client.transform if client is not None else None
    theta = adapa_init(theta_g, view, agg, cfg.protocol)
    geo = geometric_median(uploads) if agg.rule == "multikrum" and cfg.protocol != "ldpfl" else None
    batch = None
    if len(ds) > 0:
        x = ds.inputs if transform is None else transform.apply(ds.inputs)
        batch = Dataset(x, ds.labels, ds.num_classes).as_batch()
    for _ in range(plan.ate):
        if batch is not None:
            # descent on -L is ascent on L
            theta = theta.with_values(theta.values + cfg.eta * grad(theta, batch).values)
        theta = fit_on_def(theta, view, agg, plan.scal, cfg.protocol, geo=geo)
    if cfg.protocol == "ldpfl":
        if ranges is None:
            raise AttackConfigError("LDP-FL attacks need the server's per-layer ranges")
        adv = ldp.clip2val(theta, ranges, cfg.epsilon)
        res = restricted_median(uploads, ranges, cfg.epsilon)
        return ldpfl_dimension_merge(adv, res, uploads, plan.scal, rng)
    return theta
