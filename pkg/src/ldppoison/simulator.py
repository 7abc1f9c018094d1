"""Round loop: local training, eavesdropping, attacks, aggregation, evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import attacks, ldp
from .aggregation import aggregate, geometric_median
from .attacks import AttackPlan, EavesdropView
from .config import ExperimentConfig
from .data import Dataset, PartitionConfig, dirichlet_partition, load_idx, stratified_split, synth_blobs
from .ldp import ClientState, RoundStats
from .models import ModelSpec, error_rate, init_params, loss
from .params import ParamVector, l2_norm
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class RoundRecord:
    round: int
    error_rate: float
    test_loss: float
    global_norm: float
    selected: Optional[list[int]] = None
    diag: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "RoundRecord":
        return cls(**json.loads(line))


def derive_seed(global_seed: int, purpose: str) -> int:
    return int(stream(global_seed, purpose=purpose).integers(2**63))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training pool and the global held-out test set."""
    src = cfg.dataset
    if src.kind == "idx":
        full = load_idx(src.images, src.labels, src.num_classes)
        if src.test_images and src.test_labels:
            test = load_idx(src.test_images, src.test_labels, src.num_classes)
            train = full
        else:
            n_test = int(round(src.test_fraction * len(full)))
            test, train = stratified_split(full, n_test, derive_seed(cfg.global_seed, "test-split"))
    else:
        full = synth_blobs(src.num_classes, src.input_dim, src.samples_per_class, src.spread, src.seed)
        n_test = int(round(src.test_fraction * len(full)))
        test, train = stratified_split(full, n_test, derive_seed(cfg.global_seed, "test-split"))
    if src.subset is not None and src.subset < len(train):
        train, _ = stratified_split(train, src.subset, derive_seed(cfg.global_seed, "subset"))
    return train, test


class Simulation:
    def __init__(self, cfg: ExperimentConfig, train: Optional[Dataset] = None, test: Optional[Dataset] = None):
        self.cfg = cfg
        if train is None or test is None:
            train, test = load_data(cfg)
        self.train, self.test = train, test
        seed = cfg.partition.seed if cfg.partition.seed is not None else derive_seed(cfg.global_seed, "partition")
        self.clients = dirichlet_partition(train, PartitionConfig(cfg.num_clients, cfg.partition.alpha, seed))
        self.spec = ModelSpec(cfg.model.kind, train.input_dim, train.num_classes, cfg.model.hidden_dim)
        self.theta = init_params(self.spec, derive_seed(cfg.global_seed, "init"))
        self.malicious = set(cfg.malicious_ids)
        self.states = [ClientState() for _ in range(cfg.num_clients)]
        if cfg.protocol.protocol == "privatefl":
            for st in self.states:
                st.transform = ldp.TransformLayer.identity(train.input_dim)
        self.plan = None
        if cfg.attack is not None and cfg.n_malicious > 0:
            a = cfg.attack
            self.plan = AttackPlan(kind=a.kind, mode=a.mode, knowledge=a.knowledge, ate=a.ate, scal=a.scal,
                                   t_scale=a.t_scale, est_from_view=a.est_from_view,
                                   n_malicious=cfg.n_malicious, n_total=cfg.num_clients)
        self.round_idx = 0

    def evaluate(self) -> tuple[float, float]:
        batch = self.test.as_batch()
        return error_rate(self.theta, batch), loss(self.theta, batch)

    def _rng(self, client_id: int, purpose: str) -> np.random.Generator:
        return stream(self.cfg.global_seed, client_id, self.round_idx, purpose)

    def _benign_upload(self, cid: int, ranges) -> ParamVector:
        cfg = self.cfg.protocol
        ds = self.clients[cid]
        st = self.states[cid]
        rng = self._rng(cid, "local")
        if cfg.protocol == "ldpsgd":
            return ldp.ldpsgd_local_round(self.theta, ds, cfg, rng, stats=st.stats)
        if cfg.protocol == "privatefl":
            out, st.transform = ldp.privatefl_local_round(self.theta, st.transform, ds, cfg, rng, stats=st.stats)
            return out
        raw = ldp.ldpfl_local_round(self.theta, ds, cfg, rng, stats=st.stats)
        return ldp.data_perturbation(raw, ranges, cfg.epsilon, self._rng(cid, "perturb"))

    def _attack_upload(self, cid: int, view: EavesdropView, ranges) -> ParamVector:
        plan, cfg = self.plan, self.cfg.protocol
        ds, st = self.clients[cid], self.states[cid]
        rng = self._rng(cid, "attack")
        if plan.kind == "rpa":
            return attacks.rpa_update(self.theta, cfg, plan, rng, ranges)
        if plan.kind == "llra":
            return attacks.llra_update(self.theta, ds, cfg, plan, rng, ranges, st)
        if plan.kind == "tmma":
            return attacks.tmma_update(self.theta, ds, cfg, plan, rng, ranges, st, view)
        return attacks.adapa_generate(self.theta, view, ds, cfg, plan, self.cfg.aggregation, rng, ranges, st)

    def run_round(self) -> RoundRecord:
        cfg = self.cfg
        n_total = cfg.num_clients
        for st in self.states:
            st.stats = RoundStats()
        ranges = None
        if cfg.protocol.protocol == "ldpfl":
            ranges = ldp.server_ranges(self.theta, cfg.protocol.range_floor)

        attacking = self.plan is not None
        uploads: dict[int, ParamVector] = {}
        for cid in range(n_total):
            if not (attacking and cid in self.malicious):
                uploads[cid] = self._benign_upload(cid, ranges)

        diag: dict = {}
        if attacking:
            benign = [uploads[c] for c in sorted(uploads)]
            view = EavesdropView.for_knowledge(self.plan.knowledge, n_total, cfg.n_malicious, benign)
            mal_ids = sorted(self.malicious)
            if self.plan.kind == "adapa" and cfg.aggregation.rule == "multikrum":
                # every compromised client submits the same vector to keep their scores minimal
                crafted = self._attack_upload(mal_ids[0], view, ranges)
                for cid in mal_ids:
                    uploads[cid] = crafted
                if cfg.protocol.protocol != "ldpfl":
                    geo = geometric_median(benign)
                    diag["adapa_offset"] = l2_norm(crafted.with_values(crafted.values - geo.values))
                    diag["adapa_radius"] = attacks.multikrum_radius(benign, geo, self.plan.scal)
            else:
                for cid in mal_ids:
                    uploads[cid] = self._attack_upload(cid, view, ranges)

        ordered = [uploads[c] for c in range(n_total)]
        self.theta, selected = aggregate(ordered, cfg.aggregation)
        err, test_loss = self.evaluate()
        diag["skipped_batches"] = [st.stats.skipped_batches for st in self.states]
        rec = RoundRecord(
            round=self.round_idx,
            error_rate=err,
            test_loss=test_loss,
            global_norm=l2_norm(self.theta),
            selected=list(selected) if selected is not None else None,
            diag=diag,
        )
        log.debug("round %d error %.4f", self.round_idx, err)
        self.round_idx += 1
        return rec

    def run(self) -> list[RoundRecord]:
        return [self.run_round() for _ in range(self.cfg.rounds - self.round_idx)]


def run_experiment(cfg: ExperimentConfig) -> list[RoundRecord]:
    return Simulation(cfg).run()
