"""End-to-end federation: workers, aggregator or PoV committee, chains, event loop.

Three scenarios share the worker side:

* ``fel``      workers send raw dense gradients to a central aggregator;
* ``fel-gcs``  workers compress (clip, momentum correction, top-rho%) first;
* ``bfel-gcs`` compressed updates go to the nearest committee miner and the
               PoV committee decides what enters the training subchain.

Rounds are synchronous within a task; tasks (training subchains) run side by
side on one event loop and never touch each other's state.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import consensus as pov
from .adversary import FaultRule, FaultScript, pick_nodes, poison_update
from .compression import CompressorState, SparseGradient, compress
from .config import ExperimentConfig
from .consensus import MinerState, QualityPolicy
from .data import (BatchSampler, Dataset, find_mnist, flip_labels, iid_shards, load_csv,
                   load_mnist, make_blobs, train_test_split)
from .encoding import digest
from .errors import ConfigurationError, FederationHalt, ProtocolViolation
from .identity import Authority
from .ledger import (Chain, TrainingPayload, anchor_to_main, anchors_on, append_block,
                     record_trade)
from .messages import LocalUpdate, TradeRecord, VerifierResponse
from .model import ModelParameters, ModelSpec, evaluate_accuracy, gradient, init_model, sgd_step
from .netsim import Simulator

log = logging.getLogger(__name__)

MAIN_RECORDER = "main.recorder"
TRADE_RECORDER = "market.recorder"

METRIC_COLUMNS = ("task", "round", "status", "global_test_accuracy", "bytes_this_round",
                  "cumulative_bytes", "compression_ratio", "exposure_ratio", "qualified_count",
                  "slashed_count", "simulated_time_ms")


def sub_seed(seed: int, *tags) -> int:
    """Independent, reproducible stream seed for a named purpose."""
    words = [seed] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def model_digest(model: ModelParameters) -> bytes:
    return digest(model.values.astype("<f8").tobytes())


@dataclass
class MetricsRow:
    task: str
    round: int
    status: str
    global_test_accuracy: float
    bytes_this_round: int
    cumulative_bytes: int
    compression_ratio: float
    exposure_ratio: float
    qualified_count: int
    slashed_count: int
    simulated_time_ms: int

    def as_tuple(self):
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


# -- data preparation -------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig, task_index: int = 0) -> Dataset:
    d = cfg.training.dataset
    source = d.source
    if source == "auto":
        source = "mnist" if d.path and find_mnist(d.path) else "synthetic"
    if source == "mnist":
        found = find_mnist(d.path or ".")
        if found is None:
            raise ConfigurationError(f"no MNIST IDX files under {d.path!r}")
        return load_mnist(*found, limit=d.samples)
    if source == "csv":
        if not d.path:
            raise ConfigurationError("csv dataset needs a path")
        return load_csv(d.path)
    return make_blobs(d.samples, d.dim, d.num_classes, sub_seed(cfg.seed, "data", task_index),
                      separation=d.separation, noise=d.noise)


@dataclass
class TaskData:
    name: str
    spec: ModelSpec
    initial_model: ModelParameters
    shards: list[Dataset]
    test_set: Dataset
    sampler_seeds: list[int]
    rounds: int

    def samplers(self, batch_size: int) -> list[BatchSampler]:
        return [BatchSampler(s, batch_size, seed) for s, seed in zip(self.shards, self.sampler_seeds)]


def prepare_task(cfg: ExperimentConfig, task_index: int, dataset: Dataset | None = None) -> TaskData:
    """Deterministic data split, sharding, initial model and round count for one task."""
    name = f"t{task_index + 1}"
    ds = dataset if dataset is not None else load_dataset(cfg, task_index)
    train, test = train_test_split(ds, cfg.training.dataset.train_fraction,
                                   sub_seed(cfg.seed, "split", task_index))
    n = cfg.federation.workers_per_task
    shards = iid_shards(train, n, sub_seed(cfg.seed, "shard", task_index))
    spec = ModelSpec(ds.dim, ds.num_classes, cfg.training.hidden, cfg.training.model_kind)
    model = init_model(spec, sub_seed(cfg.seed, "init", task_index))
    b = cfg.training.batch_size
    if b > min(len(s) for s in shards):
        raise ConfigurationError(f"batch size {b} exceeds the smallest shard "
                                 f"({min(len(s) for s in shards)} samples)")
    rounds = cfg.rounds or cfg.training.epochs * min(len(s) // b for s in shards)
    seeds = [sub_seed(cfg.seed, "batches", task_index, k) for k in range(n)]
    return TaskData(name, spec, model, shards, test, seeds, rounds)


# -- per-task runtime ---------------------------------------------------------------

@dataclass
class TaskRuntime:
    data: TaskData
    workers: list[str]
    samplers: list[BatchSampler]
    states: list[CompressorState]
    poisoners: set[str]
    model: ModelParameters
    policy: QualityPolicy
    aggregator: str | None = None
    miners: list[MinerState] = field(default_factory=list)
    committee: list[MinerState] = field(default_factory=list)
    standby: list[MinerState] = field(default_factory=list)
    chain: Chain | None = None
    round: int = 0
    attempts: int = 0  # consensus attempts so far; drives leader rotation
    pending_slashes: list = field(default_factory=list)
    # per-round scratch
    inbox: dict = field(default_factory=dict)
    arrivals: int = 0
    delivered: int = 0
    round_bytes: int = 0
    qualified: int = 0
    status: str = ""
    # cumulative accounting
    cumulative_bytes: int = 0
    sent_entries: int = 0
    sent_updates: int = 0
    slashed: int = 0
    leaked_poison: int = 0
    committed_sets: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    done: bool = False

    @property
    def name(self) -> str:
        return self.data.name


def _ring_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


class Federation:
    """One experiment run. ``run()`` returns the metrics; artifacts are kept on the object."""

    def __init__(self, cfg: ExperimentConfig, keep_trajectory: bool = False):
        if cfg.scenario not in ("fel", "fel-gcs", "bfel-gcs"):
            raise ConfigurationError(f"unknown scenario {cfg.scenario!r}")
        self.cfg = cfg
        self.bfel = cfg.scenario == "bfel-gcs"
        self.keep_trajectory = keep_trajectory
        self.authority = Authority(cfg.seed)
        self.sim = Simulator(cfg.cost_model, sub_seed(cfg.seed, "jitter"))
        self.metrics: list[MetricsRow] = []
        self.tasks: list[TaskRuntime] = []
        self.main: Chain | None = None
        self.trading: Chain | None = None
        self.trades: list[TradeRecord] = []
        self.halt: str | None = None
        self.fault_script = self._fault_script_from_config()
        self._build()

    # -- setup --------------------------------------------------------------------

    def _fault_script_from_config(self) -> FaultScript | None:
        fs = self.cfg.fault_script
        if fs is None:
            return None
        if isinstance(fs, str):
            return FaultScript.load(fs)
        return FaultScript.from_dict(fs)

    def _build(self) -> None:
        cfg, fed = self.cfg, self.cfg.federation
        reg = self.authority.register
        publishers = []
        for t in range(fed.tasks):
            data = prepare_task(cfg, t)
            name = data.name
            workers = [f"{name}.w{k:02d}" for k in range(fed.workers_per_task)]
            for w in workers:
                reg(w, "worker")
            publisher = reg(f"{name}.publisher", "publisher").entity_id
            publishers.append(publisher)
            poisoners = set(pick_nodes(workers, cfg.attack.poison_fraction, cfg.attack_seed,
                                       zlib.crc32(f"poison-{name}".encode())))
            rt = TaskRuntime(
                data=data, workers=workers, samplers=data.samplers(cfg.training.batch_size),
                states=[CompressorState.fresh(data.spec.dim) for _ in workers],
                poisoners=poisoners, model=data.initial_model,
                policy=QualityPolicy(cfg.theta, data.test_set))
            if self.bfel:
                self._build_committee(rt, publisher)
            else:
                rt.aggregator = reg(f"{name}.aggregator", "miner").entity_id
            self.tasks.append(rt)
        if self.bfel:
            reg(MAIN_RECORDER, "recorder")
            reg(TRADE_RECORDER, "recorder")
            buyers = [reg(f"market.buyer{b}", "buyer").entity_id for b in range(fed.buyers)]
            self.main = Chain.create("main", "main", [], self.authority.signer(MAIN_RECORDER))
            self.main.writer = MAIN_RECORDER
            self.trading = Chain.create("trading", "trading", publishers + buyers + [TRADE_RECORDER],
                                        self.authority.signer(TRADE_RECORDER))
            self.trading.writer = TRADE_RECORDER
        for rt in self.tasks:
            for w in rt.workers:
                self.sim.register(w, self._on_worker_message)
            if rt.aggregator:
                self.sim.register(rt.aggregator, self._on_aggregator_message)
            for m in rt.miners:
                self.sim.register(m.entity_id, self._on_miner_message)

    def _build_committee(self, rt: TaskRuntime, publisher: str) -> None:
        cfg, fed = self.cfg, self.cfg.federation
        n_cand = fed.miners_per_task + fed.standby_miners
        ids = [f"{rt.name}.m{j:02d}" for j in range(n_cand)]
        rt.miners = [MinerState(self.authority.register(m, "miner"), fed.deposit) for m in ids]
        # each worker votes for the committee_size candidates closest to it on a ring
        pos_w = {w: k / len(rt.workers) for k, w in enumerate(rt.workers)}
        pos_m = {m: j / fed.miners_per_task for j, m in enumerate(ids[:fed.miners_per_task])}
        for j, m in enumerate(ids[fed.miners_per_task:]):
            pos_m[m] = 0.5 / fed.miners_per_task + j / max(1, fed.standby_miners)
        self._positions = getattr(self, "_positions", {})
        self._positions.update(pos_w)
        self._positions.update(pos_m)
        ballots = {w: sorted(ids, key=lambda m: (_ring_distance(pos_w[w], pos_m[m]), m))
                   [:fed.miners_per_task] for w in rt.workers}
        # standby candidates only collect votes from workers that rank them in range
        rt.committee = pov.elect_delegates(rt.miners, ballots, fed.miners_per_task,
                                           fed.min_deposit, sub_seed(cfg.seed, "leader", rt.name))
        chosen = {m.entity_id for m in rt.committee}
        rt.standby = sorted((m for m in rt.miners if m.entity_id not in chosen),
                            key=lambda m: (-m.votes, m.entity_id))
        for m in rt.standby:
            m.status = "candidate"
        if len(rt.committee) < 2:
            raise ConfigurationError("a PoV committee needs a leader and at least one verifier")
        acl = [publisher] + rt.workers + ids
        rt.chain = Chain.create(rt.name, "training", acl, self.authority.signer(publisher))
        if cfg.fault_script is None and cfg.attack.byzantine_fraction > 0:
            self._byzantine_script(rt)

    def _byzantine_script(self, rt: TaskRuntime) -> None:
        """Script the configured Byzantine fraction of this task's verifier count."""
        n_verifiers = len(rt.committee) - 1
        count = int(np.floor(self.cfg.attack.byzantine_fraction * n_verifiers + 1e-9))
        ids = [m.entity_id for m in rt.committee]
        rng = np.random.default_rng(sub_seed(self.cfg.attack_seed, "byzantine", rt.name))
        bad = sorted(ids[i] for i in rng.choice(len(ids), size=count, replace=False))
        rules = [FaultRule(m, self.cfg.attack.byzantine_directive) for m in bad]
        if self.fault_script is None:
            self.fault_script = FaultScript(rules)
        else:
            self.fault_script.rules.extend(rules)

    def directive(self, miner: str, round: int) -> str:
        return "honest" if self.fault_script is None else self.fault_script.directive(miner, round)

    # -- messaging helpers ---------------------------------------------------------------

    def _send(self, rt: TaskRuntime, src: str, dst: str, msg_type: str, message, size: int,
              link: str = "edge") -> None:
        self.sim.send(src, dst, msg_type, message, size, link)
        rt.round_bytes += size
        rt.cumulative_bytes += size

    def _task_of(self, node: str) -> TaskRuntime:
        prefix = node.split(".", 1)[0]
        for rt in self.tasks:
            if rt.name == prefix:
                return rt
        raise KeyError(node)

    def nearest_miner(self, rt: TaskRuntime, worker: str) -> str:
        active = [m.entity_id for m in rt.committee if not m.slashed]
        p = self._positions[worker]
        return min(active, key=lambda m: (_ring_distance(p, self._positions[m]), m))

    # -- round flow ---------------------------------------------------------------------

    def _start_round(self, rt: TaskRuntime) -> None:
        if rt.round >= rt.data.rounds or self.halt:
            rt.done = True
            return
        rt.round += 1
        rt.inbox, rt.arrivals, rt.delivered, rt.round_bytes, rt.qualified = {}, 0, 0, 0, 0
        r, cfg = rt.round, self.cfg
        for k, w in enumerate(rt.workers):
            batch = rt.samplers[k].next()
            attacking = w in rt.poisoners and r >= cfg.attack.start_round
            if attacking and cfg.attack.poison_mode == "label-flip":
                batch = flip_labels(batch)
            g = gradient(rt.model, batch)
            if cfg.scenario == "fel":
                sparse = SparseGradient.from_dense(g, r)
            else:
                sparse, rt.states[k] = compress(rt.states[k], g, cfg.compression)
                sparse = SparseGradient(sparse.indices, sparse.values, sparse.dim, r)
            if attacking and cfg.attack.poison_mode != "label-flip":
                sparse = poison_update(sparse, cfg.attack, sub_seed(cfg.attack_seed, "noise", w, r))
            rt.sent_entries += len(sparse)
            rt.sent_updates += 1
            update = LocalUpdate(w, r, sparse, self.sim.now).signed(self.authority.signer(w))
            dst = rt.aggregator if rt.aggregator else self.nearest_miner(rt, w)
            self._send(rt, w, dst, "update", update, len(update.encode()))

    def _on_aggregator_message(self, sim: Simulator, ev) -> None:
        rt = self._task_of(ev.dst)
        update: LocalUpdate = ev.message
        rt.arrivals += 1
        if not update.verify(self.authority) or update.round != rt.round:
            log.warning("aggregator %s dropped an invalid update from %s", ev.dst, ev.src)
        else:
            rt.inbox[update.worker_id] = update
        if rt.arrivals == len(rt.workers):
            updates = [rt.inbox[w] for w in sorted(rt.inbox)]
            rt.model, avg = pov.compute_global_update(updates, rt.model, self.cfg.training.learning_rate)
            rt.qualified, rt.status = len(updates), "aggregated"
            rt.leaked_poison += self._poisoned_count(rt, updates)
            self._broadcast_global(rt, avg, lambda w: rt.aggregator)

    def _poisoned_count(self, rt: TaskRuntime, updates) -> int:
        if rt.round < self.cfg.attack.start_round:
            return 0
        return sum(u.worker_id in rt.poisoners for u in updates)

    def _broadcast_global(self, rt: TaskRuntime, avg, source) -> None:
        down = (SparseGradient.from_dense(avg, rt.round) if avg is not None
                else SparseGradient(np.zeros(0, dtype=np.int64), np.zeros(0), rt.data.spec.dim, rt.round))
        size = len(down.encode())
        for w in rt.workers:
            self._send(rt, source(w), w, "global", down, size)

    def _on_worker_message(self, sim: Simulator, ev) -> None:
        if ev.msg_type != "global":
            return
        rt = self._task_of(ev.dst)
        rt.delivered += 1
        if rt.delivered == len(rt.workers):
            self._finish_round(rt)

    def _finish_round(self, rt: TaskRuntime) -> None:
        acc = evaluate_accuracy(rt.model, rt.data.test_set)
        ratio = rt.data.spec.dim * rt.sent_updates / rt.sent_entries if rt.sent_entries else float("inf")
        exposure = rt.sent_entries / (rt.data.spec.dim * rt.sent_updates)
        self.metrics.append(MetricsRow(rt.name, rt.round, rt.status, acc, rt.round_bytes,
                                       rt.cumulative_bytes, ratio, exposure, rt.qualified,
                                       rt.slashed, self.sim.now))
        if self.keep_trajectory:
            rt.trajectory.append(rt.model.values.copy())
        self._start_round(rt)

    # -- PoV -------------------------------------------------------------------------------

    def _on_miner_message(self, sim: Simulator, ev) -> None:
        if ev.msg_type == "commit-timer":
            self._conclude(*ev.message)
            return
        if ev.msg_type != "update":
            return  # committee traffic is accounted for but acted on synchronously
        rt = self._task_of(ev.dst)
        update: LocalUpdate = ev.message
        rt.arrivals += 1
        rt.inbox[update.worker_id] = update
        for m in rt.committee:
            if m.entity_id != ev.dst and not m.slashed:
                self._send(rt, ev.dst, m.entity_id, "forward", update, len(update.encode()),
                           link="committee")
        if rt.arrivals == len(rt.workers):
            self._consensus_attempt(rt, attempt=1)

    def _honest_verdicts(self, rt: TaskRuntime) -> tuple[dict, frozenset]:
        """Every honest verifier computes the same verdicts, so score each update once."""
        lr = self.cfg.training.learning_rate
        base = evaluate_accuracy(rt.model, rt.policy.test_set)
        valid, qualified = {}, set()
        for wid in sorted(rt.inbox):
            u = rt.inbox[wid]
            try:
                ok, _ = pov.evaluate_update(u, rt.model, rt.policy, lr, self.authority,
                                            rt.round, base_accuracy=base)
            except ProtocolViolation as exc:
                log.warning("discarding update: %s", exc)
                continue
            valid[wid] = u
            if ok:
                qualified.add(wid)
        return valid, frozenset(qualified)

    def _consensus_attempt(self, rt: TaskRuntime, attempt: int) -> None:
        r, fed = rt.round, self.cfg.federation
        committee = pov.rotate_roles(rt.committee, sub_seed(self.cfg.seed, "rotate", rt.name),
                                     rt.attempts)
        rt.attempts += 1
        leader = pov.leader_of(committee)
        verifiers = pov.verifiers_of(committee)
        rt.chain.writer = leader.entity_id
        if attempt == 1:
            rt.valid, rt.honest_set = self._honest_verdicts(rt)
        valid, honest = rt.valid, rt.honest_set
        all_ids = frozenset(valid)
        now = self.sim.now

        def own_set(v: str) -> frozenset | None:
            d = self.directive(v, r)
            if d == "invert-verdicts":
                return all_ids - honest
            if d == "withhold":
                return None
            return honest

        verdicts = {v.entity_id: own_set(v.entity_id) for v in verifiers}
        for v in verifiers:
            if verdicts[v.entity_id] is None:
                continue
            msg = VerifierResponse(v.entity_id, r, verdicts[v.entity_id], (), now).signed(
                self.authority.signer(v.entity_id))
            for p in verifiers:
                if p is not v:
                    self._send(rt, v.entity_id, p.entity_id, "verdict", msg, len(msg.encode()),
                               link="committee")
        responses = []
        for v in verifiers:
            vid, mine = v.entity_id, verdicts[v.entity_id]
            if mine is None:
                continue
            comparison = tuple((p, verdicts[p] == mine) for p in sorted(verdicts)
                               if p != vid and verdicts[p] is not None)
            signer = self.authority.signer(vid)
            batch = [VerifierResponse(vid, r, mine, comparison, now).signed(signer)]
            if self.directive(vid, r) == "equivocate":
                batch.append(VerifierResponse(vid, r, all_ids - mine, comparison, now).signed(signer))
            for resp in batch:
                responses.append(resp)
                self._send(rt, vid, leader.entity_id, "response", resp, len(resp.encode()),
                           link="committee")
        check = pov.cross_verify(responses, all_ids, self.authority, r)
        majority = pov.majority_set(check.tallies, len(verifiers))
        leader_directive = self.directive(leader.entity_id, r)
        if leader_directive == "withhold":
            proposal = None
        elif leader_directive == "invert-verdicts":
            proposal = all_ids - majority
        else:
            proposal = majority
        slashes = []
        outcome = None
        if proposal is not None:
            votes = {}
            for v in verifiers:
                if verdicts[v.entity_id] is not None and v.entity_id not in check.equivocators:
                    votes[v.entity_id] = verdicts[v.entity_id]
            outcome = pov.assemble_and_commit(leader, committee, check, valid, votes, proposal)
            pending = TrainingPayload(r, outcome.updates, outcome.responses)
            size = len(b"".join(pending.leaves()))
            for v in verifiers:
                self._send(rt, leader.entity_id, v.entity_id, "pending", None, size,
                           link="committee")
            for vid in votes:
                self._send(rt, vid, leader.entity_id, "vote", None, 80, link="committee")
            if proposal != majority:
                slashes.append(pov.slash(leader, "invalid block proposal", r)[1])
        for vid in check.equivocators:
            slashes.append(pov.slash(self._miner(rt, vid), "equivocation", r)[1])
        for v in verifiers:
            if v.slashed:
                continue
            mine = verdicts[v.entity_id]
            if mine is None or mine != majority:
                v.deviation_streak += 1
            else:
                v.deviation_streak = 0
            if v.deviation_streak >= fed.slash_after:
                slashes.append(pov.slash(v, "false verification", r)[1])
        slashes = [s for s in slashes if s is not None]
        rt.slashed += len(slashes)
        rt.pending_slashes.extend(slashes)
        self._refill(rt)
        committed = outcome is not None and outcome.committed
        self.sim.timer(self.sim.now + self.cfg.cost_model.consensus_delay_ms, leader.entity_id,
                       "commit-timer", (rt.name, attempt, committed, outcome, leader.entity_id))

    def _miner(self, rt: TaskRuntime, mid: str) -> MinerState:
        return next(m for m in rt.miners if m.entity_id == mid)

    def _refill(self, rt: TaskRuntime) -> None:
        rt.committee = [m for m in rt.committee if not m.slashed]
        while len(rt.committee) < self.cfg.federation.miners_per_task and rt.standby:
            m = rt.standby.pop(0)
            m.status = "verifier"
            rt.committee.append(m)
        if len(rt.committee) < 2:
            raise FederationHalt(f"task {rt.name}: {len(rt.committee)} delegate(s) left, "
                                 "no block can reach the commit threshold")

    def _conclude(self, task: str, attempt: int, committed: bool, outcome, leader_id: str) -> None:
        rt = next(t for t in self.tasks if t.name == task)
        lr = self.cfg.training.learning_rate
        members = [m.entity_id for m in rt.committee if m.entity_id != leader_id]
        if committed:
            new_model, avg = pov.compute_global_update(outcome.updates, rt.model, lr)
            payload = TrainingPayload(rt.round, outcome.updates, outcome.responses,
                                      tuple(rt.pending_slashes), model_digest(new_model))
            leader = self.authority.signer(leader_id)
            rt.chain.writer = leader_id
            append_block(rt.chain, payload, leader, self.sim.now)
            rt.pending_slashes = []
            for m in members:
                self._send(rt, leader_id, m, "block", None, len(rt.chain.head.encode()),
                           link="committee")
            rt.model = new_model
            rt.qualified, rt.status = len(outcome.updates), "committed"
            rt.committed_sets.append((rt.round, outcome.qualified, rt.honest_set))
            rt.leaked_poison += self._poisoned_count(rt, outcome.updates)
            self._maybe_anchor(rt)
            self._broadcast_global(rt, avg, lambda w: self.nearest_miner(rt, w))
            return
        for m in members:
            self._send(rt, leader_id, m, "abort", None, 48, link="committee")
        if attempt == 1 and self.cfg.federation.retry_failed_round:
            self._consensus_attempt(rt, attempt=2)
            return
        log.info("task %s round %d dropped after %d attempts", rt.name, rt.round, attempt)
        rt.qualified, rt.status = 0, "failed"
        self._broadcast_global(rt, None, lambda w: self.nearest_miner(rt, w))

    def _maybe_anchor(self, rt: TaskRuntime, period: int | None = None) -> None:
        period = period or self.cfg.federation.anchor_period
        done = anchors_on(self.main, rt.chain.chain_id)
        start = done[-1].to_height + 1 if done else 1
        if rt.chain.height - start + 1 >= period:
            anchor_to_main(rt.chain, self.main, period, self.authority.signer(MAIN_RECORDER),
                           self.sim.now, address=f"chains/{rt.chain.chain_id}.chain")

    # -- driver --------------------------------------------------------------------------

    def run(self) -> list[MetricsRow]:
        for rt in self.tasks:
            self._start_round(rt)
        try:
            self.sim.run_until()
        except FederationHalt as exc:
            self.halt = str(exc)
            log.error("federation halted: %s", exc)
        if self.bfel:
            self._finalize_chains()
        return self.metrics

    def _finalize_chains(self) -> None:
        now = self.sim.now
        for rt in self.tasks:
            self._maybe_anchor(rt, period=1)
        buyers = sorted(e.entity_id for e in self.authority.identities if e.role == "buyer")
        if buyers:
            for rt in self.tasks:
                if rt.chain.height == 0:
                    continue
                seller = f"{rt.name}.publisher"
                trade = TradeRecord(seller, buyers[0], rt.chain.head.payload.model_digest,
                                    self.cfg.federation.trade_price, now)
                trade = trade.signed_by(self.authority.signer(seller))
                trade = trade.signed_by(self.authority.signer(buyers[0]))
                record_trade(trade, self.trading, self.main, [t.chain for t in self.tasks],
                             self.authority, self.authority.signer(TRADE_RECORDER), now)
                self.trades.append(trade)
        if self.trading.height >= 1:
            anchor_to_main(self.trading, self.main, 1, self.authority.signer(MAIN_RECORDER), now,
                           address="chains/trading.chain")

    @property
    def chains(self) -> list[Chain]:
        if not self.bfel:
            return []
        return [rt.chain for rt in self.tasks] + [self.trading, self.main]
