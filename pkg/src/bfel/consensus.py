"""Proof-of-Verifying: delegate election, quality gating, cross-verification,
>2/3 commit rule, slashing and role rotation.

These are the protocol's decision functions. The message flow that drives
them round by round lives in :mod:`bfel.federation`.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .compression import aggregate_sparse
from .data import Dataset
from .errors import ConfigurationError, FederationHalt, ProtocolViolation
from .identity import Authority, Identity
from .messages import LocalUpdate, SlashRecord, VerifierResponse
from .model import ModelParameters, evaluate_accuracy, sgd_step

log = logging.getLogger(__name__)

STATUSES = ("candidate", "delegate", "leader", "verifier", "slashed")


@dataclass
class MinerState:
    identity: Identity
    deposit: int
    votes: int = 0
    status: str = "candidate"
    deviation_streak: int = 0

    @property
    def entity_id(self) -> str:
        return self.identity.entity_id

    @property
    def slashed(self) -> bool:
        return self.status == "slashed"


@dataclass(frozen=True)
class QualityPolicy:
    """Relative-drop gate: an update qualifies when applying it alone costs at
    most ``theta`` test accuracy against the current global model."""

    theta: float
    test_set: Dataset = field(repr=False)
    mode: str = "relative-drop"

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ConfigurationError("theta must lie in [0, 1]")
        if self.mode != "relative-drop":
            raise ConfigurationError(f"unsupported quality mode {self.mode!r}")


def register_identity(entity_id: str, role: str, authority: Authority) -> Identity:
    return authority.register(entity_id, role)


def tally_votes(worker_votes: Mapping[str, Iterable[str]]) -> Counter:
    counts: Counter = Counter()
    for ballot in worker_votes.values():
        for cand in set(ballot):
            counts[cand] += 1
    return counts


def _round_rng(seed: int, round: int) -> np.random.Generator:
    return np.random.default_rng([seed, round, 0x50F])


def elect_delegates(candidates: Sequence[MinerState], worker_votes: Mapping[str, Iterable[str]],
                    committee_size: int, min_deposit: int, seed: int) -> list[MinerState]:
    """Top ``committee_size`` candidates by votes (ties: ascending id).

    The returned list is in rank order. One delegate, drawn with the seeded
    generator, is made leader; the rest become verifiers.
    """
    eligible = [c for c in candidates if not c.slashed and c.deposit >= min_deposit]
    if committee_size < 1 or len(eligible) < committee_size:
        raise ConfigurationError(
            f"need {committee_size} candidates with deposit >= {min_deposit}, "
            f"have {len(eligible)}")
    counts = tally_votes(worker_votes)
    for c in eligible:
        c.votes = counts.get(c.entity_id, 0)
    ranked = sorted(eligible, key=lambda c: (-c.votes, c.entity_id))[:committee_size]
    leader = int(_round_rng(seed, 0).integers(len(ranked)))
    for i, c in enumerate(ranked):
        c.status = "leader" if i == leader else "verifier"
    return ranked


def rotate_roles(committee: Sequence[MinerState], seed: int, round: int) -> list[MinerState]:
    """Pick this round's leader among unslashed delegates; deterministic in (seed, round).

    Rounds are grouped into cycles of ``len(active)``; each cycle follows a
    fresh seeded permutation, so the next leader is unpredictable but every
    delegate leads once per cycle.
    """
    active = [m for m in committee if not m.slashed]
    if not active:
        raise FederationHalt("every delegate has been slashed; the committee is empty")
    cycle, pos = divmod(round, len(active))
    leader = int(_round_rng(seed, cycle).permutation(len(active))[pos])
    for i, m in enumerate(active):
        m.status = "leader" if i == leader else "verifier"
    return active


def leader_of(committee: Sequence[MinerState]) -> MinerState:
    leaders = [m for m in committee if m.status == "leader"]
    if len(leaders) != 1:
        raise ProtocolViolation(f"committee has {len(leaders)} leaders")
    return leaders[0]


def verifiers_of(committee: Sequence[MinerState]) -> list[MinerState]:
    return [m for m in committee if m.status == "verifier"]


def evaluate_update(update: LocalUpdate, global_model: ModelParameters, policy: QualityPolicy,
                    lr: float, authority: Authority | None = None,
                    current_round: int | None = None,
                    base_accuracy: float | None = None) -> tuple[bool, float]:
    """Apply the update alone to the global model and score it on the test set.

    Raises ProtocolViolation for a bad signature or a stale round; the caller
    discards such updates.
    """
    if authority is not None and not update.verify(authority):
        raise ProtocolViolation(f"invalid signature on update from {update.worker_id!r}")
    if current_round is not None and update.round != current_round:
        raise ProtocolViolation(
            f"update for round {update.round} received in round {current_round}")
    if base_accuracy is None:
        base_accuracy = evaluate_accuracy(global_model, policy.test_set)
    candidate = sgd_step(global_model, update.sparse_gradient.to_dense(), lr)
    acc = evaluate_accuracy(candidate, policy.test_set)
    return acc >= base_accuracy - policy.theta, acc


@dataclass
class CrossVerification:
    tallies: dict[str, int]
    disagreement: dict[str, int]
    responses: list[VerifierResponse]
    equivocators: list[str]
    rejected: list[VerifierResponse]


def cross_verify(responses: Iterable[VerifierResponse], update_ids: Iterable[str],
                 authority: Authority | None = None, round: int | None = None) -> CrossVerification:
    """Approval tally per update and pairwise disagreement per verifier.

    Unsigned, wrong-round and exact-duplicate responses are ignored. Two
    different signed responses from one verifier are equivocation: both are
    dropped and the verifier is reported.
    """
    update_ids = sorted(set(update_ids))
    seen: dict[str, VerifierResponse] = {}
    equivocators: set[str] = set()
    rejected = []
    for r in responses:
        if (authority is not None and not r.verify(authority)) or \
                (round is not None and r.round != round):
            rejected.append(r)
            continue
        prev = seen.get(r.verifier_id)
        if prev is None:
            seen[r.verifier_id] = r
        elif prev.body() != r.body():
            equivocators.add(r.verifier_id)
    accepted = [r for vid, r in sorted(seen.items()) if vid not in equivocators]
    tallies = {uid: sum(uid in r.qualified_set for r in accepted) for uid in update_ids}
    bits = {r.verifier_id: np.array([uid in r.qualified_set for uid in update_ids], dtype=bool)
            for r in accepted}
    disagreement = {vid: int(sum(np.count_nonzero(b != other) for pid, other in bits.items()
                                 if pid != vid))
                    for vid, b in bits.items()}
    return CrossVerification(tallies, disagreement, accepted, sorted(equivocators), rejected)


def majority_set(tallies: Mapping[str, int], n_verifiers: int) -> frozenset[str]:
    """Updates approved by a strict majority of the verifier set."""
    return frozenset(uid for uid, c in tallies.items() if 2 * c > n_verifiers)


def commits(approving: int, n_verifiers: int) -> bool:
    """Strictly more than two thirds of the verifiers (leader excluded)."""
    return 3 * approving > 2 * n_verifiers


@dataclass
class RoundOutcome:
    committed: bool
    qualified: frozenset[str]
    approving: int
    n_verifiers: int
    updates: tuple[LocalUpdate, ...] = ()
    responses: tuple[VerifierResponse, ...] = ()


def assemble_and_commit(proposer: MinerState, committee: Sequence[MinerState],
                        verification: CrossVerification, updates: Mapping[str, LocalUpdate],
                        votes: Mapping[str, frozenset[str] | None],
                        proposal: frozenset[str] | None = None) -> RoundOutcome:
    """Leader assembles the pending block and the verifiers vote on it.

    ``votes`` maps each verifier to the qualified set it endorses (``None``
    for a verifier that did not vote). A verifier approves when its set equals
    the proposal. ``proposal`` overrides the honest majority set, which is how
    a faulty leader proposes something else. A proposer that is not the
    current leader is a protocol violation.
    """
    leader = leader_of(committee)
    if proposer.entity_id != leader.entity_id:
        raise ProtocolViolation(f"{proposer.entity_id!r} proposed a block but "
                                f"{leader.entity_id!r} leads this round")
    n = len(verifiers_of(committee))
    pending = majority_set(verification.tallies, n) if proposal is None else proposal
    approving = sum(1 for v in verifiers_of(committee) if votes.get(v.entity_id) == pending)
    ok = commits(approving, n)
    chosen = tuple(updates[uid] for uid in sorted(pending) if uid in updates)
    return RoundOutcome(ok, pending, approving, n, chosen, tuple(verification.responses))


def slash(miner: MinerState, reason: str, round: int) -> tuple[MinerState, SlashRecord | None]:
    """Confiscate the deposit and eject the miner. Idempotent."""
    if miner.slashed:
        return miner, None
    record = SlashRecord(miner.entity_id, round, reason, miner.deposit)
    log.info("slashing %s in round %d: %s", miner.entity_id, round, reason)
    miner.deposit = 0
    miner.status = "slashed"
    return miner, record


def compute_global_update(updates: Sequence[LocalUpdate], global_model: ModelParameters,
                          lr: float) -> tuple[ModelParameters, np.ndarray | None]:
    """Average the qualified sparse updates and take one SGD step.

    Returns the new model and the averaged dense gradient (None when there
    were no qualified updates and the model is unchanged).
    """
    if not updates:
        log.info("round with no qualified updates; global model unchanged")
        return global_model, None
    avg = aggregate_sparse([u.sparse_gradient for u in updates], global_model.dim) / len(updates)
    return sgd_step(global_model, avg, lr), avg
