import numpy as np
import pytest

from bfel.federation import Federation, prepare_task
from bfel.ledger import anchors_on, validate_chain, verify_anchor
from bfel.model import gradient, sgd_step
from bfel.netsim import communication_cost

from conftest import small_config


def run(cfg, **kw):
    fed = Federation(cfg, **kw)
    fed.run()
    return fed


def test_bfel_run_produces_valid_chains_and_anchors():
    fed = run(small_config())
    rt = fed.tasks[0]
    assert [r.round for r in fed.metrics] == list(range(1, 9))
    assert all(r.status == "committed" and r.qualified_count == 4 for r in fed.metrics)
    for chain in fed.chains:
        assert validate_chain(chain, fed.authority) is None
    ranges = [(a.from_height, a.to_height) for a in anchors_on(fed.main, "t1")]
    assert ranges == [(1, 3), (4, 6), (7, 8)]
    assert all(verify_anchor(a, rt.chain) for a in anchors_on(fed.main, "t1"))
    assert fed.trading.height == 1 and len(fed.trades) == 1


def test_dense_bfel_equals_plain_sgd():
    cfg = small_config(**{"compression.rho": 100, "compression.momentum": 0.0,
                          "compression.clip_norm": None})
    fed = run(cfg, keep_trajectory=True)
    data = prepare_task(cfg, 0)
    samplers = data.samplers(cfg.training.batch_size)
    model = data.initial_model
    for values in fed.tasks[0].trajectory:
        g = sum(gradient(model, s.next()) for s in samplers) / len(samplers)
        model = sgd_step(model, g, cfg.training.learning_rate)
        assert np.max(np.abs(values - model.values)) <= 1e-12


def test_fel_gcs_matches_fel_when_compression_is_dense():
    dense = {"compression.rho": 100, "compression.momentum": 0.0, "compression.clip_norm": None}
    a = run(small_config(scenario="fel", **dense))
    b = run(small_config(scenario="fel-gcs", **dense))
    assert [r.global_test_accuracy for r in a.metrics] == [r.global_test_accuracy for r in b.metrics]
    assert np.array_equal(a.tasks[0].model.values, b.tasks[0].model.values)


def test_consensus_adds_exactly_the_fixed_delay_per_round():
    fel = run(small_config(scenario="fel-gcs"))
    bfel = run(small_config())
    assert bfel.sim.now == fel.sim.now + 8 * 500
    edge = lambda f: [(r.time_ms, r.size_bytes) for r in f.sim.trace if r.msg_type in ("update", "global")]
    assert sum(s for _, s in edge(bfel)) == sum(s for _, s in edge(fel))
    assert communication_cost(bfel.sim.trace, bfel.cfg.cost_model, consensus=True).total_time_ms == bfel.sim.now


def test_two_tasks_are_isolated():
    fed = run(small_config(**{"federation.tasks": 2}))
    assert {r.task for r in fed.metrics} == {"t1", "t2"}
    t1, t2 = fed.tasks
    assert not (set(t1.chain.access_list) & set(t2.workers))
    assert fed.trading.height == 2


def _byz(directive, rounds=8, miners=5):
    cfg = small_config(rounds=rounds, **{"federation.miners_per_task": miners})
    script = {"rules": [{"miner": "t1.m02", "directive": directive}]}
    return run(cfg.with_overrides(**{"attack.fault_script": script}))


@pytest.mark.parametrize("directive", ["invert-verdicts", "withhold"])
def test_deviating_verifier_is_slashed_and_sets_stay_honest(directive):
    fed = _byz(directive)
    rt = fed.tasks[0]
    m2 = next(m for m in rt.miners if m.entity_id == "t1.m02")
    assert m2.slashed and m2.deposit == 0
    slashes = [s for b in rt.chain.blocks[1:] for s in b.payload.slashes]
    assert [s.miner_id for s in slashes] == ["t1.m02"]
    assert slashes[0].round <= 3
    assert all(q == h for _, q, h in rt.committed_sets)
    assert all(r.status == "committed" for r in fed.metrics)


def test_equivocation_is_slashed_at_once():
    fed = _byz("equivocate")
    slashes = [s for b in fed.tasks[0].chain.blocks[1:] for s in b.payload.slashes]
    assert [(s.miner_id, s.round, s.reason) for s in slashes] == [("t1.m02", 1, "equivocation")]


def test_committee_collapse_halts_with_cause():
    cfg = small_config(**{"federation.miners_per_task": 3})
    script = {"rules": [{"miner": f"t1.m0{i}", "directive": "equivocate"} for i in range(3)]}
    fed = run(cfg.with_overrides(**{"attack.fault_script": script}))
    assert fed.halt and "delegate" in fed.halt


def test_standby_miner_refills_committee():
    cfg = small_config(**{"federation.miners_per_task": 5, "federation.standby_miners": 1})
    script = {"rules": [{"miner": "t1.m01", "directive": "equivocate"}]}
    fed = run(cfg.with_overrides(**{"attack.fault_script": script}))
    rt = fed.tasks[0]
    assert len(rt.committee) == 5
    assert "t1.m05" in {m.entity_id for m in rt.committee}


def test_poisoned_updates_are_kept_out():
    cfg = small_config(rounds=12, **{"attack.poison_fraction": 0.5, "attack.poison_scale": 200,
                                     "attack.start_round": 4})
    fed = run(cfg)
    rt = fed.tasks[0]
    assert len(rt.poisoners) == 2
    for b in rt.chain.blocks[1:]:
        p = b.payload
        if p.round >= 4:
            assert not (p.update_ids & rt.poisoners)
    assert rt.leaked_poison == 0
