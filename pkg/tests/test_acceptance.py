"""Acceptance criteria, one test each, at the stated tolerances.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line (also repeated in the
pytest terminal summary). All runs use synthetic blobs because the MNIST files
are not available offline; see the README.
"""

import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from bfel.config import preset
from bfel.experiment import run_experiment, verify_artifacts
from bfel.federation import Federation, prepare_task
from bfel.ledger import anchors_on, verify_anchor
from bfel.model import gradient, sgd_step

RESULTS: list[str] = []
ROOT = Path(__file__).resolve().parent.parent


def desk(**overrides):
    cfg = preset("desk").with_overrides(**{"training.dataset.source": "synthetic"})
    return cfg.with_overrides(**overrides) if overrides else cfg


def verdict(capsys, number, title, ok, detail, started):
    line = (f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'} {title}: {detail} "
            f"[{time.time() - started:.1f}s]")
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def test_1_dense_equivalence(capsys):
    t0 = time.time()
    cfg = desk(rounds=50, **{"compression.rho": 100, "compression.momentum": 0.0,
                             "compression.clip_norm": None})
    fed = Federation(cfg, keep_trajectory=True)
    fed.run()
    # independent plain synchronous SGD over the same batches
    data = prepare_task(cfg, 0)
    samplers = data.samplers(cfg.training.batch_size)
    model, worst = data.initial_model, 0.0
    for values in fed.tasks[0].trajectory:
        g = sum(gradient(model, s.next()) for s in samplers) / len(samplers)
        model = sgd_step(model, g, cfg.training.learning_rate)
        worst = max(worst, float(np.max(np.abs(values - model.values))))
    elapsed = time.time() - t0
    ok = (len(fed.tasks[0].trajectory) == 50 and len(fed.tasks[0].workers) == 10
          and worst <= 1e-12 and elapsed < 10)
    verdict(capsys, 1, "dense BFEL == plain SGD", ok,
            f"max |diff| = {worst:.2e} over 50 rounds (tol 1e-12), runtime < 10 s", t0)


def test_2_compression_ratio(capsys):
    t0 = time.time()
    res = run_experiment(desk(rounds=60))
    s = res.summary
    rows_ok = all(abs(r.exposure_ratio * r.compression_ratio - 1) <= 1e-12 for r in res.metrics)
    ok = (s["model_parameters"] >= 10_000 and s["compression_ratio"] >= 300
          and abs(s["exposure_ratio"] - 1 / s["compression_ratio"]) <= 1e-12 and rows_ok
          and time.time() - t0 < 120)
    verdict(capsys, 2, "compression ratio at rho=0.3", ok,
            f"{s['model_parameters']} parameters, ratio {s['compression_ratio']:.2f} (>= 300), "
            f"|exposure - 1/ratio| = {abs(s['exposure_ratio'] - 1 / s['compression_ratio']):.1e}", t0)


def test_3_accuracy_trend(capsys):
    t0 = time.time()
    rhos = [0.1, 0.3, 1, 100]
    acc = {}
    for rho in rhos:
        cfg = desk(rho=rho)
        assert cfg.training.epochs == 100
        acc[rho] = run_experiment(cfg).summary["final_accuracy"]
    monotone = all(acc[b] >= acc[a] - 0.01 for a, b in zip(rhos, rhos[1:]))
    gap = acc[100] - acc[0.3]
    ok = monotone and gap <= 0.03 and time.time() - t0 < 900
    table = ", ".join(f"rho={r}: {acc[r]:.4f}" for r in rhos)
    verdict(capsys, 3, "accuracy trend over rho (E=100)", ok,
            f"{table}; non-decreasing within 1pp: {monotone}; gap(0.3 vs 100) = {100 * gap:.2f}pp (<= 3)",
            t0)


def test_4_communication_reduction(capsys):
    t0 = time.time()
    fel = run_experiment(desk(rounds=100, scenario="fel")).summary
    gcs = run_experiment(desk(rounds=100, scenario="fel-gcs")).summary
    byte_cut = 1 - gcs["total_bytes"] / fel["total_bytes"]
    time_cut = 1 - gcs["simulated_time_ms"] / fel["simulated_time_ms"]
    ok = byte_cut >= 0.5 and time_cut >= 0.5 and time.time() - t0 < 300
    verdict(capsys, 4, "GCS communication reduction", ok,
            f"bytes {fel['total_bytes']} -> {gcs['total_bytes']} (-{100 * byte_cut:.1f}%), "
            f"time {fel['simulated_time_ms']} -> {gcs['simulated_time_ms']} ms (-{100 * time_cut:.1f}%)",
            t0)


def test_5_consensus_overhead(capsys):
    t0 = time.time()
    rounds = 60
    fel = run_experiment(desk(rounds=rounds, scenario="fel-gcs")).summary
    bfel = run_experiment(desk(rounds=rounds)).summary
    expected = fel["simulated_time_ms"] + rounds * 500
    ok = bfel["simulated_time_ms"] == expected and bfel["failed_rounds"] == 0
    verdict(capsys, 5, "consensus overhead", ok,
            f"BFEL {bfel['simulated_time_ms']} ms = FEL-GCS {fel['simulated_time_ms']} ms "
            f"+ {rounds} x 500 ms ({expected})", t0)


def test_6_poisoning_defense(capsys):
    t0 = time.time()
    leaks, pov_gap, fel_drop = 0, [], []
    for seed in range(20):
        base = preset("poisoning").with_overrides(seed=seed)
        assert base.attack.poison_fraction == 0.3 and base.theta == 0.05
        clean = base.with_overrides(**{"attack.poison_fraction": 0.0})
        fed = Federation(base)
        fed.run()
        rt = fed.tasks[0]
        for block in rt.chain.blocks[1:]:
            p = block.payload
            if p.round >= base.attack.start_round:
                leaks += len(p.update_ids & rt.poisoners)
        attacked = np.mean([r.global_test_accuracy for r in fed.metrics[-1:]])
        ref = run_experiment(clean).summary["final_accuracy"]
        pov_gap.append(ref - attacked)
        fel_clean = run_experiment(clean.with_overrides(scenario="fel")).summary["final_accuracy"]
        fel_bad = run_experiment(base.with_overrides(scenario="fel")).summary["final_accuracy"]
        fel_drop.append(fel_clean - fel_bad)
    ok = (leaks == 0 and max(abs(g) for g in pov_gap) <= 0.02 and min(fel_drop) > 0.10
          and time.time() - t0 < 1200)
    verdict(capsys, 6, "poisoning defense over 20 seeds", ok,
            f"poisoned updates committed: {leaks}; worst |PoV - clean| = {100 * max(map(abs, pov_gap)):.2f}pp "
            f"(<= 2); smallest FEL drop = {100 * min(fel_drop):.1f}pp (> 10)", t0)


def test_7_byzantine_safety(capsys):
    t0 = time.time()
    problems = []
    slash_rounds = []
    for seed in range(3):
        cfg = preset("byzantine").with_overrides(seed=seed)
        fed = Federation(cfg)
        fed.run()
        rt = fed.tasks[0]
        bad = fed.fault_script.byzantine()
        if len(rt.committee) + len(bad) != 11 or len(bad) != (11 - 1) // 3:
            problems.append(f"seed {seed}: committee shape")
        # oracle 1: each committed set equals the honest verdict of that round
        if any(q != h for _, q, h in rt.committed_sets):
            problems.append(f"seed {seed}: committed set differs from honest verdicts")
        # oracle 2: an all-honest run of the same seed commits the same sets
        honest = Federation(cfg.with_overrides(**{"attack.byzantine_fraction": 0.0}))
        honest.run()
        mine = [(r, q) for r, q, _ in rt.committed_sets]
        theirs = [(r, q) for r, q, _ in honest.tasks[0].committed_sets]
        if mine != theirs:
            problems.append(f"seed {seed}: differs from all-honest run")
        slashed = {s.miner_id: s.round for b in rt.chain.blocks[1:] for s in b.payload.slashes}
        if set(slashed) != bad or max(slashed.values()) > 10:
            problems.append(f"seed {seed}: slashed {slashed}, byzantine {sorted(bad)}")
        slash_rounds.append(max(slashed.values(), default=0))
        if len(rt.committed_sets) != 100:
            problems.append(f"seed {seed}: {len(rt.committed_sets)} committed rounds")
    ok = not problems and time.time() - t0 < 300
    verdict(capsys, 7, "Byzantine safety, 3 of 10 verifiers inverting", ok,
            f"100 rounds x 3 seeds, committed sets == honest oracle; all 3 slashed by round "
            f"{max(slash_rounds)} (<= 10)" + (f"; problems: {problems}" if problems else ""), t0)


def test_8_ledger_integrity(capsys, tmp_path):
    t0 = time.time()
    run = tmp_path / "run"
    res = run_experiment(desk(rounds=12), run)
    clean = verify_artifacts(run)
    fed = res.federation
    anchors_ok = all(verify_anchor(a, next(c for c in fed.chains if c.chain_id == a.subchain_id))
                     for a in anchors_on(fed.main))
    chains = sorted((run / "chains").glob("*.chain"))
    originals = {p: p.read_bytes() for p in chains}
    sizes = np.array([len(originals[p]) for p in chains], dtype=float)
    rng = np.random.default_rng(2024)
    detected = 0
    for _ in range(1000):
        p = chains[int(rng.choice(len(chains), p=sizes / sizes.sum()))]
        raw = bytearray(originals[p])
        bit = int(rng.integers(len(raw) * 8))
        raw[bit // 8] ^= 1 << (bit % 8)
        p.write_bytes(bytes(raw))
        detected += not verify_artifacts(run).ok
        p.write_bytes(originals[p])
    ok = clean.ok and anchors_ok and detected == 1000 and time.time() - t0 < 60
    verdict(capsys, 8, "ledger integrity", ok,
            f"clean run verifies: {clean.ok}, anchors verify: {anchors_ok}, "
            f"bit-flip tampers detected {detected}/1000", t0)


PROPERTY_SUITES = [
    "tests/test_model.py::test_gradient_matches_finite_differences",
    "tests/test_model.py::test_gradient_finite_difference_property",
    "tests/test_compression.py::test_residual_conservation",
    "tests/test_ledger.py::test_seven_leaves_match_reference_and_frozen_root",
    "tests/test_ledger.py::test_random_leaf_sets_match_reference",
    "tests/test_consensus.py::test_commit_threshold_boundaries",
    "tests/test_experiment.py::test_run_dir_layout_and_replay",
    "tests/test_netsim.py::test_replay_gives_identical_trace_digest",
]


def test_9_property_suites_standalone(capsys):
    t0 = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *PROPERTY_SUITES], cwd=ROOT, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(capsys, 9, "property suites standalone", proc.returncode == 0,
            f"finite-difference, residual conservation, Merkle reference, commit boundaries, "
            f"replay determinism: {tail}", t0)
