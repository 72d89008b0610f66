import numpy as np
import pytest

from bfel.adversary import (AttackConfig, FaultRule, FaultScript, exposure_ratio, pick_nodes,
                            poison_gradient, poison_update)
from bfel.compression import CompressionConfig, CompressorState, SparseGradient, compress
from bfel.data import make_blobs, train_test_split
from bfel.errors import ConfigurationError
from bfel.model import ModelSpec, evaluate_accuracy, gradient, init_model, sgd_step


def test_sign_flip_is_an_involution(rng):
    g = rng.normal(size=20)
    assert np.array_equal(poison_gradient(poison_gradient(g, "sign-flip"), "sign-flip"), g)


def test_zero_noise_leaves_gradient(rng):
    g = rng.normal(size=20)
    assert np.array_equal(poison_gradient(g, "gaussian-noise", seed=1, sigma=0.0), g)
    noisy = poison_gradient(g, "gaussian-noise", seed=1, sigma=1.0)
    assert np.array_equal(noisy, poison_gradient(g, "gaussian-noise", seed=1, sigma=1.0))
    assert not np.array_equal(noisy, g)


def test_sign_flip_hurts_against_clean_step():
    ds = make_blobs(1500, 10, 3, seed=8)
    train, test = train_test_split(ds, 0.7, seed=8)
    model = init_model(ModelSpec(10, 3, hidden=16), seed=8)
    for _ in range(30):
        model = sgd_step(model, gradient(model, train), 0.5)
    g = gradient(model, train)
    clean = evaluate_accuracy(sgd_step(model, g, 5.0), test)
    flipped = evaluate_accuracy(sgd_step(model, poison_gradient(g, "sign-flip"), 5.0), test)
    assert flipped < clean


def test_poison_update_scales_sparse_values():
    s = SparseGradient([1, 4], [0.5, -1.0], 6, 3)
    p = poison_update(s, AttackConfig(poison_fraction=0.3, poison_scale=10), seed=0)
    assert p.entries == [(1, -5.0), (4, 10.0)] and p.round == 3


def test_pick_nodes_uses_floor_and_seed():
    ids = [f"w{i}" for i in range(10)]
    assert len(pick_nodes(ids, 0.3, 1, 0)) == 3
    assert len(pick_nodes(ids, 0.35, 1, 0)) == 3
    assert pick_nodes(ids, 0.3, 1, 0) == pick_nodes(ids, 0.3, 1, 0)
    assert pick_nodes(ids, 0.0, 1, 0) == []


def test_exposure_dense_and_compressed(rng):
    dense = [SparseGradient.from_dense(rng.normal(size=1000), r) for r in range(4)]
    assert exposure_ratio(dense, 1000) == 1.0
    cfg = CompressionConfig(rho_percent=0.3, momentum=0.0, clip_norm=None)
    state, sent = CompressorState.fresh(10_000), []
    for _ in range(5):
        s, state = compress(state, rng.normal(size=10_000), cfg)
        sent.append(s)
    assert exposure_ratio(sent, 10_000) == pytest.approx(0.003)


def test_fault_script_rules_and_yaml(tmp_path):
    path = tmp_path / "faults.yaml"
    path.write_text("default: honest\nrules:\n"
                    "  - {miner: t1.m03, directive: invert-verdicts}\n"
                    "  - {miner: t1.m05, directive: withhold, rounds: [10, 20]}\n")
    fs = FaultScript.load(path)
    assert fs.directive("t1.m03", 1) == "invert-verdicts"
    assert fs.directive("t1.m05", 9) == "honest"
    assert fs.directive("t1.m05", 15) == "withhold"
    assert fs.directive("t1.m05", 21) == "honest"
    assert fs.byzantine() == {"t1.m03", "t1.m05"}
    assert FaultScript.from_dict(fs.to_dict()).to_dict() == fs.to_dict()
    with pytest.raises(ConfigurationError):
        FaultScript([FaultRule("x", "explode")])


def test_attack_config_validation():
    with pytest.raises(ConfigurationError):
        AttackConfig(poison_fraction=1.5)
    with pytest.raises(ConfigurationError):
        AttackConfig(poison_mode="backdoor")
