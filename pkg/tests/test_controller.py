import math

import numpy as np
import pytest
from scipy.stats import chisquare

from shufflenas import genotype as gt
from shufflenas.controller import (
    HIDDEN,
    Controller,
    ControllerConfig,
    decisions_to_genotype,
    genotype_to_decisions,
    reward_of,
)
from shufflenas.ops import NUM_OPS, OperationId as Op
from shufflenas.supernet import ModelConfig, build_supernet
from shufflenas.tensor import Tensor


def bandit_run(seed, updates=500, B=5, samples=10):
    """Reward 1 iff the first normal block uses SEP3; returns the final SEP3 sampling rate."""
    ctl = Controller(ControllerConfig(B=B), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for _ in range(updates):
        drawn = ctl.sample(rng, samples)
        for g, trace in drawn:
            trace.reward = float(g.normal.blocks[0].op is Op.SEP3)
        ctl.reinforce_update([t for _, t in drawn])
    final = ctl.sample(rng, 1000)
    return float(np.mean([g.normal.blocks[0].op is Op.SEP3 for g, _ in final]))


def test_shapes_and_defaults():
    ctl = Controller()
    assert ctl.config.hidden == HIDDEN == 100
    assert ctl.registry.params["ctrl/head/op/w"].shape == (100, NUM_OPS) == (100, 6)
    g, trace = ctl.sample_one(np.random.default_rng(0))
    assert len(trace.decisions) == 4 * 5
    assert all(lp <= 0 for lp in trace.log_probs)


def test_decision_round_trip(rng):
    for B in (1, 3, 8):
        g = gt.random_genotype(rng, B)
        assert decisions_to_genotype(genotype_to_decisions(g), B) == g


def test_samples_always_valid():
    ctl = Controller(ControllerConfig(B=4), seed=1)
    for g, _ in ctl.sample(np.random.default_rng(1), 1000):
        assert gt.is_valid(g.normal) and gt.is_valid(g.reduction)


def test_masked_indices_have_zero_probability(rng):
    ctl = Controller(ControllerConfig(B=4), seed=2)
    for p in ctl.registry.params.values():
        p.data = p.data + 0.5 * rng.standard_normal(p.shape)
    g, trace = ctl.sample_one(rng)
    dists = ctl.distributions(g)
    assert len(dists) == 4 * 4
    for step, probs in enumerate(dists):
        cell_step = step % 8
        if cell_step % 2 == 0:
            pos = cell_step // 2 + 1
            assert np.all(probs[0, pos:] == 0.0)
            assert np.all(probs[0, :pos] > 0)
        assert math.isclose(probs.sum(), 1.0, rel_tol=1e-12)
    # block 1 has one legal index: probability exactly 1, log-probability exactly 0
    assert trace.log_probs[0] == 0.0 and trace.log_probs[2 * 4] == 0.0


def test_entropy_bounded_by_choice_count(rng):
    ctl = Controller(ControllerConfig(B=3), seed=3)
    for p in ctl.registry.params.values():
        p.data = p.data + rng.standard_normal(p.shape)
    _, trace = ctl.sample_one(rng)
    for step, ent in enumerate(trace.entropies):
        cell_step = step % 6
        choices = cell_step // 2 + 1 if cell_step % 2 == 0 else NUM_OPS
        assert -1e-12 <= ent <= math.log(choices) + 1e-12


def test_untrained_op_frequencies_uniform():
    ctl = Controller(ControllerConfig(B=1), seed=4)
    drawn = ctl.sample(np.random.default_rng(4), 3000)
    ops = [int(b.op) for g, _ in drawn for c in g.cells() for b in c.blocks]
    assert len(ops) == 6000
    assert chisquare(np.bincount(ops, minlength=NUM_OPS)).pvalue > 0.01


def test_log_prob_matches_sampling_trace():
    ctl = Controller(ControllerConfig(B=3), seed=5)
    drawn = ctl.sample(np.random.default_rng(5), 4)
    scored = ctl.log_prob([g for g, _ in drawn])
    np.testing.assert_allclose(scored, [t.log_prob for _, t in drawn], rtol=0, atol=1e-12)


def test_zero_advantage_without_entropy_is_bit_identical():
    ctl = Controller(ControllerConfig(B=3, entropy_weight=0.0), seed=6)
    ctl.baseline = 0.5
    drawn = ctl.sample(np.random.default_rng(6), 5)
    for _, t in drawn:
        t.reward = 0.5
    before = {k: v.copy() for k, v in ctl.state_arrays().items() if k.startswith("ctrl/") and k != "ctrl/baseline"}
    ctl.reinforce_update([t for _, t in drawn])
    for k, v in before.items():
        assert np.array_equal(ctl.registry.params[k].data, v), k
    assert ctl.baseline == 0.5


def test_baseline_moving_average():
    ctl = Controller(ControllerConfig(B=2), seed=7)
    drawn = ctl.sample(np.random.default_rng(7), 2)
    drawn[0][1].reward, drawn[1][1].reward = 1.0, 0.0
    ctl.reinforce_update([t for _, t in drawn])
    assert ctl.baseline == pytest.approx(0.01 * 0.5, abs=1e-15)


def test_positive_advantage_raises_probability():
    ctl = Controller(ControllerConfig(B=3, lr=1e-2), seed=8)
    g, trace = ctl.sample_one(np.random.default_rng(8))
    trace.reward = 1.0
    before = ctl.log_prob([g])[0]
    ctl.reinforce_update([trace])
    assert ctl.log_prob([g])[0] > before


def test_update_rejects_missing_rewards():
    ctl = Controller(ControllerConfig(B=2))
    _, trace = ctl.sample_one(np.random.default_rng(0))
    with pytest.raises(ValueError, match="reward"):
        ctl.reinforce_update([trace])
    with pytest.raises(ValueError):
        ctl.reinforce_update([])


def test_state_arrays_round_trip():
    a = Controller(ControllerConfig(B=2), seed=9)
    drawn = a.sample(np.random.default_rng(9), 3)
    for _, t in drawn:
        t.reward = 1.0
    a.reinforce_update([t for _, t in drawn])
    b = Controller(ControllerConfig(B=2), seed=10)
    b.load_state_arrays(a.state_arrays())
    assert b.baseline == a.baseline
    g1, t1 = a.sample_one(np.random.default_rng(11))
    g2, t2 = b.sample_one(np.random.default_rng(11))
    assert g1 == g2 and t1.log_probs == t2.log_probs


@pytest.mark.slow
def test_bandit_reaches_ninety_percent():
    rates = [bandit_run(seed) for seed in range(3)]
    assert sum(r >= 0.9 for r in rates) >= 2, rates


# -- reward ---------------------------------------------------------------------


class _Fixed:
    """Stand-in model returning preset logits."""

    def __init__(self, logits):
        self.logits = logits

    def forward(self, x, g, training=False):
        return Tensor(self.logits[: len(x)])


def test_reward_examples(rng):
    labels = rng.integers(0, 10, 64)
    perfect = np.eye(10)[labels]
    assert reward_of(_Fixed(perfect), None, np.zeros((64, 1)), labels) == 1.0
    perm = rng.permutation(64)
    assert reward_of(_Fixed(perfect[perm]), None, np.zeros((64, 1)), labels[perm]) == 1.0
    with pytest.raises(ValueError):
        reward_of(_Fixed(perfect), None, np.zeros((0, 1)), labels[:0])


def test_random_logits_reward_near_chance(rng):
    n = 20000
    labels = rng.integers(0, 10, n)
    r = reward_of(_Fixed(rng.standard_normal((n, 10))), None, np.zeros((n, 1)), labels)
    assert abs(r - 0.1) < 4 * math.sqrt(0.09 / n)


def test_reward_on_supernet_in_unit_interval(rng):
    net = build_supernet(ModelConfig(B=2, N=1, filters=8))
    g = gt.random_genotype(rng, 2)
    x = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
    r = reward_of(net, g, x, rng.integers(0, 10, 8))
    assert 0.0 <= r <= 1.0 and r * 8 == int(r * 8)
