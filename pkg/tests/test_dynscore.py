import itertools

import numpy as np
import pytest

from progen.dynscore import (PositionPolicy, ReinforceState, StageRecord, Trajectory, action_log_prob,
                             distill_scores, greedy_action, policy_loss, reinforce_update, rollout,
                             sample_action, subset_probability, train_policy, write_trajectory_log)
from progen.model import ModelConfig, ProgressiveModel
from progen.nncore import AdamW, Tensor, gradient_check
from progen.scheduler import MASK
from progen.vqtok import Tokenizer, VqConfig

MODEL_CFG = ModelConfig(layers=1, width=16, ff_width=32, heads=2, text_layers=1, text_width=16,
                        codebook_size=8, seq_len=64)
TEXT = np.array([[0, 4, 9, 14, 16], [3, 8, 13, 15, 17]])


def test_zero_policy_gives_uniform_scores():
    pol = PositionPolicy(5, 4)
    h = np.random.default_rng(0).normal(size=(6, 5))
    s = pol.score_positions(h, np.ones(6, bool), 1)
    assert (s == s[0]).all()


def test_unavailable_positions_never_finite():
    pol = PositionPolicy(3, 2)
    pol.w.data[:] = [1.0, -2.0, 0.5]
    avail = np.array([True, False, True, False])
    s = pol.score_positions(np.random.default_rng(1).normal(size=(4, 3)), avail, 1)
    assert np.isfinite(s).tolist() == avail.tolist()
    for seed in range(50):
        chosen, _ = sample_action(s, 2, np.random.default_rng(seed))
        assert set(chosen.tolist()) == {0, 2}


def test_sample_action_distinct_and_available():
    rng = np.random.default_rng(2)
    for _ in range(200):
        scores = rng.normal(size=16)
        scores[rng.random(16) < 0.4] = -np.inf
        n = int(np.isfinite(scores).sum())
        if n == 0:
            continue
        m = int(rng.integers(1, n + 1))
        chosen, _ = sample_action(scores, m, rng)
        assert len(set(chosen.tolist())) == m
        assert np.isfinite(scores[chosen]).all()


def test_sample_action_rejects_too_few():
    with pytest.raises(ValueError):
        sample_action(np.array([0.0, -np.inf, -np.inf]), 2, np.random.default_rng(0))


def test_dominant_score_always_included():
    scores = np.zeros(8)
    scores[5] = 30.0
    rng = np.random.default_rng(3)
    assert all(5 in sample_action(scores, 2, rng)[0] for _ in range(500))


def test_uniform_pairs_frequency():
    rng = np.random.default_rng(4)
    n = 60000
    counts = {}
    for _ in range(n):
        key = tuple(sorted(sample_action(np.zeros(4), 2, rng)[0].tolist()))
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    for c in counts.values():
        assert abs(c - n / 6) < 3 * sigma


def test_forced_action_log_prob_zero():
    scores = np.array([0.3, -np.inf, 1.2, 0.0])
    chosen, lp = sample_action(scores, 3, np.random.default_rng(0))
    assert sorted(chosen.tolist()) == [0, 2, 3] and lp == 0.0
    finite = np.where(np.isfinite(scores), scores, 0.0)
    assert action_log_prob(Tensor(finite), np.isfinite(scores), chosen).item() == 0.0


@pytest.mark.parametrize("L,m", [(4, 2), (5, 2), (6, 3), (6, 1)])
def test_subset_probabilities_sum_to_one(L, m):
    scores = np.random.default_rng(L * m).normal(size=L)
    total = sum(subset_probability(scores, s) for s in itertools.combinations(range(L), m))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_sequence_log_prob_matches_sampler():
    rng = np.random.default_rng(5)
    scores = rng.normal(size=7)
    scores[2] = -np.inf
    chosen, lp = sample_action(scores, 3, rng)
    got = action_log_prob(Tensor(np.where(np.isfinite(scores), scores, 0.0)), np.isfinite(scores), chosen)
    assert got.item() == pytest.approx(lp, abs=1e-12)


def test_greedy_action_ties_by_raster():
    assert greedy_action(np.array([1.0, 2.0, 2.0, -np.inf, 2.0]), 2).tolist() == [1, 2]


def test_policy_gradient_check():
    pol = PositionPolicy(4, 2)
    rng = np.random.default_rng(6)
    pol.w.data[:] = rng.normal(size=4)
    pol.stage.data[:] = rng.normal(size=(3, 4))
    h = rng.normal(size=(6, 4))
    avail = np.array([True, True, False, True, True, True])
    chosen = np.array([3, 0])
    f = lambda: action_log_prob(pol.score_tensor(h, 2), avail, chosen)  # noqa: E731
    assert gradient_check(f, pol.parameters()) < 1e-4


def _toy_trajectory(pol, hidden, rng, reward_fn):
    """L=4, T=2: choose 2 of 4, then the forced remaining 2."""
    avail = np.ones(4, bool)
    s1 = pol.score_positions(hidden, avail, 1)
    a1, lp1 = sample_action(s1, 2, rng)
    avail2 = avail.copy()
    avail2[a1] = False
    a2, lp2 = sample_action(pol.score_positions(hidden, avail2, 2), 2, rng)
    steps = [StageRecord(hidden, avail, a1, 1, lp1), StageRecord(hidden, avail2, a2, 2, lp2)]
    return Trajectory(steps, reward_fn(frozenset(a1.tolist())), np.zeros(4))


def _flat_grad(pol):
    return np.concatenate([p.grad.ravel() if p.grad is not None else np.zeros(p.data.size)
                           for p in pol.parameters()])


def test_constant_reward_equal_to_baseline_is_zero_update():
    pol = PositionPolicy(3, 2)
    pol.w.data[:] = [0.2, -0.1, 0.4]
    rng = np.random.default_rng(7)
    hidden = rng.normal(size=(4, 3))
    trajs = [_toy_trajectory(pol, hidden, rng, lambda s: 0.7) for _ in range(8)]
    before = [p.data.copy() for p in pol.parameters()]
    opt = AdamW(pol.parameters(), lr=0.1, weight_decay=0.0)
    state = ReinforceState(baseline=0.7, initialized=True)
    reinforce_update(pol, trajs, state, opt)
    assert (_flat_grad(pol) == 0).all()
    for b, p in zip(before, pol.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_estimator_matches_enumerated_gradient():
    rng = np.random.default_rng(8)
    pol = PositionPolicy(3, 2)
    pol.w.data[:] = rng.normal(size=3) * 0.5
    pol.stage.data[1] = rng.normal(size=3) * 0.5
    hidden = rng.normal(size=(4, 3))
    values = {frozenset(s): float(v) for s, v in zip(itertools.combinations(range(4), 2), rng.random(6))}
    params = pol.parameters()

    def expected_reward():
        s = pol.score_positions(hidden, np.ones(4, bool), 1)
        return sum(subset_probability(s, tuple(k)) * v for k, v in values.items())

    exact = []
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + 1e-6
            up = expected_reward()
            flat[i] = old - 1e-6
            down = expected_reward()
            flat[i] = old
            exact.append((up - down) / 2e-6)
    exact = np.array(exact)
    for baseline in (0.0, 0.5):
        samples = []
        for _ in range(10000):
            traj = _toy_trajectory(pol, hidden, rng, values.__getitem__)
            for p in params:
                p.grad = None
            (-1.0 * policy_loss(pol, [traj], baseline)).backward()
            samples.append(_flat_grad(pol))
        samples = np.array(samples)
        mean = samples.mean(axis=0)
        se = samples.std(axis=0) / np.sqrt(len(samples))
        live = se > 0
        assert (np.abs(mean - exact)[live] <= 3 * se[live]).all()
        assert (np.abs(mean - exact)[~live] < 1e-12).all()


def test_bandit_concentrates_on_rewarding_action():
    pol = PositionPolicy(4, 2)
    hidden = np.eye(4)
    good = frozenset({0, 1})
    rng = np.random.default_rng(9)
    opt = AdamW(pol.parameters(), lr=0.05, weight_decay=0.0)
    state = ReinforceState()
    init_var = pol.score_positions(hidden, np.ones(4, bool), 1).var()
    for _ in range(500):
        trajs = [_toy_trajectory(pol, hidden, rng, lambda s: float(s == good)) for _ in range(8)]
        reinforce_update(pol, trajs, state, opt)
    scores = pol.score_positions(hidden, np.ones(4, bool), 1)
    assert subset_probability(scores, (0, 1)) >= 0.9
    assert scores.var() > init_var


# ------------------------------------------------------------ with a model
@pytest.fixture(scope="module")
def gen():
    return ProgressiveModel(MODEL_CFG, seed=0)


@pytest.fixture(scope="module")
def tok():
    return Tokenizer(VqConfig(codebook_size=8, dim=8, channels=8), seed=0)


def test_rollout_bookkeeping_and_determinism(gen, tok):
    pol = PositionPolicy(16, 8)
    targets = np.zeros((2, 32, 32, 3))
    trajs = rollout(gen, pol, TEXT, 8, np.random.default_rng(0), tok, targets)
    for traj in trajs:
        assert len(traj.steps) == 8 and (traj.tokens != MASK).all()
        seen = set()
        for k, st in enumerate(traj.steps):
            assert st.available.sum() == 64 - 8 * k
            assert len(set(st.chosen.tolist()) & seen) == 0
            seen |= set(st.chosen.tolist())
        assert traj.reward <= 0
    g1 = rollout(gen, pol, TEXT, 8, np.random.default_rng(1), greedy=True)
    g2 = rollout(gen, pol, TEXT, 8, np.random.default_rng(2), greedy=True)
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(a.tokens, b.tokens)


def test_policy_training_leaves_generator_frozen(gen, tok, tmp_path):
    before = {k: v.copy() for k, v in gen.state_dict().items()}
    images = np.random.default_rng(3).random((4, 32, 32, 3))
    from progen.dynscore import PolicyConfig
    res = train_policy(gen, tok, np.concatenate([TEXT, TEXT]), images, PolicyConfig(T=8, updates=3, batch=2))
    for k, v in gen.state_dict().items():
        np.testing.assert_array_equal(before[k], v)
    assert len(res.rewards) == 3
    assert np.abs(res.policy.w.data).sum() > 0
    write_trajectory_log(tmp_path / "traj.csv", res.trajectory_log)
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "episode,stage,positions,reward" and len(lines) == 1 + 3 * 8
    scores = distill_scores(gen, res.policy, TEXT)
    assert scores.shape == (2, 64) and np.isfinite(scores).all()


def test_policy_checkpoint_roundtrip(tmp_path):
    pol = PositionPolicy(6, 4)
    pol.w.data[:] = np.arange(6)
    pol.save(tmp_path / "p.ckpt")
    back = PositionPolicy.load(tmp_path / "p.ckpt")
    np.testing.assert_array_equal(back.w.data, pol.w.data)
    assert back.stage.shape == (5, 6)
