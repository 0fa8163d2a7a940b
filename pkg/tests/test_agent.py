import numpy as np
import pytest
import torch
from scipy import stats

from tracebalance.agent.dqn import AgentConfig, Learner, QNetwork, act, learn_step, load_network
from tracebalance.agent.replay import NStepAccumulator, PrioritizedReplayBuffer, ReplayBuffer, SumTree
from tracebalance.agent.train import TrainConfig, evaluate, make_sampler, summarize, train
from tracebalance.pipeline import categorize
from tracebalance.prioritization import DynamicConfig
from tracebalance.tracebench.generator import build_dataset, build_scenario

EYE3 = np.eye(3, dtype=np.float32)


def fixed_q(values):
    """Network with no hidden layers that outputs ``values`` for every input."""
    net = QNetwork(3, len(values), hidden=())
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.copy_(torch.tensor(values, dtype=torch.float32))
    return net


def test_act_greedy_and_ties():
    rng = np.random.default_rng(0)
    assert act(EYE3[0], fixed_q([1.0, 3.0, 2.0]), 0.0, rng) == 1
    assert act(EYE3[0], fixed_q([2.0, 2.0, 1.0]), 0.0, rng) == 0
    np.testing.assert_array_equal(act(EYE3, fixed_q([1.0, 3.0, 2.0]), 0.0, rng), [1, 1, 1])


def test_act_full_exploration_is_uniform():
    rng = np.random.default_rng(1)
    acts = [act(EYE3[0], fixed_q([0.0, 9.0, 0.0]), 1.0, rng) for _ in range(6000)]
    counts = np.bincount(acts, minlength=3)
    assert stats.chisquare(counts).pvalue > 0.01


def test_act_rejects_wrong_shape():
    with pytest.raises(ValueError):
        act(np.zeros(4), fixed_q([0.0, 1.0]), 0.0, np.random.default_rng(0))


def test_epsilon_schedule():
    cfg = AgentConfig(eps_schedule=(1.0, 0.1, 100))
    assert cfg.epsilon(0) == 1.0 and cfg.epsilon(50) == pytest.approx(0.55) and cfg.epsilon(10**6) == pytest.approx(0.1)


def test_replay_fifo_eviction():
    buf = ReplayBuffer(3, 1, 1, 0.9)
    for i in range(5):
        buf.add([i], 0, [float(i)], [i + 1], False)
    assert len(buf) == 3
    assert sorted(buf.insert_ids.tolist()) == [2, 3, 4]
    assert sorted(buf.obs[:, 0].tolist()) == [2.0, 3.0, 4.0]


def test_nstep_transitions_resum_exactly():
    rng = np.random.default_rng(2)
    n, gamma = 7, 0.975
    rewards = rng.normal(size=30)
    acc = NStepAccumulator(n)
    buf = ReplayBuffer(100, 1, n, gamma)
    for t, r in enumerate(rewards):
        done = t == len(rewards) - 1
        for tr in acc.push([t], 0, r, [t + 1], done):
            buf.add(*tr)
    assert len(buf) == len(rewards)
    for i in range(len(buf)):
        t = int(buf.obs[i, 0])
        steps = min(n, len(rewards) - t)
        expected = sum(gamma ** k * rewards[t + k] for k in range(steps))
        assert buf.returns[i] == pytest.approx(expected, abs=1e-9)
        assert buf.next_obs[i, 0] == t + steps
        terminal = t + steps == len(rewards)
        assert buf.discounts[i] == (0.0 if terminal else pytest.approx(gamma ** n))


def test_sumtree_find():
    tree = SumTree(5)
    for i, v in enumerate([1.0, 0.0, 3.0, 2.0, 4.0]):
        tree.set(i, v)
    assert tree.total == 10.0
    assert [tree.find(m) for m in (0.5, 1.0, 3.9, 4.0, 5.9, 6.0, 9.99)] == [0, 2, 2, 3, 3, 4, 4]


def test_per_high_priority_dominates():
    buf = PrioritizedReplayBuffer(64, 1, 1, 0.9, alpha=1.0, eta=1e-3)
    for i in range(64):
        buf.add([i], 0, [0.0], [i], False)
    buf.update_priorities(np.arange(64), np.r_[100.0, np.zeros(63)])
    rng = np.random.default_rng(0)
    idx = np.concatenate([buf.sample(32, rng, 0.4)[0] for _ in range(100)])
    assert np.mean(idx == 0) > 0.9


def test_per_new_entries_get_max_priority_and_weights_normalized():
    buf = PrioritizedReplayBuffer(8, 1, 1, 0.9)
    for i in range(4):
        buf.add([i], 0, [0.0], [i], False)
    buf.update_priorities(np.arange(4), np.array([5.0, 1.0, 1.0, 1.0]))
    i = buf.add([9], 0, [0.0], [9], False)
    assert buf.priorities()[i] == buf.priorities().max()
    _, w = buf.sample(16, np.random.default_rng(0), 0.4)
    assert w.max() == pytest.approx(1.0) and w.min() > 0


def test_target_changes_only_at_sync():
    cfg = AgentConfig(n_step=1, batch_size=8, replay_capacity=64, target_sync_interval=5, hidden_sizes=(16,))
    learner = Learner(3, 2, cfg)
    for k in range(32):
        learner.store(EYE3[k % 3], k % 2, [1.0], EYE3[(k + 1) % 3], False)

    def target_params():
        return torch.cat([p.flatten() for p in learner.target.parameters()]).clone()
    before = target_params()
    for step in range(1, 11):
        learner.learn()
        now = target_params()
        if step % 5:
            assert torch.equal(now, before)
        else:
            online = torch.cat([p.flatten() for p in learner.online.parameters()])
            assert torch.equal(now, online) and not torch.equal(now, before)
        before = now
    assert learner.syncs == 2


def test_learn_needs_a_full_batch():
    learner = Learner(3, 2, AgentConfig(batch_size=8, replay_capacity=16))
    learner.store(EYE3[0], 0, [1.0], EYE3[1], False)
    assert learner.learn() is None and learner.updates == 0


def chain_step(s, a):
    """Three-state chain: action 1 moves right and pays 1 on leaving the last state."""
    if a == 1:
        return (s + 1, 0.0, False) if s < 2 else (s, 1.0, True)
    return 0, 0.0, False


def chain_value_iteration(gamma):
    q = np.zeros((3, 2))
    for _ in range(500):
        new = np.zeros_like(q)
        for s in range(3):
            for a in range(2):
                n, r, d = chain_step(s, a)
                new[s, a] = r + (0.0 if d else gamma * q[n].max())
        q = new
    return q


@pytest.mark.parametrize("variant", [{}, {"double": True}, {"dueling": True}, {"prioritized": True}])
def test_learner_matches_value_iteration_on_chain(variant):
    gamma = 0.9
    cfg = AgentConfig(n_step=1, gamma=gamma, lr=1e-3, batch_size=32, replay_capacity=600,
                      target_sync_interval=50, hidden_sizes=(32, 32), normalize_rewards=False, **variant)
    learner = Learner(3, 2, cfg)
    for _ in range(100):
        for s in range(3):
            for a in range(2):
                n, r, d = chain_step(s, a)
                learner.store(EYE3[s], a, [r], EYE3[n], d)
    for i in range(2000):
        learner.learn(i / 2000)
    err = np.abs(learner.online.q_values(EYE3) - chain_value_iteration(gamma)).max()
    assert err < 1e-2


def test_zero_rewards_drive_q_to_zero():
    cfg = AgentConfig(n_step=1, gamma=0.9, lr=1e-3, batch_size=32, replay_capacity=300,
                      target_sync_interval=50, hidden_sizes=(32,))
    learner = Learner(3, 2, cfg)
    for k in range(300):
        learner.store(EYE3[k % 3], k % 2, [0.0], EYE3[(k + 1) % 3], k % 7 == 0)
    for _ in range(1500):
        learner.learn()
    assert np.abs(learner.online.q_values(EYE3)).max() < 1e-2


def test_learn_step_returns_td_errors():
    cfg = AgentConfig(n_step=1, batch_size=4, replay_capacity=8, hidden_sizes=(8,))
    learner = Learner(3, 2, cfg)
    for k in range(8):
        learner.store(EYE3[k % 3], k % 2, [1.0], EYE3[0], True)
    td = learn_step(learner.replay, learner.online, learner.target, learner.optimizer, cfg,
                    np.random.default_rng(0))
    assert td.shape == (4,) and np.all(np.isfinite(td))


def test_checkpoint_roundtrip(tmp_path):
    learner = Learner(3, 2, AgentConfig(hidden_sizes=(8,), dueling=True))
    path = tmp_path / "q.pt"
    learner.save(path)
    net = load_network(path)
    np.testing.assert_array_equal(net.q_values(EYE3), learner.online.q_values(EYE3))
    torch.save({"kind": "other"}, path)
    with pytest.raises(ValueError):
        load_network(path)


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(n_step=0)
    with pytest.raises(ValueError):
        AgentConfig(replay_capacity=10, batch_size=64)
    with pytest.raises(ValueError):
        TrainConfig(sampler="greedy")


SMALL = dict(total_steps=2400, learning_starts=400, eval_every=1200)
TINY_AGENT = AgentConfig(hidden_sizes=(32,), batch_size=16, replay_capacity=2000, eps_schedule=(1.0, 0.1, 1000))


@pytest.fixture(scope="module")
def small_scenario():
    return build_scenario(1, 24, 12, seed=0)


def test_zero_steps_is_the_untrained_network(small_scenario):
    train_ds, test_ds = small_scenario
    res = train(train_ds, test_ds, cfg=TrainConfig(total_steps=0), agent=TINY_AGENT)
    fresh = Learner(41, 3, TINY_AGENT).online
    assert res.metrics == [{"step": 0, "episodes": 0, "updates": 0,
                            **summarize(evaluate(fresh, test_ds), test_ds), "weights_version": 0}]


def test_training_is_deterministic(small_scenario):
    train_ds, test_ds = small_scenario
    a = train(train_ds, test_ds, cfg=TrainConfig(**SMALL), agent=TINY_AGENT)
    b = train(train_ds, test_ds, cfg=TrainConfig(**SMALL), agent=TINY_AGENT)
    assert a.metrics == b.metrics and a.episodes == b.episodes
    assert [m["step"] for m in a.metrics] == [0, 1200, 2400]
    assert a.learner.updates == (2400 - 400) // 4


def test_training_never_uses_held_out_traces(small_scenario):
    train_ds, test_ds = small_scenario
    res = train(train_ds, test_ds, cfg=TrainConfig(**SMALL, sampler="two_class"), agent=TINY_AGENT)
    assert {e[0] for e in res.episodes} <= set(train_ds.ids)
    with pytest.raises(ValueError, match="overlap"):
        train(train_ds, train_ds, cfg=TrainConfig(total_steps=0), agent=TINY_AGENT)


def test_dynamic_sampler_trains_and_publishes(small_scenario):
    train_ds, test_ds = small_scenario
    cats = categorize(train_ds, seed=0, k_range=(2, 4), seeds_per_k=2)
    cfg = TrainConfig(total_steps=4000, learning_starts=400, eval_every=4000, sampler="plume_dynamic",
                      dynamic=DynamicConfig(update_every=4, window=16, cold_start_updates=2, batch_size=8))
    res = train(train_ds, test_ds, cats, cfg, TINY_AGENT)
    assert res.sampler.board.snapshot().version >= 5
    assert res.final["weights_version"] == res.sampler.board.snapshot().version


def test_plume_static_draws_categories_uniformly():
    ds = build_dataset("majority_fast", 80, seed=1)
    cats = categorize(ds, seed=1, k_range=(3, 5), seeds_per_k=2)
    sampler = make_sampler("plume_static", ds, cats, TrainConfig(), seed=0)
    draws = [cats.dist.category_of(sampler.sample()) for _ in range(8000)]
    counts = np.array([draws.count(c) for c in cats.dist.categories])
    assert stats.chisquare(counts).pvalue > 0.01


def test_lb_environment_trains():
    from tracebalance.tracebench.lb import lb_generate
    from tracebalance.traces import TraceDataset
    train_ds = TraceDataset("lb-train", tuple(lb_generate(s, n_jobs=60, trace_id=f"tr{s}") for s in range(4)))
    test_ds = TraceDataset("lb-test", tuple(lb_generate(100 + s, n_jobs=60, trace_id=f"te{s}") for s in range(2)))
    res = train(train_ds, test_ds, cfg=TrainConfig(env="lb", total_steps=600, learning_starts=100, eval_every=600),
                agent=TINY_AGENT)
    assert np.isfinite(res.final["mean_return_all"])
