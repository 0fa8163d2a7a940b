import threading

import numpy as np
import pytest

from tracebalance.prioritization import (CategoricalDistribution, DynamicConfig, DynamicPrioritizer,
                                         EpisodeResult, ReturnPredictor, TraceSelector, WeightBoard,
                                         WeightTable, combine_dynamic_terms, sample_trace, static_weights,
                                         two_class_equal_weights, uniform_weights, update_dynamic_weights)
from tracebalance.tracebench.generator import build_dataset
from tracebalance.traces import Trace, TraceDataset, TraceKind


def dist_from_counts(counts):
    ids, labels = [], []
    for c, n in enumerate(counts):
        for i in range(n):
            ids.append(f"c{c}-{i}")
            labels.append(c)
    return CategoricalDistribution.from_labels(ids, labels)


def test_static_weights_two_category_example():
    L = 4
    f = np.array([1 / (1 + L), L / (1 + L)])
    dist = CategoricalDistribution((0, 1), f, {0: ["a"], 1: ["b"]})
    table = static_weights(dist)
    np.testing.assert_allclose(table.weights, [5.0, 1.25])
    np.testing.assert_allclose(table.effective_pdf, [0.5, 0.5], atol=1e-15)


def test_static_weights_uniform_is_fixed_point():
    dist = dist_from_counts([5, 5, 5])
    table = static_weights(dist)
    assert np.ptp(table.weights) == 0
    np.testing.assert_allclose(table.effective_pdf, dist.pdf, atol=1e-15)


def test_static_weights_random_seven():
    rng = np.random.default_rng(0)
    f = rng.dirichlet(np.ones(7))
    dist = CategoricalDistribution(tuple(range(7)), f / f.sum(), {i: [str(i)] for i in range(7)})
    assert np.max(np.abs(static_weights(dist).effective_pdf - 1 / 7)) < 1e-12


def test_static_weights_empty_category_excluded(caplog):
    dist = CategoricalDistribution((0, 1, 2), np.array([0.5, 0.5, 0.0]), {0: ["a"], 1: ["b"]})
    table = static_weights(dist)
    assert table.weights[2] == 0 and table.effective_pdf[2] == 0
    assert "empty" in caplog.text


def test_distribution_invariants():
    with pytest.raises(ValueError):
        CategoricalDistribution((0, 1), np.array([0.5, 0.6]), {})
    dist = dist_from_counts([2, 3])
    assert dist.category_of("c1-2") == 1
    assert sorted(t for ids in dist.members.values() for t in ids) == sorted(dist._category_of)


def test_weight_table_invariants():
    with pytest.raises(ValueError):
        WeightTable((0, 1), np.array([0.0, 0.0]), np.array([0.5, 0.5]))
    t = WeightTable((0, 1), np.array([1.0, 3.0]), np.array([0.5, 0.5]))
    assert t.effective_pdf.sum() == pytest.approx(1.0, abs=1e-12)
    assert t.replace([1.0, 1.0]).version == 1


def _speed_dataset(n_fast, n_slow):
    traces = [Trace(f"f{i}", TraceKind.THROUGHPUT, [0.0, 1.0], [5.0, 5.0]) for i in range(n_fast)]
    traces += [Trace(f"s{i}", TraceKind.THROUGHPUT, [0.0, 1.0], [0.5, 0.5]) for i in range(n_slow)]
    return TraceDataset("d", tuple(traces))


def test_two_class_per_trace_probabilities():
    dist, table = two_class_equal_weights(_speed_dataset(90, 10), threshold=1.0)
    per_trace = {c: table.effective_pdf[dist.index_of(c)] / len(dist.members[c]) for c in dist.categories}
    assert per_trace[0] == pytest.approx(1 / 20)  # slow side
    assert per_trace[1] == pytest.approx(1 / 180)


def test_two_class_single_side_falls_back(caplog):
    dist, table = two_class_equal_weights(_speed_dataset(5, 0), threshold=1.0)
    assert dist.k == 1 and "random sampling" in caplog.text


def test_two_class_matches_generator_labels():
    ds = build_dataset("majority_fast", 80, seed=0)
    dist, _ = two_class_equal_weights(ds, threshold=3.0)
    for tr in ds:
        assert (dist.category_of(tr.id) == 0) == tr.ground_truth_class.startswith("slow")


def test_sampler_skewed_base_uniform_effective():
    dist = dist_from_counts([90, 10])
    table = static_weights(dist)
    rng = np.random.default_rng(0)
    ids = sample_trace(table, dist, rng, size=10_000)
    frac = np.mean([dist.category_of(t) == 0 for t in ids])
    assert abs(frac - 0.5) < 4 * np.sqrt(0.25 / 10_000)


def test_sampler_zero_weight_never_drawn_and_single_category():
    dist = dist_from_counts([3, 3])
    table = WeightTable(dist.categories, np.array([0.0, 1.0]), dist.pdf)
    rng = np.random.default_rng(1)
    assert all(dist.category_of(t) == 1 for t in sample_trace(table, dist, rng, size=2000))
    one = CategoricalDistribution.single(["x", "y"])
    assert set(sample_trace(uniform_weights(one), one, rng, size=100)) <= {"x", "y"}


def test_sampler_uniform_within_category():
    dist = dist_from_counts([4])
    rng = np.random.default_rng(2)
    ids = sample_trace(uniform_weights(dist), dist, rng, size=8000)
    _, counts = np.unique(ids, return_counts=True)
    assert np.all(np.abs(counts - 2000) < 4 * np.sqrt(8000 * 0.25 * 0.75))


def test_combine_terms_symmetry_and_monotonicity():
    np.testing.assert_allclose(combine_dynamic_terms([1, 1, 1], [2, 2, 2]), [1, 1, 1])
    w = combine_dynamic_terms([1, 5, 1], [0, 0, 0])
    assert np.argmax(w) == 1 and w.mean() == pytest.approx(1.0)
    w = combine_dynamic_terms([1, 1, 1], [0, 10, 0])
    assert np.argmax(w) == 1
    assert w.min() > 0  # floor keeps every category alive


def _windows(dist, returns, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for c, g in zip(dist.categories, returns):
        out[c] = [(rng.normal(size=3), g + noise * rng.normal()) for _ in range(8)]
    return out


def test_dynamic_lower_returns_get_more_weight():
    dist = dist_from_counts([4, 4, 4])
    table = update_dynamic_weights(None, dist, _windows(dist, [10.0, -30.0, 10.0]))
    assert np.argmax(table.weights) == 1
    assert "predictor_untrained" in table.flags


def test_dynamic_argmax_invariant_to_affine_rescale():
    dist = dist_from_counts([4, 4, 4])
    win = _windows(dist, [3.0, -1.0, 7.0], noise=1.0)
    a = update_dynamic_weights(None, dist, win)
    scaled = {c: [(f, 5.0 * g + 11.0) for f, g in items] for c, items in win.items()}
    b = update_dynamic_weights(None, dist, scaled)
    assert np.argmax(a.weights) == np.argmax(b.weights)


def test_dynamic_cold_category_uses_global_mean():
    dist = dist_from_counts([4, 4, 4])
    win = _windows(dist, [0.0, -10.0, 0.0])
    del win[2]
    table = update_dynamic_weights(None, dist, win)
    assert np.all(np.isfinite(table.weights)) and table.weights[2] > 0


def test_predictor_learns_linear_target():
    rng = np.random.default_rng(0)
    a, b = np.array([1.5, -2.0, 0.5]), 3.0
    X = rng.normal(size=(2000, 3))
    G = X @ a + b
    pred = ReturnPredictor(3, capacity=2000, seed=0)
    for x, g in zip(X, G):
        pred.add(0, x, g)
    for _ in range(2000):
        pred.train_step(64)
    Xt = rng.normal(size=(500, 3))
    mae = np.abs(pred.predict(Xt) - (Xt @ a + b)).mean()
    assert mae < 0.05 * G.std()


def test_predictor_constant_target_and_empty_buffer():
    pred = ReturnPredictor(2, seed=1)
    assert pred.train_step(8) is None
    for i in range(64):
        pred.add(i % 2, np.random.default_rng(i).normal(size=2), 4.0)
    losses = [pred.train_step(32) for _ in range(300)]
    assert losses[-1] < 1e-4
    assert pred.predict(np.zeros(2))[0] == pytest.approx(4.0, abs=1e-2)


def test_predictor_buffer_bounded_and_checkpoint(tmp_path):
    pred = ReturnPredictor(2, capacity=5, seed=0)
    for i in range(20):
        pred.add(0, [i, i], float(i))
    assert len(pred.buffers[0]) == 5
    pred.train_step(4)
    path = tmp_path / "p.pt"
    pred.save(path)
    back = ReturnPredictor.load(path)
    np.testing.assert_allclose(back.predict([[1.0, 2.0]]), pred.predict([[1.0, 2.0]]))


def test_board_versions_monotone_under_concurrent_reads():
    dist = dist_from_counts([2, 2])
    board = WeightBoard(uniform_weights(dist))
    seen = []
    stop = threading.Event()

    def reader():
        last = -1
        while not stop.is_set():
            t = board.snapshot()
            assert t.version >= last
            assert t.effective_pdf.sum() == pytest.approx(1.0)
            last = t.version
            seen.append(last)

    threads = [threading.Thread(target=reader) for _ in range(3)]
    for th in threads:
        th.start()
    for v in range(200):
        board.publish([1.0 + v % 3, 1.0], episode=v)
    stop.set()
    for th in threads:
        th.join()
    assert board.snapshot().version == 200
    assert [t.version for _, t in board.history] == list(range(201))


def test_dynamic_prioritizer_cadence():
    dist = dist_from_counts([3, 3])
    board = WeightBoard(uniform_weights(dist))
    cfg = DynamicConfig(update_every=4, cold_start_updates=2, batch_size=4)
    prio = DynamicPrioritizer(dist, board, n_features=2, cfg=cfg, seed=0)
    rng = np.random.default_rng(0)
    versions = []
    for ep in range(20):
        tid = f"c{ep % 2}-{ep % 3}"
        prio.submit(EpisodeResult(tid, ep % 2, -10.0 * (ep % 2) + rng.normal(), rng.normal(size=2), ep))
        prio.process()
        versions.append(board.snapshot().version)
    # first publish after 2 * 4 episodes, then every 4
    assert versions[6] == 0 and versions[7] == 1 and versions[11] == 2 and versions[19] == 4
    assert board.snapshot().weights.mean() == pytest.approx(1.0)


def test_dynamic_prioritizer_rejects_wrong_category():
    dist = dist_from_counts([1, 1])
    prio = DynamicPrioritizer(dist, WeightBoard(uniform_weights(dist)), 1)
    prio.submit(EpisodeResult("c0-0", 1, 0.0, np.zeros(1)))
    with pytest.raises(ValueError):
        prio.process()


def test_selector_counts():
    dist = dist_from_counts([2, 2])
    sel = TraceSelector(dist, WeightBoard(static_weights(dist)), seed=0)
    for _ in range(100):
        sel.sample()
    assert sum(sel.counts.values()) == 100
