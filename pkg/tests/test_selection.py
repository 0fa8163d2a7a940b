import itertools
import math

import numpy as np
import pytest

from tracebalance.features import standardize
from tracebalance.selection import SelectionConfig, entropy, information_gain, select_critical_features


def tree_oracle(x, y, depth):
    """Exhaustive best (lowest) weighted leaf entropy over every cut sequence, in bits * n."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]

    def h(lo, hi):
        _, c = np.unique(ys[lo:hi], return_counts=True)
        p = c / c.sum()
        return (hi - lo) * float(-(p * np.log2(p)).sum())

    def best(lo, hi, d):
        here = h(lo, hi)
        if d == 0 or here == 0:
            return here
        out = here
        for cut in range(lo + 1, hi):
            if xs[cut] > xs[cut - 1]:
                out = min(out, best(lo, cut, d - 1) + best(cut, hi, d - 1))
        return out

    return best(0, len(xs), depth)


def test_entropy():
    assert entropy([0, 0, 1, 1]) == pytest.approx(1.0)
    assert entropy([0, 1, 2, 3]) == pytest.approx(2.0)
    assert entropy([5, 5, 5]) == 0.0


def test_depth_one_gain_equals_exhaustive_best_split():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(4, 25))
        x = rng.integers(0, 8, n).astype(float)
        y = rng.integers(0, 3, n)
        if np.unique(y).size < 2:
            continue
        expected = entropy(y) - tree_oracle(x, y, 1) / n
        assert information_gain(y, x, tree_max_depth=1) == pytest.approx(max(expected, 0.0), abs=1e-12)


def test_greedy_tree_is_bounded_by_exhaustive_tree():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(4, 14))
        x = rng.normal(size=n)
        y = rng.integers(0, 3, n)
        if np.unique(y).size < 2:
            continue
        best_gain = entropy(y) - tree_oracle(x, y, 3) / n
        ig = information_gain(y, x, tree_max_depth=3)
        assert -1e-12 <= ig <= best_gain + 1e-12


def test_gain_bounds_and_perfect_feature():
    y = np.repeat([0, 1, 2, 3], 10)
    assert information_gain(y, y.astype(float)) == pytest.approx(2.0)
    assert information_gain(y, np.zeros(40)) == 0.0
    assert information_gain(np.zeros(10), np.arange(10.0)) == 0.0


def synthetic(seed, n=400, informative=3, noise=14):
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, 4, n)
    cols = []
    for j in range(informative):
        centers = rng.permutation(4) * 4.0
        cols.append(centers[groups] + rng.normal(0, 0.5, n))
    for _ in range(noise):
        cols.append(rng.normal(size=n))
    raw = np.column_stack(cols)
    labels = [f"info{j}" for j in range(informative)] + [f"noise{j}" for j in range(noise)]
    return standardize([f"r{i}" for i in range(n)], labels, raw)


def test_round_bound_and_shrinking_sets():
    m = synthetic(0)
    cfg = SelectionConfig(seed=0)
    report = select_critical_features(m, cfg)
    assert len(report.rounds) <= cfg.max_rounds(17)
    sizes = [len(r.features) for r in report.rounds]
    assert sizes == sorted(sizes, reverse=True)
    assert len(report.final_features) >= cfg.min_features
    ks = [r.cluster_count for r in report.rounds]
    assert ks == [4 + 2 * i for i in range(len(ks))]


def test_informative_columns_survive():
    report = select_critical_features(synthetic(1), SelectionConfig(seed=1))
    assert {"info0", "info1", "info2"} <= set(report.final_features)


def test_report_json(tmp_path):
    report = select_critical_features(synthetic(2), SelectionConfig(seed=2))
    path = tmp_path / "r.json"
    report.dump(path)
    assert '"schema_version": 1' in path.read_text()
    assert 0 < report.eliminated_fraction < 1


def test_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(elimination_fraction=1.0)
    with pytest.raises(ValueError):
        SelectionConfig(min_features=1)
    cfg = SelectionConfig()
    assert cfg.max_rounds(4) == 1
    assert cfg.max_rounds(17) == math.ceil(math.log(17 / 4) / math.log(4 / 3)) + 1


def test_too_few_columns_rejected():
    m = standardize(["a", "b", "c"], ["x", "y"], np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 5.0]]))
    with pytest.raises(ValueError):
        select_critical_features(m)
