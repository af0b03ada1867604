"""Hierarchy scores against brute-force recomputation and hand cases."""

import itertools

import numpy as np
import pytest

from hiermix.errors import DataError
from hiermix.metrics import EvalReport, aid, aod, evaluate, f_measure_by_level
from hiermix.model import Tree


def build_tree(structure):
    """structure: mapping parent-name -> list of child names, root named 'r'."""
    tree = Tree(np.array([1.0]), np.zeros(1))
    ids = {"r": Tree.ROOT}
    frontier = ["r"]
    while frontier:
        name = frontier.pop(0)
        for child in structure.get(name, []):
            ids[child] = tree.add_child(ids[name], np.array([1.0]), np.zeros(1))
            frontier.append(child)
    return tree, ids


def paths_from_names(tree, ids, names):
    out = []
    for name in names:
        path = [ids[name]]
        while path[0] != Tree.ROOT:
            path.insert(0, tree.parent[path[0]])
        out.append(tuple(path))
    return out


def brute_aid(tree, paths, x):
    non_root = [z for z in tree.children if z != Tree.ROOT]
    total = 0.0
    for z in non_root:
        idx = [n for n, p in enumerate(paths) if z in p]
        if len(idx) < 2:
            continue
        s = 0.0
        for i, j in itertools.combinations(idx, 2):
            s += float(((x[i] - x[j]) ** 2).sum())
        total += 2.0 * s / (len(idx) * (len(idx) - 1))
    return total / len(non_root)


def brute_aod(tree, paths, x):
    cent = {}
    for z in tree.children:
        if z == Tree.ROOT:
            continue
        idx = [n for n, p in enumerate(paths) if z in p]
        if idx:
            cent[z] = x[idx].mean(axis=0)
    total, pairs = 0.0, 0
    for z in cent:
        for s in tree.siblings(z):
            if s in cent:
                total += float(((cent[z] - cent[s]) ** 2).sum())
                pairs += 1
    return None if pairs == 0 else total / pairs


def brute_f_level(tree, paths, labels, level):
    clusters = {}
    for n, p in enumerate(paths):
        cz = p[min(level, len(p) - 1)]
        clusters.setdefault(cz, set()).add(n)
    classes = {}
    for n, lab in enumerate(labels):
        classes.setdefault(lab, set()).add(n)
    total = 0.0
    for lab, cls in classes.items():
        best = 0.0
        for memb in clusters.values():
            inter = len(cls & memb)
            if inter:
                p = inter / len(memb)
                r = inter / len(cls)
                best = max(best, 2 * p * r / (p + r))
        total += best * len(cls) / len(labels)
    return total


class TestAid:
    def test_identical_points(self):
        tree, ids = build_tree({"r": ["a", "b"]})
        paths = paths_from_names(tree, ids, ["a", "a", "b"])
        x = np.ones((3, 2))
        assert aid(tree, paths, x) == 0.0

    def test_single_pair(self):
        tree, ids = build_tree({"r": ["a"]})
        paths = paths_from_names(tree, ids, ["a", "a"])
        x = np.array([[0.0], [2.0]])
        # one node, one pair at squared distance 4
        assert aid(tree, paths, x) == pytest.approx(4.0)

    def test_singletons_count_in_average(self):
        tree, ids = build_tree({"r": ["a", "b"]})
        paths = paths_from_names(tree, ids, ["a", "a", "b"])
        x = np.array([[0.0], [2.0], [5.0]])
        # node a contributes 4, node b is a singleton contributing 0; M = 2
        assert aid(tree, paths, x) == pytest.approx(2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        tree, ids = build_tree({"r": ["a", "b"], "a": ["a1", "a2"], "b": ["b1"]})
        leaves = ["a1", "a2", "b1"]
        for _ in range(25):
            names = [leaves[i] for i in rng.integers(0, 3, size=10)]
            paths = paths_from_names(tree, ids, names)
            x = rng.standard_normal((10, 3))
            assert aid(tree, paths, x) == pytest.approx(brute_aid(tree, paths, x), abs=1e-12)

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        tree, ids = build_tree({"r": ["a", "b"]})
        names = ["a", "b", "a", "b", "a"]
        paths = paths_from_names(tree, ids, names)
        x = rng.standard_normal((5, 2))
        base = aid(tree, paths, x)
        perm = rng.permutation(5)
        assert aid(tree, [paths[i] for i in perm], x[perm]) == pytest.approx(base)


class TestAod:
    def test_singular_path_absent(self):
        tree, ids = build_tree({"r": ["a"], "a": ["a1"]})
        paths = paths_from_names(tree, ids, ["a1", "a1"])
        assert aod(tree, paths, np.zeros((2, 1))) is None

    def test_two_siblings(self):
        tree, ids = build_tree({"r": ["a", "b"]})
        paths = paths_from_names(tree, ids, ["a", "b"])
        x = np.array([[0.0], [3.0]])
        # centroids 0 and 3, both orders: mean squared distance 9
        assert aod(tree, paths, x) == pytest.approx(9.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        tree, ids = build_tree({"r": ["a", "b", "c"], "a": ["a1", "a2"]})
        leaves = ["a1", "a2", "b", "c"]
        for _ in range(25):
            names = [leaves[i] for i in rng.integers(0, 4, size=12)]
            paths = paths_from_names(tree, ids, names)
            x = rng.standard_normal((12, 2))
            expected = brute_aod(tree, paths, x)
            got = aod(tree, paths, x)
            if expected is None:
                assert got is None
            else:
                assert got == pytest.approx(expected, abs=1e-12)

    def test_double_count_consistency(self):
        rng = np.random.default_rng(3)
        tree, ids = build_tree({"r": ["a", "b", "c"]})
        names = ["a", "a", "b", "c", "c"]
        paths = paths_from_names(tree, ids, names)
        x = rng.standard_normal((5, 2))
        cent = {ids[n]: x[[i for i, m in enumerate(names) if m == n]].mean(axis=0) for n in "abc"}
        unordered = 0.0
        for u, v in itertools.combinations("abc", 2):
            unordered += 2 * float(((cent[ids[u]] - cent[ids[v]]) ** 2).sum())
        assert aod(tree, paths, x) == pytest.approx(unordered / 6)


class TestFMeasure:
    def test_perfect_clustering(self):
        tree, ids = build_tree({"r": ["a", "b"]})
        paths = paths_from_names(tree, ids, ["a", "a", "b", "b"])
        scores = f_measure_by_level(tree, paths, ["u", "u", "v", "v"])
        assert scores == {1: pytest.approx(1.0)}

    def test_single_cluster_two_classes(self):
        tree, ids = build_tree({"r": ["a"]})
        paths = paths_from_names(tree, ids, ["a", "a", "a", "a"])
        scores = f_measure_by_level(tree, paths, ["u", "u", "v", "v"])
        assert scores[1] == pytest.approx(2 / 3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        tree, ids = build_tree({"r": ["a", "b"], "a": ["a1", "a2"], "b": ["b1", "b2"]})
        leaves = ["a1", "a2", "b1", "b2"]
        classes = ["u", "v", "w"]
        for _ in range(25):
            names = [leaves[i] for i in rng.integers(0, 4, size=15)]
            labels = [classes[i] for i in rng.integers(0, 3, size=15)]
            paths = paths_from_names(tree, ids, names)
            scores = f_measure_by_level(tree, paths, labels)
            for level in (1, 2):
                assert scores[level] == pytest.approx(
                    brute_f_level(tree, paths, labels, level), abs=1e-12
                )

    def test_bounds(self):
        rng = np.random.default_rng(5)
        tree, ids = build_tree({"r": ["a", "b"], "a": ["a1", "a2"]})
        leaves = ["a1", "a2", "b"]
        for _ in range(20):
            names = [leaves[i] for i in rng.integers(0, 3, size=8)]
            labels = [str(i) for i in rng.integers(0, 2, size=8)]
            paths = paths_from_names(tree, ids, names)
            for v in f_measure_by_level(tree, paths, labels).values():
                assert 0.0 <= v <= 1.0

    def test_missing_labels(self):
        tree, ids = build_tree({"r": ["a"]})
        paths = paths_from_names(tree, ids, ["a", "a"])
        with pytest.raises(DataError):
            f_measure_by_level(tree, paths, ["u"])

    def test_short_paths_use_leaf(self):
        # merged trees have ragged depth; data on short paths group by leaf
        tree, ids = build_tree({"r": ["a", "b"], "a": ["a1", "a2"]})
        paths = paths_from_names(tree, ids, ["a1", "a2", "b"])
        scores = f_measure_by_level(tree, paths, ["u", "v", "w"])
        assert scores[2] == pytest.approx(1.0)


class TestEvaluate:
    def test_report_shape(self):
        tree, ids = build_tree({"r": ["a", "b"]})
        paths = paths_from_names(tree, ids, ["a", "b", "a"])
        x = np.random.default_rng(6).standard_normal((3, 2))
        report = evaluate(tree, paths, x, labels=["u", "v", "u"])
        assert isinstance(report, EvalReport)
        assert report.node_count == 3
        assert report.aod is not None
        d = report.to_dict()
        assert set(d) == {"aid", "aod", "f_by_level", "node_count"}

    def test_no_labels_no_f(self):
        tree, ids = build_tree({"r": ["a", "b"]})
        paths = paths_from_names(tree, ids, ["a", "b"])
        report = evaluate(tree, paths, np.zeros((2, 1)))
        assert report.f_by_level == {}
