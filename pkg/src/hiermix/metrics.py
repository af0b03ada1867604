"""Hierarchy-quality measures: within-node spread, between-sibling spread,
and per-level F-measure against reference labels.

Node membership means "data whose path passes through the node", so an
internal node owns everything in its subtree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError
from .model import Tree


@dataclass
class EvalReport:
    """Bundle of the three scores for one tree.

    ``aod`` is None when the tree is a singular path (no sibling pairs
    anywhere), in which case between-sibling spread is undefined.
    """

    aid: float
    aod: float | None
    f_by_level: dict[int, float] = field(default_factory=dict)
    node_count: int = 0

    def to_dict(self) -> dict:
        return {
            "aid": self.aid,
            "aod": self.aod,
            "f_by_level": {str(k): v for k, v in self.f_by_level.items()},
            "node_count": self.node_count,
        }


def _members_by_node(tree: Tree, paths) -> dict[int, list[int]]:
    members: dict[int, list[int]] = {z: [] for z in tree.children}
    for n, path in enumerate(paths):
        for z in path:
            members[z].append(n)
    return members


def _paths_of(assignments):
    return [a.path if hasattr(a, "path") else tuple(a) for a in assignments]


def aid(tree: Tree, assignments, x: np.ndarray) -> float:
    """Average within-node pairwise squared distance over all non-root nodes.

    Each node contributes the mean squared distance over its member pairs;
    nodes with fewer than two members contribute zero but still count in
    the average, so sparser trees are not rewarded for splintering.
    """
    if not tree.children:
        raise ParameterError("tree has no nodes")
    x = np.asarray(x, float)
    members = _members_by_node(tree, _paths_of(assignments))
    non_root = [z for z in tree.children if z != Tree.ROOT]
    if not non_root:
        return 0.0
    total = 0.0
    for z in non_root:
        idx = members[z]
        m = len(idx)
        if m < 2:
            continue
        pts = x[idx]
        sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        total += sq[np.triu_indices(m, k=1)].sum() * 2.0 / (m * (m - 1))
    return total / len(non_root)


def aod(tree: Tree, assignments, x: np.ndarray) -> float | None:
    """Average squared distance between sibling centroids, ordered pairs.

    Every unordered sibling pair is counted twice (once per direction) and
    the denominator is the number of ordered pairs, so the value is the
    plain mean of the summands.  Returns None for singular-path trees.
    Nodes without members are left out of the pairing.
    """
    x = np.asarray(x, float)
    members = _members_by_node(tree, _paths_of(assignments))
    centroids = {
        z: x[idx].mean(axis=0) for z, idx in members.items() if z != Tree.ROOT and idx
    }
    total = 0.0
    pairs = 0
    for z in tree.children:
        if z == Tree.ROOT or z not in centroids:
            continue
        for sib in tree.siblings(z):
            if sib not in centroids:
                continue
            diff = centroids[z] - centroids[sib]
            total += float(diff @ diff)
            pairs += 1
    if pairs == 0:
        return None
    return total / pairs


def _clusters_at_level(tree: Tree, paths, level: int) -> list[int]:
    """Cluster id of each datum at a level: its path node there, or its leaf
    when the (merged) path is shorter."""
    out = []
    for path in paths:
        out.append(path[min(level, len(path) - 1)])
    return out


def f_measure_by_level(tree: Tree, assignments, labels) -> dict[int, float]:
    """Class-weighted best-match F1 of the clustering at every level.

    For each level, data are grouped by the node their path passes through;
    each reference class is matched to the cluster maximising its F1 and
    the scores are combined weighted by class size.
    """
    paths = _paths_of(assignments)
    n = len(paths)
    if labels is None or len(labels) != n:
        missing = n if labels is None else n - len(labels)
        raise DataError(f"labels missing for {missing} data")
    depth = max(tree.level.values()) if tree.level else 0
    classes: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        classes.setdefault(str(lab), []).append(i)

    result: dict[int, float] = {}
    for level in range(1, depth + 1):
        cluster_of = _clusters_at_level(tree, paths, level)
        clusters: dict[int, set[int]] = {}
        for i, cz in enumerate(cluster_of):
            clusters.setdefault(cz, set()).add(i)
        score = 0.0
        for lab, idx in classes.items():
            cls = set(idx)
            best = 0.0
            for memb in clusters.values():
                inter = len(cls & memb)
                if inter == 0:
                    continue
                p = inter / len(memb)
                r = inter / len(cls)
                best = max(best, 2.0 * p * r / (p + r))
            score += best * len(cls) / n
        result[level] = score
    return result


def evaluate(tree: Tree, assignments, x: np.ndarray, labels=None) -> EvalReport:
    """Convenience wrapper producing a full report; F-measure only with labels."""
    report = EvalReport(
        aid=aid(tree, assignments, x),
        aod=aod(tree, assignments, x),
        node_count=len(tree.children),
    )
    if labels is not None:
        report.f_by_level = f_measure_by_level(tree, assignments, labels)
    return report
