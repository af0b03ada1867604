"""Max-margin machinery: violations, worst-violation search, hinge penalty.

A violation compares the margin score of the node a datum sits at against a
sibling: positive values mean the sibling looks at least as attractive, up
to the demanded width.  The hinge penalty discounts the posterior by the sum
of worst violations; the augmented pseudo-likelihood linearises that hinge
through one positive variable per datum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, StateError
from .model import Tree

# guard against log(0) only; weights the samplers produce are strictly
# positive wherever the concentration is, so log evaluations stay exact
WEIGHT_FLOOR = 1e-300


@dataclass
class MarginContext:
    """Margin vectors plus the two regularisation scalars.

    ``margins`` is usually the live mapping owned by a tree, so margin
    updates are visible here without copying.
    """

    margins: Mapping[int, np.ndarray]
    eps0: float
    cost: float

    @classmethod
    def from_tree(cls, tree: Tree, eps0: float, cost: float) -> "MarginContext":
        return cls(margins=tree.margins, eps0=eps0, cost=cost)


class GaussianFamily:
    """Precomputed pieces of a fixed-covariance Gaussian likelihood."""

    def __init__(self, cov: np.ndarray):
        self.cov = np.asarray(cov, float)
        self.chol = np.linalg.cholesky(self.cov)
        self.inv = np.linalg.inv(self.cov)
        d = self.cov.shape[0]
        self.log_norm = -0.5 * d * np.log(2.0 * np.pi) - np.log(np.diag(self.chol)).sum()

    def loglik(self, kernels: np.ndarray, x: np.ndarray) -> np.ndarray:
        """log N(x; kernel_k, cov) for every kernel row, shape (K,)."""
        if self.cov.shape[0] == 1:
            diff = kernels[:, 0] - x[0]
            return self.log_norm - 0.5 * self.inv[0, 0] * diff * diff
        diff = kernels - x
        quad = ((diff @ self.inv) * diff).sum(axis=1)
        return self.log_norm - 0.5 * quad


def zeta(
    x: np.ndarray,
    path: Sequence[int],
    level: int,
    sib: int,
    ctx: MarginContext,
) -> float:
    """Margin violation of ``sib`` against the path node at ``level``.

    Zero when ``sib`` is the path node itself; otherwise the demanded width
    minus the score difference between the assigned node and the sibling.
    """
    v = path[level]
    if sib == v:
        return 0.0
    try:
        diff = ctx.margins[v] - ctx.margins[sib]
    except KeyError as exc:
        raise StateError(f"node {exc.args[0]} has no margin vector") from exc
    return ctx.eps0 - float(diff @ x)


def worst_violation(
    x: np.ndarray,
    path: Sequence[int],
    ctx: MarginContext,
    tree: Tree,
) -> tuple[tuple[int, int], float]:
    """Maximising (level, sibling) pair over the whole path, with its violation.

    Ties break toward the lowest level and then sibling creation order, so
    repeated calls on the same state agree.  When no node on the path has a
    sibling the constraint set is empty and the sentinel
    ``((1, path[1]), 0.0)`` is returned.
    """
    best = None
    best_val = -np.inf
    for level in range(1, len(path)):
        v = path[level]
        for sib in tree.siblings(v):
            val = zeta(x, path, level, sib, ctx)
            if val > best_val:
                best, best_val = (level, sib), val
    if best is None:
        return (1, path[1]), 0.0
    return best, best_val


def is_sentinel(path: Sequence[int], violation: tuple[int, int]) -> bool:
    """True when the stored violation is the empty-constraint placeholder."""
    level, sib = violation
    return path[level] == sib


def hinge_penalty(
    assignments,
    ctx: MarginContext,
    tree: Tree,
    x: np.ndarray,
) -> float:
    """2 * cost * sum of positive worst violations across all data."""
    total = 0.0
    for n, a in enumerate(assignments):
        _, val = worst_violation(x[n], a.path, ctx, tree)
        total += max(0.0, val)
    return 2.0 * ctx.cost * total


def mixture_loglik(
    x: np.ndarray,
    weights: np.ndarray,
    kernels: np.ndarray,
    family: GaussianFamily,
) -> float:
    """log sum_k w_k N(x; kernel_k, cov) over the explicit components.

    ``weights`` may carry the remainder slot; only the first K entries (one
    per kernel row) are used.  Weights are floored inside the log so a
    zeroed component cannot produce -inf by itself.
    """
    k = kernels.shape[0]
    logs = np.log(np.maximum(weights[:k], WEIGHT_FLOOR)) + family.loglik(kernels, x)
    return float(np.logaddexp.reduce(logs))


def log_pseudo_likelihood(
    x: np.ndarray,
    lam: float,
    path: Sequence[int],
    violation_value: float,
    tree: Tree,
    ctx: MarginContext,
    kernels: np.ndarray,
    family: GaussianFamily,
) -> float:
    """Joint log pseudo-likelihood of one observation and its augmentation.

    Mixture part under the leaf weights plus the augmentation part
    ``-log(lam)/2 - (cost*violation + lam)^2 / (2 lam)``; additive constants
    are dropped consistently so ratios and traces stay comparable.
    """
    if lam <= 0:
        raise DomainError(f"augmentation variable must be positive, got {lam}")
    mix = mixture_loglik(x, tree.weights[path[-1]], kernels, family)
    shifted = ctx.cost * violation_value + lam
    return mix - 0.5 * np.log(lam) - shifted * shifted / (2.0 * lam)
