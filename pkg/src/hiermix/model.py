"""Domain types and the hierarchical generative process.

A hierarchy is a rooted tree of fixed depth.  Every node carries a local
weight vector over a shared book of ``trunc`` mixture components (plus one
explicit remainder slot for unseen components) and a margin vector used by
the regulariser.  Data pick a root-to-leaf path through nested CRP choices,
then a component from the leaf weights, then an observation from that
component's Gaussian kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError, ParameterError
from .randkit import sample_dirichlet


@dataclass(frozen=True)
class Hyperparams:
    """All fixed scalars and matrices of the model.

    alpha            nested-CRP concentration (path choices)
    gamma            parent-to-child weight diffusion concentration
    gamma0           root stick-breaking concentration
    depth            number of levels below the root
    trunc            number of mixture components kept explicit
    margin_cost      scale of the hinge penalty
    margin_eps       margin width demanded between siblings
    eta_prior_scale  std dev of the zero-mean margin-vector prior
    kernel_cov       shared component covariance (D x D, SPD)
    prior_mean       component-mean prior mean (D,)
    prior_cov        component-mean prior covariance (D x D, SPD)
    vi_weight        weight of the similarity regulariser in variational runs
    """

    alpha: float
    gamma: float
    gamma0: float
    depth: int
    trunc: int
    margin_cost: float
    margin_eps: float
    eta_prior_scale: float
    kernel_cov: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    vi_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "gamma", "gamma0", "margin_cost", "eta_prior_scale"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.margin_eps < 0:
            raise ParameterError(f"margin_eps must be non-negative, got {self.margin_eps}")
        if self.vi_weight < 0:
            raise ParameterError(f"vi_weight must be non-negative, got {self.vi_weight}")
        if self.depth < 1:
            raise ParameterError(f"depth must be at least 1, got {self.depth}")
        if self.trunc < 2:
            raise ParameterError(f"trunc must be at least 2, got {self.trunc}")
        object.__setattr__(self, "kernel_cov", np.atleast_2d(np.asarray(self.kernel_cov, float)))
        object.__setattr__(self, "prior_mean", np.atleast_1d(np.asarray(self.prior_mean, float)))
        object.__setattr__(self, "prior_cov", np.atleast_2d(np.asarray(self.prior_cov, float)))
        d = len(self.prior_mean)
        for name in ("kernel_cov", "prior_cov"):
            mat = getattr(self, name)
            if mat.shape != (d, d):
                raise ParameterError(f"{name} must be {d}x{d}, got {mat.shape}")
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise ParameterError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError as exc:
                raise ParameterError(f"{name} must be positive definite") from exc

    @property
    def dim(self) -> int:
        return len(self.prior_mean)


@dataclass
class PathAssignment:
    """Latent state attached to one datum.

    path       node ids from the root to a leaf, length depth+1
    violation  (level, sibling id) attaining the worst margin violation
    aug        positive hinge augmentation variable
    component  mixture component index in [0, trunc)
    """

    path: tuple[int, ...]
    violation: tuple[int, int] | None = None
    aug: float | None = None
    component: int | None = None


@dataclass
class Dataset:
    """Observation matrix with optional class labels."""

    x: np.ndarray
    labels: list[str] | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.size == 0:
            raise ParameterError("dataset must contain at least one row")
        if not np.all(np.isfinite(self.x)):
            raise ParameterError("dataset contains non-finite entries")
        if self.labels is not None and len(self.labels) != self.x.shape[0]:
            raise ParameterError("label count does not match row count")


class Tree:
    """Rooted hierarchy with per-node weights, margins and visit counts.

    Node ids are monotonically increasing integers; sibling order is creation
    order.  ``counts[z]`` is the number of data whose path passes through
    ``z`` and is maintained by attach/detach.
    """

    ROOT = 0

    def __init__(self, root_weights: np.ndarray, root_margin: np.ndarray):
        self.parent: dict[int, int] = {}
        self.children: dict[int, list[int]] = {self.ROOT: []}
        self.weights: dict[int, np.ndarray] = {self.ROOT: np.asarray(root_weights, float)}
        self.margins: dict[int, np.ndarray] = {self.ROOT: np.asarray(root_margin, float)}
        self.level: dict[int, int] = {self.ROOT: 0}
        self.counts: dict[int, int] = {self.ROOT: 0}
        self._next_id = 1

    # -- structure ---------------------------------------------------------

    @property
    def nodes(self) -> list[int]:
        return list(self.children.keys())

    def is_leaf(self, z: int) -> bool:
        return not self.children[z]

    def siblings(self, z: int) -> list[int]:
        if z == self.ROOT:
            return []
        return [w for w in self.children[self.parent[z]] if w != z]

    def add_child(self, parent: int, weights: np.ndarray, margin: np.ndarray) -> int:
        z = self._next_id
        self._next_id += 1
        self.parent[z] = parent
        self.children[parent].append(z)
        self.children[z] = []
        self.weights[z] = np.asarray(weights, float)
        self.margins[z] = np.asarray(margin, float)
        self.level[z] = self.level[parent] + 1
        self.counts[z] = 0
        return z

    def _remove_node(self, z: int) -> None:
        self.children[self.parent[z]].remove(z)
        for name in ("parent", "children", "weights", "margins", "level", "counts"):
            getattr(self, name).pop(z)

    # -- occupancy ---------------------------------------------------------

    def attach_path(self, path: tuple[int, ...]) -> None:
        for z in path:
            self.counts[z] += 1

    def detach_path(self, path: tuple[int, ...]) -> None:
        for z in path:
            self.counts[z] -= 1

    def prune_empty(self) -> None:
        """Drop every non-root node no datum passes through (leaves first)."""
        empty = [z for z in self.children if z != self.ROOT and self.counts[z] == 0]
        for z in sorted(empty, key=lambda w: -self.level[w]):
            self._remove_node(z)

    def clone(self) -> "Tree":
        out = Tree.__new__(Tree)
        out.parent = dict(self.parent)
        out.children = {z: list(ch) for z, ch in self.children.items()}
        out.weights = {z: w.copy() for z, w in self.weights.items()}
        out.margins = {z: m.copy() for z, m in self.margins.items()}
        out.level = dict(self.level)
        out.counts = dict(self.counts)
        out._next_id = self._next_id
        return out


# -- elementary distributions ----------------------------------------------


def crp_next(counts, alpha: float) -> np.ndarray:
    """Seating probabilities for the next customer of a CRP.

    Returns one entry per existing table (proportional to its occupancy)
    plus a final entry for opening a new table.  Zero-occupancy tables get
    probability zero, which lets callers keep detached nodes in place while
    proposing.
    """
    if alpha <= 0:
        raise ParameterError(f"CRP concentration must be positive, got {alpha}")
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    out = np.empty(len(counts) + 1)
    out[:-1] = counts / (n + alpha)
    out[-1] = alpha / (n + alpha)
    return out


def stick_break(o, trunc: int | None = None) -> np.ndarray:
    """Turn break proportions into weights plus an explicit remainder.

    ``o[k]`` is the share taken from the remaining stick; the output has one
    more entry than ``o`` holding what is left after all breaks, so it sums
    to one by construction.
    """
    o = np.asarray(o, dtype=float)
    if trunc is not None and len(o) != trunc:
        raise ParameterError(f"expected {trunc} proportions, got {len(o)}")
    if np.any(o <= 0) or np.any(o > 1):
        raise DomainError("break proportions must lie in (0, 1]")
    out = np.empty(len(o) + 1)
    remaining = 1.0
    for k, ok in enumerate(o):
        out[k] = ok * remaining
        remaining *= 1.0 - ok
    out[-1] = remaining
    return out


def diffuse_weights(beta_parent: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Child weights drawn from Dirichlet(gamma * parent weights).

    Components the parent gives zero mass stay at exactly zero in the child.
    """
    if gamma <= 0:
        raise ParameterError(f"diffusion concentration must be positive, got {gamma}")
    return sample_dirichlet(gamma * np.asarray(beta_parent, dtype=float), rng)


def ncrp_extend(tree: Tree, hyper: Hyperparams, rng: np.random.Generator) -> tuple[int, ...]:
    """Sample a root-to-leaf path for a new datum, creating nodes as needed.

    Level by level the datum either follows an existing child (proportional
    to its visit count) or opens a fresh one, which then receives diffused
    weights from its parent and a margin vector from the prior.  Visit
    counts are not modified; call ``tree.attach_path`` on the result to
    commit.
    """
    path = [Tree.ROOT]
    current = Tree.ROOT
    for _ in range(hyper.depth):
        kids = tree.children[current]
        probs = crp_next([tree.counts[z] for z in kids], hyper.alpha)
        cum = np.cumsum(probs)
        choice = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(kids))
        if choice == len(kids):
            weights = diffuse_weights(tree.weights[current], hyper.gamma, rng)
            margin = hyper.eta_prior_scale * rng.standard_normal(hyper.dim)
            current = tree.add_child(current, weights, margin)
        else:
            current = kids[choice]
        path.append(current)
    return tuple(path)


def generate_dataset(
    hyper: Hyperparams, n: int, rng: np.random.Generator
) -> tuple[Dataset, Tree, list[PathAssignment], np.ndarray]:
    """Run the generative process end to end.

    Returns the observations, the realised tree, the per-datum assignments
    (paths and components; margin-related fields unset) and the component
    means.  Labels are the leaf node ids, handy as ground-truth classes.
    """
    if n < 1:
        raise ParameterError(f"need at least one datum, got {n}")
    k, d = hyper.trunc, hyper.dim
    breaks = rng.beta(1.0, hyper.gamma0, size=k)
    # Beta draws can touch 0.0 at float resolution; nudge into the open interval.
    breaks = np.clip(breaks, 1e-12, 1.0)
    root_weights = stick_break(breaks, k)
    root_margin = hyper.eta_prior_scale * rng.standard_normal(d)
    tree = Tree(root_weights, root_margin)

    chol_prior = np.linalg.cholesky(hyper.prior_cov)
    chol_kernel = np.linalg.cholesky(hyper.kernel_cov)
    kernels = hyper.prior_mean + rng.standard_normal((k, d)) @ chol_prior.T

    x = np.empty((n, d))
    assignments = []
    labels = []
    for i in range(n):
        path = ncrp_extend(tree, hyper, rng)
        tree.attach_path(path)
        # floor against total underflow of the explicit components (all the
        # diffused mass can end up in the remainder slot at float precision)
        leaf_weights = np.maximum(tree.weights[path[-1]][:k], 1e-300)
        comp = rng.choice(k, p=leaf_weights / leaf_weights.sum())
        x[i] = kernels[comp] + chol_kernel @ rng.standard_normal(d)
        assignments.append(PathAssignment(path=path, component=int(comp)))
        labels.append(str(path[-1]))
    return Dataset(x=x, labels=labels), tree, assignments, kernels
