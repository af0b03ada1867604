"""Regularised coordinate-ascent variational inference.

The variational family runs over a fixed truncated skeleton: a complete
tree of configurable branching, or any tree handed in (for instance one
grown by the sampler).  Per datum there is a hard path indicator and a
responsibility vector per candidate path; per branch a Beta stick; per
node a Dirichlet weight vector; the root keeps truncated stick-breaking
Betas; each mixture kernel keeps a Gaussian mean/covariance.

Every cycle applies the closed-form updates in a fixed order and is
safeguarded: a phase whose update would lower the objective is blended
back toward its previous parameters (exactly restored in the worst case),
so the reported objective never drops by more than a hair per cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import betaln, digamma, gammaln, logsumexp

from .errors import NumericalError, ParameterError, StateError
from .model import Hyperparams, Tree

LOG_FLOOR = 1e-12
OMEGA_FLOOR_DEFAULT = 1e-3


@dataclass
class ViConfig:
    """Skeleton and stopping knobs for a variational fit."""

    hyper: Hyperparams
    branching: int = 3
    tol: float = 1e-6
    max_cycles: int = 200
    omega_floor: float = OMEGA_FLOOR_DEFAULT

    def validate(self) -> None:
        if self.branching < 1:
            raise ParameterError(f"branching must be at least 1, got {self.branching}")
        if self.tol <= 0 or self.max_cycles < 1:
            raise ParameterError("tol must be positive and max_cycles at least 1")
        if self.omega_floor <= 0:
            raise ParameterError("omega_floor must be positive")


def build_skeleton(depth: int, branching: int, dim: int) -> Tree:
    """Complete tree of the given depth and branching, ids in BFS order."""
    k_dummy = np.array([1.0])
    tree = Tree(k_dummy, np.zeros(dim))
    frontier = [Tree.ROOT]
    for _ in range(depth):
        nxt = []
        for z in frontier:
            for _ in range(branching):
                nxt.append(tree.add_child(z, k_dummy, np.zeros(dim)))
        frontier = nxt
    return tree


def relabel_tree(tree: Tree, dim: int) -> Tree:
    """Copy a tree onto contiguous BFS ids so it can serve as a skeleton."""
    k_dummy = np.array([1.0])
    out = Tree(k_dummy, np.zeros(dim))
    mapping = {Tree.ROOT: Tree.ROOT}
    frontier = [Tree.ROOT]
    while frontier:
        nxt = []
        for z in frontier:
            for child in tree.children[z]:
                mapping[child] = out.add_child(mapping[z], k_dummy, np.zeros(dim))
                nxt.append(child)
        frontier = nxt
    return out


class ViState:
    """Variational parameters plus the static skeleton index tables."""

    def __init__(self, tree: Tree, hyper: Hyperparams, omega_floor: float = OMEGA_FLOOR_DEFAULT):
        self.tree = tree
        self.hyper = hyper
        self.omega_floor = omega_floor
        self.num_nodes = len(tree.children)
        if sorted(tree.children.keys()) != list(range(self.num_nodes)):
            raise StateError("skeleton node ids must be contiguous from zero")

        self.paths: list[tuple[int, ...]] = []
        leaves = [z for z in sorted(tree.children) if tree.is_leaf(z)]
        if not leaves:
            raise StateError("skeleton has no paths")
        for leaf in leaves:
            path = [leaf]
            while path[0] != Tree.ROOT:
                path.insert(0, tree.parent[path[0]])
            self.paths.append(tuple(path))
        self.leaf_of_path = np.array([p[-1] for p in self.paths])

        p_count = len(self.paths)
        self.path_matrix = np.zeros((p_count, self.num_nodes))
        for i, path in enumerate(self.paths):
            for z in path:
                self.path_matrix[i, z] = 1.0
        # contrib[p, z]: path p passes a sibling of z (parent on path, z not)
        self.contrib = np.zeros((p_count, self.num_nodes))
        for z in sorted(tree.children):
            if z == Tree.ROOT:
                continue
            par = tree.parent[z]
            self.contrib[:, z] = self.path_matrix[:, par] * (1.0 - self.path_matrix[:, z])

        k = hyper.trunc
        self.path_ind: np.ndarray | None = None       # (N,) chosen path index
        self.resp: np.ndarray | None = None           # (N, P, K)
        self.sticks = np.ones((self.num_nodes, 2))    # Beta params per branch; root row unused
        self.sticks[:, 1] = hyper.alpha
        self.node_conc = np.ones((self.num_nodes, k + 1))  # Dirichlet params; root row unused
        self.root_sticks = np.ones((k, 2))
        self.root_sticks[:, 1] = hyper.gamma0
        self.kernel_mean = np.tile(hyper.prior_mean, (k, 1))
        self.kernel_cov = np.tile(hyper.prior_cov, (k, 1, 1))

    # -- snapshots for the phase safeguard ----------------------------------

    def snapshot(self) -> dict:
        return {
            "path_ind": None if self.path_ind is None else self.path_ind.copy(),
            "resp": None if self.resp is None else self.resp.copy(),
            "sticks": self.sticks.copy(),
            "node_conc": self.node_conc.copy(),
            "root_sticks": self.root_sticks.copy(),
            "kernel_mean": self.kernel_mean.copy(),
            "kernel_cov": self.kernel_cov.copy(),
        }

    def restore(self, snap: dict) -> None:
        self.path_ind = None if snap["path_ind"] is None else snap["path_ind"].copy()
        self.resp = None if snap["resp"] is None else snap["resp"].copy()
        self.sticks = snap["sticks"].copy()
        self.node_conc = snap["node_conc"].copy()
        self.root_sticks = snap["root_sticks"].copy()
        self.kernel_mean = snap["kernel_mean"].copy()
        self.kernel_cov = snap["kernel_cov"].copy()


def init_state(
    tree: Tree, hyper: Hyperparams, x: np.ndarray, rng: np.random.Generator,
    omega_floor: float = OMEGA_FLOOR_DEFAULT,
) -> ViState:
    """Randomised but reproducible starting point."""
    state = ViState(tree, hyper, omega_floor)
    n = x.shape[0]
    k = hyper.trunc
    p_count = len(state.paths)
    state.path_ind = rng.integers(p_count, size=n)
    state.resp = rng.dirichlet(np.ones(k), size=(n, p_count))
    # node concentrations: diffused parent mean plus jitter, top-down
    for z in sorted(tree.children):
        if z == Tree.ROOT:
            continue
        parent_mean = _node_mean_row(state, tree.parent[z])
        state.node_conc[z] = np.maximum(
            hyper.gamma * parent_mean + 0.1 * rng.random(k + 1), omega_floor
        )
    idx = rng.choice(n, size=k, replace=n < k)
    state.kernel_mean = x[idx] + 0.01 * rng.standard_normal((k, x.shape[1]))
    return state


# -- expectation tables --------------------------------------------------------


def _root_weight_moments(state: ViState) -> tuple[np.ndarray, np.ndarray]:
    """(E[beta_root], E[log beta_root]) of length K+1 from the root sticks."""
    r = state.root_sticks
    k = r.shape[0]
    e_stick = r[:, 0] / r.sum(axis=1)
    e_log_stick = digamma(r[:, 0]) - digamma(r.sum(axis=1))
    e_log_rest = digamma(r[:, 1]) - digamma(r.sum(axis=1))
    mean = np.empty(k + 1)
    logw = np.empty(k + 1)
    acc_mean = 1.0
    acc_log = 0.0
    for j in range(k):
        mean[j] = e_stick[j] * acc_mean
        logw[j] = e_log_stick[j] + acc_log
        acc_mean *= 1.0 - e_stick[j]
        acc_log += e_log_rest[j]
    mean[k] = acc_mean
    logw[k] = acc_log
    return mean, logw


def _node_mean_row(state: ViState, z: int) -> np.ndarray:
    if z == Tree.ROOT:
        return _root_weight_moments(state)[0]
    w = state.node_conc[z]
    return w / w.sum()


def node_mean_weights(state: ViState) -> np.ndarray:
    """E[beta] for every node, root included, shape (nodes, K+1)."""
    out = state.node_conc / state.node_conc.sum(axis=1, keepdims=True)
    out[Tree.ROOT] = _root_weight_moments(state)[0]
    return out


def node_log_weights(state: ViState) -> np.ndarray:
    """E[log beta] for every node, root included, shape (nodes, K+1)."""
    conc = state.node_conc
    out = digamma(conc) - digamma(conc.sum(axis=1, keepdims=True))
    out[Tree.ROOT] = _root_weight_moments(state)[1]
    return out


def gauss_log_mean(state: ViState, x: np.ndarray) -> np.ndarray:
    """E[log p(x | kernel k)] in trace form, shape (N, K)."""
    hyper = state.hyper
    d = hyper.dim
    cov = hyper.kernel_cov
    chol = np.linalg.cholesky(cov)
    cov_inv = np.linalg.inv(cov)
    base = -0.5 * d * np.log(2.0 * np.pi) - np.log(np.diag(chol)).sum()
    out = np.empty((x.shape[0], hyper.trunc))
    for k in range(hyper.trunc):
        diff = x - state.kernel_mean[k]
        sol = np.linalg.solve(chol, diff.T)
        quad = np.einsum("ij,ij->j", sol, sol)
        out[:, k] = base - 0.5 * quad - 0.5 * np.trace(cov_inv @ state.kernel_cov[k])
    return out


def gauss_marginal_log(state: ViState, x: np.ndarray) -> np.ndarray:
    """log E[f(x | kernel k)], the Gaussian convolution of kernel and its
    posterior uncertainty, shape (N, K)."""
    hyper = state.hyper
    d = hyper.dim
    out = np.empty((x.shape[0], hyper.trunc))
    for k in range(hyper.trunc):
        cov = hyper.kernel_cov + state.kernel_cov[k]
        chol = np.linalg.cholesky(cov)
        diff = x - state.kernel_mean[k]
        sol = np.linalg.solve(chol, diff.T)
        quad = np.einsum("ij,ij->j", sol, sol)
        out[:, k] = -0.5 * d * np.log(2.0 * np.pi) - np.log(np.diag(chol)).sum() - 0.5 * quad
    return out


@dataclass
class ExpectationTable:
    """Digamma/Gaussian expectations in one place, see the field names."""

    log_stick: np.ndarray            # E[log o_k], root sticks
    log_one_minus_stick: np.ndarray  # E[log (1-o_k)]
    root_weights: np.ndarray         # E[beta_root]
    root_log_weights: np.ndarray     # E[log beta_root]
    node_weights: np.ndarray         # E[beta] per node
    node_log_weights: np.ndarray     # E[log beta] per node


def expectations(state: ViState) -> ExpectationTable:
    r = state.root_sticks
    e_log = digamma(r[:, 0]) - digamma(r.sum(axis=1))
    e_log1m = digamma(r[:, 1]) - digamma(r.sum(axis=1))
    mean, logw = _root_weight_moments(state)
    return ExpectationTable(
        log_stick=e_log,
        log_one_minus_stick=e_log1m,
        root_weights=mean,
        root_log_weights=logw,
        node_weights=node_mean_weights(state),
        node_log_weights=node_log_weights(state),
    )


def _stick_path_scores(state: ViState) -> np.ndarray:
    """E[log p(path | sticks)] for every candidate path, shape (P,)."""
    tree = state.tree
    a = state.sticks
    choose = digamma(a[:, 0]) - digamma(a.sum(axis=1))
    skip = digamma(a[:, 1]) - digamma(a.sum(axis=1))
    node_score = np.zeros(state.num_nodes)
    for z in sorted(tree.children):
        if z == Tree.ROOT:
            continue
        sibs_before = []
        for w in tree.children[tree.parent[z]]:
            if w == z:
                break
            sibs_before.append(w)
        node_score[z] = choose[z] + sum(skip[w] for w in sibs_before)
    return state.path_matrix @ node_score


def sibling_attraction(state: ViState, x: np.ndarray) -> np.ndarray:
    """log sum_k E[beta_zk] E[f(x_n; kernel_k)] per node, shape (N, nodes).

    This is how strongly each node's mixture explains each datum, in
    expectation; the regulariser charges it for nodes that are siblings of
    the datum's path.
    """
    means = node_mean_weights(state)
    marg = gauss_marginal_log(state, x)
    k = state.hyper.trunc
    logw = np.log(np.maximum(means[:, :k], LOG_FLOOR))
    out = np.empty((x.shape[0], state.num_nodes))
    for z in range(state.num_nodes):
        out[:, z] = logsumexp(marg + logw[z][None, :], axis=1)
    return out


def _q_fractions(state: ViState, x: np.ndarray) -> np.ndarray:
    """Per-component share of each node's expected mixture, shape (N, nodes, K)."""
    means = node_mean_weights(state)
    marg = gauss_marginal_log(state, x)
    k = state.hyper.trunc
    logw = np.log(np.maximum(means[:, :k], LOG_FLOOR))
    scores = marg[:, None, :] + logw[None, :, :]
    scores -= logsumexp(scores, axis=2, keepdims=True)
    return np.exp(scores)


# -- coordinate updates ----------------------------------------------------------


def update_paths(state: ViState, x: np.ndarray) -> np.ndarray:
    """Hard path assignment by the per-path objective score.

    Score = stick score + marginalised mixture fit at the leaf - similarity
    regulariser over siblings of the path.  Ties resolve to the earliest
    created path, so reruns agree.
    """
    if not state.paths:
        raise StateError("no candidate paths")
    k = state.hyper.trunc
    logw = node_log_weights(state)
    log_like = gauss_log_mean(state, x)
    mix = logsumexp(
        logw[state.leaf_of_path][None, :, :k] + log_like[:, None, :], axis=2
    )
    score = mix + _stick_path_scores(state)[None, :]
    if state.hyper.vi_weight > 0:
        att = sibling_attraction(state, x)
        score = score - state.hyper.vi_weight * (att @ state.contrib.T)
    state.path_ind = np.argmax(score, axis=1)
    return state.path_ind


def update_resp(state: ViState, x: np.ndarray) -> np.ndarray:
    """Responsibilities for every candidate path, row-normalised in log space."""
    k = state.hyper.trunc
    logw = node_log_weights(state)
    log_like = gauss_log_mean(state, x)
    scores = logw[state.leaf_of_path][None, :, :k] + log_like[:, None, :]
    scores -= logsumexp(scores, axis=2, keepdims=True)
    state.resp = np.exp(scores)
    state.resp /= state.resp.sum(axis=2, keepdims=True)
    return state.resp


def chosen_path_matrix(state: ViState) -> np.ndarray:
    """(N, nodes) membership of each datum's chosen path."""
    return state.path_matrix[state.path_ind]


def chosen_resp(state: ViState) -> np.ndarray:
    """(N, K) responsibilities along the chosen paths."""
    return state.resp[np.arange(len(state.path_ind)), state.path_ind]


def update_sticks(state: ViState, x: np.ndarray | None = None) -> np.ndarray:
    """Conjugate Beta updates: 1 + paths through, alpha + paths after."""
    tree = state.tree
    counts = chosen_path_matrix(state).sum(axis=0)
    sticks = np.empty_like(state.sticks)
    sticks[:, 0] = 1.0
    sticks[:, 1] = state.hyper.alpha
    for z in sorted(tree.children):
        if z == Tree.ROOT:
            continue
        sticks[z, 0] = 1.0 + counts[z]
        later = 0.0
        seen = False
        for w in tree.children[tree.parent[z]]:
            if seen:
                later += counts[w]
            if w == z:
                seen = True
        sticks[z, 1] = state.hyper.alpha + later
    state.sticks = sticks
    return sticks


def update_node_conc(state: ViState, x: np.ndarray) -> np.ndarray:
    """Dirichlet parameters per node: diffused parent mean, expected counts,
    and the sibling regulariser share, leaves first then upwards.

    The regulariser share divides by E[log beta] (negative), a fragile step
    inherited from the derivation; the result is clamped below to keep a
    valid Dirichlet.
    """
    tree = state.tree
    hyper = state.hyper
    k = hyper.trunc
    chosen = chosen_path_matrix(state)
    resp_sel = chosen_resp(state)
    expected = chosen.T @ resp_sel  # (nodes, K) expected counts through each node

    reg_weight = hyper.vi_weight
    if reg_weight > 0:
        q = _q_fractions(state, x)
        contrib_sel = state.contrib[state.path_ind]  # (N, nodes)
        reg_counts = np.einsum("nz,nzk->zk", contrib_sel, q)
    else:
        reg_counts = None

    new_conc = state.node_conc.copy()
    for z in sorted(tree.children, key=lambda w: (-tree.level[w], w)):
        if z == Tree.ROOT:
            continue
        prior = hyper.gamma * _node_mean_row(state, tree.parent[z])
        conc = prior.copy()
        conc[:k] += expected[z]
        if reg_counts is not None:
            logb = digamma(state.node_conc[z][:k]) - digamma(state.node_conc[z].sum())
            logb = np.minimum(logb, -1e-8)
            conc[:k] -= reg_weight * reg_counts[z] / logb
        new_conc[z] = np.maximum(conc, state.omega_floor)
        state.node_conc[z] = new_conc[z]
    return state.node_conc


def update_root_sticks(state: ViState, x: np.ndarray | None = None) -> np.ndarray:
    """Truncated stick-breaking Betas at the root from collapsed responsibilities."""
    hyper = state.hyper
    resp_sel = chosen_resp(state)
    per_comp = resp_sel.sum(axis=0)
    k = hyper.trunc
    tail = np.concatenate([np.cumsum(per_comp[::-1])[::-1][1:], [0.0]])
    sticks = np.empty((k, 2))
    sticks[:, 0] = 1.0 + per_comp
    sticks[:, 1] = hyper.gamma0 + tail
    state.root_sticks = sticks
    return sticks


def _kernel_weights(state: ViState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(w, q): responsibility weights and regulariser shares, both (N, K)."""
    w = chosen_resp(state)
    if state.hyper.vi_weight > 0:
        qf = _q_fractions(state, x)
        contrib_sel = state.contrib[state.path_ind]
        q = np.einsum("nz,nzk->nk", contrib_sel, qf)
    else:
        q = np.zeros_like(w)
    return w, q


def update_kernel_mean(k: int, state: ViState, x: np.ndarray) -> np.ndarray:
    """Solve the stationarity system for one kernel mean (shares frozen).

    Also refreshes the kernel covariance with the positive-part weights, the
    conjugate form the unregularised objective would give.  Raises when the
    regulariser makes the system indefinite.
    """
    w, q = _kernel_weights(state, x)
    return _solve_kernel(k, state, x, w[:, k], q[:, k], strict=True)


def _solve_kernel(
    k: int, state: ViState, x: np.ndarray, w: np.ndarray, q: np.ndarray, strict: bool
) -> np.ndarray:
    hyper = state.hyper
    rho = hyper.vi_weight
    cov_inv = np.linalg.inv(hyper.kernel_cov)
    prior_inv = np.linalg.inv(hyper.prior_cov)
    marg_inv = np.linalg.inv(hyper.kernel_cov + state.kernel_cov[k])

    a = cov_inv * w.sum() + prior_inv - rho * q.sum() * marg_inv
    b = cov_inv @ (w @ x) + prior_inv @ hyper.prior_mean - rho * marg_inv @ (q @ x)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        if strict:
            eig = np.linalg.eigvalsh(a)
            raise NumericalError(
                f"kernel {k}: stationarity system not positive definite "
                f"(eigenvalues {eig.min():.3g}..{eig.max():.3g}); "
                "reduce vi_weight or the regulariser share"
            ) from exc
        # indefinite surrogate: the frozen-share quadratic has no interior
        # maximum, so leave this component where it is
        return state.kernel_mean[k]
    state.kernel_mean[k] = cho_solve((chol, True), b)
    r_pos = np.maximum(w - rho * q, 0.0)
    state.kernel_cov[k] = np.linalg.inv(cov_inv * r_pos.sum() + prior_inv)
    return state.kernel_mean[k]


def update_kernels(state: ViState, x: np.ndarray) -> np.ndarray:
    """Refresh every kernel, skipping components whose system went indefinite."""
    w, q = _kernel_weights(state, x)
    for k in range(state.hyper.trunc):
        _solve_kernel(k, state, x, w[:, k], q[:, k], strict=False)
    return state.kernel_mean


def grad_relbo_mean(k: int, state: ViState, x: np.ndarray) -> np.ndarray:
    """Analytic objective gradient in one kernel mean (shares held at their
    current values, which is exact by the chain rule)."""
    hyper = state.hyper
    w, q = _kernel_weights(state, x)
    cov_inv = np.linalg.inv(hyper.kernel_cov)
    prior_inv = np.linalg.inv(hyper.prior_cov)
    marg_inv = np.linalg.inv(hyper.kernel_cov + state.kernel_cov[k])
    m = state.kernel_mean[k]
    diff = x - m
    grad = cov_inv @ (w[:, k] @ diff)
    grad = grad - prior_inv @ (m - hyper.prior_mean)
    grad = grad - hyper.vi_weight * (marg_inv @ (q[:, k] @ diff))
    return grad


# -- objective -------------------------------------------------------------------


def _beta_entropy(a: np.ndarray) -> float:
    a1, a2 = a[:, 0], a[:, 1]
    s = a1 + a2
    return float(
        np.sum(betaln(a1, a2) - (a1 - 1) * digamma(a1) - (a2 - 1) * digamma(a2) + (s - 2) * digamma(s))
    )


def _dirichlet_entropy(conc: np.ndarray) -> float:
    total = conc.sum()
    kk = len(conc)
    logb = gammaln(conc).sum() - gammaln(total)
    return float(logb + (total - kk) * digamma(total) - ((conc - 1) * digamma(conc)).sum())


def relbo(state: ViState, x: np.ndarray) -> float:
    """Evidence lower bound minus the weighted sibling-similarity regulariser.

    The intractable prior normaliser of the diffused weights enters through
    its standard lower bound, so the reported value stays a valid bound.
    """
    tree = state.tree
    hyper = state.hyper
    k = hyper.trunc
    d = hyper.dim
    w = chosen_resp(state)
    log_like = gauss_log_mean(state, x)
    chosen_leaf = state.leaf_of_path[state.path_ind]
    logw_nodes = node_log_weights(state)
    mean_nodes = node_mean_weights(state)

    # observation and component-label terms
    total = float((w * log_like).sum())
    total += float((w * logw_nodes[chosen_leaf][:, :k]).sum())
    # kernel prior
    prior_inv = np.linalg.inv(hyper.prior_cov)
    sign, logdet_prior = np.linalg.slogdet(hyper.prior_cov)
    for j in range(k):
        diff = state.kernel_mean[j] - hyper.prior_mean
        total += -0.5 * d * np.log(2 * np.pi) - 0.5 * logdet_prior
        total += -0.5 * float(diff @ prior_inv @ diff)
        total += -0.5 * float(np.trace(prior_inv @ state.kernel_cov[j]))
    # path prior and stick priors
    total += float(_stick_path_scores(state)[state.path_ind].sum())
    a = state.sticks[1:]
    if len(a):
        total += float(
            np.sum(np.log(hyper.alpha) + (hyper.alpha - 1) * (digamma(a[:, 1]) - digamma(a.sum(axis=1))))
        )
    r = state.root_sticks
    total += float(
        np.sum(np.log(hyper.gamma0) + (hyper.gamma0 - 1) * (digamma(r[:, 1]) - digamma(r.sum(axis=1))))
    )
    # diffused-weight priors through the Beta-function lower bound
    for z in sorted(tree.children):
        if z == Tree.ROOT:
            continue
        par = tree.parent[z]
        total += k * np.log(hyper.gamma) + float(logw_nodes[par].sum())
        total += float(((hyper.gamma * mean_nodes[par] - 1.0) * logw_nodes[z]).sum())
    # entropies
    total += float(-(w * np.log(np.maximum(w, LOG_FLOOR))).sum())
    if len(a):
        total += _beta_entropy(a)
    total += _beta_entropy(r)
    for z in sorted(tree.children):
        if z != Tree.ROOT:
            total += _dirichlet_entropy(state.node_conc[z])
    for j in range(k):
        sign, logdet = np.linalg.slogdet(state.kernel_cov[j])
        total += 0.5 * logdet + 0.5 * d * (1.0 + np.log(2 * np.pi))
    # similarity regulariser
    if hyper.vi_weight > 0:
        att = sibling_attraction(state, x)
        contrib_sel = state.contrib[state.path_ind]
        total -= hyper.vi_weight * float((att * contrib_sel).sum())
    return total


def elbo(state: ViState, x: np.ndarray) -> float:
    """The unregularised part of the objective (regulariser weight ignored)."""
    hyper = state.hyper
    if hyper.vi_weight == 0:
        return relbo(state, x)
    att = sibling_attraction(state, x)
    contrib_sel = state.contrib[state.path_ind]
    return relbo(state, x) + hyper.vi_weight * float((att * contrib_sel).sum())


# -- driver ----------------------------------------------------------------------

_PHASES = (
    ("paths", update_paths, False),
    ("resp", update_resp, True),
    ("sticks", update_sticks, True),
    ("node_conc", update_node_conc, True),
    ("root_sticks", update_root_sticks, True),
    ("kernels", update_kernels, True),
)


def _blend(state: ViState, old: dict, new: dict, t: float) -> None:
    """Convex mix of continuous parameters; indicators stay at the new value."""
    state.resp = old["resp"] + t * (new["resp"] - old["resp"])
    state.resp /= state.resp.sum(axis=2, keepdims=True)
    state.sticks = old["sticks"] + t * (new["sticks"] - old["sticks"])
    state.node_conc = old["node_conc"] + t * (new["node_conc"] - old["node_conc"])
    state.root_sticks = old["root_sticks"] + t * (new["root_sticks"] - old["root_sticks"])
    state.kernel_mean = old["kernel_mean"] + t * (new["kernel_mean"] - old["kernel_mean"])
    state.kernel_cov = old["kernel_cov"] + t * (new["kernel_cov"] - old["kernel_cov"])


def _guarded_phase(state: ViState, x: np.ndarray, update, blendable: bool, current: float) -> float:
    """Apply one update; if the objective drops, back off toward the old point."""
    old = state.snapshot()
    update(state, x)
    value = relbo(state, x)
    if np.isfinite(value) and value >= current - 1e-10:
        return value
    if blendable and old["resp"] is not None:
        new = state.snapshot()
        t = 0.5
        for _ in range(20):
            _blend(state, old, new, t)
            value = relbo(state, x)
            if np.isfinite(value) and value >= current - 1e-10:
                return value
            t *= 0.5
    state.restore(old)
    return relbo(state, x)


def fit_vi(
    config: ViConfig,
    x: np.ndarray,
    rng: np.random.Generator,
    skeleton: Tree | None = None,
) -> tuple[ViState, list[tuple[int, float, float]]]:
    """Coordinate ascent until the objective change falls under tolerance.

    Returns the state and the trace of (cycle, objective, delta).  A
    non-finite objective aborts and hands back the last finite state.
    """
    config.validate()
    hyper = config.hyper
    x = np.atleast_2d(np.asarray(x, float))
    tree = skeleton if skeleton is not None else build_skeleton(hyper.depth, config.branching, hyper.dim)
    state = init_state(tree, hyper, x, rng, config.omega_floor)
    update_resp(state, x)
    current = relbo(state, x)
    trace: list[tuple[int, float, float]] = []
    last_good = state.snapshot()
    for cycle in range(1, config.max_cycles + 1):
        previous = current
        for _, update, blendable in _PHASES:
            current = _guarded_phase(state, x, update, blendable, current)
            if not np.isfinite(current):
                state.restore(last_good)
                return state, trace
        delta = current - previous
        trace.append((cycle, current, delta))
        last_good = state.snapshot()
        if abs(delta) < config.tol:
            break
    return state, trace
