"""MCMC for the regularised hierarchical mixture model.

One sweep visits every datum in shuffled order (path Metropolis-Hastings
step followed by a fresh augmentation draw), then refreshes component
labels, tree weights, kernels and margin vectors.  The hinge-discounted
complete data likelihood recorded each sweep drives output selection: the
snapshot with the largest value among post-burn-in draws wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .errors import NumericalError, ParameterError
from .margin import (
    WEIGHT_FLOOR,
    GaussianFamily,
    MarginContext,
    is_sentinel,
    log_pseudo_likelihood,
    worst_violation,
    zeta,
)
from .model import Hyperparams, PathAssignment, Tree, ncrp_extend, stick_break
from .randkit import CanonicalGaussian, sample_canonical_gaussian, sample_dirichlet, sample_lambda


@dataclass
class ChainConfig:
    """Run-length and algorithm knobs for one chain."""

    hyper: Hyperparams
    burnin: int = 5000
    draws: int = 10000
    zeta_clamp: float = 1e-8
    prop_conc: float = 100.0       # Dirichlet proposal concentration for weight moves
    adapt_weights: bool = True     # tune prop_conc during burn-in only

    def validate(self) -> None:
        if self.burnin < 0:
            raise ParameterError(f"burnin must be non-negative, got {self.burnin}")
        if self.draws < 1:
            raise ParameterError(f"need at least one draw, got {self.draws}")
        if self.zeta_clamp <= 0:
            raise ParameterError("zeta_clamp must be positive")
        if self.prop_conc <= 0:
            raise ParameterError("prop_conc must be positive")


@dataclass
class ChainState:
    """Everything the sampler reads and mutates.

    The observation matrix is shared, never copied; clones copy only the
    latent structure.
    """

    x: np.ndarray
    tree: Tree
    assignments: list[PathAssignment]
    kernels: np.ndarray
    hyper: Hyperparams
    iteration: int = 0

    @cached_property
    def family(self) -> GaussianFamily:
        return GaussianFamily(self.hyper.kernel_cov)

    @cached_property
    def precisions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(component-mean prior precision, kernel precision, prior potential)."""
        prior_prec = np.linalg.inv(self.hyper.prior_cov)
        return prior_prec, self.family.inv, prior_prec @ self.hyper.prior_mean

    def clone(self) -> "ChainState":
        return ChainState(
            x=self.x,
            tree=self.tree.clone(),
            assignments=[
                PathAssignment(a.path, a.violation, a.aug, a.component) for a in self.assignments
            ],
            kernels=self.kernels.copy(),
            hyper=self.hyper,
            iteration=self.iteration,
        )


@dataclass
class Trace:
    """Per-sweep record plus the best post-burn-in snapshot."""

    cdl: list[float] = field(default_factory=list)
    rcdl: list[float] = field(default_factory=list)
    accept_rate: list[float] = field(default_factory=list)
    best_rcdl: float = -np.inf
    best_state: ChainState | None = None


def recount(tree: Tree, assignments) -> dict[int, int]:
    """Visit counts recomputed from scratch; used by consistency checks."""
    counts = {z: 0 for z in tree.children}
    for a in assignments:
        for z in a.path:
            counts[z] += 1
    return counts


# -- per-datum moves ---------------------------------------------------------


def _worst_violation_occupied(x, path, ctx, tree):
    """Like worst_violation but ignores zero-count siblings.

    Mid-step the tree briefly holds nodes no datum passes through (the
    detached path, before pruning); those are not part of the state being
    scored and must not act as margin competitors.
    """
    best = None
    best_val = -np.inf
    for level in range(1, len(path)):
        v = path[level]
        for sib in tree.siblings(v):
            if tree.counts[sib] == 0:
                continue
            val = zeta(x, path, level, sib, ctx)
            if val > best_val:
                best, best_val = (level, sib), val
    if best is None:
        return (1, path[1]), 0.0
    return best, best_val


def mh_step_path(
    n: int,
    state: ChainState,
    ctx: MarginContext,
    rng: np.random.Generator,
) -> bool:
    """Propose a fresh path from the nested-CRP prior and accept by likelihood ratio.

    The datum is detached first so the proposal matches the conditional
    prior; prior and proposal then cancel and the ratio reduces to the two
    pseudo-likelihoods.  The current path is scored before any proposal
    nodes exist, the proposed one against occupied nodes only, so each side
    sees exactly the sibling sets of its own state.  Rejection restores the
    previous state, and pruning clears whichever path lost.
    """
    tree = state.tree
    family = state.family
    a = state.assignments[n]
    x = state.x[n]
    lam = a.aug
    tree.detach_path(a.path)

    s_old, z_old = _worst_violation_occupied(x, a.path, ctx, tree)
    log_g_old = log_pseudo_likelihood(x, lam, a.path, z_old, tree, ctx, state.kernels, family)

    new_path = ncrp_extend(tree, state.hyper, rng)
    s_new, z_new = _worst_violation_occupied(x, new_path, ctx, tree)
    log_g_new = log_pseudo_likelihood(x, lam, new_path, z_new, tree, ctx, state.kernels, family)

    accept = np.log(rng.random()) < log_g_new - log_g_old
    if accept:
        tree.attach_path(new_path)
        a.path = new_path
        a.violation = s_new
    else:
        tree.attach_path(a.path)
        a.violation = s_old
    tree.prune_empty()
    return bool(accept)


def resample_lambda(
    n: int,
    state: ChainState,
    ctx: MarginContext,
    rng: np.random.Generator,
    zeta_clamp: float = 1e-8,
) -> float:
    """Refresh the augmentation variable from its conditional given the stored violation."""
    a = state.assignments[n]
    level, sib = a.violation
    val = zeta(state.x[n], a.path, level, sib, ctx)
    lam = sample_lambda(ctx.cost, val, rng, zeta_clamp)
    a.aug = lam
    return lam


def resample_component(n: int, state: ChainState, rng: np.random.Generator) -> int:
    """Gibbs draw of the component label under leaf weights times kernel likelihoods."""
    a = state.assignments[n]
    k = state.hyper.trunc
    weights = state.tree.weights[a.path[-1]][:k]
    logs = np.log(np.maximum(weights, WEIGHT_FLOOR)) + state.family.loglik(
        state.kernels, state.x[n]
    )
    top = logs.max()
    if not np.isfinite(top):
        raise NumericalError(f"component weights for datum {n} are all zero")
    cum = np.cumsum(np.exp(logs - top))
    comp = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), k - 1)
    a.component = comp
    return comp


# -- block moves -------------------------------------------------------------


def resample_kernels(state: ChainState, rng: np.random.Generator) -> np.ndarray:
    """Conjugate Gaussian update of every component mean given its members."""
    hyper = state.hyper
    k, d = hyper.trunc, hyper.dim
    prior_prec, kernel_prec, base = state.precisions

    sums = np.zeros((k, d))
    counts = np.zeros(k)
    for n, a in enumerate(state.assignments):
        sums[a.component] += state.x[n]
        counts[a.component] += 1

    for j in range(k):
        prec = prior_prec + counts[j] * kernel_prec
        pot = base + kernel_prec @ sums[j]
        state.kernels[j] = sample_canonical_gaussian(CanonicalGaussian(pot, prec), rng)
    return state.kernels


def dirichlet_logpdf(x: np.ndarray, conc: np.ndarray) -> float:
    """Dirichlet log density tolerant of structurally-zero components.

    Entries with zero concentration must carry (numerically) zero mass;
    positive-concentration entries are floored inside the log.
    """
    x = np.asarray(x, float)
    conc = np.asarray(conc, float)
    pos = conc > 0
    if np.any(x[~pos] > 1e-9):
        return -np.inf
    xs = np.maximum(x[pos], WEIGHT_FLOOR)
    c = conc[pos]
    return float(gammaln(c.sum()) - gammaln(c).sum() + ((c - 1.0) * np.log(xs)).sum())


def gem_logpdf(beta: np.ndarray, gamma0: float) -> float:
    """Log density of truncated stick-breaking weights with Beta(1, gamma0) breaks.

    Evaluated in weight space: break proportions are recovered from the
    weights and the triangular Jacobian of the change of variables is
    included.
    """
    beta = np.asarray(beta, float)
    k = len(beta) - 1
    logp = 0.0
    remaining = 1.0
    for i in range(k):
        if remaining <= WEIGHT_FLOOR:
            return -np.inf
        o = beta[i] / remaining
        o = min(max(o, WEIGHT_FLOOR), 1.0 - 1e-16)
        logp += np.log(gamma0) + (gamma0 - 1.0) * np.log1p(-o) - np.log(remaining)
        remaining *= 1.0 - o
    return float(logp)


def _weight_target(tree: Tree, z: int, beta: np.ndarray, gamma: float, gamma0: float) -> float:
    """Unnormalised log posterior of one node's weights given parent and children."""
    if z == Tree.ROOT:
        logp = gem_logpdf(beta, gamma0)
    else:
        logp = dirichlet_logpdf(beta, gamma * tree.weights[tree.parent[z]])
    for child in tree.children[z]:
        logp += dirichlet_logpdf(tree.weights[child], gamma * beta)
    return logp


def _log_accept_weights(tree: Tree, z: int, cur, prop, gamma, gamma0, kappa) -> float:
    """Fused log acceptance ratio for one weight move.

    Valid when proposal and current share their zero pattern, which the
    Dirichlet proposal guarantees; mismatched patterns fall back to the
    plain two-sided evaluation.
    """
    pos = cur > 0
    if not np.array_equal(pos, prop > 0):
        return (
            _weight_target(tree, z, prop, gamma, gamma0)
            - _weight_target(tree, z, cur, gamma, gamma0)
            + dirichlet_logpdf(cur, kappa * prop)
            - dirichlet_logpdf(prop, kappa * cur)
        )
    cur_p = cur[pos]
    prop_p = prop[pos]
    log_cur = np.log(cur_p)
    log_prop = np.log(prop_p)
    # prior of the node itself
    if z == Tree.ROOT:
        total = gem_logpdf(prop, gamma0) - gem_logpdf(cur, gamma0)
    else:
        parent_conc = gamma * tree.weights[tree.parent[z]][pos]
        total = float(((parent_conc - 1.0) * (log_prop - log_cur)).sum())
    # children likelihoods: same data, different concentrations
    for child in tree.children[z]:
        logx = np.log(np.maximum(tree.weights[child][pos], WEIGHT_FLOOR))
        total += float(
            -(gammaln(gamma * prop_p) - gammaln(gamma * cur_p)).sum()
            + (gamma * (prop_p - cur_p) * logx).sum()
        )
    # proposal correction: q(cur | prop) - q(prop | cur)
    total += float(
        -(gammaln(kappa * prop_p) - gammaln(kappa * cur_p)).sum()
        + ((kappa * prop_p - 1.0) * log_cur - (kappa * cur_p - 1.0) * log_prop).sum()
    )
    return total


def resample_weights(
    state: ChainState,
    rng: np.random.Generator,
    prop_conc: float = 100.0,
) -> tuple[int, int]:
    """Refresh every node's weight vector.

    Leaves are conjugate: Dirichlet(diffused parent prior + component counts
    of the data sitting there).  Internal nodes and the root take one
    Metropolis-Hastings step each, proposing from a Dirichlet centred at the
    current value and targeting own prior times the children's densities.
    Returns (accepted, proposed) for the MH part, so callers can adapt the
    proposal concentration.
    """
    tree = state.tree
    hyper = state.hyper
    k = hyper.trunc

    leaf_counts: dict[int, np.ndarray] = {}
    for a in state.assignments:
        leaf = a.path[-1]
        if leaf not in leaf_counts:
            leaf_counts[leaf] = np.zeros(k + 1)
        leaf_counts[leaf][a.component] += 1.0

    accepted = 0
    proposed = 0
    for z in sorted(tree.children.keys(), key=lambda w: (tree.level[w], w)):
        if z != Tree.ROOT and tree.is_leaf(z):
            conc = hyper.gamma * tree.weights[tree.parent[z]]
            counts = leaf_counts.get(z)
            if counts is not None:
                conc = conc + counts
            tree.weights[z] = sample_dirichlet(conc, rng)
            continue
        current = tree.weights[z]
        prop = sample_dirichlet(prop_conc * current, rng)
        proposed += 1
        log_accept = _log_accept_weights(
            tree, z, current, prop, hyper.gamma, hyper.gamma0, prop_conc
        )
        # nan (two off-support evaluations) counts as a rejection
        if not np.isnan(log_accept) and np.log(rng.random()) < log_accept:
            tree.weights[z] = prop
            accepted += 1
    return accepted, proposed


def gibbs_eta(
    z: int,
    state: ChainState,
    ctx: MarginContext,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gibbs draw of one node's margin vector from its Gaussian conditional.

    A datum contributes only when its stored violation sits at this node's
    level and either its path node or the violating sibling is this node;
    the two index sets are disjoint.  Sentinel (sibling-free) violations
    carry no margin information.  With no contributors the draw falls back
    to the prior.
    """
    hyper = state.hyper
    d = hyper.dim
    c = ctx.cost
    eps0 = ctx.eps0
    level_z = state.tree.level[z]
    prior_prec = 1.0 / (hyper.eta_prior_scale**2)

    if d == 1:
        # scalar arithmetic; the 1-d case dominates desk-scale runs
        prec = prior_prec
        pot = 0.0
        for n, a in enumerate(state.assignments):
            if a.violation is None or a.aug is None:
                continue
            lev, sib = a.violation
            if lev != level_z:
                continue
            v_at = a.path[lev]
            if v_at == sib:
                continue  # sentinel
            on_path = v_at == z
            if not on_path and sib != z:
                continue
            xv = state.x[n, 0]
            lam = a.aug
            cc = c * c / lam
            coeff = c * (lam + c * eps0) / lam
            other = ctx.margins[sib][0] if on_path else ctx.margins[v_at][0]
            pot += (coeff if on_path else -coeff) * xv + cc * other * xv * xv
            prec += cc * xv * xv
        draw = np.array([pot / prec + rng.standard_normal() / np.sqrt(prec)])
        state.tree.margins[z] = draw
        return draw

    precision = prior_prec * np.eye(d)
    potential = np.zeros(d)
    for n, a in enumerate(state.assignments):
        if a.violation is None or a.aug is None:
            continue
        lev, sib = a.violation
        if lev != level_z or is_sentinel(a.path, a.violation):
            continue
        on_path = a.path[lev] == z
        if not on_path and sib != z:
            continue
        x = state.x[n]
        lam = a.aug
        coeff = c * (lam + c * eps0) / lam
        if on_path:
            other = ctx.margins[sib]
            potential += coeff * x + (c * c / lam) * (other @ x) * x
        else:
            other = ctx.margins[a.path[lev]]
            potential += -coeff * x + (c * c / lam) * (other @ x) * x
        precision += (c * c / lam) * np.outer(x, x)

    try:
        draw = sample_canonical_gaussian(CanonicalGaussian(potential, precision), rng)
    except NumericalError:
        jitter = 1e-10 * np.trace(precision) / d
        try:
            draw = sample_canonical_gaussian(
                CanonicalGaussian(potential, precision + jitter * np.eye(d)), rng
            )
        except NumericalError as exc:
            raise NumericalError(f"margin precision for node {z} is not positive definite") from exc
    state.tree.margins[z] = draw
    return draw


# -- likelihood bookkeeping ----------------------------------------------------


def log_path_prior(tree: Tree, alpha: float) -> float:
    """log p of the whole path configuration under the nested CRP.

    Zero-count nodes (possible mid-step, before pruning) are not part of the
    configuration and are skipped.
    """
    total = 0.0
    for z, kids in tree.children.items():
        occupied = [c for c in kids if tree.counts[c] > 0]
        if not occupied:
            continue
        total += gammaln(alpha) + len(occupied) * np.log(alpha) - gammaln(tree.counts[z] + alpha)
        for child in occupied:
            total += gammaln(tree.counts[child])
    return float(total)


def crp_path_log_prob(tree: Tree, path, alpha: float) -> float:
    """log probability of one path under the sequential CRP at current counts.

    Path nodes nobody visits are costed as fresh-table choices, which is how
    the proposal would have to recreate them.
    """
    total = 0.0
    for level in range(1, len(path)):
        parent, z = path[level - 1], path[level]
        n = sum(tree.counts[w] for w in tree.children[parent])
        if tree.counts.get(z, 0) > 0:
            total += np.log(tree.counts[z]) - np.log(n + alpha)
        else:
            total += np.log(alpha) - np.log(n + alpha)
    return float(total)


def cdl(state: ChainState) -> float:
    """Complete data likelihood: component-conditional fit plus the path prior."""
    hyper = state.hyper
    family = state.family
    total = log_path_prior(state.tree, hyper.alpha)
    for n, a in enumerate(state.assignments):
        w = state.tree.weights[a.path[-1]][a.component]
        diff = state.x[n] - state.kernels[a.component]
        quad = float(diff @ family.inv @ diff)
        total += np.log(max(w, WEIGHT_FLOOR)) + family.log_norm - 0.5 * quad
    return float(total)


def rcdl(state: ChainState, ctx: MarginContext) -> float:
    """CDL discounted by the hinge penalty of the stored worst violations."""
    penalty = 0.0
    for n, a in enumerate(state.assignments):
        level, sib = a.violation
        penalty += max(0.0, zeta(state.x[n], a.path, level, sib, ctx))
    return cdl(state) - 2.0 * ctx.cost * penalty


# -- driver ---------------------------------------------------------------------


def init_state(hyper: Hyperparams, x: np.ndarray, rng: np.random.Generator) -> ChainState:
    """Prior-seeded starting state for the given observations."""
    k, d = hyper.trunc, hyper.dim
    x = np.atleast_2d(np.asarray(x, float))
    breaks = np.clip(rng.beta(1.0, hyper.gamma0, size=k), 1e-12, 1.0)
    tree = Tree(stick_break(breaks, k), hyper.eta_prior_scale * rng.standard_normal(d))
    chol_prior = np.linalg.cholesky(hyper.prior_cov)
    kernels = hyper.prior_mean + rng.standard_normal((k, d)) @ chol_prior.T

    state = ChainState(x=x, tree=tree, assignments=[], kernels=kernels, hyper=hyper)
    ctx = MarginContext.from_tree(tree, hyper.margin_eps, hyper.margin_cost)
    for n in range(x.shape[0]):
        path = ncrp_extend(tree, hyper, rng)
        tree.attach_path(path)
        a = PathAssignment(path=path)
        a.violation, _ = worst_violation(x[n], path, ctx, tree)
        a.aug = sample_lambda(hyper.margin_cost, 0.0, rng)
        a.component = int(rng.integers(k))
        state.assignments.append(a)
    return state


def refresh_violations(state: ChainState, ctx: MarginContext) -> None:
    """Re-derive every stored worst violation from the current tree and margins."""
    for n, a in enumerate(state.assignments):
        a.violation, _ = worst_violation(state.x[n], a.path, ctx, state.tree)


def sweep(
    state: ChainState,
    ctx: MarginContext,
    rng: np.random.Generator,
    zeta_clamp: float = 1e-8,
    prop_conc: float = 100.0,
) -> tuple[int, int, int]:
    """One full iteration over all conditionals.

    Returns (path moves accepted, weight moves accepted, weight moves
    proposed).  Violations are re-derived before the margin sweep, because
    earlier path moves may have changed sibling sets, and again afterwards
    so recorded quantities reflect the new margins.
    """
    n_data = state.x.shape[0]
    accepted = 0
    for n in rng.permutation(n_data):
        accepted += mh_step_path(int(n), state, ctx, rng)
        resample_lambda(int(n), state, ctx, rng, zeta_clamp)
    for n in range(n_data):
        resample_component(n, state, rng)
    w_acc, w_prop = resample_weights(state, rng, prop_conc)
    resample_kernels(state, rng)
    refresh_violations(state, ctx)
    for z in sorted(state.tree.children.keys()):
        gibbs_eta(z, state, ctx, rng)
    refresh_violations(state, ctx)
    return accepted, w_acc, w_prop


def run_chain(
    config: ChainConfig,
    x: np.ndarray,
    rng: np.random.Generator,
) -> tuple[Trace, ChainState]:
    """Burn in, draw, record the trace, and return the max-RCDL snapshot.

    The snapshot keeps its raw tree; use ``merge_single_chains`` for the
    presentation form with only-children fused into their parents.
    """
    config.validate()
    hyper = config.hyper
    x = np.atleast_2d(np.asarray(x, float))
    if x.shape[1] != hyper.dim:
        raise ParameterError(
            f"data dimension {x.shape[1]} does not match hyperparams ({hyper.dim})"
        )

    state = init_state(hyper, x, rng)
    ctx = MarginContext.from_tree(state.tree, hyper.margin_eps, hyper.margin_cost)
    n_data = x.shape[0]
    trace = Trace()
    prop_conc = config.prop_conc
    mh_accepted = 0
    mh_total = 0
    w_accepted = 0
    w_proposed = 0

    for it in range(config.burnin + config.draws):
        state.iteration = it
        acc, w_acc, w_prop = sweep(state, ctx, rng, config.zeta_clamp, prop_conc)
        mh_accepted += acc
        mh_total += n_data
        w_accepted += w_acc
        w_proposed += w_prop

        if config.adapt_weights and it < config.burnin and (it + 1) % 50 == 0 and w_proposed > 0:
            rate = w_accepted / w_proposed
            if rate < 0.2:
                prop_conc = min(prop_conc * 2.0, 1e8)
            elif rate > 0.4:
                prop_conc = max(prop_conc / 2.0, 1.0)
            w_accepted = w_proposed = 0

        value_cdl = cdl(state)
        value_rcdl = rcdl(state, ctx)
        trace.cdl.append(value_cdl)
        trace.rcdl.append(value_rcdl)
        trace.accept_rate.append(mh_accepted / mh_total)
        if it >= config.burnin and value_rcdl > trace.best_rcdl:
            trace.best_rcdl = value_rcdl
            trace.best_state = state.clone()
    return trace, trace.best_state


def merge_single_chains(tree: Tree, assignments) -> tuple[Tree, list[tuple[int, ...]]]:
    """Presentation form: fuse every only-child into its parent.

    Returns a fresh tree and the shortened per-datum paths.  Weights and
    margins of surviving nodes are kept; levels become depths in the merged
    tree.
    """
    out = tree.clone()
    changed = True
    while changed:
        changed = False
        for z in list(out.children.keys()):
            if z == Tree.ROOT or z not in out.parent:
                continue
            parent = out.parent[z]
            if len(out.children[parent]) != 1:
                continue
            for child in out.children[z]:
                out.parent[child] = parent
            out.children[parent] = list(out.children[z])
            for name in (out.children, out.parent, out.weights, out.margins, out.level, out.counts):
                name.pop(z, None)
            changed = True
            break

    def _relevel(z: int, depth: int) -> None:
        out.level[z] = depth
        for child in out.children[z]:
            _relevel(child, depth + 1)

    _relevel(Tree.ROOT, 0)
    paths = []
    for a in assignments:
        path = a.path if isinstance(a, PathAssignment) else a
        paths.append(tuple(z for z in path if z in out.children))
    return out, paths
