"""Brute-force target for the enumerable toy: depth 1, two components, three
data in one dimension.

Enumerates every (partition, component-vector) atom and integrates out tree
weights (transformed Gauss-Legendre), kernels (conjugate closed form),
margins (Gauss-Hermite) and the hinge augmentation (exact identity), giving
the exact posterior the sampler must match.
"""

import itertools
from math import gamma as gamma_fn

import numpy as np
from scipy import stats
from scipy.special import gammaln

# blocks sorted by their smallest member, matching canonical_partition
PARTITIONS = [
    ((0, 1, 2),),
    ((0, 1), (2,)),
    ((0, 2), (1,)),
    ((0,), (1, 2)),
    ((0,), (1,), (2,)),
]


def _path_prob(blocks, alpha, n):
    j = len(blocks)
    val = alpha**j * gamma_fn(alpha) / gamma_fn(n + alpha)
    for b in blocks:
        val *= gamma_fn(len(b))
    return val


def _weight_integral(blocks, comps, gamma, gamma0, trunc, quad_points=48):
    """E over root sticks and leaf weights of prod_n beta_{leaf(n), c_n}.

    Works in transformed stick space (the Beta(1, g0) measure becomes
    uniform) and uses the Dirichlet-multinomial form for each leaf.
    """
    counts = []
    for b in blocks:
        m = np.zeros(trunc + 1)
        for n in b:
            m[comps[n]] += 1
        counts.append(m)

    nodes, wts = np.polynomial.legendre.leggauss(quad_points)
    t = 0.5 * nodes + 0.5
    w = 0.5 * wts
    o = 1.0 - t ** (1.0 / gamma0)

    total = 0.0
    for o1, w1 in zip(o, w):
        for o2, w2 in zip(o, w):
            beta0 = np.array([o1, o2 * (1 - o1), (1 - o1) * (1 - o2)])
            conc = gamma * beta0
            val = 0.0
            for m in counts:
                val += gammaln(gamma) - gammaln(gamma + m.sum())
                val += (gammaln(conc + m) - gammaln(conc)).sum()
            total += w1 * w2 * np.exp(val)
    return total


def _kernel_integral(comps, x, sigma2, phi2, trunc):
    """prod_k of the conjugate marginal likelihood of component k's members."""
    val = 1.0
    for k in range(trunc):
        idx = [n for n, c in enumerate(comps) if c == k]
        if not idx:
            continue
        pts = np.asarray([x[n] for n in idx])
        cov = sigma2 * np.eye(len(idx)) + phi2 * np.ones((len(idx), len(idx)))
        val *= stats.multivariate_normal.pdf(pts, mean=np.zeros(len(idx)), cov=cov)
    return val


def _margin_integral(blocks, x, cost, eps0, nu0, quad_points=40):
    """E over leaf margins of the hinge discount prod_n exp(-2C max(0, zeta_n))."""
    j = len(blocks)
    if j == 1:
        return 1.0
    nodes, wts = np.polynomial.hermite_e.hermegauss(quad_points)
    wts = wts / np.sqrt(2 * np.pi)
    etas = nu0 * nodes

    grids = np.meshgrid(*([etas] * j), indexing="ij")
    weight = np.ones(grids[0].shape)
    for axis in range(j):
        shape = [1] * j
        shape[axis] = quad_points
        weight = weight * wts.reshape(shape)

    total = np.zeros(grids[0].shape)
    for bi, b in enumerate(blocks):
        for n in b:
            worst = np.full(grids[0].shape, -np.inf)
            for other in range(j):
                if other == bi:
                    continue
                v = eps0 - (grids[bi] - grids[other]) * x[n]
                worst = np.maximum(worst, v)
            total += -2.0 * cost * np.maximum(0.0, worst)
    return float((np.exp(total) * weight).sum())


def toy_target(x, alpha, gamma, gamma0, cost, eps0, nu0, sigma2, phi2, trunc=2):
    """Normalised probability of every (partition, components) atom."""
    x = np.asarray(x, float).ravel()
    n = len(x)
    atoms = {}
    for blocks in PARTITIONS:
        pv = _path_prob(blocks, alpha, n)
        pe = _margin_integral(blocks, x, cost, eps0, nu0)
        for comps in itertools.product(range(trunc), repeat=n):
            pb = _weight_integral(blocks, comps, gamma, gamma0, trunc)
            pt = _kernel_integral(comps, x, sigma2, phi2, trunc)
            atoms[(blocks, comps)] = pv * pe * pb * pt
    total = sum(atoms.values())
    return {key: val / total for key, val in atoms.items()}


def canonical_partition(assignments):
    """Partition induced by shared leaves, blocks sorted by smallest member."""
    by_leaf = {}
    for n, a in enumerate(assignments):
        by_leaf.setdefault(a.path[-1], []).append(n)
    blocks = sorted((tuple(sorted(v)) for v in by_leaf.values()), key=lambda b: b[0])
    return tuple(blocks)
