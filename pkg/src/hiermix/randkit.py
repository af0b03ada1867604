"""Distribution primitives used by the samplers.

Everything takes an explicit ``numpy.random.Generator`` so that runs are
reproducible bit-for-bit on one platform.  The inverse-Gaussian sampler uses
the Michael/Schucany/Haas transformation-with-rejection construction in a
rationalised form that stays stable for extreme mean values; that stability
is what allows the hinge augmentation variable to be drawn through the
reciprocal route even when the margin violation is clamped close to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, NumericalError, ParameterError

# Lower clamp applied to |cost * violation| before forming the IG mean.
DEFAULT_ZETA_CLAMP = 1e-8

_TINY = float(np.finfo(float).tiny)


@dataclass(frozen=True)
class CanonicalGaussian:
    """Multivariate Gaussian in canonical (information) form.

    ``potential`` is the linear coefficient and ``precision`` the quadratic
    one, so the moment form is ``N(precision^-1 potential, precision^-1)``.
    """

    potential: np.ndarray
    precision: np.ndarray

    def moment_form(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (mean, covariance)."""
        c, low = cho_factor(self.precision)
        mean = cho_solve((c, low), self.potential)
        cov = cho_solve((c, low), np.eye(len(self.potential)))
        return mean, cov


@dataclass(frozen=True)
class GigParams:
    """Parameters of the generalised inverse Gaussian x^(rho-1) exp{-(a x + b/x)/2}."""

    rho: float
    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ParameterError(f"gig parameters must be positive, got a={self.a}, b={self.b}")


def sample_inverse_gaussian(mu: float, shape: float, rng: np.random.Generator) -> float:
    """Draw from the inverse Gaussian IG(mu, shape).

    Mean ``mu``, variance ``mu^3/shape``.  The candidate root of the MSH
    quadratic is evaluated in a rationalised form (no subtraction of nearly
    equal terms), so the sampler remains accurate for ``mu`` up to ~1e12.
    """
    if mu <= 0 or shape <= 0:
        raise ParameterError(f"inverse Gaussian needs mu>0 and shape>0, got ({mu}, {shape})")
    nu = rng.standard_normal()
    w = mu * nu * nu / shape
    if w == 0.0:
        return mu
    # smaller root of the quadratic, written as mu * (1 - 2/(1 + sqrt(1+4/w)))
    x = mu * (1.0 - 2.0 / (1.0 + np.sqrt(1.0 + 4.0 / w)))
    if rng.random() <= mu / (mu + x):
        return x
    return mu * mu / x


def sample_lambda(
    c: float,
    zeta: float,
    rng: np.random.Generator,
    zeta_clamp: float = DEFAULT_ZETA_CLAMP,
) -> float:
    """Draw the hinge augmentation variable given a margin violation.

    The target is GIG(1/2, 1, (c*zeta)^2); it is produced as the reciprocal
    of an IG(1/|c*zeta|, 1) draw.  |c*zeta| is clamped below at ``zeta_clamp``
    so the IG mean stays finite when the violation vanishes.
    """
    if c <= 0:
        raise ParameterError(f"cost coefficient must be positive, got {c}")
    scale = max(abs(c * zeta), zeta_clamp)
    return 1.0 / sample_inverse_gaussian(1.0 / scale, 1.0, rng)


def gig_density(x: float, p: GigParams) -> float:
    """Unnormalised GIG density x^(rho-1) exp{-(a x + b/x)/2}; x must be positive."""
    if x <= 0:
        raise DomainError(f"gig density defined for x>0, got {x}")
    return x ** (p.rho - 1.0) * np.exp(-(p.a * x + p.b / x) / 2.0)


def sample_canonical_gaussian(g: CanonicalGaussian, rng: np.random.Generator) -> np.ndarray:
    """Sample from a canonical-form Gaussian via Cholesky of the precision."""
    lam = np.asarray(g.precision, dtype=float)
    if lam.shape == (1, 1):
        prec = lam[0, 0]
        if prec <= 0:
            raise NumericalError("precision matrix is not positive definite")
        mean = np.asarray(g.potential, dtype=float)[0] / prec
        return np.array([mean + rng.standard_normal() / np.sqrt(prec)])
    try:
        lower = np.linalg.cholesky(lam)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("precision matrix is not positive definite") from exc
    mean = np.linalg.solve(lam, np.asarray(g.potential, dtype=float))
    z = rng.standard_normal(len(mean))
    # upper-triangular back-substitution gives noise with covariance lam^-1
    return mean + np.linalg.solve(lower.T, z)


def _log_gamma_samples(shapes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """logs of Gamma(shape, 1) draws, stable for very small shapes.

    Uses G(a) = G(a+1) * U^(1/a), so the result never underflows to -inf in
    linear space before it is needed.  Shapes are clipped just high enough
    that the exponent cannot overflow: clipped entries come out around
    -1e305, i.e. zero mass after normalisation.
    """
    g = rng.gamma(shapes + 1.0)
    u = rng.random(len(shapes))
    np.maximum(u, _TINY, out=u)
    np.log(u, out=u)
    u /= np.maximum(shapes, 1e-305)
    np.log(g, out=g)
    g += u
    return g


def sample_dirichlet(conc: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw that maps zero concentrations to exactly zero mass.

    Positive entries are sampled in log space (gamma-ratio construction), so
    tiny concentrations cannot underflow the whole vector to zero, and the
    result is kept strictly positive on its support so downstream log
    densities stay exact.
    """
    conc = np.asarray(conc, dtype=float)
    low = conc.min()
    if low < 0:
        raise ParameterError("dirichlet concentrations must be non-negative")
    if low > 0:
        logs = _log_gamma_samples(conc, rng)
        top = logs.max()
        if np.isfinite(top):
            w = np.exp(logs - top)
            w /= w.sum()
            w = np.maximum(w, _TINY)
            return w / w.sum()
        out = np.zeros_like(conc)
        out[np.argmax(conc)] = 1.0
        return out
    if conc.sum() <= 0:
        raise ParameterError("dirichlet concentration vector sums to zero")
    out = np.zeros_like(conc)
    pos = np.flatnonzero(conc > 0)
    if len(pos) == 1:
        out[pos[0]] = 1.0
        return out
    logs = _log_gamma_samples(conc[pos], rng)
    top = logs.max()
    if not np.isfinite(top):
        # every positive entry underflowed; all the mass sits at the largest shape
        out[pos[np.argmax(conc[pos])]] = 1.0
        return out
    w = np.exp(logs - top)
    w = w / w.sum()
    w = np.maximum(w, _TINY)
    out[pos] = w / w.sum()
    return out
