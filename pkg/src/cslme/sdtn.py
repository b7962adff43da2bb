"""Truncated normal and SDTN distribution kernel.

Densities, moments, inverse-CDF sampling and linear transforms for the
symmetric doubly truncated normal (SDTN) family: a normal with location mu
and scale eta truncated to [mu - rho*eta, mu + rho*eta]. The truncation
half-width is expressed in units of the scale, so a single positive ratio
rho controls how far the law is from the untruncated normal (rho -> inf)
and from the degenerate point-mass limit (rho -> 0).

All functions are pure; samplers take an explicit seed and own their
generator state.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import erf, ndtri

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT_2 = math.sqrt(2.0)

# Below this ratio the closed-form variance factor is a ratio of vanishing
# terms; switch to the series expansion rho^2/3 - 2 rho^4/45.
SMALL_RHO = 1e-3


class DegenerateMassError(ValueError):
    """Truncation interval carries no representable probability mass."""


@dataclass(frozen=True)
class TnParams:
    """Truncated normal with location mu, scale eta and support [a, b].

    a = -inf, b = +inf recovers the untruncated normal.
    """

    mu: float
    eta: float
    a: float
    b: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"scale eta must be positive, got {self.eta}")
        if not self.a < self.b:
            raise ValueError(f"need a < b, got [{self.a}, {self.b}]")


@dataclass(frozen=True)
class SdtnParams:
    """SDTN law: truncated normal on [mu - rho*eta, mu + rho*eta]."""

    mu: float
    eta: float
    rho: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"scale eta must be positive, got {self.eta}")
        if not self.rho > 0:
            raise ValueError(f"truncation ratio rho must be positive, got {self.rho}")

    @property
    def lower(self) -> float:
        return self.mu - self.rho * self.eta

    @property
    def upper(self) -> float:
        return self.mu + self.rho * self.eta

    def as_tn(self) -> TnParams:
        return TnParams(self.mu, self.eta, self.lower, self.upper)


def std_normal_pdf(x):
    """Standard normal density, vectorized."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / _SQRT_2PI
    return out if out.ndim else float(out)


def std_normal_cdf(x):
    """Standard normal CDF via the error function, vectorized."""
    x = np.asarray(x, dtype=float)
    out = 0.5 * (1.0 + erf(x / _SQRT_2))
    return out if out.ndim else float(out)


def std_normal_ppf(q):
    """Standard normal quantile function."""
    q = np.asarray(q, dtype=float)
    out = ndtri(q)
    return out if out.ndim else float(out)


def _central_mass(rho: float) -> float:
    """P(|N(0,1)| <= rho) = 2*Phi(rho) - 1, computed as erf(rho/sqrt(2)).

    The erf form stays accurate for small rho where the subtraction of two
    CDF values near 1/2 would cancel.
    """
    return float(erf(rho / _SQRT_2))


def tn_pdf(x, p: TnParams):
    """Truncated normal density; exactly 0 outside [a, b]."""
    ap = (p.a - p.mu) / p.eta if np.isfinite(p.a) else -np.inf
    bp = (p.b - p.mu) / p.eta if np.isfinite(p.b) else np.inf
    mass = std_normal_cdf(bp) - std_normal_cdf(ap)
    if mass <= 0.0:
        raise DegenerateMassError(
            f"truncation [{p.a}, {p.b}] has zero mass under N({p.mu}, {p.eta}^2)"
        )
    x = np.asarray(x, dtype=float)
    xi = (x - p.mu) / p.eta
    dens = std_normal_pdf(xi) / (p.eta * mass)
    out = np.where((x >= p.a) & (x <= p.b), dens, 0.0)
    return out if out.ndim else float(out)


def tn_moments(p: TnParams):
    """Mean and variance of a truncated normal.

    Infinite bounds enter through the limits phi(+-inf) = 0 and
    x*phi(x) -> 0.
    """
    if np.isfinite(p.a):
        ap = (p.a - p.mu) / p.eta
        phi_a = std_normal_pdf(ap)
        aphi_a = ap * phi_a
        cdf_a = std_normal_cdf(ap)
    else:
        phi_a = aphi_a = cdf_a = 0.0
    if np.isfinite(p.b):
        bp = (p.b - p.mu) / p.eta
        phi_b = std_normal_pdf(bp)
        bphi_b = bp * phi_b
        cdf_b = std_normal_cdf(bp)
    else:
        phi_b = bphi_b = 0.0
        cdf_b = 1.0
    mass = cdf_b - cdf_a
    if mass <= 0.0:
        raise DegenerateMassError(
            f"truncation [{p.a}, {p.b}] has zero mass under N({p.mu}, {p.eta}^2)"
        )
    ratio = (phi_a - phi_b) / mass
    mean = p.mu + p.eta * ratio
    var = p.eta ** 2 * (1.0 + (aphi_a - bphi_b) / mass - ratio ** 2)
    return mean, var


def sdtn_pdf(x, p: SdtnParams):
    """SDTN density: phi(xi) / (eta * (2*Phi(rho) - 1)) on the support."""
    mass = _central_mass(p.rho)
    x = np.asarray(x, dtype=float)
    xi = (x - p.mu) / p.eta
    dens = std_normal_pdf(xi) / (p.eta * mass)
    out = np.where((x >= p.lower) & (x <= p.upper), dens, 0.0)
    return out if out.ndim else float(out)


def sdtn_cdf(x, p: SdtnParams):
    """SDTN distribution function, clamped to [0, 1] outside the support."""
    x = np.asarray(x, dtype=float)
    xi = (x - p.mu) / p.eta
    mass = _central_mass(p.rho)
    raw = (std_normal_cdf(xi) - std_normal_cdf(-p.rho)) / mass
    out = np.clip(raw, 0.0, 1.0)
    out = np.where(x < p.lower, 0.0, out)
    out = np.where(x > p.upper, 1.0, out)
    return out if out.ndim else float(out)


def sdtn_ppf(q, p: SdtnParams):
    """SDTN quantile function (inverse CDF) for q in [0, 1]."""
    q = np.asarray(q, dtype=float)
    if np.any((q < 0.0) | (q > 1.0)):
        raise ValueError("quantile levels must lie in [0, 1]")
    mass = _central_mass(p.rho)
    z = ndtri(std_normal_cdf(-p.rho) + q * mass)
    out = np.clip(p.mu + p.eta * z, p.lower, p.upper)
    return out if out.ndim else float(out)


def variance_factor(rho: float) -> float:
    """Variance deflation of an SDTN relative to eta^2.

    Closed form 1 - 2*rho*phi(rho)/(2*Phi(rho)-1); for rho below SMALL_RHO
    the two-term series rho^2/3 - 2*rho^4/45 is used instead, which keeps
    the value finite and smooth through the rho -> 0 limit.

    The factor lies in [0, 1], vanishes as rho -> 0 and increases to 1 as
    the truncation widens.
    """
    if not rho > 0:
        raise ValueError(f"truncation ratio rho must be positive, got {rho}")
    if rho < SMALL_RHO:
        r2 = rho * rho
        return r2 / 3.0 - 2.0 * r2 * r2 / 45.0
    return 1.0 - 2.0 * rho * float(std_normal_pdf(rho)) / _central_mass(rho)


def sdtn_variance(p: SdtnParams) -> float:
    """Variance of an SDTN law: eta^2 * variance_factor(rho)."""
    return p.eta ** 2 * variance_factor(p.rho)


def sdtn_sample(p: SdtnParams, count: int, seed) -> np.ndarray:
    """Draw `count` i.i.d. SDTN variates by inverse-CDF transform.

    Deterministic given the seed; every draw lies inside the support.
    `seed` may be an int, a SeedSequence or a Generator.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    u = rng.random(count)
    return sdtn_ppf(u, p)


def sdtn_linear_transform(p: SdtnParams, k0: float, k1: float) -> SdtnParams:
    """Law of k0 + k1 * x for x ~ SDTN(mu, eta^2, rho).

    The ratio rho is preserved; location and scale map affinely. k1 = 0
    would collapse the law to a point mass and is rejected.
    """
    if k1 == 0:
        raise ValueError("k1 must be nonzero")
    return SdtnParams(k0 + k1 * p.mu, abs(k1) * p.eta, p.rho)


def standardized_sum(laws, samples, weights=None) -> np.ndarray:
    """Centered, scaled (weighted) row sums of per-law draws.

    `samples` has one column per law, one row per draw. Each row is mapped
    to sum_i w_i*(x_i - mu_i) / t_n with t_n^2 = sum_i w_i^2 * Var[x_i];
    for heterogeneous SDTN laws the output converges in distribution to
    N(0, 1) as the number of laws grows.
    """
    laws = list(laws)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != len(laws):
        raise ValueError(
            f"sample columns ({samples.shape[1]}) != number of laws ({len(laws)})"
        )
    if weights is None:
        w = np.ones(len(laws))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(laws),):
            raise ValueError("one weight per law required")
    mus = np.array([p.mu for p in laws])
    variances = np.array([sdtn_variance(p) for p in laws])
    t_n = math.sqrt(float(np.sum(w ** 2 * variances)))
    if t_n == 0.0:
        raise ValueError("all laws are degenerate: zero total variance")
    return (samples - mus) @ w / t_n
