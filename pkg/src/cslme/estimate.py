"""Sign-constrained estimation of (beta, varsigma, sigma).

The fixed effects cannot be profiled out once they are constrained, so the
penalized least squares (PLS) objective keeps them explicit:

    (y - X beta)^T V^{-1} (y - X beta) + ln|V|,     V = Z Lambda Z^T + sigma^2 I,

minimized over beta >= 0, varsigma >= 0, with Lambda carrying the
truncation-deflated random-effect variances. The penalized restricted
least squares (PRLS) variant adds ln|X^T V^{-1} X|. Both are minimized by
a projected limited-memory quasi-Newton method with central-difference
gradients and a small deterministic multi-start; the lowest-objective
start wins, ties broken by start index.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .model import (
    BlockDesign,
    Dataset,
    ModelSpec,
    Parameters,
    RandomEffects,
    re_variances,
)
from .optim import BoxResult, ConvergenceError, minimize_box
from . import metrics as _metrics
from . import ranef as _ranef

LOG_2PI = math.log(2.0 * math.pi)

METHODS = ("PLS", "PRLS")


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A block failed Cholesky factorization even after one jitter retry."""


class SingularDesignError(ValueError):
    """X^T V^{-1} X is rank deficient."""


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the constrained fit."""

    method: str = "PLS"
    n_starts: int = 5
    max_iter: int = 500
    tol_obj: float = 1e-9
    tol_grad: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.method.upper() not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        object.__setattr__(self, "method", self.method.upper())
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValueError("n_starts and max_iter must be positive")
        if not (self.tol_obj > 0 and self.tol_grad > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    params: Parameters
    gamma: RandomEffects
    objective: float
    objective_trace: np.ndarray
    start_index: int
    converged: bool
    r2_marginal: float
    r2_conditional: float
    method: str = "PLS"
    n_iter: int = 0
    start_objectives: list = field(default_factory=list)


def logdet_psd(blocks) -> float:
    """Sum of log-determinants of symmetric PD blocks via Cholesky.

    On a failed factorization, retries once with 1e-10 * trace/n added to
    the diagonal; a second failure raises.
    """
    total = 0.0
    for B in blocks:
        B = np.asarray(B, dtype=float)
        try:
            L = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            jitter = 1e-10 * float(np.trace(B)) / B.shape[0]
            try:
                L = np.linalg.cholesky(B + jitter * np.eye(B.shape[0]))
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(
                    "block is not positive definite after jitter retry"
                ) from exc
        total += 2.0 * float(np.sum(np.log(np.diag(L))))
    return total


def _design(dataset, spec) -> BlockDesign:
    if isinstance(dataset, BlockDesign):
        return dataset
    return BlockDesign(dataset, spec)


def _objective_core(design: BlockDesign, spec: ModelSpec, beta, varsigma, sigma,
                    restricted: bool) -> float:
    d = re_variances(beta, varsigma, spec.alpha)
    sol = design.solve(d, sigma)
    value = sol.quad_form_resid(beta) + sol.logdet_v
    if restricted:
        try:
            value += logdet_psd([sol.xt_vinv_x()])
        except NotPositiveDefiniteError as exc:
            raise SingularDesignError("X^T V^{-1} X is singular") from exc
    return value


def pls_objective(params: Parameters, dataset, spec: ModelSpec) -> float:
    """(y - X beta)^T V^{-1} (y - X beta) + ln|V| at the given parameters."""
    design = _design(dataset, spec)
    return _objective_core(design, spec, params.beta, params.varsigma, params.sigma,
                           restricted=False)


def prls_objective(params: Parameters, dataset, spec: ModelSpec) -> float:
    """PLS objective plus the restricted-likelihood term ln|X^T V^{-1} X|."""
    design = _design(dataset, spec)
    return _objective_core(design, spec, params.beta, params.varsigma, params.sigma,
                           restricted=True)


def approx_loglik(params: Parameters, dataset, spec: ModelSpec) -> float:
    """Normal-approximation log-likelihood -(n/2) ln 2pi - (PLS value)/2."""
    design = _design(dataset, spec)
    pls = _objective_core(design, spec, params.beta, params.varsigma, params.sigma,
                          restricted=False)
    return -0.5 * design.n * LOG_2PI - 0.5 * pls


def objective_for(method: str):
    method = method.upper()
    if method == "PLS":
        return pls_objective
    if method == "PRLS":
        return prls_objective
    raise ValueError(f"unknown method {method!r}")


def default_starts(design: BlockDesign, spec: ModelSpec, config: FitConfig) -> list:
    """Deterministic multi-start points.

    Start 0: least-squares coefficients clamped to the constraint cone,
    varsigma = 0.5*|beta_ols| on the random columns + 0.1*sd(y), sigma =
    residual sd. Remaining starts apply multiplicative log-normal jitter
    (sd 0.5) to every component, seeded from config.seed.
    """
    y = np.concatenate(design.ys)
    X = np.vstack(design.Xs)
    beta_ols, *_ = np.linalg.lstsq(X, y, rcond=None)
    sd_y = float(np.std(y))
    resid_sd = max(float(np.std(y - X @ beta_ols)), 1e-8 * max(sd_y, 1.0))
    beta0 = beta_ols.copy()
    if spec.constrained:
        clamp = np.ones(design.p, dtype=bool)
        clamp[list(spec.unconstrained_columns)] = False
        beta0[clamp] = np.maximum(beta0[clamp], 0.0)
    vs0 = 0.5 * np.abs(beta_ols[list(spec.alpha)]) + 0.1 * sd_y
    natural = np.concatenate([beta0, vs0, [resid_sd]])
    points = [natural]
    for s in range(1, config.n_starts):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, s]))
        points.append(natural * np.exp(rng.normal(0.0, 0.5, size=natural.size)))
    # sigma optimizes on the log scale; jitter acts on the natural scale
    return [np.concatenate([pt[:-1], [math.log(pt[-1])]]) for pt in points]


def _bounds_for(design: BlockDesign, spec: ModelSpec) -> list:
    y = np.concatenate(design.ys)
    log_sigma_floor = math.log(max(1e-6 * float(np.std(y)), 1e-12))
    beta_bounds = []
    for j in range(design.p):
        if spec.constrained and j not in spec.unconstrained_columns:
            beta_bounds.append((0.0, None))
        else:
            beta_bounds.append((None, None))
    return beta_bounds + [(0.0, None)] * spec.k + [(log_sigma_floor, None)]


def fit(dataset: Dataset, spec: ModelSpec, config: FitConfig | None = None) -> FitResult:
    """Multi-start constrained minimization of the PLS or PRLS objective.

    Returns the lowest-objective start with the fitted deviations and
    variance-explained summaries attached. Every returned parameter
    satisfies its bound exactly (projection, not tolerance).
    """
    if config is None:
        config = FitConfig()
    design = _design(dataset, spec)
    if spec.k < 1:
        raise ValueError("at least one random-effect column is required")
    p, k = design.p, spec.k
    restricted = config.method == "PRLS"

    def objective(x):
        return _objective_core(design, spec, x[:p], x[p:p + k], math.exp(x[-1]),
                               restricted)

    bounds = _bounds_for(design, spec)
    results: list[tuple[int, BoxResult]] = []
    failures = []
    for idx, x0 in enumerate(default_starts(design, spec, config)):
        try:
            res = minimize_box(objective, x0, bounds, tol_obj=config.tol_obj,
                               tol_grad=config.tol_grad, max_iter=config.max_iter)
        except (np.linalg.LinAlgError, FloatingPointError, SingularDesignError) as exc:
            failures.append((idx, repr(exc)))
            continue
        results.append((idx, res))
    if not results:
        raise ConvergenceError(
            f"all {config.n_starts} starts failed", diagnostics=failures
        )

    best_idx, best = results[0]
    for idx, res in results[1:]:
        if res.fun < best.fun - config.tol_obj:
            best_idx, best = idx, res
    x = best.x
    varsigma = x[p:p + k].copy()
    # a zero coefficient pins its deviation at 0, leaving the scale
    # unidentified (the objective is flat in it); report the canonical 0
    for i, col in enumerate(spec.alpha):
        if x[col] == 0.0:
            varsigma[i] = 0.0
    params = Parameters(beta=x[:p], varsigma=varsigma, sigma=math.exp(x[-1]))
    objective_value = objective_for(config.method)(params, design, spec)
    gamma = _ranef.solve_all(dataset, params, spec)
    r2m, r2c = _metrics.r_squared(params, dataset, spec)
    return FitResult(
        params=params,
        gamma=gamma,
        objective=objective_value,
        objective_trace=best.trace,
        start_index=best_idx,
        converged=best.converged,
        r2_marginal=r2m,
        r2_conditional=r2c,
        method=config.method,
        n_iter=best.n_iter,
        start_objectives=[(idx, res.fun, res.converged) for idx, res in results],
    )
