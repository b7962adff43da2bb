"""Monte-Carlo harness: data generation, scenario grids, contour grids.

Design columns are drawn i.i.d. Gamma(2,1) (shape-scale convention, mean
2); group-level deviations follow the zero-mean SDTN law tied to its fixed
effect, so every generated overall coefficient is nonnegative by
construction; errors are centered normal.

Replications are independent: replication r of a scenario derives its
seed from SeedSequence([scenario.seed, r]), so results do not depend on
execution order or worker count (CSLME_THREADS caps process workers).
"""

from dataclasses import dataclass, replace
import math
import os

import numpy as np

from .baseline import QuadratureUnderflowError, fit_pit, fit_unconstrained
from .estimate import FitConfig, fit, objective_for
from .metrics import r_squared, rmse
from .model import Dataset, GroupData, ModelSpec, Parameters, RandomEffects
from .optim import ConvergenceError, minimize_box
from .sdtn import SdtnParams, sdtn_ppf, variance_factor

ALL_METHODS = ("PLS", "PRLS", "ML", "REML", "PIT")


@dataclass(frozen=True)
class Scenario:
    """One simulation cell: sizes, structure, generating truth."""

    n: int
    p: int
    g: int
    alpha: tuple
    truth: Parameters
    replications: int = 200
    seed: int = 0
    intercept: bool = True
    gamma_convention: str = "shape-scale"

    def __post_init__(self):
        if self.n < self.g or self.g < 2:
            raise ValueError("need n >= g and at least two groups")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if self.gamma_convention not in ("shape-scale", "shape-rate"):
            raise ValueError(f"unknown gamma convention {self.gamma_convention!r}")
        object.__setattr__(self, "alpha", tuple(int(i) for i in self.alpha))
        if self.truth.beta.shape != (self.p,):
            raise ValueError("truth.beta length must equal p")
        if self.truth.varsigma.shape != (len(self.alpha),):
            raise ValueError("truth.varsigma length must equal |alpha|")

    def model_spec(self, constrained: bool = True) -> ModelSpec:
        return ModelSpec(alpha=self.alpha, intercept=self.intercept,
                         constrained=constrained)


@dataclass(frozen=True)
class ContourRequest:
    """Grid request: objective over two parameter labels, rest fixed."""

    objective: str
    vary: tuple
    ranges: tuple
    fixed: Parameters

    def __post_init__(self):
        if len(self.vary) != 2 or len(self.ranges) != 2:
            raise ValueError("exactly two varied parameters are required")
        for lo, hi, steps in self.ranges:
            if steps < 2 and not (steps == 1 and lo == hi):
                raise ValueError("each range needs steps >= 2 (or 1 with lo == hi)")


def group_sizes(n: int, g: int) -> list:
    """Split n rows as evenly as possible; remainder goes to earliest groups."""
    base, rem = divmod(n, g)
    return [base + (1 if ell < rem else 0) for ell in range(g)]


def gen_design(scenario: Scenario, seed=None) -> Dataset:
    """Design-only dataset: Gamma(2,1) columns, optional leading intercept."""
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    sizes = group_sizes(scenario.n, scenario.g)
    n_random_cols = scenario.p - (1 if scenario.intercept else 0)
    groups = []
    for ell, n_ell in enumerate(sizes):
        cols = rng.gamma(shape=2.0, scale=1.0, size=(n_ell, n_random_cols))
        X = np.column_stack([np.ones(n_ell), cols]) if scenario.intercept else cols
        groups.append(GroupData(group_id=ell + 1, y=None, X=X))
    return Dataset(tuple(groups))


def gen_response(design: Dataset, truth: Parameters, spec: ModelSpec, seed):
    """Attach SDTN random effects and normal errors to a generated design.

    Returns (completed dataset, per-group deviation truth). Every
    generated overall coefficient beta_i + gamma_{l,i} is nonnegative
    because the deviation support is [-beta_i, beta_i].
    """
    if np.any(truth.beta[list(spec.alpha)] < 0):
        raise ValueError("generating fixed effects on random columns must be >= 0")
    rng = np.random.default_rng(seed)
    g, k = design.g, spec.k
    gamma = np.zeros((g, k))
    for i, col in enumerate(spec.alpha):
        s = float(truth.varsigma[i])
        b = float(truth.beta[col])
        if s == 0.0 or b == 0.0:
            continue
        law = SdtnParams(0.0, s, b / s)
        gamma[:, i] = sdtn_ppf(rng.random(g), law)
    groups = []
    for ell, gd in enumerate(design.groups):
        mean = gd.X @ truth.beta + gd.X[:, list(spec.alpha)] @ gamma[ell]
        y = mean + rng.normal(0.0, truth.sigma, size=gd.n)
        groups.append(GroupData(group_id=gd.group_id, y=y, X=gd.X))
    return Dataset(tuple(groups)), RandomEffects(gamma)


def sdtn_sd(beta_i: float, varsigma_i: float) -> float:
    """Standard deviation of the deviation law tied to one coefficient."""
    s, b = abs(varsigma_i), abs(beta_i)
    if s == 0.0 or b == 0.0:
        return 0.0
    return s * math.sqrt(variance_factor(b / s))


def table_labels(spec: ModelSpec, p: int, g: int) -> list:
    """Labeled parameter set mirroring the reporting tables."""
    labels = []
    for col in spec.alpha:
        labels.extend(f"overall_g{ell + 1}_b{col}" for ell in range(g))
    labels.extend(f"beta{col}" for col in range(p) if col not in spec.alpha)
    labels.extend(f"s_gamma{col}" for col in spec.alpha)
    labels.append("sigma")
    return labels


def table_values(beta, varsigma, sigma, gamma, spec: ModelSpec, g: int,
                 normal_re: bool = False) -> dict:
    """Map the table labels to values for one parameter point.

    `normal_re` selects the untruncated-normal deviation sd (the scale
    itself) instead of the SDTN sd; used for the ML/REML baselines.
    """
    gamma = np.atleast_2d(gamma)
    out = {}
    for i, col in enumerate(spec.alpha):
        for ell in range(g):
            out[f"overall_g{ell + 1}_b{col}"] = float(beta[col] + gamma[ell, i])
    for col in range(len(beta)):
        if col not in spec.alpha:
            out[f"beta{col}"] = float(beta[col])
    for i, col in enumerate(spec.alpha):
        if normal_re:
            out[f"s_gamma{col}"] = float(abs(varsigma[i]))
        else:
            out[f"s_gamma{col}"] = sdtn_sd(float(beta[col]), float(varsigma[i]))
    out["sigma"] = float(sigma)
    return out


def _fit_method(method: str, data: Dataset, scenario: Scenario, rep_seed: int,
                pit_q: int, n_starts: int):
    method = method.upper()
    if method in ("PLS", "PRLS"):
        spec = scenario.model_spec(constrained=True)
        config = FitConfig(method=method, n_starts=n_starts, seed=rep_seed)
        res = fit(data, spec, config)
        est = table_values(res.params.beta, res.params.varsigma, res.params.sigma,
                           res.gamma.gamma, spec, scenario.g)
        return est, res.r2_marginal, res.r2_conditional
    spec = scenario.model_spec(constrained=False)
    if method in ("ML", "REML"):
        res = fit_unconstrained(data, spec, criterion=method, seed=rep_seed)
        est = table_values(res.beta, res.theta.varsigma, res.theta.sigma,
                           res.gamma.gamma, spec, scenario.g, normal_re=True)
        params = Parameters(beta=res.beta, varsigma=res.theta.varsigma,
                            sigma=res.theta.sigma)
        r2m, r2c = r_squared(params, data, spec)
        return est, r2m, r2c
    if method == "PIT":
        res = fit_pit(data, spec, q=pit_q)
        est = table_values(res.beta, res.theta.varsigma, res.theta.sigma,
                           res.gamma.gamma, spec, scenario.g)
        params = Parameters(beta=res.beta, varsigma=res.theta.varsigma,
                            sigma=res.theta.sigma)
        r2m, r2c = r_squared(params, data, spec)
        return est, r2m, r2c
    raise ValueError(f"unknown method {method!r}")


def _replication(scenario: Scenario, methods, rep: int, pit_q: int, n_starts: int):
    """Run one replication; returns (rep, per-method record or error string)."""
    ss = np.random.SeedSequence([scenario.seed, rep])
    design_seed, response_seed, fit_entropy = ss.spawn(3)
    rep_seed = int(fit_entropy.generate_state(1)[0])
    spec = scenario.model_spec(constrained=True)
    design = gen_design(scenario, seed=design_seed)
    data, gamma_truth = gen_response(design, scenario.truth, spec, response_seed)
    truth_vals = table_values(scenario.truth.beta, scenario.truth.varsigma,
                              scenario.truth.sigma, gamma_truth.gamma, spec,
                              scenario.g)
    labels = table_labels(spec, scenario.p, scenario.g)
    no_spread = [s for s in labels if not s.startswith("s_gamma")]
    out = {}
    for method in methods:
        try:
            est, r2m, r2c = _fit_method(method, data, scenario, rep_seed,
                                        pit_q, n_starts)
            out[method] = {
                "estimates": est,
                "truth": truth_vals,
                "rmse": rmse(est, truth_vals, labels),
                "rmse_core": rmse(est, truth_vals, no_spread),
                "r2_marginal": r2m,
                "r2_conditional": r2c,
            }
        except (QuadratureUnderflowError, ConvergenceError,
                np.linalg.LinAlgError) as exc:
            out[method] = {"error": f"{type(exc).__name__}: {exc}"}
    return rep, out


def worker_count() -> int:
    raw = os.environ.get("CSLME_THREADS", "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"CSLME_THREADS must be an integer, got {raw!r}") from exc
    return max(1, value)


@dataclass
class ScenarioResult:
    scenario: Scenario
    methods: tuple
    records: dict        # method -> list of per-rep dicts (successes)
    failures: dict       # method -> list of (rep, message)

    def summary(self, method: str) -> dict:
        recs = self.records[method]
        if not recs:
            return {"method": method, "n_ok": 0,
                    "n_failed": len(self.failures[method])}
        return {
            "method": method,
            "n_ok": len(recs),
            "n_failed": len(self.failures[method]),
            "rmse_median": float(np.median([r["rmse"] for r in recs])),
            "rmse_mean": float(np.mean([r["rmse"] for r in recs])),
            "rmse_core_median": float(np.median([r["rmse_core"] for r in recs])),
            "r2_marginal_mean": float(np.mean([r["r2_marginal"] for r in recs])),
            "r2_conditional_mean": float(np.mean([r["r2_conditional"] for r in recs])),
        }

    def estimate_rows(self) -> list:
        """Per method x parameter rows (mean truth, mean/median estimate)."""
        rows = []
        for method in self.methods:
            recs = self.records[method]
            if not recs:
                continue
            labels = list(recs[0]["estimates"])
            for label in labels:
                est = np.array([r["estimates"][label] for r in recs])
                tru = np.array([r["truth"][label] for r in recs])
                rows.append({
                    "method": method,
                    "parameter": label,
                    "true_mean": float(np.mean(tru)),
                    "estimate_mean": float(np.mean(est)),
                    "estimate_median": float(np.median(est)),
                })
        return rows


def run_scenario(scenario: Scenario, methods=("PLS", "PRLS", "REML"),
                 pit_q: int = 2, n_starts: int = 5) -> ScenarioResult:
    """Fit each method on each replication and aggregate.

    Per-replication failures (quadrature underflow, non-convergence) are
    recorded and excluded from the aggregates, with counts reported.
    """
    methods = tuple(m.upper() for m in methods)
    if not methods:
        raise ValueError("at least one method is required")
    for m in methods:
        if m not in ALL_METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {ALL_METHODS}")
    reps = range(scenario.replications)
    workers = worker_count()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                _replication_star,
                [(scenario, methods, rep, pit_q, n_starts) for rep in reps],
            ))
    else:
        results = [_replication(scenario, methods, rep, pit_q, n_starts)
                   for rep in reps]
    results.sort(key=lambda pair: pair[0])
    records = {m: [] for m in methods}
    failures = {m: [] for m in methods}
    for rep, out in results:
        for m in methods:
            if "error" in out[m]:
                failures[m].append((rep, out[m]["error"]))
            else:
                records[m].append(out[m])
    return ScenarioResult(scenario=scenario, methods=methods,
                          records=records, failures=failures)


def _replication_star(args):
    return _replication(*args)


# ---------------------------------------------------------------------------
# Parameter labels, contour grids, constrained-vs-free profile minimization
# ---------------------------------------------------------------------------


def parameter_labels(spec: ModelSpec, p: int) -> list:
    labels = [f"beta{j}" for j in range(p)]
    labels += [f"varsigma{col}" for col in spec.alpha]
    labels.append("sigma")
    return labels


def set_parameter(params: Parameters, spec: ModelSpec, label: str, value: float) -> Parameters:
    if label.startswith("beta"):
        j = int(label[4:])
        if not 0 <= j < params.beta.size:
            raise ValueError(f"unknown parameter label {label!r}")
        beta = params.beta.copy()
        beta[j] = value
        return replace(params, beta=beta)
    if label.startswith("varsigma"):
        col = int(label[8:])
        if col not in spec.alpha:
            raise ValueError(f"column {col} carries no random effect")
        vs = params.varsigma.copy()
        vs[spec.alpha.index(col)] = value
        return replace(params, varsigma=vs)
    if label == "sigma":
        return replace(params, sigma=value)
    raise ValueError(f"unknown parameter label {label!r}")


def contour_grid(request: ContourRequest, dataset: Dataset, spec: ModelSpec) -> np.ndarray:
    """Objective values on the Cartesian grid; failed cells become NaN.

    Returns an array of (value1, value2, objective) rows, row-major in the
    first varied parameter.
    """
    objective = objective_for(request.objective)
    (lo1, hi1, s1), (lo2, hi2, s2) = request.ranges
    grid1 = np.linspace(lo1, hi1, int(s1))
    grid2 = np.linspace(lo2, hi2, int(s2))
    rows = []
    for v1 in grid1:
        for v2 in grid2:
            try:
                point = set_parameter(request.fixed, spec, request.vary[0], float(v1))
                point = set_parameter(point, spec, request.vary[1], float(v2))
                val = objective(point, dataset, spec)
            except (ValueError, np.linalg.LinAlgError):
                val = np.nan
            rows.append((float(v1), float(v2), float(val)))
    return np.asarray(rows)


def minimize_labels(dataset: Dataset, spec: ModelSpec, fixed: Parameters,
                    labels, method: str = "PLS", constrained: bool = True,
                    x0=None, max_iter: int = 500):
    """Minimize the chosen objective over a subset of labeled parameters.

    All parameters outside `labels` stay at their `fixed` values. With
    `constrained`, beta/varsigma coordinates are kept nonnegative; without
    it they are free. Returns (values dict, objective value).
    """
    objective = objective_for(method)
    labels = list(labels)

    def params_at(x):
        point = fixed
        for lbl, v in zip(labels, x):
            point = set_parameter(point, spec, lbl,
                                  math.exp(v) if lbl == "sigma" else float(v))
        return point

    def fun(x):
        return objective(params_at(x), dataset, spec)

    if x0 is None:
        x0 = []
        for lbl in labels:
            if lbl == "sigma":
                x0.append(math.log(fixed.sigma))
            elif lbl.startswith("varsigma"):
                x0.append(float(fixed.varsigma[spec.alpha.index(int(lbl[8:]))]))
            else:
                x0.append(float(fixed.beta[int(lbl[4:])]))
    bounds = []
    for lbl in labels:
        if lbl == "sigma":
            bounds.append((None, None))
        elif constrained:
            bounds.append((0.0, None))
        else:
            bounds.append((None, None))
    res = minimize_box(fun, np.asarray(x0, dtype=float), bounds,
                       tol_obj=1e-11, tol_grad=1e-8, max_iter=max_iter)
    values = {lbl: (math.exp(v) if lbl == "sigma" else float(v))
              for lbl, v in zip(labels, res.x)}
    return values, float(res.fun)


# ---------------------------------------------------------------------------
# Built-in scenario truths (reporting-grid presets)
# ---------------------------------------------------------------------------


def _scenario(n, p, alpha, beta, varsigma, sigma=1.0, replications=200, seed=20240501):
    return Scenario(
        n=n, p=p, g=2, alpha=tuple(alpha),
        truth=Parameters(beta=np.asarray(beta, dtype=float),
                         varsigma=np.asarray(varsigma, dtype=float),
                         sigma=sigma),
        replications=replications, seed=seed,
    )


def builtin_scenarios() -> dict:
    """Named scenario grid with near-boundary and interior truths."""
    out = {}
    for n in (300, 500, 1000):
        out[f"intercept-p3-n{n}"] = _scenario(
            n, 3, (0,), beta=(0.072, 1.0, 1.0), varsigma=(0.058,))
    for n in (500, 1000, 2000):
        out[f"full-p3-n{n}"] = _scenario(
            n, 3, (0, 1, 2), beta=(0.63, 0.51, 1.02),
            varsigma=(0.54, 0.54, 0.54))
    for n in (1000, 2000, 4000):
        out[f"intercept-p7-n{n}"] = _scenario(
            n, 7, (0,), beta=(1.05, 1, 1, 1, 1, 1, 1), varsigma=(0.54,))
    out["merit-n30"] = _scenario(
        30, 3, (0,), beta=(0.072, 0.001, 0.001), varsigma=(0.058,),
        replications=200)
    return out
