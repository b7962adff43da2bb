"""Command-line surface: ingest CSVs, fit, simulate, contour, ranef.

Subcommands
-----------
fit       fit one model to a long-format CSV, write a JSON/CSV result doc
simulate  run a scenario config through the Monte-Carlo harness
contour   evaluate a PLS/PRLS objective on a 2-d parameter grid
ranef     recompute per-group deviations from a saved fit document

Exit codes: 0 success, 1 input/config error, 2 numerical non-convergence
(the result document is still written with diagnostics).

Config files are flat `key = value` text; `#` starts a comment. All JSON
numbers round-trip losslessly; stdout summaries are rounded to 3 decimals.
"""

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .baseline import QuadratureUnderflowError, fit_pit, fit_unconstrained
from .estimate import FitConfig, fit
from .metrics import r_squared
from .model import Dataset, GroupData, ModelSpec, Parameters
from .optim import ConvergenceError
from .ranef import solve_all
from .sim import (
    ContourRequest,
    Scenario,
    builtin_scenarios,
    contour_grid,
    gen_design,
    gen_response,
    run_scenario,
    sdtn_sd,
)

METHOD_CHOICES = ("PLS", "PRLS", "ML", "REML", "PIT")


class SchemaError(ValueError):
    """Malformed input file or configuration."""


@dataclass(frozen=True)
class InputSchema:
    """Column roles for long-format CSV ingestion.

    `random_effect_columns` may include the literal token "intercept"
    (when the intercept flag is set) in addition to feature names.
    """

    group_column: str
    response_column: str
    feature_columns: tuple
    random_effect_columns: tuple = field(default_factory=tuple)
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        object.__setattr__(self, "random_effect_columns",
                           tuple(self.random_effect_columns))
        for col in self.random_effect_columns:
            if col == "intercept":
                if not self.intercept:
                    raise SchemaError(
                        "random-effect token 'intercept' requires the intercept flag"
                    )
            elif col not in self.feature_columns:
                raise SchemaError(
                    f"random-effect column {col!r} is not a feature column"
                )

    @property
    def model_columns(self) -> tuple:
        head = ("intercept",) if self.intercept else ()
        return head + self.feature_columns

    def alpha(self) -> tuple:
        cols = self.model_columns
        return tuple(sorted(cols.index(c) for c in self.random_effect_columns))


def ingest(path, schema: InputSchema):
    """Parse a long-format CSV into (Dataset, ModelSpec).

    Groups are ordered by first appearance; rows keep file order. Raises
    SchemaError with the offending row/column on any malformed cell.
    """
    try:
        return _ingest(path, schema)
    except (csv.Error, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: not a readable CSV file ({exc})") from None


def _ingest(path, schema: InputSchema):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise SchemaError(f"{path}: duplicate header columns {dupes}")
        needed = [schema.group_column, schema.response_column, *schema.feature_columns]
        for col in needed:
            if col not in header:
                raise SchemaError(f"{path}: column {col!r} not found in header {header}")
        idx = {col: header.index(col) for col in needed}

        order: list = []
        rows_by_group: dict = {}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}: row {row_no} has {len(row)} cells, header has {len(header)}"
                )
            gid = row[idx[schema.group_column]].strip()
            if not gid:
                raise SchemaError(f"{path}: row {row_no}: empty group label")
            values = []
            for col in (schema.response_column, *schema.feature_columns):
                cell = row[idx[col]].strip()
                if not cell:
                    raise SchemaError(f"{path}: row {row_no}: missing value in {col!r}")
                try:
                    values.append(float(cell))
                except ValueError:
                    raise SchemaError(
                        f"{path}: row {row_no}: non-numeric cell {cell!r} in {col!r}"
                    ) from None
            if gid not in rows_by_group:
                order.append(gid)
                rows_by_group[gid] = []
            rows_by_group[gid].append(values)

    if not order:
        raise SchemaError(f"{path}: no data rows")
    if len(order) < 2:
        raise SchemaError(
            f"{path}: found a single group {order[0]!r}; at least 2 groups required"
        )
    groups = []
    for gid in order:
        block = np.asarray(rows_by_group[gid], dtype=float)
        y = block[:, 0]
        feats = block[:, 1:]
        X = np.column_stack([np.ones(len(y)), feats]) if schema.intercept else feats
        groups.append(GroupData(group_id=gid, y=y, X=X))
    dataset = Dataset(tuple(groups))
    spec = ModelSpec(alpha=schema.alpha(), intercept=schema.intercept,
                     constrained=True)
    return dataset, spec


# ---------------------------------------------------------------------------
# key = value config files
# ---------------------------------------------------------------------------


def read_config(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _cfg_float_list(cfg, key):
    return [float(v) for v in cfg[key].replace(",", " ").split()]


def _cfg_int_list(cfg, key):
    return [int(v) for v in cfg[key].replace(",", " ").split()]


def _scenario_from_config(cfg: dict) -> Scenario:
    if "scenario" in cfg:
        name = cfg["scenario"]
        registry = builtin_scenarios()
        if name not in registry:
            raise SchemaError(
                f"unknown built-in scenario {name!r}; available: {sorted(registry)}"
            )
        base = registry[name]
        reps = int(cfg.get("replications", base.replications))
        seed = int(cfg.get("seed", base.seed))
        if reps < 1:
            raise SchemaError("replications must be positive")
        return Scenario(n=base.n, p=base.p, g=base.g, alpha=base.alpha,
                        truth=base.truth, replications=reps, seed=seed,
                        intercept=base.intercept)
    try:
        truth = Parameters(beta=np.asarray(_cfg_float_list(cfg, "beta")),
                           varsigma=np.asarray(_cfg_float_list(cfg, "varsigma")),
                           sigma=float(cfg["sigma"]))
        scenario = Scenario(
            n=int(cfg["n"]), p=int(cfg["p"]), g=int(cfg["g"]),
            alpha=tuple(_cfg_int_list(cfg, "alpha")),
            truth=truth,
            replications=int(cfg.get("replications", 200)),
            seed=int(cfg.get("seed", 0)),
            intercept=cfg.get("intercept", "true").lower() in ("1", "true", "yes"),
        )
    except KeyError as exc:
        raise SchemaError(f"scenario config missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise SchemaError(f"invalid scenario config: {exc}") from None
    return scenario


# ---------------------------------------------------------------------------
# result documents
# ---------------------------------------------------------------------------


def _config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _fit_document(method, schema, spec, dataset, params, gamma, diagnostics,
                  objective, loglik, seed, run_config):
    r2m, r2c = r_squared(params, dataset, spec)
    cols = list(schema.model_columns)
    alpha = list(spec.alpha)
    overall = [
        [float(params.beta[col] + gamma.gamma[ell, i]) for i, col in enumerate(alpha)]
        for ell in range(dataset.g)
    ]
    normal_re = method in ("ML", "REML")
    s_gamma = [
        float(abs(params.varsigma[i])) if normal_re
        else sdtn_sd(float(params.beta[col]), float(params.varsigma[i]))
        for i, col in enumerate(alpha)
    ]
    at_bound = gamma.at_bound if gamma.at_bound is not None else np.zeros_like(
        gamma.gamma, dtype=bool)
    return {
        "spec": {
            "method": method,
            "columns": cols,
            "alpha": alpha,
            "random_effect_columns": [cols[i] for i in alpha],
            "intercept": spec.intercept,
            "constrained": spec.constrained,
            "n_groups": dataset.g,
            "n_rows": dataset.n,
        },
        "parameters": {
            "beta": [float(b) for b in params.beta],
            "varsigma": [float(v) for v in params.varsigma],
            "sigma": float(params.sigma),
        },
        "random_effects": {
            "group_ids": [str(g) for g in dataset.group_ids],
            "gamma": [[float(v) for v in row] for row in gamma.gamma],
            "overall": overall,
            "at_bound": [[bool(v) for v in row] for row in at_bound],
        },
        "metrics": {
            "r2_marginal": r2m,
            "r2_conditional": r2c,
            "objective": objective,
            "loglik": loglik,
            "s_gamma": s_gamma,
        },
        "diagnostics": diagnostics,
        "provenance": {
            "seed": seed,
            "version": __version__,
            "config_hash": _config_hash(run_config),
        },
    }


def _write_document(doc: dict, out, fmt: str):
    if fmt == "json":
        text = json.dumps(doc, indent=2)
        _write_text(out, text + "\n")
        return
    rows = [("section", "key", "value")]

    def flatten(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                flatten(f"{prefix}.{k}" if prefix else k, v)
        elif isinstance(obj, list):
            flatten(prefix, {str(i): v for i, v in enumerate(obj)})
        else:
            section, _, key = prefix.partition(".")
            rows.append((section, key, repr(obj) if isinstance(obj, float) else str(obj)))

    flatten("", doc)
    _write_csv(out, rows)


def _write_text(out, text):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _write_csv(out, rows):
    if out in (None, "-"):
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerows(rows)
    else:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)


def _num(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _schema_from_args(args) -> InputSchema:
    features = tuple(c.strip() for c in args.features.split(",") if c.strip())
    raneff = tuple(c.strip() for c in (args.random_effects or "").split(",") if c.strip())
    return InputSchema(
        group_column=args.group_col,
        response_column=args.response_col,
        feature_columns=features,
        random_effect_columns=raneff,
        intercept=args.intercept,
    )


def cmd_fit(args) -> int:
    schema = _schema_from_args(args)
    dataset, spec = ingest(args.data, schema)
    if spec.k < 1:
        raise SchemaError("at least one random-effect column is required")
    method = args.method.upper()
    run_config = {
        "method": method, "seed": args.seed, "starts": args.starts,
        "pit_q": args.pit_q, "schema": {
            "group": schema.group_column, "response": schema.response_column,
            "features": list(schema.feature_columns),
            "random_effects": list(schema.random_effect_columns),
            "intercept": schema.intercept,
        },
    }
    try:
        return _run_fit_method(args, method, schema, dataset, spec, run_config)
    except (ConvergenceError, QuadratureUnderflowError) as exc:
        doc = {
            "spec": {"method": method},
            "diagnostics": {"converged": False, "error": f"{type(exc).__name__}: {exc}"},
            "provenance": {"seed": args.seed, "version": __version__,
                           "config_hash": _config_hash(run_config)},
        }
        _write_document(doc, args.out, args.format)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def _run_fit_method(args, method, schema, dataset, spec, run_config) -> int:
    converged = True
    if method in ("PLS", "PRLS"):
        config = FitConfig(method=method, n_starts=args.starts, seed=args.seed)
        res = fit(dataset, spec, config)
        params, gamma = res.params, res.gamma
        objective, loglik = res.objective, None
        converged = res.converged
        diagnostics = {
            "converged": res.converged,
            "n_iter": res.n_iter,
            "start_index": res.start_index,
            "start_objectives": [
                {"start": i, "objective": f, "converged": c}
                for i, f, c in res.start_objectives
            ],
            "objective_trace": [float(v) for v in res.objective_trace],
        }
    elif method in ("ML", "REML"):
        spec = ModelSpec(alpha=spec.alpha, intercept=spec.intercept, constrained=False)
        res = fit_unconstrained(dataset, spec, criterion=method, seed=args.seed)
        params = Parameters(beta=res.beta, varsigma=res.theta.varsigma,
                            sigma=res.theta.sigma)
        gamma = res.gamma
        objective, loglik = None, res.loglik
        converged = res.converged
        diagnostics = {"converged": res.converged, "n_iter": res.n_iter}
    elif method == "PIT":
        res = fit_pit(dataset, spec, q=args.pit_q)
        params = Parameters(beta=res.beta, varsigma=res.theta.varsigma,
                            sigma=res.theta.sigma)
        gamma = res.gamma
        objective, loglik = None, res.loglik
        converged = res.converged
        diagnostics = {"converged": res.converged, "n_iter": res.n_iter,
                       "quadrature_order": args.pit_q}
    else:
        raise SchemaError(f"unknown method {args.method!r}")

    doc = _fit_document(method, schema, spec, dataset, params, gamma, diagnostics,
                        objective, loglik, args.seed, run_config)
    _write_document(doc, args.out, args.format)
    if args.out not in (None, "-"):
        _print_fit_summary(doc)
    return 0 if converged else 2


def _print_fit_summary(doc):
    cols = doc["spec"]["columns"]
    beta = doc["parameters"]["beta"]
    print(f"method: {doc['spec']['method']}")
    for name, b in zip(cols, beta):
        print(f"  {name:>14s}  {b:10.3f}")
    for name, s in zip(doc["spec"]["random_effect_columns"], doc["metrics"]["s_gamma"]):
        print(f"  {'sd(' + name + ')':>14s}  {s:10.3f}")
    print(f"  {'sd(resid)':>14s}  {doc['parameters']['sigma']:10.3f}")
    print(f"  marginal R2 {doc['metrics']['r2_marginal']:.3f}   "
          f"conditional R2 {doc['metrics']['r2_conditional']:.3f}")


def cmd_simulate(args) -> int:
    cfg = read_config(args.config)
    scenario = _scenario_from_config(cfg)
    methods = tuple(
        m.strip().upper() for m in cfg.get("methods", "PLS,PRLS,REML").split(",")
    )
    pit_q = int(cfg.get("pit_q", 2))
    n_starts = int(cfg.get("starts", 5))
    resolved = {
        "n": scenario.n, "p": scenario.p, "g": scenario.g,
        "alpha": list(scenario.alpha),
        "beta": [float(b) for b in scenario.truth.beta],
        "varsigma": [float(v) for v in scenario.truth.varsigma],
        "sigma": float(scenario.truth.sigma),
        "replications": scenario.replications, "seed": scenario.seed,
        "methods": list(methods), "pit_q": pit_q, "starts": n_starts,
        "replication_seeds": "SeedSequence([seed, rep])",
    }
    print("resolved config: " + json.dumps(resolved, sort_keys=True))
    result = run_scenario(scenario, methods=methods, pit_q=pit_q, n_starts=n_starts)
    rows = [("method", "parameter", "true_mean", "estimate_mean", "estimate_median")]
    for row in result.estimate_rows():
        rows.append((row["method"], row["parameter"], _num(row["true_mean"]),
                     _num(row["estimate_mean"]), _num(row["estimate_median"])))
    for method in methods:
        s = result.summary(method)
        for key in ("rmse_median", "rmse_mean", "rmse_core_median",
                    "r2_marginal_mean", "r2_conditional_mean"):
            if key in s:
                rows.append((method, key, "", _num(s[key]), ""))
        rows.append((method, "n_failed", "", str(s["n_failed"]), ""))
    _write_csv(args.out, rows)
    return 0


def cmd_contour(args) -> int:
    cfg = read_config(args.config)
    for key in ("objective", "vary", "range1", "range2"):
        if key not in cfg:
            raise SchemaError(f"contour config missing key {key!r}")
    vary = tuple(v.strip() for v in cfg["vary"].split(","))
    ranges = []
    for key in ("range1", "range2"):
        parts = _cfg_float_list(cfg, key)
        if len(parts) != 3:
            raise SchemaError(f"{key} must be 'lo, hi, steps'")
        ranges.append((parts[0], parts[1], int(parts[2])))

    if args.data:
        if not (args.group_col and args.response_col and args.features):
            raise SchemaError(
                "--data requires --group-col, --response-col and --features")
        schema = _schema_from_args(args)
        dataset, spec = ingest(args.data, schema)
    else:
        scenario = _scenario_from_config(cfg)
        spec = scenario.model_spec()
        seed = np.random.SeedSequence([scenario.seed, int(cfg.get("data_rep", 0))])
        d_seed, r_seed = seed.spawn(2)
        design = gen_design(scenario, seed=d_seed)
        dataset, _ = gen_response(design, scenario.truth, spec, r_seed)

    try:
        fixed = Parameters(beta=np.asarray(_cfg_float_list(cfg, "beta")),
                           varsigma=np.asarray(_cfg_float_list(cfg, "varsigma")),
                           sigma=float(cfg["sigma"]))
    except KeyError as exc:
        raise SchemaError(f"contour config missing key {exc.args[0]!r}") from None
    if fixed.beta.shape != (dataset.p,):
        raise SchemaError(
            f"fixed beta has {fixed.beta.size} entries, model has p={dataset.p}"
        )
    labels = [f"beta{j}" for j in range(dataset.p)]
    labels += [f"varsigma{c}" for c in spec.alpha] + ["sigma"]
    for v in vary:
        if v not in labels:
            raise SchemaError(f"unknown parameter {v!r}; valid labels: {labels}")
    request = ContourRequest(objective=cfg["objective"].upper(), vary=vary,
                             ranges=tuple(ranges), fixed=fixed)
    grid = contour_grid(request, dataset, spec)
    rows = [(vary[0], vary[1], "objective")]
    rows += [(_num(a), _num(b), _num(v)) for a, b, v in grid]
    _write_csv(args.out, rows)

    if "levels" in cfg:
        levels = _cfg_float_list(cfg, "levels")
        tol = float(cfg.get("level_tol", 0.01))
        side_rows = [("level", vary[0], vary[1], "objective")]
        for level in levels:
            for a, b, v in grid:
                if np.isfinite(v) and abs(v - level) <= tol:
                    side_rows.append((_num(level), _num(a), _num(b), _num(v)))
        side_out = None
        if args.out not in (None, "-"):
            side_out = str(args.out) + ".levels.csv"
        _write_csv(side_out, side_rows)
    return 0


def cmd_ranef(args) -> int:
    schema = _schema_from_args(args)
    dataset, spec = ingest(args.data, schema)
    try:
        with open(args.params, encoding="utf-8") as fh:
            doc = json.load(fh)
        beta = np.asarray(doc["parameters"]["beta"], dtype=float)
        varsigma = np.asarray(doc["parameters"]["varsigma"], dtype=float)
        sigma = float(doc["parameters"]["sigma"])
        doc_alpha = tuple(doc["spec"]["alpha"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"cannot read fit document {args.params}: {exc}") from None
    if doc_alpha != spec.alpha or beta.size != dataset.p:
        raise SchemaError(
            f"fit document (alpha={doc_alpha}, p={beta.size}) does not match the "
            f"requested model (alpha={spec.alpha}, p={dataset.p})"
        )
    if varsigma.size != spec.k:
        raise SchemaError(
            f"fit document has {varsigma.size} random-effect scales, model needs {spec.k}"
        )
    params = Parameters(beta=beta, varsigma=varsigma, sigma=sigma)
    effects = solve_all(dataset, params, spec)
    cols = list(schema.model_columns)
    header = ["group"]
    for i in spec.alpha:
        header += [f"gamma_{cols[i]}", f"overall_{cols[i]}", f"at_bound_{cols[i]}"]
    rows = [tuple(header)]
    for ell, gid in enumerate(dataset.group_ids):
        row = [str(gid)]
        for i, col in enumerate(spec.alpha):
            row += [
                _num(effects.gamma[ell, i]),
                _num(params.beta[col] + effects.gamma[ell, i]),
                str(bool(effects.at_bound[ell, i])),
            ]
        rows.append(tuple(row))
    _write_csv(args.out, rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_schema_args(sub, required=True):
    sub.add_argument("--group-col", required=required)
    sub.add_argument("--response-col", required=required)
    sub.add_argument("--features", required=required,
                     help="comma-separated feature column names (model order)")
    sub.add_argument("--random-effects", default="",
                     help="comma-separated subset of features, plus optional 'intercept'")
    sub.add_argument("--intercept", dest="intercept", action="store_true", default=True)
    sub.add_argument("--no-intercept", dest="intercept", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cslme",
        description="Sign-constrained linear mixed-effects fitting and simulation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="fit one model to a CSV file")
    p_fit.add_argument("data")
    _add_schema_args(p_fit)
    p_fit.add_argument("--method", default="PLS",
                       choices=[*METHOD_CHOICES, *[m.lower() for m in METHOD_CHOICES]])
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--starts", type=int, default=5)
    p_fit.add_argument("--pit-q", type=int, default=2, choices=(2, 4))
    p_fit.add_argument("--out", default=None)
    p_fit.add_argument("--format", default="json", choices=("json", "csv"))
    p_fit.set_defaults(func=cmd_fit)

    p_sim = subs.add_parser("simulate", help="run a simulation scenario config")
    p_sim.add_argument("config")
    p_sim.add_argument("--out", default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_con = subs.add_parser("contour", help="objective values on a parameter grid")
    p_con.add_argument("config")
    p_con.add_argument("--data", default=None)
    _add_schema_args(p_con, required=False)
    p_con.add_argument("--out", default=None)
    p_con.set_defaults(func=cmd_contour)

    p_ran = subs.add_parser("ranef", help="per-group deviations from a saved fit")
    p_ran.add_argument("data")
    _add_schema_args(p_ran)
    p_ran.add_argument("--params", required=True, help="JSON document from `cslme fit`")
    p_ran.add_argument("--out", default=None)
    p_ran.set_defaults(func=cmd_ranef)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except QuadratureUnderflowError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"did not converge: {exc} {exc.diagnostics}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
