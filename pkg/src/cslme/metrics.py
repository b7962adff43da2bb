"""Fit-quality and simulation-accuracy metrics.

The variance-explained summaries extend the usual R^2 to mixed models:
marginal uses the fixed-effect predictions alone, conditional adds the
random-effect variance to the numerator, and both share the denominator
fixed + random + residual variance. The variance-components term uses the
raw scales varsigma_i^2 as printed in the defining formulas; an alternate
"effective" mode substitutes the truncation-deflated variances for
sensitivity analysis (not part of the reference definition).
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .model import Dataset, ModelSpec, Parameters, sdtn_variances


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    r2_marginal: float
    r2_conditional: float
    parameter_subset: tuple = field(default_factory=tuple)


def rmse(estimates, truth, subset=None) -> float:
    """Root mean squared error over a labeled parameter subset.

    `estimates` and `truth` map labels to values; `subset` defaults to the
    truth's labels. Missing labels raise KeyError.
    """
    if subset is None:
        subset = list(truth)
    missing = [s for s in subset if s not in estimates or s not in truth]
    if missing:
        raise KeyError(f"labels missing from estimates/truth: {missing}")
    sq = [(float(estimates[s]) - float(truth[s])) ** 2 for s in subset]
    if not sq:
        raise ValueError("empty parameter subset")
    return math.sqrt(sum(sq) / len(sq))


def r_squared(fit, dataset: Dataset, spec: ModelSpec, effective: bool = False):
    """Marginal and conditional variance-explained of a fitted model.

    Accepts a FitResult-like object carrying `.params` or a bare
    Parameters. Predictions use fixed effects only; their variance is
    taken around their own mean so a constant prediction contributes
    exactly zero.
    """
    params = getattr(fit, "params", fit)
    if not isinstance(params, Parameters):
        raise TypeError("expected a Parameters or an object with a .params field")
    y_hat = np.concatenate([gd.X @ params.beta for gd in dataset.groups])
    var_fixed = float(np.mean((y_hat - np.mean(y_hat)) ** 2))
    if effective:
        var_random = float(np.sum(sdtn_variances(params, spec)))
    else:
        var_random = float(np.sum(params.varsigma ** 2))
    total = var_fixed + var_random + params.sigma ** 2
    if total <= 0.0:
        raise ValueError("total model variance is zero")
    marginal = var_fixed / total
    conditional = (var_fixed + var_random) / total
    return marginal, conditional
