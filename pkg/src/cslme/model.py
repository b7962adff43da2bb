"""Grouped data model and marginal-covariance assembly.

A Dataset is an ordered list of groups, each carrying a response vector and
a design matrix with a shared column count p. A ModelSpec selects the
columns (index set alpha, 0-based) that receive group-level random
deviations; the per-group random-effect design is Z_l = X_l[:, alpha].

The marginal covariance of the stacked response is V = Z Lambda Z^T +
sigma^2 I with Lambda diagonal, so V is block diagonal by group. All
determinant/solve work is done per block through a small capacitance
matrix (Woodbury / Sylvester), never on the full n x n matrix; the dense
`marginal_cov` exists as a test surface and for small problems.
"""

from dataclasses import dataclass, field

import numpy as np

from .sdtn import variance_factor


class DimensionMismatchError(ValueError):
    """Shapes of responses/designs disagree across or within groups."""


@dataclass(frozen=True)
class GroupData:
    """One group's response and fixed-effect design (n_l rows)."""

    group_id: object
    y: np.ndarray | None
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DimensionMismatchError(
                f"group {self.group_id}: design must be a nonempty 2-d array"
            )
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float)
            if y.shape != (X.shape[0],):
                raise DimensionMismatchError(
                    f"group {self.group_id}: y has length {y.shape}, design has "
                    f"{X.shape[0]} rows"
                )
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of groups with a consistent column count."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise DimensionMismatchError("dataset needs at least one group")
        p = groups[0].X.shape[1]
        for gd in groups:
            if gd.X.shape[1] != p:
                raise DimensionMismatchError(
                    f"group {gd.group_id} has {gd.X.shape[1]} columns, expected {p}"
                )
        object.__setattr__(self, "groups", groups)

    @property
    def p(self) -> int:
        return self.groups[0].X.shape[1]

    @property
    def g(self) -> int:
        return len(self.groups)

    @property
    def n(self) -> int:
        return sum(gd.n for gd in self.groups)

    @property
    def group_ids(self) -> list:
        return [gd.group_id for gd in self.groups]


@dataclass(frozen=True)
class ModelSpec:
    """Model structure: random-effect columns and constraint mode.

    alpha holds 0-based, strictly increasing column indices that receive
    random effects. When `constrained` is set, every fixed effect is kept
    nonnegative except columns listed in `unconstrained_columns`.
    """

    alpha: tuple
    intercept: bool = True
    constrained: bool = True
    unconstrained_columns: tuple = field(default_factory=tuple)

    def __post_init__(self):
        alpha = tuple(int(i) for i in self.alpha)
        if any(b <= a for a, b in zip(alpha, alpha[1:])):
            raise ValueError(f"alpha must be strictly increasing, got {alpha}")
        if alpha and alpha[0] < 0:
            raise ValueError(f"alpha indices must be nonnegative, got {alpha}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(
            self, "unconstrained_columns", tuple(int(i) for i in self.unconstrained_columns)
        )

    @property
    def k(self) -> int:
        return len(self.alpha)

    def validate_against(self, dataset: Dataset):
        if self.alpha and self.alpha[-1] >= dataset.p:
            raise ValueError(
                f"alpha {self.alpha} out of range for p={dataset.p} columns"
            )


@dataclass(frozen=True)
class Parameters:
    """Estimation target: fixed effects, SDTN scales, residual scale."""

    beta: np.ndarray
    varsigma: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "varsigma", np.asarray(self.varsigma, dtype=float))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if np.any(self.varsigma < 0):
            raise ValueError("varsigma entries must be nonnegative")


@dataclass(frozen=True)
class RandomEffects:
    """Per-group deviations: row l holds gamma^l (g x k)."""

    gamma: np.ndarray
    at_bound: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.atleast_2d(np.asarray(self.gamma, dtype=float)))
        if self.at_bound is not None:
            object.__setattr__(self, "at_bound", np.atleast_2d(np.asarray(self.at_bound, dtype=bool)))


def assemble(dataset: Dataset, spec: ModelSpec):
    """Stack the grouped model into dense (X, Z, y, group_offsets).

    Z is block diagonal with block l equal to X_l restricted to the alpha
    columns; rows keep input order within and across groups. group_offsets
    has g + 1 entries (row boundaries of each group's block).
    """
    spec.validate_against(dataset)
    k, g = spec.k, dataset.g
    n, p = dataset.n, dataset.p
    X = np.vstack([gd.X for gd in dataset.groups])
    have_y = all(gd.y is not None for gd in dataset.groups)
    y = np.concatenate([gd.y for gd in dataset.groups]) if have_y else None
    Z = np.zeros((n, k * g))
    offsets = np.zeros(g + 1, dtype=int)
    row = 0
    for ell, gd in enumerate(dataset.groups):
        offsets[ell] = row
        if k:
            Z[row:row + gd.n, ell * k:(ell + 1) * k] = gd.X[:, list(spec.alpha)]
        row += gd.n
    offsets[g] = row
    return X, Z, y, offsets


def re_variances(beta: np.ndarray, varsigma: np.ndarray, alpha) -> np.ndarray:
    """SDTN random-effect variances from raw coefficient/scale arrays.

    Entry i is varsigma_i^2 * variance_factor(|beta_{alpha_i}| / |varsigma_i|).
    The absolute values keep the ratio defined at optimizer probe points
    that step slightly past a boundary. Zero scale or zero coefficient
    gives an exactly zero variance (degenerate random effect).
    """
    alpha = tuple(alpha)
    if len(alpha) != len(varsigma):
        raise DimensionMismatchError(
            f"varsigma has {len(varsigma)} entries, alpha has {len(alpha)}"
        )
    out = np.zeros(len(alpha))
    for i, col in enumerate(alpha):
        s = abs(float(varsigma[i]))
        b = abs(float(beta[col]))
        if s == 0.0 or b == 0.0:
            continue
        out[i] = s * s * variance_factor(b / s)
    return out


def sdtn_variances(params: Parameters, spec: ModelSpec) -> np.ndarray:
    """Per-column SDTN random-effect variances (the diagonal of Delta)."""
    return re_variances(params.beta, params.varsigma, spec.alpha)


def lambda_diag(params: Parameters, spec: ModelSpec, g: int) -> np.ndarray:
    """Diagonal of Lambda: g repeated copies of the per-column variances."""
    return np.tile(sdtn_variances(params, spec), g)


def marginal_cov(params: Parameters, spec: ModelSpec, Z: np.ndarray) -> np.ndarray:
    """Dense marginal covariance V = Z Lambda Z^T + sigma^2 I.

    Intended for tests and small problems; fitting code uses BlockDesign.
    """
    n, kg = Z.shape
    if spec.k == 0:
        return params.sigma ** 2 * np.eye(n)
    g = kg // spec.k
    lam = lambda_diag(params, spec, g)
    return (Z * lam) @ Z.T + params.sigma ** 2 * np.eye(n)


class BlockDesign:
    """Per-group views and cross-products for block-diagonal V operations.

    Precomputes Z_l^T Z_l once; every (d, sigma) evaluation then costs
    O(n (p + k) + g k^3) through the k x k capacitance matrix
    M_l = I + diag(sqrt(d)) Z_l^T Z_l diag(sqrt(d)) / sigma^2.
    """

    def __init__(self, dataset: Dataset, spec: ModelSpec):
        spec.validate_against(dataset)
        self.spec = spec
        self.p = dataset.p
        self.k = spec.k
        self.n = dataset.n
        self.group_ids = dataset.group_ids
        cols = list(spec.alpha)
        self.ys = [gd.y for gd in dataset.groups]
        self.Xs = [gd.X for gd in dataset.groups]
        self.Zs = [gd.X[:, cols] for gd in dataset.groups]
        self.ZtZs = [Zl.T @ Zl for Zl in self.Zs]
        self.sizes = np.array([gd.n for gd in dataset.groups])

    @property
    def g(self) -> int:
        return len(self.Xs)

    def solve(self, re_var: np.ndarray, sigma: float) -> "BlockSolve":
        return BlockSolve(self, np.asarray(re_var, dtype=float), float(sigma))


class BlockSolve:
    """Factorized state of V = Z diag(d) Z^T + sigma^2 I for fixed (d, sigma).

    k = 1 keeps the capacitance scalar and skips linear algebra entirely.
    """

    def __init__(self, design: BlockDesign, d: np.ndarray, sigma: float):
        if d.shape != (design.k,):
            raise DimensionMismatchError(
                f"expected {design.k} random-effect variances, got {d.shape}"
            )
        if np.any(d < 0):
            raise ValueError("random-effect variances must be nonnegative")
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.design = design
        self.d = d
        self.sigma = sigma
        self.sigma2 = sigma * sigma
        self.s = np.sqrt(d)
        logdet = design.n * np.log(self.sigma2)
        if design.k == 1:
            d0 = float(d[0])
            self._m_scalars = [1.0 + d0 * float(ZtZ[0, 0]) / self.sigma2
                               for ZtZ in design.ZtZs]
            self._chols = None
            logdet += float(np.sum(np.log(self._m_scalars)))
        else:
            eye = np.eye(design.k)
            self._chols = []
            for ZtZ in design.ZtZs:
                M = eye + (self.s[:, None] * ZtZ * self.s[None, :]) / self.sigma2
                L = np.linalg.cholesky(M)
                self._chols.append(L)
                logdet += 2.0 * float(np.sum(np.log(np.diag(L))))
        self.logdet_v = logdet

    def _capacitance_solve(self, ell: int, rhs: np.ndarray) -> np.ndarray:
        if self._chols is None:
            return rhs / self._m_scalars[ell]
        L = self._chols[ell]
        t = np.linalg.solve(L, rhs)
        return np.linalg.solve(L.T, t)

    def quad_form_resid(self, beta: np.ndarray) -> float:
        """(y - X beta)^T V^{-1} (y - X beta), computed per block."""
        des = self.design
        total = 0.0
        for ell in range(des.g):
            r = des.ys[ell] - des.Xs[ell] @ beta
            zr = self.s * (des.Zs[ell].T @ r)
            total += (r @ r - zr @ self._capacitance_solve(ell, zr) / self.sigma2) / self.sigma2
        return float(total)

    def xt_vinv_x(self) -> np.ndarray:
        des = self.design
        F = np.zeros((des.p, des.p))
        for ell in range(des.g):
            ZtX = self.s[:, None] * (des.Zs[ell].T @ des.Xs[ell])
            XtX = des.Xs[ell].T @ des.Xs[ell]
            F += (XtX - ZtX.T @ self._capacitance_solve(ell, ZtX) / self.sigma2) / self.sigma2
        return F

    def xt_vinv_y(self) -> np.ndarray:
        des = self.design
        h = np.zeros(des.p)
        for ell in range(des.g):
            ZtX = self.s[:, None] * (des.Zs[ell].T @ des.Xs[ell])
            Zty = self.s * (des.Zs[ell].T @ des.ys[ell])
            Xty = des.Xs[ell].T @ des.ys[ell]
            h += (Xty - ZtX.T @ self._capacitance_solve(ell, Zty) / self.sigma2) / self.sigma2
        return h

    def zt_vinv_resid(self, beta: np.ndarray) -> list:
        """Per-group Z_l^T V_l^{-1} (y_l - X_l beta), a list of k-vectors."""
        des = self.design
        out = []
        for ell in range(des.g):
            r = des.ys[ell] - des.Xs[ell] @ beta
            Ztr = des.Zs[ell].T @ r
            adj = self.design.ZtZs[ell] @ (
                self.s * self._capacitance_solve(ell, self.s * Ztr)
            ) / self.sigma2
            out.append((Ztr - adj) / self.sigma2)
        return out
