"""Family-generic GLM fitting by iteratively reweighted least squares.

Supports gaussian-identity and binomial-logit with optional nonnegative
observation weights. Each IRLS step solves the weighted least-squares
subproblem by Cholesky on the normal equations, falling back to an
orthogonal (QR-type) factorization whenever the cross-product is not safely
positive definite; the fallback doubles as the rank check on near-collinear
interaction designs. Steps that fail to improve the deviance are halved.
Convergence is declared when the coefficient sup-norm change drops below
1e-8, capped at 50 iterations. Separation is reported through
converged=False, never "fixed" here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit, log_expit

from .datamodel import Dataset, TargetModelSpec, INTERNAL_POP
from .errors import IncompleteDataError, SingularDesignError, ValidationError

MAX_ITER = 50
COEF_TOL = 1e-8
_MU_EPS = 1e-10


@dataclass(frozen=True)
class DesignMatrix:
    """Dense design with deterministic column order.

    Order: intercept, population intercepts by declaration order, X main
    effects by dataset order, X-by-population interactions by (population,
    covariate) order, B main effects by dataset order. Interaction columns
    are elementwise products of the X column and the population indicator.
    """

    names: tuple[str, ...]
    X: np.ndarray
    symbols: dict[str, str]

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]


def interaction_name(x_name: str, pop: str) -> str:
    return f"{x_name}:{pop}"


def build_design(data, spec: TargetModelSpec) -> DesignMatrix:
    """Design matrix of the expanded model for a Dataset or StackedDataset."""
    dataset: Dataset = data.data if hasattr(data, "data") else data
    used = dataset.x_names + dataset.b_names
    cols = [dataset.index(n) for n in used]
    if dataset.mask[:, cols].any():
        raise IncompleteDataError(
            "design construction requires complete covariates; impute first"
        )
    n = dataset.n_rows
    pop = dataset.population
    names: list[str] = ["intercept"]
    symbols: dict[str, str] = {"intercept": "gamma0"}
    blocks: list[np.ndarray] = [np.ones((n, 1))]

    indicators = {}
    for k in spec.populations:
        indicators[k] = (pop == k).astype(float)
        names.append(k)
        symbols[k] = f"gamma0^{k}"
        blocks.append(indicators[k][:, None])

    for x in dataset.x_names:
        names.append(x)
        symbols[x] = f"gamma_{x}"
        blocks.append(dataset.column_values(x)[:, None])

    for k in spec.populations:
        for x in spec.slopes_for(k):
            name = interaction_name(x, k)
            names.append(name)
            symbols[name] = f"gamma_{x}^{k}"
            blocks.append((dataset.column_values(x) * indicators[k])[:, None])

    for b in dataset.b_names:
        names.append(b)
        symbols[b] = f"gamma_{b}"
        blocks.append(dataset.column_values(b)[:, None])

    return DesignMatrix(tuple(names), np.hstack(blocks), symbols)


@dataclass(frozen=True)
class GlmFit:
    names: tuple[str, ...]
    coef: np.ndarray
    vcov: np.ndarray  # inverse weighted Fisher information at the solution
    deviance: float
    iterations: int
    converged: bool
    family: str
    dispersion: float = 1.0  # residual variance estimate (gaussian only)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))

    def coef_dict(self) -> dict[str, float]:
        return {n: float(c) for n, c in zip(self.names, self.coef)}


def _wls(X: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Cholesky on the normal equations, falling back to an orthogonal (QR-type)
    # factorization when the cross-product is not safely positive definite;
    # the fallback also serves as the rank check.
    XtWX = (X * w[:, None]).T @ X
    XtWz = X.T @ (w * z)
    try:
        c, low = scipy.linalg.cho_factor(XtWX, check_finite=False)
        return scipy.linalg.cho_solve((c, low), XtWz, check_finite=False)
    except scipy.linalg.LinAlgError:
        pass
    sw = np.sqrt(w)
    beta, _, rank, _ = scipy.linalg.lstsq(
        X * sw[:, None], z * sw, lapack_driver="gelsy", check_finite=False
    )
    if rank < X.shape[1]:
        raise SingularDesignError(f"design has rank {rank} < {X.shape[1]} columns")
    return beta


def fit_glm(
    design: DesignMatrix,
    y: np.ndarray,
    family: str,
    weights: np.ndarray | None = None,
    start: np.ndarray | None = None,
    ridge: float = 0.0,
) -> GlmFit:
    """Weighted GLM fit; see module docstring for the IRLS policy.

    `start` optionally warm-starts the logit iteration (the converged solution
    does not depend on it). `ridge` adds an L2 penalty used only by internal
    callers that need a stabilized fit; it is excluded from the intercept.
    """
    X = design.X
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise ValidationError("response length does not match design rows")
    if weights is None:
        w_obs = np.ones(n)
    else:
        w_obs = np.asarray(weights, dtype=float)
        if w_obs.shape != (n,):
            raise ValidationError("weights length does not match design rows")
        if (w_obs < 0).any():
            raise ValidationError("weights must be nonnegative")
    if int((w_obs > 0).sum()) < p:
        raise ValidationError("fewer positively weighted rows than design columns")

    if family == "gaussian":
        beta = _wls(X, y, w_obs)
        mu = X @ beta
        resid = y - mu
        deviance = float(w_obs @ resid**2)
        wsum = float(w_obs.sum())
        dispersion = deviance / max(wsum - p, 1.0)
        vcov = np.linalg.inv(X.T @ (w_obs[:, None] * X))
        vcov = 0.5 * (vcov + vcov.T)
        return GlmFit(design.names, beta, vcov, deviance, 1, True, family, dispersion)

    if family != "binomial":
        raise ValidationError(f"unsupported family {family!r}")

    beta = np.zeros(p) if start is None else np.asarray(start, dtype=float).copy()
    penalty = np.zeros(p)
    if ridge > 0:
        penalty[:] = ridge
        penalty[0] = 0.0  # intercept unpenalized

    y_binary = bool(np.all((y == 0.0) | (y == 1.0)))
    y_sign = 2.0 * y - 1.0

    def dev_at(b: np.ndarray):
        eta_b = X @ b
        mu_b = np.clip(expit(eta_b), _MU_EPS, 1.0 - _MU_EPS)
        if y_binary:
            ll = log_expit(y_sign * eta_b)
        else:
            ll = y * np.log(mu_b) + (1.0 - y) * np.log1p(-mu_b)
        d = float(-2.0 * (w_obs @ ll))
        if ridge > 0:
            d += float(penalty @ b**2)
        return d, eta_b, mu_b

    converged = False
    iterations = 0
    dev, eta, mu = dev_at(beta)
    for iterations in range(1, MAX_ITER + 1):
        irls_w = w_obs * mu * (1.0 - mu)
        z = eta + (y - mu) / (mu * (1.0 - mu))
        if ridge > 0:
            XtWX = X.T @ (irls_w[:, None] * X) + np.diag(penalty)
            XtWz = X.T @ (irls_w * z)
            try:
                proposal = np.linalg.solve(XtWX, XtWz)
            except np.linalg.LinAlgError as exc:
                raise SingularDesignError(str(exc)) from None
        else:
            proposal = _wls(X, z, irls_w)
        # step-halve when the proposal does not improve the deviance
        new_dev, new_eta, new_mu = dev_at(proposal)
        halvings = 0
        while (not np.isfinite(new_dev) or new_dev > dev + 1e-10) and halvings < 15:
            proposal = 0.5 * (proposal + beta)
            new_dev, new_eta, new_mu = dev_at(proposal)
            halvings += 1
        delta = np.max(np.abs(proposal - beta))
        beta, dev, eta, mu = proposal, new_dev, new_eta, new_mu
        if not np.isfinite(beta).all() or np.max(np.abs(beta)) > 1e10:
            converged = False
            break
        if delta < COEF_TOL:
            converged = True
            break

    deviance = dev if ridge == 0 else dev_at(beta)[0] - float(penalty @ beta**2)
    irls_w = w_obs * mu * (1.0 - mu)
    XtWX = X.T @ (irls_w[:, None] * X)
    if ridge > 0:
        XtWX = XtWX + np.diag(penalty)
    try:
        vcov = np.linalg.inv(XtWX)
    except np.linalg.LinAlgError:
        vcov = np.linalg.pinv(XtWX)
    vcov = 0.5 * (vcov + vcov.T)
    return GlmFit(design.names, beta, vcov, deviance, iterations, converged, family)


def predict_glm(fit: GlmFit, design: DesignMatrix) -> np.ndarray:
    """Mean response g^{-1}(X @ coef); design columns must match the fit."""
    if tuple(design.names) != tuple(fit.names):
        raise ValidationError(
            f"design columns {list(design.names)} do not match fit coefficients {list(fit.names)}"
        )
    eta = design.X @ fit.coef
    if fit.family == "binomial":
        return expit(eta)
    return eta


def internal_design(dataset: Dataset, spec: TargetModelSpec) -> DesignMatrix:
    """Design of the internal-only model (no indicators, no interactions)."""
    return build_design(dataset, spec.internal_only())


def fit_internal(dataset: Dataset, spec: TargetModelSpec, weights=None) -> GlmFit:
    """Direct regression on internal rows only."""
    internal = dataset
    if (dataset.population != INTERNAL_POP).any():
        internal = dataset.rows(dataset.population == INTERNAL_POP)
    design = internal_design(internal, spec)
    y = internal.column_values(internal.y_name)
    return fit_glm(design, y, spec.family, weights=weights)
