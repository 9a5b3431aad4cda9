"""Step 3: initial population-specific coefficients and stacked-row weights.

External summary coefficients estimate a reduced model and are therefore
biased for the expanded model's covariate effects because the unmeasured
covariates were omitted. For the identity link the relationship between
reduced and full coefficients is exact; for the logit link it is approximated
through a Taylor expansion of the inverse link around the conditional mean of
the omitted covariates. All of that algebra assumes centered predictors, so
the correction works in the centered frame internally and hands back
original-scale coefficient vectors.

Category-2 models have no coefficients at all; a large synthetic block is
generated from the black box and a main-effects GLM fitted to it stands in
for the external coefficient vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .datamodel import (
    INTERNAL_POP,
    CenteringRecord,
    CoefficientModel,
    Dataset,
    ExternalModelSpec,
    TargetModelSpec,
    centering_record,
)
from .errors import CalibrationError, NumericalError, SingularDesignError, ValidationError
from .glm import DesignMatrix, GlmFit, fit_glm
from .impute import StackedDataset, _logit_fit
from .synth import generate_synthetic_population

BISECT_LO = -30.0
BISECT_HI = 30.0
BISECT_TOL = 1e-10


@dataclass(frozen=True)
class NuisanceBgivenX:
    """Conditional law of the omitted covariates given the external model's X.

    One marginal regression per omitted covariate (identity link for
    continuous, logit for binary), with pairwise conditional covariances
    estimated from internal-data residual cross-products; binary diagonal
    entries use the logit variance function instead. Everything is expressed
    in the centered frame, so "at the mean" means the regressor vector zero.
    """

    omitted: tuple[str, ...]
    regressors: tuple[str, ...]
    links: dict[str, str]  # per omitted column: "identity" | "logit"
    theta: dict[str, np.ndarray]  # (1 + P_k,) intercept-first coefficient rows
    response_means: dict[str, float]
    resid_cov: np.ndarray  # (Q', Q') residual cross-products

    def e_at_mean(self) -> np.ndarray:
        """E(B_j | X = mean), centered scale, per omitted column."""
        out = np.empty(len(self.omitted))
        for i, name in enumerate(self.omitted):
            t0 = self.theta[name][0]
            if self.links[name] == "logit":
                out[i] = expit(t0) - self.response_means[name]
            else:
                out[i] = t0
        return out

    def delta_e(self, x_name: str) -> np.ndarray:
        """E(B_j | X + 1_p) - E(B_j | X) evaluated at the mean."""
        p = self.regressors.index(x_name) + 1
        out = np.empty(len(self.omitted))
        for i, name in enumerate(self.omitted):
            t = self.theta[name]
            if self.links[name] == "logit":
                out[i] = expit(t[0] + t[p]) - expit(t[0])
            else:
                out[i] = t[p]
        return out

    def cov_at_mean(self) -> np.ndarray:
        cov = self.resid_cov.copy()
        for i, name in enumerate(self.omitted):
            if self.links[name] == "logit":
                p0 = expit(self.theta[name][0])
                cov[i, i] = p0 * (1.0 - p0)
        return cov


@dataclass(frozen=True)
class PopulationEstimates:
    """Initial full-model coefficient vectors per population, original scale."""

    names: tuple[str, ...]  # intercept, X..., B...
    entries: dict[str, np.ndarray]
    source: dict[str, str]  # internal | corrected-cat1 | corrected-cat2
    dispersion: float = 1.0  # residual variance for gaussian weight densities
    diagnostics: dict = field(default_factory=dict)

    def entry_dict(self, pop: str) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.entries[pop])}


def fit_nuisance(
    internal: Dataset, omitted: list[str], record: CenteringRecord | None = None
) -> NuisanceBgivenX:
    """Regress each omitted covariate on the remaining X columns (internal data)."""
    if not internal.fully_observed():
        raise ValidationError("nuisance regressions need fully observed internal data")
    record = record if record is not None else centering_record(internal)
    regressors = tuple(x for x in internal.x_names if x not in omitted)
    n = internal.n_rows
    X = np.column_stack(
        [np.ones(n)] + [internal.column_values(x) - record.mean(x) for x in regressors]
    )
    links: dict[str, str] = {}
    theta: dict[str, np.ndarray] = {}
    means: dict[str, float] = {}
    resids = np.empty((n, len(omitted)))
    for i, name in enumerate(omitted):
        raw = internal.column_values(name)
        if np.ptp(raw) == 0.0:
            raise SingularDesignError(f"omitted covariate {name!r} is constant")
        means[name] = record.mean(name)
        if internal.is_binary(name):
            links[name] = "logit"
            beta, _, ok = _logit_fit(X, raw)
            if not ok:
                beta, _, ok = _logit_fit(X, raw, ridge=1e-4)
                if not ok:
                    raise NumericalError(f"nuisance logit fit for {name!r} did not converge")
            theta[name] = beta
            fitted = expit(X @ beta)
            resids[:, i] = (raw - means[name]) - (fitted - means[name])
        else:
            links[name] = "identity"
            design = DesignMatrix(("intercept", *regressors), X, {})
            fit = fit_glm(design, raw - means[name], "gaussian")
            theta[name] = fit.coef
            resids[:, i] = (raw - means[name]) - X @ fit.coef
    resid_cov = resids.T @ resids / n
    return NuisanceBgivenX(tuple(omitted), regressors, links, theta, means, resid_cov)


# -- frame transforms -------------------------------------------------------


def external_to_centered(payload: CoefficientModel, record: CenteringRecord) -> CoefficientModel:
    """Express an external coefficient model in the centered frame."""
    shift = sum(v * record.mean(k) for k, v in payload.slopes.items())
    return CoefficientModel(payload.link, payload.intercept + shift, dict(payload.slopes), payload.sigma)


def _entry_to_centered(entry: np.ndarray, names, record: CenteringRecord) -> np.ndarray:
    out = entry.copy()
    out[0] = entry[0] + sum(entry[i] * record.mean(n) for i, n in enumerate(names) if i > 0)
    return out


def _entry_to_raw(entry: np.ndarray, names, record: CenteringRecord) -> np.ndarray:
    out = entry.copy()
    out[0] = entry[0] - sum(entry[i] * record.mean(n) for i, n in enumerate(names) if i > 0)
    return out


# -- bias corrections --------------------------------------------------------


def _split_internal(internal_fit: GlmFit, nuisance: NuisanceBgivenX):
    names = internal_fit.names
    coef = internal_fit.coef
    idx = {n: i for i, n in enumerate(names)}
    gamma_b = np.array([coef[idx[name]] for name in nuisance.omitted])
    return idx, gamma_b


def correct_linear(
    beta_k: CoefficientModel,
    internal_fit: GlmFit,
    nuisance: NuisanceBgivenX,
    correct_slopes: tuple[str, ...] | None = None,
) -> np.ndarray:
    """Identity-link correction: intercept matches, slopes lose theta' gamma_B.

    All vectors are in the centered frame; `internal_fit` supplies the
    coefficients of the omitted covariates and fills the entries the external
    model says nothing about. `correct_slopes` limits the slope correction to
    the covariates whose effects the target model lets differ in this
    population; under intercept-only heterogeneity the slopes are shared, so
    they come straight from the internal fit and only the intercept is
    matched.
    """
    idx, gamma_b = _split_internal(internal_fit, nuisance)
    entry = internal_fit.coef.copy()
    entry[0] = beta_k.intercept
    to_correct = beta_k.slopes.keys() if correct_slopes is None else correct_slopes
    for x_name in to_correct:
        if x_name not in idx:
            raise ValidationError(f"external slope {x_name!r} absent from the internal fit")
        entry[idx[x_name]] = beta_k.slopes[x_name] - float(
            nuisance.delta_e(x_name) @ gamma_b
        )
    return entry


def _taylor_mean(w: float, vz: float) -> float:
    """Second-moment Taylor expansion of E expit(w + z), Var z = vz."""
    ew = math.exp(min(w, 700.0))
    s = expit(w)
    return s * (1.0 + 0.5 * (1.0 - ew) / (1.0 + ew) ** 2 * vz)


def _taylor_mean_sq(w: float, vz: float) -> float:
    """Same expansion for E expit(w + z)^2."""
    ew = math.exp(min(w, 700.0))
    s = expit(w)
    return s * s * (1.0 + 0.5 * (2.0 - ew) / (1.0 + ew) ** 2 * vz)


def correct_logistic(
    beta_k: CoefficientModel,
    internal_fit: GlmFit,
    nuisance: NuisanceBgivenX,
    correct_slopes: tuple[str, ...] | None = None,
) -> tuple[np.ndarray, int]:
    """Logit-link correction via the Taylor-expanded moment equations.

    Solves E_{B|X} expit(gamma0 + B'gamma_B) = expit(beta0) for the
    population intercept by bisection on [-30, 30], then de-attenuates each
    external slope and removes the omitted-covariate drift. Returns the
    corrected entry (centered frame) and the bisection iteration count.
    `correct_slopes` has the same role as in correct_linear: slopes the
    target model shares across populations stay at their internal values.
    """
    idx, gamma_b = _split_internal(internal_fit, nuisance)
    e0 = nuisance.e_at_mean()
    vz = float(gamma_b @ nuisance.cov_at_mean() @ gamma_b)
    drift = float(e0 @ gamma_b)  # E(B'|X) gamma_B at the mean

    iterations = 0
    if vz == 0.0:
        gamma0 = beta_k.intercept - drift
        e_mu = expit(beta_k.intercept)
        v_mu = 0.0
    else:
        target = expit(beta_k.intercept)

        def f(g0: float) -> float:
            return _taylor_mean(g0 + drift, vz) - target

        lo, hi = BISECT_LO, BISECT_HI
        flo, fhi = f(lo), f(hi)
        if flo == 0.0:
            gamma0 = lo
        elif fhi == 0.0:
            gamma0 = hi
        elif flo * fhi > 0:
            raise CalibrationError(
                f"intercept solve for beta0={beta_k.intercept:.4f} has no sign change on "
                f"[{BISECT_LO}, {BISECT_HI}]"
            )
        else:
            while hi - lo > BISECT_TOL:
                iterations += 1
                mid = 0.5 * (lo + hi)
                fm = f(mid)
                if fm == 0.0:
                    lo = hi = mid
                    break
                if (fm < 0) == (flo < 0):
                    lo, flo = mid, fm
                else:
                    hi = mid
            gamma0 = 0.5 * (lo + hi)
        w = gamma0 + drift
        e_mu = _taylor_mean(w, vz)
        v_mu = _taylor_mean_sq(w, vz) - e_mu**2

    denom = e_mu * (1.0 - e_mu)
    if denom < 1e-12:
        raise CalibrationError(f"degenerate prevalence E(mu)={e_mu!r} in slope correction")
    attenuation = 1.0 - v_mu / denom
    if abs(attenuation) < 1e-12:
        raise CalibrationError("slope attenuation factor vanished")

    entry = internal_fit.coef.copy()
    entry[0] = gamma0
    to_correct = beta_k.slopes.keys() if correct_slopes is None else correct_slopes
    for x_name in to_correct:
        if x_name not in idx:
            raise ValidationError(f"external slope {x_name!r} absent from the internal fit")
        entry[idx[x_name]] = beta_k.slopes[x_name] / attenuation - float(
            nuisance.delta_e(x_name) @ gamma_b
        )
    return entry, iterations


def approximate_beta_syn(
    spec: ExternalModelSpec,
    internal: Dataset,
    family: str,
    rng: np.random.Generator,
    size_multiplier: int = 50,
) -> CoefficientModel:
    """Main-effects GLM on a large synthetic block, standing in for beta_k.

    Used for Category-2 models, where no coefficient vector exists. A
    Category-1 model wrapped as a predictor converges back to its own
    coefficients as the block grows.
    """
    if family != "binomial":
        raise ValidationError("Category-2 approximation is defined for binary outcomes only")
    block = generate_synthetic_population(internal, spec, family, rng, r=size_multiplier)
    keep = ~block.mask[:, block.index(block.y_name)]
    y = block.column_values(block.y_name)[keep]
    X = np.column_stack(
        [np.ones(y.size)] + [block.column_values(n)[keep] for n in spec.covariates]
    )
    design = DesignMatrix(("intercept", *spec.covariates), X, {})
    fit = fit_glm(design, y, "binomial")
    if not fit.converged:
        raise NumericalError(
            f"synthetic coefficient approximation for {spec.population_id!r} did not converge"
        )
    slopes = {n: float(c) for n, c in zip(spec.covariates, fit.coef[1:])}
    return CoefficientModel("logit", float(fit.coef[0]), slopes)


# -- assembling estimates and weights ----------------------------------------


def initial_estimates(
    internal: Dataset,
    internal_fit: GlmFit,
    specs: list[ExternalModelSpec],
    target: TargetModelSpec,
    record: CenteringRecord,
    rng: np.random.Generator,
    size_multiplier: int = 50,
) -> PopulationEstimates:
    """Per-population initial coefficient vectors (original scale) for weighting."""
    names = internal_fit.names
    entries = {INTERNAL_POP: internal_fit.coef.copy()}
    source = {INTERNAL_POP: "internal"}
    diagnostics: dict = {}
    fit_c = GlmFit(
        internal_fit.names,
        _entry_to_centered(internal_fit.coef, names, record),
        internal_fit.vcov,
        internal_fit.deviance,
        internal_fit.iterations,
        internal_fit.converged,
        internal_fit.family,
        internal_fit.dispersion,
    )
    for spec in specs:
        if spec.is_coefficient:
            beta_raw = spec.payload
            source[spec.population_id] = "corrected-cat1"
        else:
            beta_raw = approximate_beta_syn(spec, internal, target.family, rng, size_multiplier)
            source[spec.population_id] = "corrected-cat2"
        beta_c = external_to_centered(beta_raw, record)
        omitted = [x for x in internal.x_names if x not in spec.covariates] + internal.b_names
        # Only covariates with population-specific effects in the target model
        # take their slopes from the external summary; shared effects keep the
        # internal estimates. A population that differs in intercept alone uses
        # the external intercept directly (the special case of the matching
        # equations; with centered predictors the reduced intercept already
        # pins the population's outcome level).
        het_slopes = target.slopes_for(spec.population_id)
        iters = 0
        if not het_slopes or not omitted:
            entry_c = fit_c.coef.copy()
            entry_c[0] = beta_c.intercept
            for x_name in het_slopes:
                entry_c[list(names).index(x_name)] = beta_c.slopes[x_name]
        else:
            nuisance = fit_nuisance(internal, omitted, record)
            if target.family == "gaussian":
                entry_c = correct_linear(beta_c, fit_c, nuisance, het_slopes)
            else:
                entry_c, iters = correct_logistic(beta_c, fit_c, nuisance, het_slopes)
        entries[spec.population_id] = _entry_to_raw(entry_c, names, record)
        diagnostics[spec.population_id] = {"bisection_iterations": iters}
    return PopulationEstimates(
        tuple(names), entries, source, internal_fit.dispersion, diagnostics
    )


def compute_weights(
    stacked: StackedDataset, estimates: PopulationEstimates, spec: TargetModelSpec
) -> StackedDataset:
    """Population-specific outcome-model weights, normalized within subject."""
    data = stacked.data
    names = estimates.names
    if names[0] != "intercept":
        raise ValidationError("estimate names must start with the intercept")
    X = np.column_stack(
        [np.ones(data.n_rows)] + [data.column_values(n) for n in names[1:]]
    )
    y = data.column_values(data.y_name)
    pops = np.unique(data.population)
    missing = [p for p in pops if p not in estimates.entries]
    if missing:
        raise ValidationError(f"no initial estimates for populations {missing}")

    raw = np.empty(data.n_rows)
    for pop in pops:
        rows = data.population == pop
        eta = X[rows] @ estimates.entries[pop]
        if spec.family == "binomial":
            p = expit(eta)
            raw[rows] = np.where(y[rows] == 1.0, p, 1.0 - p)
        else:
            sigma2 = max(estimates.dispersion, 1e-300)
            raw[rows] = np.exp(-0.5 * (y[rows] - eta) ** 2 / sigma2) / math.sqrt(
                2.0 * math.pi * sigma2
            )

    m = stacked.m
    n_subj = stacked.n_subjects
    mat = raw.reshape(m, n_subj)
    sums = mat.sum(axis=0)
    degenerate = sums <= 0.0
    n_degenerate = int(degenerate.sum())
    safe = np.where(degenerate, 1.0, sums)
    weights = np.where(degenerate[None, :], 1.0 / m, mat / safe)
    return stacked.with_weights(
        weights.ravel(), {"degenerate_weight_subjects": n_degenerate}
    )
