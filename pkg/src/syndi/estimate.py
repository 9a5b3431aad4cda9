"""Step 4 and orchestration: weighted stacked fit, bootstrap, comparisons.

run_syndi executes the full four-step pipeline. Its naive covariance (the
inverse information of the weighted stacked fit) ignores between-imputation
variation and is flagged non-inferential; bootstrap_variance resamples the
internal rows and repeats all four steps, treating external summaries as
fixed. FCS and IMB fit each imputed copy unweighted and pool with Rubin's
rules; they exist as comparison strategies, not recommendations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .calibrate import compute_weights, initial_estimates
from .datamodel import (
    INTERNAL_POP,
    Dataset,
    ExternalModelSpec,
    TargetModelSpec,
    centering_record,
    validate_spec,
)
from .errors import BootstrapError, SyndiError, ValidationError
from .glm import GlmFit, build_design, fit_glm, fit_internal
from .impute import ImputationStrategy, impute_stack
from .parallel import parallel_map
from .rng import STAGE_BOOTSTRAP, STAGE_IMPUTE, STAGE_SYNTH, child_rng
from .synth import combine, generate_synthetic_population


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the four-step pipeline (r_k rides on each external spec)."""

    m: int = 100
    cycles: int = 10
    size_multiplier: int = 50  # synthetic block scale for Category-2 approximation

    def __post_init__(self):
        if self.m < 1 or self.cycles < 1 or self.size_multiplier < 1:
            raise ValidationError("pipeline knobs must be positive")


@dataclass(frozen=True)
class FitResult:
    """Named estimates with provenance; coefficients on the original data scale."""

    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray | None
    vcov: np.ndarray | None
    method: str  # SynDI | direct | FCS | IMB
    variance: str  # bootstrap | rubin | naive
    family: str
    structure: dict  # x/b column names, populations, heterogeneity pattern
    provenance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True

    def coef_dict(self) -> dict[str, float]:
        return {n: float(c) for n, c in zip(self.names, self.coef)}

    def to_dict(self) -> dict:
        coefficients = {}
        for i, n in enumerate(self.names):
            entry = {"est": float(self.coef[i])}
            if self.se is not None:
                entry["se"] = float(self.se[i])
            coefficients[n] = entry
        out = {
            "method": self.method,
            "family": self.family,
            "variance": self.variance,
            "converged": self.converged,
            "names": list(self.names),
            "coefficients": coefficients,
            "structure": self.structure,
            "provenance": self.provenance,
            "diagnostics": self.diagnostics,
        }
        if self.vcov is not None:
            out["vcov"] = [float(v) for v in np.asarray(self.vcov).ravel()]
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def population_coefficients(self, pop: str) -> dict[str, float]:
        """Collapse the expanded fit into one intercept+X+B vector for a population."""
        target = _structure_target(self.structure)
        if pop != INTERNAL_POP and pop not in target.populations:
            raise ValidationError(f"unknown population {pop!r}")
        coefs = self.coef_dict()
        out = {"intercept": coefs["intercept"]}
        if pop != INTERNAL_POP:
            out["intercept"] += coefs[pop]
        for x in self.structure["x_names"]:
            out[x] = coefs[x]
            inter = f"{x}:{pop}"
            if pop != INTERNAL_POP and inter in coefs:
                out[x] += coefs[inter]
        for b in self.structure["b_names"]:
            out[b] = coefs[b]
        return out


def _structure_target(structure: dict) -> TargetModelSpec:
    return TargetModelSpec(
        structure["family"],
        tuple(structure["populations"]),
        {k: tuple(v) for k, v in structure["heterogeneity"].items()},
    )


def _structure_of(dataset: Dataset, target: TargetModelSpec) -> dict:
    return {
        "family": target.family,
        "x_names": dataset.x_names,
        "b_names": dataset.b_names,
        "populations": list(target.populations),
        "heterogeneity": {k: list(v) for k, v in target.heterogeneity.items()},
    }


def _stage(step: str, exc: SyndiError) -> SyndiError:
    wrapped = type(exc)(f"[{step}] {exc}")
    return wrapped.with_traceback(exc.__traceback__)


def _provenance(seed, specs, internal, config, extra=None) -> dict:
    prov = {
        "version": __version__,
        "seed": int(seed),
        "m": config.m,
        "cycles": config.cycles,
        "size_multiplier": config.size_multiplier,
        "r": {s.population_id: s.resolve_r(internal.n_rows) for s in specs},
        "n_internal": internal.n_rows,
        "bootstrap_b": 0,
    }
    prov.update(extra or {})
    return prov


def run_direct(internal: Dataset, target: TargetModelSpec, specs=()) -> FitResult:
    """Internal-data-only regression (the benchmark)."""
    fit = fit_internal(internal, target)
    return FitResult(
        fit.names,
        fit.coef,
        fit.se,
        fit.vcov,
        "direct",
        "naive",
        target.family,
        _structure_of(internal, TargetModelSpec(target.family)),
        {"version": __version__, "n_internal": internal.n_rows},
        converged=fit.converged,
    )


def run_syndi(
    internal: Dataset,
    specs: list[ExternalModelSpec],
    target: TargetModelSpec,
    config: PipelineConfig,
    seed: int,
) -> FitResult:
    """Steps 1-4 end to end; returns original-scale estimates with a naive vcov."""
    if not internal.fully_observed():
        raise ValidationError("internal dataset must be fully observed")
    for spec in specs:
        validate_spec(spec, internal)
    target.check_against(specs)

    record = centering_record(internal)
    internal_fit = fit_internal(internal, target)

    try:
        blocks = [
            generate_synthetic_population(
                internal, spec, target.family, child_rng(seed, STAGE_SYNTH, k)
            )
            for k, spec in enumerate(specs)
        ]
        combined = combine(internal, blocks)
    except SyndiError as exc:
        raise _stage("step 1: synthetic data", exc) from None

    try:
        strategy = ImputationStrategy("syndi", config.m, config.cycles)
        stacked = impute_stack(combined, strategy, child_rng(seed, STAGE_IMPUTE))
    except SyndiError as exc:
        raise _stage("step 2: stacked imputation", exc) from None

    try:
        estimates = initial_estimates(
            internal, internal_fit, specs, target, record,
            child_rng(seed, STAGE_SYNTH, len(specs)), config.size_multiplier,
        )
        stacked = compute_weights(stacked, estimates, target)
    except SyndiError as exc:
        raise _stage("step 3: weights", exc) from None

    try:
        design = build_design(stacked, target)
        y = stacked.data.column_values(stacked.data.y_name)
        fit = fit_glm(design, y, target.family, weights=stacked.weight)
    except SyndiError as exc:
        raise _stage("step 4: weighted fit", exc) from None

    diagnostics = dict(stacked.diagnostics)
    diagnostics["calibration"] = estimates.diagnostics
    diagnostics["population_estimates"] = {
        pop: estimates.entry_dict(pop) for pop in sorted(estimates.entries)
    }
    diagnostics["estimate_source"] = dict(estimates.source)
    diagnostics["weighted_fit_iterations"] = fit.iterations
    return FitResult(
        fit.names,
        fit.coef,
        fit.se,
        fit.vcov,
        "SynDI",
        "naive",
        target.family,
        _structure_of(internal, target),
        _provenance(seed, specs, internal, config),
        diagnostics,
        converged=fit.converged,
    )


def _bootstrap_worker(args) -> np.ndarray | None:
    internal, specs, target, config, seed, b = args
    rng = child_rng(seed, STAGE_BOOTSTRAP, b)
    idx = rng.integers(0, internal.n_rows, internal.n_rows)
    rep_seed = int(rng.integers(2**62))
    try:
        result = run_syndi(internal.rows(idx), specs, target, config, rep_seed)
    except SyndiError:
        return None
    if not result.converged:
        return None
    return result.coef


def bootstrap_variance(
    internal: Dataset,
    specs: list[ExternalModelSpec],
    target: TargetModelSpec,
    config: PipelineConfig,
    b: int,
    seed: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Resample internal rows, repeat steps 1-4, return (se, vcov, n_dropped)."""
    if b < 2:
        raise ValidationError("bootstrap needs at least 2 replicates")
    tasks = [(internal, specs, target, config, seed, i) for i in range(b)]
    results = parallel_map(_bootstrap_worker, tasks, threads)
    kept = [r for r in results if r is not None]
    dropped = b - len(kept)
    if dropped > 0.10 * b:
        raise BootstrapError(f"{dropped}/{b} bootstrap replicates failed to converge")
    coefs = np.vstack(kept)
    se = coefs.std(axis=0, ddof=1)
    vcov = np.cov(coefs, rowvar=False)
    return se, np.atleast_2d(vcov), dropped


def run_syndi_with_bootstrap(
    internal, specs, target, config, seed, b, threads=1
) -> FitResult:
    result = run_syndi(internal, specs, target, config, seed)
    se, vcov, dropped = bootstrap_variance(internal, specs, target, config, b, seed, threads)
    provenance = dict(result.provenance)
    provenance["bootstrap_b"] = b
    diagnostics = dict(result.diagnostics)
    diagnostics["bootstrap_dropped"] = dropped
    return replace(
        result, se=se, vcov=vcov, variance="bootstrap",
        provenance=provenance, diagnostics=diagnostics,
    )


def rubin_pool(fits: list[GlmFit]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rubin's combining rules: pooled mean, se, and total covariance."""
    if len(fits) < 2:
        raise ValidationError("Rubin pooling needs at least 2 fits")
    names = fits[0].names
    for f in fits[1:]:
        if f.names != names:
            raise ValidationError("coefficient names differ across imputation fits")
    m = len(fits)
    coefs = np.vstack([f.coef for f in fits])
    pooled = coefs.mean(axis=0)
    within = np.mean([f.vcov for f in fits], axis=0)
    between = np.cov(coefs, rowvar=False, ddof=1)
    total = within + (1.0 + 1.0 / m) * np.atleast_2d(between)
    return pooled, np.sqrt(np.diag(total)), total


def run_comparison(
    internal: Dataset,
    specs: list[ExternalModelSpec],
    target: TargetModelSpec,
    strategy: str,
    config: PipelineConfig,
    seed: int,
) -> FitResult:
    """FCS or IMB: impute including the outcome, fit per copy, pool with Rubin."""
    if strategy not in ("fcs", "imb"):
        raise ValidationError(f"comparison strategy must be fcs or imb, got {strategy!r}")
    if not internal.fully_observed():
        raise ValidationError("internal dataset must be fully observed")
    for spec in specs:
        validate_spec(spec, internal)
    target.check_against(specs)

    blocks = [
        generate_synthetic_population(
            internal, spec, target.family, child_rng(seed, STAGE_SYNTH, k)
        )
        for k, spec in enumerate(specs)
    ]
    combined = combine(internal, blocks)
    stacked = impute_stack(
        combined, ImputationStrategy(strategy, config.m, config.cycles),
        child_rng(seed, STAGE_IMPUTE),
    )

    fits = []
    n = combined.n_rows
    for m_idx in range(stacked.m):
        rows = slice(m_idx * n, (m_idx + 1) * n)
        copy = stacked.data.rows(np.arange(n) + m_idx * n)
        design = build_design(copy, target)
        y = copy.column_values(copy.y_name)
        fits.append(fit_glm(design, y, target.family))

    if stacked.m == 1:
        fit = fits[0]
        coef, se, vcov = fit.coef, fit.se, fit.vcov
        variance = "naive"
    else:
        coef, se, vcov = rubin_pool(fits)
        variance = "rubin"
    method = strategy.upper()
    diagnostics = dict(stacked.diagnostics)
    diagnostics["nonconverged_fits"] = sum(1 for f in fits if not f.converged)
    return FitResult(
        fits[0].names,
        coef,
        se,
        vcov,
        method,
        variance,
        target.family,
        _structure_of(internal, target),
        _provenance(seed, specs, internal, config, {"strategy": strategy}),
        diagnostics,
        converged=all(f.converged for f in fits),
    )
