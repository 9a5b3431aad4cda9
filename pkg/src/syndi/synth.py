"""Step 1: convert external summary information into synthetic data blocks.

For external population k the synthetic covariates are the internal X_k rows
replicated r_k times, and synthetic outcomes are drawn from the external
conditional law: Bernoulli(p_k(x)) for logistic summaries or black-box
predictors, N(x beta_k, sigma_k^2) for linear summaries. Covariates the
external model never measured (the remaining X's and all B's) stay masked.
The marginal X distribution deliberately mirrors the internal study; only the
conditional law of the outcome carries external information.
"""

from __future__ import annotations

import csv
import io
import logging
import subprocess
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .datamodel import (
    INTERNAL_POP,
    CoefficientModel,
    Dataset,
    ExternalModelSpec,
    validate_spec,
)
from .errors import PredictorError, PredictorProtocolError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CombinedDataset:
    """Internal rows first, then one synthetic block per external population."""

    data: Dataset
    n_internal: int
    block_sizes: dict[str, int]

    @property
    def n_rows(self) -> int:
        return self.data.n_rows


@dataclass(frozen=True)
class SubprocessPredictor:
    """Black-box predictor speaking the stdin/stdout CSV protocol.

    The executable receives a headered CSV of X_k rows on standard input and
    must write one decimal probability per line, same order, exiting 0.
    """

    command: tuple[str, ...]
    covariates: tuple[str, ...]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(self.covariates)
        for row in np.atleast_2d(x):
            writer.writerow([repr(float(v)) for v in row])
        try:
            proc = subprocess.run(
                list(self.command),
                input=buf.getvalue(),
                capture_output=True,
                text=True,
                check=False,
            )
        except OSError as exc:
            raise PredictorError(f"failed to invoke predictor {self.command}: {exc}") from exc
        if proc.returncode != 0:
            raise PredictorError(
                f"predictor {self.command} exited {proc.returncode}: {proc.stderr.strip()}"
            )
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != len(x):
            raise PredictorProtocolError(
                f"predictor returned {len(lines)} values for {len(x)} rows"
            )
        try:
            return np.array([float(ln) for ln in lines])
        except ValueError as exc:
            raise PredictorProtocolError(f"non-numeric predictor output: {exc}") from None


def _external_probabilities(spec: ExternalModelSpec, x_block: np.ndarray) -> np.ndarray:
    if isinstance(spec.payload, CoefficientModel):
        eta = spec.payload.linear_predictor(spec.covariates, x_block)
        return expit(eta)
    probs = np.asarray(spec.payload.predict(x_block), dtype=float)
    if probs.shape != (x_block.shape[0],):
        raise PredictorProtocolError(
            f"predictor for {spec.population_id!r} returned shape {probs.shape}, "
            f"expected ({x_block.shape[0]},)"
        )
    bad = ~((probs >= 0.0) & (probs <= 1.0))
    if bad.any():
        idx = int(np.argmax(bad))
        raise PredictorProtocolError(
            f"predictor for {spec.population_id!r} returned {probs[idx]!r} at row {idx}, "
            "outside [0, 1]"
        )
    return probs


def generate_synthetic_population(
    internal: Dataset,
    spec: ExternalModelSpec,
    family: str,
    rng: np.random.Generator,
    r: int | None = None,
) -> Dataset:
    """Synthetic block for one external population (outcomes drawn, not stored as probabilities)."""
    validate_spec(spec, internal)
    if not internal.fully_observed(spec.covariates):
        raise ValidationError(
            f"internal data must be fully observed on {list(spec.covariates)} "
            f"to replicate it for {spec.population_id!r}"
        )
    r = spec.resolve_r(internal.n_rows) if r is None else int(r)
    x_cols = [internal.index(n) for n in spec.covariates]
    x_block = np.tile(internal.values[:, x_cols], (r, 1))
    n_syn = x_block.shape[0]

    if family == "binomial":
        if spec.is_coefficient and spec.payload.link != "logit":
            raise ValidationError(
                f"external model {spec.population_id!r} has link {spec.payload.link!r}, "
                "expected logit for a binomial target"
            )
        probs = _external_probabilities(spec, x_block)
        y_syn = (rng.random(n_syn) < probs).astype(float)
    elif family == "gaussian":
        if not spec.is_coefficient:
            raise ValidationError("gaussian targets require Category-1 external models")
        mu = spec.payload.linear_predictor(spec.covariates, x_block)
        sigma = spec.payload.sigma
        if sigma is None:
            sigma = 1.0
            logger.info(
                "external model %s has no residual sd; defaulting to 1.0", spec.population_id
            )
        y_syn = mu + sigma * rng.standard_normal(n_syn)
    else:
        raise ValidationError(f"unsupported family {family!r}")

    values = np.full((n_syn, len(internal.columns)), np.nan)
    values[:, internal.index(internal.y_name)] = y_syn
    for name, col in zip(spec.covariates, x_cols):
        values[:, internal.index(name)] = x_block[:, spec.covariates.index(name)]
    mask = np.isnan(values)
    pop = np.full(n_syn, spec.population_id)
    return Dataset(internal.columns, values, mask, pop)


def combine(internal: Dataset, synthetic_blocks: list[Dataset]) -> CombinedDataset:
    """Stack internal data with the synthetic blocks, internal first."""
    block_sizes: dict[str, int] = {}
    parts = [internal.with_population(INTERNAL_POP)]
    for block in synthetic_blocks:
        if block.columns != internal.columns:
            raise ValidationError("synthetic block schema does not match internal data")
        pop = str(block.population[0])
        block_sizes[pop] = block.n_rows
        parts.append(block)
    values = np.vstack([p.values for p in parts])
    mask = np.vstack([p.mask for p in parts])
    population = np.concatenate([p.population for p in parts])
    data = Dataset(internal.columns, values, mask, population)
    return CombinedDataset(data, internal.n_rows, block_sizes)
