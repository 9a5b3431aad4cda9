"""Core tabular data types, model specifications, and CSV ingestion.

A Dataset is an immutable named-column numeric table with an explicit
missingness mask (True = absent) and one population label per row. Shared
covariates carry role "x", internal-only covariates role "b", the outcome
role "y". Block-wise missingness is structural here, which is why absence is
a queryable mask rather than a magic number; masked cells hold NaN sentinels
and must never enter a mean, variance, or regression.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ParseError, ValidationError

INTERNAL_POP = "I0"

ROLES = ("y", "x", "b")


@dataclass(frozen=True)
class Column:
    name: str
    role: str  # "y" | "x" | "b"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown column role {self.role!r} for {self.name!r}")


@dataclass(frozen=True)
class Dataset:
    """Numeric table with missingness mask and per-row population labels."""

    columns: tuple[Column, ...]
    values: np.ndarray  # (n_rows, n_cols) float64, NaN where masked
    mask: np.ndarray  # (n_rows, n_cols) bool, True = missing
    population: np.ndarray  # (n_rows,) str labels

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        population = np.asarray(self.population)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "population", population)
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValidationError("column names must be unique")
        if values.shape != mask.shape or values.ndim != 2:
            raise ValidationError("values and mask must share a 2-d shape")
        if values.shape[1] != len(self.columns):
            raise ValidationError("column count does not match value width")
        if population.shape != (values.shape[0],):
            raise ValidationError("one population label per row required")
        if not np.all(np.isnan(values) == mask):
            raise ValidationError("mask must be true exactly where values are NaN")
        values.setflags(write=False)
        mask.setflags(write=False)
        population.setflags(write=False)

    # -- basic accessors -------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise ValidationError(f"no column named {name!r}")

    def names_with_role(self, role: str) -> list[str]:
        return [c.name for c in self.columns if c.role == role]

    @property
    def x_names(self) -> list[str]:
        return self.names_with_role("x")

    @property
    def b_names(self) -> list[str]:
        return self.names_with_role("b")

    @property
    def y_name(self) -> str | None:
        ys = self.names_with_role("y")
        return ys[0] if ys else None

    def column_values(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def observed(self, name: str) -> np.ndarray:
        j = self.index(name)
        return self.values[~self.mask[:, j], j]

    def is_binary(self, name: str) -> bool:
        obs = self.observed(name)
        return obs.size > 0 and bool(np.all(np.isin(obs, (0.0, 1.0))))

    def rows(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.columns, self.values[idx], self.mask[idx], self.population[idx])

    def with_population(self, label: str) -> "Dataset":
        pop = np.full(self.n_rows, label, dtype=object).astype(str)
        return replace(self, population=pop)

    def fully_observed(self, names: Sequence[str] | None = None) -> bool:
        if names is None:
            return not self.mask.any()
        cols = [self.index(n) for n in names]
        return not self.mask[:, cols].any()


def dataset_from_arrays(
    columns: Sequence[Column],
    values: np.ndarray,
    population: Sequence[str] | str = INTERNAL_POP,
) -> Dataset:
    """Dataset from a dense array; NaN entries become masked cells."""
    values = np.asarray(values, dtype=float)
    mask = np.isnan(values)
    if isinstance(population, str):
        population = np.full(values.shape[0], population)
    return Dataset(tuple(columns), values, mask, np.asarray(population, dtype=str))


# -- CSV ingestion -------------------------------------------------------


def load_dataset(csv_path, schema: Mapping[str, str], family: str | None = None) -> Dataset:
    """Read an RFC-4180 CSV with header; empty fields are missing.

    `schema` maps column name -> role ("y" | "x" | "b") and must cover the
    header exactly. With family="binomial", observed outcome values must lie
    in {0, 1}.
    """
    for name, role in schema.items():
        if role not in ROLES:
            raise ValidationError(f"unknown role {role!r} for column {name!r}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{csv_path}: empty file") from None
        missing = set(schema) - set(header)
        extra = set(header) - set(schema)
        if missing or extra:
            raise ValidationError(
                f"{csv_path}: header does not match schema "
                f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
            )
        columns = tuple(Column(name, schema[name]) for name in header)
        rows = []
        for r, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ParseError(f"{csv_path}: expected {len(header)} fields", row=r, column=None)
            vals = []
            for name, cell in zip(header, rec):
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{csv_path}: malformed number {cell!r}", row=r, column=name) from None
            rows.append(vals)
    values = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
    ds = dataset_from_arrays(columns, values)
    if family == "binomial" and ds.y_name is not None:
        y_obs = ds.observed(ds.y_name)
        bad = y_obs[~np.isin(y_obs, (0.0, 1.0))]
        if bad.size:
            raise DomainError(
                f"binomial outcome {ds.y_name!r} contains value {bad[0]!r} outside {{0, 1}}"
            )
    return ds


def write_dataset(csv_path, dataset: Dataset) -> None:
    """Write a Dataset back to CSV; masked cells become empty fields."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.names)
        for i in range(dataset.n_rows):
            row = [
                "" if dataset.mask[i, j] else repr(float(dataset.values[i, j]))
                for j in range(len(dataset.columns))
            ]
            writer.writerow(row)


def load_schema(schema_path) -> dict[str, str]:
    with open(schema_path, encoding="utf-8") as fh:
        schema = json.load(fh)
    if not isinstance(schema, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in schema.items()
    ):
        raise ValidationError(f"{schema_path}: schema must map column names to roles")
    return schema


# -- centering ------------------------------------------------------------


@dataclass(frozen=True)
class CenteringRecord:
    """Observed-value means of the X and B columns, for centering and undoing it."""

    means: dict[str, float]

    def mean(self, name: str) -> float:
        return self.means.get(name, 0.0)


def centering_record(dataset: Dataset) -> CenteringRecord:
    means = {}
    for col in dataset.columns:
        if col.role in ("x", "b"):
            obs = dataset.observed(col.name)
            means[col.name] = float(obs.mean()) if obs.size else 0.0
    return CenteringRecord(means)


def _shift(dataset: Dataset, record: CenteringRecord, sign: float) -> Dataset:
    values = dataset.values.copy()
    for col in dataset.columns:
        if col.role in ("x", "b"):
            j = dataset.index(col.name)
            values[:, j] = values[:, j] + sign * record.mean(col.name)
    values[dataset.mask] = np.nan
    return replace(dataset, values=values)


def center(dataset: Dataset) -> tuple[Dataset, CenteringRecord]:
    """Shift every X and B column to observed-value mean zero."""
    record = centering_record(dataset)
    return _shift(dataset, record, -1.0), record


def center_with(dataset: Dataset, record: CenteringRecord) -> Dataset:
    return _shift(dataset, record, -1.0)


def uncenter(dataset: Dataset, record: CenteringRecord) -> Dataset:
    return _shift(dataset, record, +1.0)


# -- model specifications --------------------------------------------------


@dataclass(frozen=True)
class CoefficientModel:
    """Category-1 payload: an externally fitted parametric regression."""

    link: str  # "logit" | "identity"
    intercept: float
    slopes: dict[str, float]
    sigma: float | None = None  # residual sd for identity link; defaults to 1.0 downstream

    def __post_init__(self):
        if self.link not in ("logit", "identity"):
            raise ValidationError(f"unsupported external link {self.link!r}")

    def linear_predictor(self, names: Sequence[str], x: np.ndarray) -> np.ndarray:
        beta = np.array([self.slopes[n] for n in names], dtype=float)
        return self.intercept + x @ beta


@dataclass(frozen=True)
class PredictorModel:
    """Category-2 payload: a black box returning P(Y=1 | x) row-wise.

    `predict` is called once per block with an (n, P_k) array and must return
    n probabilities. Subprocess-backed predictors are built in the synth
    module; in-process callables must be picklable for parallel use.
    """

    predict: Callable[[np.ndarray], np.ndarray]
    description: str = "predictor"


@dataclass(frozen=True)
class ExternalModelSpec:
    """Summary-level information for one external population."""

    population_id: str
    covariates: tuple[str, ...]  # the X subset the external model used
    payload: CoefficientModel | PredictorModel
    r: int | None = None  # replication factor; resolved from study_size when absent
    study_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def is_coefficient(self) -> bool:
        return isinstance(self.payload, CoefficientModel)

    def resolve_r(self, n_internal: int) -> int:
        if self.r is not None:
            return self.r
        if self.study_size is not None:
            return default_replication(self.study_size, n_internal)
        return 1


def default_replication(study_size: int, n_internal: int) -> int:
    """Replication factor sizing the synthetic block near the external study size."""
    return int(min(50, max(1, round(study_size / n_internal))))


def validate_spec(spec: ExternalModelSpec, internal: Dataset) -> None:
    """Check an external-model spec against the internal dataset; raise on violation."""
    x_names = set(internal.x_names)
    for name in spec.covariates:
        if name not in x_names:
            raise ValidationError(
                f"external model {spec.population_id!r} uses covariate {name!r} "
                "not present among the internal X columns"
            )
    if spec.population_id == INTERNAL_POP:
        raise ValidationError(f"population id {INTERNAL_POP!r} is reserved for the internal study")
    if spec.r is not None and spec.r < 1:
        raise ValidationError(f"external model {spec.population_id!r}: replication r must be >= 1")
    if spec.is_coefficient:
        slope_names = set(spec.payload.slopes)
        if slope_names != set(spec.covariates):
            raise ValidationError(
                f"external model {spec.population_id!r}: slope names {sorted(slope_names)} "
                f"do not match declared covariates {sorted(spec.covariates)}"
            )


@dataclass(frozen=True)
class TargetModelSpec:
    """Family plus the heterogeneity pattern of the expanded model.

    `heterogeneity` maps each external population id to the X columns whose
    effects may differ there; a listed population always gets its own
    intercept. Population-specific slopes are only allowed for covariates the
    external model actually used, validated in `check_against`.
    """

    family: str  # "binomial" | "gaussian"
    populations: tuple[str, ...] = ()
    heterogeneity: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("binomial", "gaussian"):
            raise ValidationError(f"unsupported family {self.family!r}")
        object.__setattr__(self, "populations", tuple(self.populations))
        het = {k: tuple(v) for k, v in dict(self.heterogeneity).items()}
        unknown = set(het) - set(self.populations)
        if unknown:
            raise ValidationError(f"heterogeneity for undeclared populations {sorted(unknown)}")
        object.__setattr__(self, "heterogeneity", het)

    def slopes_for(self, pop: str) -> tuple[str, ...]:
        return tuple(self.heterogeneity.get(pop, ()))

    def internal_only(self) -> "TargetModelSpec":
        return TargetModelSpec(self.family, (), {})

    def check_against(self, specs: Sequence[ExternalModelSpec]) -> None:
        by_id = {s.population_id: s for s in specs}
        missing = set(self.populations) - set(by_id)
        if missing:
            raise ValidationError(f"target model declares unknown populations {sorted(missing)}")
        for pop in self.populations:
            allowed = set(by_id[pop].covariates)
            bad = set(self.slopes_for(pop)) - allowed
            if bad:
                raise ValidationError(
                    f"population-specific slopes {sorted(bad)} for {pop!r} not permitted: "
                    "the external model did not use these covariates"
                )


def intercepts_only(family: str, specs: Sequence[ExternalModelSpec]) -> TargetModelSpec:
    pops = tuple(s.population_id for s in specs)
    return TargetModelSpec(family, pops, {p: () for p in pops})


def intercepts_and_slopes(family: str, specs: Sequence[ExternalModelSpec]) -> TargetModelSpec:
    pops = tuple(s.population_id for s in specs)
    return TargetModelSpec(family, pops, {s.population_id: tuple(s.covariates) for s in specs})
