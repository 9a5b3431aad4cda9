"""Step 2: stacked multiple imputation of block-wise-missing covariates.

The proposed strategy imputes by chained equations *without the outcome*
(conditioning only on the other covariates, and never on population
indicators, since the conditional law of missing covariates given observed
ones is assumed shared across populations). The FCS and IMB comparison
strategies condition on the outcome as well; IMB visits columns in monotone
order with a single ordered pass per copy.

Each univariate model is proper:  continuous columns use a normal linear
regression with a posterior parameter draw followed by a predictive draw,
binary columns use a logistic regression with an approximate-posterior
coefficient draw followed by a Bernoulli draw. Predictive mean matching is
deliberately not used, keeping the draws analytically checkable.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .datamodel import INTERNAL_POP, Dataset
from .errors import ValidationError
from .synth import CombinedDataset

logger = logging.getLogger(__name__)

RIDGE_FALLBACK = 1e-4


@dataclass(frozen=True)
class ImputationStrategy:
    kind: str  # "syndi" | "fcs" | "imb"
    m: int = 100
    cycles: int = 10

    def __post_init__(self):
        if self.kind not in ("syndi", "fcs", "imb"):
            raise ValidationError(f"unknown imputation strategy {self.kind!r}")
        if self.m < 1:
            raise ValidationError("number of imputations m must be >= 1")
        if self.cycles < 1:
            raise ValidationError("chained-equation cycles must be >= 1")

    @property
    def uses_outcome(self) -> bool:
        return self.kind in ("fcs", "imb")


@dataclass(frozen=True)
class StackedDataset:
    """M completed copies of the combined data, stacked by (imputation, subject)."""

    data: Dataset  # MN rows, no masked cells
    subject_id: np.ndarray  # (MN,) 0..N-1
    imputation: np.ndarray  # (MN,) 1..M
    weight: np.ndarray  # (MN,) per-row weights, each subject's copies sum to 1
    m: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return self.data.n_rows // self.m

    def with_weights(self, weight: np.ndarray, diagnostics: dict | None = None) -> "StackedDataset":
        diag = dict(self.diagnostics)
        diag.update(diagnostics or {})
        return StackedDataset(self.data, self.subject_id, self.imputation, weight, self.m, diag)


def monotone_order(combined: CombinedDataset) -> list[str]:
    """Missing covariate columns sorted by ascending missing count, ties by schema order."""
    data = combined.data
    out = []
    for j, col in enumerate(data.columns):
        if col.role == "y":
            continue
        n_missing = int(data.mask[:, j].sum())
        if n_missing > 0:
            out.append((n_missing, j, col.name))
    out.sort(key=lambda t: (t[0], t[1]))
    return [name for _, _, name in out]


def _chol_psd(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return np.linalg.cholesky(a + 1e-10 * np.eye(a.shape[0]))


def _spd_inv(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError:
        return np.linalg.inv(a + 1e-10 * np.trace(a) / a.shape[0] * np.eye(a.shape[0]))


def _draw_linear(Xo, yo, Xm, rng):
    """Posterior draw of a normal linear imputation model, then predictive draw."""
    n, p = Xo.shape
    xtx_inv = _spd_inv(Xo.T @ Xo)
    beta = xtx_inv @ (Xo.T @ yo)
    resid = yo - Xo @ beta
    rss = float(resid @ resid)
    df = max(n - p, 1)
    sigma2 = rss / rng.chisquare(df) if rss > 0 else 0.0
    beta_star = beta + _chol_psd(sigma2 * xtx_inv) @ rng.standard_normal(p)
    return Xm @ beta_star + np.sqrt(sigma2) * rng.standard_normal(Xm.shape[0])


def _logit_fit(X, y, ridge=0.0, max_iter=50, tol=1e-6, start=None):
    # tol is looser than the outcome-model IRLS: these fits only seed the
    # posterior parameter draw, whose noise dwarfs 1e-6
    n, p = X.shape
    beta = np.zeros(p) if start is None else start.copy()
    pen = np.full(p, ridge)
    pen[0] = 0.0
    converged = False
    for _ in range(max_iter):
        mu = np.clip(expit(X @ beta), 1e-10, 1 - 1e-10)
        w = mu * (1.0 - mu)
        XtWX = X.T @ (w[:, None] * X) + np.diag(pen)
        score = X.T @ (y - mu) - pen * beta
        try:
            step = np.linalg.solve(XtWX, score)
        except np.linalg.LinAlgError:
            return beta, None, False
        beta = beta + step
        if not np.isfinite(beta).all() or np.max(np.abs(beta)) > 1e8:
            return beta, None, False
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    mu = np.clip(expit(X @ beta), 1e-10, 1 - 1e-10)
    XtWX = X.T @ ((mu * (1 - mu))[:, None] * X) + np.diag(pen)
    try:
        vcov = np.linalg.inv(XtWX)
    except np.linalg.LinAlgError:
        vcov = None
    return beta, vcov, converged


def _draw_binary(Xo, yo, Xm, rng, diag, start=None):
    """Approximate-posterior logistic draw, then Bernoulli draw."""
    beta, vcov, ok = _logit_fit(Xo, yo, start=start)
    if (not ok or vcov is None) and start is not None:
        beta, vcov, ok = _logit_fit(Xo, yo)  # retry cold before declaring separation
    if not ok or vcov is None:
        beta, vcov, ok = _logit_fit(Xo, yo, ridge=RIDGE_FALLBACK)
        diag["ridge_fallbacks"] = diag.get("ridge_fallbacks", 0) + 1
        logger.debug("imputation model separation; ridge-stabilized fit used")
        if vcov is None:
            raise ValidationError("binary imputation model is degenerate even under ridge")
    beta_star = beta + _chol_psd(vcov) @ rng.standard_normal(len(beta))
    probs = expit(Xm @ beta_star)
    return (rng.random(Xm.shape[0]) < probs).astype(float), beta


def _impute_one_copy(values, mask, col_meta, order, strategy, y_col, rows, rng, diag):
    """Complete one copy in place on `values` (a writable copy)."""
    warm: dict[int, np.ndarray] = {}
    if strategy.kind in ("syndi", "fcs"):
        # initialize missing cells from the observed marginal, then sweep
        for _, j, _ in order:
            obs_idx, miss_idx = rows[j]
            obs = values[obs_idx, j]
            values[miss_idx, j] = obs[rng.integers(0, obs.size, miss_idx.size)]
        for _ in range(strategy.cycles):
            for name, j, binary in order:
                preds = [jj for _, jj, _ in col_meta if jj != j]
                _impute_column(values, j, preds, binary, strategy, y_col, rows[j], rng, diag, warm)
    else:  # imb: single ordered pass, conditioning on everything complete so far
        complete = [j for _, j, _ in col_meta if not mask[:, j].any()]
        for name, j, binary in order:
            _impute_column(values, j, complete, binary, strategy, y_col, rows[j], rng, diag, warm)
            complete.append(j)
    return values


def _impute_column(values, j, pred_cols, binary, strategy, y_col, row_split, rng, diag, warm):
    obs_idx, miss_idx = row_split
    cols = list(pred_cols) + ([y_col] if strategy.uses_outcome else [])
    X_all = np.empty((values.shape[0], len(cols) + 1))
    X_all[:, 0] = 1.0
    np.take(values, cols, axis=1, out=X_all[:, 1:])
    Xo, yo, Xm = X_all[obs_idx], values[obs_idx, j], X_all[miss_idx]
    if binary:
        values[miss_idx, j], warm[j] = _draw_binary(Xo, yo, Xm, rng, diag, start=warm.get(j))
    else:
        values[miss_idx, j] = _draw_linear(Xo, yo, Xm, rng)


def impute_stack(
    combined: CombinedDataset, strategy: ImputationStrategy, rng: np.random.Generator
) -> StackedDataset:
    """Create M completed copies of the combined data and stack them."""
    data = combined.data
    internal_rows = data.population == INTERNAL_POP
    cov_cols = [(c.name, data.index(c.name), data.is_binary(c.name))
                for c in data.columns if c.role in ("x", "b")]
    if data.mask[internal_rows][:, [j for _, j, _ in cov_cols]].any():
        raise ValidationError("internal block must be fully observed before imputation")
    y_col = data.index(data.y_name)
    if data.mask[:, y_col].any():
        raise ValidationError("outcome must be observed everywhere (synthetic blocks carry drawn outcomes)")

    order_names = monotone_order(combined)
    name_to_meta = {name: (name, j, binary) for name, j, binary in cov_cols}
    order = [name_to_meta[n] for n in order_names]
    for name, j, _ in order:
        if not (~data.mask[:, j]).any():
            raise ValidationError(f"column {name!r} has no observed rows anywhere")

    n = data.n_rows
    m = strategy.m
    diag: dict = {"ridge_fallbacks": 0}
    rows = {j: (np.flatnonzero(~data.mask[:, j]), np.flatnonzero(data.mask[:, j]))
            for _, j, _ in order}
    copies = []
    children = rng.spawn(m)
    for child in children:
        vals = data.values.copy()
        if order:
            _impute_one_copy(vals, data.mask, cov_cols, order, strategy, y_col, rows, child, diag)
        copies.append(vals)

    stacked_values = np.vstack(copies)
    stacked_pop = np.tile(data.population, m)
    stacked_mask = np.zeros_like(stacked_values, dtype=bool)
    stacked = Dataset(data.columns, stacked_values, stacked_mask, stacked_pop)
    subject_id = np.tile(np.arange(n), m)
    imputation = np.repeat(np.arange(1, m + 1), n)
    weight = np.full(n * m, 1.0 / m)
    return StackedDataset(stacked, subject_id, imputation, weight, m, diag)


def write_stacked_csv(stacked: StackedDataset, path) -> None:
    """Dump the stacked long data for external inspection."""
    data = stacked.data
    cov_names = data.x_names + data.b_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "pop", "m", "weight", *cov_names, data.y_name])
        for i in range(data.n_rows):
            writer.writerow(
                [
                    int(stacked.subject_id[i]),
                    data.population[i],
                    int(stacked.imputation[i]),
                    repr(float(stacked.weight[i])),
                    *[repr(float(data.column_values(n)[i])) for n in cov_names],
                    repr(float(data.column_values(data.y_name)[i])),
                ]
            )
