"""Statistics over a models x metrics table.

Rank and product-moment correlations, residuals against the reference metric,
metric informativeness via group classifiers on bootstrap resamples, and the
dimensionality of the residual space against a column-permutation null.

Randomized procedures draw each bootstrap resample or permutation from its own
generator seeded with ``(seed, stream, index)``. Results therefore do not depend
on execution order or on how work is split across processes.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .metrics import percentile

L2_STRENGTH = 1.0
GRAD_TOL = 1e-6
MAX_ITER = 10_000

_BOOTSTRAP_STREAM = 0
_PERMUTATION_STREAM = 1
_PCA_BOOTSTRAP_STREAM = 2


class ConvergenceError(DataError):
    pass


@dataclass
class MetricsTable:
    model_ids: list[str]
    group_labels: list[str]
    metric_names: list[str]
    values: np.ndarray  # (models, metrics); NaN marks a missing value
    reference_metric: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.model_ids), len(self.metric_names)):
            raise DataError(f"values shape {self.values.shape} does not match "
                            f"{len(self.model_ids)} models x {len(self.metric_names)} metrics")
        if len(set(self.model_ids)) != len(self.model_ids):
            raise DataError("duplicate model_id in metrics table")
        if len(set(self.metric_names)) != len(self.metric_names):
            raise DataError("duplicate metric name in metrics table")
        if self.reference_metric not in self.metric_names:
            raise DataError(f"reference metric {self.reference_metric!r} not in table")

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.metric_names.index(name)
        except ValueError:
            raise DataError(f"unknown metric {name!r}") from None
        col = self.values[:, j]
        if not np.all(np.isfinite(col)):
            raise DataError(f"metric {name!r} has missing values; subset the table first")
        return col

    def columns(self, names) -> np.ndarray:
        return np.column_stack([self.column(n) for n in names]) if names else np.empty((self.n_models, 0))

    @property
    def reference(self) -> np.ndarray:
        return self.column(self.reference_metric)

    @property
    def other_metrics(self) -> list[str]:
        return [m for m in self.metric_names if m != self.reference_metric]


def read_metrics_table(path: str | os.PathLike, reference_metric: str | None = None) -> MetricsTable:
    """Parse ``model_id,group_label,<metric>...``. The reference defaults to the first metric."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["model_id", "group_label"] or len(header) < 3:
            raise DataError(f"{path}: expected header model_id,group_label,<metric>...")
        metrics = header[2:]
        ids, groups, rows = [], [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0])
            groups.append(row[1])
            try:
                rows.append([float(v) if v.strip() else math.nan for v in row[2:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric metric value") from None
    return MetricsTable(ids, groups, metrics, np.array(rows, dtype=float).reshape(len(ids), len(metrics)),
                        reference_metric or metrics[0])


# -- correlations --------------------------------------------------------------

def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("pearson needs two vectors of equal length")
    if len(x) < 3:
        raise DataError("pearson needs at least 3 observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise DataError("zero variance; correlation undefined")
    r = (dx @ dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def spearman(x, y) -> float:
    return pearson(average_ranks(x), average_ranks(y))


def spearman_matrix(table: MetricsTable, metric_subset=None) -> np.ndarray:
    """Pairwise Spearman correlations; NaN where a column is constant."""
    names = list(metric_subset) if metric_subset is not None else list(table.metric_names)
    if table.n_models < 3:
        raise DataError("spearman_matrix needs at least 3 models")
    ranks = [average_ranks(table.column(n)) for n in names]
    constant = [np.ptp(r) == 0 for r in ranks]
    out = np.full((len(names), len(names)), np.nan)
    for i in range(len(names)):
        if constant[i]:
            continue
        out[i, i] = 1.0
        for j in range(i + 1, len(names)):
            if not constant[j]:
                out[i, j] = out[j, i] = pearson(ranks[i], ranks[j])
    return out


# -- residuals -----------------------------------------------------------------

def _ols_residuals(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    dx = x - x.mean()
    sxx = dx @ dx
    slope = (dx @ (y - y.mean())) / sxx if sxx > 0 else 0.0
    resid = (y - y.mean()) - slope * dx
    return resid - resid.mean()


def residualize(table: MetricsTable, metric: str) -> np.ndarray:
    """Residuals of an ordinary least-squares fit ``metric ~ a + b * reference``."""
    if metric == table.reference_metric:
        raise DataError("cannot residualize the reference metric against itself")
    x = table.reference
    if np.ptp(x) == 0:
        raise DataError("reference metric is constant")
    return _ols_residuals(table.column(metric), x)


def residual_robustness_score(table: MetricsTable, robustness_metrics) -> np.ndarray:
    """Mean robustness metric minus the reference metric, per model."""
    if not robustness_metrics:
        raise DataError("no robustness metrics given")
    return table.columns(list(robustness_metrics)).mean(axis=1) - table.reference


def residual_robustness_correlation(table: MetricsTable, robustness_metrics, transfer_metric: str) -> float:
    return pearson(residual_robustness_score(table, robustness_metrics), table.column(transfer_metric))


# -- multinomial logistic regression -------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(X: np.ndarray, y: np.ndarray, n_classes: int, l2: float = L2_STRENGTH,
                 tol: float = GRAD_TOL, max_iter: int = MAX_ITER) -> np.ndarray:
    """Multinomial logistic regression by damped Newton steps.

    Minimizes summed cross-entropy plus ``l2/2 * ||W||^2``; intercepts are not
    penalized. Returns coefficients of shape ``(d + 1, n_classes)`` whose last
    row is the intercept.
    """
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    penalty = np.full((d + 1, 1), l2)
    penalty[-1] = 0.0
    theta = np.zeros((d + 1, n_classes))

    def objective(t):
        z = Xa @ t
        zmax = z.max(axis=1, keepdims=True)
        logsum = (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1)))
        return float(logsum.sum() - (z * Y).sum() + 0.5 * (penalty * t * t).sum())

    f = objective(theta)
    for _ in range(max_iter):
        P = _softmax(Xa @ theta)
        grad = Xa.T @ (P - Y) + penalty * theta
        if np.sqrt((grad * grad).sum()) <= tol:
            return theta
        # Hessian blocks: sum_i (diag(p_i) - p_i p_i^T) kron x_i x_i^T, laid out as (class, feature).
        A = -np.einsum("ik,il->ikl", P, P)
        A[:, np.arange(n_classes), np.arange(n_classes)] += P
        H = np.einsum("ikl,ia,ib->kalb", A, Xa, Xa).reshape(n_classes * (d + 1), n_classes * (d + 1))
        H[np.diag_indices_from(H)] += np.tile(penalty[:, 0], n_classes)
        g = grad.T.reshape(-1)
        # The intercepts are only defined up to a common shift, so H is singular
        # along that direction; least squares picks the minimum-norm step.
        step = np.linalg.lstsq(H, g, rcond=None)[0].reshape(n_classes, d + 1).T
        t = 1.0
        decrease = float(g @ step.T.reshape(-1))
        while True:
            candidate = theta - t * step
            f_new = objective(candidate)
            if f_new <= f - 1e-4 * t * decrease or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10 and f_new >= f:
            break
        theta, f = candidate, f_new
    P = _softmax(Xa @ theta)
    grad = Xa.T @ (P - Y) + penalty * theta
    if np.sqrt((grad * grad).sum()) <= tol:
        return theta
    raise ConvergenceError(f"logistic regression did not reach gradient norm {tol}")


def _standardize(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


def classifier_accuracy(X: np.ndarray, y: np.ndarray, n_classes: int, l2: float = L2_STRENGTH) -> float:
    """In-sample accuracy of a logistic classifier on standardized features."""
    Z = _standardize(X)
    theta = fit_logistic(Z, y, n_classes, l2)
    pred = np.argmax(np.hstack([Z, np.ones((len(Z), 1))]) @ theta, axis=1)
    return float(np.mean(pred == y))


# -- discriminability ---------------------------------------------------------

@dataclass
class DiscriminabilityEntry:
    feature_set: tuple[str, ...]
    mean: float
    sd: float
    bootstrap_n: int
    deltas: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"feature_set": list(self.feature_set), "delta_mean": self.mean,
                "delta_sd": self.sd, "bootstrap_n": self.bootstrap_n}


def _encode_groups(labels) -> tuple[np.ndarray, int]:
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise DataError("need at least 2 distinct group labels")
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[g] for g in labels]), len(classes)


def stratified_resample(y: np.ndarray, seed: int, index: int) -> np.ndarray:
    """Bootstrap row indices drawn with replacement inside each group."""
    rng = np.random.default_rng([seed, _BOOTSTRAP_STREAM, index])
    parts = []
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        parts.append(members[rng.integers(0, len(members), len(members))])
    return np.concatenate(parts)


def _accuracies(X: np.ndarray, y: np.ndarray, n_classes: int, bootstrap_n: int, seed: int,
                label: tuple[str, ...]) -> np.ndarray:
    out = np.empty(bootstrap_n)
    for b in range(bootstrap_n):
        idx = stratified_resample(y, seed, b)
        try:
            out[b] = classifier_accuracy(X[idx], y[idx], n_classes)
        except ConvergenceError:
            raise ConvergenceError(f"classifier on {list(label)} did not converge "
                                   f"(bootstrap sample {b})") from None
    return out


def _entry(extras: tuple[str, ...], base_acc: np.ndarray, acc: np.ndarray) -> DiscriminabilityEntry:
    deltas = acc - base_acc
    sd = float(np.std(deltas, ddof=1)) if len(deltas) > 1 else 0.0
    return DiscriminabilityEntry(extras, float(deltas.mean()), sd, len(deltas), deltas)


def discriminability(table: MetricsTable, extra_metrics, bootstrap_n: int = 1000,
                     seed: int = 0) -> DiscriminabilityEntry:
    """Accuracy gain from adding ``extra_metrics`` to the reference metric.

    Each bootstrap sample resamples models within their groups; both classifiers
    are fit and scored on the same resample (in-sample accuracy).
    """
    extras = tuple(extra_metrics)
    if len(extras) > 2:
        raise DataError("at most two extra metrics per feature set")
    if bootstrap_n < 1:
        raise DataError("bootstrap_n must be >= 1")
    y, k = _encode_groups(table.group_labels)
    ref = table.columns([table.reference_metric])
    base = _accuracies(ref, y, k, bootstrap_n, seed, (table.reference_metric,))
    full = _accuracies(table.columns([table.reference_metric, *extras]), y, k, bootstrap_n, seed,
                       (table.reference_metric, *extras))
    return _entry(extras, base, full)


def _set_worker(args):
    X, y, k, bootstrap_n, seed, label = args
    return _accuracies(X, y, k, bootstrap_n, seed, label)


def discriminability_all(table: MetricsTable, max_extras: int = 1, bootstrap_n: int = 1000,
                         seed: int = 0, metrics=None, jobs: int = 1) -> list[DiscriminabilityEntry]:
    """Discriminability of every set of up to ``max_extras`` non-reference metrics.

    The reference-only accuracies are computed once and paired with every set,
    since resample ``b`` is the same rows for all sets.
    """
    if max_extras not in (1, 2):
        raise DataError("max_extras must be 1 or 2")
    if bootstrap_n < 1:
        raise DataError("bootstrap_n must be >= 1")
    candidates = list(metrics) if metrics is not None else table.other_metrics
    sets = [s for r in range(1, max_extras + 1) for s in itertools.combinations(candidates, r)]
    y, k = _encode_groups(table.group_labels)
    ref_name = table.reference_metric
    work = [(table.columns([ref_name]), y, k, bootstrap_n, seed, (ref_name,))]
    work += [(table.columns([ref_name, *s]), y, k, bootstrap_n, seed, (ref_name, *s)) for s in sets]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_set_worker, work))
    else:
        accs = [_set_worker(w) for w in work]
    base = accs[0]
    return [_entry(s, base, acc) for s, acc in zip(sets, accs[1:])]


# -- residual PCA ----------------------------------------------------------------

@dataclass
class ResidualPcaResult:
    metrics: list[str]
    variance_fractions: np.ndarray
    null_bands: np.ndarray  # (components, 2): 2.5 / 97.5 percentiles
    bootstrap_ci: np.ndarray  # (components, 2)
    permutations: int
    bootstrap_n: int

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "variance_fractions": self.variance_fractions.tolist(),
            "null_bands": self.null_bands.tolist(),
            "bootstrap_ci": self.bootstrap_ci.tolist(),
            "permutations": self.permutations,
            "bootstrap_n": self.bootstrap_n,
        }


def variance_fractions(R: np.ndarray, n_components: int | None = None) -> np.ndarray:
    """Eigenvalue shares of the correlation matrix of the columns of ``R``.

    Constant columns are zeroed instead of standardized and add no variance.
    """
    n, p = R.shape
    centered = R - R.mean(axis=0)
    sd = centered.std(axis=0)
    # Columns whose spread is round-off relative to their magnitude count as constant.
    scale = np.maximum(np.abs(R).max(axis=0), 1.0)
    live = sd > 1e-12 * scale
    Z = np.zeros_like(centered)
    Z[:, live] = centered[:, live] / sd[live]
    corr = Z.T @ Z / n
    eig = np.clip(np.linalg.eigvalsh(corr)[::-1], 0.0, None)
    total = eig.sum()
    frac = eig / total if total > 0 else np.zeros(p)
    return frac[:n_components] if n_components is not None else frac


def residual_matrix(table: MetricsTable, metrics) -> np.ndarray:
    return np.column_stack([residualize(table, m) for m in metrics])


def _bands(samples: np.ndarray) -> np.ndarray:
    return np.array([[percentile(col, 0.025), percentile(col, 0.975)] for col in samples.T])


def residual_pca(table: MetricsTable, metrics=None, n_components: int = 4, permutations: int = 1000,
                 bootstrap_n: int = 1000, seed: int = 0) -> ResidualPcaResult:
    """Variance explained by the leading components of the metric residuals.

    The null distribution permutes every residual column independently; the
    confidence interval resamples models and refits the residuals each time.
    """
    metrics = list(metrics) if metrics is not None else table.other_metrics
    if table.reference_metric in metrics:
        raise DataError("the reference metric cannot be among the residualized metrics")
    if len(metrics) < n_components:
        raise DataError(f"need at least {n_components} metrics, got {len(metrics)}")
    if permutations < 1 or bootstrap_n < 1:
        raise DataError("permutations and bootstrap_n must be >= 1")
    R = residual_matrix(table, metrics)
    observed = variance_fractions(R, n_components)

    null = np.empty((permutations, n_components))
    for b in range(permutations):
        rng = np.random.default_rng([seed, _PERMUTATION_STREAM, b])
        shuffled = np.column_stack([rng.permutation(col) for col in R.T])
        null[b] = variance_fractions(shuffled, n_components)

    x = table.reference
    Y = table.columns(metrics)
    n = table.n_models
    boot = np.empty((bootstrap_n, n_components))
    for b in range(bootstrap_n):
        rng = np.random.default_rng([seed, _PCA_BOOTSTRAP_STREAM, b])
        idx = rng.integers(0, n, n)
        Rb = np.column_stack([_ols_residuals(Y[idx, j], x[idx]) for j in range(Y.shape[1])])
        boot[b] = variance_fractions(Rb, n_components)

    return ResidualPcaResult(metrics, observed, _bands(null), _bands(boot), permutations, bootstrap_n)
