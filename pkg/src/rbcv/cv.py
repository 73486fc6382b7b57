"""Control-variate Monte Carlo with a greedy-selected basis of variates.

The estimand is a family of expectations E(Z^lam) indexed by a parameter
point lam. A small set of anchor parameters is selected by a weak greedy
search over a finite trial set; at each anchor the mean is estimated once to
high accuracy (m_large realizations on a dedicated stream block), yielding
centered variates Y_i = Z^{anchor_i} - mean_estimate_i. At any query lam,
coefficients alpha are fitted from m_small realizations by least squares on
the sample covariances, and the estimator averages
Z^lam_m - sum_i alpha_i * Y_i_m over m_test realizations.

Common random numbers: realization m of every family member uses
stream_id = m, so variates correlate strongly with the target across the
whole parameter domain. Anchor mean estimates use disjoint high stream-id
blocks and are therefore independent of every online realization and of each
other.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigurationError
from .rng import Accumulator, ConfidenceInterval, accumulate, clt_interval, normal_quantile

ParamPoint = tuple

# stream-id layout: online realizations live at stream_id = m = 0, 1, 2, ...;
# anchor i's high-accuracy mean uses the disjoint block below
ANCHOR_STREAM_BASE = 1 << 40
ANCHOR_STREAM_STRIDE = 1 << 32

RANK_DROP_RTOL = 1e-12


def anchor_stream_indices(i: int, m_large: int) -> np.ndarray:
    """Stream ids reserved for the m_large sample of the i-th anchor."""
    start = ANCHOR_STREAM_BASE + i * ANCHOR_STREAM_STRIDE
    return start + np.arange(m_large)


class ParametrizedModel(ABC):
    """A family of square-integrable random variables Z^lam.

    Realization m is a pure function of (seed, lam, m) and must use
    RandomStream(seed, stream_id=m) for its draws, so that for fixed m every
    parameter point sees the same underlying random numbers.
    """

    seed: int = 0

    @abstractmethod
    def realize_block(self, point: ParamPoint, indices: np.ndarray) -> np.ndarray:
        """Realizations at the given realization indices."""

    def realize(self, point: ParamPoint, m: int) -> float:
        return float(self.realize_block(point, np.asarray([m]))[0])


@dataclass
class ControlVariate:
    """One anchor of the variate basis."""

    anchor: ParamPoint
    mean_estimate: float
    mean_variance: float
    m_large: int
    stored_realizations: np.ndarray

    def raw_values(self, model: ParametrizedModel, indices: np.ndarray) -> np.ndarray:
        """Anchor realizations, served from the stored cache where possible."""
        idx = np.asarray(indices)
        out = np.empty(len(idx), dtype=float)
        cached = idx < len(self.stored_realizations)
        out[cached] = self.stored_realizations[idx[cached]]
        if not cached.all():
            out[~cached] = model.realize_block(self.anchor, idx[~cached])
        return out


@dataclass(frozen=True)
class GreedyRecord:
    n_variates: int
    sigma: float
    anchor: ParamPoint | None
    tol_met: bool


@dataclass
class VariateBasis:
    variates: list[ControlVariate] = field(default_factory=list)
    trace: list[GreedyRecord] = field(default_factory=list)
    tol_met: bool = True

    @property
    def anchors(self) -> list[ParamPoint]:
        return [cv.anchor for cv in self.variates]

    def __len__(self) -> int:
        return len(self.variates)


@dataclass(frozen=True)
class FitResult:
    alpha: np.ndarray
    dropped: list[int]


def _center(target: np.ndarray, columns: np.ndarray):
    t = target - target.mean()
    x = columns - columns.mean(axis=0)
    scale = float(np.linalg.norm(x, axis=0).max()) if columns.shape[1] else 0.0
    return t, x, scale


def _fit_qr(t: np.ndarray, x: np.ndarray, scale: float) -> FitResult:
    n_cols = x.shape[1]
    threshold = RANK_DROP_RTOL * scale
    q_cols: list[np.ndarray] = []
    kept: list[int] = []
    dropped: list[int] = []
    r = np.zeros((n_cols, n_cols))
    for j in range(n_cols):
        v = x[:, j].copy()
        # two orthogonalization passes keep loss of orthogonality at O(eps)
        for _ in range(2):
            for pos, q in enumerate(q_cols):
                proj = q @ v
                v -= proj * q
                r[pos, j] += proj
        norm = float(np.linalg.norm(v))
        if norm <= threshold:
            dropped.append(j)
            continue
        r[len(q_cols), j] = norm
        q_cols.append(v / norm)
        kept.append(j)
    alpha = np.zeros(n_cols)
    if kept:
        rhs = np.array([q @ t for q in q_cols])
        rr = r[: len(kept), kept]
        alpha[kept] = solve_triangular(rr, rhs, lower=False)
    return FitResult(alpha=alpha, dropped=dropped)


def _fit_normal_eq(t: np.ndarray, x: np.ndarray, scale: float) -> FitResult:
    n_cols = x.shape[1]
    gram = x.T @ x
    rhs_full = x.T @ t
    threshold_sq = (RANK_DROP_RTOL * scale) ** 2
    kept: list[int] = []
    dropped: list[int] = []
    low = np.zeros((n_cols, n_cols))
    for j in range(n_cols):
        k = len(kept)
        w = solve_triangular(low[:k, :k], gram[kept, j], lower=True) if k else np.zeros(0)
        d = gram[j, j] - w @ w
        if d <= threshold_sq:
            dropped.append(j)
            continue
        low[k, :k] = w
        low[k, k] = math.sqrt(d)
        kept.append(j)
    alpha = np.zeros(n_cols)
    if kept:
        k = len(kept)
        y = solve_triangular(low[:k, :k], rhs_full[kept], lower=True)
        alpha[kept] = solve_triangular(low[:k, :k].T, y, lower=False)
    return FitResult(alpha=alpha, dropped=dropped)


def fit_coefficients(
    target_reals: np.ndarray, variate_reals: np.ndarray, method: str = "qr"
) -> FitResult:
    """Variance-minimizing coefficients for the given variate columns.

    Solves the covariance least-squares problem: both the target and the
    columns are sample-centered internally, so the result minimizes the
    empirical variance of target - columns @ alpha. Columns whose pivot
    falls below 1e-12 of the leading (largest) column norm are dropped and
    reported in the result; their coefficients are returned as 0.

    method "qr" runs modified Gram-Schmidt on the centered realization
    matrix; "normal_eq" solves the sample-covariance normal equations. The
    two agree to solver precision on well-conditioned systems.
    """
    target = np.asarray(target_reals, dtype=float)
    columns = np.asarray(variate_reals, dtype=float)
    if columns.ndim != 2 or len(target) != columns.shape[0]:
        raise ConfigurationError(
            f"variate matrix shape {columns.shape} incompatible with {len(target)} target realizations"
        )
    m, n_cols = columns.shape
    if n_cols > m:
        raise ConfigurationError(
            f"cannot fit {n_cols} coefficients from {m} realizations; need m_small >= I"
        )
    if method not in ("qr", "normal_eq"):
        raise ConfigurationError(f"unknown fit method {method!r}; expected 'qr' or 'normal_eq'")
    if n_cols == 0:
        return FitResult(alpha=np.zeros(0), dropped=[])
    t, x, scale = _center(target, columns)
    if scale == 0.0:
        return FitResult(alpha=np.zeros(n_cols), dropped=list(range(n_cols)))
    fit = _fit_qr if method == "qr" else _fit_normal_eq
    return fit(t, x, scale)


@dataclass(frozen=True)
class ReducedEstimate:
    point: ParamPoint
    mean: float
    reduced_variance: float
    coefficients: np.ndarray
    dropped: list[int]
    interval: ConfidenceInterval
    bias_halfwidths: np.ndarray
    m_test: int

    @property
    def n_variates(self) -> int:
        return len(self.coefficients)

    @property
    def total_halfwidth(self) -> float:
        """CLT halfwidth plus the anchor-mean bias terms (always >= CLT)."""
        return self.interval.halfwidth + float(self.bias_halfwidths.sum())


def _estimate_from_arrays(
    point: ParamPoint,
    target_fit: np.ndarray | None,
    columns_fit: np.ndarray | None,
    target_test: np.ndarray,
    columns_test: np.ndarray,
    variates: Sequence[ControlVariate],
    method: str,
    level: float,
    coefficients: np.ndarray | None,
) -> ReducedEstimate:
    if coefficients is not None:
        alpha = np.asarray(coefficients, dtype=float)
        dropped: list[int] = []
    elif variates:
        fit = fit_coefficients(target_fit, columns_fit, method=method)
        alpha, dropped = fit.alpha, fit.dropped
    else:
        alpha, dropped = np.zeros(0), []
    values = target_test if len(alpha) == 0 else target_test - columns_test @ alpha
    acc = accumulate(values)
    interval = clt_interval(acc, level)
    a = normal_quantile(level)
    bias = np.array(
        [abs(al) * a * math.sqrt(cv.mean_variance / cv.m_large) for al, cv in zip(alpha, variates)]
    )
    return ReducedEstimate(
        point=point,
        mean=acc.mean,
        reduced_variance=acc.variance,
        coefficients=alpha,
        dropped=dropped,
        interval=interval,
        bias_halfwidths=bias,
        m_test=len(values),
    )


def reduced_estimate(
    model: ParametrizedModel,
    basis: VariateBasis | Sequence[ControlVariate],
    point: ParamPoint,
    m_small: int = 10,
    m_test: int = 10,
    reuse_small_as_test: bool = True,
    method: str = "qr",
    level: float = 0.95,
    coefficients: np.ndarray | None = None,
) -> ReducedEstimate:
    """Variance-reduced mean estimate of Z^point.

    Coefficients are fitted on realizations 0..m_small-1; the estimator is
    averaged over realizations 0..m_test-1 when reuse_small_as_test is true
    (greedy exploration mode) or over the fresh block m_small..m_small+m_test-1
    otherwise (certified mode, for which the CLT interval is exact). With an
    empty basis this reduces to plain Monte Carlo over the same indices,
    bit-for-bit. Passing explicit coefficients skips the fit.
    """
    variates = list(basis.variates if isinstance(basis, VariateBasis) else basis)
    if m_test < 2:
        raise ConfigurationError(f"m_test must be at least 2 for a variance estimate, got {m_test}")
    test_idx = np.arange(m_test) if reuse_small_as_test else m_small + np.arange(m_test)
    target_fit = columns_fit = None
    if variates and coefficients is None:
        fit_idx = np.arange(m_small)
        target_fit = model.realize_block(point, fit_idx)
        columns_fit = np.column_stack(
            [cv.raw_values(model, fit_idx) - cv.mean_estimate for cv in variates]
        )
    if variates:
        columns_test = np.column_stack(
            [cv.raw_values(model, test_idx) - cv.mean_estimate for cv in variates]
        )
    else:
        columns_test = np.zeros((m_test, 0))
    if reuse_small_as_test and target_fit is not None and m_test == m_small:
        target_test = target_fit
    else:
        target_test = model.realize_block(point, test_idx)
    return _estimate_from_arrays(
        point, target_fit, columns_fit, target_test, columns_test,
        variates, method, level, coefficients,
    )


@dataclass(frozen=True)
class WeakGreedyConfig:
    tol: float
    i_max: int
    m_large: int = 10_000
    m_small: int = 10
    m_test: int = 10
    method: str = "qr"
    level: float = 0.95


def weak_greedy(
    model: ParametrizedModel,
    trial_points: Sequence[ParamPoint],
    config: WeakGreedyConfig,
    map_fn: Callable | None = None,
) -> VariateBasis:
    """Select anchors by maximizing the reduced variance over the trial set.

    Iteration I sweeps the trial set with the current I-variate basis
    (coefficients refitted per point on m_small realizations, variance
    measured on the reused m_test sample), records sigma_I = max reduced
    variance, and stops when sigma_I <= tol (tol_met) or I = i_max (basis
    returned with tol_met False, not an exception). Otherwise the argmax
    point (first occurrence on ties, existing anchors excluded) becomes the
    next anchor and its mean is estimated on its reserved stream block.

    map_fn, if given, replaces the builtin map for the per-point sweep; any
    order-preserving parallel map yields identical results.
    """
    points = list(trial_points)
    if not points:
        raise ConfigurationError("weak_greedy needs a nonempty trial set")
    if config.i_max < 1:
        raise ConfigurationError(f"i_max must be >= 1, got {config.i_max}")
    if config.m_small < 1 or config.m_test < 2 or config.m_large < 2:
        raise ConfigurationError("sample sizes must satisfy m_small >= 1, m_test >= 2, m_large >= 2")
    mapper = map if map_fn is None else map_fn

    n_online = max(config.m_small, config.m_test)
    online_idx = np.arange(n_online)
    fit_slice = slice(0, config.m_small)
    test_slice = slice(0, config.m_test)

    targets = list(mapper(lambda p: np.asarray(model.realize_block(p, online_idx), dtype=float), points))

    variates: list[ControlVariate] = []
    centered_cols: list[np.ndarray] = []
    trace: list[GreedyRecord] = []
    anchor_indices: set[int] = set()
    tol_met = False

    while True:
        x_online = (
            np.column_stack(centered_cols) if centered_cols else np.zeros((n_online, 0))
        )

        def point_variance(idx: int) -> float:
            est = _estimate_from_arrays(
                points[idx],
                targets[idx][fit_slice],
                x_online[fit_slice],
                targets[idx][test_slice],
                x_online[test_slice],
                variates,
                config.method,
                config.level,
                None,
            )
            return est.reduced_variance

        variances = np.fromiter(mapper(point_variance, range(len(points))), dtype=float)
        sigma = float(variances.max())
        n_now = len(variates)
        if sigma <= config.tol:
            tol_met = True
            trace.append(GreedyRecord(n_now, sigma, None, True))
            break
        if n_now >= config.i_max:
            trace.append(GreedyRecord(n_now, sigma, None, False))
            break
        candidates = [i for i in range(len(points)) if i not in anchor_indices]
        pick = max(candidates, key=lambda i: (variances[i], -i))
        anchor = points[pick]
        trace.append(GreedyRecord(n_now, sigma, anchor, False))

        anchor_vals = model.realize_block(anchor, anchor_stream_indices(n_now, config.m_large))
        acc = accumulate(anchor_vals)
        variates.append(
            ControlVariate(
                anchor=anchor,
                mean_estimate=acc.mean,
                mean_variance=acc.variance,
                m_large=config.m_large,
                stored_realizations=targets[pick].copy(),
            )
        )
        centered_cols.append(targets[pick] - acc.mean)
        anchor_indices.add(pick)

    return VariateBasis(variates=variates, trace=trace, tol_met=tol_met)


@dataclass(frozen=True)
class DecayDiagnostics:
    monotone: bool
    fitted_rate: float


def decay_diagnostics(trace: Iterable) -> DecayDiagnostics:
    """Monotonicity (5% slack) and fitted exponential rate of a variance trace.

    Accepts GreedyRecord sequences or plain sigma values. The rate is the
    least-squares slope of log sigma_I against I over the positive entries
    (nan when fewer than two are positive).
    """
    sigmas = [float(getattr(rec, "sigma", rec)) for rec in trace]
    if len(sigmas) < 2:
        raise ConfigurationError("decay diagnostics need a trace of length >= 2")
    monotone = all(sigmas[i + 1] <= 1.05 * sigmas[i] for i in range(len(sigmas) - 1))
    iterations = np.arange(len(sigmas), dtype=float)
    vals = np.asarray(sigmas)
    positive = vals > 0
    if positive.sum() < 2:
        rate = math.nan
    else:
        rate = float(np.polyfit(iterations[positive], np.log(vals[positive]), 1)[0])
    return DecayDiagnostics(monotone=monotone, fitted_rate=rate)


@dataclass(frozen=True)
class BreakevenInputs:
    """Cost-model inputs; c is the cost of one realization in multiply units."""

    c: float
    m: int
    m_test: int
    m_small: int
    m_large: int
    i: int
    card: int


@dataclass(frozen=True)
class BreakevenReport:
    naive_cost_per_query: float
    cv_cost_per_query: float
    greedy_cost: float
    per_query_gain: float
    min_queries: int | None


def breakeven_report(costs: BreakevenInputs) -> BreakevenReport:
    """Cost comparison of naive MC vs the control-variate method.

    naive cost per query: m*c + m^2 (realizations plus variance estimate).
    cv cost per query: (m_test + m_small)(c + i) + i^2 + m_test^2
    (realizations, coefficient fit, mean and variance estimates).
    greedy_cost is the full one-off training sweep plus the anchor means;
    per_query_gain amortizes only the anchor-mean construction over the
    trial-set cardinality (the sweep terms are one-off and enter
    min_queries, the query count at which training has paid for itself;
    None when the per-query cost is not actually lower).
    """
    k = costs
    if k.c <= 0 or k.m < 1 or k.m_test < 1 or k.m_large < 1 or k.card < 1:
        raise ConfigurationError("costs c, m, m_test, m_large, card must be positive")
    if k.i < 0 or k.m_small < 0:
        raise ConfigurationError("i and m_small must be nonnegative")
    naive = k.m * k.c + k.m**2
    per_query = (k.m_test + k.m_small) * (k.c + k.i) + k.i**2 + k.m_test**2
    anchor_cost = k.i * (k.m_large + k.m_small) * k.c
    greedy = (
        k.card
        * (
            k.i * (k.m_test + k.m_small) * k.c
            + k.i * (k.i + 1) * (2 * k.i + 1) / 6
            + k.i * (k.i + 1) * k.m_small
            + k.m_test / 2
            + k.i * k.m_test**2
            + math.log(k.card)
        )
        + anchor_cost
    )
    gain = naive / (per_query + anchor_cost / k.card)
    min_queries = math.ceil(greedy / (naive - per_query)) if naive > per_query else None
    return BreakevenReport(
        naive_cost_per_query=naive,
        cv_cost_per_query=per_query,
        greedy_cost=greedy,
        per_query_gain=gain,
        min_queries=min_queries,
    )


def trace_table(basis: VariateBasis, param_names: Sequence[str]) -> tuple[list[str], list[list]]:
    """Greedy trace as (header, rows) for CSV export."""
    header = ["iteration", *[f"anchor_{n}" for n in param_names], "sigma_I"]
    rows = []
    for rec in basis.trace:
        anchor = list(rec.anchor) if rec.anchor is not None else [""] * len(param_names)
        rows.append([rec.n_variates, *anchor, rec.sigma])
    return header, rows


def estimates_table(
    estimates: Sequence[ReducedEstimate], param_names: Sequence[str]
) -> tuple[list[str], list[list]]:
    """Reduced estimates as (header, rows) for CSV export."""
    header = [
        *param_names,
        "mean",
        "reduced_variance",
        "halfwidth_95",
        "bias_halfwidth",
        "I_used",
        "M_test",
    ]
    rows = []
    for est in estimates:
        rows.append(
            [
                *est.point[: len(param_names)],
                est.mean,
                est.reduced_variance,
                est.interval.halfwidth,
                float(est.bias_halfwidths.sum()),
                est.n_variates,
                est.m_test,
            ]
        )
    return header, rows
