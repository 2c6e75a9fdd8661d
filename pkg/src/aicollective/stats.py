"""Small statistics surface: OLS slope, Welch and paired t-tests, 95% intervals.

Student-t probabilities go through the regularized incomplete beta function,
evaluated with a modified-Lentz continued fraction, so nothing here needs
scipy.  Deterministic scripted data routinely produces zero-variance inputs;
those cases return p = 0 (or p = 1 when the effect is exactly zero) and set
``degenerate`` instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

__all__ = [
    "RegressionResult",
    "TTestResult",
    "Interval",
    "betainc",
    "t_cdf",
    "t_sf_two_sided",
    "t_ppf",
    "ols_slope",
    "welch_t",
    "paired_t",
    "one_sample_t",
    "ci95",
    "mean",
    "sample_variance",
]

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    slope_stderr: float
    p_value: float
    n: int
    degenerate: bool = False


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    dof: float
    p_value: float
    mean_difference: float
    degenerate: bool = False


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    level: float = 0.95

    @property
    def center(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)


def _betacf(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError("betainc requires a > 0 and b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return min(1.0, max(0.0, betainc(0.5 * dof, 0.5, x)))


def t_cdf(t: float, dof: float) -> float:
    tail = 0.5 * t_sf_two_sided(t, dof)
    return 1.0 - tail if t > 0 else tail


def _t_pdf(t: float, dof: float) -> float:
    log_c = math.lgamma(0.5 * (dof + 1)) - math.lgamma(0.5 * dof) - 0.5 * math.log(dof * math.pi)
    return math.exp(log_c - 0.5 * (dof + 1) * math.log1p(t * t / dof))


def t_ppf(q: float, dof: float) -> float:
    """Quantile of Student's t (bisection bracket, Newton polish)."""
    if not 0.0 < q < 1.0:
        raise StatsError("quantile level must lie in (0, 1)")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_ppf(1.0 - q, dof)
    # work on the two-sided tail mass to avoid cancellation in 1 - tail
    target = 2.0 * (1.0 - q)
    lo, hi = 0.0, 1.0
    while t_sf_two_sided(hi, dof) > target:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_sf_two_sided(mid, dof) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-10 * max(1.0, hi):
            break
    t = 0.5 * (lo + hi)
    for _ in range(4):
        step = (target - t_sf_two_sided(t, dof)) / (2.0 * _t_pdf(t, dof))
        if not math.isfinite(step):
            break
        t -= step
        if abs(step) <= 1e-15 * t:
            break
    return t


def mean(xs: Sequence[float]) -> float:
    if not xs:
        raise StatsError("mean of empty sample")
    return math.fsum(xs) / len(xs)


def sample_variance(xs: Sequence[float]) -> float:
    n = len(xs)
    if n < 2:
        raise StatsError("sample variance needs at least 2 values")
    m = mean(xs)
    return math.fsum((x - m) ** 2 for x in xs) / (n - 1)


def ols_slope(points: Sequence[tuple[float, float]]) -> RegressionResult:
    """Least-squares line through ``points`` with a two-sided slope test (n - 2 dof)."""
    n = len(points)
    if n < 3:
        raise StatsError("ols_slope needs at least 3 points")
    xs = [float(p[0]) for p in points]
    ys = [float(p[1]) for p in points]
    mx, my = mean(xs), mean(ys)
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    if sxx == 0.0:
        raise StatsError("ols_slope: all x values are equal")
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = my - slope * mx
    sse = math.fsum((y - intercept - slope * x) ** 2 for x, y in zip(xs, ys))
    # residuals at rounding-noise level count as a perfect fit
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sse <= 1e-24 * max(syy, 1.0):
        return RegressionResult(slope, intercept, 0.0, 1.0 if slope == 0.0 else 0.0, n, True)
    stderr = math.sqrt(sse / (n - 2) / sxx)
    p = t_sf_two_sided(slope / stderr, n - 2)
    return RegressionResult(slope, intercept, stderr, p, n)


def _degenerate(diff: float, dof: float) -> TTestResult:
    if diff == 0.0:
        return TTestResult(0.0, dof, 1.0, diff, True)
    return TTestResult(math.copysign(math.inf, diff), dof, 0.0, diff, True)


def welch_t(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sample t-test without assuming equal variances; mean_difference is mean(a) - mean(b)."""
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise StatsError("welch_t needs at least 2 values per sample")
    diff = mean(a) - mean(b)
    va, vb = sample_variance(a) / na, sample_variance(b) / nb
    se2 = va + vb
    if se2 == 0.0:
        return _degenerate(diff, float(na + nb - 2))
    # Welch-Satterthwaite on variance shares, which cannot underflow
    wa, wb = va / se2, vb / se2
    dof = 1.0 / (wa * wa / (na - 1) + wb * wb / (nb - 1))
    t = diff / math.sqrt(se2)
    return TTestResult(t, dof, t_sf_two_sided(t, dof), diff)


def one_sample_t(xs: Sequence[float], mu: float = 0.0) -> TTestResult:
    n = len(xs)
    if n < 2:
        raise StatsError("one_sample_t needs at least 2 values")
    diff = mean(xs) - mu
    var = sample_variance(xs)
    if var == 0.0:
        return _degenerate(diff, float(n - 1))
    t = diff / math.sqrt(var / n)
    return TTestResult(t, float(n - 1), t_sf_two_sided(t, n - 1), diff)


def paired_t(before: Sequence[float], after: Sequence[float]) -> TTestResult:
    """Paired test on ``after - before``; mean_difference is the mean change."""
    if len(before) != len(after):
        raise StatsError("paired_t samples differ in length")
    return one_sample_t([y - x for x, y in zip(before, after)])


def ci95(sample: Sequence[float]) -> Interval:
    n = len(sample)
    if n < 2:
        raise StatsError("ci95 needs at least 2 values")
    m = mean(sample)
    half = t_ppf(0.975, n - 1) * math.sqrt(sample_variance(sample) / n)
    return Interval(m - half, m + half)
