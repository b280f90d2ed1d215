"""Quantiles of the Student t, normal and beta laws, and Clopper-Pearson bands.

The distribution functions come from ``scipy.special`` (regularized incomplete
beta and the complementary error function); the inversions are a bracketed
Newton iteration that falls back to bisection whenever a Newton step leaves
the bracket.
"""

from __future__ import annotations

import math

from scipy import special

_SQRT2 = math.sqrt(2.0)


def _check_p(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")


def _newton_bracketed(f, fprime, target, lo, hi, x0, tol=1e-14, maxiter=200):
    """Solve ``f(x) = target`` for increasing ``f`` on ``[lo, hi]``."""
    x = min(max(x0, lo), hi)
    for _ in range(maxiter):
        g = f(x) - target
        if g == 0.0:
            return x
        if g > 0:
            hi = x
        else:
            lo = x
        slope = fprime(x)
        step = g / slope if slope > 0 and math.isfinite(slope) else math.inf
        nxt = x - step
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= tol * max(1.0, abs(x)):
            return nxt
        x = nxt
    return x


def normal_cdf(z: float) -> float:
    return 0.5 * special.erfc(-z / _SQRT2)


def normal_quantile(p: float) -> float:
    _check_p(p)
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -normal_quantile(1.0 - p)
    # tail start from the Mills-ratio asymptotic, then Newton on the upper tail
    q = 1.0 - p
    t = math.sqrt(-2.0 * math.log(q))
    z0 = t - (2.515517 + 0.802853 * t + 0.010328 * t * t) / (1 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t ** 3)
    pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    # increasing function of z: -upper tail
    return _newton_bracketed(lambda z: -0.5 * special.erfc(z / _SQRT2), pdf, -q, 0.0, 40.0, z0)


def beta_cdf(x: float, a: float, b: float) -> float:
    return float(special.betainc(a, b, x))


def beta_quantile(p: float, a: float, b: float) -> float:
    """Inverse of the regularized incomplete beta function ``I_x(a, b)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    if a <= 0 or b <= 0:
        raise ValueError("beta parameters must be positive")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    log_norm = special.betaln(a, b)

    def pdf(x):
        if x <= 0.0 or x >= 1.0:
            return 0.0
        return math.exp((a - 1) * math.log(x) + (b - 1) * math.log1p(-x) - log_norm)

    # coarse bisection seed keeps Newton away from the flat tails
    lo, hi = 0.0, 1.0
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if special.betainc(a, b, mid) < p:
            lo = mid
        else:
            hi = mid
    return _newton_bracketed(lambda x: float(special.betainc(a, b, x)), pdf, p, lo, hi, 0.5 * (lo + hi))


def t_cdf(t: float, df: float) -> float:
    if math.isinf(df):
        return normal_cdf(t)
    tail = 0.5 * float(special.betainc(0.5 * df, 0.5, df / (df + t * t)))
    return 1.0 - tail if t > 0 else tail


def t_pdf(t: float, df: float) -> float:
    if math.isinf(df):
        return math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    logc = special.gammaln(0.5 * (df + 1)) - special.gammaln(0.5 * df) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - 0.5 * (df + 1) * math.log1p(t * t / df))


def t_quantile(df: float, p: float) -> float:
    """Student-t quantile; ``df = math.inf`` gives the standard normal."""
    _check_p(p)
    if not df > 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(df):
        return normal_quantile(p)
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(df, 1.0 - p)
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    x = beta_quantile(2.0 * (1.0 - p), 0.5 * df, 0.5)
    t0 = math.sqrt(df * (1.0 - x) / x) if x > 0 else 1e300
    upper = max(2.0 * t0, 10.0)
    q = 1.0 - p
    return _newton_bracketed(
        lambda t: -0.5 * float(special.betainc(0.5 * df, 0.5, df / (df + t * t))),
        lambda t: t_pdf(t, df), -q, 0.0, upper, t0)


def clopper_pearson(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial interval from beta quantiles."""
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials and trials >= 1")
    _check_p(level)
    alpha = 1.0 - level
    lo = 0.0 if successes == 0 else beta_quantile(alpha / 2, successes, trials - successes + 1)
    hi = 1.0 if successes == trials else beta_quantile(1 - alpha / 2, successes + 1, trials - successes)
    return lo, hi


def two_sided_quantile(level: float, df: float) -> float:
    _check_p(level)
    return t_quantile(df, 0.5 + 0.5 * level)


__all__ = [
    "beta_cdf", "beta_quantile", "clopper_pearson", "normal_cdf", "normal_quantile",
    "t_cdf", "t_pdf", "t_quantile", "two_sided_quantile",
]
