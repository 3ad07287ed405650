"""Special functions and the a-contrario detection machinery.

The detectors place their thresholds deep in distribution tails (arguments
of order epsilon/N ~ 1e-8 and NFA bands down to 1e-21), where casual
approximations fall apart. The complementary error function and the
regularized incomplete gamma are therefore computed from their series /
continued-fraction forms to near machine precision, with log-domain
variants so that NFA maps never underflow to zero. Inverses are solved by
safeguarded Newton iterations on those forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, vectorize

from .image import ImageF

_SQRT_PI = 1.7724538509055160273
_LN10 = 2.302585092994045684
# smallest / largest NFA value representable in the linear-scale map
_NFA_FLOOR = 1e-300
_NFA_CEIL = 1e300


# ---------------------------------------------------------------------------
# erfc and its inverse
# ---------------------------------------------------------------------------

@njit(cache=True)
def _erf_series(x):
    """erf(x) for 0 <= x < 1.5 via the all-positive confluent series."""
    x2 = x * x
    term = 1.0
    s = 1.0
    n = 0
    while n < 200:
        n += 1
        term *= 2.0 * x2 / (2.0 * n + 1.0)
        s += term
        if term < 1e-17 * s:
            break
    return 2.0 * x * math.exp(-x2) * s / _SQRT_PI


@njit(cache=True)
def _erfc_cf(x):
    """C(x) = sqrt(pi) * exp(x^2) * erfc(x) for x >= 1.5, by modified Lentz.

    Continued fraction C = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))).
    C stays in (0, 1/x), so it never under- or overflows.
    """
    tiny = 1e-300
    f = tiny
    c = f
    d = 0.0
    n = 0
    while n < 500:
        n += 1
        a = 1.0 if n == 1 else 0.5 * (n - 1.0)
        d = x + a * d
        if d == 0.0:
            d = tiny
        c = x + a / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return f


@njit(cache=True)
def _erfc_scalar(x):
    if x < 0.0:
        return 2.0 - _erfc_scalar(-x)
    if x < 1.5:
        return 1.0 - _erf_series(x)
    return math.exp(-x * x) * _erfc_cf(x) / _SQRT_PI


@njit(cache=True)
def _log_erfc_scalar(x):
    """ln erfc(x), exact in the deep tail where erfc itself underflows."""
    if x < 1.5:
        return math.log(_erfc_scalar(x))
    return -x * x + math.log(_erfc_cf(x)) - math.log(_SQRT_PI)


@njit(cache=True)
def _dlog_erfc(x):
    """d/dx ln erfc(x) = -2 exp(-x^2) / (sqrt(pi) erfc(x))."""
    if x < 1.5:
        return -2.0 * math.exp(-x * x) / (_SQRT_PI * _erfc_scalar(x))
    return -2.0 / _erfc_cf(x)


@njit(cache=True)
def _erfc_inv_scalar(p):
    """Inverse of erfc on (0, 2); Newton on ln erfc, bracket-safeguarded."""
    if p == 1.0:
        return 0.0
    sign = 1.0
    if p > 1.0:
        p = 2.0 - p
        sign = -1.0
    lnp = math.log(p)
    if p > 0.125:
        x = 0.5 * _SQRT_PI * (1.0 - p)
    else:
        t = -math.log(p * _SQRT_PI)
        x = math.sqrt(t)
        for _ in range(4):
            x = math.sqrt(t - math.log(x))
    lo = -0.5
    hi = 28.0
    for _ in range(100):
        g = _log_erfc_scalar(x) - lnp
        if g > 0.0:
            lo = max(lo, x)
        else:
            hi = min(hi, x)
        step = g / _dlog_erfc(x)
        xn = x - step
        if xn <= lo or xn >= hi:
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 1e-16 * (abs(x) + 1e-30):
            x = xn
            break
        x = xn
    return sign * x


@vectorize(["float64(float64)"], nopython=True, cache=True)
def _erfc_vec(x):
    return _erfc_scalar(x)


@vectorize(["float64(float64)"], nopython=True, cache=True)
def _log10_erfc_vec(x):
    return _log_erfc_scalar(x) / _LN10


def erfc(x):
    """Complementary error function, elementwise."""
    return _erfc_vec(x)


def log10_erfc(x):
    """log10 of erfc, stable for arguments far into the tail."""
    return _log10_erfc_vec(x)


def erfc_inv(p: float) -> float:
    """Inverse of erfc; defined for p in the open interval (0, 2)."""
    if not (0.0 < p < 2.0):
        raise ValueError(f"erfc_inv argument must be in (0, 2), got {p}")
    return float(_erfc_inv_scalar(float(p)))


# ---------------------------------------------------------------------------
# chi-square distribution via the regularized incomplete gamma
# ---------------------------------------------------------------------------

@njit(cache=True)
def _gammainc_p_series(a, x):
    """Regularized lower incomplete gamma P(a, x), series form (x < a + 1)."""
    if x <= 0.0:
        return 0.0
    ap = a
    term = 1.0 / a
    s = term
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        s += term
        if abs(term) < abs(s) * 1e-17:
            break
    return s * math.exp(-x + a * math.log(x) - math.lgamma(a))


@njit(cache=True)
def _gammainc_q_log_cf(a, x):
    """ln Q(a, x) via the continued fraction, valid for x >= a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return -x + a * math.log(x) - math.lgamma(a) + math.log(h)


@njit(cache=True)
def _chi2_cdf_scalar(x, k):
    if x <= 0.0:
        return 0.0
    a = 0.5 * k
    xx = 0.5 * x
    if xx < a + 1.0:
        return _gammainc_p_series(a, xx)
    return 1.0 - math.exp(_gammainc_q_log_cf(a, xx))


@njit(cache=True)
def _chi2_sf_log_scalar(x, k):
    """ln of the chi-square upper tail P(X >= x)."""
    if x <= 0.0:
        return 0.0
    a = 0.5 * k
    xx = 0.5 * x
    if xx < a + 1.0:
        return math.log(max(1.0 - _gammainc_p_series(a, xx), 1e-320))
    return _gammainc_q_log_cf(a, xx)


@njit(cache=True)
def _chi2_logpdf(x, k):
    a = 0.5 * k
    return (a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a)


@njit(cache=True)
def _chi2_inv_upper_scalar(p, k):
    """Quantile of the upper tail: solves P(X >= x) = p for p in (0, 1)."""
    # Wilson-Hilferty start from the normal upper quantile
    z = math.sqrt(2.0) * _erfc_inv_scalar(2.0 * p)
    w = 2.0 / (9.0 * k)
    x = k * (1.0 - w + z * math.sqrt(w)) ** 3
    if x <= 0.0:
        x = 1e-8
    lnp = math.log(p)
    lo = 0.0
    hi = 1e308
    for _ in range(200):
        g = _chi2_sf_log_scalar(x, k) - lnp
        if g > 0.0:
            lo = max(lo, x)
        else:
            hi = min(hi, x)
        dg = -math.exp(_chi2_logpdf(x, k) - _chi2_sf_log_scalar(x, k))
        xn = x - g / dg if dg != 0.0 else 0.5 * (lo + hi)
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi) if hi < 1e308 else 2.0 * x
        if abs(xn - x) <= 1e-14 * (x + 1e-30):
            x = xn
            break
        x = xn
    return x


@vectorize(["float64(float64, float64)"], nopython=True, cache=True)
def _chi2_cdf_vec(x, k):
    return _chi2_cdf_scalar(x, k)


@vectorize(["float64(float64, float64)"], nopython=True, cache=True)
def _chi2_sf_log10_vec(x, k):
    return _chi2_sf_log_scalar(x, k) / _LN10


def chi2_cdf(x, dof: int):
    """Chi-square CDF with `dof` degrees of freedom, elementwise."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    return _chi2_cdf_vec(x, float(dof))


def chi2_sf_log10(x, dof: int):
    """log10 of the chi-square upper tail, stable for tiny tails."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    return _chi2_sf_log10_vec(x, float(dof))


def chi2_inv(q: float, dof: int) -> float:
    """Chi-square quantile; q in [0, 1). q = 1 is rejected (infinite quantile)."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if not (0.0 <= q < 1.0):
        raise ValueError(f"quantile order must be in [0, 1), got {q}")
    if q == 0.0:
        return 0.0
    return float(_chi2_inv_upper_scalar(1.0 - q, float(dof)))


def chi2_inv_upper(p: float, dof: int) -> float:
    """Quantile hit by the upper tail p: returns x with P(X >= x) = p.

    Equivalent to chi2_inv(1 - p, dof) but keeps full precision when p is
    tiny, which is the regime every epsilon/N threshold lives in.
    """
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"upper-tail mass must be in (0, 1], got {p}")
    if p == 1.0:
        return 0.0
    return float(_chi2_inv_upper_scalar(float(p), float(dof)))


# ---------------------------------------------------------------------------
# NFA budgets, maps and thresholds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NfaBudget:
    """Target expected false alarms per image and the total test count."""

    epsilon: float
    n_tests: int

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.n_tests < 1:
            raise ValueError("n_tests must be >= 1")

    @classmethod
    def for_pixels(cls, epsilon: float, width: int, height: int,
                   channels: int = 1, levels: int = 1, families: int = 1) -> "NfaBudget":
        """Budget for per-pixel tests repeated over channels, scales and
        test families (e.g. one family per filter kernel)."""
        return cls(epsilon=epsilon, n_tests=width * height * channels * levels * families)


@dataclass(frozen=True)
class NfaMap:
    """Per-pixel NFA values plus the budget they were computed under.

    `values` is clamped into [1e-300, 1e300] so the raster stays positive
    and finite; `log10_values` carries the unclamped magnitude for the deep
    tail (band maps go below 1e-21, far past double underflow once
    multiplied out).
    """

    values: ImageF
    log10_values: ImageF
    budget: NfaBudget

    @classmethod
    def from_log10(cls, log10_arr: np.ndarray, budget: NfaBudget) -> "NfaMap":
        log10_arr = np.asarray(log10_arr, dtype=np.float64)
        clipped = np.clip(log10_arr, math.log10(_NFA_FLOOR), math.log10(_NFA_CEIL))
        return cls(values=ImageF(10.0 ** clipped), log10_values=ImageF(log10_arr),
                   budget=budget)

    def detection_mask(self, epsilon: float | None = None) -> np.ndarray:
        """Boolean (height, width) mask of pixels with NFA <= epsilon."""
        eps = self.budget.epsilon if epsilon is None else epsilon
        return self.log10_values.data[:, :, 0] <= math.log10(eps)

    @property
    def best_log10_nfa(self) -> float:
        return float(self.log10_values.data.min())

    @property
    def best_nfa(self) -> float:
        return float(self.values.data.min())


def gaussian_two_tail_threshold(budget: NfaBudget, mu: float = 0.0,
                                sigma: float = 1.0) -> float:
    """Two-tailed Gaussian threshold: detect when |x - mu| / sigma >= gamma.

    gamma = sqrt(2) * erfc_inv(epsilon / N). When epsilon / N >= 2 the
    bound is vacuous and 0 is returned (every sample detected).
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    ratio = budget.epsilon / budget.n_tests
    if ratio >= 2.0:
        return 0.0
    return math.sqrt(2.0) * erfc_inv(ratio)


def zontak_tau(budget: NfaBudget, h: float, sigma: float, patch_dim: int) -> float:
    """Threshold on the non-local weight sum below which a patch is anomalous.

    tau = exp(-(2 sigma^2 / h^2) * chi2_inv(1 - epsilon/N, patch_dim)),
    from the event that at least one candidate patch matches the query up
    to N(0, sigma^2) noise on each of its patch_dim pixels.
    """
    if h <= 0 or sigma <= 0:
        raise ValueError("h and sigma must be > 0")
    ratio = budget.epsilon / budget.n_tests
    if ratio >= 1.0:
        raise ValueError("epsilon / n_tests must be < 1")
    q = chi2_inv_upper(ratio, patch_dim)
    return math.exp(-(2.0 * sigma * sigma) / (h * h) * q)


def chebyshev_threshold(budget: NfaBudget, dim: int = 2) -> float:
    """Mahalanobis threshold from the dimension-d Chebyshev bound.

    P(d_M^2 >= g) <= dim / g for any distribution with the empirical
    moments, so gamma = sqrt(dim * N / epsilon) keeps the expected number
    of exceedances below epsilon.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return math.sqrt(dim * budget.n_tests / budget.epsilon)


def nfa_map_from_gaussian_scores(scores: ImageF, mu: float, sigma: float,
                                 budget: NfaBudget) -> NfaMap:
    """Two-tailed Gaussian NFA map: NFA(x) = N * erfc(|x - mu| / (sigma sqrt 2))."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    z = np.abs(scores.data[:, :, 0] - mu) / (sigma * math.sqrt(2.0))
    log10_nfa = math.log10(budget.n_tests) + log10_erfc(z)
    return NfaMap.from_log10(log10_nfa, budget)
