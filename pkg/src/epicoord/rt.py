"""Effective reproduction number from daily incidence (renewal equation,
conjugate Gamma updating over a sliding window)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .scenario import DEFAULT_EPS

log = logging.getLogger(__name__)


def gamma_cdf(x, shape, scale=1.0):
    """CDF of Gamma(shape, scale) via the regularized lower incomplete gamma."""
    if shape <= 0 or scale <= 0:
        raise ValueError("Gamma shape and scale must be positive")
    return kernels.gammainc(shape, x / scale)


def gamma_ppf(p, shape, rate=1.0, tol=1e-10):
    """Quantile of Gamma(shape, rate) by bisection on the CDF."""
    if not 0.0 <= p < 1.0:
        raise ValueError("probability must lie in [0, 1)")
    if shape <= 0 or rate <= 0:
        raise ValueError("Gamma shape and rate must be positive")
    return kernels.gammaincinv(shape, p, tol) / rate


@dataclass(frozen=True)
class SerialInterval:
    mean: float
    sd: float
    max_lag: int
    shape: float
    scale: float
    weights: np.ndarray  # weights[s - 1] = w_s

    def __hash__(self):
        return hash((self.mean, self.sd, self.max_lag))

    def __eq__(self, other):
        return (
            isinstance(other, SerialInterval)
            and (self.mean, self.sd, self.max_lag) == (other.mean, other.sd, other.max_lag)
            and np.array_equal(self.weights, other.weights)
        )


def discretize_serial_interval(mean=5.0, sd=2.0, max_lag=20) -> SerialInterval:
    """Daily serial-interval weights from a Gamma with the given mean and sd.

    ``w_s = F(s) - F(s - 1)`` for ``s = 1..max_lag`` with shape ``(mean/sd)**2``
    and scale ``sd**2 / mean``; the truncated weights are renormalized.
    """
    if mean <= 0 or sd <= 0:
        raise ValueError("serial interval mean and sd must be positive")
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    shape = (mean / sd) ** 2
    scale = sd**2 / mean
    cdf = np.array([gamma_cdf(s, shape, scale) for s in range(max_lag + 1)])
    w = np.diff(cdf)
    w = w / w.sum()
    return SerialInterval(float(mean), float(sd), int(max_lag), shape, scale, w)


DEFAULT_SI = None


def default_serial_interval() -> SerialInterval:
    global DEFAULT_SI
    if DEFAULT_SI is None:
        DEFAULT_SI = discretize_serial_interval()
    return DEFAULT_SI


def renewal_intensity(incidence, si: SerialInterval, day: int | None = None):
    """Total infectiousness ``sum_s incidence[u - s] * w_s``.

    With ``day`` given returns the scalar for that day, otherwise the whole
    series. Incidence before the first day counts as zero.
    """
    incidence = np.asarray(incidence, dtype=float)
    if np.any(incidence < 0):
        raise ValueError("incidence must be nonnegative")
    lam = kernels.renewal_intensity(incidence, si.weights)
    if day is None:
        return lam
    if day < len(incidence):
        return float(lam[day])
    # beyond the observed series: only past incidence contributes
    s = np.arange(1, si.max_lag + 1)
    k = day - s
    ok = (k >= 0) & (k < len(incidence))
    return float(np.sum(incidence[k[ok]] * si.weights[ok]))


@dataclass(eq=False)
class RtSeries:
    """Posterior summaries of R_t; ``days[k]`` indexes the incidence series."""

    days: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    shape: np.ndarray
    rate: np.ndarray
    window: int = 21
    n_clamped: int = 0

    def __len__(self):
        return len(self.days)


def clean_incidence(incidence):
    """Clamp negative counts to zero; returns ``(series, n_clamped)``."""
    x = np.asarray(incidence, dtype=float)
    neg = x < 0
    n = int(neg.sum())
    if n:
        log.info("clamped %d negative incidence values to zero", n)
        x = np.where(neg, 0.0, x)
    return x, n


def estimate_rt(incidence, si: SerialInterval | None = None, window=21, a=1.0, b=1.0, eps=DEFAULT_EPS, level=0.95):
    """Sliding-window posterior of R_t.

    For every ``t`` in ``window .. len(incidence)`` the counts and renewal
    intensities over ``u = t - window .. t - 1`` update a Gamma(a, b) prior.
    ``a = b = 0`` gives the improper-prior estimator ``sum Q' / sum Lambda``
    and requires positive counts in every window.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if a < 0 or b < 0:
        raise ValueError("prior shape and rate must be nonnegative")
    si = si or default_serial_interval()
    x, n_clamped = clean_incidence(incidence)
    n = len(x)
    if n < window:
        raise ValueError(f"incidence series of length {n} shorter than window {window}")
    lam = kernels.renewal_intensity(x, si.weights)

    csum_x = np.concatenate(([0.0], np.cumsum(x)))
    csum_l = np.concatenate(([0.0], np.cumsum(lam)))
    days = np.arange(window, n + 1)
    q_sum = csum_x[days] - csum_x[days - window]
    l_sum = csum_l[days] - csum_l[days - window]
    shape = a + q_sum
    rate = b + np.maximum(l_sum, eps)
    if np.any(shape <= 0):
        raise ValueError("posterior shape is zero: improper prior with an all-zero window")
    mean = shape / rate
    tail = (1.0 - level) / 2.0
    lower = np.array([gamma_ppf(tail, k, r) for k, r in zip(shape, rate)])
    upper = np.array([gamma_ppf(1.0 - tail, k, r) for k, r in zip(shape, rate)])
    return RtSeries(days, mean, lower, upper, shape, rate, window, n_clamped)


def incidence_from_cumulative(cumulative):
    """Daily new cases ``C[t] - C[t-1]`` for t = 1..T (length T)."""
    return np.diff(np.asarray(cumulative, dtype=float))
