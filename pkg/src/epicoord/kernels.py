"""Hot numeric kernels with a numba path and a vectorized numpy path.

Every kernel exists twice: a loop version written for ``numba.njit`` and a
numpy version that vectorizes over regions (or subsets). Both are exported
through the dispatch functions at the bottom of the module; the active
backend comes from :func:`epicoord._accel.default_backend` and can be
switched at runtime with :func:`set_backend`.

Array layouts shared by the kernels:

* compartments ``(N, 6)`` ordered S, E, I, Q, R, D
* per-day parameters ``(T, N, 6)`` ordered beta_I, beta_Q, sigma, delta,
  gamma, mu
* flows and screening ``(T, N, N)`` with ``[t, j, i]`` = origin j to
  destination i
"""
import math

import numpy as np

from ._accel import HAVE_NUMBA, default_backend, njit

S, E, I, Q, R, D = range(6)
BETA_I, BETA_Q, SIGMA, DELTA, GAMMA, MU = range(6)

OK = 0
ERR_DEGENERATE = 1
ERR_NEGATIVE = 2


# --------------------------------------------------------------------------
# SEIQRD metapopulation stepping
# --------------------------------------------------------------------------


def _run_days_loop(x0, cum0, flows, params, screening, tol):
    n_days = flows.shape[0]
    n = x0.shape[0]
    states = np.empty((n_days + 1, n, 6))
    cum = np.empty((n_days + 1, n))
    states[0] = x0
    cum[0] = cum0
    status = np.zeros(3, dtype=np.int64)
    n_capped = 0

    living = np.empty(n)
    lam = np.empty(n)
    scale = np.empty(n)
    for t in range(n_days):
        x = states[t]
        p = params[t]
        for i in range(n):
            living[i] = x[i, S] + x[i, E] + x[i, I] + x[i, Q] + x[i, R]
            out = 0.0
            for j in range(n):
                if j != i:
                    out += flows[t, i, j]
            if living[i] > 0.0:
                lam[i] = (p[i, BETA_I] * x[i, I] + p[i, BETA_Q] * x[i, Q]) / living[i]
            else:
                lam[i] = 0.0
                if out > 0.0:
                    status[0] = ERR_DEGENERATE
                    status[1] = t
                    status[2] = i
                    return states[: t + 1], cum[: t + 1], status, n_capped
            scale[i] = 1.0
            if out > 0.0:
                share = out / living[i]
                worst = max(lam[i], p[i, SIGMA], p[i, DELTA] + p[i, GAMMA] + p[i, MU])
                cap = max(0.0, 1.0 - worst)
                if share > cap:
                    scale[i] = cap / share
                    n_capped += 1

        nxt = states[t + 1]
        for i in range(n):
            si = x[i, S]
            ei = x[i, E]
            ii = x[i, I]
            qi = x[i, Q]
            ri = x[i, R]
            in_s = 0.0
            in_e = 0.0
            in_i = 0.0
            in_r = 0.0
            to_q = 0.0
            out = 0.0
            for j in range(n):
                if j == i:
                    continue
                out += flows[t, i, j] * scale[i]
                m = flows[t, j, i] * scale[j]
                if m == 0.0:
                    continue
                frac = m / living[j]
                eta = screening[t, j, i]
                in_s += frac * x[j, S]
                in_r += frac * x[j, R]
                in_e += frac * x[j, E] * (1.0 - eta)
                in_i += frac * x[j, I] * (1.0 - eta)
                to_q += frac * (x[j, E] + x[j, I]) * eta
            f = out / living[i] if living[i] > 0.0 else 0.0
            new_inf = lam[i] * si
            d = p[i, DELTA]
            g = p[i, GAMMA]
            mu = p[i, MU]
            sg = p[i, SIGMA]
            nxt[i, S] = si - new_inf + in_s - f * si
            nxt[i, E] = ei + new_inf - sg * ei + in_e - f * ei
            nxt[i, I] = ii + sg * ei - (d + g + mu) * ii + in_i - f * ii
            nxt[i, Q] = qi + d * ii - (g + mu) * qi + to_q
            nxt[i, R] = ri + g * ii + g * qi + in_r - f * ri
            nxt[i, D] = x[i, D] + mu * ii + mu * qi
            cum[t + 1, i] = cum[t, i] + d * ii + to_q
            bound = tol * max(1.0, living[i])
            for c in range(6):
                v = nxt[i, c]
                if v < 0.0:
                    if v < -bound:
                        status[0] = ERR_NEGATIVE
                        status[1] = t
                        status[2] = i
                        return states[: t + 2], cum[: t + 2], status, n_capped
                    nxt[i, c] = 0.0
    return states, cum, status, n_capped


def _run_days_numpy(x0, cum0, flows, params, screening, tol):
    n_days = flows.shape[0]
    n = x0.shape[0]
    states = np.empty((n_days + 1, n, 6))
    cum = np.empty((n_days + 1, n))
    states[0] = x0
    cum[0] = cum0
    status = np.zeros(3, dtype=np.int64)
    n_capped = 0
    offdiag = ~np.eye(n, dtype=bool)

    for t in range(n_days):
        x = states[t]
        p = params[t]
        m = flows[t] * offdiag
        living = x[:, :5].sum(axis=1)
        out = m.sum(axis=1)
        empty = living <= 0.0
        bad = empty & (out > 0.0)
        if bad.any():
            status[:] = (ERR_DEGENERATE, t, int(np.argmax(bad)))
            return states[: t + 1], cum[: t + 1], status, n_capped
        safe_living = np.where(empty, 1.0, living)
        lam = np.where(empty, 0.0, (p[:, BETA_I] * x[:, I] + p[:, BETA_Q] * x[:, Q]) / safe_living)

        share = out / safe_living
        worst = np.maximum.reduce([lam, p[:, SIGMA], p[:, DELTA] + p[:, GAMMA] + p[:, MU]])
        cap = np.maximum(0.0, 1.0 - worst)
        over = (out > 0.0) & (share > cap)
        n_capped += int(over.sum())
        scale = np.where(over, cap / np.where(share > 0.0, share, 1.0), 1.0)

        m = m * scale[:, None]
        frac = m / safe_living[:, None]  # [j, i] share of origin j's mass sent to i
        eta = screening[t]
        keep = frac * (1.0 - eta)
        in_s = frac.T @ x[:, S]
        in_r = frac.T @ x[:, R]
        in_e = keep.T @ x[:, E]
        in_i = keep.T @ x[:, I]
        to_q = (frac * eta).T @ (x[:, E] + x[:, I])
        f = m.sum(axis=1) / safe_living

        new_inf = lam * x[:, S]
        d, g, mu, sg = p[:, DELTA], p[:, GAMMA], p[:, MU], p[:, SIGMA]
        nxt = np.empty_like(x)
        nxt[:, S] = x[:, S] - new_inf + in_s - f * x[:, S]
        nxt[:, E] = x[:, E] + new_inf - sg * x[:, E] + in_e - f * x[:, E]
        nxt[:, I] = x[:, I] + sg * x[:, E] - (d + g + mu) * x[:, I] + in_i - f * x[:, I]
        nxt[:, Q] = x[:, Q] + d * x[:, I] - (g + mu) * x[:, Q] + to_q
        nxt[:, R] = x[:, R] + g * x[:, I] + g * x[:, Q] + in_r - f * x[:, R]
        nxt[:, D] = x[:, D] + mu * x[:, I] + mu * x[:, Q]
        cum[t + 1] = cum[t] + d * x[:, I] + to_q

        bound = tol * np.maximum(1.0, living)
        neg = nxt < -bound[:, None]
        if neg.any():
            states[t + 1] = nxt
            status[:] = (ERR_NEGATIVE, t, int(np.argmax(neg.any(axis=1))))
            return states[: t + 2], cum[: t + 2], status, n_capped
        states[t + 1] = np.maximum(nxt, 0.0)
    return states, cum, status, n_capped


# --------------------------------------------------------------------------
# Renewal intensity
# --------------------------------------------------------------------------


def _renewal_loop(incidence, weights):
    n = incidence.shape[0]
    s_max = weights.shape[0]
    out = np.zeros(n)
    for u in range(n):
        acc = 0.0
        for s in range(1, s_max + 1):
            k = u - s
            if k < 0:
                break
            acc += incidence[k] * weights[s - 1]
        out[u] = acc
    return out


def _renewal_numpy(incidence, weights):
    n = incidence.shape[0]
    full = np.convolve(incidence, np.concatenate(([0.0], weights)))
    return full[:n]


# --------------------------------------------------------------------------
# Regularized incomplete gamma and its inverse
# --------------------------------------------------------------------------

_ITMAX = 10_000
_EPS = 1e-16
_FPMIN = 1e-300


def _gammainc_lower(a, x):
    """P(a, x) via series for x < a + 1 and Lentz continued fraction otherwise."""
    if x <= 0.0:
        return 0.0
    log_pref = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        ap = a
        term = 1.0 / a
        total = term
        for _ in range(_ITMAX):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return min(1.0, total * math.exp(log_pref))
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for n in range(1, _ITMAX):
        an = -n * (n - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return max(0.0, 1.0 - math.exp(log_pref) * h)


def _make_gammainc_inv(cdf):
    def _gammainc_inv(a, p, tol):
        """Smallest x with P(a, x) >= p, by bisection to width ``tol``."""
        if p <= 0.0:
            return 0.0
        lo = 0.0
        hi = max(1.0, a)
        while cdf(a, hi) < p:
            lo = hi
            hi *= 2.0
        for _ in range(400):
            if hi - lo <= tol * max(1.0, hi):
                break
            mid = 0.5 * (lo + hi)
            if cdf(a, mid) < p:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return _gammainc_inv


# --------------------------------------------------------------------------
# Shapley aggregation over an enumerated value table
# --------------------------------------------------------------------------


def _shapley_weights(m):
    w = np.empty(m)
    for s in range(m):
        w[s] = math.exp(math.lgamma(s + 1) + math.lgamma(m - s) - math.lgamma(m + 1))
    return w


def _shapley_loop(values, m):
    n_sub = values.shape[0]
    w = np.empty(m)
    for s in range(m):
        w[s] = math.exp(math.lgamma(s + 1) + math.lgamma(m - s) - math.lgamma(m + 1))
    phi = np.zeros(m)
    for mask in range(n_sub):
        size = 0
        x = mask
        while x:
            size += x & 1
            x >>= 1
        for j in range(m):
            bit = 1 << j
            if mask & bit == 0:
                phi[j] += w[size] * (values[mask | bit] - values[mask])
    return phi


def _popcount(idx, m):
    counts = np.zeros(idx.shape[0], dtype=np.int64)
    for j in range(m):
        counts += (idx >> j) & 1
    return counts


def _shapley_numpy(values, m):
    idx = np.arange(values.shape[0], dtype=np.int64)
    sizes = _popcount(idx, m)
    w = _shapley_weights(m)
    phi = np.empty(m)
    for j in range(m):
        bit = 1 << j
        without = idx[(idx & bit) == 0]
        phi[j] = np.sum(w[sizes[without]] * (values[without | bit] - values[without]))
    return phi


# --------------------------------------------------------------------------
# Dispatch
# --------------------------------------------------------------------------

_gammainc_lower_nb = njit(_gammainc_lower)

_NUMBA = {
    "run_days": njit(_run_days_loop),
    "renewal": njit(_renewal_loop),
    "gammainc": _gammainc_lower_nb,
    "gammaincinv": njit(_make_gammainc_inv(_gammainc_lower_nb)),
    "shapley": njit(_shapley_loop),
}
_NUMPY = {
    "run_days": _run_days_numpy,
    "renewal": _renewal_numpy,
    "gammainc": _gammainc_lower,
    "gammaincinv": _make_gammainc_inv(_gammainc_lower),
    "shapley": _shapley_numpy,
}
_BACKENDS = {"numba": _NUMBA, "numpy": _NUMPY}
_active = _BACKENDS[default_backend()]


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    prev = backend()
    _active = _BACKENDS[name]
    return prev


def backend():
    return "numba" if _active is _NUMBA else "numpy"


def run_days(x0, cum0, flows, params, screening, tol=1e-9):
    """Advance the coupled SEIQRD system one day per flow matrix.

    Returns ``(states, cum_confirmed, status, n_capped)``. ``status`` is
    ``[code, day, region]``; on error the returned arrays are truncated after
    the offending day.
    """
    return _active["run_days"](
        np.ascontiguousarray(x0, dtype=np.float64),
        np.ascontiguousarray(cum0, dtype=np.float64),
        np.ascontiguousarray(flows, dtype=np.float64),
        np.ascontiguousarray(params, dtype=np.float64),
        np.ascontiguousarray(screening, dtype=np.float64),
        float(tol),
    )


def renewal_intensity(incidence, weights):
    return _active["renewal"](
        np.ascontiguousarray(incidence, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
    )


def gammainc(a, x):
    return _active["gammainc"](float(a), float(x))


def gammaincinv(a, p, tol=1e-10):
    return _active["gammaincinv"](float(a), float(p), float(tol))


def shapley_from_values(values, m):
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.shape[0] != 1 << m:
        raise ValueError(f"value table has {values.shape[0]} entries, expected 2**{m}")
    return _active["shapley"](values, int(m))
