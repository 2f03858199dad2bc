"""Random-variate kernels used by the Gibbs sampler.

Two non-trivial generators live here: interval-truncated normal draws
(vectorized, tail-safe) and the generalized inverse Gaussian sampler
needed for the global shrinkage scale update.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

# Standardized bound beyond which the inverse-CDF route is abandoned for
# exponential rejection (Robert-style).  ndtr still has full relative
# accuracy here; the switch is about the uniform between two nearly equal
# CDF values, not about ndtr itself.
_TAIL_Z = 6.0


def _robert_tail(rng: np.random.Generator, lo: np.ndarray) -> np.ndarray:
    """Sample standard normals conditioned on X >= lo, lo > 0, via
    shifted-exponential rejection (Robert 1995)."""
    lo = np.asarray(lo, dtype=float)
    out = np.empty_like(lo)
    pending = np.ones(lo.shape, dtype=bool)
    alpha = 0.5 * (lo + np.sqrt(lo * lo + 4.0))
    while pending.any():
        n = int(pending.sum())
        a = alpha[pending]
        z = lo[pending] + rng.exponential(1.0, size=n) / a
        accept = rng.random(n) <= np.exp(-0.5 * (z - a) ** 2)
        idx = np.flatnonzero(pending)
        hit = idx[accept]
        out.flat[hit] = z[accept]
        pending.flat[hit] = False
    return out


def trunc_norm_interval(
    rng: np.random.Generator,
    mean,
    sd,
    lower,
    upper,
) -> np.ndarray:
    """Draw X ~ N(mean, sd^2) conditioned on lower <= X < upper.

    All arguments broadcast.  `lower` may be -inf and `upper` +inf.
    Draws are clipped into [lower, upper) so the bound invariant holds
    exactly in floating point.  Central intervals use the inverse CDF;
    intervals entirely beyond |z| = 6 fall back to exponential rejection
    so far tails keep the right shape instead of collapsing.
    """
    mean, sd, lower, upper = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(sd, float),
        np.asarray(lower, float), np.asarray(upper, float))
    if np.any(lower >= upper):
        raise ValueError("trunc_norm_interval requires lower < upper")
    with np.errstate(invalid="ignore"):
        a = (lower - mean) / sd
        b = (upper - mean) / sd
    a = np.where(np.isnan(a), -np.inf, a)
    b = np.where(np.isnan(b), np.inf, b)

    # Work on the side where the CDF has absolute resolution: flip so the
    # interval sits in the left half-plane.  (NaN inputs fall through to
    # the additive reconstruction below and stay NaN for the caller.)
    with np.errstate(invalid="ignore"):
        flip = (a + b > 0) | np.isposinf(b)
    a_w = np.where(flip, -b, a)
    b_w = np.where(flip, -a, b)

    z = np.empty(a_w.shape, dtype=float)
    # After the flip the interval sits in the left half-plane; it is "far
    # tail" when even its upper end is beyond -z*.
    far = b_w < -_TAIL_Z
    central = ~far
    if central.any():
        pa = ndtr(a_w[central])
        pb = ndtr(b_w[central])
        u = pa + (pb - pa) * rng.random(int(central.sum()))
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        z[central] = ndtri(u)
    if far.any():
        # Left far tail: sample -X >= -b_w via Robert, reject above -a_w.
        lo = -b_w[far]
        hi = -a_w[far]
        got = np.full(lo.shape, np.nan)
        pending = np.ones(lo.shape, dtype=bool)
        for _ in range(1000):
            if not pending.any():
                break
            cand = _robert_tail(rng, lo[pending])
            ok = cand <= hi[pending]
            idx = np.flatnonzero(pending)
            got[idx[ok]] = cand[ok]
            pending[idx[ok]] = False
        got = np.where(np.isnan(got), lo, got)  # pathological: pin to near bound
        z[far] = -got
    z = np.where(flip, -z, z)
    x = mean + sd * z
    # Enforce the half-open interval exactly.
    hi_edge = np.where(np.isfinite(upper), np.nextafter(upper, -np.inf), upper)
    return np.minimum(np.maximum(x, lower), hi_edge)


def trunc_norm_mean(mean, sd, lower, upper):
    """Closed-form mean of N(mean, sd^2) truncated to [lower, upper]."""
    a = (np.asarray(lower, float) - mean) / sd
    b = (np.asarray(upper, float) - mean) / sd
    pa = np.where(np.isfinite(a), np.exp(-0.5 * np.where(np.isfinite(a), a, 0.0) ** 2), 0.0)
    pb = np.where(np.isfinite(b), np.exp(-0.5 * np.where(np.isfinite(b), b, 0.0) ** 2), 0.0)
    num = (pa - pb) / np.sqrt(2 * np.pi)
    den = ndtr(b) - ndtr(a)
    return mean + sd * num / den


# ---------------------------------------------------------------------------
# Generalized inverse Gaussian:  density  ~  x^(p-1) exp(-(a*x + b/x)/2)
# ---------------------------------------------------------------------------

def _gig_mode(lam: float, omega: float) -> float:
    # Mode of the two-parameter form z^(lam-1) exp(-omega(z+1/z)/2).
    if lam >= 1.0:
        return (np.sqrt((lam - 1.0) ** 2 + omega ** 2) + (lam - 1.0)) / omega
    return omega / (np.sqrt((1.0 - lam) ** 2 + omega ** 2) + (1.0 - lam))


def _gig_rou_shift(rng, lam, omega, size):
    """Ratio-of-uniforms with mode shift; use for lam >= 1 or omega > 1."""
    m = _gig_mode(lam, omega)

    def logg(x):
        # normalized so logg(m) = 0
        return ((lam - 1.0) * (np.log(x) - np.log(m))
                - 0.5 * omega * (x + 1.0 / x - m - 1.0 / m))

    # Extrema of (x - m) sqrt(g(x)) solve the cubic
    #   x^3 - c2 x^2 + c1 x + m = 0.
    c2 = 2.0 * (lam + 1.0) / omega + m
    c1 = 2.0 * (lam - 1.0) * m / omega - 1.0
    roots = np.roots([1.0, -c2, c1, m])
    real = roots[np.abs(roots.imag) < 1e-8 * np.maximum(1.0, np.abs(roots.real))].real
    real = real[real > 0]
    lo_roots = real[real < m]
    hi_roots = real[real > m]
    if lo_roots.size == 0 or hi_roots.size == 0:
        raise RuntimeError(f"GIG ROU setup failed (lam={lam}, omega={omega})")
    xm = lo_roots.max()
    xp = hi_roots.min()
    um = (xm - m) * np.exp(0.5 * logg(xm))
    up = (xp - m) * np.exp(0.5 * logg(xp))

    out = np.empty(size)
    pending = np.ones(size, dtype=bool)
    while pending.any():
        n = int(pending.sum())
        v = rng.random(n)
        u = um + (up - um) * rng.random(n)
        x = u / v + m
        ok = (x > 0) & (2.0 * np.log(v) <= logg(np.where(x > 0, x, 1.0)))
        idx = np.flatnonzero(pending)
        out[idx[ok]] = x[ok]
        pending[idx[ok]] = False
    return out


def _gig_rou_noshift(rng, lam, omega, size):
    """Plain ratio-of-uniforms; adequate for lam < 1 with moderate omega."""
    m = _gig_mode(lam, omega)

    def logg(x):
        return ((lam - 1.0) * (np.log(x) - np.log(m))
                - 0.5 * omega * (x + 1.0 / x - m - 1.0 / m))

    xp = ((lam + 1.0) + np.sqrt((lam + 1.0) ** 2 + omega ** 2)) / omega
    up = xp * np.exp(0.5 * logg(xp))

    out = np.empty(size)
    pending = np.ones(size, dtype=bool)
    while pending.any():
        n = int(pending.sum())
        v = rng.random(n)
        u = up * rng.random(n)
        x = u / v
        ok = (x > 0) & (2.0 * np.log(v) <= logg(np.where(x > 0, x, 1.0)))
        idx = np.flatnonzero(pending)
        out[idx[ok]] = x[ok]
        pending[idx[ok]] = False
    return out


def _gig_gamma_reject(rng, lam, omega, size):
    """Rejection from a Gamma(lam, rate omega/2) envelope.

    Valid for 0 < lam < 1; the acceptance probability exp(-omega/(2x))
    tends to 1 as omega -> 0, which is exactly the regime the ROU variants
    handle poorly.
    """
    out = np.empty(size)
    pending = np.ones(size, dtype=bool)
    while pending.any():
        n = int(pending.sum())
        x = rng.gamma(lam, 2.0 / omega, size=n)
        ok = (x > 0) & (rng.random(n) <= np.exp(-0.5 * omega / np.where(x > 0, x, 1.0)))
        idx = np.flatnonzero(pending)
        out[idx[ok]] = x[ok]
        pending[idx[ok]] = False
    return out


def sample_gig(rng: np.random.Generator, p: float, a: float, b: float, size=None):
    """Sample from GIG(p, a, b) with density proportional to
    x^(p-1) exp(-(a*x + b/x)/2) on x > 0.

    Requires a > 0 and b > 0.  Negative orders are handled through the
    reciprocal identity 1/X ~ GIG(-p, b, a).
    """
    if a <= 0 or b <= 0:
        raise ValueError("sample_gig requires a > 0 and b > 0")
    scalar = size is None
    n = 1 if scalar else int(size)

    lam = abs(float(p))
    omega = np.sqrt(a * b)
    if lam >= 1.0 or omega > 1.0:
        z = _gig_rou_shift(rng, lam, omega, n)
    elif omega >= min(0.5, (2.0 / 3.0) * np.sqrt(1.0 - lam)):
        z = _gig_rou_noshift(rng, lam, omega, n)
    else:
        z = _gig_gamma_reject(rng, lam, omega, n)

    scale = np.sqrt(b / a)
    x = scale / z if p < 0 else scale * z
    return float(x[0]) if scalar else x


def gig_logpdf_unnorm(x, p: float, a: float, b: float):
    """Unnormalized log density of GIG(p, a, b)."""
    x = np.asarray(x, dtype=float)
    return (p - 1.0) * np.log(x) - 0.5 * (a * x + b / x)
