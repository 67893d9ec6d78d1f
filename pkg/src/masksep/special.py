"""Log-gamma, digamma and trigamma for positive real arguments.

Implemented from scratch (Lanczos series for log-gamma, upward recurrence
plus asymptotic Bernoulli series for the polygammas) so the Beta-policy
numerics carry no dependency beyond numpy. Accuracy is close to machine
precision on [1e-3, 1e6]; see tests/test_special.py for the reference
values the implementation is held to.
"""

from __future__ import annotations

import numpy as np

# Lanczos approximation, g = 7, 9 coefficients.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)

_HALF_LOG_TWO_PI = 0.9189385332046727417803297364056176

# psi(x) ~ ln x - 1/(2x) - sum B_{2n} / (2n x^{2n}); coefficients of x^{-2n}.
_DIGAMMA_ASYMPT = np.array(
    [
        -1.0 / 12.0,
        1.0 / 120.0,
        -1.0 / 252.0,
        1.0 / 240.0,
        -1.0 / 132.0,
        691.0 / 32760.0,
        -1.0 / 12.0,
    ]
)

# psi'(x) ~ 1/x + 1/(2x^2) + sum B_{2n} x^{-2n-1}; coefficients of x^{-2n-1}.
_TRIGAMMA_ASYMPT = np.array(
    [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
    ]
)

_RECURRENCE_CUTOFF = 10.0


def _validate_positive(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} requires finite input")
    if np.any(x <= 0.0):
        raise ValueError(f"{name} is only defined here for x > 0")


def log_gamma(x):
    """Natural log of the gamma function, elementwise, for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    _validate_positive(x, "log_gamma")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)

    out = np.empty_like(x)
    small = x < 0.5
    if np.any(small):
        xs = x[small]
        # reflection: lnGamma(x) = ln(pi / sin(pi x)) - lnGamma(1 - x)
        out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lanczos(1.0 - xs)
    if np.any(~small):
        out[~small] = _lanczos(x[~small])
    return out[0] if scalar else out


def _lanczos(x: np.ndarray) -> np.ndarray:
    z = x - 1.0
    series = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, _LANCZOS_COEF.size):
        series = series + _LANCZOS_COEF[i] / (z + i)
    base = z + _LANCZOS_G + 0.5
    return _HALF_LOG_TWO_PI + (z + 0.5) * np.log(base) - base + np.log(series)


def digamma(x):
    """psi(x) = d/dx ln Gamma(x), elementwise, for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    _validate_positive(x, "digamma")
    scalar = x.ndim == 0
    y = np.atleast_1d(x)

    # branch-free recurrence: shift every argument up by the cutoff, then
    # evaluate the asymptotic series where it is uniformly accurate
    acc = np.zeros_like(y)
    for k in range(int(_RECURRENCE_CUTOFF)):
        acc -= 1.0 / (y + k)
    y = y + _RECURRENCE_CUTOFF

    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for c in _DIGAMMA_ASYMPT[::-1]:
        series = (series + c) * inv2
    out = acc + np.log(y) - 0.5 * inv + series
    return out[0] if scalar else out


def trigamma(x):
    """psi'(x), elementwise, for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    _validate_positive(x, "trigamma")
    scalar = x.ndim == 0
    y = np.atleast_1d(x)

    acc = np.zeros_like(y)
    for k in range(int(_RECURRENCE_CUTOFF)):
        shifted = y + k
        acc += 1.0 / (shifted * shifted)
    y = y + _RECURRENCE_CUTOFF

    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for c in _TRIGAMMA_ASYMPT[::-1]:
        series = (series + c) * inv2
    out = acc + inv + 0.5 * inv2 + series * inv
    return out[0] if scalar else out


def log_beta(a, b):
    """ln B(a, b) = lnGamma(a) + lnGamma(b) - lnGamma(a + b), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)
