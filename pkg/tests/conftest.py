"""Shared numerical oracles for the test suite.

These helpers are deliberately independent of the implementations they
check: series truncations, fixed-node quadrature, and central finite
differences only.
"""

import numpy as np
import pytest

from semvio.lie import Pose, skew


def series_matrix_exp(m, terms=50):
    """Truncated Taylor series of expm for small matrices."""
    out = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for n in range(1, terms):
        term = term @ m / n
        out = out + term
    return out


def series_left_jacobian(omega, terms=50):
    """Sum of omega_x^n / (n+1)! truncated at `terms`."""
    wx = skew(omega)
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, terms):
        term = term @ wx / (n + 1)
        out = out + term
    return out


def series_hl(omega, terms=50):
    """Sum of omega_x^n / (n+2)! truncated at `terms`."""
    wx = skew(omega)
    out = np.eye(3) / 2.0
    term = np.eye(3) / 2.0
    for n in range(1, terms):
        term = term @ wx / (n + 2)
        out = out + term
    return out


def gauss_legendre_matrix_integral(f, a, b, nodes=60):
    """Integral of a matrix-valued function on [a, b] by Gauss-Legendre."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    s = 0.5 * (b - a) * x + 0.5 * (b + a)
    return 0.5 * (b - a) * sum(wi * f(si) for wi, si in zip(w, s))


def central_difference(f, x, h=1e-6):
    """Column-wise central difference Jacobian of f at x (1-D input)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = h
        cols.append((np.atleast_1d(f(x + dx)) - np.atleast_1d(f(x - dx))) / (2 * h))
    return np.column_stack(cols)


def relative_error(a, b):
    """Scale-aware difference between two arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-9)
    return np.linalg.norm(a - b) / scale


def random_rotation(rng):
    theta = rng.uniform(-np.pi + 0.1, np.pi - 0.1, size=3)
    from semvio.lie import so3_exp

    return so3_exp(theta)


def random_pose(rng, translation_scale=2.0):
    return Pose(random_rotation(rng), rng.uniform(-1, 1, size=3) * translation_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
