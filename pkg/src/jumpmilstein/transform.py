"""Change of variables that removes the jumps of the drift.

    G(x) = x + sum_i alpha_i * phi((x - zeta_i) / nu) * (x - zeta_i) |x - zeta_i|

with the bump ``phi(u) = (1 - u**2)**4`` on ``|u| <= 1`` and
``alpha_i = (mu(zeta_i-) - mu(zeta_i+)) / (2 sigma(zeta_i)**2)``.  ``G`` is the
identity outside the ``nu``-neighbourhood of the discontinuities and maps each
``[zeta_i - nu, zeta_i + nu]`` onto itself.  ``Z = G(X)`` solves an equation
with continuous drift (see :func:`transform_coefficients`).

:class:`Transform` follows the scikit-learn transformer protocol:
``Transform(nu_fraction=0.9).fit(problem).transform(x)`` evaluates ``G`` and
``inverse_transform`` evaluates ``G^{-1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _kernels as K
from .exceptions import InversionError, NonDegeneracyError, ParameterError
from .model import PiecewiseSmoothFn

MAX_NEWTON_ITER = 200


def bump(u):
    if np.ndim(u) == 0:
        return float(K.bump(float(u)))
    u = np.asarray(u, dtype=float)
    v = np.clip(1.0 - u * u, 0.0, None)
    return np.where(np.abs(u) <= 1.0, v**4, 0.0)


def nu_upper_bound(zetas, alphas):
    """Supremum of admissible bump half-widths (``min(empty) = inf``, ``1/0 = inf``)."""
    bound = math.inf
    for a in alphas:
        if a != 0.0:
            bound = min(bound, 1.0 / (8.0 * abs(a)))
    for z1, z2 in zip(zetas, zetas[1:]):
        bound = min(bound, 0.5 * (z2 - z1))
    return bound


def _map(fn, x):
    if np.ndim(x) == 0:
        return fn(float(x))
    x = np.asarray(x, dtype=float)
    return np.array([fn(v) for v in x.ravel()]).reshape(x.shape)


class Transform(TransformerMixin, BaseEstimator):
    """Drift-regularising transformation fitted to a problem.

    Parameters
    ----------
    nu_fraction : float in (0, 1)
        Bump half-width as a fraction of its upper bound.  When the bound is
        infinite (every ``alpha_i = 0`` and a single discontinuity) ``nu`` is
        set to ``nu_fraction`` itself.
    inverse_tolerance : float
        Absolute residual ``|G(x) - y|`` accepted by the inverse.

    Attributes
    ----------
    zetas_, alphas_, g2_at_zeta_ : ndarray
    nu_, nu_bound_ : float
    """

    def __init__(self, nu_fraction=0.9, inverse_tolerance=1e-12):
        self.nu_fraction = nu_fraction
        self.inverse_tolerance = inverse_tolerance

    def fit(self, problem, y=None):
        if not 0.0 < self.nu_fraction < 1.0:
            raise ParameterError(f"nu_fraction must lie in (0, 1), got {self.nu_fraction}")
        c = problem.coefficients
        zetas, alphas, g2 = [], [], []
        for z in c.theta:
            s = c.sigma(z)
            if s == 0.0:
                raise NonDegeneracyError(f"sigma vanishes at the drift discontinuity {z}")
            s2 = s * s
            left, right = c.mu.left_limit_at(z), c.mu.right_limit_at(z)
            a = (left - right) / (2.0 * s2)
            zetas.append(z)
            alphas.append(a)
            g2.append(2.0 * a + 2.0 * (right - c.mu(z)) / s2)
        self.zetas_ = np.asarray(zetas, dtype=float)
        self.alphas_ = np.asarray(alphas, dtype=float)
        self.g2_at_zeta_ = np.asarray(g2, dtype=float)
        self.nu_bound_ = nu_upper_bound(zetas, alphas)
        if math.isinf(self.nu_bound_):
            self.nu_ = float(self.nu_fraction) if zetas else 1.0
        else:
            self.nu_ = float(self.nu_fraction) * self.nu_bound_
        return self

    @classmethod
    def identity(cls):
        t = cls()
        t.zetas_ = np.empty(0)
        t.alphas_ = np.empty(0)
        t.g2_at_zeta_ = np.empty(0)
        t.nu_bound_ = math.inf
        t.nu_ = 1.0
        return t

    @property
    def is_identity(self):
        check_is_fitted(self, "zetas_")
        return self.zetas_.size == 0

    @property
    def kernel_args(self):
        return self.zetas_, self.alphas_, self.nu_

    def transform(self, X):
        check_is_fitted(self, "zetas_")
        return _map(lambda x: float(K.g_value(x, *self.kernel_args)), X)

    def derivative(self, X):
        check_is_fitted(self, "zetas_")
        return _map(lambda x: float(K.g_derivs(x, *self.kernel_args, self.g2_at_zeta_)[0]), X)

    def second_derivative(self, X):
        check_is_fitted(self, "zetas_")
        return _map(lambda x: float(K.g_derivs(x, *self.kernel_args, self.g2_at_zeta_)[1]), X)

    def third_derivative(self, X):
        check_is_fitted(self, "zetas_")
        return _map(lambda x: float(K.g_derivs(x, *self.kernel_args, self.g2_at_zeta_)[2]), X)

    def inverse_transform(self, X):
        check_is_fitted(self, "zetas_")
        if np.ndim(X) == 0:
            x, r, ok = K.g_inverse(float(X), *self.kernel_args, self.inverse_tolerance, MAX_NEWTON_ITER)
            if not ok:
                raise InversionError(float(X), float(r))
            return float(x)
        y = np.asarray(X, dtype=float)
        x, ok, worst = K.g_inverse_array(y.ravel(), *self.kernel_args, self.inverse_tolerance,
                                         MAX_NEWTON_ITER)
        if not ok:
            bad = y.ravel()[np.argmax(np.abs(self.transform(x) - y.ravel()))]
            raise InversionError(float(bad), float(worst))
        return x.reshape(y.shape)


def build_transform(problem, nu_fraction=0.9, inverse_tolerance=1e-12):
    return Transform(nu_fraction=nu_fraction, inverse_tolerance=inverse_tolerance).fit(problem)


def g_apply(t, x):
    return t.transform(x)


def g_derivative(t, x):
    return t.derivative(x)


def g_second_derivative(t, x):
    return t.second_derivative(x)


def g_invert(t, y):
    return t.inverse_transform(y)


@dataclass(frozen=True)
class TransformedCoefficients:
    """Coefficients of ``Z = G(X)``, each a :class:`PiecewiseSmoothFn` over the same breakpoints.

    ``source`` and ``transform`` are kept so the simulation kernel can compose
    the raw coefficients with ``G`` itself instead of calling back into Python.
    """

    mu_t: PiecewiseSmoothFn
    sigma_t: PiecewiseSmoothFn
    rho_t: PiecewiseSmoothFn
    breakpoints: tuple
    source: object
    transform: Transform


def transform_coefficients(problem, t):
    """mu~ = (G' mu + G'' sigma^2 / 2) o G^-1, sigma~ = (G' sigma) o G^-1,
    rho~ = G(G^-1 + rho o G^-1) - id.

    rho~ is evaluated as ``G(x + rho(x)) - G(x)`` with ``x = G^-1(z)``, which
    equals the formula up to the inversion residual and keeps ``rho = 0`` exact.
    """
    c = problem.coefficients
    mu, sigma, rho = c.mu, c.sigma, c.rho
    theta = tuple(float(z) for z in c.theta)
    inv = t.inverse_transform
    g2z = t.g2_at_zeta_

    def derivs(x):
        return K.g_derivs(x, *t.kernel_args, g2z)

    def mu_t(z):
        x = inv(z)
        g1, g2, _ = derivs(x)
        s = sigma(x)
        return g1 * mu(x) + 0.5 * g2 * s * s

    def dmu_t(z):
        x = inv(z)
        g1, g2, g3 = derivs(x)
        s, ds = sigma(x), sigma.derivative_or_zero(x)
        m, dm = mu(x), mu.derivative_or_zero(x)
        return (g2 * m + g1 * dm + 0.5 * g3 * s * s + g2 * s * ds) / g1

    def sigma_t(z):
        x = inv(z)
        return derivs(x)[0] * sigma(x)

    def dsigma_t(z):
        x = inv(z)
        g1, g2, _ = derivs(x)
        return (g2 * sigma(x) + g1 * sigma.derivative_or_zero(x)) / g1

    def rho_t(z):
        x = inv(z)
        r = rho(x)
        return r + (K.g_excess(x + r, *t.kernel_args) - K.g_excess(x, *t.kernel_args))

    # G maps each zeta to itself, so the breakpoints carry over unchanged
    return TransformedCoefficients(
        mu_t=PiecewiseSmoothFn(mu_t, dmu_t, breakpoints=theta),
        sigma_t=PiecewiseSmoothFn(sigma_t, dsigma_t, breakpoints=theta),
        rho_t=PiecewiseSmoothFn(rho_t, None),
        breakpoints=theta,
        source=c,
        transform=t,
    )
