"""Step-size function that shrinks the time step near the drift discontinuities.

With ``L = log(1/delta)`` (natural log), ``eps1 = sqrt(delta) L**2`` and
``eps2 = delta L**4``:

* ``h(x) = delta`` when ``d(x, Theta) >= eps1``,
* ``h(x) = (d(x, Theta) / L**2)**2`` when ``eps2 <= d(x, Theta) < eps1``,
* ``h(x) = delta**2 L**4`` when ``d(x, Theta) < eps2``.

A step size ``delta`` is admissible when ``eps2 <= eps1 <= eps0 / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .exceptions import ParameterError

_MONOTONE_CAP = math.exp(-4.0)  # sqrt(d) log^2(1/d) increases on (0, e^-4)


def _as_theta(theta):
    return np.asarray(sorted(float(z) for z in theta), dtype=float)


def distance_to_theta(theta, x):
    theta = _as_theta(theta)
    if np.ndim(x) == 0:
        return float(K.distance_to_set(float(x), theta))
    x = np.asarray(x, dtype=float)
    if theta.size == 0:
        return np.full(x.shape, np.inf)
    return np.min(np.abs(x[..., None] - theta), axis=-1)


def thresholds(delta):
    """(eps1, eps2, log(1/delta)**2)."""
    log_sq = math.log(1.0 / delta) ** 2
    return math.sqrt(delta) * log_sq, delta * log_sq * log_sq, log_sq


def default_eps0(theta):
    theta = _as_theta(theta)
    if theta.size < 2:
        return 1.0
    return min(1.0, 0.5 * float(np.min(np.diff(theta))))


def _check_eps0(theta, eps0):
    theta = _as_theta(theta)
    if not 0.0 < eps0 <= 1.0:
        raise ParameterError(f"eps0 must lie in (0, 1], got {eps0}")
    if theta.size >= 2 and eps0 > 0.5 * float(np.min(np.diff(theta))):
        raise ParameterError(f"eps0={eps0} exceeds half the smallest gap between discontinuities")


def compute_delta0(theta, eps0=None, tol=1e-12):
    """Largest admissible step size (found by bisection), or 1 without discontinuities."""
    if len(theta) == 0:
        return 1.0
    if eps0 is None:
        eps0 = default_eps0(theta)
    _check_eps0(theta, eps0)
    target = 0.5 * eps0

    def ok(d):
        e1, e2, _ = thresholds(d)
        return e2 <= e1 <= target

    lo, hi = 0.0, _MONOTONE_CAP
    if ok(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid > 0 and ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class StepSizePolicy:
    theta: tuple
    delta: float
    eps0: float = None
    eps1: float = field(init=False)
    eps2: float = field(init=False)
    log_sq: float = field(init=False)
    delta0: float = field(init=False)

    def __post_init__(self):
        theta = tuple(float(z) for z in _as_theta(self.theta))
        object.__setattr__(self, "theta", theta)
        eps0 = default_eps0(theta) if self.eps0 is None else float(self.eps0)
        _check_eps0(theta, eps0)
        object.__setattr__(self, "eps0", eps0)
        delta = float(self.delta)
        if not 0.0 < delta < 1.0:
            raise ParameterError(f"delta must lie in (0, 1), got {delta}")
        eps1, eps2, log_sq = thresholds(delta)
        object.__setattr__(self, "eps1", eps1)
        object.__setattr__(self, "eps2", eps2)
        object.__setattr__(self, "log_sq", log_sq)
        object.__setattr__(self, "delta0", compute_delta0(theta, eps0))
        if theta and not eps2 <= eps1 <= 0.5 * eps0:
            raise ParameterError(
                f"delta={delta:.6g} is not admissible: need eps2 <= eps1 <= eps0/2 but "
                f"eps2={eps2:.4g}, eps1={eps1:.4g}, eps0/2={0.5 * eps0:.4g} "
                f"(largest admissible delta is {self.delta0:.6g})")

    @property
    def min_step(self):
        """Lower bound ``delta**2 log(1/delta)**4`` of the step size (``delta`` without discontinuities)."""
        if not self.theta:
            return self.delta
        return self.delta * self.delta * self.log_sq * self.log_sq

    @property
    def theta_array(self):
        return np.asarray(self.theta, dtype=float)

    def __call__(self, x):
        return step_size(self, x)


def step_size(policy, x):
    args = (policy.theta_array, policy.delta, policy.eps1, policy.eps2, policy.log_sq)
    if np.ndim(x) == 0:
        return float(K.step_size_value(float(x), *args))
    x = np.asarray(x, dtype=float)
    return np.array([K.step_size_value(v, *args) for v in x.ravel()]).reshape(x.shape)
