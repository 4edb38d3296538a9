"""Jump-adapted quasi-Milstein schemes.

Three kinds share one stepping loop:

``doubly-adaptive-qm``
    candidate step ``h(Z_n)`` from a :class:`~jumpmilstein.stepsize.StepSizePolicy`,
    cut at the next jump time and at the horizon.
``jump-adapted-qm``
    the same with a constant candidate step ``delta``.
``jump-adapted-em``
    constant candidate step and no Milstein correction.

One step from ``(tau_n, Z_n)`` to ``tau_{n+1}``::

    Z_{n+1}- = Z_n + mu(Z_n) dt + sigma(Z_n) dW + sigma(Z_n) d_sigma(Z_n) (dW**2 - dt) / 2
    Z_{n+1}  = Z_{n+1}- + rho(Z_{n+1}-)   if tau_{n+1} is a jump time, else Z_{n+1}-

and between grid points the scheme is continued with the same formula using
``W_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _kernels as K
from .exceptions import BlowUpError, InversionError, ParameterError, RunawayGridError
from .model import CoefficientSet
from .noise import from_ticks, to_ticks
from .stepsize import StepSizePolicy, step_size
from .transform import Transform, TransformedCoefficients, transform_coefficients

SCHEME_KINDS = {
    "doubly-adaptive-qm": K.DOUBLY_ADAPTIVE_QM,
    "jump-adapted-qm": K.JUMP_ADAPTED_QM,
    "jump-adapted-em": K.JUMP_ADAPTED_EM,
}
MAX_STEPS = 10**9


@dataclass(frozen=True)
class SchemeConfig:
    scheme_kind: str
    delta: float
    policy: Optional[StepSizePolicy] = None

    def __post_init__(self):
        if self.scheme_kind not in SCHEME_KINDS:
            raise ParameterError(
                f"unknown scheme kind {self.scheme_kind!r}; choose from {', '.join(SCHEME_KINDS)}")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if self.scheme_kind == "doubly-adaptive-qm":
            if self.policy is None:
                raise ParameterError("the doubly-adaptive scheme needs a step-size policy")
            if self.policy.delta != self.delta:
                raise ParameterError("policy delta and scheme delta differ")

    @property
    def kind_code(self):
        return SCHEME_KINDS[self.scheme_kind]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A simulated path on its adaptive grid.

    ``data`` columns follow :mod:`jumpmilstein._kernels`: left limit, value,
    W at the grid point, and the coefficient snapshot
    ``(mu~(Z_n), sigma~(Z_n), d_sigma~(Z_n))`` used for the step leaving it.
    Values live in the space the scheme ran in; ``transform`` (identity for
    raw runs) maps them back to the original state space.
    """

    ticks: np.ndarray
    data: np.ndarray
    jump_flags: np.ndarray
    scheme_kind: str
    delta: float
    path_identity: tuple
    transform: Transform

    @property
    def grid(self):
        return from_ticks(self.ticks)

    @property
    def values(self):
        return self.data[:, K.VALUE]

    @property
    def left_limits(self):
        return self.data[:, K.LEFT]

    @property
    def w_values(self):
        return self.data[:, K.W]

    @property
    def step_records(self):
        return self.data[:, [K.SNAP_MU, K.SNAP_SIGMA, K.SNAP_DSIGMA]]

    @property
    def cost(self):
        return int(self.ticks.size - 1)

    @property
    def horizon(self):
        return float(from_ticks(self.ticks[-1]))

    @property
    def x_values(self):
        return self.transform.inverse_transform(self.values)

    @property
    def x_left_limits(self):
        return self.transform.inverse_transform(self.left_limits)

    def to_table(self):
        """Rows ``(time, left_limit, value, jump_flag)``."""
        return np.column_stack([self.grid, self.left_limits, self.values, self.jump_flags.astype(float)])

    def write_table(self, fh):
        fh.write("time\tleft_limit\tvalue\tjump_flag\n")
        for t, left, value, flag in zip(self.grid, self.left_limits, self.values, self.jump_flags):
            fh.write(f"{t!r}\t{left!r}\t{value!r}\t{int(flag)}\n")


def next_grid_point(tau_n, z_n, policy, jumps, horizon):
    """``(tau_n + h(z_n)) ^ (first jump after tau_n) ^ horizon`` on the time lattice.

    ``policy`` may be a :class:`StepSizePolicy` or a constant step.
    """
    h = step_size(policy, z_n) if isinstance(policy, StepSizePolicy) else float(policy)
    t = to_ticks(tau_n)
    q = max(int(math.floor(h * K.TICKS_PER_UNIT)), 1)
    j = int(np.searchsorted(jumps.ticks, t, side="right"))
    return from_ticks(K.next_tick(np.int64(t), np.int64(q), jumps.ticks, j, np.int64(to_ticks(horizon))))


def quasi_milstein_step(z_n, dt, dW, coeffs):
    """Left limit at the next grid point; ``coeffs`` is ``(mu, sigma, d_sigma)`` at ``z_n``
    or an object with ``mu_t``/``sigma_t`` (or ``mu``/``sigma``) attributes."""
    if dt < 0:
        raise ParameterError(f"dt must be non-negative, got {dt}")
    if isinstance(coeffs, tuple):
        m, s, ds = coeffs
    elif isinstance(coeffs, TransformedCoefficients):
        m, s, ds = coeffs.mu_t(z_n), coeffs.sigma_t(z_n), coeffs.sigma_t.derivative_or_zero(z_n)
    else:
        m, s, ds = coeffs.mu(z_n), coeffs.sigma(z_n), coeffs.sigma.derivative_or_zero(z_n)
    out = float(K.milstein_value(float(z_n), m, s, ds, float(dt), float(dW)))
    if not math.isfinite(out):
        raise BlowUpError(z_n, dt, dW)
    return out


def _kernel_parts(coefficients):
    if isinstance(coefficients, TransformedCoefficients):
        return coefficients.source, coefficients.transform
    if isinstance(coefficients, CoefficientSet):
        return coefficients, Transform.identity()
    raise TypeError(f"expected CoefficientSet or TransformedCoefficients, got {type(coefficients).__name__}")


def simulate(coefficients, config, path, xi, max_steps=MAX_STEPS):
    """Run one scheme on one noise path.

    ``coefficients`` is a raw :class:`CoefficientSet` or the
    :class:`TransformedCoefficients` of a problem; ``xi`` is the initial value
    in that space.
    """
    source, t = _kernel_parts(coefficients)
    t_end = path.t_end
    if config.policy is not None and config.scheme_kind == "doubly-adaptive-qm":
        p = config.policy
        theta, eps1, eps2, log_sq = p.theta_array, p.eps1, p.eps2, p.log_sq
    else:
        theta, eps1, eps2, log_sq = np.empty(0), 0.0, 0.0, 1.0
    capacity = int(min(t_end * K.TICK / config.delta, 1 << 22)) + path.jumps.ticks.size + 16
    ticks, data, flags, status, z, dt, dw = K.simulate_kernel(
        source.mu.jitted, source.sigma.jitted, source.sigma.jitted_derivative, source.rho.jitted,
        t.zetas_, t.alphas_, t.nu_, t.g2_at_zeta_, np.asarray(source.sigma.breakpoints, dtype=float),
        t.inverse_tolerance, config.kind_code, float(config.delta), theta, eps1, eps2, log_sq,
        float(xi), np.int64(t_end), path.jumps.ticks, path.brownian_key, np.int64(path.root_ticks),
        np.int64(max_steps), capacity)
    if status == K.BLOWUP:
        raise BlowUpError(z, dt, dw)
    if status == K.RUNAWAY:
        raise RunawayGridError(f"grid did not reach the horizon within {max_steps} steps")
    if status == K.INVERSION:
        raise InversionError(z, float("nan"))
    return Trajectory(ticks, data, flags, config.scheme_kind, float(config.delta), path.identity, t)


def evaluate_between(traj, t, path, side="right"):
    """Continuous-time scheme value at ``t``.

    At a grid point ``tau_{n+1}`` the default returns the stored value;
    ``side="left"`` continues step ``n`` up to ``tau_{n+1}`` instead, which
    reproduces the stored left limit exactly.
    """
    tick = to_ticks(t)
    if tick < 0 or tick > traj.ticks[-1]:
        raise ParameterError(f"time {t!r} outside [0, {traj.horizon!r}]")
    n = int(np.searchsorted(traj.ticks, tick, side="right")) - 1
    if traj.ticks[n] == tick:
        if side == "right" or n == 0:
            return float(traj.data[n, K.VALUE])
        n -= 1
    row = traj.data[n]
    dt = (tick - traj.ticks[n]) * K.TICK
    dw = path.brownian_at(from_ticks(tick)) - row[K.W]
    return float(K.milstein_value(row[K.VALUE], row[K.SNAP_MU], row[K.SNAP_SIGMA],
                                  row[K.SNAP_DSIGMA], dt, dw))


def simulate_transformed(problem, transform, config, path, max_steps=MAX_STEPS):
    """Simulate ``Z = G(X)`` and map the grid values back through ``G^{-1}``."""
    coeffs = transform_coefficients(problem, transform)
    z0 = transform.transform(problem.xi)
    traj = simulate(coeffs, config, path, z0, max_steps=max_steps)
    return traj, traj.x_values


class QuasiMilsteinSolver(BaseEstimator):
    """Estimator-style front end: ``fit(problem)`` prepares the transformation and
    step-size policy, ``simulate(path)`` runs the scheme on a noise path.

    Parameters
    ----------
    scheme_kind : {"doubly-adaptive-qm", "jump-adapted-qm", "jump-adapted-em"}
    delta : float
        Maximal step size.
    transformed : bool
        Run on ``Z = G(X)`` (the transformation-based scheme) or on the raw equation.
    nu_fraction : float
        Bump half-width as a fraction of its upper bound.
    eps0 : float or None
        Step-size policy parameter; defaults to ``min(1, smallest gap / 2)``.
    """

    def __init__(self, scheme_kind="doubly-adaptive-qm", delta=2.0**-16, transformed=True,
                 nu_fraction=0.9, eps0=None, inverse_tolerance=1e-12, max_steps=MAX_STEPS):
        self.scheme_kind = scheme_kind
        self.delta = delta
        self.transformed = transformed
        self.nu_fraction = nu_fraction
        self.eps0 = eps0
        self.inverse_tolerance = inverse_tolerance
        self.max_steps = max_steps

    def fit(self, problem, y=None):
        if self.transformed:
            self.transform_ = Transform(self.nu_fraction, self.inverse_tolerance).fit(problem)
            self.coefficients_ = transform_coefficients(problem, self.transform_)
            self.z0_ = float(self.transform_.transform(problem.xi))
        else:
            self.transform_ = Transform.identity()
            self.coefficients_ = problem.coefficients
            self.z0_ = problem.xi
        policy = None
        if self.scheme_kind == "doubly-adaptive-qm":
            policy = StepSizePolicy(problem.coefficients.theta, self.delta, self.eps0)
        self.config_ = SchemeConfig(self.scheme_kind, float(self.delta), policy)
        self.problem_ = problem
        return self

    def simulate(self, path):
        check_is_fitted(self, "config_")
        return simulate(self.coefficients_, self.config_, path, self.z0_, max_steps=self.max_steps)

    def predict(self, path, times):
        """State-space values of the scheme at ``times`` on ``path``."""
        traj = self.simulate(path)
        times = np.asarray(times, dtype=float)
        ticks = to_ticks(np.atleast_1d(times))
        if np.any(ticks < 0) or np.any(ticks > traj.ticks[-1]):
            raise ParameterError(f"query times must lie in [0, {traj.horizon!r}]")
        order = np.argsort(ticks, kind="stable")
        sorted_ticks = ticks[order]
        vals, _ = K.evaluate_on(traj.ticks, traj.data, sorted_ticks, path.brownian_at_ticks(sorted_ticks))
        out = np.empty_like(vals)
        out[order] = vals
        out = traj.transform.inverse_transform(out)
        return out.reshape(times.shape) if times.ndim else float(out[0])
