"""Scalar jump-diffusion problems ``dX = mu(X) dt + sigma(X) dW + rho(X-) dN``.

Coefficients are plain Python callables with explicit breakpoint metadata.
They are compiled with numba the first time a scheme needs them, so they must
be written in the numba-compatible subset (scalar math, ``abs``, ``math``/
``numpy`` functions, conditionals).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher

from .exceptions import ModelError, ParameterError, RegistryError

LIMIT_PROBE = 1e-8
LIMIT_TOL = 1e-5


def _zero(x):
    return 0.0


def _jit(fn):
    if isinstance(fn, CPUDispatcher):
        return fn
    return njit(fn)


@dataclass(frozen=True)
class PiecewiseSmoothFn:
    """A scalar function that is smooth away from finitely many breakpoints.

    ``derivative`` is the classical derivative wherever it exists; its value at
    a breakpoint is never consulted.  ``limits`` maps breakpoints to their
    one-sided limits ``(f(b-), f(b+))``; breakpoints without an entry are
    taken to be kinks, where both limits equal ``f(b)``.
    """

    func: Callable[[float], float]
    derivative: Optional[Callable[[float], float]] = None
    breakpoints: tuple = ()
    limits: Mapping[float, tuple] = field(default_factory=dict)

    def __post_init__(self):
        bps = tuple(float(b) for b in self.breakpoints)
        if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
            raise ModelError(f"breakpoints must be strictly increasing, got {bps}")
        object.__setattr__(self, "breakpoints", bps)
        lims = {float(k): (float(v[0]), float(v[1])) for k, v in dict(self.limits).items()}
        unknown = set(lims) - set(bps)
        if unknown:
            raise ModelError(f"one-sided limits given at non-breakpoints {sorted(unknown)}")
        object.__setattr__(self, "limits", lims)
        for b in bps:
            left, right = self.left_limit_at(b), self.right_limit_at(b)
            lo, hi = self.func(b - LIMIT_PROBE), self.func(b + LIMIT_PROBE)
            if abs(lo - left) > LIMIT_TOL or abs(hi - right) > LIMIT_TOL:
                raise ModelError(
                    f"declared one-sided limits ({left}, {right}) at {b} disagree with "
                    f"f(b -/+ {LIMIT_PROBE}) = ({lo}, {hi})")

    @classmethod
    def constant(cls, c):
        c = float(c)
        return cls(lambda x: c, _zero)

    @classmethod
    def linear(cls, slope, intercept=0.0):
        a, b = float(slope), float(intercept)
        return cls(lambda x: a * x + b, lambda x: a)

    def __call__(self, x):
        return self.evaluate(x)

    def evaluate(self, x):
        if np.ndim(x) == 0:
            return float(self.func(float(x)))
        x = np.asarray(x, dtype=float)
        return np.array([self.func(v) for v in x.ravel()]).reshape(x.shape)

    def left_limit_at(self, z):
        z = float(z)
        if z in self.limits:
            return self.limits[z][0]
        return float(self.func(z))

    def right_limit_at(self, z):
        z = float(z)
        if z in self.limits:
            return self.limits[z][1]
        return float(self.func(z))

    def derivative_or_zero(self, x):
        if np.ndim(x) != 0:
            x = np.asarray(x, dtype=float)
            return np.array([self.derivative_or_zero(v) for v in x.ravel()]).reshape(x.shape)
        x = float(x)
        if x in self.breakpoints or self.derivative is None:
            return 0.0
        return float(self.derivative(x))

    @property
    def jitted(self):
        """numba-compiled ``func`` (compiled once, cached on the instance)."""
        try:
            return self.__dict__["_jit_func"]
        except KeyError:
            fn = _jit(self.func)
            object.__setattr__(self, "_jit_func", fn)
            return fn

    @property
    def jitted_derivative(self):
        try:
            return self.__dict__["_jit_deriv"]
        except KeyError:
            fn = _jit(self.derivative if self.derivative is not None else _zero)
            object.__setattr__(self, "_jit_deriv", fn)
            return fn


@dataclass(frozen=True)
class CoefficientSet:
    mu: PiecewiseSmoothFn
    sigma: PiecewiseSmoothFn
    rho: PiecewiseSmoothFn
    theta: tuple = ()

    def __post_init__(self):
        theta = tuple(float(z) for z in self.theta)
        if any(b <= a for a, b in zip(theta, theta[1:])):
            raise ModelError(f"discontinuity locations must be strictly increasing, got {theta}")
        object.__setattr__(self, "theta", theta)
        stray = [b for b in self.mu.breakpoints if b not in theta]
        if stray:
            raise ModelError(f"drift breakpoints {stray} are missing from theta")

    @property
    def m(self):
        return len(self.theta)


@dataclass(frozen=True)
class SdeProblem:
    """An initial value problem on ``[0, horizon]`` driven by W and a rate-``lam`` Poisson process.

    ``reference_solution(t, w, n)``, when present, returns the exact strong
    solution given arrays of times, Brownian values ``W_t`` and jump counts
    ``N_t`` (pass ``N_{t-}`` to get left limits).
    """

    coefficients: CoefficientSet
    xi: float
    horizon: float
    lam: float
    reference_solution: Optional[Callable] = None
    name: str = "inline"

    def __post_init__(self):
        if not self.horizon > 0:
            raise ParameterError(f"horizon must be positive, got {self.horizon}")
        if not self.lam >= 0:
            raise ParameterError(f"intensity must be non-negative, got {self.lam}")
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "lam", float(self.lam))


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class ClauseResult:
    name: str
    passed: bool
    location: Optional[float] = None
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    clauses: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.clauses)

    def __getitem__(self, name):
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.clauses if not c.passed]


def _segments(lo, hi, cuts, width):
    """Sample grids of spacing ~width on the open pieces of [lo, hi] between cuts."""
    edges = [lo] + [c for c in cuts if lo < c < hi] + [hi]
    out = []
    for a, b in zip(edges, edges[1:]):
        n = max(int(math.ceil((b - a) / width)), 2)
        xs = np.linspace(a, b, n + 1)
        if a in cuts:
            xs = xs[1:]
        if b in cuts:
            xs = xs[:-1]
        if xs.size >= 2:
            out.append(xs)
    return out


def _lipschitz_probe(f, pieces, rng, sample_count, width):
    """Max coarse and fine difference quotients of ``f`` over the pieces.

    A Lipschitz function gives a fine-scale quotient no larger than its
    coarse-scale one (up to curvature); a jump or a cusp inside a piece makes
    the fine quotient blow up.
    """
    coarse, coarse_at = 0.0, None
    fine, fine_at = 0.0, None
    h = width / 100.0
    for xs in pieces:
        ys = np.array([f(x) for x in xs])
        if not np.all(np.isfinite(ys)):
            bad = xs[~np.isfinite(ys)][0]
            raise ModelError(f"non-finite coefficient value at x={bad}")
        q = np.abs(np.diff(ys)) / np.diff(xs)
        k = int(np.argmax(q))
        if q[k] > coarse:
            coarse, coarse_at = float(q[k]), float(xs[k])
        # zoom into the steepest cells, where a hidden jump or cusp would sit
        for k in np.argsort(q)[-5:]:
            zs = np.linspace(xs[k], xs[k + 1], 101)
            qz = np.abs(np.diff([f(z) for z in zs])) / np.diff(zs)
            j = int(np.argmax(qz))
            if qz[j] > fine:
                fine, fine_at = float(qz[j]), float(zs[j])
        a, b = xs[0], xs[-1] - h
        if b <= a:
            continue
        for x in rng.uniform(a, b, size=max(sample_count // len(pieces), 1)):
            v = abs(f(x + h) - f(x)) / h
            if v > fine:
                fine, fine_at = float(v), float(x)
    return coarse, coarse_at, fine, fine_at


def validate_assumptions(problem, grid_width=1e-3, sample_count=2000, window=5.0, seed=0):
    """Heuristic screen of the structural assumptions on the coefficients.

    Probes, over ``[xi - window, xi + window]`` (widened to contain every
    discontinuity): non-degeneracy of sigma at each discontinuity, Lipschitz
    behaviour of mu between discontinuities and of sigma and rho globally,
    agreement of the supplied derivatives with finite differences, and
    placement of the sigma breakpoints.  Passing is evidence, not proof.
    """
    if grid_width <= 0:
        raise ParameterError(f"grid_width must be positive, got {grid_width}")
    c = problem.coefficients
    theta = tuple(c.theta)
    if any(b <= a for a, b in zip(theta, theta[1:])):
        raise ModelError(f"discontinuity locations must be strictly increasing, got {theta}")
    rng = np.random.default_rng(seed)
    lo = min([problem.xi - window] + [z - 1.0 for z in theta])
    hi = max([problem.xi + window] + [z + 1.0 for z in theta])
    clauses = []

    bad = [z for z in theta if c.sigma(z) == 0.0]
    clauses.append(ClauseResult(
        "sigma_nonzero_at_theta", not bad, bad[0] if bad else None,
        "sigma vanishes at a drift discontinuity" if bad else ""))

    def lipschitz_clause(name, fn, cuts):
        pieces = _segments(lo, hi, cuts, grid_width)
        coarse, _, fine, fine_at = _lipschitz_probe(fn, pieces, rng, sample_count, grid_width)
        ok = fine <= 2.0 * coarse + 1e-9
        return ClauseResult(name, ok, None if ok else fine_at,
                            f"difference quotients: {coarse:.4g} (coarse), {fine:.4g} (fine)")

    clauses.append(lipschitz_clause("mu_piecewise_lipschitz", c.mu, theta))
    clauses.append(lipschitz_clause("sigma_lipschitz", c.sigma, ()))
    clauses.append(lipschitz_clause("rho_lipschitz", c.rho, ()))

    stray = [b for b in c.sigma.breakpoints if b not in theta]
    clauses.append(ClauseResult(
        "sigma_breakpoints_in_theta", not stray, stray[0] if stray else None,
        "sigma may only lose differentiability at drift discontinuities" if stray else ""))

    worst, worst_at = 0.0, None
    for fn in (c.mu, c.sigma):
        if fn.derivative is None:
            continue
        cuts = set(theta) | set(fn.breakpoints)
        h = 1e-6
        for x in rng.uniform(lo, hi, size=200):
            if any(abs(x - b) < 10 * h for b in cuts):
                continue
            fd = (fn(x + h) - fn(x - h)) / (2 * h)
            err = abs(fd - fn.derivative_or_zero(x)) / max(1.0, abs(fd))
            if err > worst:
                worst, worst_at = err, float(x)
    ok = worst <= 1e-4
    clauses.append(ClauseResult("derivatives_consistent", ok, None if ok else worst_at,
                                f"max relative mismatch {worst:.3g}"))
    return ValidationReport(tuple(clauses))


# ------------------------------------------------------------------ registry


@njit(cache=True)
def _sign_drift_mu(x):
    return 1.0 if x < 0.0 else -1.0


@njit(cache=True)
def _one(x):
    return 1.0


@njit(cache=True)
def _nil(x):
    return 0.0


@njit(cache=True)
def _sign_drift_rho(x):
    return 0.1 * (1.0 + abs(x))


@njit(cache=True)
def _sign_drift_drho(x):
    return 0.1 if x > 0.0 else -0.1


MERTON_DRIFT = 0.1
MERTON_VOL = 0.3
MERTON_JUMP = -0.2


@njit(cache=True)
def _merton_mu(x):
    return MERTON_DRIFT * x


@njit(cache=True)
def _merton_dmu(x):
    return MERTON_DRIFT


@njit(cache=True)
def _merton_sigma(x):
    return MERTON_VOL * x


@njit(cache=True)
def _merton_dsigma(x):
    return MERTON_VOL


@njit(cache=True)
def _merton_rho(x):
    return MERTON_JUMP * x


@njit(cache=True)
def _merton_drho(x):
    return MERTON_JUMP


def _sign_drift(lam):
    coeffs = CoefficientSet(
        mu=PiecewiseSmoothFn(_sign_drift_mu, _nil, breakpoints=(0.0,), limits={0.0: (1.0, -1.0)}),
        sigma=PiecewiseSmoothFn(_one, _nil),
        rho=PiecewiseSmoothFn(_sign_drift_rho, _sign_drift_drho, breakpoints=(0.0,)),
        theta=(0.0,),
    )
    name = "sign-drift" if lam > 0 else "pure-diffusion-disc"
    return SdeProblem(coeffs, xi=0.1, horizon=1.0, lam=lam, name=name)


def _merton_solution(xi):
    def solution(t, w, n):
        t, w, n = (np.asarray(a, dtype=float) for a in (t, w, n))
        drift = (MERTON_DRIFT - 0.5 * MERTON_VOL**2) * t + MERTON_VOL * w
        return xi * np.exp(drift) * (1.0 + MERTON_JUMP) ** n
    return solution


def _merton_smooth():
    coeffs = CoefficientSet(
        mu=PiecewiseSmoothFn(_merton_mu, _merton_dmu),
        sigma=PiecewiseSmoothFn(_merton_sigma, _merton_dsigma),
        rho=PiecewiseSmoothFn(_merton_rho, _merton_drho),
    )
    xi = 1.0
    return SdeProblem(coeffs, xi=xi, horizon=1.0, lam=1.0,
                      reference_solution=_merton_solution(xi), name="merton-smooth")


_REGISTRY = {
    "sign-drift": lambda: _sign_drift(1.0),
    "merton-smooth": _merton_smooth,
    "pure-diffusion-disc": lambda: _sign_drift(0.0),
}


def list_problems():
    return tuple(_REGISTRY)


def builtin_problem(name):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise RegistryError(name, _REGISTRY) from None
    return factory()
