"""Compiled inner loops.

Everything that runs once per time step lives here so the noise, transform,
step-size and scheme modules share a single implementation: the Python API
calls the same jitted scalars the simulation kernel calls, which is what makes
coupled trajectories agree bit for bit.

Times are integer ticks on the lattice ``t = k * 2**-40``.
"""

import math

import numpy as np
from numba import njit

TICK_BITS = 40
TICKS_PER_UNIT = 1 << TICK_BITS
TICK = 2.0**-TICK_BITS

# status codes returned by the kernels
OK = 0
BLOWUP = 1
RUNAWAY = 2
INVERSION = 3

# scheme kinds
DOUBLY_ADAPTIVE_QM = 0
JUMP_ADAPTED_QM = 1
JUMP_ADAPTED_EM = 2

# columns of the float block of a trajectory
LEFT, VALUE, W, SNAP_MU, SNAP_SIGMA, SNAP_DSIGMA = range(6)
N_COLS = 6

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_C1 = np.uint64(0x2545F4914F6CDD1D)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_INV53 = 2.0**-53


# ---------------------------------------------------------------- random bits


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


# Wichura's AS241 (PPND16) inverse normal CDF, relative accuracy ~1e-16
_A = (3.3871328727963666080e0, 1.3314166789178437745e+2, 1.9715909503065514427e+3,
      1.3731693765509461125e+4, 4.5921953931549871457e+4, 6.7265770927008700853e+4,
      3.3430575583588128105e+4, 2.5090809287301226727e+3)
_B = (1.0, 4.2313330701600911252e+1, 6.8718700749205790830e+2, 5.3941960214247511077e+3,
      2.1213794301586595867e+4, 3.9307895800092710610e+4, 2.8729085735721942674e+4,
      5.2264952788528545610e+3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


@njit(cache=True)
def _poly(c, r):
    return ((((((c[7] * r + c[6]) * r + c[5]) * r + c[4]) * r + c[3]) * r + c[2]) * r + c[1]) * r + c[0]


@njit(cache=True)
def normal_quantile(p):
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return -val if q < 0.0 else val


@njit(cache=True)
def keyed_normal(key, counter):
    """Standard normal that is a pure function of ``(key, counter)``."""
    h = mix64(mix64(key + np.uint64(counter) * _GOLDEN) ^ _C1)
    return normal_quantile((float(h >> _S11) + 0.5) * _INV53)


@njit(cache=True)
def _node_value(key, a, wa, b, wb):
    half = (b - a) >> 1
    return 0.5 * (wa + wb) + math.sqrt(0.5 * half * TICK) * keyed_normal(key, a + half)


@njit(cache=True)
def brownian_value(key, tick, root_ticks):
    """W at ``tick`` from a dyadic Brownian-bridge tree over ``[0, root_ticks]``.

    Every lattice point is the midpoint of exactly one dyadic interval, and the
    normal used there is keyed by that midpoint, so the value does not depend
    on which other times were queried before.
    """
    if tick == 0:
        return 0.0
    a = np.int64(0)
    b = np.int64(root_ticks)
    wa = 0.0
    wb = math.sqrt(b * TICK) * keyed_normal(key, b)
    if tick == b:
        return wb
    while True:
        m = a + ((b - a) >> 1)
        wm = _node_value(key, a, wa, b, wb)
        if tick == m:
            return wm
        if tick < m:
            b = m
            wb = wm
        else:
            a = m
            wa = wm


MAX_DEPTH = 64


@njit(cache=True)
def new_walker(key, root_ticks):
    """Stack of the dyadic intervals on the way to the last queried tick."""
    lo = np.zeros(MAX_DEPTH, np.int64)
    hi = np.zeros(MAX_DEPTH, np.int64)
    wlo = np.zeros(MAX_DEPTH)
    whi = np.zeros(MAX_DEPTH)
    hi[0] = root_ticks
    whi[0] = math.sqrt(root_ticks * TICK) * keyed_normal(key, root_ticks)
    depth = np.zeros(1, np.int64)
    return lo, hi, wlo, whi, depth


@njit(cache=True)
def walk_to(key, tick, lo, hi, wlo, whi, depth):
    """Same value as :func:`brownian_value`, reusing the ancestors of the previous query."""
    d = depth[0]
    while d > 0 and not (lo[d] <= tick <= hi[d]):
        d -= 1
    while True:
        a = lo[d]
        b = hi[d]
        if tick == a:
            depth[0] = d
            return wlo[d]
        if tick == b:
            depth[0] = d
            return whi[d]
        m = a + ((b - a) >> 1)
        wm = _node_value(key, a, wlo[d], b, whi[d])
        d += 1
        if tick < m:
            lo[d] = a
            wlo[d] = wlo[d - 1]
            hi[d] = m
            whi[d] = wm
        else:
            lo[d] = m
            wlo[d] = wm
            hi[d] = b
            whi[d] = whi[d - 1]


@njit(cache=True)
def brownian_values(key, ticks, root_ticks):
    out = np.empty(ticks.size)
    lo, hi, wlo, whi, depth = new_walker(key, root_ticks)
    for i in range(ticks.size):
        out[i] = walk_to(key, ticks[i], lo, hi, wlo, whi, depth)
    return out


# ------------------------------------------------------------ transformation


@njit(cache=True)
def bump(u):
    if abs(u) <= 1.0:
        v = 1.0 - u * u
        v2 = v * v
        return v2 * v2
    return 0.0


@njit(cache=True)
def _bump_derivs(u):
    v = 1.0 - u * u
    v2 = v * v
    d1 = -8.0 * u * v2 * v
    d2 = -8.0 * v2 * v + 48.0 * u * u * v2
    d3 = 144.0 * u * v2 - 192.0 * u * u * u * v
    return v2 * v2, d1, d2, d3


@njit(cache=True)
def active_index(x, zetas, nu):
    """Index of the discontinuity whose open bump support contains x, or -1."""
    for i in range(zetas.size):
        if abs(x - zetas[i]) < nu:
            return i
    return -1


@njit(cache=True)
def g_value(x, zetas, alphas, nu):
    i = active_index(x, zetas, nu)
    if i < 0:
        return x
    s = x - zetas[i]
    return x + alphas[i] * bump(s / nu) * s * abs(s)


@njit(cache=True)
def g_excess(x, zetas, alphas, nu):
    """G(x) - x, exactly zero outside the bump support."""
    i = active_index(x, zetas, nu)
    if i < 0:
        return 0.0
    s = x - zetas[i]
    return alphas[i] * bump(s / nu) * s * abs(s)


@njit(cache=True)
def g_derivs(x, zetas, alphas, nu, g2_at_zeta):
    """(G', G'', G''') at x; G'' takes its extended value at a discontinuity
    and G''' is reported as 0 there."""
    i = active_index(x, zetas, nu)
    if i < 0:
        return 1.0, 0.0, 0.0
    s = x - zetas[i]
    a = alphas[i]
    if s == 0.0:
        return 1.0, g2_at_zeta[i], 0.0
    u = s / nu
    p0, p1, p2, p3 = _bump_derivs(u)
    q = s * abs(s)
    q1 = 2.0 * abs(s)
    q2 = 2.0 if s > 0.0 else -2.0
    g1 = 1.0 + a * (p1 / nu * q + p0 * q1)
    g2 = a * (p2 / (nu * nu) * q + 2.0 * p1 / nu * q1 + p0 * q2)
    g3 = a * (p3 / (nu * nu * nu) * q + 3.0 * p2 / (nu * nu) * q1 + 3.0 * p1 / nu * q2)
    return g1, g2, g3


@njit(cache=True)
def g_inverse(y, zetas, alphas, nu, tol, max_iter):
    """Safeguarded Newton for G(x) = y. Returns (x, residual, converged)."""
    i = active_index(y, zetas, nu)
    if i < 0:
        return y, 0.0, True
    lo = zetas[i] - nu
    hi = zetas[i] + nu
    x = y
    r = 0.0
    for _ in range(max_iter):
        r = g_value(x, zetas, alphas, nu) - y
        if abs(r) <= tol:
            return x, r, True
        if r > 0.0:
            hi = x
        else:
            lo = x
        g1 = 1.0
        s = x - zetas[i]
        if s != 0.0:
            p0, p1, _p2, _p3 = _bump_derivs(s / nu)
            g1 = 1.0 + alphas[i] * (p1 / nu * s * abs(s) + p0 * 2.0 * abs(s))
        xn = x - r / g1
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if xn == x:
            break
        x = xn
    r = g_value(x, zetas, alphas, nu) - y
    return x, r, abs(r) <= tol


@njit(cache=True)
def g_inverse_array(ys, zetas, alphas, nu, tol, max_iter):
    out = np.empty(ys.size)
    ok = True
    worst = 0.0
    for k in range(ys.size):
        x, r, conv = g_inverse(ys[k], zetas, alphas, nu, tol, max_iter)
        out[k] = x
        if not conv:
            ok = False
            worst = r
    return out, ok, worst


# ------------------------------------------------------------------ step size


@njit(cache=True)
def distance_to_set(x, theta):
    d = np.inf
    for z in theta:
        v = abs(x - z)
        if v < d:
            d = v
    return d


@njit(cache=True)
def step_size_value(x, theta, delta, eps1, eps2, logsq):
    if theta.size == 0:
        return delta
    d = distance_to_set(x, theta)
    if d >= eps1:
        return delta
    if d >= eps2:
        r = d / logsq
        return r * r
    return delta * delta * logsq * logsq


# -------------------------------------------------------------- coefficients


@njit(cache=True)
def _on_breakpoint(x, bps):
    for b in bps:
        if x == b:
            return True
    return False


@njit
def coefficients_at(z, mu, sigma, dsigma, zetas, alphas, nu, g2_at_zeta, sigma_bps, tol):
    """(mu~, sigma~, d_sigma~, converged) at z for the transformed equation.

    With an empty ``zetas`` the transformation is the identity and the raw
    coefficients come back unchanged.
    """
    x, _r, conv = g_inverse(z, zetas, alphas, nu, tol, 200)
    g1, g2, _g3 = g_derivs(x, zetas, alphas, nu, g2_at_zeta)
    m = mu(x)
    s = sigma(x)
    ds = 0.0 if _on_breakpoint(x, sigma_bps) else dsigma(x)
    mu_t = g1 * m + 0.5 * g2 * s * s
    sigma_t = g1 * s
    if _on_breakpoint(x, zetas):
        dsigma_t = 0.0
    else:
        dsigma_t = (g2 * s + g1 * ds) / g1
    return mu_t, sigma_t, dsigma_t, conv


@njit
def jump_coefficient_at(z, rho, zetas, alphas, nu, tol):
    # G(x + r) - G(x) written so that r = 0 gives 0 and G = id gives r, both exactly
    x, _r, conv = g_inverse(z, zetas, alphas, nu, tol, 200)
    r = rho(x)
    return r + (g_excess(x + r, zetas, alphas, nu) - g_excess(x, zetas, alphas, nu)), conv


# ------------------------------------------------------------------- schemes


@njit(cache=True)
def milstein_value(z, mu_t, sigma_t, dsigma_t, dt, dw):
    return z + mu_t * dt + sigma_t * dw + 0.5 * sigma_t * dsigma_t * (dw * dw - dt)


@njit(cache=True)
def next_tick(t, q, jump_ticks, j, t_end):
    """Next grid tick from the current tick, a candidate step ``q`` in ticks and
    the index ``j`` of the first jump strictly after ``t``."""
    cand = t + q
    if j < jump_ticks.size and jump_ticks[j] < cand:
        cand = jump_ticks[j]
    if cand > t_end:
        cand = t_end
    return cand


@njit
def simulate_kernel(mu, sigma, dsigma, rho, zetas, alphas, nu, g2_at_zeta, sigma_bps, tol,
                    kind, delta, theta, eps1, eps2, logsq, z0, t_end, jump_ticks,
                    key, root_ticks, max_steps, capacity):
    ticks = np.empty(capacity, np.int64)
    data = np.empty((capacity, N_COLS))
    jumps = np.zeros(capacity, np.bool_)
    milstein = kind != JUMP_ADAPTED_EM

    mu_t, sigma_t, dsigma_t, conv = coefficients_at(
        z0, mu, sigma, dsigma, zetas, alphas, nu, g2_at_zeta, sigma_bps, tol)
    if not milstein:
        dsigma_t = 0.0
    ticks[0] = 0
    data[0, LEFT] = z0
    data[0, VALUE] = z0
    data[0, W] = 0.0
    data[0, SNAP_MU] = mu_t
    data[0, SNAP_SIGMA] = sigma_t
    data[0, SNAP_DSIGMA] = dsigma_t
    if not conv:
        return ticks[:1], data[:1], jumps[:1], INVERSION, z0, 0.0, 0.0

    n = 0
    t = np.int64(0)
    z = z0
    w = 0.0
    lo, hi, wlo, whi, depth = new_walker(key, root_ticks)
    j = 0
    while j < jump_ticks.size and jump_ticks[j] <= 0:
        j += 1
    while t < t_end:
        if n >= max_steps:
            return ticks[:n + 1], data[:n + 1], jumps[:n + 1], RUNAWAY, z, 0.0, 0.0
        if kind == DOUBLY_ADAPTIVE_QM:
            h = step_size_value(z, theta, delta, eps1, eps2, logsq)
        else:
            h = delta
        q = np.int64(math.floor(h * TICKS_PER_UNIT))
        if q < 1:
            q = np.int64(1)
        t_next = next_tick(t, q, jump_ticks, j, t_end)
        dt = (t_next - t) * TICK
        w_next = walk_to(key, t_next, lo, hi, wlo, whi, depth)
        dw = w_next - w
        left = milstein_value(z, mu_t, sigma_t, dsigma_t, dt, dw)
        if not math.isfinite(left):
            return ticks[:n + 1], data[:n + 1], jumps[:n + 1], BLOWUP, z, dt, dw
        is_jump = j < jump_ticks.size and jump_ticks[j] == t_next
        value = left
        if is_jump:
            jr, conv = jump_coefficient_at(left, rho, zetas, alphas, nu, tol)
            if not conv:
                return ticks[:n + 1], data[:n + 1], jumps[:n + 1], INVERSION, left, dt, dw
            value = left + jr
            j += 1
            if not math.isfinite(value):
                return ticks[:n + 1], data[:n + 1], jumps[:n + 1], BLOWUP, z, dt, dw
        mu_t, sigma_t, dsigma_t, conv = coefficients_at(
            value, mu, sigma, dsigma, zetas, alphas, nu, g2_at_zeta, sigma_bps, tol)
        if not conv:
            return ticks[:n + 1], data[:n + 1], jumps[:n + 1], INVERSION, value, dt, dw
        if not milstein:
            dsigma_t = 0.0

        n += 1
        if n >= ticks.size:
            grown = 2 * ticks.size
            ticks2 = np.empty(grown, np.int64)
            ticks2[:n] = ticks[:n]
            data2 = np.empty((grown, N_COLS))
            data2[:n] = data[:n]
            jumps2 = np.zeros(grown, np.bool_)
            jumps2[:n] = jumps[:n]
            ticks, data, jumps = ticks2, data2, jumps2
        ticks[n] = t_next
        data[n, LEFT] = left
        data[n, VALUE] = value
        data[n, W] = w_next
        data[n, SNAP_MU] = mu_t
        data[n, SNAP_SIGMA] = sigma_t
        data[n, SNAP_DSIGMA] = dsigma_t
        jumps[n] = is_jump
        t = t_next
        z = value
        w = w_next
    return ticks[:n + 1], data[:n + 1], jumps[:n + 1], OK, z, 0.0, 0.0


@njit(cache=True)
def evaluate_on(ticks, data, query_ticks, query_w):
    """Continuous-time scheme values at sorted query ticks.

    Returns (right values, left limits). Between grid points both coincide;
    at a grid point the right value is the stored value and the left limit the
    stored left limit.
    """
    nq = query_ticks.size
    vals = np.empty(nq)
    lefts = np.empty(nq)
    n = 0
    last = ticks.size - 1
    for k in range(nq):
        t = query_ticks[k]
        while n < last and ticks[n + 1] <= t:
            n += 1
        if ticks[n] == t:
            vals[k] = data[n, VALUE]
            lefts[k] = data[n, LEFT]
        else:
            dt = (t - ticks[n]) * TICK
            dw = query_w[k] - data[n, W]
            v = milstein_value(data[n, VALUE], data[n, SNAP_MU], data[n, SNAP_SIGMA],
                               data[n, SNAP_DSIGMA], dt, dw)
            vals[k] = v
            lefts[k] = v
    return vals, lefts
