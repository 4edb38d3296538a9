import io
import math

import numpy as np
import pytest
from sklearn.base import clone

from conftest import drift_only, jump_only
from jumpmilstein import (BlowUpError, CoefficientSet, NoisePath, ParameterError, PiecewiseSmoothFn,
                          QuasiMilsteinSolver, RunawayGridError, SchemeConfig, SdeProblem,
                          StepSizePolicy, Transform, build_transform, evaluate_between,
                          next_grid_point, quasi_milstein_step, simulate, simulate_transformed,
                          transform_coefficients)
from jumpmilstein import _kernels as K
from jumpmilstein.noise import JumpTimes, from_ticks, to_ticks

ADMISSIBLE = 2.0**-16


def _jumps(times, horizon=1.0):
    ticks = to_ticks(np.asarray(times, dtype=float)).astype(np.int64)
    return JumpTimes(from_ticks(ticks), ticks, 1.0, horizon)


class TestStep:
    def test_hand_examples(self):
        assert quasi_milstein_step(1.0, 0.01, 0.1, (2.0, 3.0, 0.5)) == pytest.approx(1.32, abs=1e-15)
        assert quasi_milstein_step(1.0, 0.01, 0.2, (2.0, 3.0, 0.5)) == pytest.approx(1.6425, abs=1e-15)

    def test_degenerate_cases(self):
        assert quasi_milstein_step(0.7, 0.3, 1.1, (0.0, 0.0, 0.0)) == 0.7
        assert quasi_milstein_step(0.7, 0.3, 1.1, (2.0, 0.5, 0.0)) == 0.7 + 0.6 + 0.55

    def test_accepts_coefficient_objects(self, merton, sign_drift):
        c = merton.coefficients
        z, dt, dw = 1.3, 0.01, 0.05
        expected = z + 0.1 * z * dt + 0.3 * z * dw + 0.5 * 0.3 * z * 0.3 * (dw * dw - dt)
        assert quasi_milstein_step(z, dt, dw, c) == pytest.approx(expected, rel=1e-15)
        t = build_transform(sign_drift)
        tc = transform_coefficients(sign_drift, t)
        z = 0.01
        ref = z + tc.mu_t(z) * dt + tc.sigma_t(z) * dw + 0.5 * tc.sigma_t(z) * tc.sigma_t.derivative_or_zero(z) * (dw * dw - dt)
        assert quasi_milstein_step(z, dt, dw, tc) == pytest.approx(ref, rel=1e-15)

    def test_errors(self):
        with pytest.raises(BlowUpError) as info:
            quasi_milstein_step(1.0, 1.0, 1.0, (math.inf, 0.0, 0.0))
        assert info.value.z == 1.0
        with pytest.raises(ParameterError):
            quasi_milstein_step(1.0, -1.0, 0.0, (0.0, 0.0, 0.0))


class TestNextGridPoint:
    def test_free_step(self):
        assert next_grid_point(0.25, 5.0, 2.0**-6, _jumps([]), 1.0) == 0.25 + 2.0**-6

    def test_cut_at_jump(self):
        nu = 0.25 + 2.0**-7
        assert next_grid_point(0.25, 5.0, 2.0**-6, _jumps([0.1, nu, 0.9]), 1.0) == nu

    def test_jump_at_current_point_is_skipped(self):
        assert next_grid_point(0.25, 0.0, 2.0**-6, _jumps([0.25]), 1.0) == 0.25 + 2.0**-6

    def test_horizon_clamp(self):
        assert next_grid_point(1.0 - 2.0**-8, 5.0, 2.0**-6, _jumps([]), 1.0) == 1.0

    def test_adaptive_policy(self):
        p = StepSizePolicy((0.0,), 1e-6)
        got = next_grid_point(0.0, 0.1, p, _jumps([]), 1.0)
        assert got == math.floor(p(0.1) * 2**40) * 2.0**-40


class TestConfig:
    def test_validation(self):
        with pytest.raises(ParameterError):
            SchemeConfig("runge-kutta", 0.1)
        with pytest.raises(ParameterError):
            SchemeConfig("jump-adapted-qm", 1.0)
        with pytest.raises(ParameterError):
            SchemeConfig("doubly-adaptive-qm", 1e-6)
        with pytest.raises(ParameterError):
            SchemeConfig("doubly-adaptive-qm", 1e-6, StepSizePolicy((0.0,), 1e-7))

    def test_adaptive_solver_rejects_inadmissible_delta(self, sign_drift):
        with pytest.raises(ParameterError, match="admissible"):
            QuasiMilsteinSolver("doubly-adaptive-qm", 2.0**-8).fit(sign_drift)

    def test_estimator_params(self):
        s = QuasiMilsteinSolver("jump-adapted-em", 0.01, transformed=False)
        c = clone(s)
        assert c.get_params()["scheme_kind"] == "jump-adapted-em" and c.get_params()["delta"] == 0.01


class TestExactCases:
    @pytest.mark.parametrize("kind", ["doubly-adaptive-qm", "jump-adapted-qm", "jump-adapted-em"])
    def test_drift_only(self, kind):
        p = drift_only()
        traj = QuasiMilsteinSolver(kind, 2.0**-5).fit(p).simulate(NoisePath(3, p.lam, 1.0))
        assert traj.values[-1] == pytest.approx(p.xi + 0.7, abs=1e-14)
        assert np.allclose(traj.values, p.xi + 0.7 * traj.grid, atol=1e-14, rtol=0)

    def test_jump_only(self):
        p = jump_only()
        for i in range(20):
            path = NoisePath(4, p.lam, 1.0, index=i)
            traj = QuasiMilsteinSolver("jump-adapted-qm", 0.1).fit(p).simulate(path)
            n = np.searchsorted(path.jumps.ticks, traj.ticks, side="right")
            assert np.allclose(traj.values, p.xi + 0.25 * n, atol=1e-15, rtol=0)

    @pytest.mark.parametrize("delta", [2.0**-3, 2.0**-10, 0.25])
    def test_uniform_grid_without_jumps(self, merton, delta):
        p = SdeProblem(merton.coefficients, 1.0, 1.0, 0.0)
        traj = QuasiMilsteinSolver("doubly-adaptive-qm", delta).fit(p).simulate(NoisePath(1, 0.0, 1.0))
        assert traj.cost == math.ceil(1 / delta)
        q = math.floor(delta * 2**40)
        assert set(np.diff(traj.ticks)[:-1]) == {q}

    def test_off_lattice_step_is_floored(self, merton):
        # 0.1 is not a multiple of 2**-40: ten floored steps fall 10 ticks short of T
        p = SdeProblem(merton.coefficients, 1.0, 1.0, 0.0)
        traj = QuasiMilsteinSolver("jump-adapted-qm", 0.1).fit(p).simulate(NoisePath(1, 0.0, 1.0))
        assert traj.cost == 11 and np.diff(traj.ticks)[-1] == 2**40 - 10 * math.floor(0.1 * 2**40)


class TestTrajectoryInvariants:
    @pytest.fixture(scope="class")
    @classmethod
    def runs(cls, sign_drift, merton):
        out = []
        for prob, kind, delta, transformed in [
            (sign_drift, "jump-adapted-qm", 2.0**-6, True),
            (sign_drift, "jump-adapted-em", 2.0**-6, False),
            (merton, "doubly-adaptive-qm", 2.0**-6, True),
            (sign_drift, "doubly-adaptive-qm", ADMISSIBLE, True),
        ]:
            solver = QuasiMilsteinSolver(kind, delta, transformed=transformed).fit(prob)
            for i in range(3 if kind == "doubly-adaptive-qm" else 30):
                path = NoisePath(17, prob.lam, prob.horizon, index=i)
                out.append((solver, path, solver.simulate(path)))
        return out

    def test_grid_shape(self, runs):
        for _, _, traj in runs:
            assert traj.grid[0] == 0.0 and traj.grid[-1] == 1.0
            assert np.all(np.diff(traj.ticks) > 0)
            assert traj.cost == traj.ticks.size - 1

    def test_jump_adapted(self, runs):
        for _, path, traj in runs:
            assert np.array_equal(traj.ticks[traj.jump_flags], path.jumps.ticks)

    def test_step_bounds(self, runs):
        for solver, path, traj in runs:
            dt = np.diff(traj.ticks) * K.TICK
            assert np.all(dt <= solver.delta)
            pol = solver.config_.policy
            if pol is not None:
                h = np.array([pol(z) for z in traj.values[:-1]])
                assert np.all(dt <= h)
                assert traj.cost <= 1 / pol.min_step + len(path.jumps) + 1

    def test_grid_recurrence(self, runs):
        for solver, path, traj in runs:
            if solver.scheme_kind == "doubly-adaptive-qm" and solver.problem_.coefficients.m:
                continue
            q = math.floor(solver.delta * 2**40)
            for a, b in zip(traj.ticks[:-1], traj.ticks[1:]):
                nxt = path.jumps.ticks[path.jumps.ticks > a]
                assert b == min(a + q, nxt[0] if nxt.size else 2**40, 2**40)

    def test_jump_update(self, runs, sign_drift):
        for solver, _, traj in runs:
            rho = solver.coefficients_.rho_t if hasattr(solver.coefficients_, "rho_t") else solver.coefficients_.rho
            flags = traj.jump_flags
            recon = traj.left_limits[flags] + np.array([rho(v) for v in traj.left_limits[flags]])
            assert np.array_equal(recon, traj.values[flags])
            assert np.array_equal(traj.left_limits[~flags], traj.values[~flags])

    def test_step_formula_reproduced(self, runs):
        for solver, path, traj in runs[:40]:
            for n in range(min(traj.cost, 40)):
                mu, s, ds = traj.step_records[n]
                dt = (traj.ticks[n + 1] - traj.ticks[n]) * K.TICK
                dw = traj.w_values[n + 1] - traj.w_values[n]
                expected = traj.values[n] + mu * dt + s * dw + 0.5 * s * ds * (dw * dw - dt)
                assert traj.left_limits[n + 1] == expected
                assert traj.w_values[n + 1] == path.brownian_at(traj.grid[n + 1])

    def test_snapshots_are_coefficients(self, runs):
        solver, _, traj = runs[0]
        tc = solver.coefficients_
        for n in range(0, traj.cost, 3):
            z = traj.values[n]
            mu, s, ds = traj.step_records[n]
            assert mu == pytest.approx(tc.mu_t(z), rel=1e-13, abs=1e-13)
            assert s == pytest.approx(tc.sigma_t(z), rel=1e-13)

    def test_transformed_values_invert(self, runs):
        solver, _, traj = runs[0]
        x = traj.x_values
        assert np.max(np.abs(solver.transform_.transform(x) - traj.values)) <= 1e-12


class TestBetweenGrid:
    @pytest.fixture(scope="class")
    @classmethod
    def case(cls, sign_drift):
        solver = QuasiMilsteinSolver("jump-adapted-qm", 2.0**-4).fit(sign_drift)
        path = NoisePath(5, 1.0, 1.0)
        return solver, path, solver.simulate(path)

    def test_grid_points(self, case):
        _, path, traj = case
        for n in range(traj.cost + 1):
            assert evaluate_between(traj, traj.grid[n], path) == traj.values[n]
            if n:
                assert evaluate_between(traj, traj.grid[n], path, side="left") == traj.left_limits[n]

    def test_inside_a_step(self, case):
        _, path, traj = case
        t = 0.5 * (traj.grid[3] + traj.grid[4])
        mu, s, ds = traj.step_records[3]
        dt, dw = t - traj.grid[3], path.brownian_at(t) - traj.w_values[3]
        assert evaluate_between(traj, t, path) == traj.values[3] + mu * dt + s * dw + 0.5 * s * ds * (dw * dw - dt)

    def test_drift_only_midpoint(self):
        p = drift_only()
        path = NoisePath(0, p.lam, 1.0)
        traj = QuasiMilsteinSolver("jump-adapted-qm", 0.25).fit(p).simulate(path)
        t = 0.5 * (traj.grid[1] + traj.grid[2])
        assert evaluate_between(traj, t, path) == pytest.approx(p.xi + 0.7 * t, abs=1e-15)

    def test_domain(self, case):
        _, path, traj = case
        with pytest.raises(ParameterError):
            evaluate_between(traj, 1.5, path)

    def test_predict_any_order(self, case, sign_drift):
        solver, path, traj = case
        times = np.array([0.9, 0.1, 0.5, traj.grid[2], 0.0])
        got = solver.predict(path, times)
        want = [traj.transform.inverse_transform(evaluate_between(traj, t, path)) for t in times]
        assert np.array_equal(got, np.array(want))
        assert isinstance(solver.predict(path, 0.3), float)


class TestWrappers:
    def test_smooth_problem_transform_is_identity(self, merton):
        path = NoisePath(2, 1.0, 1.0)
        cfg = SchemeConfig("jump-adapted-qm", 2.0**-6)
        traj, x = simulate_transformed(merton, build_transform(merton), cfg, path)
        raw = simulate(merton.coefficients, cfg, path, merton.xi)
        assert np.array_equal(traj.ticks, raw.ticks) and np.array_equal(x, raw.values)

    def test_round_trip_residual(self, sign_drift):
        t = build_transform(sign_drift)
        traj, x = simulate_transformed(sign_drift, t, SchemeConfig("jump-adapted-qm", 2.0**-6), NoisePath(2, 1.0, 1.0))
        assert np.max(np.abs(t.transform(x) - traj.values)) <= 1e-12
        assert np.array_equal(traj.grid[traj.jump_flags], NoisePath(2, 1.0, 1.0).jumps.times)

    def test_qm_equals_em_with_constant_sigma(self, sign_drift):
        path = NoisePath(8, 1.0, 1.0)
        qm = QuasiMilsteinSolver("jump-adapted-qm", 2.0**-7, transformed=False).fit(sign_drift).simulate(path)
        em = QuasiMilsteinSolver("jump-adapted-em", 2.0**-7, transformed=False).fit(sign_drift).simulate(path)
        assert np.array_equal(qm.ticks, em.ticks) and np.array_equal(qm.values, em.values)

    def test_table_export(self, sign_drift):
        traj = QuasiMilsteinSolver("jump-adapted-qm", 0.25).fit(sign_drift).simulate(NoisePath(1, 1.0, 1.0))
        buf = io.StringIO()
        traj.write_table(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "time\tleft_limit\tvalue\tjump_flag"
        assert len(lines) == traj.cost + 2
        assert traj.to_table().shape == (traj.cost + 1, 4)


class TestFailures:
    def test_blow_up(self):
        mu = PiecewiseSmoothFn(lambda x: math.exp(x))
        p = SdeProblem(CoefficientSet(mu, PiecewiseSmoothFn.constant(0.0), PiecewiseSmoothFn.constant(0.0)),
                       5.0, 1.0, 0.0)
        with pytest.raises(BlowUpError):
            QuasiMilsteinSolver("jump-adapted-em", 0.25, transformed=False).fit(p).simulate(NoisePath(0, 0.0, 1.0))

    def test_runaway(self, merton):
        with pytest.raises(RunawayGridError):
            QuasiMilsteinSolver("jump-adapted-qm", 0.01, max_steps=10).fit(merton).simulate(NoisePath(0, 1.0, 1.0))


class TestStatistics:
    def test_moment_sanity(self, sign_drift):
        solver = QuasiMilsteinSolver("jump-adapted-qm", 2.0**-8).fit(sign_drift)

        def block(start):
            return np.mean([np.max(solver.simulate(NoisePath(41, 1.0, 1.0, index=i)).values ** 2)
                            for i in range(start, start + 5000)])
        a, b = block(0), block(5000)
        assert math.isfinite(a) and 0.8 <= a / b <= 1.25

    def test_adaptivity_engages(self, sign_drift):
        # the share of short steps stays roughly flat as delta shrinks (the ring
        # around the discontinuity narrows); their number grows
        fractions, counts = [], []
        for delta in (ADMISSIBLE, 2.0**-17):
            solver = QuasiMilsteinSolver("doubly-adaptive-qm", delta).fit(sign_drift)
            short = total = 0
            for i in range(2):
                traj = solver.simulate(NoisePath(3, 1.0, 1.0, index=i))
                free = ~traj.jump_flags[1:]
                free[-1] = False
                dt = np.diff(traj.ticks)[free]
                short += np.sum(dt < math.floor(delta * 2**40))
                total += dt.size
            fractions.append(short / total)
            counts.append(short)
        assert min(fractions) > 0.5
        assert counts[1] > 1.5 * counts[0]
