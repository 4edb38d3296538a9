import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jumpmilstein import CoefficientSet, PiecewiseSmoothFn, SdeProblem, builtin_problem

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sign_drift():
    return builtin_problem("sign-drift")


@pytest.fixture(scope="session")
def merton():
    return builtin_problem("merton-smooth")


@pytest.fixture(scope="session")
def pure_diffusion():
    return builtin_problem("pure-diffusion-disc")


def drift_only(a=0.7, xi=0.3, lam=1.0):
    c = CoefficientSet(PiecewiseSmoothFn.constant(a), PiecewiseSmoothFn.constant(0.0),
                       PiecewiseSmoothFn.constant(0.0))
    return SdeProblem(c, xi=xi, horizon=1.0, lam=lam, name="drift-only")


def jump_only(c=0.25, xi=-0.4, lam=3.0):
    co = CoefficientSet(PiecewiseSmoothFn.constant(0.0), PiecewiseSmoothFn.constant(0.0),
                        PiecewiseSmoothFn.constant(c))
    return SdeProblem(co, xi=xi, horizon=1.0, lam=lam, name="jump-only")


def two_jumps_problem():
    """Drift with jumps at -1 and 0.5 and a state-dependent sigma (a kink at 0.5)."""
    def mu(x):
        if x < -1.0:
            return 2.0
        if x < 0.5:
            return -x
        return -3.0

    def dmu(x):
        return -1.0 if -1.0 < x < 0.5 else 0.0

    def sigma(x):
        return 1.0 + 0.5 * abs(x - 0.5)

    def dsigma(x):
        return 0.5 if x > 0.5 else -0.5

    def rho(x):
        return 0.2 * math.sin(x)

    def drho(x):
        return 0.2 * math.cos(x)

    co = CoefficientSet(
        PiecewiseSmoothFn(mu, dmu, breakpoints=(-1.0, 0.5), limits={-1.0: (2.0, 1.0), 0.5: (-0.5, -3.0)}),
        PiecewiseSmoothFn(sigma, dsigma, breakpoints=(0.5,)),
        PiecewiseSmoothFn(rho, drho),
        theta=(-1.0, 0.5),
    )
    return SdeProblem(co, xi=0.0, horizon=1.0, lam=2.0, name="two-jumps")


@pytest.fixture(scope="session")
def two_jumps():
    return two_jumps_problem()


def ks_against_normal(samples, sd):
    from scipy import stats
    return stats.kstest(np.asarray(samples) / sd, "norm").pvalue


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
