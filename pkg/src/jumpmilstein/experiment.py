"""Monte Carlo harness: coupled strong errors, rate fits and cost scaling.

Every sample ``i`` gets its own :class:`~jumpmilstein.noise.NoisePath`; the
reference trajectory and every (scheme, delta) trajectory of that sample are
driven by it, so their differences measure discretisation error only.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels as K
from .exceptions import (BlowUpError, ConfigError, CouplingError, ExperimentFailure,
                         InversionError, ParameterError, RegistryError)
from .model import SdeProblem, builtin_problem
from .noise import NoisePath, to_ticks
from .schemes import SCHEME_KINDS, QuasiMilsteinSolver

log = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 1e-3
CSV_COLUMNS = ("scheme", "delta", "mean_cost", "cost_se", "p", "error", "error_ci_lo",
               "error_ci_hi", "slope_vs_cost", "slope_vs_delta", "excluded")


# -------------------------------------------------------------------- config


def _parse_float(text):
    text = text.strip()
    if "^" in text:
        base, exp = text.split("^", 1)
        return float(base) ** float(exp)
    return float(text)


def _parse_list(text, conv):
    return tuple(conv(v) for v in text.split(",") if v.strip())


def _parse_bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    """Settings of a convergence or cost study.

    Config files are flat ``key = value`` text, ``#`` starts a comment, list
    values are comma separated and step sizes may be written ``2^-8``.
    """

    problem: object = "merton-smooth"
    schemes: tuple = ("doubly-adaptive-qm", "jump-adapted-qm", "jump-adapted-em")
    raw_schemes: tuple = ("jump-adapted-em",)
    deltas: tuple = tuple(2.0**-k for k in range(4, 11))
    reference_refinement: int = 32
    reference_scheme: str = "doubly-adaptive-qm"
    samples: int = 1000
    p_list: tuple = (1.0, 2.0)
    seed: int = 2024
    nu_fraction: float = 0.9
    eps0: Optional[float] = None
    bootstrap: int = 1000
    workers: int = 1
    output_csv: str = "report.csv"
    output_svg: str = ""

    _PARSERS = {
        "problem": str.strip,
        "schemes": lambda s: _parse_list(s, str.strip),
        "raw_schemes": lambda s: _parse_list(s, str.strip),
        "deltas": lambda s: _parse_list(s, _parse_float),
        "reference_refinement": int,
        "reference_scheme": str.strip,
        "samples": int,
        "p_list": lambda s: _parse_list(s, _parse_float),
        "seed": int,
        "nu_fraction": _parse_float,
        "eps0": lambda s: None if s.strip().lower() in ("", "none", "default") else _parse_float(s),
        "bootstrap": int,
        "workers": int,
        "output_csv": str.strip,
        "output_svg": str.strip,
    }

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for key, raw in mapping.items():
            if key not in cls._PARSERS:
                raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(cls._PARSERS)}")
            try:
                kwargs[key] = cls._PARSERS[key](raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text):
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def resolve_problem(self):
        if isinstance(self.problem, SdeProblem):
            return self.problem
        try:
            return builtin_problem(self.problem)
        except RegistryError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def reference_delta(self):
        return min(self.deltas) / self.reference_refinement

    def validate(self, for_convergence=True):
        if not self.deltas:
            raise ConfigError("delta ladder is empty")
        if any(b >= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ConfigError(f"delta ladder must be strictly decreasing, got {self.deltas}")
        if any(not 0.0 < d < 1.0 for d in self.deltas):
            raise ConfigError("every delta must lie in (0, 1)")
        if self.samples < 100:
            raise ConfigError(f"need at least 100 samples, got {self.samples}")
        if not self.schemes:
            raise ConfigError("no schemes configured")
        for name in tuple(self.schemes) + tuple(self.raw_schemes) + (self.reference_scheme,):
            if name not in SCHEME_KINDS:
                raise ConfigError(f"unknown scheme {name!r}; choose from {', '.join(SCHEME_KINDS)}")
        if self.reference_scheme == "jump-adapted-em":
            raise ConfigError("the reference must be a quasi-Milstein scheme")
        if for_convergence and self.reference_refinement < 8:
            raise ConfigError(f"reference_refinement must be at least 8, got {self.reference_refinement}")
        if any(p < 1 for p in self.p_list) or not self.p_list:
            raise ConfigError("moments p must be >= 1")
        if not 0.0 < self.nu_fraction < 1.0:
            raise ConfigError(f"nu_fraction must lie in (0, 1), got {self.nu_fraction}")
        if self.bootstrap < 1:
            raise ConfigError("bootstrap needs at least one resample")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        problem = self.resolve_problem()
        try:
            self.build_solvers(problem)
            if for_convergence:
                self.build_reference(problem)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, SdeProblem):
                value = value.name
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def _solver(self, kind, delta, problem):
        return QuasiMilsteinSolver(kind, delta, transformed=kind not in self.raw_schemes,
                                   nu_fraction=self.nu_fraction, eps0=self.eps0).fit(problem)

    def build_solvers(self, problem):
        return [((kind, d), self._solver(kind, d, problem)) for kind in self.schemes for d in self.deltas]

    def build_reference(self, problem):
        return QuasiMilsteinSolver(self.reference_scheme, self.reference_delta, transformed=True,
                                   nu_fraction=self.nu_fraction, eps0=self.eps0).fit(problem)


# ------------------------------------------------------------ coupled errors


def _check_coupled(a, b, path=None):
    if a.path_identity != b.path_identity:
        raise CouplingError(f"trajectories come from different noise paths: "
                            f"{a.path_identity} vs {b.path_identity}")
    if path is not None and path.identity != a.path_identity:
        raise CouplingError("trajectory was not simulated on the given path")


def _union_with_w(a, b):
    union = np.union1d(a.ticks, b.ticks)
    w = np.empty(union.size)
    w[np.searchsorted(union, a.ticks)] = a.w_values
    w[np.searchsorted(union, b.ticks)] = b.w_values
    return union, w


def _state_space(traj, ticks, w):
    vals, lefts = K.evaluate_on(traj.ticks, traj.data, ticks, w)
    t = traj.transform
    if t.is_identity:
        return vals, lefts
    return t.inverse_transform(vals), t.inverse_transform(lefts)


def coupled_sup_error(coarse, reference, path=None, p=None):
    """``max |X^ref_t - X^coarse_t|`` over the union of both grids, in the original
    state space, comparing right values and left limits.

    The moment ``p`` is applied by the aggregator; it is accepted here only so
    call sites can pass it through.
    """
    _check_coupled(coarse, reference, path)
    ticks, w = _union_with_w(coarse, reference)
    vc, lc = _state_space(coarse, ticks, w)
    vr, lr = _state_space(reference, ticks, w)
    return float(max(np.max(np.abs(vc - vr)), np.max(np.abs(lc - lr))))


def exact_sup_error(traj, problem, path, extra_ticks=None):
    """Sup error of a trajectory against the problem's closed-form solution, over
    the trajectory grid merged with ``extra_ticks``."""
    if problem.reference_solution is None:
        raise ParameterError(f"problem {problem.name!r} has no closed-form solution")
    if path.identity != traj.path_identity:
        raise CouplingError("trajectory was not simulated on the given path")
    ticks = traj.ticks if extra_ticks is None else np.union1d(traj.ticks, extra_ticks)
    w = path.brownian_at_ticks(ticks)
    vals, lefts = _state_space(traj, ticks, w)
    t = ticks * K.TICK
    n_right = np.searchsorted(path.jumps.ticks, ticks, side="right")
    n_left = np.searchsorted(path.jumps.ticks, ticks, side="left")
    exact = problem.reference_solution(t, w, n_right)
    exact_left = problem.reference_solution(t, w, n_left)
    return float(max(np.max(np.abs(vals - exact)), np.max(np.abs(lefts - exact_left))))


# ------------------------------------------------------------------- reports


@dataclass(frozen=True)
class ReportRow:
    scheme: str
    delta: float
    mean_cost: float
    cost_se: float
    p: float
    error: float
    error_ci_lo: float
    error_ci_hi: float
    slope_vs_cost: float
    slope_vs_delta: float
    excluded: int


@dataclass(frozen=True)
class SlopeFit:
    """Convergence rates as positive numbers: ``error ~ cost**-slope_vs_cost ~ delta**slope_vs_delta``."""

    slope_vs_cost: float
    slope_vs_cost_ci: tuple
    slope_vs_delta: float
    slope_vs_delta_ci: tuple
    intercept_vs_cost: float


@dataclass
class ConvergenceReport:
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    samples_used: int = 0
    excluded: int = 0
    metadata: dict = field(default_factory=dict)
    sup_errors: dict = field(default_factory=dict, repr=False)
    costs: dict = field(default_factory=dict, repr=False)

    def row(self, scheme, delta, p):
        for r in self.rows:
            if r.scheme == scheme and r.delta == delta and r.p == p:
                return r
        raise KeyError((scheme, delta, p))

    def fit(self, scheme, p):
        return self.fits[(scheme, float(p))]

    def errors(self, scheme, p):
        rows = sorted((r for r in self.rows if r.scheme == scheme and r.p == p), key=lambda r: -r.delta)
        return np.array([r.delta for r in rows]), np.array([r.error for r in rows])


def _ols_slope(x, y):
    if len(x) < 2:
        return math.nan, math.nan
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


def _lp(errs, p):
    return np.mean(errs**p, axis=-1) ** (1.0 / p)


def summarize(config, sup_errors, costs, excluded):
    """Aggregate per-sample sup errors and costs into a report.

    ``sup_errors[(scheme, delta)]`` and ``costs[(scheme, delta)]`` are arrays
    over the retained samples, in sample order.
    """
    report = ConvergenceReport(samples_used=0, excluded=excluded, sup_errors=sup_errors, costs=costs)
    if not sup_errors:
        return report
    m = len(next(iter(sup_errors.values())))
    report.samples_used = m
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 7])))
    boot_idx = rng.integers(0, m, size=(config.bootstrap, m))
    deltas = np.array(config.deltas)
    for scheme in config.schemes:
        e_mat = np.array([sup_errors[(scheme, d)] for d in config.deltas])
        c_mat = np.array([costs[(scheme, d)] for d in config.deltas], dtype=float)
        mean_cost = c_mat.mean(axis=1)
        cost_se = c_mat.std(axis=1, ddof=1) / math.sqrt(m) if m > 1 else np.zeros(len(deltas))
        boot_cost = c_mat[:, boot_idx].mean(axis=2)          # (D, B)
        for p in config.p_list:
            err = _lp(e_mat, p)
            boot_err = _lp(e_mat[:, boot_idx], p)             # (D, B)
            lo, hi = np.percentile(boot_err, [2.5, 97.5], axis=1)
            with np.errstate(divide="ignore"):
                s_cost, icpt = _ols_slope(mean_cost, err) if np.all(err > 0) else (math.nan, math.nan)
                s_delta, _ = _ols_slope(deltas, err) if np.all(err > 0) else (math.nan, math.nan)
            rate_cost, rate_delta = -s_cost, s_delta
            boot_rc, boot_rd = [], []
            if len(deltas) >= 2 and np.all(boot_err > 0):
                for b in range(config.bootstrap):
                    boot_rc.append(-_ols_slope(boot_cost[:, b], boot_err[:, b])[0])
                    boot_rd.append(_ols_slope(deltas, boot_err[:, b])[0])
            ci_c = tuple(np.percentile(boot_rc, [2.5, 97.5])) if boot_rc else (math.nan, math.nan)
            ci_d = tuple(np.percentile(boot_rd, [2.5, 97.5])) if boot_rd else (math.nan, math.nan)
            report.fits[(scheme, float(p))] = SlopeFit(rate_cost, ci_c, rate_delta, ci_d, icpt)
            for k, d in enumerate(config.deltas):
                report.rows.append(ReportRow(scheme, float(d), float(mean_cost[k]), float(cost_se[k]),
                                             float(p), float(err[k]), float(lo[k]), float(hi[k]),
                                             rate_cost, rate_delta, int(excluded)))
    return report


# ------------------------------------------------------------------- studies


def _simulate_chunk(args):
    """Worker: run the reference and all schemes on samples ``indices``."""
    config, problem, indices = args
    if problem is None:
        problem = config.resolve_problem()
    solvers = config.build_solvers(problem)
    reference = config.build_reference(problem)
    out = []
    for i in indices:
        path = NoisePath(config.seed, problem.lam, problem.horizon, index=i)
        try:
            ref = reference.simulate(path)
            errs, costs = [], []
            for _, solver in solvers:
                traj = solver.simulate(path)
                errs.append(coupled_sup_error(traj, ref, path))
                costs.append(traj.cost)
        except (BlowUpError, InversionError) as exc:
            log.warning("sample %d excluded: %s", i, exc)
            out.append((i, None, None))
            continue
        out.append((i, np.array(errs), np.array(costs)))
    return out


def _run_samples(config, problem, sample_fn):
    indices = list(range(config.samples))
    if config.workers > 1:
        if not isinstance(config.problem, str):
            raise ConfigError("parallel runs need a registry problem name")
        chunks = [indices[k::config.workers] for k in range(config.workers)]
        with ProcessPoolExecutor(config.workers) as pool:
            parts = list(pool.map(sample_fn, [(config, None, c) for c in chunks]))
        results = sorted((r for part in parts for r in part), key=lambda r: r[0])
    else:
        results = sample_fn((config, problem, indices))
    return results


def _check_exclusions(config, excluded):
    if excluded > MAX_EXCLUDED_FRACTION * config.samples:
        raise ExperimentFailure(
            f"{excluded} of {config.samples} samples blew up or failed inversion "
            f"(limit {MAX_EXCLUDED_FRACTION:.1%})")


def run_convergence_study(config):
    config.validate()
    problem = config.resolve_problem()
    keys = [(kind, d) for kind in config.schemes for d in config.deltas]
    results = _run_samples(config, problem, _simulate_chunk)
    kept = [r for r in results if r[1] is not None]
    excluded = len(results) - len(kept)
    _check_exclusions(config, excluded)
    errs = np.array([r[1] for r in kept]).reshape(len(kept), len(keys))
    costs = np.array([r[2] for r in kept]).reshape(len(kept), len(keys))
    sup_errors = {k: errs[:, j] for j, k in enumerate(keys)}
    cost_map = {k: costs[:, j] for j, k in enumerate(keys)}
    report = summarize(config, sup_errors, cost_map, excluded)
    report.metadata = {
        "problem": problem.name, "nu_fraction": config.nu_fraction,
        "reference_scheme": config.reference_scheme, "reference_delta": config.reference_delta,
        "seed": config.seed, "samples": config.samples,
    }
    return report


@dataclass(frozen=True)
class CostRow:
    scheme: str
    delta: float
    mean_cost: float
    cost_se: float
    ratio: float


def _cost_chunk(args):
    config, problem, indices = args
    if problem is None:
        problem = config.resolve_problem()
    solvers = config.build_solvers(problem)
    out = []
    for i in indices:
        path = NoisePath(config.seed, problem.lam, problem.horizon, index=i)
        try:
            out.append((i, None, np.array([s.simulate(path).cost for _, s in solvers])))
        except (BlowUpError, InversionError) as exc:
            log.warning("sample %d excluded: %s", i, exc)
            out.append((i, None, None))
    return out


def run_cost_study(config):
    """Mean number of steps per delta and its ratio to ``1/delta + lam T``."""
    config.validate(for_convergence=False)
    problem = config.resolve_problem()
    results = _run_samples(config, problem, _cost_chunk)
    kept = np.array([r[2] for r in results if r[2] is not None])
    _check_exclusions(config, len(results) - len(kept))
    rows = []
    keys = [(kind, d) for kind in config.schemes for d in config.deltas]
    for j, (kind, d) in enumerate(keys):
        c = kept[:, j].astype(float)
        mean = float(c.mean())
        se = float(c.std(ddof=1) / math.sqrt(c.size)) if c.size > 1 else 0.0
        rows.append(CostRow(kind, float(d), mean, se, mean / (1.0 / d + problem.lam * problem.horizon)))
    return rows


# ------------------------------------------------------------------- output


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def report_to_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def parse_report_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(ReportRow(
            rec["scheme"], *(float(rec[c]) for c in CSV_COLUMNS[1:-1]), int(rec["excluded"])))
    return ConvergenceReport(rows=rows)


def cost_rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("scheme", "delta", "mean_cost", "cost_se", "ratio"))
    for r in rows:
        writer.writerow([_fmt(v) for v in (r.scheme, r.delta, r.mean_cost, r.cost_se, r.ratio)])
    return buf.getvalue()


def plot_report(report, output, p=None):
    """Log-log error against mean cost, one series per scheme, with fitted lines."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ps = sorted({r.p for r in report.rows})
    if p is None:
        p = 2.0 if 2.0 in ps else (ps[0] if ps else 2.0)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for scheme in dict.fromkeys(r.scheme for r in report.rows):
        rows = sorted((r for r in report.rows if r.scheme == scheme and r.p == p), key=lambda r: r.mean_cost)
        cost = np.array([r.mean_cost for r in rows])
        err = np.array([r.error for r in rows])
        lo = np.array([r.error_ci_lo for r in rows])
        hi = np.array([r.error_ci_hi for r in rows])
        line = ax.errorbar(cost, err, yerr=[err - lo, hi - err], fmt="o", capsize=2,
                           label=f"{scheme} (rate {rows[0].slope_vs_cost:.2f})")
        if len(rows) >= 2 and np.all(err > 0):
            slope, icpt = np.polyfit(np.log(cost), np.log(err), 1)
            ax.plot(cost, np.exp(icpt) * cost**slope, "-", color=line[0].get_color())
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("mean number of steps")
    ax.set_ylabel(f"L^{p:g} sup error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    try:
        fig.savefig(output, format="svg")
    finally:
        plt.close(fig)


def emit_report(report, fmt, output):
    """Write the report as ``csv`` (plus a ``.meta.json`` sidecar) or ``svg-plot``."""
    output = Path(output)
    try:
        if fmt == "csv":
            output.write_text(report_to_csv(report))
            if report.metadata or report.fits:
                meta = dict(report.metadata)
                meta["samples_used"] = report.samples_used
                meta["excluded"] = report.excluded
                meta["fits"] = [dict(scheme=s, p=p, **asdict(f)) for (s, p), f in report.fits.items()]
                output.with_suffix(output.suffix + ".meta.json").write_text(
                    json.dumps(meta, indent=2, default=float))
        elif fmt == "svg-plot":
            plot_report(report, output)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise ExperimentFailure(f"cannot write {output}: {exc}") from None
    return output
