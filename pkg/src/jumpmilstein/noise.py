"""Coupled realisations of the driving noise (W, N).

A :class:`NoisePath` owns one Brownian path and one Poisson jump record.
Brownian values are produced on demand at lattice times ``k * 2**-40`` by a
dyadic Brownian-bridge construction whose Gaussian draws are keyed by the
lattice point itself.  ``W_t`` is therefore a pure function of
``(seed, sample index, t)``: any two schemes that look at the same time see
the same number, whatever else they asked for and in whichever order.

Seed derivation: sample ``i`` of experiment seed ``s`` draws its jump times
from ``SeedSequence([s, i, 1])`` (a Philox stream) and keys its Brownian
values with ``SeedSequence([s, i, 2])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .exceptions import ParameterError

JUMPS_TAG = 1
BROWNIAN_TAG = 2

TICKS_PER_UNIT = K.TICKS_PER_UNIT


def to_ticks(t):
    """Quantize a time (or array of times) to the 2**-40 lattice."""
    if np.ndim(t) == 0:
        return int(round(float(t) * TICKS_PER_UNIT))
    return np.rint(np.asarray(t, dtype=float) * TICKS_PER_UNIT).astype(np.int64)


def from_ticks(k):
    if np.ndim(k) == 0:
        return int(k) * K.TICK
    return np.asarray(k, dtype=np.int64) * K.TICK


def quantize(t):
    return from_ticks(to_ticks(t))


def stream_key(seed, index, tag):
    return np.random.SeedSequence([int(seed), int(index), int(tag)])


@dataclass(frozen=True)
class JumpTimes:
    times: np.ndarray
    ticks: np.ndarray
    lam: float
    horizon: float

    def __len__(self):
        return int(self.ticks.size)

    def count(self, t, left=False):
        """N_t (or N_{t-} with ``left=True``)."""
        side = "left" if left else "right"
        return np.searchsorted(self.ticks, to_ticks(t), side=side)


def sample_jump_times(lam, horizon, stream):
    """Jump times of a rate-``lam`` Poisson process on ``(0, horizon]``.

    ``stream`` is a ``numpy.random.Generator``.  Times are cumulative sums of
    exponential interarrivals and are quantized to the time lattice.
    """
    if lam < 0:
        raise ParameterError(f"intensity must be non-negative, got {lam}")
    if horizon <= 0:
        raise ParameterError(f"horizon must be positive, got {horizon}")
    if lam == 0:
        empty = np.empty(0)
        return JumpTimes(empty, np.empty(0, np.int64), float(lam), float(horizon))
    scale = 1.0 / lam
    mean = lam * horizon
    chunk = int(mean + 6.0 * np.sqrt(mean) + 8)
    arrivals = np.cumsum(stream.exponential(scale, size=chunk))
    while arrivals[-1] <= horizon:
        more = arrivals[-1] + np.cumsum(stream.exponential(scale, size=chunk))
        arrivals = np.concatenate([arrivals, more])
    arrivals = arrivals[arrivals <= horizon]

    t_end = to_ticks(horizon)
    ticks = np.clip(to_ticks(arrivals), 1, t_end)
    # two arrivals inside one 2**-40 cell: keep them distinct grid points
    for k in range(1, ticks.size):
        if ticks[k] <= ticks[k - 1]:
            ticks[k] = ticks[k - 1] + 1
    if ticks.size and ticks[-1] > t_end:
        raise ParameterError("jump times overflow the horizon after quantization")
    return JumpTimes(from_ticks(ticks), ticks, float(lam), float(horizon))


@dataclass
class NoisePath:
    """One realisation of (W, N) for sample ``index`` of experiment ``seed``."""

    seed: int
    lam: float
    horizon: float
    index: int = 0
    jumps: JumpTimes = field(init=False)
    brownian_key: np.uint64 = field(init=False)
    root_ticks: int = field(init=False)
    _cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ParameterError(f"horizon must be positive, got {self.horizon}")
        t_end = to_ticks(self.horizon)
        if t_end * K.TICK != self.horizon:
            raise ParameterError(f"horizon {self.horizon!r} is not on the 2**-40 time lattice")
        stream = np.random.Generator(np.random.Philox(stream_key(self.seed, self.index, JUMPS_TAG)))
        self.jumps = sample_jump_times(self.lam, self.horizon, stream)
        self.brownian_key = stream_key(self.seed, self.index, BROWNIAN_TAG).generate_state(1, np.uint64)[0]
        root = 1
        while root < t_end:
            root <<= 1
        self.root_ticks = root
        self._cache[0] = 0.0

    @property
    def t_end(self):
        return to_ticks(self.horizon)

    @property
    def identity(self):
        return (int(self.seed), int(self.index), float(self.lam), float(self.horizon))

    @property
    def known(self):
        """Cached (time, W) pairs in time order."""
        return [(from_ticks(k), self._cache[k]) for k in sorted(self._cache)]

    def _check(self, tick):
        if tick < 0 or tick > self.t_end:
            raise ParameterError(f"time {from_ticks(tick)!r} outside [0, {self.horizon!r}]")

    def brownian_at(self, t):
        tick = to_ticks(t)
        self._check(tick)
        try:
            return self._cache[tick]
        except KeyError:
            value = float(K.brownian_value(self.brownian_key, np.int64(tick), np.int64(self.root_ticks)))
            self._cache[tick] = value
            return value

    def brownian_at_ticks(self, ticks):
        """Vectorized lookup that bypasses the cache (values are identical)."""
        ticks = np.asarray(ticks, dtype=np.int64)
        if ticks.size and (ticks.min() < 0 or ticks.max() > self.t_end):
            raise ParameterError("query times outside the path horizon")
        return K.brownian_values(self.brownian_key, ticks, np.int64(self.root_ticks))

    def increment(self, s, t):
        if s > t:
            raise ParameterError(f"increment needs s <= t, got s={s!r}, t={t!r}")
        return self.brownian_at(t) - self.brownian_at(s)

    def poisson_count(self, t, left=False):
        return int(self.jumps.count(t, left=left))


def brownian_at(path, t):
    return path.brownian_at(t)


def increment(path, s, t):
    return path.increment(s, t)
