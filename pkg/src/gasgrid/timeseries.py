"""Piecewise-linear time series used for boundary profiles, targets and controls."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Piecewise-linear function of time given by breakpoints.

    Evaluation between breakpoints is linear interpolation; outside the
    breakpoint range the series is extended with its end values (constant).
    """

    times: np.ndarray
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.values, other.values)

    __hash__ = object.__hash__

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if t.size == 0:
            raise ValueError("empty time series")
        if np.any(np.diff(t) <= 0):
            raise ValueError("breakpoint times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float, t0: float = 0.0) -> "TimeSeries":
        return cls(np.array([t0]), np.array([float(value)]))

    @classmethod
    def from_pairs(cls, pairs) -> "TimeSeries":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    def __call__(self, t) -> float | np.ndarray:
        return np.interp(t, self.times, self.values)

    def covers(self, t0: float, t1: float) -> bool:
        """True if the breakpoints span [t0, t1] (constant extension aside)."""
        return self.times[0] <= t0 and self.times[-1] >= t1

    def weights(self, t: float) -> np.ndarray:
        """Hat-function weights w with value(t) = w @ values.

        Exposes the (linear) dependence of an evaluation on the breakpoint
        values, which is what gradient assembly needs.
        """
        w = np.zeros_like(self.values)
        tk = self.times
        if t <= tk[0]:
            w[0] = 1.0
            return w
        if t >= tk[-1]:
            w[-1] = 1.0
            return w
        i = int(np.searchsorted(tk, t, side="right") - 1)
        s = (t - tk[i]) / (tk[i + 1] - tk[i])
        w[i] = 1.0 - s
        w[i + 1] = s
        return w

    def with_values(self, values) -> "TimeSeries":
        return TimeSeries(self.times.copy(), np.asarray(values, dtype=float))

    def scaled(self, factor: float) -> "TimeSeries":
        return TimeSeries(self.times.copy(), self.values * factor)


@dataclass(frozen=True, eq=False)
class BoolSeries:
    """Right-continuous piecewise-constant boolean schedule (valve open/closed)."""

    times: np.ndarray
    states: np.ndarray = field(default=None)

    def __eq__(self, other):
        if not isinstance(other, BoolSeries):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.states, other.states)

    __hash__ = object.__hash__

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=bool)
        if t.ndim != 1 or t.shape != s.shape or t.size == 0:
            raise ValueError("times and states must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("schedule times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @classmethod
    def always(cls, state: bool) -> "BoolSeries":
        return cls(np.array([0.0]), np.array([bool(state)]))

    def __call__(self, t: float) -> bool:
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        return bool(self.states[max(i, 0)])
