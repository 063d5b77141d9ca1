"""Continuous piecewise-linear scalar functions.

A function is stored as its strictly increasing breakpoints, one slope per
piece (``len(breakpoints) + 1`` pieces), and the value at the first
breakpoint.  Values anywhere follow by integrating the slopes, so
continuity holds by construction.  Derivatives at breakpoints take the
right-hand slope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateSlopesError,
    InvalidAssignmentError,
    InvalidBreakpointsError,
)

SLOPE_TOL = 1e-12


@dataclass(frozen=True)
class PwlScalar:
    """Continuous piecewise-linear function of one variable.

    Parameters
    ----------
    breakpoints : tuple of float
        Strictly increasing kink locations, at least one.
    slopes : tuple of float
        One slope per piece, left to right; adjacent pieces must have
        different slopes so every breakpoint is a genuine kink.
    anchor_value : float
        Function value at ``breakpoints[0]``.
    """

    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    anchor_value: float
    _bp_values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        sl = np.asarray(self.slopes, dtype=np.float64)
        if bp.ndim != 1 or bp.size < 1:
            raise InvalidBreakpointsError("need at least one breakpoint")
        if not np.all(np.isfinite(bp)):
            raise InvalidBreakpointsError("breakpoints must be finite")
        if bp.size > 1 and not np.all(np.diff(bp) > 0.0):
            raise InvalidBreakpointsError(
                f"breakpoints must be strictly increasing, got {bp.tolist()}"
            )
        if sl.size != bp.size + 1:
            raise InvalidAssignmentError(
                f"{bp.size} breakpoints need {bp.size + 1} slopes, got {sl.size}"
            )
        if not np.all(np.isfinite(sl)) or not np.isfinite(self.anchor_value):
            raise InvalidAssignmentError("slopes and anchor must be finite")
        if np.any(np.abs(np.diff(sl)) <= SLOPE_TOL):
            raise InvalidAssignmentError(
                "adjacent pieces must change slope at every breakpoint"
            )
        object.__setattr__(self, "breakpoints", tuple(float(v) for v in bp))
        object.__setattr__(self, "slopes", tuple(float(v) for v in sl))
        object.__setattr__(self, "anchor_value", float(self.anchor_value))
        # function values at the breakpoints, by integrating interior slopes
        vals = np.empty(bp.size)
        vals[0] = self.anchor_value
        if bp.size > 1:
            vals[1:] = self.anchor_value + np.cumsum(sl[1:-1] * np.diff(bp))
        object.__setattr__(self, "_bp_values", vals)

    @property
    def leftmost_slope(self) -> float:
        return self.slopes[0]

    @property
    def slope_values(self) -> tuple[float, ...]:
        """Distinct slopes in order of first appearance."""
        seen: list[float] = []
        for s in self.slopes:
            if not any(abs(s - t) <= SLOPE_TOL for t in seen):
                seen.append(s)
        return tuple(seen)

    def _piece(self, x):
        return np.searchsorted(np.asarray(self.breakpoints), x, side="right")

    def value(self, x):
        """Evaluate at a scalar or array ``x``."""
        x = np.asarray(x, dtype=np.float64)
        p = self._piece(x)
        base = np.maximum(p - 1, 0)
        bp = np.asarray(self.breakpoints)
        sl = np.asarray(self.slopes)
        out = self._bp_values[base] + sl[p] * (x - bp[base])
        return float(out) if out.ndim == 0 else out

    __call__ = value

    def deriv(self, x):
        """Right-hand derivative at a scalar or array ``x``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.asarray(self.slopes)[self._piece(x)]
        return float(out) if out.ndim == 0 else out

    def distance_to_breakpoint(self, x):
        """Distance from ``x`` to the nearest breakpoint (scalar or array)."""
        x = np.asarray(x, dtype=np.float64)
        d = np.min(np.abs(x[..., np.newaxis] - np.asarray(self.breakpoints)), axis=-1)
        return float(d) if d.ndim == 0 else d

    def scale(self, factor: float) -> "PwlScalar":
        """The function ``factor * f`` (factor must be nonzero)."""
        if factor == 0.0:
            raise DegenerateSlopesError("scaling by zero collapses all slopes")
        return PwlScalar(
            self.breakpoints,
            tuple(factor * s for s in self.slopes),
            factor * self.anchor_value,
        )

    def to_json(self) -> dict:
        return {
            "breakpoints": list(self.breakpoints),
            "slopes": list(self.slopes),
            "anchor_value": self.anchor_value,
        }

    @staticmethod
    def from_json(obj: dict) -> "PwlScalar":
        return PwlScalar(
            tuple(obj["breakpoints"]), tuple(obj["slopes"]), obj["anchor_value"]
        )


def make_relu_k(nodes: Sequence[float]) -> PwlScalar:
    """Multi-node rectifier: slopes alternate 0, 1, 0, 1, ... left to right.

    With a single node at 0 this is ReLU; with nodes (-1, 1) it evaluates
    to HardTanh(x) + 1.
    """
    nodes = tuple(nodes)
    slopes = tuple(float(i % 2) for i in range(len(nodes) + 1))
    return PwlScalar(nodes, slopes, 0.0)


def make_sigma_k(nodes: Sequence[float]) -> PwlScalar:
    """Unit-slope zigzag: slopes alternate +1, -1, ... left to right.

    Equals ``x - 2 * make_relu_k(nodes)(x)``; with a single node at 0 it
    is ``-|x|``.
    """
    nodes = tuple(nodes)
    slopes = tuple(1.0 if i % 2 == 0 else -1.0 for i in range(len(nodes) + 1))
    return PwlScalar(nodes, slopes, float(nodes[0]))


def make_two_slope(
    alpha: float,
    beta: float,
    nodes: Sequence[float],
    start_with_alpha: bool = True,
    anchor_value: float = 0.0,
) -> PwlScalar:
    """Alternating two-slope function (e.g. LeakyReLU, |x|, HardTanh)."""
    if abs(alpha - beta) <= SLOPE_TOL:
        raise DegenerateSlopesError(
            f"slopes {alpha!r} and {beta!r} are not distinct"
        )
    first, second = (alpha, beta) if start_with_alpha else (beta, alpha)
    slopes = tuple(first if i % 2 == 0 else second for i in range(len(nodes) + 1))
    return PwlScalar(tuple(nodes), slopes, anchor_value)


def make_three_slope(
    slope_values: Sequence[float],
    nodes: Sequence[float],
    assignment: Sequence[float],
    anchor_value: float = 0.0,
) -> PwlScalar:
    """Function over an up-to-three-value slope set with explicit assignment.

    ``assignment`` gives the slope of each piece left to right and every
    entry must match one of ``slope_values`` to within ``SLOPE_TOL``.
    """
    values = tuple(float(v) for v in slope_values)
    if len(values) != 3:
        raise DegenerateSlopesError(f"need exactly 3 slope values, got {len(values)}")
    for i in range(3):
        for j in range(i + 1, 3):
            if abs(values[i] - values[j]) <= SLOPE_TOL:
                raise DegenerateSlopesError(
                    f"slope values {values[i]!r} and {values[j]!r} coincide"
                )
    for s in assignment:
        if not any(abs(s - v) <= SLOPE_TOL for v in values):
            raise InvalidAssignmentError(
                f"assigned slope {s!r} is not in the slope set {values}"
            )
    return PwlScalar(tuple(nodes), tuple(float(s) for s in assignment), anchor_value)


def slope_violation(
    f: PwlScalar, allowed: Sequence[float], tol: float = SLOPE_TOL
) -> float | None:
    """First slope of ``f`` not within ``tol`` of any allowed value, if any."""
    for s in f.slopes:
        if not any(abs(s - a) <= tol for a in allowed):
            return s
    return None
