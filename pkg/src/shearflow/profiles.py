"""Piecewise-constant shear profiles and conservation-exact moves on them.

A profile assigns one horizontal velocity value to each segment of a
partition of the wall-to-wall interval [0, 1].  Three moves transform a
profile while preserving its momentum ``sum(U_k * len_k)`` and kinetic
energy ``sum(U_k^2 * len_k / 2)`` exactly:

* ``Refine``    — split one segment in two (values unchanged),
* ``Transpose`` — swap two adjacent segments together with their lengths,
* ``Collide``   — elastic momentum/energy exchange between two adjacent
  segments, with segment lengths acting as masses:

      u0 = (m1*u1 + m2*u2) / (m1 + m2)
      v1 = 2*u0 - u1
      v2 = 2*u0 - u2

Transpose and Collide are involutions; an equal-mass Collide degenerates to
a plain value swap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


@dataclass(frozen=True)
class StepProfile:
    """A piecewise-constant function on [0, 1].

    ``breakpoints`` are strictly increasing with first element 0 and last
    element 1; ``values[k]`` is the function value on
    ``[breakpoints[k], breakpoints[k + 1])``.
    """

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        bp = tuple(float(b) for b in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if len(bp) < 2:
            raise ValueError("need at least one segment")
        if len(vals) != len(bp) - 1:
            raise ValueError(
                f"{len(bp)} breakpoints require {len(bp) - 1} values, got {len(vals)}"
            )
        if bp[0] != 0.0 or bp[-1] != 1.0:
            raise ValueError("breakpoints must start at 0 and end at 1")
        if any(b1 >= b2 for b1, b2 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("profile values must be finite")

    @property
    def n_segments(self) -> int:
        return len(self.values)

    def segment_lengths(self) -> np.ndarray:
        bp = np.asarray(self.breakpoints)
        return np.diff(bp)

    def __call__(self, x: np.ndarray | float) -> np.ndarray:
        """Evaluate the step function at ``x`` (right-continuous, 1.0 maps
        to the last segment)."""
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.breakpoints, x, side="right") - 1
        idx = np.clip(idx, 0, self.n_segments - 1)
        return np.asarray(self.values)[idx]

    def to_json(self) -> str:
        return json.dumps(
            {"breakpoints": list(self.breakpoints), "values": list(self.values)}
        )

    @classmethod
    def from_json(cls, text: str) -> "StepProfile":
        data = json.loads(text)
        if not isinstance(data, dict) or set(data) != {"breakpoints", "values"}:
            raise ValueError("profile JSON must have exactly the keys 'breakpoints' and 'values'")
        return cls(tuple(data["breakpoints"]), tuple(data["values"]))


@dataclass(frozen=True)
class Refine:
    """Split segment ``segment`` at fraction ``ratio`` of its length."""

    segment: int
    ratio: float


@dataclass(frozen=True)
class Transpose:
    """Swap segments ``segment`` and ``segment + 1`` together with lengths."""

    segment: int


@dataclass(frozen=True)
class Collide:
    """Elastic value exchange between segments ``segment`` and ``segment + 1``."""

    segment: int


Move = Union[Refine, Transpose, Collide]


def collide_values(m1: float, u1: float, m2: float, u2: float) -> tuple[float, float]:
    """Post-collision values for masses ``m1, m2`` and incoming values ``u1, u2``."""
    u0 = (m1 * u1 + m2 * u2) / (m1 + m2)
    return 2.0 * u0 - u1, 2.0 * u0 - u2


def momentum(p: StepProfile) -> float:
    """Integral of the profile over [0, 1]."""
    return float(np.dot(p.values, p.segment_lengths()))


def energy(p: StepProfile) -> float:
    """Integral of ``value^2 / 2`` over [0, 1]."""
    vals = np.asarray(p.values)
    return float(0.5 * np.dot(vals * vals, p.segment_lengths()))


def l2_distance(p: StepProfile, q: StepProfile) -> float:
    """Exact L2([0, 1]) distance between two step profiles."""
    merged = np.union1d(p.breakpoints, q.breakpoints)
    mids = 0.5 * (merged[:-1] + merged[1:])
    dv = p(mids) - q(mids)
    return float(np.sqrt(np.sum(dv * dv * np.diff(merged))))


def _validate_pair_index(p: StepProfile, k: int) -> None:
    if not 0 <= k < p.n_segments - 1:
        raise ValueError(
            f"segment pair index {k} out of range for {p.n_segments} segments"
        )


def apply_move(p: StepProfile, move: Move) -> StepProfile:
    """Apply one move, returning a new profile.

    Segment indices are 0-based; ``Transpose(k)`` and ``Collide(k)`` act on
    the pair ``(k, k + 1)``.
    """
    bp = list(p.breakpoints)
    vals = list(p.values)
    if isinstance(move, Refine):
        k, lam = move.segment, move.ratio
        if not 0 <= k < p.n_segments:
            raise ValueError(f"segment index {k} out of range for {p.n_segments} segments")
        if not 0.0 < lam < 1.0:
            raise ValueError(f"refine ratio must lie strictly inside (0, 1), got {lam}")
        cut = bp[k] + lam * (bp[k + 1] - bp[k])
        if not bp[k] < cut < bp[k + 1]:
            raise ValueError(f"refine ratio {lam} does not produce a new interior point")
        bp.insert(k + 1, cut)
        vals.insert(k + 1, vals[k])
    elif isinstance(move, Transpose):
        k = move.segment
        _validate_pair_index(p, k)
        len2 = bp[k + 2] - bp[k + 1]
        bp[k + 1] = bp[k] + len2
        vals[k], vals[k + 1] = vals[k + 1], vals[k]
    elif isinstance(move, Collide):
        k = move.segment
        _validate_pair_index(p, k)
        m1 = bp[k + 1] - bp[k]
        m2 = bp[k + 2] - bp[k + 1]
        vals[k], vals[k + 1] = collide_values(m1, vals[k], m2, vals[k + 1])
    else:
        raise TypeError(f"unknown move {move!r}")
    return StepProfile(tuple(bp), tuple(vals))


def apply_moves(p: StepProfile, moves: Sequence[Move]) -> StepProfile:
    for move in moves:
        p = apply_move(p, move)
    return p


def normalize(p: StepProfile, tol: float = 0.0) -> StepProfile:
    """Merge adjacent segments whose values differ by at most ``tol``.

    The merged value is the length-weighted mean, so momentum is preserved
    exactly; the L2 change is bounded by ``tol``.  Already-normalized
    profiles pass through untouched (idempotent).
    """
    if tol < 0.0:
        raise ValueError("tol must be non-negative")
    bp = list(p.breakpoints)
    vals = list(p.values)
    out_bp = [bp[0]]
    out_vals: list[float] = []
    run_value = vals[0]
    run_start = bp[0]
    run_len = bp[1] - bp[0]
    merged_any = False
    for k in range(1, len(vals)):
        seg_len = bp[k + 1] - bp[k]
        if abs(vals[k] - run_value) <= tol:
            run_value = (run_len * run_value + seg_len * vals[k]) / (run_len + seg_len)
            run_len += seg_len
            merged_any = True
        else:
            out_bp.append(bp[k])
            out_vals.append(run_value)
            run_value = vals[k]
            run_start = bp[k]
            run_len = seg_len
    out_bp.append(bp[-1])
    out_vals.append(run_value)
    del run_start
    if not merged_any:
        return p
    return StepProfile(tuple(out_bp), tuple(out_vals))


def discretize(x: np.ndarray, u: np.ndarray, n_segments: int) -> StepProfile:
    """Project a tabulated profile onto ``n_segments`` uniform cells.

    ``(x, u)`` tabulate a function on a grid covering [0, 1]; the function is
    taken as the piecewise-linear interpolant of the samples.  Each output
    value is the exact cell average of that interpolant — the L2-optimal
    constant on the cell — so the output momentum equals the integral of the
    interpolant exactly (up to roundoff).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim != 1 or x.shape != u.shape or x.size < 2:
        raise ValueError("x and u must be 1-D arrays of equal length >= 2")
    if np.any(np.diff(x) <= 0.0):
        raise ValueError("sample grid must be strictly increasing")
    if x[0] > 0.0 or x[-1] < 1.0:
        raise ValueError("sample grid must cover [0, 1]")
    if n_segments < 1:
        raise ValueError("need at least one output segment")
    edges = np.linspace(0.0, 1.0, n_segments + 1)
    grid = np.union1d(x, edges)
    grid = grid[(grid >= 0.0) & (grid <= 1.0)]
    ug = np.interp(grid, x, u)
    piece = 0.5 * (ug[:-1] + ug[1:]) * np.diff(grid)
    # np.union1d returns sorted unique values, so every edge is present.
    cut = np.searchsorted(grid, edges[:-1])
    sums = np.add.reduceat(piece, cut)
    averages = sums / np.diff(edges)
    return StepProfile(tuple(edges), tuple(averages))


# --- move (de)serialization -------------------------------------------------

def moves_to_jsonable(moves: Sequence[Move]) -> list[dict]:
    out = []
    for move in moves:
        if isinstance(move, Refine):
            out.append({"op": "refine", "k": move.segment, "lambda": move.ratio})
        elif isinstance(move, Transpose):
            out.append({"op": "transpose", "k": move.segment})
        elif isinstance(move, Collide):
            out.append({"op": "collide", "k": move.segment})
        else:
            raise TypeError(f"unknown move {move!r}")
    return out


def moves_from_jsonable(data: Sequence[dict]) -> tuple[Move, ...]:
    moves: list[Move] = []
    for item in data:
        op = item.get("op")
        if op == "refine":
            moves.append(Refine(int(item["k"]), float(item["lambda"])))
        elif op == "transpose":
            moves.append(Transpose(int(item["k"])))
        elif op == "collide":
            moves.append(Collide(int(item["k"])))
        else:
            raise ValueError(f"unknown move op {op!r}")
    return tuple(moves)
