"""Grid images and signed local flows between 4-adjacent pixels.

An image is a nonnegative grid of intensities with total mass 1.  A local
flow plan moves mass only between vertically or horizontally adjacent
pixels; applying a plan adds each pixel's net inflow and subtracts its net
outflow, so total mass is conserved even though individual pixels may go
negative.  Plans form a vector space: applying d1 then d2 equals applying
d1 + d2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tolerance for the unit-mass check on image construction.
MASS_TOL = 1e-9


class ShapeMismatchError(ValueError):
    """Operands describe grids of incompatible dimensions."""


class NormalizationError(ValueError):
    """Grid is not a unit-mass nonnegative intensity field."""


def _as_float_grid(values, name: str = "values") -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ShapeMismatchError(f"{name} must be a nonempty 2-D grid, got shape {a.shape}")
    return a


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass
class GridImage:
    """Nonnegative n x m intensity grid summing to 1 (within MASS_TOL)."""

    values: np.ndarray

    def __post_init__(self):
        a = _as_float_grid(self.values)
        if np.any(a < 0):
            raise NormalizationError("image intensities must be nonnegative")
        total = float(a.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise NormalizationError(f"total mass {total!r} is not 1 within {MASS_TOL}")
        self.values = _freeze(a.copy())

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class RawGrid:
    """Real-valued grid with total mass 1; entries may be negative.

    This is the codomain of flow application: mass is conserved but nothing
    keeps individual pixels nonnegative.
    """

    values: np.ndarray

    def __post_init__(self):
        a = _as_float_grid(self.values)
        total = float(a.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise NormalizationError(f"total mass {total!r} is not 1 within {MASS_TOL}")
        self.values = _freeze(a.copy())

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class MultiChannelImage:
    """Stack of nonnegative channel grids whose grand total mass is 1.

    Individual channels carry arbitrary nonnegative mass; only the sum over
    all channels is normalized.
    """

    channels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.channels, dtype=float)
        if a.ndim != 3 or a.size == 0:
            raise ShapeMismatchError(f"channels must be a nonempty (C, n, m) array, got shape {a.shape}")
        if np.any(a < 0):
            raise NormalizationError("channel intensities must be nonnegative")
        total = float(a.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise NormalizationError(f"grand total mass {total!r} is not 1 within {MASS_TOL}")
        self.channels = _freeze(a.copy())

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]

    @property
    def channel_masses(self) -> np.ndarray:
        return self.channels.sum(axis=(1, 2))


@dataclass
class LocalFlowPlan:
    """Signed net flows on the 4-adjacency edges of an n x m grid.

    vert[i, j] moves mass from pixel (i, j) to (i+1, j); horiz[i, j] from
    (i, j) to (i, j+1).  Negative entries move in the opposite direction.
    Flows across the image boundary do not exist, hence the (n-1) x m and
    n x (m-1) shapes.
    """

    vert: np.ndarray
    horiz: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vert, dtype=float)
        h = np.asarray(self.horiz, dtype=float)
        if v.ndim != 2 or h.ndim != 2:
            raise ShapeMismatchError("vert and horiz must be 2-D arrays")
        n, m = h.shape[0], v.shape[1]
        if n < 1 or m < 1:
            raise ShapeMismatchError("flow plan must describe a grid with at least one pixel")
        if v.shape != (n - 1, m) or h.shape != (n, m - 1):
            raise ShapeMismatchError(
                f"inconsistent flow shapes vert {v.shape}, horiz {h.shape}: "
                f"expected ({n - 1}, {m}) and ({n}, {m - 1})"
            )
        self.vert = _freeze(v.copy())
        self.horiz = _freeze(h.copy())

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "LocalFlowPlan":
        n, m = shape
        return cls(np.zeros((n - 1, m)), np.zeros((n, m - 1)))

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.horiz.shape[0], self.vert.shape[1])

    @property
    def num_coords(self) -> int:
        return self.vert.size + self.horiz.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.vert.ravel(), self.horiz.ravel()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, shape: tuple[int, int]) -> "LocalFlowPlan":
        n, m = shape
        nv = (n - 1) * m
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (nv + n * (m - 1),):
            raise ShapeMismatchError(f"vector of length {vec.shape} does not pack a {shape} flow plan")
        return cls(vec[:nv].reshape(n - 1, m), vec[nv:].reshape(n, m - 1))

    def scaled(self, c: float) -> "LocalFlowPlan":
        return LocalFlowPlan(c * self.vert, c * self.horiz)

    def __neg__(self) -> "LocalFlowPlan":
        return self.scaled(-1.0)


@dataclass
class EdgeFlow:
    """Nonnegative directed flows on ordered pairs of 4-adjacent pixels.

    down[i, j] ships from (i, j) to (i+1, j) and up[i, j] the reverse;
    right[i, j] ships from (i, j) to (i, j+1) and left[i, j] the reverse.
    Opposite directions are stored separately, so a pair may circulate mass
    both ways at positive total cost.
    """

    down: np.ndarray
    up: np.ndarray
    right: np.ndarray
    left: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.down, dtype=float)
        u = np.asarray(self.up, dtype=float)
        r = np.asarray(self.right, dtype=float)
        l = np.asarray(self.left, dtype=float)
        if d.ndim != 2 or r.ndim != 2:
            raise ShapeMismatchError("edge flows must be 2-D arrays")
        n, m = r.shape[0], d.shape[1]
        if d.shape != (n - 1, m) or r.shape != (n, m - 1):
            raise ShapeMismatchError(
                f"inconsistent edge-flow shapes down {d.shape}, right {r.shape}"
            )
        if u.shape != d.shape or l.shape != r.shape:
            raise ShapeMismatchError("paired directions must share a shape")
        for name, arr in (("down", d), ("up", u), ("right", r), ("left", l)):
            if np.any(arr < 0):
                raise ValueError(f"{name} flows must be nonnegative")
        self.down, self.up = _freeze(d.copy()), _freeze(u.copy())
        self.right, self.left = _freeze(r.copy()), _freeze(l.copy())

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "EdgeFlow":
        n, m = shape
        z_v = np.zeros((n - 1, m))
        z_h = np.zeros((n, m - 1))
        return cls(z_v, z_v.copy(), z_h, z_h.copy())

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.right.shape[0], self.down.shape[1])

    def total(self) -> float:
        return float(self.down.sum() + self.up.sum() + self.right.sum() + self.left.sum())


def _image_values(x) -> np.ndarray:
    if isinstance(x, (GridImage, RawGrid)):
        return x.values
    return _as_float_grid(x, "image")


def _apply_flow_values(a: np.ndarray, vert: np.ndarray, horiz: np.ndarray) -> np.ndarray:
    out = a.astype(float, copy=True)
    if vert.size:
        out[1:, :] += vert
        out[:-1, :] -= vert
    if horiz.size:
        out[:, 1:] += horiz
        out[:, :-1] -= horiz
    return out


def apply_flow(x, plan: LocalFlowPlan) -> RawGrid:
    """Redistribute the mass of ``x`` along the signed flows in ``plan``.

    Each pixel gains what its up/left neighbors push in and loses what it
    pushes out, so the total is preserved exactly up to float rounding.
    Destination pixels can go negative; the result is a RawGrid.
    """
    a = _image_values(x)
    if plan.image_shape != a.shape:
        raise ShapeMismatchError(f"plan for {plan.image_shape} applied to image of shape {a.shape}")
    return RawGrid(_apply_flow_values(a, plan.vert, plan.horiz))


def compose(d1: LocalFlowPlan, d2: LocalFlowPlan) -> LocalFlowPlan:
    """Plan equivalent to applying ``d1`` then ``d2`` (coordinatewise sum)."""
    if d1.image_shape != d2.image_shape:
        raise ShapeMismatchError(f"cannot compose plans for {d1.image_shape} and {d2.image_shape}")
    return LocalFlowPlan(d1.vert + d2.vert, d1.horiz + d2.horiz)


def l1_norm(plan: LocalFlowPlan) -> float:
    """Total moved mass |plan|_1, the transport cost of the plan under unit
    per-step cost."""
    return float(np.abs(plan.vert).sum() + np.abs(plan.horiz).sum())


def solve_flow_1d(x, xp) -> np.ndarray:
    """Unique flow vector turning 1-D distribution ``x`` into ``xp``.

    Entry i is the net mass crossing the boundary between cells i and i+1,
    which telescopes to cumsum(x)[i] - cumsum(xp)[i].  Its L1 norm is the
    1-Wasserstein distance between the two distributions.
    """
    xa = np.asarray(x, dtype=float)
    xpa = np.asarray(xp, dtype=float)
    if xa.ndim != 1 or xpa.ndim != 1:
        raise ShapeMismatchError("inputs must be 1-D distributions")
    if xa.shape != xpa.shape:
        raise ShapeMismatchError(f"length mismatch {xa.shape} vs {xpa.shape}")
    for name, arr in (("x", xa), ("xp", xpa)):
        if np.any(arr < 0):
            raise NormalizationError(f"{name} must be nonnegative")
        if abs(float(arr.sum()) - 1.0) > MASS_TOL:
            raise NormalizationError(f"{name} must sum to 1 within {MASS_TOL}")
    return (np.cumsum(xa) - np.cumsum(xpa))[:-1]


def flow_from_edge(g: EdgeFlow) -> LocalFlowPlan:
    """Net signed plan of a directed edge flow.

    Opposite directions on the same pixel pair cancel, so the plan's L1 norm
    never exceeds the edge flow's total and is strictly smaller whenever the
    flow circulates mass both ways.
    """
    return LocalFlowPlan(g.down - g.up, g.right - g.left)


def edge_from_flow(plan: LocalFlowPlan) -> EdgeFlow:
    """Directed edge flow shipping each net flow in its sign's direction.

    This is the minimal-total directed representation: its total equals the
    plan's L1 norm and flow_from_edge inverts it exactly.
    """
    return EdgeFlow(
        np.maximum(plan.vert, 0.0),
        np.maximum(-plan.vert, 0.0),
        np.maximum(plan.horiz, 0.0),
        np.maximum(-plan.horiz, 0.0),
    )
