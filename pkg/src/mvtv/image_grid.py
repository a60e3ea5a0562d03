"""Spatial voxel grid and staggered finite differences.

Gradients live on the extended dual-node grid: along each axis t, forward
differences sit on the faces between voxels, and the component (Du)_t at a
dual node (half-integer coordinates in every axis) averages the 2^(d-1)
adjacent axis-t face differences, with zero (Neumann) extension beyond the
boundary.  In one dimension there is no averaging.

This placement makes the discrete TV of the coupled norms exactly
invariant under 90/180/270-degree grid rotations (dual nodes map to dual
nodes and the averaged components transform as vectors), while a straight
axis-aligned edge of k voxel faces contributes exactly k times its jump.
``neg_div`` is the exact transpose, the negative divergence with vanishing
boundary values: <grad u, p> = <u, neg_div p> holds to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["GridSpec", "grad", "neg_div"]


@dataclass(frozen=True)
class GridSpec:
    """Uniform voxel grid with shape (n_1, ..., n_d), d in {1, 2, 3}."""

    shape: tuple
    spacing: float = 1.0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if not 1 <= len(shape) <= 3:
            raise ValueError("grid dimension must be 1, 2 or 3")
        if any(s < 1 for s in shape):
            raise ValueError("all grid extents must be >= 1")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dual_shape(self) -> tuple:
        """Dual-node grid: one more node than voxels along every axis."""
        return tuple(s + 1 for s in self.shape)

    @property
    def n_dual(self) -> int:
        return int(np.prod(self.dual_shape))


def _axis_diff(u: np.ndarray, ax: int, absolute: bool) -> np.ndarray:
    lo = [slice(None)] * u.ndim
    hi = [slice(None)] * u.ndim
    lo[ax] = slice(None, -1)
    hi[ax] = slice(1, None)
    if absolute:
        return u[tuple(hi)] + u[tuple(lo)]
    return u[tuple(hi)] - u[tuple(lo)]


def _avg_extend(v: np.ndarray, ax: int) -> np.ndarray:
    """[1/2, 1/2] stencil with zero extension: length n -> n + 1 along ax."""
    shape = list(v.shape)
    shape[ax] += 1
    out = np.zeros(shape)
    lo = [slice(None)] * v.ndim
    hi = [slice(None)] * v.ndim
    lo[ax] = slice(None, -1)
    hi[ax] = slice(1, None)
    out[tuple(lo)] += 0.5 * v
    out[tuple(hi)] += 0.5 * v
    return out


def _avg_extend_T(w: np.ndarray, ax: int) -> np.ndarray:
    """Transpose of _avg_extend: length n + 1 -> n along ax."""
    lo = [slice(None)] * w.ndim
    hi = [slice(None)] * w.ndim
    lo[ax] = slice(None, -1)
    hi[ax] = slice(1, None)
    return 0.5 * (w[tuple(lo)] + w[tuple(hi)])


def _grad_impl(u: np.ndarray, grid: GridSpec, absolute: bool) -> np.ndarray:
    d = grid.d
    lead = u.shape[:-d]
    nlead = len(lead)
    out = np.zeros(lead + (d,) + grid.dual_shape)
    h = grid.spacing
    for t in range(d):
        ax = nlead + t
        if grid.shape[t] > 1:
            v = _axis_diff(u, ax, absolute) / h
        else:
            continue
        for s in range(d):
            if s != t:
                v = _avg_extend(v, nlead + s)
        # place the face values at interior dual positions along axis t
        dst = [slice(None)] * out.ndim
        dst[nlead] = t
        dst[nlead + 1 + t] = slice(1, -1)
        out[tuple(dst)] = v
    return out


def grad(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Staggered gradient of u, shape (..., *shape) -> (..., d, *dual_shape)."""
    u = np.asarray(u, dtype=float)
    if u.shape[u.ndim - grid.d:] != grid.shape or u.ndim < grid.d:
        raise ValueError(f"field shape {u.shape} does not match grid {grid.shape}")
    return _grad_impl(u, grid, absolute=False)


def neg_div(p: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Exact adjoint of :func:`grad` (negative divergence, vanishing boundary).

    Input shape (..., d, *dual_shape); output shape (..., *shape).
    """
    p = np.asarray(p, dtype=float)
    d = grid.d
    want = (d,) + grid.dual_shape
    if p.ndim < d + 1 or p.shape[p.ndim - d - 1:] != want:
        raise ValueError(f"dual field shape {p.shape} does not match {want}")
    lead = p.shape[: p.ndim - d - 1]
    nlead = len(lead)
    out = np.zeros(lead + grid.shape)
    h = grid.spacing
    for t in range(d):
        if grid.shape[t] <= 1:
            continue
        src = [slice(None)] * p.ndim
        src[nlead] = t
        src[nlead + 1 + t] = slice(1, -1)
        v = p[tuple(src)]
        for s in range(d):
            if s != t:
                v = _avg_extend_T(v, nlead + s)
        v = v / h
        lo = [slice(None)] * out.ndim
        hi = [slice(None)] * out.ndim
        lo[nlead + t] = slice(None, -1)
        hi[nlead + t] = slice(1, None)
        out[tuple(hi)] += v
        out[tuple(lo)] -= v
    return out


def grad_abs_rowsums(grid: GridSpec) -> np.ndarray:
    """Row sums of |grad| per dual-node component (preconditioning helper)."""
    return _grad_impl(np.ones(grid.shape), grid, absolute=True)


def negdiv_abs_colsums(grid: GridSpec) -> np.ndarray:
    """Column sums of |grad| per voxel (preconditioning helper)."""
    d = grid.d
    out = np.zeros(grid.shape)
    h = grid.spacing
    ones = [np.ones(grid.dual_shape) for _ in range(d)]
    for t in range(d):
        if grid.shape[t] <= 1:
            continue
        src = [slice(None)] * d
        src[t] = slice(1, -1)
        v = ones[t][tuple(src)]
        for s in range(d):
            if s != t:
                v = _avg_extend_T(v, s)
        v = v / h
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[t] = slice(None, -1)
        hi[t] = slice(1, None)
        out[tuple(hi)] += v
        out[tuple(lo)] += v
    return out
