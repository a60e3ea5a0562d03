"""Synthetic measure-valued images: rotating unimodal rows, the crossing-fiber
phantom, two-point cartoon images, and noise injection.

Per-voxel densities are antipodally symmetrized von Mises-Fisher lobes;
the crossing phantom combines a straight and a circular-arc bundle whose
overlap voxels carry equal-weight bimodal mixtures, over an isotropic
background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image_grid import GridSpec
from .metric_space import MetricSpaceDiscretization
from .models import MeasureImage

__all__ = ["PhantomSpec", "make_unimodal", "make_phantom", "add_noise"]

DEFAULT_KAPPA = 20.0


@dataclass
class PhantomSpec:
    """What to generate.

    kind: "rotating" (1 x n row, main direction angle linear from 0 to
    angle_range degrees), "crossing" (two fiber bundles on a 15 x 15 grid),
    or "twopoint" (indicator embedding of a region U on the two-point
    space).
    """

    kind: str
    n: int = 12
    angle_range: float = 90.0
    grid_shape: tuple = (15, 15)
    kappa: float = DEFAULT_KAPPA
    region: str = "left"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rotating", "crossing", "twopoint"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.kappa <= 0:
            raise ValueError("concentration kappa must be positive")
        if self.n < 2:
            raise ValueError("rotating row needs n >= 2")


def make_unimodal(direction, kappa: float, space: MetricSpaceDiscretization):
    """Antipodally symmetrized von Mises-Fisher density on the space.

    u_k is proportional to exp(kappa <dir, z^k>) + exp(-kappa <dir, z^k>),
    normalized to unit weighted mass.  Works on the sphere (3-vectors) and
    the circle (2-vectors).
    """
    if kappa <= 0:
        raise ValueError("concentration kappa must be positive")
    z = space.embedded_points()
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    if direction.shape != (z.shape[1],):
        raise ValueError(f"direction has shape {direction.shape}, expected ({z.shape[1]},)")
    t = kappa * (z @ direction)
    # symmetrized and rescaled by exp(-kappa) for overflow safety
    dens = np.exp(t - kappa) + np.exp(-t - kappa)
    dens /= space.volumes @ dens
    return dens


def _bundle_masks(shape):
    """Straight band, circular-arc band, and per-voxel arc tangents."""
    rows, cols = shape
    rr, cc = np.meshgrid(np.arange(rows) + 0.5, np.arange(cols) + 0.5,
                         indexing="ij")
    straight = (rr >= 6.0) & (rr < 9.0)

    # arc through the grid center, tangent at ~60 degrees to the straight
    # bundle, radius 10 voxels, band width 3
    radius = 10.0
    ang = np.deg2rad(60.0 + 90.0)
    center = np.array([rows / 2.0 + radius * np.sin(ang),
                       cols / 2.0 + radius * np.cos(ang)])
    drr = rr - center[0]
    dcc = cc - center[1]
    dist = np.hypot(drr, dcc)
    arc = np.abs(dist - radius) <= 1.5

    # tangent of the circle at each voxel, as an in-plane unit 3-vector
    tr = -dcc / np.maximum(dist, 1e-12)
    tc = drr / np.maximum(dist, 1e-12)
    tangents = np.stack([tc, tr, np.zeros_like(tr)], axis=-1)
    return straight, arc, tangents


def make_phantom(spec: PhantomSpec, space: MetricSpaceDiscretization,
                 grid: GridSpec | None = None):
    """Generate a phantom image plus its ground-truth peak directions.

    Returns (image, ground_truth, info): ground_truth is a list with one
    entry per voxel (C-order) holding 0, 1 or 2 unit vectors; info carries
    extra metadata such as bundle masks or planted angles.
    """
    if spec.kind == "rotating":
        grid = grid or GridSpec((spec.n,))
        if grid.n != spec.n:
            raise ValueError("grid size does not match the rotating-row length")
        angles = np.deg2rad(spec.angle_range) * np.arange(spec.n) / (spec.n - 1)
        vals = np.empty((spec.n, space.l))
        gt = []
        dim = space.embedded_points().shape[1]
        for i, a in enumerate(angles):
            direction = np.array([np.cos(a), np.sin(a), 0.0])[:dim]
            vals[i] = make_unimodal(direction, spec.kappa, space)
            gt.append([direction])
        img = MeasureImage(vals.reshape(grid.shape + (space.l,)), grid, space)
        info = {"angles_deg": list(np.rad2deg(angles))}
        return img, gt, info

    if spec.kind == "crossing":
        grid = grid or GridSpec(spec.grid_shape)
        if grid.d != 2:
            raise ValueError("crossing phantom needs a 2-D grid")
        straight, arc, tangents = _bundle_masks(grid.shape)
        horizontal = np.array([1.0, 0.0, 0.0])
        uniform = np.full(space.l, 1.0 / space.total_volume)
        vals = np.empty(grid.shape + (space.l,))
        gt = []
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                dirs = []
                if straight[i, j]:
                    dirs.append(horizontal)
                if arc[i, j]:
                    dirs.append(tangents[i, j] / np.linalg.norm(tangents[i, j]))
                if not dirs:
                    vals[i, j] = uniform
                else:
                    dens = np.zeros(space.l)
                    for dd in dirs:
                        dens += make_unimodal(dd, spec.kappa, space)
                    dens /= len(dirs)
                    vals[i, j] = dens
                gt.append([d.copy() for d in dirs])
        img = MeasureImage(vals, grid, space)
        info = {"straight_mask": straight.astype(int).tolist(),
                "arc_mask": arc.astype(int).tolist()}
        return img, gt, info

    # twopoint: indicator embedding u = 1_U delta_0 + (1 - 1_U) delta_1
    if space.kind != "finite" or space.l != 2:
        raise ValueError("twopoint phantom needs the two-point finite space")
    grid = grid or GridSpec(spec.grid_shape)
    mask = _region_mask(spec.region, grid.shape)
    vals = np.empty(grid.shape + (2,))
    vals[..., 0] = mask
    vals[..., 1] = 1.0 - mask
    img = MeasureImage(vals, grid, space)
    gt = [[] for _ in range(grid.n)]
    info = {"region_mask": mask.astype(int).tolist()}
    return img, gt, info


def _region_mask(region: str, shape) -> np.ndarray:
    idx = np.indices(shape)[0]
    n0 = shape[0]
    if region == "left":
        return (idx < n0 // 2).astype(float)
    if region == "middle":
        return ((idx >= n0 // 4) & (idx < n0 - n0 // 4)).astype(float)
    raise ValueError(f"unknown region {region!r}")


def add_noise(img: MeasureImage, snr: float, seed: int = 0) -> MeasureImage:
    """Multiplicative per-entry noise with renormalization to the simplex.

    Each density is scaled by (1 + eps) with eps Gaussian of standard
    deviation 1/snr, clipped at zero, and the row mass renormalized.
    Deterministic under the seed.
    """
    if snr <= 0:
        raise ValueError("snr must be positive")
    rng = np.random.default_rng(seed)
    eps = rng.normal(scale=1.0 / snr, size=img.values.shape)
    vals = np.maximum(img.values * (1.0 + eps), 0.0)
    mass = vals @ img.space.volumes
    flat = mass <= 0
    if np.any(flat):
        vals[flat] = 1.0 / img.space.total_volume
        mass = vals @ img.space.volumes
    vals = vals / mass[..., None]
    return MeasureImage(vals, img.grid, img.space)
