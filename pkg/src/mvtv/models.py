"""Discretized variational models for measure-valued images.

Two models are assembled as saddle-point problems over a voxel grid and a
metric-space discretization:

* W1-TV: per-voxel Wasserstein-1 data term, written through
  Kantorovich-Rubinstein duality as <u - f, p0>_b with Lipschitz-constrained
  p0, plus the KR total variation <Du, p>_b with Lipschitz-constrained p.
* L2-TV: quadratic data term <u - f, u - f>_b with the same TV structure
  (the ROF analogue).

Primal variables are the image u (per-voxel densities on the weighted
simplex) and the Lagrange multipliers of the gradient equality constraints
A g = S p; dual variables are (p, g) and, for W1-TV, (p0, g0).

``primal_energy`` evaluates the model energy with the exact per-voxel W1
data term (transport LP) and the TV term through a certified inner
maximization; ``dual_energy`` turns any dual iterate into a rigorous lower
bound by eliminating the gradients, rescaling into the constraint set, and
minimizing the Lagrangian exactly over the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image_grid import GridSpec, grad, neg_div
from .lipschitz import CertifiedSup, LipschitzOperator, block_norm, _to_blocks
from .metric_space import MetricSpaceDiscretization
from .proximal import project_weighted_simplex
from .transport import w1_lp

__all__ = [
    "MeasureImage",
    "DualFields",
    "Energy",
    "SaddleProblem",
    "build_w1tv",
    "build_l2tv",
    "pair_b",
    "primal_energy",
    "dual_energy",
    "tv_kr",
    "tv_kr_bracket",
]


@dataclass
class MeasureImage:
    """Measure-valued image: per-voxel densities w.r.t. the cell volumes.

    values has shape (*grid.shape, l); row i is the density of the measure
    at voxel i, so the mass on cell k is volumes[k] * values[..., k].
    """

    values: np.ndarray
    grid: GridSpec
    space: MetricSpaceDiscretization

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        want = self.grid.shape + (self.space.l,)
        if self.values.shape != want:
            raise ValueError(f"values shape {self.values.shape}, expected {want}")

    @classmethod
    def uniform(cls, grid: GridSpec, space: MetricSpaceDiscretization):
        dens = 1.0 / space.total_volume
        return cls(np.full(grid.shape + (space.l,), dens), grid, space)

    @classmethod
    def from_lk(cls, u_lk: np.ndarray, grid: GridSpec, space):
        vals = np.moveaxis(u_lk.reshape((space.l,) + grid.shape), 0, -1)
        return cls(np.ascontiguousarray(vals), grid, space)

    def lk(self) -> np.ndarray:
        """Internal layout (l, n): cell-major, voxels flattened C-order."""
        return np.ascontiguousarray(
            np.moveaxis(self.values, -1, 0).reshape(self.space.l, self.grid.n))

    def validate(self, tol: float = 1e-6):
        u = self.values
        if np.any(u < -tol):
            raise ValueError(f"negative density {u.min():.3e} beyond {tol}")
        mass = u @ self.space.volumes
        err = np.abs(mass - 1.0).max()
        if err > tol:
            raise ValueError(f"simplex violation {err:.3e} beyond {tol}")
        return self

    def copy(self):
        return MeasureImage(self.values.copy(), self.grid, self.space)


@dataclass
class DualFields:
    """Dual iterate of a saddle problem, in the solver's internal layout.

    p: (l, d, n_stag), g: (m, s, d, n_stag) live on the staggered dual
    nodes; for W1-TV additionally p0: (l, n) and g0: (m, s, n) on the
    voxels.
    """

    p: np.ndarray
    g: np.ndarray
    p0: np.ndarray | None = None
    g0: np.ndarray | None = None


@dataclass
class Energy:
    """Primal/dual objective pair with relative gap."""

    primal: float
    dual: float
    gap_rel: float = field(init=False)

    def __post_init__(self):
        self.gap_rel = max(self.primal - self.dual, 0.0) / max(1.0, abs(self.primal))

    def weak_duality_ok(self, slack: float = 1e-9) -> bool:
        return self.primal >= self.dual - slack


def pair_b(u: np.ndarray, p: np.ndarray, volumes: np.ndarray) -> float:
    """Discrete dual pairing sum_{i,k} b_k u_k^i p_k^i over the cell axis.

    u and p must have equal shapes with the cell index last (or equal
    internal (l, n) layouts with the cell index first -- any matching
    layout works as long as ``volumes`` aligns with the chosen axis).
    """
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    if u.shape != p.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {p.shape}")
    volumes = np.asarray(volumes, dtype=float)
    if u.shape[-1] == volumes.shape[0]:
        return float(np.sum(u * p * volumes))
    if u.shape[0] == volumes.shape[0]:
        w = volumes.reshape((-1,) + (1,) * (u.ndim - 1))
        return float(np.sum(u * p * w))
    raise ValueError("no axis matches the volume vector")


class SaddleProblem:
    """Assembled model: operators, constraint sets and energy evaluators."""

    def __init__(self, model: str, f: MeasureImage, lam: float, norm: str = "spectral"):
        if model not in ("w1tv", "l2tv"):
            raise ValueError(f"unknown model {model!r}")
        if lam <= 0:
            raise ValueError("regularization weight lambda must be positive")
        if norm not in ("spectral", "frobenius"):
            raise ValueError(f"unknown norm flag {norm!r}")
        f.validate(tol=1e-6)
        self.model = model
        self.f = f
        self.lam = float(lam)
        self.norm = norm
        self.grid = f.grid
        self.space = f.space
        self.op = LipschitzOperator(self.space)
        self._f_lk = f.lk()
        self._tv_eval = CertifiedSup(self.op, norm)
        self._data_eval = CertifiedSup(self.op, norm) if model == "w1tv" else None

    # -- dimensions --------------------------------------------------------

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def l(self) -> int:
        return self.space.l

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def m(self) -> int:
        return self.op.m

    @property
    def s(self) -> int:
        return self.op.s

    @property
    def volumes(self) -> np.ndarray:
        return self.space.volumes

    @property
    def n_stag(self) -> int:
        """Number of dual (staggered) nodes carrying gradient components."""
        return self.grid.n_dual

    # -- operator pieces (internal (l, n) layout) ---------------------------

    def apply_D(self, u_lk: np.ndarray) -> np.ndarray:
        """Spatial gradient, (l, n) -> (l, d, n_stag)."""
        g = grad(u_lk.reshape((self.l,) + self.grid.shape), self.grid)
        return g.reshape(self.l, self.d, self.n_stag)

    def apply_negdiv(self, p: np.ndarray) -> np.ndarray:
        """(l, d, n_stag) -> (l, n)."""
        out = neg_div(p.reshape((self.l, self.d) + self.grid.dual_shape), self.grid)
        return out.reshape(self.l, self.n)

    def tv_weights(self, u_lk: np.ndarray) -> np.ndarray:
        """Volume-weighted spatial gradient of u, the TV pairing coefficients."""
        return self.volumes[:, None, None] * self.apply_D(u_lk)

    def data_weights(self, u_lk: np.ndarray) -> np.ndarray:
        """Volume-weighted u - f, the W1 data pairing coefficients (l, 1, n)."""
        return (self.volumes[:, None] * (u_lk - self._f_lk))[:, None, :]

    # -- certified energies --------------------------------------------------

    def tv_bracket(self, u_lk: np.ndarray, tol: float = 1e-8, state=None,
                   max_iter: int = 500_000):
        """Certified (lower, upper, state) bracket of TV_KR(u)."""
        return self._tv_eval.evaluate(self.tv_weights(u_lk), 1.0, tol=tol,
                                      state=state, max_iter=max_iter)

    def data_bracket(self, u_lk: np.ndarray, tol: float = 1e-8, state=None,
                     max_iter: int = 500_000):
        """Certified bracket of the mesh-Lipschitz W1 data term (W1-TV only)."""
        if self.model != "w1tv":
            raise ValueError("data_bracket applies to the W1-TV model")
        return self._data_eval.evaluate(self.data_weights(u_lk), 1.0, tol=tol,
                                        state=state, max_iter=max_iter)

    def data_term_exact(self, u_lk: np.ndarray) -> float:
        """Exact data term: per-voxel transport LP (W1-TV) or <u-f, u-f>_b."""
        if self.model == "l2tv":
            diff = u_lk - self._f_lk
            return float(np.einsum("kn,kn,k->", diff, diff, self.volumes))
        total = 0.0
        for i in range(self.n):
            total += w1_lp(u_lk[:, i], self._f_lk[:, i], self.space)
        return total


def build_w1tv(f: MeasureImage, lam: float, norm: str = "spectral") -> SaddleProblem:
    """W1 data term + lambda TV_KR, in Kantorovich-Rubinstein dual form."""
    return SaddleProblem("w1tv", f, lam, norm)


def build_l2tv(f: MeasureImage, lam: float, norm: str = "spectral") -> SaddleProblem:
    """Quadratic data term + lambda TV_KR (ROF analogue)."""
    return SaddleProblem("l2tv", f, lam, norm)


def tv_kr_bracket(img: MeasureImage, norm: str = "spectral", tol: float = 1e-8,
                  max_iter: int = 500_000):
    """Certified (lower, upper) bracket of the discrete TV_KR seminorm."""
    op = LipschitzOperator(img.space)
    ev = CertifiedSup(op, norm)
    u = img.lk()
    W = img.space.volumes[:, None, None] * grad(
        u.reshape((img.space.l,) + img.grid.shape), img.grid).reshape(
            img.space.l, img.grid.d, img.grid.n_dual)
    lo, hi, _ = ev.evaluate(W, 1.0, tol=tol, max_iter=max_iter)
    return lo, hi


def tv_kr(img: MeasureImage, norm: str = "spectral", tol: float = 1e-8) -> float:
    """Discrete TV_KR seminorm (certified upper bound, bracket width <= tol)."""
    return tv_kr_bracket(img, norm, tol)[1]


def primal_energy(problem: SaddleProblem, u, tol: float = 1e-8) -> float:
    """Model energy at u: exact data term plus lambda * TV_KR(u).

    The data term is the per-voxel transport LP for W1-TV and the
    b-weighted squared distance for L2-TV; the TV term is the certified
    upper bound of the inner maximization (bracket width <= tol), so the
    returned value never undershoots the true energy.
    """
    u_lk = u.lk() if isinstance(u, MeasureImage) else np.asarray(u, dtype=float)
    if u_lk.shape != (problem.l, problem.n):
        raise ValueError(f"u has shape {u_lk.shape}, expected {(problem.l, problem.n)}")
    _validate_simplex(problem, u_lk)
    data = problem.data_term_exact(u_lk)
    _, tv_hi, _ = problem.tv_bracket(u_lk, tol=tol)
    return data + problem.lam * tv_hi


def _validate_simplex(problem: SaddleProblem, u_lk: np.ndarray, tol: float = 1e-6):
    mass_err = np.abs(problem.volumes @ u_lk - 1.0).max()
    neg = max(0.0, -u_lk.min())
    if mass_err > tol or neg > tol:
        raise ValueError(
            f"infeasible u: simplex violation mass={mass_err:.3e} neg={neg:.3e}")


def dual_energy(problem: SaddleProblem, duals: DualFields,
                pairwise: bool = True) -> float:
    """Rigorous lower bound on the model optimum from a dual iterate.

    The gradients implied by p (and p0) are recomputed by elimination and
    the fields rescaled into their norm balls, so any iterate yields a
    valid bound.  With ``pairwise=True`` (default) p0 is additionally
    rescaled to satisfy the full pairwise Lipschitz constraints, making the
    bound valid against the exact-LP data term used by
    :func:`primal_energy`; with ``pairwise=False`` the bound is the one of
    the discrete saddle-point problem (mesh constraints), which is the
    quantity the solver drives to meet the primal.

    Raises:
        ValueError: if supplied g/g0 blocks violate their norm constraints
            beyond 1e-8.
    """
    op = problem.op
    b = problem.volumes
    lam = problem.lam
    if duals.g is not None and duals.g.size:
        if block_norm(_to_blocks(duals.g), problem.norm).max() > lam + 1e-8:
            raise ValueError("dual field g violates its norm constraint beyond 1e-8")
    if duals.g0 is not None and duals.g0.size:
        if np.linalg.norm(duals.g0, axis=1).max() > 1.0 + 1e-8:
            raise ValueError("dual field g0 violates its norm constraint beyond 1e-8")

    p = np.asarray(duals.p, dtype=float)
    if problem.m:
        ghat = op.eliminate(p)
        gamma = max(1.0, block_norm(_to_blocks(ghat), problem.norm).max() / lam)
    else:
        gamma = 1.0
    p = p / gamma
    v = problem.apply_negdiv(p)

    if problem.model == "w1tv":
        p0 = np.asarray(duals.p0, dtype=float)
        if problem.m:
            g0hat = op.eliminate(p0[:, None, :])
            gamma0 = max(1.0, float(np.linalg.norm(g0hat, axis=(1, 2)).max()))
        else:
            gamma0 = 1.0
        if pairwise:
            gamma0 = max(gamma0, _pairwise_quotient(problem, p0))
        p0 = p0 / gamma0
        vv = v + p0
        const = -float(np.einsum("kn,kn,k->", problem._f_lk, p0, b))
        return const + float(vv.min(axis=0).sum())

    # L2-TV: exact per-voxel minimum of <u-f, u-f>_b + <u, v>_b over the simplex
    f = problem._f_lk
    target = f - 0.5 * v
    ustar = project_weighted_simplex(target, b, axis=0)
    diff = ustar - f
    val = np.einsum("kn,kn,k->", diff, diff, b) + np.einsum("kn,kn,k->", ustar, v, b)
    return float(val)


def _pairwise_quotient(problem: SaddleProblem, p0: np.ndarray) -> float:
    """max over voxels and cell pairs of |p0_a - p0_b| / d(z^a, z^b)."""
    D = problem.space.distances
    iu, ju = np.triu_indices(problem.l, k=1)
    dpos = D[iu, ju]
    ok = dpos > 0
    iu, ju, dpos = iu[ok], ju[ok], dpos[ok]
    if iu.size == 0:
        return 1.0
    worst = 1.0
    chunk = max(1, int(4e6 // max(problem.n, 1)))  # bound the (pairs, n) temporary
    for start in range(0, iu.size, chunk):
        sl = slice(start, start + chunk)
        diff = np.abs(p0[iu[sl]] - p0[ju[sl]])
        worst = max(worst, float((diff / dpos[sl, None]).max(initial=0.0)))
    return worst
