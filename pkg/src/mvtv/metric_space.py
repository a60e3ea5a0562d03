"""Discretizations of compact metric spaces.

Three constructions are supported:

* the geodesic icosphere for the unit sphere S^2 (recursive subdivision of
  the icosahedron, vertices projected back to the sphere),
* the uniform circle for S^1,
* explicit finite metric spaces given by a distance matrix and a list of
  Lipschitz-constraint edges.

A discretization carries the cells' representative points ``z^k``, the cell
volumes ``b_k``, the full matrix of pairwise geodesic distances, and -- for
manifolds -- a staggered set of gradient points ``y^j`` with neighborhoods
``N_j`` and the least-squares matrices ``(A^j, B^j)`` used to estimate
tangent gradients of functions sampled at the ``z^k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricSpaceDiscretization",
    "build_icosphere",
    "build_circle",
    "build_finite",
    "inverse_exp",
    "build_lsq_gradient",
    "space_from_tag",
    "MAX_ICOSPHERE_LEVEL",
]

MAX_ICOSPHERE_LEVEL = 7

# icosahedron with vertices on the unit sphere
_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=float,
)
_ICO_VERTS /= np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


class SpaceConstructionError(ValueError):
    """Raised when a discretization cannot be assembled."""


@dataclass(frozen=True)
class MetricSpaceDiscretization:
    """Immutable discretization of a compact metric space.

    Attributes:
        kind: "icosphere", "circle" or "finite".
        params: construction parameters (level / l); geometry is rebuilt
            deterministically from these, they are what gets serialized.
        points: cell points z^k -- unit 3-vectors (icosphere), angles in
            [0, 2pi) (circle), or None (finite).
        volumes: cell volumes b_k > 0 (all ones for finite spaces).
        distances: dense l x l matrix of pairwise geodesic distances.
        tangent_dim: s, dimension of the tangent spaces (0 for finite).
        grad_points: staggered points y^j (None for finite).
        neighborhoods: (m, r) indices N_j into the z^k; for finite spaces
            this is the (E, 2) edge list of Lipschitz constraints.
        lsq_A / lsq_B: per-j least-squares matrices A^j (s x s) and
            B^j (s x r); None for finite spaces.
        tangent_basis: (m, s, 3) orthonormal bases of T_{y^j}S^2 (icosphere
            only; the circle uses the canonical signed-arc coordinate).
    """

    kind: str
    params: dict
    points: np.ndarray | None
    volumes: np.ndarray
    distances: np.ndarray
    tangent_dim: int
    grad_points: np.ndarray | None = None
    neighborhoods: np.ndarray | None = None
    lsq_A: np.ndarray | None = None
    lsq_B: np.ndarray | None = None
    tangent_basis: np.ndarray | None = None
    _adjacency: list = field(default=None, repr=False, compare=False)

    @property
    def l(self) -> int:
        return self.volumes.shape[0]

    @property
    def m(self) -> int:
        if self.neighborhoods is None:
            return 0
        return self.neighborhoods.shape[0]

    @property
    def r(self) -> int:
        if self.neighborhoods is None:
            return 0
        return self.neighborhoods.shape[1]

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    def is_manifold(self) -> bool:
        return self.kind in ("icosphere", "circle")

    def embedded_points(self) -> np.ndarray:
        """Cell points as unit vectors in R^3 (sphere) or R^2 (circle)."""
        if self.kind == "icosphere":
            return self.points
        if self.kind == "circle":
            th = self.points
            return np.stack([np.cos(th), np.sin(th)], axis=1)
        raise ValueError("finite spaces have no embedding")

    def vertex_adjacency(self) -> list:
        """1-ring neighbor indices per cell point (mesh graph)."""
        if self._adjacency is not None:
            return self._adjacency
        nbrs = [set() for _ in range(self.l)]
        if self.kind == "icosphere":
            for tri in self.neighborhoods:
                a, b, c = (int(v) for v in tri)
                nbrs[a].update((b, c))
                nbrs[b].update((a, c))
                nbrs[c].update((a, b))
        elif self.kind == "circle":
            for k in range(self.l):
                nbrs[k].update(((k - 1) % self.l, (k + 1) % self.l))
        else:
            for a, b in self.neighborhoods.reshape(-1, 2):
                nbrs[int(a)].add(int(b))
                nbrs[int(b)].add(int(a))
        adj = [sorted(s) for s in nbrs]
        object.__setattr__(self, "_adjacency", adj)
        return adj

    def max_edge_arc(self) -> float:
        """Largest distance between neighboring cell points (mesh resolution)."""
        if self.kind == "finite":
            e = self.neighborhoods.reshape(-1, 2)
            return float(self.distances[e[:, 0], e[:, 1]].max()) if len(e) else 0.0
        best = 0.0
        for k, nb in enumerate(self.vertex_adjacency()):
            if nb:
                best = max(best, float(self.distances[k, nb].max()))
        return best

    def tag(self) -> dict:
        """JSON-serializable construction tag."""
        t = {"kind": self.kind}
        t.update(self.params)
        return t

    def _freeze(self):
        for a in (self.points, self.volumes, self.distances, self.grad_points,
                  self.neighborhoods, self.lsq_A, self.lsq_B, self.tangent_basis):
            if a is not None:
                a.flags.writeable = False
        return self


def _spherical_face_areas(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Solid angles of spherical triangles (Van Oosterom--Strackee)."""
    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) \
        + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(num, den)


def _subdivide(verts: list, faces: np.ndarray) -> tuple:
    """One 4-to-1 triangle split; midpoints are projected to the sphere."""
    cache = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        idx = cache.get(key)
        if idx is None:
            v = verts[i] + verts[j]
            v = v / np.linalg.norm(v)
            verts.append(v)
            idx = len(verts) - 1
            cache[key] = idx
        return idx

    out = np.empty((4 * faces.shape[0], 3), dtype=np.int64)
    for t, (i, j, k) in enumerate(faces):
        ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
        out[4 * t + 0] = (i, ij, ki)
        out[4 * t + 1] = (ij, j, jk)
        out[4 * t + 2] = (ki, jk, k)
        out[4 * t + 3] = (ij, jk, ki)
    return verts, out


def _sphere_tangent_basis(y: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of the tangent planes at rows of y.

    Gram-Schmidt of the most-orthogonal coordinate axis against y, second
    vector by cross product.
    """
    m = y.shape[0]
    axis = np.argmin(np.abs(y), axis=1)
    e = np.zeros((m, 3))
    e[np.arange(m), axis] = 1.0
    e1 = e - np.einsum("ij,ij->i", e, y)[:, None] * y
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(y, e1)
    e2 /= np.linalg.norm(e2, axis=1, keepdims=True)
    return np.stack([e1, e2], axis=1)


def inverse_exp(y: np.ndarray, z: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Riemannian inverse exponential map on S^2.

    Maps z into the tangent plane at y; the returned vector has Euclidean
    length equal to the geodesic distance arccos<y, z>.

    Args:
        y, z: unit 3-vectors (broadcastable stacks thereof).
        basis: optional (2, 3) orthonormal tangent basis at y; when given,
            coordinates in that basis are returned instead of the ambient
            3-vector.

    Raises:
        ValueError: if z is (numerically) antipodal to y.
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    dot = np.clip(np.sum(y * z, axis=-1), -1.0, 1.0)
    theta = np.arccos(dot)
    w = z - dot[..., None] * y
    nw = np.linalg.norm(w, axis=-1)
    if np.any((theta > np.pi - 1e-9) & (nw < 1e-12)):
        raise ValueError("inverse_exp is singular at the cut locus (z antipodal to y)")
    scale = np.where(nw > 1e-30, theta / np.where(nw > 1e-30, nw, 1.0), 0.0)
    v = scale[..., None] * w
    if basis is None:
        return v
    return v @ np.asarray(basis).T


def _assemble_lsq(v: np.ndarray) -> tuple:
    """A^j, B^j from the tangent coordinates v of the neighborhoods.

    v has shape (m, r, s); rows of M^j are the v^{jk}.  With
    E = I - (1/r) e e^T the least-squares gradient solves
    A^j g^j = B^j P^j p, A^j = M^T E M, B^j = M^T E.
    """
    m, r, s = v.shape
    E = np.eye(r) - np.ones((r, r)) / r
    B = np.einsum("jrs,rq->jsq", v, E)          # (m, s, r)
    A = np.einsum("jsr,jrq->jsq", B, v)          # (m, s, s)
    return A, B


def _check_spd(A: np.ndarray, what: str):
    ev = np.linalg.eigvalsh(A)
    bad = np.where(ev[:, 0] <= 1e-12 * np.maximum(ev[:, -1], 1e-300))[0]
    if bad.size:
        raise SpaceConstructionError(
            f"least-squares matrix A^j singular at {what} j={int(bad[0])} "
            f"(collinear neighborhood)")


def build_lsq_gradient(space: MetricSpaceDiscretization) -> tuple:
    """Recompute the per-j gradient matrices (A^j, B^j, P^j) of a manifold space.

    P^j is returned as the (m, r) index array of the neighborhoods; the
    gradient of p at y^j is the solution of A^j g^j = B^j p[P^j].
    """
    if not space.is_manifold():
        raise ValueError("finite spaces carry edge constraints, not tangent gradients")
    v = _tangent_coordinates(space)
    A, B = _assemble_lsq(v)
    return A, B, space.neighborhoods.copy()


def _tangent_coordinates(space: MetricSpaceDiscretization) -> np.ndarray:
    """v^{jk} = exp^{-1}_{y^j}(z^k) for k in N_j, in the stored tangent bases."""
    if space.kind == "icosphere":
        y = space.grad_points[:, None, :]            # (m, 1, 3)
        z = space.points[space.neighborhoods]        # (m, r, 3)
        v3 = inverse_exp(y, z)                       # (m, r, 3)
        return np.einsum("mrc,msc->mrs", v3, space.tangent_basis)
    if space.kind == "circle":
        y = space.grad_points[:, None]
        z = space.points[space.neighborhoods]
        delta = np.angle(np.exp(1j * (z - y)))       # signed arc in (-pi, pi]
        return delta[..., None]
    raise ValueError(space.kind)


def build_icosphere(level: int) -> MetricSpaceDiscretization:
    """Geodesic icosphere: level-times subdivided icosahedron.

    Cell points are the vertices, gradient points the projected face
    barycenters, neighborhoods the three vertices of each face, and cell
    volumes the one-third shares of the incident spherical triangle areas
    (an exact partition of 4pi).
    """
    level = int(level)
    if level < 0:
        raise ValueError("level must be >= 0")
    if level > MAX_ICOSPHERE_LEVEL:
        raise SpaceConstructionError(
            f"icosphere level {level} exceeds the capacity guard "
            f"({MAX_ICOSPHERE_LEVEL}); the dense distance matrix would not fit")

    verts = [v.copy() for v in _ICO_VERTS]
    faces = _ICO_FACES.copy()
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
    z = np.array(verts)
    z /= np.linalg.norm(z, axis=1, keepdims=True)

    areas = _spherical_face_areas(z, faces)
    b = np.zeros(z.shape[0])
    np.add.at(b, faces.ravel(), np.repeat(areas / 3.0, 3))

    y = z[faces].mean(axis=1)
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    basis = _sphere_tangent_basis(y)

    dist = np.arccos(np.clip(z @ z.T, -1.0, 1.0))
    np.fill_diagonal(dist, 0.0)

    space = MetricSpaceDiscretization(
        kind="icosphere",
        params={"level": level},
        points=z,
        volumes=b,
        distances=dist,
        tangent_dim=2,
        grad_points=y,
        neighborhoods=faces,
        tangent_basis=basis,
    )
    v = _tangent_coordinates(space)
    A, B = _assemble_lsq(v)
    _check_spd(A, "face")
    space = MetricSpaceDiscretization(
        **{**space.__dict__, "lsq_A": A, "lsq_B": B, "_adjacency": None})
    return space._freeze()


def build_circle(l: int) -> MetricSpaceDiscretization:
    """Uniform circle discretization with l cells of width 2pi/l.

    Gradient points are the midpoints between adjacent cell points, each
    with the two adjacent points as neighborhood (r = 2, s = 1).
    """
    l = int(l)
    if l < 3:
        raise ValueError("circle discretization needs l >= 3")
    th = 2.0 * np.pi * np.arange(l) / l
    b = np.full(l, 2.0 * np.pi / l)
    diff = np.abs(th[:, None] - th[None, :])
    dist = np.minimum(diff, 2.0 * np.pi - diff)
    y = th + np.pi / l
    neigh = np.stack([np.arange(l), (np.arange(l) + 1) % l], axis=1)
    space = MetricSpaceDiscretization(
        kind="circle",
        params={"l": l},
        points=th,
        volumes=b,
        distances=dist,
        tangent_dim=1,
        grad_points=y,
        neighborhoods=neigh,
    )
    v = _tangent_coordinates(space)
    A, B = _assemble_lsq(v)
    _check_spd(A, "midpoint")
    space = MetricSpaceDiscretization(
        **{**space.__dict__, "lsq_A": A, "lsq_B": B, "_adjacency": None})
    return space._freeze()


def build_finite(dist, edges) -> MetricSpaceDiscretization:
    """Explicit finite metric space with unit cell volumes.

    Args:
        dist: symmetric l x l matrix with zero diagonal satisfying the
            triangle inequality.
        edges: iterable of index pairs carrying the Lipschitz constraints
            of the TV dual variables.

    Raises:
        ValueError: naming the offending entries/triple on a metric-axiom
            violation.
    """
    D = np.asarray(dist, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    l = D.shape[0]
    if np.any(np.abs(np.diag(D)) > 1e-12):
        k = int(np.argmax(np.abs(np.diag(D))))
        raise ValueError(f"nonzero diagonal at index {k}")
    if np.any(np.abs(D - D.T) > 1e-12):
        a, bdx = np.unravel_index(np.argmax(np.abs(D - D.T)), D.shape)
        raise ValueError(f"asymmetric distances at pair ({a}, {bdx})")
    if np.any(D < 0):
        a, bdx = np.unravel_index(np.argmin(D), D.shape)
        raise ValueError(f"negative distance at pair ({a}, {bdx})")
    # d(a,c) <= d(a,b) + d(b,c) for all triples
    via = D[:, :, None] + D[None, :, :]           # (a, b, c)
    slack = D[:, None, :] - via                   # > 0 means violated
    worst = np.unravel_index(np.argmax(slack), slack.shape)
    if slack[worst] > 1e-12:
        a, bdx, c = (int(i) for i in worst)
        raise ValueError(
            f"triangle inequality violated: d({a},{c}) > d({a},{bdx}) + d({bdx},{c})")

    E = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if E.size and (E.min() < 0 or E.max() >= l):
        raise ValueError("edge index out of range")
    if E.size and np.any(E[:, 0] == E[:, 1]):
        raise ValueError("self-loop edge")

    space = MetricSpaceDiscretization(
        kind="finite",
        params={"dist": D.tolist(), "edges": E.tolist()},
        points=None,
        volumes=np.ones(l),
        distances=D.copy(),
        tangent_dim=0,
        neighborhoods=E,
    )
    return space._freeze()


def space_from_tag(tag: dict) -> MetricSpaceDiscretization:
    """Deterministic rebuild from a serialized construction tag."""
    kind = tag.get("kind")
    if kind == "icosphere":
        return build_icosphere(tag["level"])
    if kind == "circle":
        return build_circle(tag["l"])
    if kind == "finite":
        return build_finite(np.asarray(tag["dist"], dtype=float), tag["edges"])
    raise ValueError(f"unknown space kind {kind!r}")
