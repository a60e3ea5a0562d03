"""Exact Wasserstein-1 computations on a discretized metric space.

``w1_lp`` solves the transport linear program on the complete cost matrix
and is the ground-truth oracle used by data terms, metrics and tests;
``w1_dual`` solves the Lipschitz-potential dual over all pairwise
constraints.  Both are exact up to LP solver precision (HiGHS).
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .metric_space import MetricSpaceDiscretization

__all__ = [
    "DiscreteMeasure",
    "w1_lp",
    "w1_dual",
    "wasserstein_median_bruteforce",
    "validate_measure",
]

MASS_TOL = 1e-9


class DiscreteMeasure:
    """Densities w.r.t. the cell volumes b; mass on cell k is b_k * u_k."""

    __slots__ = ("densities",)

    def __init__(self, densities):
        self.densities = np.asarray(densities, dtype=float)

    def masses(self, space) -> np.ndarray:
        return space.volumes * self.densities


def _densities(mu) -> np.ndarray:
    return np.asarray(getattr(mu, "densities", mu), dtype=float)


def validate_measure(mu, space: MetricSpaceDiscretization, tol: float = MASS_TOL):
    """Check nonnegativity and unit weighted mass; raises ValueError."""
    u = _densities(mu)
    if u.shape != (space.l,):
        raise ValueError(f"density vector has shape {u.shape}, expected ({space.l},)")
    if np.any(u < -tol):
        raise ValueError(f"negative density {u.min():.3e}")
    mass = float(space.volumes @ u)
    if abs(mass - 1.0) > tol:
        raise ValueError(f"weighted mass {mass} deviates from 1 beyond {tol}")
    return u


def _masses_pair(mu, nu, space):
    u = _densities(mu)
    v = _densities(nu)
    if u.shape != (space.l,) or v.shape != (space.l,):
        raise ValueError("measure dimensions do not match the space")
    if np.any(u < -MASS_TOL) or np.any(v < -MASS_TOL):
        raise ValueError("negative density")
    a = space.volumes * np.maximum(u, 0.0)
    c = space.volumes * np.maximum(v, 0.0)
    if abs(a.sum() - c.sum()) > MASS_TOL:
        raise ValueError(
            f"mass mismatch {a.sum():.12f} vs {c.sum():.12f} beyond {MASS_TOL}; "
            "refusing to renormalize")
    # exact zeros instead of vanishing masses keep the LP well scaled; the
    # induced W1 perturbation stays below 1e-9 on the spaces in scope
    floor = 1e-12 * max(a.max(), c.max(), 1e-300)
    a[a < floor] = 0.0
    c[c < floor] = 0.0
    return a, c


def _marginal_matrix(l: int, drop_last_col: bool = False) -> sparse.csr_matrix:
    """Equality rows: l row sums followed by the column sums of the plan.

    One column constraint is redundant given the row constraints; dropping
    it keeps the system full rank so rounding in the marginals cannot make
    the LP spuriously infeasible.
    """
    ii = np.repeat(np.arange(l), l)
    jj = np.arange(l * l)
    rows = sparse.csr_matrix((np.ones(l * l), (ii, jj)), shape=(l, l * l))
    ncol = l - 1 if drop_last_col else l
    ii = np.repeat(np.arange(ncol), l)
    jj = np.concatenate([np.arange(j, l * l, l) for j in range(ncol)])
    cols = sparse.csr_matrix((np.ones(ncol * l), (ii, jj)), shape=(ncol, l * l))
    return sparse.vstack([rows, cols], format="csr")


def w1_lp(mu, nu, space: MetricSpaceDiscretization) -> float:
    """Exact W1 distance: optimal transport cost between mu and nu.

    Solves min_gamma sum d(z^a, z^b) gamma_ab subject to the marginal
    constraints, as a linear program.
    """
    a, c = _masses_pair(mu, nu, space)
    l = space.l
    if l == 1:
        return 0.0
    c = c * (a.sum() / c.sum())
    cost = space.distances.ravel()
    A_eq = _marginal_matrix(l, drop_last_col=True)
    b_eq = np.concatenate([a, c[:-1]])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        # presolve occasionally misjudges severely scaled marginals
        res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None),
                      method="highs", options={"presolve": False})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def w1_dual(mu, nu, space: MetricSpaceDiscretization) -> float:
    """W1 via Kantorovich-Rubinstein duality.

    Maximizes <p, mu - nu>_b over potentials with |p_a - p_b| <= d(z^a, z^b)
    for all pairs, pinned at p_0 = 0.
    """
    a, c = _masses_pair(mu, nu, space)
    l = space.l
    if l == 1:
        return 0.0
    w = a - c
    iu, ju = np.triu_indices(l, k=1)
    npairs = iu.size
    rows = np.repeat(np.arange(2 * npairs), 2)
    cols = np.empty(4 * npairs, dtype=np.int64)
    data = np.empty(4 * npairs)
    cols[0::4], cols[1::4] = iu, ju
    data[0::4], data[1::4] = 1.0, -1.0
    cols[2::4], cols[3::4] = iu, ju
    data[2::4], data[3::4] = -1.0, 1.0
    A_ub = sparse.csr_matrix((data, (rows, cols)), shape=(2 * npairs, l))
    b_ub = np.repeat(space.distances[iu, ju], 2)
    bounds = [(0.0, 0.0)] + [(None, None)] * (l - 1)
    res = linprog(-w, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual LP failed: {res.message}")
    return max(float(-res.fun), 0.0)


_WORKER_SPACE = None


def _w1_init_worker(tag):
    global _WORKER_SPACE
    from .metric_space import space_from_tag
    _WORKER_SPACE = space_from_tag(tag)


def _w1_worker(pair):
    return w1_lp(pair[0], pair[1], _WORKER_SPACE)


def w1_lp_batch(U, V, space: MetricSpaceDiscretization, threads: int = 1):
    """Per-row exact W1 distances between two stacks of densities.

    With threads > 1 the rows are solved in a worker pool; the result is
    identical for any worker count (independent LPs, order preserved).
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if U.shape != V.shape or U.ndim != 2:
        raise ValueError("need equal (n, l) density stacks")
    n = U.shape[0]
    if threads <= 1 or n < 4:
        return np.array([w1_lp(U[i], V[i], space) for i in range(n)])
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(processes=threads, initializer=_w1_init_worker,
                  initargs=(space.tag(),)) as pool:
        vals = pool.map(_w1_worker, [(U[i], V[i]) for i in range(n)],
                        chunksize=max(1, n // (4 * threads)))
    return np.asarray(vals)


def wasserstein_median_bruteforce(measures, space: MetricSpaceDiscretization):
    """Minimizer of sum_i W1(f_i, u) over the discrete simplex, by joint LP.

    Test oracle only; guarded to small spaces (l <= 42).  All W1 terms and
    the unknown barycenter u enter one linear program through their
    transport plans.
    """
    if space.l > 42:
        raise ValueError(f"median oracle capacity exceeded: l={space.l} > 42")
    ms = [_densities(f) for f in measures]
    if not ms:
        raise ValueError("need at least one measure")
    for f in ms:
        validate_measure(f, space)
    l = space.l
    N = len(ms)
    # variables: u (l) then N transport plans (l*l each)
    nvar = l + N * l * l
    cost = np.zeros(nvar)
    for i in range(N):
        cost[l + i * l * l: l + (i + 1) * l * l] = space.distances.ravel()

    rows, cols, data, b_eq = [], [], [], []
    nrow = 0
    for i in range(N):
        off = l + i * l * l
        # row sums = masses of f_i
        for a in range(l):
            rows.extend([nrow] * l)
            cols.extend(range(off + a * l, off + (a + 1) * l))
            data.extend([1.0] * l)
            b_eq.append(float(space.volumes[a] * ms[i][a]))
            nrow += 1
        # column sums - b u = 0 (last column redundant given the row sums)
        for j in range(l - 1):
            rows.extend([nrow] * l)
            cols.extend(range(off + j, off + l * l, l))
            data.extend([1.0] * l)
            rows.append(nrow)
            cols.append(j)
            data.append(-float(space.volumes[j]))
            b_eq.append(0.0)
            nrow += 1
    # total mass of u
    rows.extend([nrow] * l)
    cols.extend(range(l))
    data.extend(space.volumes)
    b_eq.append(1.0)
    nrow += 1

    A_eq = sparse.csr_matrix((data, (rows, cols)), shape=(nrow, nvar))
    res = linprog(cost, A_eq=A_eq, b_eq=np.asarray(b_eq), bounds=(0, None),
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"median LP failed: {res.message}")
    return DiscreteMeasure(res.x[:l])
