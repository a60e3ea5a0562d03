"""Discrete Lipschitz-constraint machinery shared by TV evaluation and the solver.

For manifold discretizations the Lipschitz bound on a dual field p is
imposed through its least-squares tangent gradients: per gradient point j,
the gradient g^j solves A^j g^j = B^j P^j p, and the constraint is a norm
bound on g^j.  For finite spaces the same role is played by scaled edge
differences (p_a - p_b) / d_ab.  Both cases reduce to one sparse operator

    S : R^l -> R^{m x s},   constraint on  g  with  A g = S p,

where A is block diagonal s x s SPD (identity for finite spaces).  Blocks
are rescaled by ||A^j|| once at assembly so equality constraints are well
conditioned; this does not change the constraint set.

:class:`CertifiedSup` evaluates sup { <W, p> : A g = S p, ||g^j|| <= radius }
with rigorous lower and upper bounds: the lower bound comes from scaling the
current iterate into the feasible set through the eliminated gradients, the
upper bound from correcting the multiplier iterate onto the affine dual
feasible set S^T q = W (a sparse grounded Gram solve) and summing the dual
block norms.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .metric_space import MetricSpaceDiscretization
from .proximal import project_frobenius_ball, project_spectral_ball

try:
    import clarabel as _clarabel
except ImportError:                                    # pragma: no cover
    _clarabel = None

__all__ = ["LipschitzOperator", "CertifiedSup", "block_norm", "block_dual_norm"]


def _sigma_pair_2(blocks: np.ndarray):
    """Singular values of stacks with s = 2 via the 2x2 Gram eigenvalues.

    blocks: (..., 2, dd); returns (sig_max, sig_min_sum_part) as
    (sigma_max, sigma_1 + sigma_2).
    """
    G = np.einsum("...ad,...bd->...ab", blocks, blocks)
    a = G[..., 0, 0]
    bb = G[..., 0, 1]
    c = G[..., 1, 1]
    half = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + bb * bb, 0.0))
    lam1 = np.maximum(half + disc, 0.0)
    lam2 = np.maximum(half - disc, 0.0)
    s1 = np.sqrt(lam1)
    s2 = np.sqrt(lam2)
    return s1, s1 + s2


def block_norm(blocks: np.ndarray, norm: str) -> np.ndarray:
    """Spectral or Frobenius norms of (..., s, dd) blocks."""
    s, dd = blocks.shape[-2], blocks.shape[-1]
    if norm == "frobenius" or s == 1 or dd == 1:
        return np.sqrt(np.sum(blocks * blocks, axis=(-2, -1)))
    if norm == "spectral":
        if s == 2:
            return _sigma_pair_2(blocks)[0]
        sv = np.linalg.svd(blocks, compute_uv=False)
        return sv[..., 0]
    raise ValueError(f"unknown norm {norm!r}")


def block_dual_norm(blocks: np.ndarray, norm: str) -> np.ndarray:
    """Dual norms (nuclear for spectral, Frobenius for Frobenius)."""
    s, dd = blocks.shape[-2], blocks.shape[-1]
    if norm == "frobenius" or s == 1 or dd == 1:
        return np.sqrt(np.sum(blocks * blocks, axis=(-2, -1)))
    if norm == "spectral":
        if s == 2:
            return _sigma_pair_2(blocks)[1]
        sv = np.linalg.svd(blocks, compute_uv=False)
        return sv.sum(axis=-1)
    raise ValueError(f"unknown norm {norm!r}")


def project_block_ball(blocks: np.ndarray, radius: float, norm: str) -> np.ndarray:
    if norm == "spectral":
        return project_spectral_ball(blocks, radius)
    if norm == "frobenius":
        return project_frobenius_ball(blocks, radius)
    raise ValueError(f"unknown norm {norm!r}")


def _to_blocks(x: np.ndarray) -> np.ndarray:
    """(m, s, dd, n) -> (m, n, s, dd) so blocks sit in the trailing axes."""
    return np.moveaxis(x, 3, 1)


def _from_blocks(x: np.ndarray) -> np.ndarray:
    return np.moveaxis(x, 1, 3)


def project_ball_msdn(g: np.ndarray, radius: float, norm: str) -> np.ndarray:
    """Ball projection of (m, s, dd, n) blocks without layout transposes."""
    m, s, dd, n = g.shape
    if norm == "frobenius" or s == 1 or dd == 1:
        nrm = np.sqrt(np.einsum("jabn,jabn->jn", g, g))[:, None, None, :]
        scale = np.where(nrm > radius,
                         radius / np.where(nrm > 0, nrm, 1.0), 1.0)
        return g * scale
    if norm == "spectral" and s == 2 and dd == 2:
        a = g[:, 0, 0, :]
        bb = g[:, 0, 1, :]
        c = g[:, 1, 0, :]
        e = g[:, 1, 1, :]
        p1 = 0.5 * (a + e)
        q1 = 0.5 * (bb - c)
        p2 = 0.5 * (a - e)
        q2 = 0.5 * (bb + c)
        r1 = np.hypot(p1, q1)
        r2 = np.hypot(p2, q2)
        s1c = np.minimum(r1 + r2, radius)
        s2c = np.clip(r1 - r2, -radius, radius)
        r1c = 0.5 * (s1c + s2c)
        r2c = 0.5 * (s1c - s2c)
        t1 = np.where(r1 > 0, r1c / np.where(r1 > 0, r1, 1.0), 1.0)
        t2 = np.where(r2 > 0, r2c / np.where(r2 > 0, r2, 1.0), 1.0)
        out = np.empty_like(g)
        out[:, 0, 0, :] = p1 * t1 + p2 * t2
        out[:, 1, 1, :] = p1 * t1 - p2 * t2
        out[:, 0, 1, :] = q1 * t1 + q2 * t2
        out[:, 1, 0, :] = q2 * t2 - q1 * t1
        return out
    return _from_blocks(project_block_ball(_to_blocks(g), radius, norm))


def apply_A_fast(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Blockwise (m, s, s) @ (m, s, ...) with broadcasting fast paths."""
    s = A.shape[1]
    if s == 1:
        return A[:, 0, 0].reshape((-1,) + (1,) * (x.ndim - 1)) * x
    if s == 2:
        out = np.empty_like(x)
        sh = (-1,) + (1,) * (x.ndim - 2)
        out[:, 0] = A[:, 0, 0].reshape(sh) * x[:, 0] + A[:, 0, 1].reshape(sh) * x[:, 1]
        out[:, 1] = A[:, 1, 0].reshape(sh) * x[:, 0] + A[:, 1, 1].reshape(sh) * x[:, 1]
        return out
    flat = x.reshape(A.shape[0], s, -1)
    out = np.einsum("jab,jbn->jan", A, flat)
    return out.reshape(x.shape)


class LipschitzOperator:
    """Sparse gradient coupling of one metric-space discretization.

    Attributes:
        m, s: number of constraint blocks and their row dimension.
        S: csr matrix (m*s, l), block-rescaled.
        A: (m, s, s) block diagonal, rescaled so each block has unit
            spectral norm (identity for finite spaces).
        Ainv: inverses of the A blocks.
    """

    def __init__(self, space: MetricSpaceDiscretization):
        self.space = space
        l = space.l
        if space.is_manifold():
            A = space.lsq_A
            B = space.lsq_B
            P = space.neighborhoods
            m, s, r = B.shape
            scale = np.linalg.norm(A, ord=2, axis=(1, 2))
            A = A / scale[:, None, None]
            B = B / scale[:, None, None]
            rows = np.repeat(np.arange(m * s), r)
            cols = np.repeat(P, s, axis=0).reshape(m * s, r).ravel()
            data = B.reshape(m * s, r).ravel()
            self.S = sparse.csr_matrix((data, (rows, cols)), shape=(m * s, l))
            self.A = A
            self.Ainv = np.linalg.inv(A)
            self.block_scale = scale
            self.m, self.s = m, s
        else:
            E = space.neighborhoods.reshape(-1, 2)
            m = E.shape[0]
            if m:
                de = space.distances[E[:, 0], E[:, 1]]
                if np.any(de <= 0):
                    raise ValueError("Lipschitz edge with zero distance")
                rows = np.repeat(np.arange(m), 2)
                cols = E.ravel()
                data = np.stack([1.0 / de, -1.0 / de], axis=1).ravel()
                self.S = sparse.csr_matrix((data, (rows, cols)), shape=(m, l))
            else:
                self.S = sparse.csr_matrix((0, l))
            self.A = np.ones((m, 1, 1))
            self.Ainv = np.ones((m, 1, 1))
            self.block_scale = np.ones(m)
            self.m, self.s = m, 1
        self.ST = self.S.T.tocsr()
        self._setup_components()
        self._setup_gram()
        self._op_norm = None
        self._T = None

    # -- linear algebra helpers -------------------------------------------

    def apply_S(self, p: np.ndarray) -> np.ndarray:
        """p (l, ...) -> (m, s, ...)."""
        tail = p.shape[1:]
        out = self.S @ p.reshape(p.shape[0], -1)
        return out.reshape(self.m, self.s, *tail)

    def apply_ST(self, q: np.ndarray) -> np.ndarray:
        """q (m, s, ...) -> (l, ...)."""
        tail = q.shape[2:]
        out = self.ST @ q.reshape(self.m * self.s, -1)
        return out.reshape(-1, *tail)

    def apply_A(self, q: np.ndarray) -> np.ndarray:
        """Blockwise A q for q (m, s, ...)."""
        return apply_A_fast(self.A, q)

    def eliminate(self, p: np.ndarray) -> np.ndarray:
        """Gradients g = A^{-1} S p implied by a dual field p (l, ...)."""
        return apply_A_fast(self.Ainv, self.apply_S(p))

    def _setup_components(self):
        l = self.space.l
        if self.space.is_manifold():
            self.n_components = 1
            self.component_label = np.zeros(l, dtype=np.int64)
            return
        E = self.space.neighborhoods.reshape(-1, 2)
        graph = sparse.csr_matrix(
            (np.ones(E.shape[0]), (E[:, 0], E[:, 1])), shape=(l, l))
        ncomp, label = connected_components(graph, directed=False)
        self.n_components = int(ncomp)
        self.component_label = label

    def _setup_gram(self):
        """Grounded factorization of S^T S for the dual-feasibility correction."""
        gram = (self.ST @ self.S).tocsc()
        l = self.space.l
        ground = np.zeros(l, dtype=bool)
        for comp in range(self.n_components):
            ground[np.argmax(self.component_label == comp)] = True
        keep = ~ground
        self._keep = keep
        reduced = gram[keep][:, keep].tocsc()
        if reduced.shape[0]:
            self._gram_lu = splu(reduced)
        else:
            self._gram_lu = None

    def gram_solve(self, r: np.ndarray) -> np.ndarray:
        """Solve S^T S x = r for r (l, K) orthogonal to the component indicators."""
        x = np.zeros_like(r)
        if self._gram_lu is not None:
            x[self._keep] = self._gram_lu.solve(r[self._keep])
        return x

    def _setup_elimination(self):
        """Sparse T = blockdiag(A^{-1}) S and its grounded Gram factorization."""
        if getattr(self, "_T", None) is not None:
            return
        m, s, l = self.m, self.s, self.space.l
        if m == 0:
            self._T = sparse.csr_matrix((0, l))
            self._TT = self._T.T.tocsr()
            self._gramT_lu = None
            return
        S = self.S.tocsr()
        rows = []
        for j in range(m):
            rows.append(self.Ainv[j] @ S[j * s:(j + 1) * s, :].toarray())
        self._T = sparse.csr_matrix(np.vstack(rows))
        self._TT = self._T.T.tocsr()
        gram = (self._TT @ self._T).tocsc()
        reduced = gram[self._keep][:, self._keep].tocsc()
        self._gramT_lu = splu(reduced) if reduced.shape[0] else None

    def apply_T(self, p: np.ndarray) -> np.ndarray:
        self._setup_elimination()
        tail = p.shape[1:]
        out = self._T @ p.reshape(p.shape[0], -1)
        return out.reshape(self.m, self.s, *tail)

    def apply_TTr(self, y: np.ndarray) -> np.ndarray:
        self._setup_elimination()
        tail = y.shape[2:]
        out = self._TT @ y.reshape(self.m * self.s, -1)
        return out.reshape(-1, *tail)

    def gramT_solve(self, r: np.ndarray) -> np.ndarray:
        self._setup_elimination()
        x = np.zeros_like(r)
        if self._gramT_lu is not None:
            x[self._keep] = self._gramT_lu.solve(r[self._keep])
        return x

    def operator_norm(self) -> float:
        """||q -> (S^T q, A q)|| by power iteration (cached)."""
        if self._op_norm is not None:
            return self._op_norm
        if self.m == 0:
            self._op_norm = 0.0
            return 0.0
        rng = np.random.default_rng(12345)
        v = rng.normal(size=(self.m, self.s))
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(500):
            w = self.apply_S(self.apply_ST(v)) + self.apply_A(self.apply_A(v))
            nw = np.linalg.norm(w)
            if nw == 0:
                lam = 0.0
                break
            w /= nw
            if abs(nw - lam) <= 1e-12 * max(nw, 1.0):
                lam = nw
                break
            lam = nw
            v = w
        self._op_norm = float(np.sqrt(lam))
        return self._op_norm


class CertifiedSup:
    """Certified sup of <W, p> over mesh-Lipschitz-constrained dual fields.

    Evaluates, batched over the trailing axis of W (l, dd, n),

        h_i = sup { <W_i, p> : A g = S p, ||g^j|| <= radius for all j }

    and returns (sum_i lower_i, sum_i upper_i, state).  Lower and upper
    bounds are exact-feasibility certificates; the gap between them is
    driven below ``tol``.
    """

    def __init__(self, op: LipschitzOperator, norm: str = "spectral"):
        self.op = op
        self.norm = norm
        self._conic_cache = {}

    def _conic_supported(self, dd: int) -> bool:
        if _clarabel is None or self.op.m == 0:
            return False
        s = self.op.s
        if self.norm == "frobenius" or s == 1 or dd == 1:
            return True
        return self.norm == "spectral" and s == 2 and dd == 2

    def _conic_template(self, dd: int):
        """Per-point SOCP template: min c^T x s.t. T^T y = W_i, block cones.

        Variables x = [y (m*s*dd), t (m)]; the equality block drops one
        grounded row per component and spatial axis.
        """
        if dd in self._conic_cache:
            return self._conic_cache[dd]
        op = self.op
        op._setup_elimination()
        m, s, l = op.m, op.s, op.space.l
        nv = m * s * dd + m
        Tcsc = op._T.tocsc()
        rows, cols, data = [], [], []
        eq_rows = np.where(op._keep)[0]       # grounded indices dropped
        rr = 0
        for k in eq_rows:
            col = Tcsc[:, k].tocoo()
            for js, val in zip(col.row, col.data):
                for t in range(dd):
                    rows.append(rr + t)
                    cols.append(js * dd + t)
                    data.append(val)
            rr += dd
        neq = rr
        cones = [_clarabel.ZeroConeT(neq)]
        cost = np.zeros(nv)

        def yidx(j, sdx, t):
            return (j * s + sdx) * dd + t

        spectral22 = self.norm == "spectral" and s == 2 and dd == 2
        for j in range(m):
            tcol = m * s * dd + j
            if spectral22:
                # nuclear(2x2) = 2 max(|a+|, |a-|) via the rotation split
                cost[tcol] = 2.0
                rows += [rr]; cols += [tcol]; data += [-1.0]
                rows += [rr + 1, rr + 1]
                cols += [yidx(j, 0, 0), yidx(j, 1, 1)]
                data += [-0.5, -0.5]
                rows += [rr + 2, rr + 2]
                cols += [yidx(j, 0, 1), yidx(j, 1, 0)]
                data += [-0.5, 0.5]
                rr += 3
                rows += [rr]; cols += [tcol]; data += [-1.0]
                rows += [rr + 1, rr + 1]
                cols += [yidx(j, 0, 0), yidx(j, 1, 1)]
                data += [-0.5, 0.5]
                rows += [rr + 2, rr + 2]
                cols += [yidx(j, 0, 1), yidx(j, 1, 0)]
                data += [-0.5, -0.5]
                rr += 3
                cones += [_clarabel.SecondOrderConeT(3),
                          _clarabel.SecondOrderConeT(3)]
            else:
                # vector blocks (or Frobenius): dual norm is Euclidean
                cost[tcol] = 1.0
                rows += [rr]; cols += [tcol]; data += [-1.0]
                rr += 1
                for sdx in range(s):
                    for t in range(dd):
                        rows.append(rr)
                        cols.append(yidx(j, sdx, t))
                        data.append(-1.0)
                        rr += 1
                cones.append(_clarabel.SecondOrderConeT(1 + s * dd))
        A = sparse.csc_matrix((data, (rows, cols)), shape=(rr, nv))
        P = sparse.csc_matrix((nv, nv))
        settings = _clarabel.DefaultSettings()
        settings.verbose = False
        tpl = {"A": A, "P": P, "cost": cost, "cones": cones, "neq": neq,
               "nrows": rr, "eq_rows": eq_rows, "nv": nv, "settings": settings}
        self._conic_cache[dd] = tpl
        return tpl

    def _conic_value(self, W: np.ndarray, radius: float):
        """Exact certified bracket by per-point interior-point solves.

        Returns (lower, upper) or None when any subproblem fails.
        """
        op = self.op
        l, dd, n = W.shape
        tpl = self._conic_template(dd)
        m, s = op.m, op.s
        scale = np.abs(W).max()
        if scale == 0.0:
            return 0.0, 0.0
        skip_tol = 1e-14 * scale
        # crude sup bound for skipped columns: diameter times total variation
        diam = float(op.space.distances.max()) * 2.0 + 1.0
        lower = 0.0
        upper = 0.0
        for i in range(n):
            Wi = W[:, :, i]
            amax = np.abs(Wi).max()
            if amax <= skip_tol:
                upper += radius * diam * float(np.abs(Wi).sum())
                continue
            b = np.zeros(tpl["nrows"])
            b[:tpl["neq"]] = Wi[tpl["eq_rows"], :].ravel()
            solver = _clarabel.DefaultSolver(tpl["P"], tpl["cost"], tpl["A"],
                                             b, tpl["cones"], tpl["settings"])
            sol = solver.solve()
            if str(sol.status) not in ("Solved", "AlmostSolved"):
                return None
            x = np.asarray(sol.x)
            y = x[: m * s * dd].reshape(m, s, dd)
            # exact dual feasibility: correct onto T^T y = W_i
            r = Wi - op.apply_TTr(y[:, :, :, None])[..., 0]
            xcorr = op.gramT_solve(r)
            y = y + op.apply_T(xcorr[:, :, None])[..., 0]
            upper += radius * float(
                block_dual_norm(np.moveaxis(y[:, :, :, None], 3, 1),
                                self.norm).sum())
            # primal feasibility: potentials from the equality duals
            z = np.asarray(sol.z)[: tpl["neq"]].reshape(-1, dd)
            p = np.zeros((l, dd))
            p[tpl["eq_rows"], :] = z
            val = float(np.sum(Wi * p))
            if val < 0:
                p = -p
                val = -val
            ghat = op.apply_T(p[:, :, None])[..., 0]
            bn = block_norm(np.moveaxis(ghat[:, :, :, None], 3, 1),
                            self.norm).max()
            gamma = max(1.0, bn / radius)
            lower += max(0.0, val / gamma)
        return lower, upper

    def _imbalance(self, W: np.ndarray) -> float:
        lab = self.op.component_label
        worst = 0.0
        for comp in range(self.op.n_components):
            mask = lab == comp
            worst = max(worst, float(np.abs(W[mask].sum(axis=0)).max()))
        return worst

    def _twopoint_exact(self, W: np.ndarray, radius: float):
        d01 = float(self.op.space.distances[0, 1])
        val = radius * d01 * 0.5 * (
            np.linalg.norm(W[0], axis=0) + np.linalg.norm(W[1], axis=0))
        total = float(val.sum())
        return total, total, None

    def evaluate(self, W: np.ndarray, radius: float, tol: float = 1e-9,
                 state: dict | None = None, max_iter: int = 500_000):
        """Certified bracket of the summed sup values.

        Args:
            W: (l, dd, n) pairing coefficients (already volume weighted).
            radius: norm bound on the gradient blocks.
            tol: required upper - lower certificate width (absolute).
            state: warm-start dict from a previous call on the same geometry.
            max_iter: inner iteration budget; the bracket is returned even
                if it is wider than tol.

        Returns:
            (lower, upper, state)
        """
        op = self.op
        l, dd, n = W.shape
        if op.m == 0:
            # no constraints: sup is 0 if W = 0 and +inf otherwise
            if np.abs(W).max(initial=0.0) > 1e-12:
                return np.inf, np.inf, state
            return 0.0, 0.0, state
        if self._imbalance(W) > 1e-12:
            return np.inf, np.inf, state
        if op.space.kind == "finite" and l == 2 and op.m == 1:
            return self._twopoint_exact(W, radius)

        m, s = op.m, op.s
        kn = op.operator_norm()
        base = 0.99 / max(kn, 1e-30)
        if state is None:
            state = {
                "p": np.zeros((l, dd, n)),
                "g": np.zeros((m, s, dd, n)),
                "q": np.zeros((m, s, dd, n)),
                "tau": base, "sigma": base, "alpha": 0.5,
            }
        p, g, q = state["p"], state["g"], state["q"]
        tau = state.get("tau", base)
        sigma = state.get("sigma", base)
        alpha = state.get("alpha", 0.5)

        check = 100
        stq = op.apply_ST(q)
        aq = op.apply_A(q)
        stq_prev, aq_prev = stq, aq
        r_prev = op.apply_A(g) - op.apply_S(p)
        lo, hi = self._certify(W, p, q, radius)
        if hi - lo > tol and self._conic_supported(dd):
            res = self._conic_value(W, radius)
            if res is not None:
                lo = max(lo, res[0])
                hi = min(hi, max(res[1], lo))
                state = {"p": p, "g": g, "q": q, "tau": tau, "sigma": sigma,
                         "alpha": alpha}
                return lo, hi, state
        it = 0
        while hi - lo > tol and it < max_iter:
            for _ in range(check):
                p_new = p + sigma * (W - (2.0 * stq - stq_prev))
                g_new = project_ball_msdn(
                    g + sigma * (2.0 * aq - aq_prev), radius, self.norm)
                r_new = op.apply_A(g_new) - op.apply_S(p_new)
                q_new = q - tau * r_new
                stq_new = op.apply_ST(q_new)
                aq_new = op.apply_A(q_new)
                if alpha >= 1e-4:
                    # residual balancing; operator caches make it cheap
                    pres = np.linalg.norm(2.0 * r_new - r_prev)
                    dp = (p - p_new) / sigma + (stq - stq_new)
                    dg = (g - g_new) / sigma - (aq - aq_new)
                    dres = np.sqrt(np.sum(dp * dp) + np.sum(dg * dg))
                    if pres > dres and dres > 0:
                        tau /= (1.0 - alpha)
                        sigma *= (1.0 - alpha)
                        alpha *= 0.95
                    elif dres > pres and pres > 0:
                        tau *= (1.0 - alpha)
                        sigma /= (1.0 - alpha)
                        alpha *= 0.95
                p, g, q = p_new, g_new, q_new
                stq_prev, stq = stq, stq_new
                aq_prev, aq = aq, aq_new
                r_prev = r_new
            it += check
            lo, hi = self._certify(W, p, q, radius)
        state = {"p": p, "g": g, "q": q, "tau": tau, "sigma": sigma,
                 "alpha": alpha}
        return lo, hi, state

    def _certify(self, W, p, q, radius):
        op = self.op
        # lower bound: scale p into the feasible set via eliminated gradients
        ghat = op.eliminate(p)                                  # (m, s, dd, n)
        bn = block_norm(_to_blocks(ghat), self.norm)            # (m, n)
        gamma = np.maximum(1.0, bn.max(axis=0) / radius)
        vals = np.einsum("kdn,kdn->n", W, p)
        lower = float(np.maximum(vals / gamma, 0.0).sum())
        # upper bound: correct q onto S^T q = W, sum dual block norms
        r = W - op.apply_ST(q)
        x = op.gram_solve(r.reshape(r.shape[0], -1)).reshape(r.shape)
        qc = q + op.apply_S(x)
        dn = block_dual_norm(_to_blocks(op.apply_A(qc)), self.norm)
        upper = float(radius * dn.sum())
        return lower, upper
