"""Primal-dual hybrid gradient solver for the measure-valued TV models.

One PDHG loop updates all blocks: dual ascent on (p, g) and, for W1-TV,
(p0, g0), with exact ball projections on the gradient blocks; primal
descent on u (weighted-simplex projection, plus the quadratic prox for
L2-TV) and on the Lagrange multipliers of the gradient equality
constraints.  Over-relaxation uses theta = 1.

Step sizes satisfy tau * sigma * ||K||^2 <= 1 with ||K|| estimated by power
iteration in the b-weighted metrics.  When adaptivity is on, tau and sigma
are rebalanced from the primal/dual fixed-point residuals while their
product is preserved; the adaptation weight alpha decays geometrically and
adaptation stops below a floor.

Energies are evaluated every ``check_every`` iterations: the primal side
through warm-started certified inner maximizations (so it never
undershoots), the dual side by rescaling the current iterate into the
feasible set.  Weak duality therefore holds at every checkpoint, and the
reported relative gap is an upper bound on the true one.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .lipschitz import _to_blocks, block_norm, project_ball_msdn
from .models import DualFields, Energy, MeasureImage, SaddleProblem
from .proximal import project_weighted_simplex

__all__ = ["SolverConfig", "SolverReport", "CheckpointRow",
           "estimate_operator_norm", "solve", "SolverDiagnosticError"]


class SolverDiagnosticError(RuntimeError):
    """Non-finite iterate, naming the iteration and the offending block."""


@dataclass
class SolverConfig:
    """Iteration, step-size and termination parameters."""

    max_iter: int = 100_000
    gap_tol: float = 1e-5
    check_every: int = 5000
    tau: float | None = None
    sigma: float | None = None
    adaptive: bool = True
    alpha0: float = 0.5
    eta: float = 0.95
    balance_ratio: float = 1.0
    balance_every: int = 10
    adapt_floor: float = 1e-4
    precondition: bool = False
    norm_flag: str | None = None
    seed: int = 0
    inner_max_iter: int = 3000
    ergodic: bool = True
    restart: bool = True
    restart_every: int = 1000
    verbose: bool = True

    def __post_init__(self):
        if self.gap_tol <= 0:
            raise ValueError("gap_tol must be positive")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if (self.tau is None) != (self.sigma is None):
            raise ValueError("give both tau and sigma or neither")
        if self.tau is not None and (self.tau <= 0 or self.sigma <= 0):
            raise ValueError("step sizes must be positive")
        if not 0 < self.alpha0 < 1 or not 0 < self.eta <= 1:
            raise ValueError("need 0 < alpha0 < 1 and 0 < eta <= 1")
        if self.precondition and self.adaptive:
            # residual balancing assumes scalar steps
            object.__setattr__(self, "adaptive", False)


@dataclass
class CheckpointRow:
    iteration: int
    primal: float
    dual: float
    gap_rel: float
    tau: float
    sigma: float


@dataclass
class SolverReport:
    u: MeasureImage
    iterations: int
    trace: list
    termination: str
    wall_time: float
    operator_norm: float
    simplex_violation: float
    equality_residual_rel: float
    duals: DualFields
    config: SolverConfig = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.termination == "Converged"

    def trace_dicts(self) -> list:
        return [row.__dict__.copy() for row in self.trace]


# -- operator application in the weighted metrics ---------------------------

def _k_apply(pr: SaddleProblem, u, q, q0):
    """K x for x = (u, q[, q0]); components live in the dual space."""
    binv = 1.0 / pr.volumes
    P = pr.apply_D(u)
    if pr.m:
        P -= binv[:, None, None] * pr.op.apply_ST(q).reshape(pr.l, pr.d, pr.n_stag)
        G = pr.op.apply_A(q)
    else:
        G = q * 0.0
    if pr.model == "w1tv":
        P0 = u.copy()
        if pr.m:
            P0 -= binv[:, None] * pr.op.apply_ST(q0).reshape(pr.l, pr.n)
            G0 = pr.op.apply_A(q0)
        else:
            G0 = q0 * 0.0
        return {"P": P, "P0": P0, "G": G, "G0": G0}
    return {"P": P, "P0": None, "G": G, "G0": None}


def _kt_apply(pr: SaddleProblem, p, p0, g, g0):
    """K* y for y = (p[, p0], g[, g0]); components live in the primal space."""
    U = pr.apply_negdiv(p)
    if pr.model == "w1tv":
        U = U + p0
    if pr.m:
        Q = pr.op.apply_A(g) - pr.op.apply_S(p.reshape(pr.l, -1)).reshape(g.shape)
        Q0 = None
        if pr.model == "w1tv":
            Q0 = pr.op.apply_A(g0) - pr.op.apply_S(p0)
    else:
        Q = g * 0.0
        Q0 = g0 * 0.0 if g0 is not None else None
    return {"U": U, "Q": Q, "Q0": Q0}


def _xnorm2(pr, u, q, q0):
    t = float(np.einsum("kn,kn,k->", u, u, pr.volumes))
    t += float(np.sum(q * q))
    if q0 is not None:
        t += float(np.sum(q0 * q0))
    return t


def _ynorm2(pr, P, P0, G, G0):
    t = float(np.einsum("kdn,kdn,k->", P, P, pr.volumes))
    t += float(np.sum(G * G))
    if P0 is not None:
        t += float(np.einsum("kn,kn,k->", P0, P0, pr.volumes))
    if G0 is not None:
        t += float(np.sum(G0 * G0))
    return t


def estimate_operator_norm(problem: SaddleProblem, seed: int = 0,
                           tol: float = 1e-7, max_iter: int = 2000) -> float:
    """||K|| of the stacked coupling operator by power iteration.

    Deterministic under the seed; relative accuracy well below the 1e-3
    required by the step-size rule on the problem sizes in scope.
    """
    pr = problem
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(pr.l, pr.n))
    q = rng.normal(size=(pr.m, pr.s, pr.d, pr.n_stag))
    q0 = rng.normal(size=(pr.m, pr.s, pr.n)) if pr.model == "w1tv" else None
    nx = np.sqrt(_xnorm2(pr, u, q, q0))
    if nx == 0:
        return 0.0
    u, q = u / nx, q / nx
    if q0 is not None:
        q0 = q0 / nx
    lam_prev = 0.0
    lam = 0.0
    for _ in range(max_iter):
        y = _k_apply(pr, u, q, q0)
        lam = _ynorm2(pr, y["P"], y["P0"], y["G"], y["G0"])
        if lam == 0.0:
            return 0.0
        x = _kt_apply(pr, y["P"], y["P0"], y["G"], y["G0"])
        u, q, q0n = x["U"], x["Q"], x["Q0"]
        nx = np.sqrt(_xnorm2(pr, u, q, q0n))
        if nx == 0:
            return 0.0
        u, q = u / nx, q / nx
        q0 = q0n / nx if q0n is not None else None
        if abs(lam - lam_prev) <= tol * max(lam, 1e-30):
            break
        lam_prev = lam
    return float(np.sqrt(lam))


# -- diagonal (group) preconditioning ---------------------------------------

def _precond_steps(pr: SaddleProblem):
    """Pock-Chambolle alpha=1 row/column-sum steps in sqrt(b) coordinates.

    Steps are grouped so every proximal map stays exact: scalar per voxel
    for u, scalar per gradient block for g/g0, entrywise elsewhere.
    """
    from .image_grid import grad_abs_rowsums, negdiv_abs_colsums

    b = pr.volumes
    sqb = np.sqrt(b)

    drow = grad_abs_rowsums(pr.grid).reshape(pr.d, pr.n_stag)
    dcol = negdiv_abs_colsums(pr.grid).reshape(pr.n)

    if pr.m:
        Sabs = abs(pr.op.S)
        s_col = np.asarray(Sabs.sum(axis=0)).ravel() / sqb          # (l,)
        s_row = (Sabs @ (1.0 / sqb)).reshape(pr.m, pr.s)            # (m, s)
        a_abs = np.abs(pr.op.A)
        a_row = a_abs.sum(axis=2)                                    # (m, s)
        a_col = a_abs.sum(axis=1)                                    # (m, s)
    else:
        s_col = np.zeros(pr.l)
        s_row = a_row = a_col = np.zeros((0, pr.s))

    def inv(x):
        return np.where(x > 0, 1.0 / np.where(x > 0, x, 1.0), 0.0)

    sig_p = inv(drow[None, :, :] + s_col[:, None, None])         # (l, d, n_stag)
    sig_g = inv(a_row.max(axis=1))[:, None, None, None] if pr.m else np.zeros((0, 1, 1, 1))
    tau_q = inv(s_row + a_col)[:, :, None, None] if pr.m else np.zeros((0, pr.s, 1, 1))

    is_w1 = pr.model == "w1tv"
    tau_u = inv(dcol + (1.0 if is_w1 else 0.0))[None, :]             # (1, n)
    steps = {"sig_p": sig_p, "sig_g": sig_g, "tau_u": tau_u, "tau_q": tau_q}
    if is_w1:
        steps["sig_p0"] = inv(1.0 + s_col)[:, None]                  # (l, 1)
        steps["sig_g0"] = inv(a_row.max(axis=1))[:, None, None] if pr.m else np.zeros((0, 1, 1))
        steps["tau_q0"] = inv(s_row + a_col)[:, :, None] if pr.m else np.zeros((0, pr.s, 1))
    return steps


# -- main loop ---------------------------------------------------------------

def solve(problem: SaddleProblem, config: SolverConfig | None = None) -> SolverReport:
    """Run PDHG on the assembled saddle problem until the certified relative
    primal-dual gap falls below ``gap_tol`` or the iteration budget is spent.
    """
    pr = problem
    cfg = config or SolverConfig()
    if cfg.norm_flag is not None and cfg.norm_flag != pr.norm:
        raise ValueError(
            f"problem was built with norm {pr.norm!r}; rebuild it to use "
            f"{cfg.norm_flag!r}")
    t_start = time.perf_counter()
    is_w1 = pr.model == "w1tv"
    b = pr.volumes
    f = pr._f_lk
    lam = pr.lam

    knorm = estimate_operator_norm(pr, seed=cfg.seed)
    if cfg.tau is not None:
        tau, sigma = float(cfg.tau), float(cfg.sigma)
        if tau * sigma * knorm ** 2 > 1.0 + 1e-9:
            raise ValueError("step sizes violate tau*sigma*||K||^2 <= 1")
    else:
        base = 0.99 / max(knorm * (1.0 + 1e-3), 1e-12)
        tau = sigma = base

    steps = _precond_steps(pr) if cfg.precondition else None

    # primal blocks
    u = np.full((pr.l, pr.n), 1.0 / pr.space.total_volume)
    q = np.zeros((pr.m, pr.s, pr.d, pr.n_stag))
    q0 = np.zeros((pr.m, pr.s, pr.n)) if is_w1 else None
    # dual blocks (p, g live on the staggered dual nodes)
    p = np.zeros((pr.l, pr.d, pr.n_stag))
    g = np.zeros((pr.m, pr.s, pr.d, pr.n_stag))
    p0 = np.zeros((pr.l, pr.n)) if is_w1 else None
    g0 = np.zeros((pr.m, pr.s, pr.n)) if is_w1 else None

    kx = _k_apply(pr, u, q, q0)
    kx_prev = {k: (v.copy() if v is not None else None) for k, v in kx.items()}
    kty_prev = {"U": np.zeros((pr.l, pr.n)),
                "Q": np.zeros((pr.m, pr.s, pr.d, pr.n_stag)),
                "Q0": np.zeros((pr.m, pr.s, pr.n)) if is_w1 else None}

    alpha = cfg.alpha0
    trace: list = []
    primal_scale = 1.0
    gap_abs_prev = np.inf
    termination = "MaxIter"
    it = 0
    u_best = u

    window = 0
    best_dual_fields = None
    if cfg.ergodic:
        sums = {"u": np.zeros_like(u), "q": np.zeros_like(q),
                "p": np.zeros_like(p), "g": np.zeros_like(g)}
        if is_w1:
            sums.update({"q0": np.zeros_like(q0), "p0": np.zeros_like(p0),
                         "g0": np.zeros_like(g0)})
        anchor = {"u": u.copy(), "q": q.copy(), "p": p.copy(), "g": g.copy()}
        if is_w1:
            anchor.update({"q0": q0.copy(), "p0": p0.copy(), "g0": g0.copy()})

    def _fp_residual(u_e, q_e, q0_e, p_e, g_e, p0_e, g0_e):
        """Fixed-point residual of a candidate point under one PDHG sweep."""
        kty_e = _kt_apply(pr, p_e, p0_e, g_e, g0_e)
        if is_w1:
            u_n = project_weighted_simplex(u_e - tau * kty_e["U"], b, axis=0)
        else:
            u_n = project_weighted_simplex(
                (u_e - tau * kty_e["U"] + 2.0 * tau * f) / (1.0 + 2.0 * tau),
                b, axis=0)
        q_n = q_e - tau * kty_e["Q"] if pr.m else q_e
        q0_n = (q0_e - tau * kty_e["Q0"]) if (is_w1 and pr.m) else q0_e
        rx = _xnorm2(pr, (u_e - u_n) / tau,
                     (q_e - q_n) / tau if pr.m else q_e * 0.0,
                     None if not is_w1 else
                     ((q0_e - q0_n) / tau if pr.m else q0_e * 0.0))
        kx_e = _k_apply(pr, u_e, q_e, q0_e)
        p_n = p_e + sigma * kx_e["P"]
        if pr.m:
            g_n = project_ball_msdn(g_e + sigma * kx_e["G"], lam, pr.norm)
        else:
            g_n = g_e
        ry = float(np.einsum("kdn,kdn,k->", (p_e - p_n) / sigma,
                             (p_e - p_n) / sigma, b))
        ry += float(np.sum(((g_e - g_n) / sigma) ** 2))
        if is_w1:
            p0_n = p0_e + sigma * (kx_e["P0"] - f)
            g0_n = _ball3(g0_e + sigma * kx_e["G0"]) if pr.m else g0_e
            ry += float(np.einsum("kn,kn,k->", (p0_e - p0_n) / sigma,
                                  (p0_e - p0_n) / sigma, b))
            ry += float(np.sum(((g0_e - g0_n) / sigma) ** 2))
        return np.sqrt(rx + ry)

    def _feasible_duals(p_e, p0_e):
        """Rescale a dual iterate into the constraint sets (exact bound)."""
        if pr.m:
            ghat = pr.op.eliminate(p_e.reshape(pr.l, -1)).reshape(
                pr.m, pr.s, pr.d, pr.n_stag)
            bn = block_norm(_to_blocks(ghat), pr.norm)
            gamma = max(1.0, float(bn.max()) / lam)
        else:
            gamma = 1.0
        p_f = p_e / gamma
        p0_f = None
        if is_w1:
            g0hat = pr.op.eliminate(p0_e)
            gamma0 = max(1.0, float(np.sqrt(
                np.einsum("jan,jan->jn", g0hat, g0hat)).max()))
            p0_f = p0_e / gamma0
        return p_f, p0_f

    def _dual_value_fields(p_f, p0_f):
        """Exact dual value of feasible fields (per-voxel vertex minimum)."""
        v = pr.apply_negdiv(p_f)
        if is_w1:
            vv = v + p0_f
            const = -float(np.einsum("kn,kn,k->", f, p0_f, b))
            return const + float(vv.min(axis=0).sum())
        target = f - 0.5 * v
        ustar = project_weighted_simplex(target, b, axis=0)
        diff = ustar - f
        return float(np.einsum("kn,kn,k->", diff, diff, b)
                     + np.einsum("kn,kn,k->", ustar, v, b))

    def _dual_hull(cands):
        """Maximize the dual exactly over the convex hull of candidates.

        For W1-TV the dual is piecewise linear in the fields, so the hull
        maximum is a small LP; it returns the value and the combined fields.
        """
        if len(cands) == 1:
            p_f, p0_f = cands[0]
            return _dual_value_fields(p_f, p0_f), cands[0]
        if not is_w1:
            best_val, best = -np.inf, None
            for cand in cands:
                val = _dual_value_fields(*cand)
                if val > best_val:
                    best_val, best = val, cand
            return best_val, best
        from scipy import sparse as _sp
        from scipy.optimize import linprog as _linprog
        C = len(cands)
        V = np.stack([pr.apply_negdiv(pc) + p0c for pc, p0c in cands],
                     axis=2)                                   # (l, n, C)
        consts = np.array([-float(np.einsum("kn,kn,k->", f, p0c, b))
                           for _, p0c in cands])
        nvox = pr.n
        # vars: alpha (C) then t (n); maximize sum t + consts @ alpha
        cost = np.concatenate([-consts, -np.ones(nvox)])
        rows, cols, data = [], [], []
        rr = 0
        for k in range(pr.l):
            for i in range(nvox):
                rows.append(rr); cols.append(C + i); data.append(1.0)
                for c in range(C):
                    rows.append(rr); cols.append(c); data.append(-V[k, i, c])
                rr += 1
        A_ub = _sp.csr_matrix((data, (rows, cols)), shape=(rr, C + nvox))
        A_eq = _sp.csr_matrix((np.ones(C), (np.zeros(C), np.arange(C))),
                              shape=(1, C + nvox))
        bounds = [(0, None)] * C + [(None, None)] * nvox
        res = _linprog(cost, A_ub=A_ub, b_ub=np.zeros(rr), A_eq=A_eq,
                       b_eq=[1.0], bounds=bounds, method="highs")
        if res.status != 0:
            best_val, best = -np.inf, None
            for cand in cands:
                val = _dual_value_fields(*cand)
                if val > best_val:
                    best_val, best = val, cand
            return best_val, best
        alpha = res.x[:C]
        p_c = sum(a * pc for a, (pc, _) in zip(alpha, cands))
        p0_c = sum(a * p0c for a, (_, p0c) in zip(alpha, cands))
        return float(-res.fun), (p_c, p0_c)

    def _primal_at(u_e, p_e, g_e, q_e, p0_e, g0_e, q0_e, width):
        tv_state = {"p": p_e / lam, "g": g_e / lam, "q": q_e.copy()}
        _, tv_hi, _ = pr.tv_bracket(u_e, tol=0.5 * width / max(lam, 1.0),
                                    state=tv_state,
                                    max_iter=cfg.inner_max_iter)
        if is_w1:
            data_state = {"p": p0_e[:, None, :].copy(),
                          "g": g0_e[:, :, None, :].copy(),
                          "q": q0_e[:, :, None, :].copy()}
            _, dat_hi, _ = pr.data_bracket(u_e, tol=0.5 * width,
                                           state=data_state,
                                           max_iter=cfg.inner_max_iter)
        else:
            dat_hi = pr.data_term_exact(u_e)
        return dat_hi + lam * tv_hi

    def dual_step(arr, key):
        return (steps[key] if steps is not None else sigma) * arr

    def primal_step(arr, key):
        return (steps[key] if steps is not None else tau) * arr

    while it < cfg.max_iter:
        it += 1
        # dual ascent at the extrapolated primal point (theta = 1)
        bar_P = 2.0 * kx["P"] - kx_prev["P"]
        p_new = p + dual_step(bar_P, "sig_p")
        if pr.m:
            bar_G = 2.0 * kx["G"] - kx_prev["G"]
            g_new = project_ball_msdn(g + dual_step(bar_G, "sig_g"), lam, pr.norm)
        else:
            g_new = g
        if is_w1:
            bar_P0 = 2.0 * kx["P0"] - kx_prev["P0"]
            p0_new = p0 + dual_step(bar_P0 - f, "sig_p0")
            if pr.m:
                bar_G0 = 2.0 * kx["G0"] - kx_prev["G0"]
                g0_new = _ball3(g0 + dual_step(bar_G0, "sig_g0"))
            else:
                g0_new = g0
        else:
            p0_new, g0_new = None, None

        # primal descent
        kty = _kt_apply(pr, p_new, p0_new, g_new, g0_new)
        if is_w1:
            u_new = project_weighted_simplex(u - primal_step(kty["U"], "tau_u"), b, axis=0)
        else:
            tau_u = steps["tau_u"] if steps is not None else tau
            u_new = project_weighted_simplex(
                (u - tau_u * kty["U"] + 2.0 * tau_u * f) / (1.0 + 2.0 * tau_u),
                b, axis=0)
        q_new = q - primal_step(kty["Q"], "tau_q") if pr.m else q
        q0_new = (q0 - primal_step(kty["Q0"], "tau_q0")) if (is_w1 and pr.m) else q0

        kx_new = _k_apply(pr, u_new, q_new, q0_new)

        # residual balancing (Goldstein-style), scalar steps only
        if cfg.adaptive and alpha >= cfg.adapt_floor and it % cfg.balance_every == 0:
            pres = _xnorm2(pr, (u - u_new) / tau - (kty_prev["U"] - kty["U"]),
                           (q - q_new) / tau - (kty_prev["Q"] - kty["Q"]),
                           None if not is_w1 else
                           (q0 - q0_new) / tau - (kty_prev["Q0"] - kty["Q0"]))
            dres = _ynorm2(pr,
                           (p - p_new) / sigma - (kx["P"] - kx_new["P"]),
                           None if not is_w1 else
                           (p0 - p0_new) / sigma - (kx["P0"] - kx_new["P0"]),
                           (g - g_new) / sigma - (kx["G"] - kx_new["G"]),
                           None if not is_w1 else
                           (g0 - g0_new) / sigma - (kx["G0"] - kx_new["G0"]))
            pres, dres = np.sqrt(pres), np.sqrt(dres)
            if pres > cfg.balance_ratio * dres and dres > 0:
                tau /= (1.0 - alpha)
                sigma *= (1.0 - alpha)
                alpha *= cfg.eta
            elif dres > cfg.balance_ratio * pres and pres > 0:
                tau *= (1.0 - alpha)
                sigma /= (1.0 - alpha)
                alpha *= cfg.eta

        u, q, q0 = u_new, q_new, q0_new
        p, g, p0, g0 = p_new, g_new, p0_new, g0_new
        kx_prev, kx = kx, kx_new
        kty_prev = kty

        if cfg.ergodic:
            sums["u"] += u
            sums["q"] += q
            sums["p"] += p
            sums["g"] += g
            if is_w1:
                sums["q0"] += q0
                sums["p0"] += p0
                sums["g0"] += g0
            window += 1

        if (cfg.ergodic and cfg.restart and window >= cfg.restart_every
                and it % cfg.restart_every == 0):
            # restarted averaging: continue from the window mean when its
            # fixed-point residual beats the current iterate's
            inv = 1.0 / window
            avg = {k: v * inv for k, v in sums.items()}
            if not is_w1:
                avg.update({"p0": None, "g0": None, "q0": None})
            res_avg = _fp_residual(avg["u"], avg["q"], avg["q0"],
                                   avg["p"], avg["g"], avg["p0"], avg["g0"])
            res_cur = _fp_residual(u, q, q0, p, g, p0, g0)
            if res_avg < res_cur:
                u, q = avg["u"], avg["q"]
                p, g = avg["p"], avg["g"]
                if is_w1:
                    q0, p0, g0 = avg["q0"], avg["p0"], avg["g0"]
            # movement-based primal weight (log-smoothed), product preserved
            dx = np.sqrt(_xnorm2(pr, u - anchor["u"], q - anchor["q"],
                                 None if not is_w1 else q0 - anchor["q0"]))
            dy = np.sqrt(_ynorm2(pr, p - anchor["p"],
                                 None if not is_w1 else p0 - anchor["p0"],
                                 g - anchor["g"],
                                 None if not is_w1 else g0 - anchor["g0"]))
            if dx > 1e-14 and dy > 1e-14:
                prod = tau * sigma
                ratio = np.exp(0.5 * np.log(sigma / tau)
                               + 0.5 * np.log(dy / dx))
                tau = np.sqrt(prod / ratio)
                sigma = np.sqrt(prod * ratio)
            anchor = {"u": u.copy(), "q": q.copy(), "p": p.copy(),
                      "g": g.copy()}
            if is_w1:
                anchor.update({"q0": q0.copy(), "p0": p0.copy(),
                               "g0": g0.copy()})
            kx = _k_apply(pr, u, q, q0)
            kx_prev = {k: (v.copy() if v is not None else None)
                       for k, v in kx.items()}
            kty_prev = _kt_apply(pr, p, p0, g, g0)
            for v in sums.values():
                v[...] = 0.0
            window = 0

        if it % cfg.check_every == 0 or it == cfg.max_iter:
            _check_finite(it, u=u, p=p, g=g, q=q, p0=p0, g0=g0, q0=q0)
            # certificate targets: loose while the gap is large, tight enough
            # near convergence not to mask a true gap <= gap_tol
            width = max(0.05 * cfg.gap_tol * primal_scale, 0.02 * gap_abs_prev)
            # warm-start the certified evaluations from the outer iterates:
            # the multiplier blocks converge to the inner dual certificates
            primal = _primal_at(u, p, g, q, p0, g0, q0, width)
            u_best = u
            cands = [_feasible_duals(p, p0)]
            if cfg.ergodic and window >= 50:
                inv = 1.0 / window
                cands.append(_feasible_duals(
                    sums["p"] * inv, sums["p0"] * inv if is_w1 else None))
            if best_dual_fields is not None:
                cands.append(best_dual_fields)
            dual, best_dual_fields = _dual_hull(cands)
            primal_scale = max(1.0, abs(primal))
            en = Energy(primal, dual)
            gap_abs_prev = max(primal - dual, 0.0)
            trace.append(CheckpointRow(it, primal, dual, en.gap_rel, tau, sigma))
            if cfg.verbose:
                print(f"iter={it} primal={primal:.9e} dual={dual:.9e} "
                      f"gap_rel={en.gap_rel:.3e} tau={tau:.4e} sigma={sigma:.4e}",
                      file=sys.stderr)
            if en.gap_rel <= cfg.gap_tol:
                termination = "Converged"
                break

    wall = time.perf_counter() - t_start
    simplex_violation = float(max(np.abs(b @ u_best - 1.0).max(),
                                  max(0.0, -u_best.min())))
    eq_res = _equality_residual(pr, p, g, p0, g0)
    duals = DualFields(p=p, g=g, p0=p0, g0=g0)
    report = SolverReport(
        u=MeasureImage.from_lk(u_best, pr.grid, pr.space),
        iterations=it,
        trace=trace,
        termination=termination,
        wall_time=wall,
        operator_norm=knorm,
        simplex_violation=simplex_violation,
        equality_residual_rel=eq_res,
        duals=duals,
        config=cfg,
    )
    return report


def _ball3(g0: np.ndarray) -> np.ndarray:
    """Euclidean unit-ball projection of (m, s, n) blocks over the s axis."""
    nrm = np.sqrt(np.einsum("jan,jan->jn", g0, g0))[:, None, :]
    scale = np.where(nrm > 1.0, 1.0 / np.where(nrm > 0, nrm, 1.0), 1.0)
    return g0 * scale


def _check_finite(it: int, **blocks):
    for name, arr in blocks.items():
        if arr is not None and not np.all(np.isfinite(arr)):
            raise SolverDiagnosticError(
                f"non-finite iterate at iteration {it} in block {name!r}")


def _equality_residual(pr: SaddleProblem, p, g, p0, g0) -> float:
    """|| A^j g - B^j P^j p || / ||p|| with the unscaled constraint matrices."""
    if pr.m == 0:
        return 0.0
    scale = getattr(pr.op, "block_scale", None)
    if scale is None:
        scale = np.ones(pr.m)
    res = pr.op.apply_A(g) - pr.op.apply_S(p.reshape(pr.l, -1)).reshape(g.shape)
    res = res * scale[:, None, None, None]
    num = float(np.sum(res * res))
    den = float(np.sum(p * p))
    if pr.model == "w1tv":
        res0 = pr.op.apply_A(g0) - pr.op.apply_S(p0)
        res0 = res0 * scale[:, None, None]
        num += float(np.sum(res0 * res0))
        den += float(np.sum(p0 * p0))
    return np.sqrt(num) / max(np.sqrt(den), 1e-30)
