"""Projections and proximal maps used by the saddle-point iterations.

All operators are batched over arbitrary leading axes and are safe to call
concurrently (no shared state).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "project_weighted_simplex",
    "project_spectral_ball",
    "project_frobenius_ball",
    "prox_quadratic_data",
    "check_product_norm_conditions",
    "ProductNormReport",
]


def project_weighted_simplex(v: np.ndarray, b: np.ndarray, axis: int = -1) -> np.ndarray:
    """Projection onto {u >= 0, <u, b> = 1} in the b-weighted inner product.

    With metric and constraint both carrying the weights b_k > 0 the KKT
    conditions reduce to a uniform shift u = max(v - tau, 0), with tau found
    by sort-and-threshold; ties resolve through the deterministic sorted
    order.
    """
    v = np.asarray(v, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise ValueError("weights b must be positive")
    v = np.moveaxis(v, axis, -1)
    l = v.shape[-1]
    if b.shape != (l,):
        raise ValueError(f"weight vector has shape {b.shape}, expected ({l},)")
    order = np.argsort(-v, axis=-1, kind="stable")
    vs = np.take_along_axis(v, order, axis=-1)
    bs = np.broadcast_to(b, v.shape)
    bs = np.take_along_axis(bs, order, axis=-1)
    cw = np.cumsum(bs, axis=-1)
    cv = np.cumsum(bs * vs, axis=-1)
    tau = (cv - 1.0) / cw
    valid = vs > tau
    # the largest prefix satisfying vs > tau is optimal; index of last True
    rho = l - 1 - np.argmax(valid[..., ::-1], axis=-1)
    tau_star = np.take_along_axis(tau, rho[..., None], axis=-1)
    out = np.maximum(v - tau_star, 0.0)
    return np.moveaxis(out, -1, axis)


def _project_spectral_2x2(g: np.ndarray, radius: float) -> np.ndarray:
    """Closed-form singular value clamp for stacks of 2x2 blocks."""
    a = g[..., 0, 0]
    bb = g[..., 0, 1]
    c = g[..., 1, 0]
    e = g[..., 1, 1]
    p1 = 0.5 * (a + e)
    q1 = 0.5 * (bb - c)
    p2 = 0.5 * (a - e)
    q2 = 0.5 * (bb + c)
    r1 = np.hypot(p1, q1)
    r2 = np.hypot(p2, q2)
    s1 = r1 + r2                    # sigma_max
    s2 = r1 - r2                    # signed sigma_min
    s1c = np.minimum(s1, radius)
    s2c = np.clip(s2, -radius, radius)
    r1c = 0.5 * (s1c + s2c)
    r2c = 0.5 * (s1c - s2c)
    t1 = np.where(r1 > 0, r1c / np.where(r1 > 0, r1, 1.0), 1.0)
    t2 = np.where(r2 > 0, r2c / np.where(r2 > 0, r2, 1.0), 1.0)
    out = np.empty_like(g)
    out[..., 0, 0] = p1 * t1 + p2 * t2
    out[..., 1, 1] = p1 * t1 - p2 * t2
    out[..., 0, 1] = q1 * t1 + q2 * t2
    out[..., 1, 0] = q2 * t2 - q1 * t1
    return out


def project_spectral_ball(g: np.ndarray, radius: float) -> np.ndarray:
    """Frobenius-nearest matrix with spectral norm <= radius (batched).

    Blocks live in the two trailing axes.  Vector-shaped blocks reduce to
    Euclidean ball projection; 2x2 blocks use the explicit rotation split;
    anything else clamps singular values through an SVD.
    """
    g = np.asarray(g, dtype=float)
    if radius <= 0:
        raise ValueError("radius must be positive")
    s, d = g.shape[-2], g.shape[-1]
    if s == 1 or d == 1:
        return project_frobenius_ball(g, radius)
    if s == 2 and d == 2:
        return _project_spectral_2x2(g, radius)
    U, S, Vt = np.linalg.svd(g, full_matrices=False)
    S = np.minimum(S, radius)
    return np.einsum("...ik,...k,...kj->...ij", U, S, Vt)


def project_frobenius_ball(g: np.ndarray, radius: float) -> np.ndarray:
    """Radial scaling onto the Frobenius ball of the trailing two axes."""
    g = np.asarray(g, dtype=float)
    if radius <= 0:
        raise ValueError("radius must be positive")
    nrm = np.sqrt(np.sum(g * g, axis=(-2, -1), keepdims=True))
    scale = np.where(nrm > radius, radius / np.where(nrm > 0, nrm, 1.0), 1.0)
    return g * scale


def prox_quadratic_data(u: np.ndarray, f: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    """Proximal map of the quadratic data term <x - f, x - f>_b.

    In the b-weighted metric the per-component minimizer of
    (1/2 tau) b_k (x - u_k)^2 + b_k (x - f_k)^2 is (u + 2 tau f) / (1 + 2 tau);
    the weights cancel.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    if u.shape != f.shape:
        raise ValueError("u and f must have equal shapes")
    np.asarray(b, dtype=float)
    return (u + 2.0 * tau * f) / (1.0 + 2.0 * tau)


# --- product-norm diagnostics -------------------------------------------

def _snorm(p: np.ndarray, s: float) -> float:
    """(sum_i ||p_i||_2^s)^{1/s} over rows of p (rows live in V* = R^nu)."""
    rn = np.linalg.norm(p, axis=-1)
    return float(np.sum(rn ** s) ** (1.0 / s))


def _norm_value(p: np.ndarray, norm: str, s: float) -> float:
    if norm == "spectral":
        return float(np.linalg.norm(p, ord=2))
    if norm == "frobenius":
        return _snorm(p, 2.0)
    if norm == "s-norm":
        return _snorm(p, s)
    raise ValueError(f"unknown norm tag {norm!r}")


@dataclass
class ProductNormReport:
    """Outcome of randomized checks of the product-norm inequalities."""

    norm: str
    s: float | None
    samples: int
    lower_violations: int = 0
    upper_violations: int = 0
    rotation_violations: int = 0
    max_lower_excess: float = 0.0
    max_upper_excess: float = 0.0
    max_rotation_excess: float = 0.0
    counterexamples: list = field(default_factory=list)

    @property
    def all_hold(self) -> bool:
        return (self.lower_violations == 0 and self.upper_violations == 0
                and self.rotation_violations == 0)

    def as_dict(self) -> dict:
        return {
            "norm": self.norm, "s": self.s, "samples": self.samples,
            "lower_violations": self.lower_violations,
            "upper_violations": self.upper_violations,
            "rotation_violations": self.rotation_violations,
            "max_lower_excess": self.max_lower_excess,
            "max_upper_excess": self.max_upper_excess,
            "max_rotation_excess": self.max_rotation_excess,
            "all_hold": self.all_hold,
            "counterexamples": self.counterexamples,
        }


def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def check_product_norm_conditions(norm: str, samples: int = 1000, seed: int = 0,
                                  s: float | None = None) -> ProductNormReport:
    """Numerically verify the jump-penalty and rotation conditions of a product norm.

    For p in (V*)^d with V = R^nu Euclidean, checks on random samples that

    * |sum_i x_i <p_i, v>| <= ||x||_2 ||p|| ||v||   (lower bound),
    * ||(x_1 q, ..., x_d q)|| <= ||x||_2 ||q||       (upper bound),
    * ||R p|| = ||p|| for rotations R                (rotational invariance),

    and, for the s-norm with s != 2, records the explicit counterexamples
    (s > 2 breaks the lower bound, s < 2 the upper bound, and over
    V = (R^2, ||.||_1) any s breaks rotational invariance).
    """
    if norm not in ("spectral", "frobenius", "s-norm"):
        raise ValueError(f"unknown norm tag {norm!r}")
    if norm == "s-norm":
        if s is None:
            raise ValueError("s-norm requires the exponent s")
        s = float(s)
    rng = np.random.default_rng(seed)
    rep = ProductNormReport(norm=norm, s=s, samples=samples)
    rtol = 1e-10

    for _ in range(samples):
        d = int(rng.integers(2, 4))
        nu = int(rng.integers(1, 5))
        p = rng.normal(size=(d, nu))
        v = rng.normal(size=nu)
        x = rng.normal(size=d)
        q = rng.normal(size=nu)
        pn = _norm_value(p, norm, s)

        lhs = abs(float(x @ (p @ v)))
        bound = np.linalg.norm(x) * pn * np.linalg.norm(v)
        if lhs > bound * (1 + rtol) + 1e-15:
            rep.lower_violations += 1
            rep.max_lower_excess = max(rep.max_lower_excess, lhs - bound)

        stack = x[:, None] * q[None, :]
        lhs = _norm_value(stack, norm, s)
        bound = np.linalg.norm(x) * np.linalg.norm(q)
        if lhs > bound * (1 + rtol) + 1e-15:
            rep.upper_violations += 1
            rep.max_upper_excess = max(rep.max_upper_excess, lhs - bound)

        R = _random_rotation(rng, d)
        diff = abs(_norm_value(R @ p, norm, s) - pn)
        if diff > rtol * max(pn, 1.0):
            rep.rotation_violations += 1
            rep.max_rotation_excess = max(rep.max_rotation_excess, diff)

    if norm == "s-norm" and s != 2.0:
        if s > 2.0:
            # d = 2, V = V* = R, p = x = (1, 1), v = 1
            lhs = 2.0
            bound = float(np.sqrt(2.0)) * 2.0 ** (1.0 / s)
            rep.counterexamples.append({
                "condition": "lower-bound", "d": 2, "V": "R",
                "lhs": lhs, "bound": bound, "violated": bool(lhs > bound),
            })
        if s < 2.0:
            # d = 2, V* = R, q = 1, x = (1, 1)
            lhs = 2.0 ** (1.0 / s)
            bound = float(np.sqrt(2.0))
            rep.counterexamples.append({
                "condition": "upper-bound", "d": 2, "V": "R",
                "lhs": lhs, "bound": bound, "violated": bool(lhs > bound),
            })
        # V = (R^2, ||.||_1), p = ((1,0),(0,1)), 60-degree rotation:
        # row-wise sup norms turn 2^{1/s} into 2^{1/s} * sqrt(3)/2.
        before = 2.0 ** (1.0 / s)
        after = float(2.0 ** (1.0 / s) * np.sqrt(3.0) / 2.0)
        rep.counterexamples.append({
            "condition": "rotational-invariance", "d": 2, "V": "(R^2, l1)",
            "norm_before": before, "norm_after": after,
            "violated": bool(before != after),
        })
    return rep
