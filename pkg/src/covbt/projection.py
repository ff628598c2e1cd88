"""Bradley-Terry estimating equations, their Jacobians and the projection solver.

All functions broadcast over leading batch axes: theta has shape (..., K-1),
win-probability vectors (..., (K-1)^2) in the slot layout of `core`, and rho
either (K, K) or (..., K, K).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import ConvergenceError, SingularSystemError, rho_matrix, slot_layout


MAX_STEP = 4.0


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 100
    damping: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


def _full_theta(theta):
    theta = np.asarray(theta, dtype=float)
    return np.concatenate([np.zeros(theta.shape[:-1] + (1,)), theta], axis=-1)


def _rho_slots(rho, K):
    win, lose, _, _ = slot_layout(K)
    return rho[..., win, lose]


def eval_U(theta, m, rho) -> np.ndarray:
    """U_k = sum_{l != k} rho_kl (sigmoid(theta_k - theta_l) - m_kl), k = 2..K."""
    theta = np.asarray(theta, dtype=float)
    K = theta.shape[-1] + 1
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != (K - 1) ** 2:
        raise ValueError("theta and m dimensions are inconsistent")
    win, lose, _, _ = slot_layout(K)
    t = _full_theta(theta)
    terms = _rho_slots(rho_matrix(rho, K), K) * (expit(t[..., win] - t[..., lose]) - m)
    return terms.reshape(terms.shape[:-1] + (K - 1, K - 1)).sum(axis=-1)


def jac_U_theta(theta, rho) -> np.ndarray:
    """Derivative of U in theta: a reduced rho-weighted Laplacian."""
    theta = np.asarray(theta, dtype=float)
    K = theta.shape[-1] + 1
    t = _full_theta(theta)
    d = t[..., :, None] - t[..., None, :]
    # sigmoid(d) * sigmoid(-d) keeps precision when |d| is large
    G = rho_matrix(rho, K) * expit(d) * expit(-d)
    idx = np.arange(K)
    G[..., idx, idx] = 0.0
    L = -G
    L[..., idx, idx] = G.sum(axis=-1)
    return L[..., 1:, 1:]


def jac_U_m(rho, K: int | None = None) -> np.ndarray:
    """Derivative of U in m: K-1 diagonal blocks (-rho_k1, ..., -rho_kK), l != k."""
    if K is None:
        K = np.asarray(rho.rho if hasattr(rho, "rho") else rho).shape[-1]
    r = _rho_slots(rho_matrix(rho, K), K)
    out = np.zeros(r.shape[:-1] + (K - 1, (K - 1) ** 2))
    for k in range(K - 1):
        block = slice(k * (K - 1), (k + 1) * (K - 1))
        out[..., k, block] = -r[..., block]
    return out


def apply_jac_U_m(rho, vec, K: int) -> np.ndarray:
    """(dU/dm) @ vec without forming the block-diagonal matrix."""
    r = _rho_slots(rho_matrix(rho, K), K)
    prod = -r * vec
    return prod.reshape(prod.shape[:-1] + (K - 1, K - 1)).sum(axis=-1)


def _solve(A, b):
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "estimating-equation Jacobian is singular; the rho-weighted "
            "comparison graph is disconnected") from exc


def lambda_matrix(theta, m, rho) -> np.ndarray:
    """(dU/dtheta)^{-1} (dU/dm) via a linear solve.

    The result does not depend on m; it is accepted to mirror the
    estimating-equation signature.
    """
    theta = np.asarray(theta, dtype=float)
    K = theta.shape[-1] + 1
    return _solve(jac_U_theta(theta, rho), jac_U_m(rho, K))


def lambda_apply(theta, rho, vec) -> np.ndarray:
    """Lambda(theta) @ vec for batched theta and vec of shape (..., (K-1)^2)."""
    theta = np.asarray(theta, dtype=float)
    K = theta.shape[-1] + 1
    rhs = apply_jac_U_m(rho, vec, K)
    return _solve(jac_U_theta(theta, rho), rhs[..., None])[..., 0]


def solve_projection(m, rho, opts: SolverOptions | None = None, theta0=None,
                     full_output: bool = False):
    """Solve U(theta, m; rho) = 0 by damped Newton, batched over leading axes.

    With full_output, also returns a dict with the iteration count and the
    final max residual.
    """
    opts = opts or SolverOptions()
    m = np.asarray(m, dtype=float)
    K = int(round(np.sqrt(m.shape[-1]))) + 1
    if (K - 1) ** 2 != m.shape[-1]:
        raise ValueError("m must have (K-1)^2 entries")
    rho = rho_matrix(rho, K)
    batch = np.broadcast_shapes(m.shape[:-1], rho.shape[:-2])
    m = np.broadcast_to(m, batch + m.shape[-1:]).reshape(-1, m.shape[-1])
    rho = np.broadcast_to(rho, batch + (K, K)).reshape(-1, K, K)
    if theta0 is None:
        theta = np.zeros((m.shape[0], K - 1))
    else:
        theta = np.broadcast_to(np.asarray(theta0, float), batch + (K - 1,)).reshape(-1, K - 1).copy()

    U = eval_U(theta, m, rho)
    res = np.abs(U).max(axis=-1)
    it = 0
    while it < opts.max_iter:
        active = np.flatnonzero(res > opts.tol)
        if active.size == 0:
            break
        it += 1
        th, Ua, ra, ma = theta[active], U[active], rho[active], m[active]
        step = _solve(jac_U_theta(th, ra), Ua[..., None])[..., 0]
        if opts.damping:
            # cap long steps from saturated starting points; inactive near the root
            big = np.abs(step).max(axis=-1, keepdims=True)
            step = step * np.minimum(1.0, MAX_STEP / np.maximum(big, 1e-300))
        norm0 = np.linalg.norm(Ua, axis=-1)
        alpha = np.ones(active.size)
        new = th - step
        Unew = eval_U(new, ma, ra)
        if opts.damping:
            for _ in range(40):
                bad = ~(np.linalg.norm(Unew, axis=-1) < norm0)
                # converged residuals can stall at rounding level; accept them
                bad &= np.abs(Unew).max(axis=-1) > opts.tol
                if not bad.any():
                    break
                alpha[bad] *= 0.5
                new[bad] = th[bad] - alpha[bad, None] * step[bad]
                Unew[bad] = eval_U(new[bad], ma[bad], ra[bad])
        theta[active] = new
        U[active] = Unew
        res[active] = np.abs(Unew).max(axis=-1)
    if res.size and res.max() <= opts.tol:
        # one more Newton step takes converged points to machine precision
        try:
            step = _solve(jac_U_theta(theta, rho), U[..., None])[..., 0]
        except SingularSystemError:
            step = np.zeros_like(theta)
        cand = theta - step
        Uc = eval_U(cand, m, rho)
        better = np.abs(Uc).max(axis=-1) <= res
        theta[better] = cand[better]
        res[better] = np.abs(Uc[better]).max(axis=-1)
    worst = float(res.max()) if res.size else 0.0
    if worst > opts.tol:
        raise ConvergenceError(
            f"projection solver did not converge in {opts.max_iter} iterations; "
            f"max residual {worst:.3e}")
    theta = theta.reshape(batch + (K - 1,))
    if full_output:
        return theta, {"iterations": it, "max_residual": worst}
    return theta
