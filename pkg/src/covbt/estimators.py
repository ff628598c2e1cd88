"""One-step estimators of covariate-averaged (phi) and marginal (psi) strengths.

Regimes:
  no_shift     labeled data only, target law = labeled covariate law
  fusion       unlabeled target covariates plus an estimated density ratio
  known_ratio  labeled data reweighted by a user-supplied density ratio
  cond_bt_if   conditional BT model, comparison matrix of J identifying pairs
  cond_bt_eif  conditional BT model, weighted-Laplacian efficient correction

Each estimate equals its plug-in plus the sample mean of a per-record
correction; the covariance is the sample covariance of the per-record
influence values divided by the number of records they are averaged over.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .core import (ComparisonDataset, DataError, EifSample, EstimateReport,
                   IdentificationError, PositivityError, n_pairs, pair_order,
                   rho_matrix, slot_index, winvec_from_free)
from .graph import (ComparisonMatrix, build_gamma_full, gamma_pinv, is_identifiable,
                    laplacian_solve, weighted_laplacian)
from .nuisance import NuisanceBundle
from .projection import SolverOptions, lambda_apply, lambda_matrix, solve_projection


def wald_ci(point, covariance, level: float = 0.95) -> np.ndarray:
    """point +/- z_{(1+level)/2} * sqrt(diag(covariance)), one row per component."""
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    point = np.atleast_1d(np.asarray(point, float))
    half = norm.ppf(0.5 + level / 2) * np.sqrt(np.clip(np.diag(np.atleast_2d(covariance)), 0, None))
    return np.column_stack([point - half, point + half])


def _slot_maps(K: int):
    order = pair_order(K)
    kl = np.array([slot_index(k, l, K) if k >= 2 else -1 for k, l in order])
    lk = np.array([slot_index(l, k, K) for k, l in order])
    return kl, lk


def tau(pairs, y, m_free, pi_a, K: int) -> np.ndarray:
    """Inverse-propensity residual vectors in the (K-1)^2 slot layout.

    For a record comparing (k, l), k < l, the slot m_kl gets
    (y - m_kl)/pi and the slot m_lk gets its negative; all other slots are 0.
    pairs are pair positions, m_free holds win probabilities in pair order,
    pi_a is the propensity of the observed pair.
    """
    scalar = np.ndim(pairs) == 0
    pairs = np.atleast_1d(np.asarray(pairs, dtype=int))
    y = np.atleast_1d(np.asarray(y, float))
    m_free = np.atleast_2d(np.asarray(m_free, float))
    pi_a = np.atleast_1d(np.asarray(pi_a, float))
    if np.any(~(pi_a > 0)):
        i = int(np.flatnonzero(~(pi_a > 0))[0])
        raise PositivityError(f"record {i} was compared with zero estimated propensity")
    rows = np.arange(len(pairs))
    r = (y - m_free[rows, pairs]) / pi_a
    kl, lk = _slot_maps(K)
    out = np.zeros((len(pairs), (K - 1) ** 2))
    has = kl[pairs] >= 0
    out[rows[has], kl[pairs][has]] = r[has]
    out[rows, lk[pairs]] = -r
    return out[0] if scalar else out


def dm_dtheta(theta) -> np.ndarray:
    """Derivative of the slot-layout win probabilities sigmoid(theta_k - theta_l) in theta."""
    theta = np.asarray(theta, float)
    K = theta.shape[-1] + 1
    t = np.concatenate([np.zeros(theta.shape[:-1] + (1,)), theta], axis=-1)
    out = np.zeros(theta.shape[:-1] + ((K - 1) ** 2, K - 1))
    for k in range(2, K + 1):
        for l in range(1, K + 1):
            if l == k:
                continue
            s = slot_index(k, l, K)
            p = expit(t[..., k - 1] - t[..., l - 1])
            d = p * (1 - p)
            out[..., s, k - 2] += d
            if l >= 2:
                out[..., s, l - 2] -= d
    return out


def _bt_free(theta) -> np.ndarray:
    """Win probabilities sigmoid(theta_k - theta_l) for all pairs in pair order."""
    theta = np.asarray(theta, float)
    K = theta.shape[-1] + 1
    t = np.concatenate([np.zeros(theta.shape[:-1] + (1,)), theta], axis=-1)
    k, l = np.array(pair_order(K)).T - 1
    return expit(t[..., k] - t[..., l])


def _check_bundle(dataset: ComparisonDataset, bundle: NuisanceBundle, fusion: bool):
    if fusion and not dataset.fusion:
        raise DataError("this estimator needs an unlabeled target block (fusion mode)")
    rows = dataset.N if dataset.fusion else dataset.n
    if bundle.outcome.shape != (rows, n_pairs(dataset.K)):
        raise ValueError(f"nuisance arrays must have shape ({rows}, {n_pairs(dataset.K)})")
    if fusion and bundle.ratio is None:
        raise ValueError("fusion estimators need a density ratio in the nuisance bundle")


def _require_all_pairs(dataset: ComparisonDataset):
    obs = dataset.observed_pairs()
    if not obs.all():
        missing = [p for p, o in zip(pair_order(dataset.K), obs) if not o]
        raise IdentificationError(
            f"pairs {missing} are never compared, so the projection estimand is not "
            "identified; use a conditional Bradley-Terry regime")


def _labeled_tau(dataset, bundle):
    n = dataset.n
    pi_a = bundle.propensity[np.arange(n), dataset.pairs]
    return tau(dataset.pairs, dataset.y, bundle.outcome[:n], pi_a, dataset.K)


def _covariance(D) -> np.ndarray:
    D = np.asarray(D, float)
    if D.shape[0] < 2:
        return np.zeros((D.shape[1], D.shape[1]))
    C = np.atleast_2d(np.cov(D, rowvar=False, ddof=1)) / D.shape[0]
    return 0.5 * (C + C.T)


def _report(estimand, regime, point, plugin, D, level, diagnostics) -> EstimateReport:
    cov = _covariance(D)
    return EstimateReport(estimand, regime, point, cov, wald_ci(point, cov, level), level,
                          plugin, EifSample(D, regime), diagnostics)


def _diagnostics(bundle, info=None, **extra):
    diag = dict(bundle.diagnostics)
    if info is not None:
        diag["solver_iterations"] = info["iterations"]
    diag.update(extra)
    return diag


def _assemble_phi(dataset, theta, corr_lab, w, fusion):
    """Combine projected strengths and labeled corrections into (point, plugin, values)."""
    n = dataset.n
    if fusion:
        N, m = dataset.N, dataset.m
        corr = np.zeros((N, theta.shape[1]))
        corr[:n] = (N / n) * w[:n, None] * corr_lab
        plugin = theta[n:].mean(axis=0)
        base = np.r_[np.zeros(n), np.full(m, N / m)]
    else:
        theta = theta[:n]
        corr = corr_lab
        plugin = theta.mean(axis=0)
        base = np.ones(n)
    point = plugin + corr.mean(axis=0)
    return point, plugin, corr + base[:, None] * (theta - point)


def _project_free(m_free, rho, K, opts):
    return solve_projection(winvec_from_free(m_free, K), rho, opts, full_output=True)


def one_step_phi(dataset: ComparisonDataset, bundle: NuisanceBundle, rho,
                 opts: SolverOptions | None = None, level: float = 0.95) -> EstimateReport:
    """Average projected strength under the labeled covariate law."""
    _check_bundle(dataset, bundle, False)
    _require_all_pairs(dataset)
    K, n = dataset.K, dataset.n
    theta, info = _project_free(bundle.outcome[:n], rho, K, opts)
    corr = -lambda_apply(theta, rho, _labeled_tau(dataset, bundle))
    point, plugin, D = _assemble_phi(dataset, theta, corr, None, False)
    return _report("phi", "no_shift", point, plugin, D, level, _diagnostics(bundle, info))


def one_step_phi_fusion(dataset: ComparisonDataset, bundle: NuisanceBundle, rho,
                        opts: SolverOptions | None = None, level: float = 0.95) -> EstimateReport:
    """Average projected strength under the target law of the unlabeled block."""
    _check_bundle(dataset, bundle, True)
    _require_all_pairs(dataset)
    K, n = dataset.K, dataset.n
    theta, info = _project_free(bundle.outcome, rho, K, opts)
    corr = -lambda_apply(theta[:n], rho, _labeled_tau(dataset, bundle))
    point, plugin, D = _assemble_phi(dataset, theta, corr, bundle.ratio, True)
    return _report("phi", "fusion", point, plugin, D, level, _diagnostics(bundle, info))


def known_ratio_phi(dataset: ComparisonDataset, w_known, bundle: NuisanceBundle, rho,
                    opts: SolverOptions | None = None, level: float = 0.95) -> EstimateReport:
    """Target-law strengths from labeled data reweighted by a known density ratio.

    w_known is a callable on the (n, d) covariates or an array of weights; it
    only needs to be known up to scale.
    """
    _check_bundle(dataset, bundle, False)
    _require_all_pairs(dataset)
    K, n = dataset.K, dataset.n
    w = np.asarray(w_known(dataset.X) if callable(w_known) else w_known, float).ravel()
    if w.shape != (n,) or not np.all(np.isfinite(w)):
        raise DataError("known density ratio must give one finite value per labeled record")
    if np.any(w < 0) or not w.sum() > 0:
        raise DataError("known density ratio must be non-negative with a positive mean")
    wn = w / w.mean()
    theta, info = _project_free(bundle.outcome[:n], rho, K, opts)
    corr = -wn[:, None] * lambda_apply(theta, rho, _labeled_tau(dataset, bundle))
    plugin = (wn[:, None] * theta).mean(axis=0)
    point = plugin + corr.mean(axis=0)
    D = corr + wn[:, None] * (theta - point)
    return _report("phi", "known_ratio", point, plugin, D, level, _diagnostics(bundle, info))


def _psi_core(dataset, rho, m_slots, target, tau_lab, w, fusion, opts):
    """Shared psi machinery given slot-layout m at every record and labeled residual terms."""
    n, K = dataset.n, dataset.K
    mbar = m_slots[target].mean(axis=0)
    psi, info = solve_projection(mbar, rho, opts, full_output=True)
    Lam = lambda_matrix(psi, mbar, rho)
    if fusion:
        N, m = dataset.N, dataset.m
        inner = np.empty((N, (K - 1) ** 2))
        inner[:n] = (N / n) * w[:n, None] * tau_lab
        inner[n:] = (N / m) * (m_slots[n:] - mbar)
    else:
        inner = tau_lab + (m_slots[:n] - mbar)
    corr = -inner @ Lam.T
    point = psi + corr.mean(axis=0)
    return point, psi, corr, info


def one_step_psi(dataset: ComparisonDataset, bundle: NuisanceBundle, rho,
                 opts: SolverOptions | None = None, level: float = 0.95) -> EstimateReport:
    """Marginal BT strengths fitted to covariate-averaged win probabilities."""
    _check_bundle(dataset, bundle, False)
    _require_all_pairs(dataset)
    n, K = dataset.n, dataset.K
    m_slots = winvec_from_free(bundle.outcome[:n], K)
    point, psi, corr, info = _psi_core(dataset, rho, m_slots, slice(0, n),
                                       _labeled_tau(dataset, bundle), None, False, opts)
    return _report("psi", "no_shift", point, psi, corr, level, _diagnostics(bundle, info))


def one_step_psi_fusion(dataset: ComparisonDataset, bundle: NuisanceBundle, rho,
                        opts: SolverOptions | None = None, level: float = 0.95) -> EstimateReport:
    """Marginal strengths under the target law; averages m over the unlabeled block."""
    _check_bundle(dataset, bundle, True)
    _require_all_pairs(dataset)
    n, K = dataset.n, dataset.K
    m_slots = winvec_from_free(bundle.outcome, K)
    point, psi, corr, info = _psi_core(dataset, rho, m_slots, slice(n, None),
                                       _labeled_tau(dataset, bundle), bundle.ratio, True, opts)
    return _report("psi", "fusion", point, psi, corr, level, _diagnostics(bundle, info))


def _cond_if_pieces(dataset, bundle, gamma: ComparisonMatrix):
    """Strengths from the J compared pairs and the labeled correction G^+ tau~."""
    if gamma.K != dataset.K:
        raise ValueError("comparison matrix and dataset disagree on K")
    if not is_identifiable(gamma):
        raise IdentificationError(
            "comparison matrix is rank deficient: its comparison graph is not "
            "connected, so strengths are not identified")
    idx = gamma.indices
    mG = bundle.outcome[:, idx]
    if np.any(np.isnan(mG)):
        raise IdentificationError("a pair of the comparison matrix is never observed")
    piG = bundle.propensity[: dataset.n, idx]
    if np.any(piG <= 0):
        raise PositivityError("a pair of the comparison matrix has zero estimated propensity")
    Gp = gamma_pinv(gamma)
    theta = logit(mG) @ Gp.T
    n = dataset.n
    row_of = np.full(n_pairs(dataset.K), -1)
    row_of[idx] = np.arange(gamma.J)
    j = row_of[dataset.pairs]
    hit = np.flatnonzero(j >= 0)
    tt = np.zeros((n, gamma.J))
    mj = mG[hit, j[hit]]
    tt[hit, j[hit]] = (dataset.y[hit] - mj) / (piG[hit, j[hit]] * mj * (1 - mj))
    return theta, tt @ Gp.T


def _cond_eif_pieces(dataset, bundle, opts):
    """BT-consistent strengths and the labeled correction L^{-1} G*^T v."""
    K, n = dataset.K, dataset.n
    pi = bundle.propensity
    obs = dataset.observed_pairs()
    if np.any(pi[:n][np.arange(n), dataset.pairs] <= 0):
        raise PositivityError("a compared pair has zero estimated propensity")
    k, l = np.array(pair_order(K)).T - 1
    rho = np.zeros(pi.shape[:1] + (K, K))
    rho[:, k, l] = pi
    rho[:, l, k] = pi
    m0 = np.where(np.isnan(bundle.outcome), 0.5, bundle.outcome)
    try:
        theta, info = _project_free(m0, rho, K, opts)
    except ArithmeticError as exc:
        raise IdentificationError(
            "observed comparison graph is disconnected; strengths are not identified") from exc
    mt = _bt_free(theta)
    gfull = build_gamma_full(K)
    lap = weighted_laplacian(gfull, mt[:n], pi[:n])
    rows = np.arange(n)
    v = np.zeros((n, n_pairs(K)))
    v[rows, dataset.pairs] = dataset.y - mt[rows, dataset.pairs]
    corr = laplacian_solve(lap, v @ gfull.matrix, gfull)
    return theta, mt, corr, info, obs


def cond_bt_if_phi(dataset: ComparisonDataset, bundle: NuisanceBundle, gamma: ComparisonMatrix,
                   opts: SolverOptions | None = None, fusion: bool = False,
                   level: float = 0.95) -> EstimateReport:
    """Conditional-BT estimator using the pseudo-inverse of a fixed comparison matrix.

    Records whose pair is outside the comparison matrix contribute no correction.
    """
    _check_bundle(dataset, bundle, fusion)
    theta, corr = _cond_if_pieces(dataset, bundle, gamma)
    point, plugin, D = _assemble_phi(dataset, theta, corr, bundle.ratio, fusion)
    return _report("phi", "cond_bt_if", point, plugin, D, level,
                   _diagnostics(bundle, pairs=[list(p) for p in gamma.pairs], fusion=fusion))


def cond_bt_eif_phi(dataset: ComparisonDataset, bundle: NuisanceBundle,
                    opts: SolverOptions | None = None, fusion: bool = False,
                    level: float = 0.95) -> EstimateReport:
    """Efficient conditional-BT estimator using every observed pair."""
    _check_bundle(dataset, bundle, fusion)
    theta, _, corr, info, _ = _cond_eif_pieces(dataset, bundle, opts)
    point, plugin, D = _assemble_phi(dataset, theta, corr, bundle.ratio, fusion)
    return _report("phi", "cond_bt_eif", point, plugin, D, level,
                   _diagnostics(bundle, info, fusion=fusion))


def cond_bt_psi(dataset: ComparisonDataset, bundle: NuisanceBundle, rho,
                gamma: ComparisonMatrix | None = None, opts: SolverOptions | None = None,
                fusion: bool = False, efficient: bool = False,
                level: float = 0.95) -> EstimateReport:
    """Marginal strengths under the conditional BT model.

    With efficient=True the Laplacian correction over all observed pairs is
    used; otherwise gamma must be given and its pseudo-inverse is used.
    """
    _check_bundle(dataset, bundle, fusion)
    K, n = dataset.K, dataset.n
    info = None
    if efficient:
        theta, mt, corr, info, _ = _cond_eif_pieces(dataset, bundle, opts)
        regime = "cond_bt_eif"
    else:
        if gamma is None:
            raise ValueError("the non-efficient conditional estimator needs a comparison matrix")
        theta, corr = _cond_if_pieces(dataset, bundle, gamma)
        mt = _bt_free(theta)
        regime = "cond_bt_if"
    m_slots = winvec_from_free(mt, K)
    tau_lab = np.einsum("isk,ik->is", dm_dtheta(theta[:n]), corr)
    target = slice(n, None) if fusion else slice(0, n)
    if not fusion:
        m_slots = m_slots[:n]
    point, psi, D, pinfo = _psi_core(dataset, rho, m_slots, target, tau_lab,
                                     bundle.ratio, fusion, opts)
    diag = _diagnostics(bundle, info, fusion=fusion, marginal_iterations=pinfo["iterations"])
    return _report("psi", regime, point, psi, D, level, diag)


def influence_at(dataset: ComparisonDataset, bundle: NuisanceBundle, rho, estimand: str,
                 regime: str, value, mbar=None, gamma: ComparisonMatrix | None = None,
                 fusion: bool = False, w_known=None,
                 opts: SolverOptions | None = None) -> EifSample:
    """Per-record influence values with the parameter fixed at `value`.

    For psi, `mbar` is the marginal win-probability vector (pair order) at
    which the derivative matrix is evaluated and which is subtracted from
    m(x). Evaluated at the estimator's own inputs this reproduces the
    values stored in its report.
    """
    if regime == "fusion":
        fusion = True
    elif regime in ("no_shift", "known_ratio"):
        fusion = False
    _check_bundle(dataset, bundle, fusion)
    K, n = dataset.K, dataset.n
    value = np.asarray(value, float)
    rows = dataset.N if fusion else n
    if regime in ("no_shift", "fusion", "known_ratio"):
        _require_all_pairs(dataset)
        m_free = bundle.outcome[:rows]
        theta = solve_projection(winvec_from_free(m_free, K), rho, opts)
        m_slots = winvec_from_free(m_free, K)
        tau_lab = _labeled_tau(dataset, bundle)
        corr_lab = None
    elif regime == "cond_bt_if":
        theta, corr_lab = _cond_if_pieces(dataset, bundle, gamma)
        theta = theta[:rows]
        m_slots = winvec_from_free(_bt_free(theta), K)
    elif regime == "cond_bt_eif":
        theta, mt, corr_lab, _, _ = _cond_eif_pieces(dataset, bundle, opts)
        theta = theta[:rows]
        m_slots = winvec_from_free(mt[:rows], K)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    if corr_lab is not None:
        tau_lab = np.einsum("isk,ik->is", dm_dtheta(theta[:n]), corr_lab)

    if regime == "known_ratio":
        w = np.asarray(w_known(dataset.X) if callable(w_known) else w_known, float).ravel()
        lab_w, base = w / w.mean(), w / w.mean()
    elif fusion:
        N, m = dataset.N, dataset.m
        lab_w = (N / n) * bundle.ratio[:n]
        base = np.r_[np.zeros(n), np.full(m, N / m)]
    else:
        lab_w, base = np.ones(n), np.ones(n)

    if estimand == "phi":
        if corr_lab is None:
            corr_lab = -lambda_apply(theta[:n], rho, tau_lab)
        D = base[:, None] * (theta - value)
        D[:n] += lab_w[:, None] * corr_lab
        return EifSample(D, regime)
    if estimand != "psi" or regime == "known_ratio":
        raise ValueError(f"no {estimand} influence function for regime {regime}")
    mbar_slots = winvec_from_free(np.asarray(mbar, float), K)
    Lam = lambda_matrix(value, mbar_slots, rho)
    if fusion:
        inner = base[:, None] * (m_slots - mbar_slots)
        inner[:n] = lab_w[:, None] * tau_lab
    else:
        inner = tau_lab + (m_slots[:n] - mbar_slots)
    return EifSample(-inner @ Lam.T, regime)
