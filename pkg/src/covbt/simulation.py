"""Synthetic designs, true parameter values by quadrature, and a replication harness.

Setting I: three players, every pair compared with probability 1/3, win
probabilities that are not of Bradley-Terry form in x.
Setting II: five players following a conditional BT model, five compared
pairs with probability 0.2 each.

Labeled covariates: X1 ~ N(0, 0.5^2), X2 ~ Bernoulli(0.5).
Target covariates: X1 ~ Uniform(0, 0.5), X2 ~ Bernoulli(0.4).
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .core import ComparisonDataset, PairwiseScheme, n_pairs, pair_to_index, winvec_from_free
from .estimators import (cond_bt_eif_phi, cond_bt_if_phi, cond_bt_psi, known_ratio_phi,
                         one_step_phi, one_step_phi_fusion, one_step_psi,
                         one_step_psi_fusion)
from .graph import build_gamma
from .nuisance import LearnerSpec, NuisanceBundle, estimate_nuisances
from .projection import solve_projection

SETTING2_PAIRS = ((1, 2), (2, 3), (2, 4), (2, 5), (3, 5))
SETTING2_GAMMA = ((1, 2), (2, 3), (2, 4), (2, 5))
SOURCE_SD = 0.5
SOURCE_P2 = 0.5
TARGET_HI = 0.5
TARGET_P2 = 0.4


def m_setting1(X) -> np.ndarray:
    """Win probabilities (m12, m13, m23) at covariates X of shape (n, 2)."""
    X = np.atleast_2d(X)
    x1, x2 = X[:, 0], X[:, 1]
    return np.column_stack([
        0.5 + 0.2 * np.sin(1.5 * (x1 + x2)),
        expit(0.3 * x1 * (x2 - 1)),
        expit(0.2 * x1 ** 2 - 0.5),
    ])


def theta_setting2(X) -> np.ndarray:
    """Strengths of players 2..5 at covariates X of shape (n, 2)."""
    X = np.atleast_2d(X)
    x1, x2 = X[:, 0], X[:, 1]
    return np.column_stack([x1 * x2, x1 ** 2 + x2, 0.5 * x1 + x2, np.sin(1.5 * (x1 + 0.5 * x2))])


def m_setting2(X) -> np.ndarray:
    """Win probabilities of all ten pairs implied by the Setting II strengths."""
    th = np.column_stack([np.zeros(len(np.atleast_2d(X))), theta_setting2(X)])
    k, l = np.array([(a, b) for a in range(5) for b in range(a + 1, 5)]).T
    return expit(th[:, k] - th[:, l])


def density_ratio(X) -> np.ndarray:
    """Target-to-labeled covariate density ratio; zero outside the target support."""
    X = np.atleast_2d(X)
    x1, x2 = X[:, 0], X[:, 1]
    inside = (x1 > 0) & (x1 < TARGET_HI)
    r1 = np.where(inside, (1 / TARGET_HI) / norm.pdf(x1, scale=SOURCE_SD), 0.0)
    r2 = np.where(x2 == 1, TARGET_P2 / SOURCE_P2, (1 - TARGET_P2) / (1 - SOURCE_P2))
    return r1 * r2


def _covariates(rng, size, law):
    if law == "source":
        return np.column_stack([rng.normal(0, SOURCE_SD, size), rng.binomial(1, SOURCE_P2, size)])
    if law == "target":
        return np.column_stack([rng.uniform(0, TARGET_HI, size), rng.binomial(1, TARGET_P2, size)])
    raise ValueError(f"unknown covariate law {law!r}")


def gen_setting1(n: int, m: int, seed, labeled_law: str = "source") -> ComparisonDataset:
    """Setting I data; m = 0 gives a dataset without an unlabeled block."""
    rng = np.random.default_rng(seed)
    X = _covariates(rng, n, labeled_law)
    pairs = rng.integers(0, 3, n)
    y = (rng.random(n) < m_setting1(X)[np.arange(n), pairs]).astype(float)
    Xt = _covariates(rng, m, "target") if m > 0 else None
    return ComparisonDataset(3, X, pairs, y, Xt, ("x1", "x2"))


def gen_setting2(n: int, m: int, seed, labeled_law: str = "source") -> ComparisonDataset:
    rng = np.random.default_rng(seed)
    X = _covariates(rng, n, labeled_law)
    idx = np.array([pair_to_index(p, 5) for p in SETTING2_PAIRS])
    pairs = idx[rng.integers(0, len(idx), n)]
    y = (rng.random(n) < m_setting2(X)[np.arange(n), pairs]).astype(float)
    Xt = _covariates(rng, m, "target") if m > 0 else None
    return ComparisonDataset(5, X, pairs, y, Xt, ("x1", "x2"))


def quadrature(law: str = "target", nodes: int = 64):
    """Nodes (n, 2) and weights for expectations under a covariate law.

    Gauss-Legendre for the uniform component, Gauss-Hermite for the normal
    component, exact two-point sum for the Bernoulli component.
    """
    if law == "target":
        z, w = np.polynomial.legendre.leggauss(nodes)
        x1, w1, p2 = TARGET_HI * (z + 1) / 2, w / 2, TARGET_P2
    elif law == "source":
        z, w = np.polynomial.hermite_e.hermegauss(nodes)
        x1, w1, p2 = SOURCE_SD * z, w / np.sqrt(2 * np.pi), SOURCE_P2
    else:
        raise ValueError(f"unknown covariate law {law!r}")
    X = np.vstack([np.column_stack([x1, np.zeros(nodes)]), np.column_stack([x1, np.ones(nodes)])])
    weights = np.r_[w1 * (1 - p2), w1 * p2]
    return X, weights


def true_values(setting: str, law: str = "target", nodes: int = 64):
    """(phi, psi) for a setting, each including the reference component 0.

    psi uses uniform comparison weights over all pairs.
    """
    setting = str(setting).upper()
    X, wq = quadrature(law, nodes)
    if setting == "I":
        K, m_free = 3, m_setting1(X)
    elif setting == "II":
        K, m_free = 5, m_setting2(X)
    else:
        raise ValueError(f"unknown setting {setting!r}")
    rho = PairwiseScheme.uniform(K)
    theta = theta_setting2(X) if setting == "II" else \
        solve_projection(winvec_from_free(m_free, K), rho)
    phi = wq @ theta
    psi = solve_projection(winvec_from_free(wq @ m_free, K), rho)
    return np.r_[0.0, phi], np.r_[0.0, psi]


def oracle_bundle(dataset: ComparisonDataset, setting: str) -> NuisanceBundle:
    """Nuisance bundle holding the true m, pi and density ratio at every record."""
    setting = str(setting).upper()
    Xall = dataset.X_all
    if setting == "I":
        outcome = m_setting1(Xall)
        prop = np.full_like(outcome, 1 / 3)
    else:
        obs = np.zeros(n_pairs(5), bool)
        obs[[pair_to_index(p, 5) for p in SETTING2_PAIRS]] = True
        outcome = np.where(obs, m_setting2(Xall), np.nan)
        prop = np.where(obs, 1 / len(SETTING2_PAIRS), 0.0) * np.ones((len(Xall), 1))
    ratio = density_ratio(Xall) if dataset.fusion else None
    return NuisanceBundle(outcome, prop, ratio, None, 0.0, {"oracle": True})


def learner_specs(kind: str):
    """(outcome, propensity, ratio) learner specs for a nuisance arm.

    flexible: degree-3 polynomial logistic regressions with interactions.
    working: outcome on x1, x2, x1*x2, x1^2; propensity on x1, x2; ratio on
    x1, x2, x1*x2.
    """
    if kind == "flexible":
        s = LearnerSpec("logistic_basis", degree=3, interactions=True)
        return s, s, s
    if kind == "working":
        return (LearnerSpec("logistic_basis", terms=((1, 0), (0, 1), (1, 1), (2, 0))),
                LearnerSpec("logistic_basis", terms=((1, 0), (0, 1))),
                LearnerSpec("logistic_basis", terms=((1, 0), (0, 1), (1, 1))))
    if kind == "constant":
        c = LearnerSpec("constant_mean")
        return c, c, LearnerSpec("logistic_basis", degree=3, interactions=True)
    raise ValueError(f"unknown nuisance arm {kind!r}")


REGIMES = {"I": ("fusion", "no_shift", "known_ratio"), "II": ("cond_if", "cond_eif")}


@dataclass(frozen=True)
class SettingSpec:
    setting: str = "I"
    n: int = 2000
    m: int = 2000
    seed: int = 0
    nuisance: str = "flexible"
    regimes: tuple = ("fusion",)
    estimands: tuple = ("phi", "psi")
    folds: int = 5
    level: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "setting", str(self.setting).upper())
        object.__setattr__(self, "regimes", tuple(self.regimes))
        object.__setattr__(self, "estimands", tuple(self.estimands))
        if self.setting not in REGIMES:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.n < 1 or self.m < 0:
            raise ValueError("n must be >= 1 and m >= 0")
        bad = [r for r in self.regimes if r not in REGIMES[self.setting]]
        if bad or not self.regimes:
            raise ValueError(f"regimes {bad} not available for setting {self.setting}")
        if any(e not in ("phi", "psi") for e in self.estimands) or not self.estimands:
            raise ValueError("estimands must be phi and/or psi")
        if self.nuisance not in ("flexible", "working", "constant", "oracle"):
            raise ValueError(f"unknown nuisance arm {self.nuisance!r}")
        needs_target = {"fusion", "cond_if", "cond_eif"} & set(self.regimes)
        if needs_target and self.m < 1:
            raise ValueError("fusion regimes need m >= 1")


def replication_seeds(master_seed: int, r: int) -> tuple[int, int]:
    """(data seed, fold seed) for replication r, hashed from the master seed."""
    data, folds = np.random.SeedSequence([int(master_seed), int(r)]).generate_state(2)
    return int(data), int(folds)


def _estimate_all(spec: SettingSpec, dataset, bundle):
    out = {}
    K = dataset.K
    rho = PairwiseScheme.uniform(K)
    for regime in spec.regimes:
        for est in spec.estimands:
            if regime == "fusion":
                f = one_step_phi_fusion if est == "phi" else one_step_psi_fusion
                rep = f(dataset, bundle, rho, level=spec.level)
            elif regime == "no_shift":
                f = one_step_phi if est == "phi" else one_step_psi
                rep = f(dataset, bundle, rho, level=spec.level)
            elif regime == "known_ratio":
                if est == "psi":
                    continue
                rep = known_ratio_phi(dataset, density_ratio, bundle, rho, level=spec.level)
            elif regime == "cond_if":
                gamma = build_gamma(SETTING2_GAMMA, 5)
                rep = cond_bt_if_phi(dataset, bundle, gamma, fusion=True, level=spec.level) \
                    if est == "phi" else cond_bt_psi(dataset, bundle, rho, gamma, fusion=True,
                                                     level=spec.level)
            else:
                rep = cond_bt_eif_phi(dataset, bundle, fusion=True, level=spec.level) \
                    if est == "phi" else cond_bt_psi(dataset, bundle, rho, fusion=True,
                                                     efficient=True, level=spec.level)
            out[(regime, est)] = rep
    return out


def run_one(spec: SettingSpec, r: int) -> dict:
    """One replication: estimates, CI bounds and plug-ins keyed by (regime, estimand)."""
    data_seed, fold_seed = replication_seeds(spec.seed, r)
    gen = gen_setting1 if spec.setting == "I" else gen_setting2
    fusion = bool({"fusion", "cond_if", "cond_eif"} & set(spec.regimes))
    dataset = gen(spec.n, spec.m if fusion else 0, data_seed)
    if spec.nuisance == "oracle":
        bundle = oracle_bundle(dataset, spec.setting)
    else:
        om, op, ow = learner_specs(spec.nuisance)
        bundle = estimate_nuisances(dataset, om, op, ow if dataset.fusion else None,
                                    V=spec.folds, seed=fold_seed)
    reps = _estimate_all(spec, dataset, bundle)
    return {key: {"point": rep.point, "lower": rep.wald[:, 0], "upper": rep.wald[:, 1],
                  "plugin": rep.plugin} for key, rep in reps.items()}


def _safe_run(args):
    spec, r = args
    try:
        return run_one(spec, r)
    except (ArithmeticError, ValueError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


@dataclass
class ReplicationResult:
    spec: SettingSpec
    R: int
    rows: list = field(default_factory=list)
    replications: list = field(default_factory=list)
    failures: int = 0

    def to_json(self) -> str:
        payload = {"spec": asdict(self.spec), "R": self.R, "failures": self.failures,
                   "metrics": self.rows}
        return json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n"

    def to_csv(self) -> str:
        cols = ["regime", "estimand", "estimator", "component", "n", "truth", "mean",
                "scaled_bias", "coverage", "width", "replications", "failures"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({c: _fmt(row[c]) for c in cols})
        return buf.getvalue()

    def metric(self, regime, estimand, estimator, component, name):
        for row in self.rows:
            if (row["regime"], row["estimand"], row["estimator"], row["component"]) == \
                    (regime, estimand, estimator, component):
                return row[name]
        raise KeyError((regime, estimand, estimator, component))


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "nan"
    return v


def run_replications(spec: SettingSpec, R: int, workers: int = 1) -> ReplicationResult:
    """Scaled bias, coverage and mean CI width per regime, estimand and component.

    Components are numbered by player (2..K). Failed replications are counted
    and excluded. Results do not depend on the number of workers.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    jobs = [(spec, r) for r in range(R)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_safe_run, jobs))
    else:
        outs = [_safe_run(j) for j in jobs]
    ok = [o for o in outs if "error" not in o]
    res = ReplicationResult(spec, R, failures=len(outs) - len(ok), replications=outs)
    truths = {}
    for law in ("target", "source"):
        phi, psi = true_values(spec.setting, law)
        truths[law] = {"phi": phi[1:], "psi": psi[1:]}
    if not ok:
        return res
    scale = np.sqrt(spec.n)
    for key in ok[0]:
        regime, est = key
        pts = np.array([o[key]["point"] for o in ok])
        plg = np.array([o[key]["plugin"] for o in ok])
        lo = np.array([o[key]["lower"] for o in ok])
        hi = np.array([o[key]["upper"] for o in ok])
        # only the no-shift regime targets the labeled covariate law
        t = truths["source" if regime == "no_shift" else "target"][est]
        cover = ((lo <= t) & (t <= hi)).mean(axis=0)
        width = (hi - lo).mean(axis=0)
        for c in range(len(t)):
            base = {"regime": regime, "estimand": est, "component": c + 2, "n": spec.n,
                    "truth": float(t[c]), "replications": len(ok), "failures": res.failures}
            res.rows.append({**base, "estimator": "one_step", "mean": float(pts[:, c].mean()),
                             "scaled_bias": float(scale * abs(pts[:, c].mean() - t[c])),
                             "coverage": float(cover[c]), "width": float(width[c])})
            res.rows.append({**base, "estimator": "plugin", "mean": float(plg[:, c].mean()),
                             "scaled_bias": float(scale * abs(plg[:, c].mean() - t[c])),
                             "coverage": float("nan"), "width": float("nan")})
    return res
