"""Cross-fitted nuisance estimation: outcome means, pair propensities, density ratio.

Learners follow a small fit/predict protocol and always return probabilities.
Predictions for a record come from a model trained on the other folds only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import cKDTree
from scipy.special import expit

from .core import ComparisonDataset, DataError, PositivityError, n_pairs, pair_order

LEARNER_KINDS = ("logistic_basis", "knn", "constant_mean", "cell_mean", "stack")


@dataclass(frozen=True)
class LearnerSpec:
    """Learner configuration.

    kind: logistic_basis, knn, constant_mean, cell_mean (mean within each
    distinct covariate row, for categorical covariates) or stack (non-negative
    least-squares combination of `base` learners).
    terms: explicit monomials for logistic_basis as exponent tuples, one entry
    per covariate column; overrides degree/interactions.
    """

    kind: str = "logistic_basis"
    degree: int = 1
    interactions: bool = False
    terms: tuple | None = None
    ridge: float = 1e-6
    k: int = 50
    base: tuple = ()

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind == "logistic_basis" and self.terms is None and not 1 <= self.degree <= 3:
            raise ValueError("logistic_basis degree must be 1, 2 or 3")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.kind == "knn" and self.k < 1:
            raise ValueError("knn needs k >= 1")
        if self.kind == "stack" and len(self.base) < 1:
            raise ValueError("stack needs at least one base learner")
        if self.terms is not None:
            object.__setattr__(self, "terms", tuple(tuple(int(e) for e in t) for t in self.terms))
        object.__setattr__(self, "base", tuple(
            b if isinstance(b, LearnerSpec) else LearnerSpec(**b) for b in self.base))

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSpec":
        d = dict(d)
        if "terms" in d and d["terms"] is not None:
            d["terms"] = tuple(tuple(t) for t in d["terms"])
        if "base" in d:
            d["base"] = tuple(cls.from_dict(b) for b in d["base"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "logistic_basis":
            out.update(degree=self.degree, interactions=self.interactions, ridge=self.ridge,
                       terms=None if self.terms is None else [list(t) for t in self.terms])
        elif self.kind == "knn":
            out["k"] = self.k
        elif self.kind == "stack":
            out["base"] = [b.to_dict() for b in self.base]
        return out


def _monomials(X, spec: LearnerSpec):
    d = X.shape[1]
    if spec.terms is not None:
        exps = [t for t in spec.terms if len(t) == d and sum(t) > 0]
        if len(exps) != len(spec.terms):
            raise ValueError(f"terms must have one exponent per covariate ({d})")
        return exps
    binary = [bool(np.all((X[:, j] == 0) | (X[:, j] == 1))) for j in range(d)]
    exps = set()
    for deg in range(1, spec.degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            e = [0] * d
            for j in combo:
                e[j] += 1
            if any(binary[j] and e[j] > 1 for j in range(d)):
                continue
            if not spec.interactions and sum(v > 0 for v in e) > 1:
                continue
            exps.add(tuple(e))
    return sorted(exps, key=lambda e: (sum(e), [-v for v in e]))


def _design(X, exps):
    cols = [np.prod(X ** np.array(e), axis=1) for e in exps]
    return np.column_stack(cols) if cols else np.empty((X.shape[0], 0))


class LogisticBasis:
    """Penalized logistic regression on a polynomial basis; y may be fractional."""

    def __init__(self, spec: LearnerSpec):
        self.spec = spec

    def fit(self, X, y):
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        self.exps_ = _monomials(X, self.spec)
        Z = _design(X, self.exps_)
        self.center_ = Z.mean(axis=0)
        scale = Z.std(axis=0)
        self.keep_ = scale > 1e-12
        self.scale_ = np.where(self.keep_, scale, 1.0)
        Z = np.column_stack([np.ones(len(y)), ((Z - self.center_) / self.scale_)[:, self.keep_]])
        n, p = Z.shape
        pen = np.full(p, self.spec.ridge * n)
        pen[0] = 0.0
        ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        beta = np.zeros(p)
        beta[0] = np.log(ybar / (1 - ybar))

        def objective(b):
            eta = Z @ b
            return np.sum(np.logaddexp(0, eta) - y * eta) + 0.5 * np.sum(pen * b * b)

        obj = objective(beta)
        for _ in range(100):
            prob = expit(Z @ beta)
            grad = Z.T @ (prob - y) + pen * beta
            H = (Z * (prob * (1 - prob))[:, None]).T @ Z + np.diag(pen)
            H[np.diag_indices(p)] += 1e-12
            step = np.linalg.solve(H, grad)
            t = 1.0
            while True:
                cand = beta - t * step
                new = objective(cand)
                if new <= obj + 1e-12 * abs(obj) or t < 1e-8:
                    break
                t *= 0.5
            beta, done = cand, np.max(np.abs(t * step)) < 1e-9
            obj = new
            if done:
                break
        self.coef_ = beta
        return self

    def predict(self, X):
        Z = _design(np.asarray(X, float), self.exps_)
        Z = ((Z - self.center_) / self.scale_)[:, self.keep_]
        return expit(self.coef_[0] + Z @ self.coef_[1:])


class KNNMean:
    def __init__(self, spec: LearnerSpec):
        self.spec = spec

    def fit(self, X, y):
        X = np.asarray(X, float)
        self.mu_ = X.mean(axis=0)
        self.sd_ = np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        self.tree_ = cKDTree((X - self.mu_) / self.sd_)
        self.y_ = np.asarray(y, float)
        return self

    def predict(self, X):
        k = min(self.spec.k, len(self.y_))
        _, idx = self.tree_.query((np.asarray(X, float) - self.mu_) / self.sd_, k=k)
        idx = idx.reshape(len(X), k)
        return self.y_[idx].mean(axis=1)


class ConstantMean:
    def __init__(self, spec: LearnerSpec | None = None):
        self.spec = spec

    def fit(self, X, y):
        self.value_ = float(np.mean(y))
        return self

    def predict(self, X):
        return np.full(len(X), self.value_)


class CellMean:
    """Mean outcome within each distinct covariate row; unseen rows get the overall mean."""

    def __init__(self, spec: LearnerSpec | None = None):
        self.spec = spec

    def fit(self, X, y):
        keys, inv = np.unique(np.asarray(X, float), axis=0, return_inverse=True)
        inv = inv.ravel()
        y = np.asarray(y, float)
        self.table_ = {tuple(k): v for k, v in zip(
            keys, np.bincount(inv, weights=y) / np.bincount(inv))}
        self.overall_ = float(y.mean())
        return self

    def predict(self, X):
        return np.array([self.table_.get(tuple(row), self.overall_)
                         for row in np.asarray(X, float)])


class Stacked:
    """Convex combination of base learners, weights from NNLS on out-of-fold predictions."""

    def __init__(self, spec: LearnerSpec, inner_folds: int = 3):
        self.spec = spec
        self.inner_folds = inner_folds

    def fit(self, X, y):
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        n = len(y)
        V = min(self.inner_folds, n)
        folds = np.arange(n) % V
        oof = np.zeros((n, len(self.spec.base)))
        for b, bspec in enumerate(self.spec.base):
            for v in range(V):
                tr = folds != v
                oof[~tr, b] = make_learner(bspec).fit(X[tr], y[tr]).predict(X[~tr])
        w, _ = nnls(oof, y)
        self.weights_ = w / w.sum() if w.sum() > 0 else np.full(len(w), 1.0 / len(w))
        self.models_ = [make_learner(b).fit(X, y) for b in self.spec.base]
        return self

    def predict(self, X):
        return sum(w * mdl.predict(X) for w, mdl in zip(self.weights_, self.models_))


def make_learner(spec: LearnerSpec):
    return {"logistic_basis": LogisticBasis, "knn": KNNMean, "constant_mean": ConstantMean,
            "cell_mean": CellMean, "stack": Stacked}[spec.kind](spec)


def _fold_sizes(n: int, V: int) -> np.ndarray:
    sizes = np.full(V, n // V)
    sizes[: n % V] += 1
    return sizes


def assign_folds(dataset: ComparisonDataset | int, V: int = 5, seed: int = 0) -> np.ndarray:
    """Seeded near-equal fold labels for every record (labeled first, then unlabeled).

    Sizes follow the largest-first remainder rule. Labeled and unlabeled
    blocks are each split evenly across the same V folds.
    """
    if V < 2:
        raise ValueError("need at least 2 folds")
    blocks = [dataset] if isinstance(dataset, (int, np.integer)) else \
        [dataset.n] + ([dataset.m] if dataset.fusion else [])
    if blocks[0] < V:
        raise DataError(f"{V} folds requested for only {blocks[0]} labeled records")
    rng = np.random.default_rng(seed)
    out = []
    for size in blocks:
        labels = np.repeat(np.arange(V), _fold_sizes(size, V))
        folds = np.empty(size, dtype=int)
        folds[rng.permutation(size)] = labels
        out.append(folds)
    return np.concatenate(out)


@dataclass(frozen=True)
class CrossFit:
    values: np.ndarray
    n_clipped: int = 0


def _clip(values, lo, hi):
    clipped = np.clip(values, lo, hi)
    return clipped, int(np.sum(clipped != values))


def fit_outcome(dataset: ComparisonDataset, spec: LearnerSpec, folds,
                clip_eps: float = 0.01) -> CrossFit:
    """Cross-fitted m_kl(x) at every record (labeled then unlabeled).

    Returns an (N, K(K-1)/2) array; columns of pairs with no labeled records
    are NaN.
    """
    folds = np.asarray(folds)
    Xall = dataset.X_all
    n = dataset.n
    V = int(folds.max()) + 1
    J = n_pairs(dataset.K)
    out = np.full((dataset.N, J), np.nan)
    observed = dataset.observed_pairs()
    lab_folds = folds[:n]
    for j in np.flatnonzero(observed):
        in_pair = dataset.pairs == j
        for v in range(V):
            train = in_pair & (lab_folds != v)
            if not train.any():
                raise DataError(f"pair {pair_order(dataset.K)[j]} has no training "
                                f"records outside fold {v}")
            target = folds == v
            if not target.any():
                continue
            model = make_learner(spec).fit(dataset.X[train], dataset.y[train])
            out[target, j] = model.predict(Xall[target])
    vals, nclip = _clip(out[:, observed], clip_eps, 1 - clip_eps)
    out[:, observed] = vals
    return CrossFit(out, nclip)


def clip_simplex(P, eps: float) -> np.ndarray:
    """Raise entries below eps to eps and rescale the rest so each row sums to 1.

    Zero columns (structurally absent pairs) stay at zero. Iterates until no
    rescaled entry falls below the floor.
    """
    P = np.array(P, dtype=float)
    support = P > 0
    if np.any(support.sum(axis=1) * eps >= 1):
        raise ValueError("probability floor too large for the number of categories")
    P = P / P.sum(axis=1, keepdims=True)
    fixed = support & (P < eps)
    for _ in range(P.shape[1] + 1):
        free = support & ~fixed
        mass = 1.0 - eps * fixed.sum(axis=1)
        tot = np.where(free, P, 0.0).sum(axis=1)
        P = np.where(fixed, eps, np.where(free, P * (mass / tot)[:, None], 0.0))
        newly = free & (P < eps)
        if not newly.any():
            break
        fixed |= newly
    return P


def fit_propensity(dataset: ComparisonDataset, spec: LearnerSpec, folds,
                   clip_eps: float = 0.01) -> CrossFit:
    """Cross-fitted pair propensities pi(a|x) at every record.

    One-vs-rest fits over the observed pairs, renormalized to sum to 1 and
    floored at clip_eps. Unobserved pairs get probability 0.
    """
    folds = np.asarray(folds)
    observed = np.flatnonzero(dataset.observed_pairs())
    J = n_pairs(dataset.K)
    out = np.zeros((dataset.N, J))
    if observed.size == 1:
        if dataset.K != 2:
            raise DataError("only one pair is ever compared; strengths are not identified")
        out[:, observed[0]] = 1.0
        return CrossFit(out, 0)
    Xall = dataset.X_all
    n = dataset.n
    V = int(folds.max()) + 1
    lab_folds = folds[:n]
    for v in range(V):
        train = lab_folds != v
        target = folds == v
        if not target.any():
            continue
        for j in observed:
            yj = (dataset.pairs[train] == j).astype(float)
            out[target, j] = make_learner(spec).fit(dataset.X[train], yj).predict(Xall[target])
    raw = out[:, observed]
    raw = np.where(raw > 0, raw, 1e-300)
    clipped = clip_simplex(raw, clip_eps)
    nclip = int(np.sum(raw / raw.sum(axis=1, keepdims=True) < clip_eps))
    out[:, observed] = clipped
    return CrossFit(out, nclip)


def fit_density_ratio(dataset: ComparisonDataset, spec: LearnerSpec, folds,
                      c_max: float = 20.0) -> CrossFit:
    """Density ratio w(x) = dQ/dP at every record (labeled then unlabeled).

    cell_mean uses the ratio of empirical covariate-cell frequencies over the
    full sample and is renormalized to a labeled mean of exactly 1; any other
    learner classifies labeled versus unlabeled records with cross-fitting and
    converts odds to a ratio. Values are clipped to [1/c_max, c_max].
    """
    if not dataset.fusion:
        raise DataError("density ratio estimation needs an unlabeled target block")
    n, m = dataset.n, dataset.m
    Xall = dataset.X_all
    if spec.kind == "cell_mean":
        keys, inv = np.unique(Xall, axis=0, return_inverse=True)
        inv = inv.ravel()
        cnt_l = np.bincount(inv[:n], minlength=len(keys)) / n
        cnt_u = np.bincount(inv[n:], minlength=len(keys)) / m
        missing = (cnt_u > 0) & (cnt_l == 0)
        if missing.any():
            raise DataError(
                f"covariate value {keys[np.argmax(missing)].tolist()} appears in the "
                "unlabeled block but never in the labeled data; the target law must be "
                "absolutely continuous with respect to the labeled law")
        w = cnt_u[inv] / cnt_l[inv]
        w, nclip = _clip(w, 1.0 / c_max, c_max)
        w = w / w[:n].mean()
        return CrossFit(w, nclip)
    folds = np.asarray(folds)
    S = dataset.S
    V = int(folds.max()) + 1
    p = np.empty(dataset.N)
    for v in range(V):
        train, target = folds != v, folds == v
        if not target.any():
            continue
        p[target] = make_learner(spec).fit(Xall[train], S[train]).predict(Xall[target])
    p = np.clip(p, 1e-12, 1 - 1e-12)
    w = (1 - p) / p * (n / m)
    w, nclip = _clip(w, 1.0 / c_max, c_max)
    return CrossFit(w, nclip)


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    """Nuisance predictions evaluated at every record (labeled rows first).

    outcome: (N, J) win probabilities for pairs in pair order, NaN where a pair
    is never observed; propensity: (N, J) with zeros for unobserved pairs;
    ratio: (N,) density ratio or None outside fusion mode.
    """

    outcome: np.ndarray
    propensity: np.ndarray
    ratio: np.ndarray | None = None
    folds: np.ndarray | None = None
    clip_eps: float = 0.01
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.outcome.shape != self.propensity.shape:
            raise ValueError("outcome and propensity arrays must have the same shape")
        if self.ratio is not None and np.any(self.ratio < 0):
            raise ValueError("density ratio must be non-negative")

    @property
    def observed(self) -> np.ndarray:
        """Pairs with positive propensity somewhere."""
        return np.any(self.propensity > 0, axis=0)


def estimate_nuisances(dataset: ComparisonDataset, outcome: LearnerSpec,
                       propensity: LearnerSpec, ratio: LearnerSpec | None = None,
                       V: int = 5, seed: int = 0, clip_eps: float = 0.01,
                       c_max: float = 20.0) -> NuisanceBundle:
    folds = assign_folds(dataset, V, seed)
    m_fit = fit_outcome(dataset, outcome, folds, clip_eps)
    p_fit = fit_propensity(dataset, propensity, folds, clip_eps)
    diag = {"folds": V, "fold_seed": seed, "clip_eps": clip_eps,
            "outcome_clipped": m_fit.n_clipped, "propensity_clipped": p_fit.n_clipped}
    w = None
    if dataset.fusion:
        if ratio is None:
            raise ValueError("fusion mode needs a density ratio learner")
        w_fit = fit_density_ratio(dataset, ratio, folds, c_max)
        w = w_fit.values
        diag.update(c_max=c_max, ratio_clipped=w_fit.n_clipped)
    return NuisanceBundle(m_fit.values, p_fit.values, w, folds, clip_eps, diag)
