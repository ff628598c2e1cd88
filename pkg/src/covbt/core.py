"""Shared domain types: pair indexing, win-probability layout, datasets, reports.

Players are labelled 1..K with player 1 as the reference (strength fixed at 0).
Pair positions are 0-based indices into the lexicographic pair order
(1,2), (1,3), ..., (K-1,K). Strength vectors are float arrays of length K-1
holding the strengths of players 2..K.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Input data is malformed or does not support the requested estimator."""


class InvalidPairError(DataError):
    pass


class IdentificationError(DataError):
    """Comparison design does not identify the strengths."""


class PositivityError(DataError):
    pass


class NumericalError(ArithmeticError):
    pass


class ConvergenceError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


def n_pairs(K: int) -> int:
    return K * (K - 1) // 2


@lru_cache(maxsize=None)
def pair_order(K: int) -> tuple[tuple[int, int], ...]:
    if K < 2:
        raise ValueError(f"need at least 2 players, got K={K}")
    return tuple((k, l) for k in range(1, K + 1) for l in range(k + 1, K + 1))


def _players(scheme) -> int:
    return scheme.K if isinstance(scheme, PairwiseScheme) else int(scheme)


def pair_to_index(pair: tuple[int, int], scheme) -> int:
    """Position of (k, l), k < l, in the lexicographic pair order."""
    K = _players(scheme)
    k, l = (int(v) for v in pair)
    if not (1 <= k < l <= K):
        raise InvalidPairError(f"invalid pair {pair!r} for K={K}")
    return (k - 1) * (2 * K - k) // 2 + (l - k - 1)


def index_to_pair(j: int, scheme) -> tuple[int, int]:
    K = _players(scheme)
    order = pair_order(K)
    if not 0 <= j < len(order):
        raise InvalidPairError(f"pair index {j} out of range for K={K}")
    return order[j]


@lru_cache(maxsize=None)
def slot_layout(K: int):
    """Index arrays describing the (K-1)^2 win-probability layout.

    Slot s stores m_{k l} for k = 2..K and l != k in increasing order.
    Returns (winner, loser, pair, flipped): 0-based player indices, the pair
    position of {k, l} and whether the slot is the complement of the stored
    free value (k > l).
    """
    win, lose, pidx, flip = [], [], [], []
    for k in range(2, K + 1):
        for l in range(1, K + 1):
            if l == k:
                continue
            a, b = min(k, l), max(k, l)
            win.append(k - 1)
            lose.append(l - 1)
            pidx.append(pair_to_index((a, b), K))
            flip.append(k > l)
    arrs = [np.array(v, dtype=int) for v in (win, lose, pidx)]
    arrs.append(np.array(flip, dtype=bool))
    for a in arrs:
        a.setflags(write=False)
    return tuple(arrs)


def slot_index(k: int, l: int, K: int) -> int:
    """Position of m_{kl} (k >= 2, l != k, 1-based players) in the slot layout."""
    if not (2 <= k <= K and 1 <= l <= K and k != l):
        raise InvalidPairError(f"no slot for ({k},{l}) with K={K}")
    return (k - 2) * (K - 1) + (l - 1 if l < k else l - 2)


def winvec_from_free(values, K: int) -> np.ndarray:
    """Expand free values m_kl (k<l, pair order) to the (K-1)^2 slot layout.

    Accepts a trailing axis of length K(K-1)/2 with arbitrary leading batch
    axes. Anti-symmetry m_lk = 1 - m_kl holds by construction.
    """
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != n_pairs(K):
        raise ValueError(f"expected {n_pairs(K)} free values, got {v.shape[-1]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("win probabilities must be finite")
    _, _, pidx, flip = slot_layout(K)
    out = v[..., pidx]
    return np.where(flip, 1.0 - out, out)


def free_from_winvec(m, K: int) -> np.ndarray:
    """Recover the K(K-1)/2 free values from a slot-layout vector."""
    m = np.asarray(m, dtype=float)
    J = n_pairs(K)
    out = np.empty(m.shape[:-1] + (J,))
    for j, (k, l) in enumerate(pair_order(K)):
        if k >= 2:
            out[..., j] = m[..., slot_index(k, l, K)]
        else:
            # player 1 has no block; m_1l is the complement of m_l1
            out[..., j] = 1.0 - m[..., slot_index(l, k, K)]
    return out


def _components(K: int, edges: Iterable[tuple[int, int]]) -> int:
    parent = list(range(K))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    count = K
    for a, b in edges:
        ra, rb = find(a - 1), find(b - 1)
        if ra != rb:
            parent[ra] = rb
            count -= 1
    return count


def is_connected(K: int, edges: Iterable[tuple[int, int]]) -> bool:
    """Union-find connectivity of players 1..K under the given edges."""
    return _components(K, edges) == 1


@dataclass(frozen=True, eq=False)
class PairwiseScheme:
    """Player count and target comparison weights rho (symmetric K x K table)."""

    K: int
    rho: np.ndarray

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        rho = np.array(self.rho, dtype=float)
        if rho.shape != (self.K, self.K):
            raise ValueError(f"rho must be {self.K}x{self.K}")
        np.fill_diagonal(rho, 0.0)
        if np.any(rho < 0) or not np.all(np.isfinite(rho)):
            raise ValueError("rho entries must be finite and non-negative")
        if not np.allclose(rho, rho.T, rtol=0, atol=1e-14):
            raise ValueError("rho must be symmetric")
        rho = 0.5 * (rho + rho.T)
        edges = [(k, l) for k, l in pair_order(self.K) if rho[k - 1, l - 1] > 0]
        if not is_connected(self.K, edges):
            raise IdentificationError(
                "target comparison weights leave some players disconnected"
            )
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def uniform(cls, K: int) -> "PairwiseScheme":
        rho = np.full((K, K), 1.0 / n_pairs(K))
        return cls(K, rho)

    @classmethod
    def from_pairs(cls, K: int, weights: dict) -> "PairwiseScheme":
        rho = np.zeros((K, K))
        for (k, l), w in weights.items():
            pair_to_index((min(k, l), max(k, l)), K)
            rho[k - 1, l - 1] = rho[l - 1, k - 1] = w
        return cls(K, rho)

    @property
    def pair_order(self):
        return pair_order(self.K)


def rho_matrix(rho, K: int) -> np.ndarray:
    """Normalize a scheme, scalar or table into a (..., K, K) array."""
    if isinstance(rho, PairwiseScheme):
        if rho.K != K:
            raise ValueError(f"scheme has K={rho.K}, expected {K}")
        return rho.rho
    r = np.asarray(rho, dtype=float)
    if r.ndim == 0:
        r = np.full((K, K), float(r))
    if r.shape[-2:] != (K, K):
        raise ValueError(f"rho must have trailing shape ({K},{K})")
    return r


@dataclass(frozen=True)
class ComparisonRecord:
    x: tuple
    pair: tuple[int, int]
    y: float


@dataclass(frozen=True, eq=False)
class ComparisonDataset:
    """Labeled comparisons plus an optional unlabeled target covariate block.

    X: (n, d) covariates; pairs: (n,) pair positions; y: (n,) outcomes in
    [0, 1] where 1 means the lower-indexed player won. X_target: (m, d)
    unlabeled covariates drawn from the target law, or None.
    """

    K: int
    X: np.ndarray
    pairs: np.ndarray
    y: np.ndarray
    X_target: np.ndarray | None = None
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        pairs = np.array(self.pairs, dtype=int).ravel()
        y = np.array(self.y, dtype=float).ravel()
        n = X.shape[0]
        if n == 0:
            raise DataError("dataset has no labeled records")
        if pairs.shape[0] != n or y.shape[0] != n:
            raise DataError("X, pairs and y must have the same length")
        if np.any(pairs < 0) or np.any(pairs >= n_pairs(self.K)):
            raise InvalidPairError("pair index out of range")
        if not np.all((y >= 0) & (y <= 1)):
            raise DataError("outcomes must lie in [0, 1]")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates must be finite")
        arrays = [X, pairs, y]
        Xt = self.X_target
        if Xt is not None:
            Xt = np.array(Xt, dtype=float)
            if Xt.ndim == 1:
                Xt = Xt[:, None]
            if Xt.shape[1] != X.shape[1]:
                raise DataError("labeled and unlabeled covariate dimensions differ")
            if Xt.shape[0] == 0:
                raise DataError("unlabeled block is empty")
            if not np.all(np.isfinite(Xt)):
                raise DataError("covariates must be finite")
            arrays.append(Xt)
        for a in arrays:
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X_target", Xt)

    @classmethod
    def from_records(cls, records: Sequence[ComparisonRecord], K: int,
                     unlabeled=None, feature_names=None) -> "ComparisonDataset":
        X = np.array([np.atleast_1d(r.x) for r in records], dtype=float)
        pairs = [pair_to_index(r.pair, K) for r in records]
        y = [r.y for r in records]
        Xt = None if unlabeled is None else np.array(
            [np.atleast_1d(u) for u in unlabeled], dtype=float)
        return cls(K, X, pairs, y, Xt, feature_names)

    @property
    def records(self) -> list[ComparisonRecord]:
        order = pair_order(self.K)
        return [ComparisonRecord(tuple(x), order[a], float(y))
                for x, a, y in zip(self.X, self.pairs, self.y)]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return 0 if self.X_target is None else self.X_target.shape[0]

    @property
    def N(self) -> int:
        return self.n + self.m

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def fusion(self) -> bool:
        return self.X_target is not None

    @property
    def X_all(self) -> np.ndarray:
        """Labeled covariates followed by the unlabeled block."""
        if self.X_target is None:
            return self.X
        return np.vstack([self.X, self.X_target])

    @property
    def S(self) -> np.ndarray:
        """Labeled indicator over X_all."""
        return np.r_[np.ones(self.n), np.zeros(self.m)]

    def observed_pairs(self) -> np.ndarray:
        """Boolean mask over pair positions with at least one labeled record."""
        return np.bincount(self.pairs, minlength=n_pairs(self.K)) > 0


@dataclass(frozen=True)
class EifSample:
    """Per-record influence function values, one row per record."""

    values: np.ndarray
    regime: str


@dataclass(frozen=True)
class EstimateReport:
    estimand: str
    regime: str
    point: np.ndarray
    covariance: np.ndarray
    wald: np.ndarray
    level: float
    plugin: np.ndarray
    eif: EifSample | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def width(self) -> np.ndarray:
        return self.wald[:, 1] - self.wald[:, 0]
