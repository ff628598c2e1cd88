"""Signed incidence matrices of comparison designs and weighted Laplacians."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (IdentificationError, InvalidPairError, SingularSystemError,
                   is_connected, n_pairs, pair_order, pair_to_index)


@dataclass(frozen=True, eq=False)
class ComparisonMatrix:
    """Rows are compared pairs (k, l), k < l; columns are players 2..K.

    Row j has +1 in player k's column and -1 in player l's column, with the
    reference player's column dropped.
    """

    K: int
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = set()
        for p in self.pairs:
            pair_to_index(p, self.K)
            if p in seen:
                raise InvalidPairError(f"duplicate pair {p}")
            seen.add(p)
        mat = np.zeros((len(self.pairs), self.K - 1))
        for j, (k, l) in enumerate(self.pairs):
            if k > 1:
                mat[j, k - 2] = 1.0
            mat[j, l - 2] = -1.0
        mat.setflags(write=False)
        idx = np.array([pair_to_index(p, self.K) for p in self.pairs], dtype=int)
        idx.setflags(write=False)
        object.__setattr__(self, "_matrix", mat)
        object.__setattr__(self, "_indices", idx)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def indices(self) -> np.ndarray:
        """Pair positions of the rows in the full lexicographic order."""
        return self._indices

    @property
    def J(self) -> int:
        return len(self.pairs)


def build_gamma(pairs, K: int) -> ComparisonMatrix:
    clean = []
    for p in pairs:
        k, l = (int(v) for v in p)
        if k > l:
            raise InvalidPairError(f"pair {p} must be listed as (k, l) with k < l")
        clean.append((k, l))
    return ComparisonMatrix(K, tuple(clean))


def build_gamma_full(K: int) -> ComparisonMatrix:
    return ComparisonMatrix(K, pair_order(K))


def is_identifiable(gamma: ComparisonMatrix) -> bool:
    """Full column rank, decided by connectivity of the comparison graph."""
    return is_connected(gamma.K, gamma.pairs)


@dataclass(frozen=True)
class WeightedLaplacian:
    L: np.ndarray
    weights: np.ndarray


def weighted_laplacian(gamma_full: ComparisonMatrix, m_free, pi) -> WeightedLaplacian:
    """L = G^T diag(m (1 - m) pi) G, batched over leading axes of m_free and pi.

    m_free and pi are indexed by the rows of gamma_full. Rows with zero
    propensity get zero weight.
    """
    m_free = np.asarray(m_free, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < 0):
        raise ValueError("propensities must be non-negative")
    w = np.where(pi > 0, m_free * (1.0 - m_free) * pi, 0.0)
    G = gamma_full.matrix
    L = np.einsum("ja,...j,jb->...ab", G, w, G)
    return WeightedLaplacian(L, w)


def laplacian_solve(lap: WeightedLaplacian, b, gamma_full: ComparisonMatrix | None = None):
    """Solve L x = b for each record; errors when the weighted graph is disconnected.

    When gamma_full is given, connectivity of every distinct positive-weight
    pattern is checked by union-find before solving.
    """
    L = np.asarray(lap.L if isinstance(lap, WeightedLaplacian) else lap, dtype=float)
    b = np.asarray(b, dtype=float)
    if gamma_full is not None and isinstance(lap, WeightedLaplacian):
        w = np.atleast_2d(lap.weights)
        patterns, first = np.unique(w > 0, axis=0, return_index=True)
        for pat, i in zip(patterns, first):
            edges = [p for p, on in zip(gamma_full.pairs, pat) if on]
            if not is_connected(gamma_full.K, edges):
                raise SingularSystemError(
                    f"positive-weight comparison graph is disconnected at record {int(i)}")
    try:
        np.linalg.cholesky(L)
    except np.linalg.LinAlgError as exc:
        Lb = L.reshape((-1,) + L.shape[-2:])
        bad = 0
        for i, Li in enumerate(Lb):
            if np.any(np.linalg.eigvalsh(Li) <= 0):
                bad = i
                break
        raise SingularSystemError(
            f"weighted Laplacian is not positive definite at record {bad}; "
            "the positive-weight comparison graph is disconnected") from exc
    return np.linalg.solve(L, b[..., None])[..., 0]


def gamma_pseudoinverse_apply(gamma: ComparisonMatrix, b) -> np.ndarray:
    """(G^T G)^{-1} G^T b via the normal equations, batched over leading axes of b."""
    if not is_identifiable(gamma):
        raise IdentificationError(
            "comparison matrix is rank deficient: the comparison graph is not "
            "connected, so strengths are not identified")
    G = gamma.matrix
    b = np.asarray(b, dtype=float)
    if b.shape[-1] != gamma.J:
        raise ValueError(f"expected {gamma.J} entries, got {b.shape[-1]}")
    rhs = (b @ G).reshape(-1, G.shape[1])
    out = np.linalg.solve(G.T @ G, rhs.T).T
    return out.reshape(b.shape[:-1] + (G.shape[1],))


def gamma_pinv(gamma: ComparisonMatrix) -> np.ndarray:
    """The (K-1) x J matrix (G^T G)^{-1} G^T."""
    return gamma_pseudoinverse_apply(gamma, np.eye(gamma.J)).T
