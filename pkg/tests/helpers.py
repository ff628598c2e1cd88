import numpy as np

from covbt.core import ComparisonDataset, pair_order
from covbt.nuisance import NuisanceBundle


def random_instance(K, n=50, m=30, seed=0, rho="uniform", zero_pair=None):
    """Random dataset plus nuisance values, in array and scalar-dict form."""
    rng = np.random.default_rng(seed)
    order = pair_order(K)
    J = len(order)
    N = n + m
    M = rng.uniform(0.15, 0.85, (N, J))
    P = rng.dirichlet(np.full(J, 3.0), N) + 0.05
    if zero_pair is not None:
        P[:, zero_pair] = 0.0
    P /= P.sum(axis=1, keepdims=True)
    w = rng.uniform(0.3, 3.0, N)
    pairs = np.array([rng.choice(J, p=P[i]) for i in range(n)])
    y = (rng.random(n) < M[np.arange(n), pairs]).astype(float)
    X = rng.normal(size=(N, 2))
    ds = ComparisonDataset(K, X[:n], pairs, y, X[n:] if m else None)
    bundle = NuisanceBundle(M, P, w)
    if rho == "uniform":
        R = np.full((K, K), 1.0 / J)
    else:
        A = rng.uniform(0.2, 1.0, (K, K))
        R = (A + A.T) / 2
    np.fill_diagonal(R, 0.0)
    rd = {p: float(R[p[0] - 1, p[1] - 1]) for p in order}

    def rec(i, labeled):
        r = {"mf": {p: float(M[i, j]) for j, p in enumerate(order)},
             "pi": {p: float(P[i, j]) for j, p in enumerate(order) if P[i, j] > 0},
             "w": float(w[i])}
        if labeled:
            r["pair"], r["y"] = order[pairs[i]], float(y[i])
        return r

    recs = [rec(i, True) for i in range(n)]
    unl = [rec(i, False) for i in range(n, N)]
    return ds, bundle, recs, unl, rd, R
