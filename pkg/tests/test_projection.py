import math

import numpy as np
import pytest

from covbt.core import ConvergenceError, PairwiseScheme, SingularSystemError, winvec_from_free
from covbt.projection import (SolverOptions, eval_U, jac_U_m, jac_U_theta, lambda_apply,
                              lambda_matrix, solve_projection)
from covbt.simulation import m_setting1

import oracles as orc

RHO3 = np.full((3, 3), 1 / 3)


def _bt_free(theta, K):
    t = np.r_[0.0, theta]
    return np.array([1 / (1 + np.exp(-(t[k] - t[l]))) for k in range(K) for l in range(k + 1, K)])


def test_eval_U_examples():
    assert eval_U([0.0], winvec_from_free([0.5], 2), 1.0) == pytest.approx([0.0])
    m = winvec_from_free(_bt_free([1.0, -1.0], 3), 3)
    np.testing.assert_allclose(eval_U([1.0, -1.0], m, RHO3), 0.0, atol=1e-15)
    u = eval_U([0.0, 0.0], winvec_from_free([0.7, 0.6, 0.5], 3), RHO3)
    np.testing.assert_allclose(u, [0.2 / 3, 0.1 / 3], atol=1e-15)


def test_jacobian_examples():
    np.testing.assert_allclose(jac_U_theta([0.0], 1.0), [[0.25]])
    np.testing.assert_allclose(jac_U_theta([0.0, 0.0], RHO3), [[1 / 6, -1 / 12], [-1 / 12, 1 / 6]])
    np.testing.assert_allclose(jac_U_m(1.0, 2), [[-1.0]])
    Jm = jac_U_m(RHO3)
    np.testing.assert_allclose(Jm, [[-1 / 3, -1 / 3, 0, 0], [0, 0, -1 / 3, -1 / 3]])
    np.testing.assert_allclose(lambda_matrix([0.0], winvec_from_free([0.5], 2), 1.0), [[-4.0]])


def _random_rho(rng, K):
    A = rng.uniform(0.1, 1.0, (K, K))
    R = (A + A.T) / 2
    np.fill_diagonal(R, 0)
    return R


@pytest.mark.parametrize("K", [2, 3, 4, 6])
def test_jacobians_match_finite_differences(K):
    rng = np.random.default_rng(K)
    for _ in range(5):
        R = _random_rho(rng, K)
        th = rng.normal(size=K - 1)
        m = winvec_from_free(rng.uniform(0.1, 0.9, K * (K - 1) // 2), K)
        h = 1e-5
        fd = np.column_stack([(eval_U(th + h * e, m, R) - eval_U(th - h * e, m, R)) / (2 * h)
                              for e in np.eye(K - 1)])
        np.testing.assert_allclose(jac_U_theta(th, R), fd, atol=1e-6)
        fdm = np.column_stack([(eval_U(th, m + h * e, R) - eval_U(th, m - h * e, R)) / (2 * h)
                               for e in np.eye((K - 1) ** 2)])
        np.testing.assert_allclose(jac_U_m(R, K), fdm, atol=1e-8)


@pytest.mark.parametrize("K", [3, 5])
def test_null_sum_of_full_equations(K):
    rng = np.random.default_rng(10 + K)
    for _ in range(10):
        R = _random_rho(rng, K)
        th = np.r_[0.0, rng.normal(size=K - 1)]
        f = rng.uniform(0.1, 0.9, K * (K - 1) // 2)
        mf = {p: f[j] for j, p in enumerate([(k, l) for k in range(1, K + 1)
                                             for l in range(k + 1, K + 1)])}
        full = []
        for k in range(1, K + 1):
            s = 0.0
            for l in range(1, K + 1):
                if l != k:
                    s += R[k - 1, l - 1] * (orc.sig(th[k - 1] - th[l - 1]) - orc.win(mf, k, l))
            full.append(s)
        assert abs(sum(full)) < 1e-14
        np.testing.assert_allclose(eval_U(th[1:], winvec_from_free(f, K), R), full[1:], atol=1e-14)


@pytest.mark.parametrize("K", [3, 4, 7])
def test_jacobian_symmetric_positive_definite(K):
    rng = np.random.default_rng(K)
    for _ in range(10):
        J = jac_U_theta(rng.normal(size=K - 1) * 2, _random_rho(rng, K))
        np.testing.assert_allclose(J, J.T, atol=0)
        np.linalg.cholesky(J)


def test_lambda_defining_identity():
    th = np.array([0.7, -0.2])
    m = winvec_from_free(_bt_free(th, 3), 3)
    L = lambda_matrix(th, m, RHO3)
    np.testing.assert_allclose(jac_U_theta(th, RHO3) @ L, jac_U_m(RHO3), atol=1e-12)
    v = np.arange(4.0)
    np.testing.assert_allclose(lambda_apply(th, RHO3, v), L @ v, atol=1e-12)


def test_lambda_at_fixed_covariate_matches_dense_solve():
    # reference values from an independent Gaussian-elimination script
    x = np.array([[0.3, 1.0]])
    m = winvec_from_free(m_setting1(x), 3)[0]
    th = solve_projection(m, RHO3)
    np.testing.assert_allclose(th, [-0.6747035466353086, -0.09301252848825871], atol=1e-10)
    ref = [[-2.9134085701215495, -2.9134085701215495, -1.3975489895396211, -1.3975489895396211],
           [-1.397548989539621, -1.397548989539621, -2.7561205257411117, -2.7561205257411117]]
    np.testing.assert_allclose(lambda_matrix(th, m, RHO3), ref, atol=1e-10)


def test_projection_examples():
    assert solve_projection(winvec_from_free([0.5], 2), 1.0) == pytest.approx([0.0], abs=1e-14)
    th = solve_projection(winvec_from_free(_bt_free([0.7, -0.2], 3), 3), RHO3)
    np.testing.assert_allclose(th, [0.7, -0.2], atol=1e-8)
    # argmin of the pointwise KL objective from a grid-and-refine search
    th = solve_projection(winvec_from_free([0.7, 0.6, 0.45], 3), RHO3)
    np.testing.assert_allclose(th, [-0.7600486429642996, -0.48376156550311106], atol=1e-4)


@pytest.mark.parametrize("p", [0.01, 0.2, 0.5, 0.93, 0.999])
def test_two_player_closed_form(p):
    th = solve_projection(winvec_from_free([p], 2), 1.0)
    assert th[0] == pytest.approx(-math.log(p / (1 - p)), abs=1e-12)


@pytest.mark.parametrize("K", [3, 5])
def test_start_point_invariance(K):
    rng = np.random.default_rng(K)
    R = _random_rho(rng, K)
    m = winvec_from_free(rng.uniform(0.05, 0.95, (20, K * (K - 1) // 2)), K)
    a = solve_projection(m, R)
    b = solve_projection(m, R, theta0=rng.normal(scale=3, size=(20, K - 1)))
    np.testing.assert_allclose(a, b, atol=1e-8)
    assert np.max(np.abs(eval_U(a, m, R))) <= 1e-10


def test_batched_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    K = 4
    R = _random_rho(rng, K)
    f = rng.uniform(0.1, 0.9, (5, 6))
    th = solve_projection(winvec_from_free(f, K), R)
    order = [(k, l) for k in range(1, K + 1) for l in range(k + 1, K + 1)]
    rd = {p: R[p[0] - 1, p[1] - 1] for p in order}
    for i in range(5):
        ref = orc.project({p: f[i, j] for j, p in enumerate(order)}, rd, K)
        np.testing.assert_allclose(th[i], ref, atol=1e-10)


def test_per_record_rho():
    rng = np.random.default_rng(1)
    K = 3
    f = rng.uniform(0.2, 0.8, (4, 3))
    R = np.stack([_random_rho(rng, K) for _ in range(4)])
    th = solve_projection(winvec_from_free(f, K), R)
    for i in range(4):
        np.testing.assert_allclose(th[i], solve_projection(winvec_from_free(f[i], K), R[i]),
                                   atol=1e-12)


def test_solver_errors():
    R = np.zeros((4, 4))
    R[0, 1] = R[1, 0] = R[2, 3] = R[3, 2] = 1.0
    m = winvec_from_free(np.full(6, 0.5), 4)
    with pytest.raises(SingularSystemError):
        lambda_matrix(np.zeros(3), m, R)
    with pytest.raises((SingularSystemError, ConvergenceError)):
        solve_projection(winvec_from_free(np.full(6, 0.6), 4), R)
    with pytest.raises(ConvergenceError):
        solve_projection(winvec_from_free([0.999999, 0.6, 0.5], 3), RHO3,
                         SolverOptions(max_iter=1))
    with pytest.raises(ValueError):
        SolverOptions(tol=0)


def test_full_output_reports_iterations():
    th, info = solve_projection(winvec_from_free([0.7, 0.6, 0.45], 3), PairwiseScheme.uniform(3),
                                full_output=True)
    assert info["iterations"] >= 1 and info["max_residual"] <= 1e-10
