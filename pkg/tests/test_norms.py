import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgpl.norms import (LocalFunctional, NormScale, RelevantHamiltonian, diff_coefficients, dual_norm_Tphi,
                        hamiltonian_norm, monomial_duality_check, remainder_check, sobolev_estimate)
from rgpl.torus import TorusGeometry, binom_poly


def test_diff_coefficients_second_order():
    assert sorted(diff_coefficients((2,))) == [((0,), 1.0), ((1,), -2.0), ((2,), 1.0)]


@pytest.mark.parametrize("alpha,beta", [((2, 1), (1, 1)), ((1, 0), (2, 0)), ((3,), (1,))])
def test_monomial_duality(alpha, beta):
    assert monomial_duality_check(alpha, beta)


@pytest.mark.parametrize("s", [1, 2, 3])
def test_taylor_remainder_sharp_example(s):
    r = remainder_check(lambda z: binom_poly(z.sum(-1), s + 1), [0, 0], s, 4)
    assert r["holds"] and r["M"] == 1.0 and r["sharp_gap_beta0"] == 0.0


def test_taylor_remainder_smooth_function():
    r = remainder_check(lambda z: np.sin(0.3 * z.sum(-1)) + 0.01 * z[..., 0] ** 3, [1, 2], 2, 4)
    assert r["holds"]


def test_dual_norm_of_normalised_linear_functional():
    t = TorusGeometry(d=1, L=3, N=2)
    sc = NormScale(d=1, L=3, h=1.0)
    X = np.zeros(t.grid_shape, bool)
    X[2:5] = True
    w = sc.weight(0, (1,))
    F = LocalFunctional.polynomial(t, [((3,), 0, (1,))], [0.0, np.array([1 / w])])
    r = dual_norm_Tphi(F, sc, 0, X)
    assert r["lower"] == pytest.approx(1.0, rel=1e-9)


def test_constant_functional_norm():
    t = TorusGeometry(d=1, L=3, N=2)
    sc = NormScale(d=1, L=3, h=1.0)
    X = np.ones(t.grid_shape, bool)
    F = LocalFunctional.polynomial(t, [((3,), 0, (1,))], [2.5, np.zeros(1)])
    assert dual_norm_Tphi(F, sc, 0, X)["lower"] == pytest.approx(2.5)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 3))
def test_q_matrix_roundtrip(a, b, c):
    q = np.array([[c + abs(a), b], [b, c + abs(b) + 1]])
    H = RelevantHamiltonian.from_q(2, 1, q)
    assert np.allclose(H.q_matrix(), q)


def test_hamiltonian_vector_roundtrip_and_linearity(rng):
    H = RelevantHamiltonian(2, 2)
    v = rng.standard_normal(H.size)
    G = RelevantHamiltonian.from_vector(2, 2, v)
    assert np.allclose(G.to_vector(), v)
    assert np.allclose((G + G.scaled(2.0)).to_vector(), 3 * v)
    assert hamiltonian_norm(G.scaled(-2.0), 1, NormScale(d=2, L=3, m=2)) == pytest.approx(
        2 * hamiltonian_norm(G, 1, NormScale(d=2, L=3, m=2)))


def test_sobolev_constant_below_one():
    r = sobolev_estimate(8, 1, trials=20)
    assert 0 < r["S"] < 1
