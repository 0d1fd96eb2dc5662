import numpy as np
import pytest

from rgpl.norms import LocalFunctional, NormScale, RelevantHamiltonian
from rgpl.pi2 import (contraction_measure, fit_exponent, make_frame, orthogonality_defect, pi2, pi2_boundedness,
                      pi2_field, random_cubic_bank, relevant_functional)
from rgpl.torus import TorusGeometry

CASES = [(1, 3, 3, 0), (1, 9, 2, 1), (2, 3, 2, 0)]


@pytest.mark.parametrize("d,L,N,k", CASES)
def test_pi2_idempotent_and_orthogonal(d, L, N, k):
    fr = make_frame(TorusGeometry(d=d, L=L, N=N, m=1), k)
    for K in random_cubic_bank(fr, 4, seed=1):
        H = pi2(K, fr)
        H2 = pi2(relevant_functional(H, fr), fr)
        assert np.allclose(H.to_vector(), H2.to_vector(), atol=1e-10)
        assert orthogonality_defect(K, fr, H) < 1e-9


def test_pi2_of_relevant_hamiltonian_is_identity(rng):
    fr = make_frame(TorusGeometry(d=2, L=3, N=2, m=1), 0)
    H = RelevantHamiltonian.from_vector(2, 1, rng.standard_normal(RelevantHamiltonian(2, 1).size))
    assert np.allclose(pi2(relevant_functional(H, fr), fr).to_vector(), H.to_vector(), atol=1e-10)


def test_constant_goes_to_energy_per_site():
    t = TorusGeometry(d=1, L=3, N=3)
    fr = make_frame(t, 0)
    C = LocalFunctional.polynomial(t, [((0,), 0, (1,))], [2.0, np.zeros(1)])
    v = pi2(C, fr).to_vector()
    assert v[0] == pytest.approx(2.0) and np.allclose(v[1:], 0.0)
    assert pi2_boundedness(C, fr, NormScale(d=1, L=3))["ratio"] <= 1.0 + 1e-12


def test_field_pairings_match_exact_projection():
    fr = make_frame(TorusGeometry(d=1, L=3, N=3), 0)
    K = random_cubic_bank(fr, 1, seed=4)[0]
    exact = pi2(K, fr).to_vector()
    fd = pi2_field(lambda phi: np.asarray(K(phi)), fr, step=0.05).to_vector()
    assert np.allclose(fd, exact, atol=1e-8)


def test_fit_exponent_recovers_power_law():
    xs = np.array([3.0, 9.0, 27.0])
    fit = fit_exponent(xs, 2.0 * xs ** -1.5)
    assert fit["slope"] == pytest.approx(-1.5) and fit["se"] < 1e-10


def test_contraction_measure_needs_three_sizes():
    with pytest.raises(ValueError):
        contraction_measure(1, [3, 9])
