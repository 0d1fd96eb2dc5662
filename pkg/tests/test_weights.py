import numpy as np
import pytest

from rgpl.frd import build_frd, build_symbol
from rgpl.potentials import GradientSpace
from rgpl.torus import TorusGeometry
from rgpl.weights import (WeightAdmissibilityError, WeightFamily, extended_f, gaussian_identity_check, neumann_f,
                          psd_leq, random_admissible_pair, recipe_params, verify_weight_properties)


@pytest.mark.parametrize("dim", [1, 2])
def test_gaussian_identity_by_quadrature(dim):
    rng = np.random.default_rng(dim)
    A, C = random_admissible_pair(dim, rng)
    r = gaussian_identity_check(A, C, rng.normal(size=dim) * 0.3, mode="quadrature")
    assert r["abs_err"] <= 1e-10 * max(1.0, r["rhs"])


def test_gaussian_identity_by_monte_carlo():
    rng = np.random.default_rng(3)
    A, C = random_admissible_pair(3, rng)
    r = gaussian_identity_check(A, C, rng.normal(size=3) * 0.3, mode="mc")
    assert r["pass"]


def test_identity_diverges_when_radius_reaches_one():
    rng = np.random.default_rng(0)
    A, C = random_admissible_pair(2, rng, radius=1.2)
    with pytest.raises(WeightAdmissibilityError):
        gaussian_identity_check(A, C, np.zeros(2))


def test_neumann_series_converges_to_closed_form():
    rng = np.random.default_rng(5)
    A, C = random_admissible_pair(4, rng, radius=0.3)
    assert np.allclose(neumann_f(A, C, 60), extended_f(A, C), atol=1e-12)


def test_weight_family_properties_small_torus():
    t = TorusGeometry(1, 3, 2)
    frd = build_frd(build_symbol(np.eye(1), None, t, GradientSpace.nearest_neighbour(1)))
    p, _ = recipe_params(frd)
    fam = WeightFamily(frd, p)
    rep = verify_weight_properties(fam, max_blocks=2, probes=4)
    # w4 needs L above the admissibility gate and is exercised in the acceptance suite
    assert rep["w3"]["pass"] and rep["w3"]["max_err"] <= 1e-12
    assert rep["w1"]["pass"]
    assert not rep["L_gate"]["satisfied"]
    X = fam.block(1, (0,))
    ok, gap = psd_leq(fam.A(X), fam.A_kk(X), t)
    assert ok
