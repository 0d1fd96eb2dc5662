import numpy as np
import pytest

from rgpl.potentials import (GradientSpace, MayerFunction, double_well_potential, lift_potential, mixed_partial,
                             quadratic_potential, quartic_potential, ubar)


def test_quartic_derivatives_match_differences(rng):
    sp = GradientSpace.nearest_neighbour(2, 1)
    pot = quartic_potential(sp, 0.7)
    z = rng.standard_normal((4, sp.dim)) * 0.5
    g = pot.gradient(z)
    for j in range(sp.dim):
        al = [0] * sp.dim
        al[j] = 1
        assert np.allclose(mixed_partial(pot.func, z, al), g[:, j], atol=1e-8)
    H = pot.hessian(z[0])
    assert np.allclose(H, H.T)


def test_taylor_remainder_vanishes_to_second_order():
    sp = GradientSpace.nearest_neighbour(1, 1)
    pot = double_well_potential(sp, 0.5)
    for h in (1e-2, 5e-3):
        assert abs(ubar(pot, np.array([h]))) < 2 * h ** 3


def test_mayer_function_zero_for_quadratic(rng):
    sp = GradientSpace.nearest_neighbour(2, 2)
    K = MayerFunction(quadratic_potential(sp), 4.0)
    assert K.is_zero
    assert np.allclose(K(rng.standard_normal((5, sp.dim))), 0.0)


def test_mayer_function_at_origin_and_beta_guard():
    sp = GradientSpace.nearest_neighbour(1, 1)
    K = MayerFunction(quartic_potential(sp), 16.0, F=np.array([[0.3]]))
    assert abs(K(np.zeros(1))) < 1e-14
    with pytest.raises(ValueError):
        MayerFunction(quartic_potential(sp), 0.5)


def test_quartic_mayer_closed_form():
    sp = GradientSpace.nearest_neighbour(1, 1)
    beta = 16.0
    K = MayerFunction(quartic_potential(sp), beta)
    z = np.array([[0.8]])
    assert np.allclose(K(z), np.expm1(-beta * 0.25 * (0.8 / 4) ** 4))


def test_lift_F_positions():
    sp = GradientSpace.nearest_neighbour(2, 2)
    F = np.array([[1.0, 2.0], [3.0, 4.0]])
    z = sp.lift_F(F)
    assert z[sp.pos((1, 0), 1)] == 3.0 and z[sp.pos((0, 1), 0)] == 2.0


def test_lifted_potential_reproduces_site_potential(rng):
    def U(psi):
        return np.sum((psi[..., 3, :] - psi[..., 0, :]) ** 2, axis=-1) + np.sum(psi[..., 1, :] - psi[..., 2, :], -1) ** 4

    pot = lift_potential(U, 2, 1, 1)
    psi = rng.standard_normal((6, 4, 1))
    psi[:, 0] = 0.0
    z = np.stack([psi[:, 2, 0], psi[:, 1, 0], psi[:, 3, 0] - psi[:, 1, 0] - psi[:, 2, 0]], axis=-1)
    order = [sp for sp in pot.space.I]
    assert order == [(1, 0), (0, 1), (1, 1)]
    assert np.allclose(pot(z), U(psi))


def test_lift_rejects_non_shift_invariant():
    with pytest.raises(ValueError):
        lift_potential(lambda psi: np.sum(psi[..., 0, :] ** 2, -1), 1, 1, 1)
