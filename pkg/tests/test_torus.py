import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgpl.torus import TorusGeometry, b_poly, binom_poly, default_index_set, multi_indices, validate_index_set

tori = st.sampled_from([(1, 3, 2, 1), (1, 3, 1, 2), (2, 3, 1, 1), (2, 3, 2, 2), (3, 3, 1, 1)])


def test_rejects_even_L():
    with pytest.raises(ValueError):
        TorusGeometry(1, 4, 2)


def test_coords_are_centred():
    t = TorusGeometry(2, 3, 2)
    c = t.coords
    assert c.shape == (9, 9, 2)
    assert c.min() == -4 and c.max() == 4
    assert np.all(c[0, 0] == 0)


def test_flat_index_roundtrip():
    t = TorusGeometry(2, 3, 2)
    for idx in (0, 5, 17, 80):
        assert t.flat_index(t.site_of_flat(idx)) == idx


@given(tori, st.integers(0, 2 ** 31))
def test_backward_difference_is_adjoint(shape, seed):
    t = TorusGeometry(*shape)
    rng = np.random.default_rng(seed)
    phi, psi = rng.standard_normal((2,) + t.field_shape)
    for i in range(t.d):
        lhs = np.sum(t.forward_diff(phi, i) * psi)
        rhs = np.sum(phi * t.backward_diff(psi, i))
        assert abs(lhs - rhs) < 1e-10 * (1 + abs(lhs))


@given(tori, st.integers(0, 2 ** 31))
def test_fourier_diagonalises_differences(shape, seed):
    t = TorusGeometry(*shape)
    phi = np.random.default_rng(seed).standard_normal(t.field_shape)
    for alpha in multi_indices(t.d, 1, 2):
        lhs = t.dft(t.diff(phi, alpha))
        rhs = t.q_power(alpha)[..., None] * t.dft(phi)
        assert np.allclose(lhs, rhs, atol=1e-10)


def test_extended_gradient_shape_and_order(rng):
    t = TorusGeometry(2, 3, 1, 2)
    I = default_index_set(2)
    phi = rng.standard_normal(t.field_shape)
    D = t.extended_gradient(phi, I)
    assert D.shape == (3, 3, len(I) * 2)
    assert np.allclose(D[..., 2:4], t.forward_diff(phi, 1))


def test_index_set_validation():
    with pytest.raises(ValueError):
        validate_index_set([(0, 1)], 2, 1)


def test_binomial_polynomials():
    assert binom_poly(5, 2) == 10
    assert binom_poly(3, 5) == 0
    assert binom_poly(-1, 2) == 1
    assert b_poly((1, 2), np.array([[4, 3]])) == 12
