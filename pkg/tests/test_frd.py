import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgpl.frd import (SymbolNotPositive, build_frd, build_symbol, covariance, frd_degrees, frd_min_eigenvalue,
                      load_frd, range_violations, save_frd, spectral_weights, telescoping_error)
from rgpl.potentials import GradientSpace
from rgpl.torus import TorusGeometry


def _frd(d=1, N=2, m=1, Q=None, q=None):
    t = TorusGeometry(d, 3, N, m)
    sp = GradientSpace.nearest_neighbour(d, m)
    Q = np.eye(sp.dim) if Q is None else Q
    return build_frd(build_symbol(Q, q, t, sp))


@pytest.mark.parametrize("d,N", [(1, 2), (1, 3), (2, 2)])
def test_structure(d, N):
    f = _frd(d, N)
    assert f.n_slices == N + 1
    assert telescoping_error(f) < 1e-10
    assert range_violations(f) == 0
    assert frd_min_eigenvalue(f) > -1e-12


def test_vector_valued_with_q():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(2, 2))
    f = _frd(1, 2, 2, np.eye(2) + 0.2 * (A + A.T), 0.1 * np.eye(2))
    assert telescoping_error(f) < 1e-10
    assert range_violations(f) == 0


def test_covariance_inverts_operator(rng):
    t = TorusGeometry(2, 3, 1, 1)
    s = build_symbol(np.eye(2), None, t)
    C = covariance(s)
    phi = t.project_zero_average(rng.standard_normal(t.field_shape))
    assert np.allclose(s.apply(C.apply(phi)), phi, atol=1e-12)
    assert C.symmetry_error() < 1e-14
    assert np.allclose(C.total(), 0.0, atol=1e-14)


def test_non_positive_symbol_rejected():
    t = TorusGeometry(1, 3, 1)
    with pytest.raises(SymbolNotPositive):
        build_symbol(np.eye(1), 3.0 * np.eye(1), t)


def test_degree_budget():
    assert frd_degrees(3, 3, 1) == [0, 3, 12]


@given(st.floats(0.5, 50.0))
def test_spectral_weights_partition_unity(lam_max):
    sw = spectral_weights(lam_max, [0, 3, 12])
    lam = np.linspace(1e-6, lam_max, 50)
    tot = sum(sw.g_lambda(k, lam) for k in range(1, 5)) * lam
    assert np.all(tot <= 1 + 1e-9)
    for k in range(1, 5):
        assert np.all(sw.g_lambda(k, lam) >= -1e-12)


def test_save_load_roundtrip(tmp_path):
    f = _frd(1, 2)
    save_frd(f, tmp_path / "f.npz")
    g = load_frd(tmp_path / "f.npz")
    for a, b in zip(f.slices, g.slices):
        assert np.array_equal(a.values, b.values)
