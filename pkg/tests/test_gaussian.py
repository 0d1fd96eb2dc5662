import math

import numpy as np
from hypothesis import given, strategies as st

from rgpl.frd import build_frd, build_symbol
from rgpl.gaussian import GaussianBackend, GaussianField, chunk_rng, convolve_R, quadrature_order, tensor_rule
from rgpl.torus import TorusGeometry


@given(st.integers(1, 3), st.integers(0, 5))
def test_tensor_rule_moments(rank, power):
    order = 6
    tot = 0.0
    for z, w in tensor_rule(rank, order, chunk=50):
        tot += float(np.dot(w, z[:, 0] ** (2 * power)))
    exact = math.prod(range(1, 2 * power, 2)) if power else 1
    assert math.isclose(tot, exact, rel_tol=1e-10) or power >= order


def test_quadrature_order_respects_node_cap():
    be = GaussianBackend(order=8, max_nodes=1 << 12)
    o = quadrature_order(5, be)
    assert o ** 5 <= 1 << 12 and (o + 1) ** 5 > 1 << 12


def test_counter_based_streams_are_reproducible():
    a = chunk_rng(7, 3, 11).standard_normal(5)
    b = chunk_rng(7, 3, 11).standard_normal(5)
    c = chunk_rng(7, 3, 12).standard_normal(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_sample_covariance_matches_kernel():
    t = TorusGeometry(1, 3, 1)
    C = build_frd(build_symbol(np.eye(1), None, t)).slices[-1]
    G = GaussianField(C)
    x = G.samples(0, 0, 0, 40000).reshape(40000, -1)
    emp = x.T @ x / x.shape[0]
    assert np.abs(emp - C.dense()).max() < 0.02


def test_exponential_linear_functional_exact():
    t = TorusGeometry(1, 3, 2)
    f = build_frd(build_symbol(np.eye(1), None, t))
    rng = np.random.default_rng(1)
    ell = t.project_zero_average(rng.normal(size=t.field_shape)) * 0.5
    phi = rng.normal(size=t.field_shape)
    C = f.slices[1]
    F = lambda x: np.exp(np.sum(x * ell, axis=(-2, -1)))
    exact = np.exp(np.sum(ell * phi) + 0.5 * np.sum(ell * C.apply(ell)))
    v, se = convolve_R(F, C, phi, GaussianBackend(order=8, max_nodes=1 << 17))
    assert abs(v - exact) < 1e-7 * exact and se == 0.0
    v, se = convolve_R(F, C, phi, GaussianBackend(mode="mc", n_samples=20000))
    assert abs(v - exact) < 3 * se


def test_eigenbasis_continuous_in_q():
    # the first slice has a fully degenerate spectrum; its basis must not rotate as q moves
    t = TorusGeometry(1, 3, 2)
    from rgpl.potentials import GradientSpace
    sp = GradientSpace.nearest_neighbour(1, 1)
    V = [GaussianField(build_frd(build_symbol(np.eye(1), np.array([[q]]), t, sp)).slices[0]).eigen[1]
         for q in (0.0, -0.01)]
    assert V[0].shape == V[1].shape and np.allclose(V[0], V[1], atol=1e-12)


def test_eigenpairs_reconstruct_kernel():
    t = TorusGeometry(2, 3, 1, 2)
    from rgpl.potentials import GradientSpace
    sp = GradientSpace.nearest_neighbour(2, 2)
    for C in build_frd(build_symbol(np.eye(sp.dim), None, t, sp)).slices:
        lam, V = GaussianField(C, 1e-14).eigen
        Vf = V.reshape(lam.size, -1)
        assert np.allclose(Vf @ Vf.T, np.eye(lam.size), atol=1e-12)
        assert np.allclose(Vf.T @ np.diag(lam) @ Vf, C.dense(), atol=1e-10)
