import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgpl import elasticity as E
from rgpl.torus import TorusGeometry


@pytest.fixture(scope="module")
def conv():
    return E.convexify(E.spring_potential(2))


@pytest.mark.parametrize("d", [2, 3])
def test_discrete_det_of_affine_map(d, rng):
    F = rng.standard_normal((d, d))
    assert E.discrete_det(E.restrict_linear(F, E.unit_cell(d))) == pytest.approx(np.linalg.det(F), abs=1e-12)
    assert E.discrete_det(E.identity_config(E.unit_cell(d))) == pytest.approx(1.0)


def test_discrete_det_is_shoelace_area_in_2d(rng):
    p = rng.standard_normal((5, 4, 2))
    assert np.allclose(E.discrete_det(p), E.shoelace_det(p), atol=1e-13)


@pytest.mark.parametrize("N", [E.det_null_lagrangian(2), E.det_null_lagrangian(3), E.n0_null_lagrangian(2),
                               E.linear_null_lagrangian(2, (1, 2))], ids=lambda N: f"{N.kind}")
def test_null_lagrangians_brute_force(N):
    assert E.null_test(N, trials=30)["passed"]


@given(st.integers(0, 2 ** 32 - 1))
def test_periodic_det_sum_independent_of_field(seed):
    rng = np.random.default_rng(seed)
    t = TorusGeometry(2, 3, 1, 2)
    r = E.periodic_null_test(E.det_null_lagrangian(2), rng.standard_normal((2, 2)), t, trials=3, seed=seed)
    assert r["max_rel_err"] < 1e-10


def test_hessian_of_det_on_skew_matrices():
    r = E.hessian_det_on_skew(2, np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert r["value"] == pytest.approx(2.0, rel=1e-8)
    r3 = E.hessian_det_on_skew(3)
    assert r3["rel_err"] < 1e-8


def test_spring_potential_hypotheses():
    h = E.certify_hypotheses(E.spring_potential(2))
    assert h["passed"] and h["hessian_null_contains_skew"]


def test_convexification(conv):
    c = conv.certificate
    assert conv.alpha > 0 and conv.mu == pytest.approx(conv.margin / 2)
    assert c["Q_min_eig"] > 0 and c["Q_lower_bound_ok"]
    assert c["margin_alpha0"] < 1e-8


def test_quadratic_part_of_null_lagrangian_sums_to_zero(conv, rng):
    t = TorusGeometry(2, 3, 2, 2)
    for _ in range(4):
        assert abs(E.periodic_QN_sum(conv, rng.standard_normal(t.field_shape), t)) < 1e-10


def test_second_difference_operator_of_det_vanishes(rng):
    t = TorusGeometry(2, 3, 2, 2)
    out = E.second_difference_operator(E.q_nabla_det(2), rng.standard_normal(t.field_shape), t)
    assert np.max(np.abs(out)) < 1e-12


def test_frame_indifference_of_spring_energy():
    U = E.spring_potential(2)
    W = lambda F: float(U(E.restrict_linear(F, U.A)[None])[0])
    for a, b in E.frame_indifference_check(W, np.array([[1.1, 0.2], [0.0, 0.9]])):
        assert a == pytest.approx(b, abs=1e-12)
