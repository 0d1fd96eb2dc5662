import math

import numpy as np
import pytest

from rgpl import rg
from rgpl.frd import build_frd, build_symbol
from rgpl.gaussian import GaussianBackend, GaussianField
from rgpl.norms import RelevantHamiltonian
from rgpl.polymers import GeometryParams, pi_map
from rgpl.potentials import GradientSpace, MayerFunction, quartic_potential
from rgpl.torus import TorusGeometry


@pytest.fixture(scope="module")
def setup():
    t = TorusGeometry(1, 3, 2, 1)
    sp = GradientSpace.nearest_neighbour(1, 1)
    geo = GeometryParams(1, 3, 2, 1)
    frd = build_frd(build_symbol(np.eye(sp.dim), None, t, sp))
    kap = MayerFunction(quartic_potential(sp), 16.0)
    return t, sp, geo, frd, kap


def test_submasks_enumerates_powerset():
    subs = list(rg.submasks(0b1011))
    assert len(subs) == 8 and len(set(subs)) == 8
    assert all(s & ~0b1011 == 0 for s in subs)


def test_block_index_roundtrip_and_incidence():
    t = TorusGeometry(2, 3, 2, 1)
    idx = rg.BlockIndex(t, GeometryParams(2, 3, 2, 1), 0)
    assert idx.size == 81
    assert np.allclose(idx.incidence.sum(0), 1.0)
    for mask in (1, 0b101, 1 << 40 | 1 << 3):
        assert idx.mask(idx.polymer(mask)) == mask
    dens = np.arange(81.0).reshape(1, 9, 9)
    assert idx.block_sums(dens).sum() == pytest.approx(dens.sum())


def test_pi_groups_partition_polymers():
    t = TorusGeometry(1, 3, 2, 1)
    geo = GeometryParams(1, 3, 2, 1)
    idx = rg.BlockIndex(t, geo, 0)
    groups = rg.pi_groups(idx, max_blocks=12)
    flat = sorted(X for Xs in groups.values() for X in Xs)
    assert flat == list(range(1 << idx.size))
    up = rg.BlockIndex(t, geo, 1)
    for U, Xs in groups.items():
        for X in Xs[:5]:
            if X:
                assert up.mask(pi_map(idx.polymer(X), geo)) == U


def test_conjugation_quadrature(setup):
    t, sp, geo, frd, kap = setup
    H = RelevantHamiltonian.from_vector(1, 1, [0.01, 0.0, -0.02])
    st = rg.RGState(0, H, rg.mayer_map(t, geo, sp, kap), np.zeros((1, 1)))
    probes = GaussianField(frd.slices[0]).samples(0, 1, 0, 3)
    r = rg.conjugation_check(st, frd, probes, "quadrature", GaussianBackend(order=4, max_nodes=1 << 16))
    assert r["max_rel_err"] < 1e-8


def test_linearised_A_formula(setup):
    t, sp, geo, frd, kap = setup
    ops = rg.linearize(0, frd, geo, backend=GaussianBackend(order=4, max_nodes=1 << 16))
    H = RelevantHamiltonian.from_vector(1, 1, [0.3, 0.7, -1.1])
    assert rg.A_formula_check(ops, H)["max_err"] < 1e-8


def test_log_partition_ratio_against_dense():
    t = TorusGeometry(1, 3, 1, 1)
    sp = GradientSpace.nearest_neighbour(1, 1)
    q = np.array([[0.3]])
    n = t.n
    D = np.roll(np.eye(n), 1, axis=1) - np.eye(n)
    lap = D.T @ D
    w1 = np.linalg.eigvalsh((1 - 0.3) * lap)[1:]
    w0 = np.linalg.eigvalsh(lap)[1:]
    dense = -0.5 * (np.log(w1).sum() - np.log(w0).sum())
    assert rg.log_partition_ratio(np.eye(1), q, t, sp) == pytest.approx(dense, rel=1e-12)


def test_geometric_rate():
    r = 0.3 * 0.5 ** np.arange(12)
    assert rg.geometric_rate(r) == pytest.approx(0.5)
    assert rg.geometric_rate(np.r_[r, 0.0, 0.0], floor=1e-15) == pytest.approx(0.5)


def test_is_even():
    assert rg.is_even(lambda z: np.cos(z).prod(-1), 3)
    assert not rg.is_even(lambda z: np.exp(z).prod(-1), 3)


@pytest.mark.parametrize("t_", [0.1, -0.4])
def test_gradient_product_expectation_gaussian(t_):
    t = TorusGeometry(1, 3, 1, 1)
    val = rg.gradient_product_expectation(lambda z: np.exp(t_ * z ** 2), t)
    assert val == pytest.approx((1 - 2 * t_) ** (-(t.n - 1) / 2), rel=1e-10)


def test_gradient_product_expectation_exponential_tilt_is_one():
    t = TorusGeometry(1, 3, 2, 1)
    assert rg.gradient_product_expectation(lambda z: np.exp(0.7 * z), t) == pytest.approx(1.0, rel=1e-9)


def test_fine_tune_zero_mayer_function(setup):
    t, sp, geo, frd, kap = setup
    res = rg.fine_tune(lambda z: np.zeros(z.shape[:-1]), t, sp, np.eye(1), kappa_is_zero=True, lhs=1.0)
    assert np.allclose(res.calH.to_vector(), 0.0)
    assert res.representation["rel_err"] == 0.0
