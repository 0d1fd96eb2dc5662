import json
import math

import numpy as np
import pytest

from rgpl import experiments as ex
from rgpl.potentials import GradientSpace, MayerFunction
from rgpl.torus import TorusGeometry

# E_mu prod_x (1 + K(grad phi(x))), quartic g = 1, beta = 16, d = 1, L = 3, N = 2, from the
# one-frequency Fourier representation of the constrained gradient measure
QUARTIC_W_PERT = 0.031246657761348162


def cfg_of(**kw):
    base = {"seed": 1}
    base.update(kw)
    return ex.ExperimentConfig.from_dict(base)


def dense_log_normalizer(Q, n, beta):
    D = np.roll(np.eye(n), 1, axis=1) - np.eye(n)
    w = np.linalg.eigvalsh(Q * D.T @ D)[1:]
    return 0.5 * (n - 1) * math.log(2 * math.pi / beta) - 0.5 * np.log(w).sum()


def test_config_requires_seed_and_validates():
    with pytest.raises(ex.PreconditionError):
        ex.ExperimentConfig.from_dict({"beta": 16})
    with pytest.raises(ex.PreconditionError):
        cfg_of(beta=0.5)
    with pytest.raises(ex.PreconditionError):
        cfg_of(potential={"name": "nope"})


def test_config_hash_ignores_output_and_threads():
    a = cfg_of(out="x", threads=1).config_hash()
    b = cfg_of(out="y", threads=3).config_hash()
    assert a == b and a != cfg_of(beta=17.0).config_hash()


def test_logdet_term_vanishes_at_zero_q():
    t = TorusGeometry(1, 3, 2, 1)
    assert ex.gaussian_logdet_term(np.eye(1), np.zeros((1, 1)), t, GradientSpace.nearest_neighbour(1, 1)) == 0.0


@pytest.mark.parametrize("N", [1, 2])
def test_log_normalizer_against_dense(N):
    t = TorusGeometry(1, 3, N, 1)
    sp = GradientSpace.nearest_neighbour(1, 1)
    val = ex.gaussian_log_normalizer(np.array([[1.5]]), t, sp, beta=4.0)
    assert val == pytest.approx(dense_log_normalizer(1.5, t.n, 4.0), rel=1e-12)


def test_log_normalizer_difference_is_logdet_term():
    t = TorusGeometry(2, 3, 1, 1)
    sp = GradientSpace.nearest_neighbour(2, 1)
    Q, q = np.eye(2), np.diag([0.2, 0.1])
    diff = ex.gaussian_log_normalizer(Q, t, sp, 1.0) - ex.gaussian_log_normalizer(Q, t, sp, 1.0, q)
    assert diff / t.volume == pytest.approx(ex.gaussian_logdet_term(Q, q, t, sp), rel=1e-12)


def test_quadratic_free_energy_is_exact():
    cfg = cfg_of(potential={"name": "quadratic", "Q": [[2.0]]}, F_grid=[[0.0], [0.3]], beta=4.0)
    res = ex.free_energy(cfg)
    for row in res["rows"]:
        assert row["W_pert"] == 0.0 and row["W_se"] == 0.0
        assert row["W"] == pytest.approx(row["F"][0] ** 2 + res["gaussian_constant"])


def test_gaussian_constant_matches_dense():
    cfg = cfg_of(potential={"name": "quadratic"}, beta=4.0)
    res = ex.free_energy(cfg)
    t = cfg.torus()
    assert res["gaussian_constant"] == pytest.approx(-dense_log_normalizer(1.0, t.n, 4.0) / (4.0 * t.volume))


def test_quartic_perturbative_free_energy_against_oracle():
    cfg = cfg_of(beta=16.0, samples=4096, replicates=8)
    row = ex.free_energy(cfg)["rows"][0]
    assert abs(row["W_pert"] - QUARTIC_W_PERT) < 3 * row["W_pert_se"]
    pot = ex.make_potential(cfg)
    t = cfg.torus()
    fld, _ = ex.reference_field(pot, t)
    quad = ex.perturbative_quadrature(MayerFunction(pot, 16.0), t, fld, order=6)
    assert -math.log(quad) / t.volume == pytest.approx(QUARTIC_W_PERT, rel=1e-3)


def test_free_energy_deterministic_across_threads():
    a = ex.free_energy(cfg_of(samples=1024, replicates=4, chunk=256, threads=1))
    b = ex.free_energy(cfg_of(samples=1024, replicates=4, chunk=256, threads=2))
    assert a == b


def test_quadratic_convexity_hessian():
    c = ex.convexity_scan(cfg_of(potential={"name": "quadratic", "Q": [[2.0]]}, F_grid=[[0.3]]))
    assert np.allclose(c["points"][0]["hessian"], [[2.0]], atol=1e-8)
    assert c["verdict"] == "convex at resolution"


def test_scaling_limit_gaussian():
    res = ex.scaling_limit(cfg_of(potential={"name": "quadratic"}, beta=4.0, samples=2048, replicates=8),
                           N_list=[1, 2])
    for row in res["rows"]:
        assert row["z"] < 4.0
        assert all(v <= 1.0 + 1e-9 for v in row["derivative_ratios"].values())
    assert res["gap_decreasing"]


def test_scaling_gap_decreases_in_2d():
    res = ex.scaling_limit(cfg_of(d=2, N=1, potential={"name": "quadratic"}), N_list=[1, 2, 3], monte_carlo=False)
    assert res["gap_decreasing"]


def test_mode_function_is_periodic():
    f = ex.mode_function([1, 2], amplitude=0.5)
    x = np.random.default_rng(0).uniform(0, 1, (10, 2))
    assert np.allclose(f(x), f(x + np.array([1.0, -1.0])))


def test_report_is_plain_json_and_csv(tmp_path):
    rep = ex.run_pipeline(cfg_of(stages=["frd", "free_energy"], samples=512, replicates=4, chunk=256))
    assert rep["stages"]["frd"]["status"] == "ok"
    assert rep["stages"]["rg"]["status"] == "skipped"
    js, cs = ex.write_report(rep, tmp_path)
    assert json.loads(js.read_text())["config_hash"] == rep["config_hash"]
    header = cs.read_text().splitlines()[0].split(",")
    assert tuple(header) == ex.CSV_COLUMNS


def test_precondition_failure_is_recorded():
    rep = ex.run_pipeline(cfg_of(stages=["free_energy"], potential={"name": "quadratic", "Q": [[-1.0]]}))
    st = rep["stages"]["free_energy"]
    assert st["status"] == "failed" and st["kind"] == "precondition"
