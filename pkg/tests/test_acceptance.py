"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line in the terminal summary."""
import math
import time

import numpy as np
import pytest
from conftest import record

from rgpl import elasticity as E
from rgpl import experiments as ex
from rgpl import rg
from rgpl.frd import build_frd, build_symbol, frd_min_eigenvalue, range_violations, telescoping_error, \
    verify_frd_scaling
from rgpl.gaussian import GaussianBackend, GaussianField
from rgpl.norms import NormScale, RelevantHamiltonian, remainder_check
from rgpl.pi2 import contraction_measure, make_frame, orthogonality_defect, pi2, random_cubic_bank, \
    relevant_functional
from rgpl.polymers import GeometryParams, alpha_app1, combinatorial_bounds
from rgpl.potentials import GradientSpace, MayerFunction, quartic_potential
from rgpl.torus import TorusGeometry, binom_poly
from rgpl.weights import WeightFamily, gaussian_identity_check, random_admissible_pair, recipe_params, \
    verify_weight_properties

QUAD = GaussianBackend(order=4, max_nodes=1 << 16)


def reference(beta=16.0):
    t = TorusGeometry(1, 3, 2, 1)
    sp = GradientSpace.nearest_neighbour(1, 1)
    geo = GeometryParams(1, 3, 2, 1)
    frd = build_frd(build_symbol(np.eye(1), None, t, sp))
    return t, sp, geo, frd, MayerFunction(quartic_potential(sp), beta)


def test_criterion_01_frd_structure():
    t0 = time.time()
    worst = {"tele": 0.0, "viol": 0, "eig": math.inf}
    for d in (1, 2):
        for N in (2, 3):
            t = TorusGeometry(d, 3, N)
            f = build_frd(build_symbol(np.eye(d), None, t, GradientSpace.nearest_neighbour(d)))
            worst["tele"] = max(worst["tele"], telescoping_error(f))
            worst["viol"] += range_violations(f)
            worst["eig"] = min(worst["eig"], frd_min_eigenvalue(f))
    dt = time.time() - t0
    ok = worst["tele"] < 1e-10 and worst["viol"] == 0 and worst["eig"] > -1e-12 and dt < 30
    assert record(1, ok, f"telescoping {worst['tele']:.1e}, violations {worst['viol']}, "
                         f"min eig {worst['eig']:.1e}, {dt:.1f}s")


def test_criterion_02_frd_scaling():
    t = TorusGeometry(3, 3, 4)
    r = verify_frd_scaling(build_frd(build_symbol(np.eye(3), None, t, GradientSpace.nearest_neighbour(3))))
    bad = [(f["alpha"], round(f["exponent"], 2), f["target"]) for f in r["scaling_fits"] if not f["pass"]]
    assert record(2, r["pass"], f"{len(bad)} of {len(r['scaling_fits'])} fits outside +-0.5, e.g. {bad[:2]}")


def test_criterion_03_gaussian_identity():
    rng = np.random.default_rng(2024)
    quad_err, mc_fail = 0.0, 0
    for trial in range(100):
        dim = 1 + trial % 2
        A, C = random_admissible_pair(dim, rng)
        r = gaussian_identity_check(A, C, 0.3 * rng.normal(size=dim), mode="quadrature")
        quad_err = max(quad_err, r["abs_err"] / max(1.0, r["rhs"]))
        A, C = random_admissible_pair(3, rng)
        be = GaussianBackend(mode="mc", n_samples=100000, seed=trial)
        mc_fail += not gaussian_identity_check(A, C, 0.3 * rng.normal(size=3), mode="mc", backend=be)["pass"]
    ok = quad_err <= 1e-10 and mc_fail == 0
    assert record(3, ok, f"quadrature max err {quad_err:.1e}, MC {100 - mc_fail}/100 within 3 SE")


def test_criterion_04_weights():
    reps = {}
    for L in (3, 9):
        t = TorusGeometry(1, L, 2)
        frd = build_frd(build_symbol(np.eye(1), None, t, GradientSpace.nearest_neighbour(1)))
        params, _ = recipe_params(frd)
        reps[L] = verify_weight_properties(WeightFamily(frd, params))
    r3 = reps[3]
    ab3, ab9 = r3["w8"]["A_B"], reps[9]["w8"]["A_B"]
    ap3, ap9 = r3["w7"]["A_P"], reps[9]["w7"]["A_P"]
    items = {k: r3[k]["pass"] for k in ("w1", "w2", "w3", "w4", "w7", "w8")}
    stable = abs(ab9 - ab3) / ab3 < 0.5 and ap9 > ap3
    ok = all(items.values()) and stable
    assert record(4, ok, f"{items}, w4 max err {r3['w4']['max_err']:.1e}, A_B {ab3:.2f}->{ab9:.2f}, "
                         f"A_P {ap3:.2f}->{ap9:.2f}")


def test_criterion_05_pi2():
    fr = make_frame(TorusGeometry(d=1, L=3, N=3, m=1), 0)
    idem, orth = 0.0, 0.0
    for K in random_cubic_bank(fr, 50, seed=5):
        H = pi2(K, fr)
        idem = max(idem, float(np.abs(pi2(relevant_functional(H, fr), fr).to_vector() - H.to_vector()).max()))
        orth = max(orth, orthogonality_defect(K, fr, H))
    cm = contraction_measure(1, [3, 9, 27], bank_size=10)
    ok = idem < 1e-9 and orth < 1e-9 and cm["pass"]
    assert record(5, ok, f"idempotence {idem:.1e}, orthogonality {orth:.1e}, "
                         f"slope {cm['fit']['slope']:.2f} +- {cm['fit']['se']:.2f}")


def test_criterion_06_conjugation():
    t, sp, geo, frd, kap = reference()
    H = RelevantHamiltonian.from_vector(1, 1, [0.01, 0.0, -0.02])
    st = rg.RGState(0, H, rg.mayer_map(t, geo, sp, kap), np.zeros((1, 1)))
    probes = GaussianField(frd.slices[0]).samples(0, 1, 0, 5)
    q = rg.conjugation_check(st, frd, probes, "quadrature", QUAD)
    mc = rg.conjugation_check(st, frd, probes, "mc", n_samples=4096)
    ok = q["max_rel_err"] < 1e-6 and mc["max_z"] < 3
    assert record(6, ok, f"quadrature rel err {q['max_rel_err']:.1e}, MC max z {mc['max_z']:.2f}")


def test_criterion_07_linearisation():
    t, sp, geo, frd, kap = reference()
    probes = GaussianField(frd.slices[0]).samples(0, 1, 0, 3)
    Hq = RelevantHamiltonian.from_vector(1, 1, [0.3, 0.7, -1.1])
    dk = rg.dH_K_check(0, frd, geo, Hq, probes, mode="mc", n_samples=2048)
    a_err, norm_ok, gated = 0.0, True, 0
    for k in (0, 1):
        ops = rg.linearize(k, frd, geo, backend=QUAD)
        a_err = max(a_err, rg.A_formula_check(ops, Hq)["max_err"])
        for h in (0.5, 1.0, 2.0, 4.0):
            sc = NormScale(1, 3, h, 1, 1)
            if sc.h_j(k) ** 2 >= ops.c20():
                gated += 1
                norm_ok &= ops.A_inverse_norm(sc) <= 0.75
    ok = dk["max_z"] < 3 and a_err <= 1e-9 and norm_ok and gated > 0
    assert record(7, ok, f"dK/dH max z {dk['max_z']:.2f}, A formula err {a_err:.1e}, "
                         f"||A^-1|| <= 3/4 on {gated} gated cases: {norm_ok}")


def test_criterion_08_fine_tuning():
    t, sp, geo, frd, kap = reference(32.0)
    lhs = rg.gradient_product_expectation(lambda z: 1 + kap(z[..., None]), t)
    cfg = rg.FineTuneConfig(paths=1 << 12, final_paths=1 << 14)
    res = rg.fine_tune(kap, t, sp, np.eye(1), cfg, lhs=lhs)
    rate = rg.geometric_rate(res.inner_residuals, cfg.inner_tol)
    n_it = len(res.inner_residuals)
    rel = res.representation["rel_err"]
    zero = rg.fine_tune(lambda z: np.zeros(z.shape[:-1]), t, sp, np.eye(1), kappa_is_zero=True, lhs=1.0)
    ok = rate < 0.9 and n_it >= 10 and rel < 1e-3 and zero.representation["rel_err"] == 0.0
    assert record(8, ok, f"inner rate {rate:.2f} over {n_it} iterations, rel err {rel:.1e}, "
                         f"K=0 rel err {zero.representation['rel_err']}")


def test_criterion_09_null_lagrangians():
    brute = [E.null_test(N, trials=100)["passed"] for N in
             (E.det_null_lagrangian(2), E.det_null_lagrangian(3), E.n0_null_lagrangian(2),
              E.linear_null_lagrangian(2, (1, 2)))]
    rng = np.random.default_rng(9)
    per = E.periodic_null_test(E.det_null_lagrangian(2), rng.standard_normal((2, 2)), TorusGeometry(2, 3, 2, 2))
    det_err = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 4))
        F = rng.standard_normal((d, d))
        det_err = max(det_err, abs(float(E.discrete_det(E.restrict_linear(F, E.unit_cell(d)))) - np.linalg.det(F)))
    skew = max(E.hessian_det_on_skew(2)["rel_err"], E.hessian_det_on_skew(3)["rel_err"])
    ok = all(brute) and per["max_rel_err"] <= 1e-9 and det_err <= 1e-12 and skew <= 1e-6
    assert record(9, ok, f"brute force {sum(brute)}/4, periodic {per['max_rel_err']:.1e}, "
                         f"det err {det_err:.1e}, skew Hessian {skew:.1e}")


def test_criterion_10_convexification():
    conv = E.convexify(E.spring_potential(2))
    t = TorusGeometry(2, 3, 2, 2)
    rng = np.random.default_rng(10)
    sums = [abs(E.periodic_QN_sum(conv, rng.standard_normal(t.field_shape), t)) for _ in range(20)]
    ok = conv.margin > 0 and conv.omega1 > 0 and max(sums) < 1e-10
    assert record(10, ok, f"alpha {conv.alpha:.3f}, margin {conv.margin:.3f}, omega1 {conv.omega1:.3f}, "
                          f"max |sum Q_N| {max(sums):.1e}")


def test_criterion_11_scaling_limit():
    g = ex.scaling_limit(ex.ExperimentConfig.from_dict({"seed": 11, "potential": {"name": "quadratic"}, "beta": 4.0,
                                                        "samples": 4096, "replicates": 8}), N_list=[1, 2])
    zs = [r["z"] for r in g["rows"]]
    c = ex.scaling_limit(ex.ExperimentConfig.from_dict({"seed": 11, "d": 2, "N": 1,
                                                        "potential": {"name": "quadratic"}}),
                         N_list=[1, 2, 3], monte_carlo=False)
    ok = max(zs) < 3 and c["gap_decreasing"]
    gaps = [f"{r['gap']:.1e}" for r in c["rows"]]
    assert record(11, ok, f"MC z {['%.2f' % z for z in zs]}, d=2 gaps {gaps}")


def test_criterion_12_taylor_remainder():
    rng = np.random.default_rng(12)
    holds, sharp = True, 0.0
    for d in (1, 2, 3):
        for s in (1, 2, 3):
            c = rng.normal(size=d)
            f = lambda z, c=c: np.sin(z @ c * 0.4) + 0.05 * np.sum(z, -1) ** 4
            a = rng.integers(-3, 4, size=d)
            holds &= remainder_check(f, a, s, 4)["holds"]
            r = remainder_check(lambda z, s=s: binom_poly(z.sum(-1), s + 1), np.zeros(d, int), s, 4)
            holds &= r["holds"]
            sharp = max(sharp, r["sharp_gap_beta0"])
    ok = holds and sharp == 0.0
    assert record(12, ok, f"bound holds on all boxes: {holds}, sharp example gap {sharp}")


def test_criterion_13_combinatorics():
    r1 = combinatorial_bounds(GeometryParams(1, 3, 5), 0, 6)
    r2 = combinatorial_bounds(GeometryParams(2, 3, 6), 0, 6)
    alpha_ok = alpha_app1(2) == 1 / 185
    ok = r1["app1_holds"] and r2["app1_holds"] and alpha_ok and 0 < r1["delta"] < 1
    assert record(13, ok, f"app1 checked {r1['app1_checked']} + {r2['app1_checked']} polymers, "
                          f"alpha(2) = 1/185: {alpha_ok}, delta(d=1) {r1['delta']:.3f}")


def test_criterion_14_determinism(tmp_path):
    base = {"seed": 14, "samples": 1024, "replicates": 4, "chunk": 256, "F_grid": [[-0.1], [0.0], [0.1]],
            "stages": ["frd", "weights", "free_energy", "convexity", "scaling"]}
    texts = []
    for threads in (1, 2):
        cfg = ex.ExperimentConfig.from_dict(dict(base, threads=threads, out=str(tmp_path / f"t{threads}")))
        js, cs = ex.write_report(ex.run_pipeline(cfg), cfg.out)
        texts.append((js.read_bytes(), cs.read_bytes()))
    ok = texts[0] == texts[1]
    assert record(14, ok, f"report.json {len(texts[0][0])} bytes and report.csv identical for 1 and 2 threads")
