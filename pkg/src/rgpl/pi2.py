"""Projection onto relevant Hamiltonians by duality with discrete polynomials."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .norms import (LocalFunctional, NormScale, RelevantHamiltonian, dual_norm_Tphi, hamiltonian_norm,
                    region_mask, v1_index, v2_index)
from .polymers import GeometryParams, Polymer, star
from .torus import TorusGeometry, b_poly, multi_indices

log = logging.getLogger(__name__)


@dataclass
class BlockFrame:
    """A k-block B with its lex-least corner, site list and small-set neighbourhood mask."""
    torus: TorusGeometry
    geo: GeometryParams
    k: int
    block: tuple

    @property
    def side(self) -> int:
        return self.torus.L ** self.k

    @property
    def base(self) -> np.ndarray:
        h = (self.side - 1) // 2
        return np.array([c * self.side - h for c in self.block])

    @property
    def sites(self) -> list:
        n = self.torus.n
        rng = [range(b, b + self.side) for b in self.base]
        return [tuple(int(v) % n for v in x) for x in np.stack(np.meshgrid(*rng, indexing="ij"), -1).reshape(-1, self.torus.d)]

    @property
    def star_mask(self) -> np.ndarray:
        return region_mask(self.torus, star(Polymer(self.k, (tuple(self.block),)), self.geo))

    def unwrap(self, x: Sequence[int]) -> np.ndarray:
        """Representative of a torus site nearest to the block, relative to the base corner."""
        n = self.torus.n
        rel = (np.asarray(x) - self.base) % n
        centre = (self.side - 1) // 2
        return (rel - centre + n // 2) % n - n // 2 + centre


def make_frame(torus: TorusGeometry, k: int, block=None, R0: int = 1) -> BlockFrame:
    geo = GeometryParams(torus.d, torus.L, torus.N, R0)
    block = (0,) * torus.d if block is None else tuple(block)
    return BlockFrame(torus, geo, k, block)


class TestPolynomialSpace:
    """P0, P1, P2 as coordinate vectors in the label space of a functional."""

    def __init__(self, frame: BlockFrame, m: int):
        self.frame = frame
        self.d = frame.torus.d
        self.m = m
        self.v1 = v1_index(self.d, m)
        self.v2 = v2_index(self.d, m)

    def z(self, F: LocalFunctional, i: int, gamma) -> np.ndarray:
        """Label vector of the field b_gamma e_i: z_l = delta_{i i_l} b_{gamma - alpha_l}(x_l - base)."""
        out = np.zeros(F.p)
        for l, (x, il, a) in enumerate(F.labels):
            if il != i:
                continue
            sh = tuple(g - u for g, u in zip(gamma, a))
            if min(sh) < 0:
                continue
            out[l] = float(b_poly(sh, self.frame.unwrap(x)[None, :])[0])
        return out

    @staticmethod
    def N(mm) -> int:
        return 1 if mm[0] == mm[1] else 2

    def pair0(self, T) -> float:
        return float(T[0])

    def pair1(self, F, T, i, gamma) -> float:
        return float(np.dot(T[1], self.z(F, i, gamma)))

    def pair2(self, F, T, mm) -> float:
        (i, a), (j, b) = mm
        u, v = self.z(F, i, a), self.z(F, j, b)
        return self.N(mm) * 0.5 * float(u @ T[2] @ v)

    def pairings(self, F: LocalFunctional, T=None) -> np.ndarray:
        """<F, g>_0 for g running through 1, b_{v1}, f_{v2}."""
        T = F.taylor(None, 2) if T is None else T
        out = [self.pair0(T)]
        out += [self.pair1(F, T, i, a) for i, a in self.v1]
        out += [self.pair2(F, T, mm) for mm in self.v2]
        return np.array(out)


def _v1_matrix(frame: BlockFrame, v1: list) -> np.ndarray:
    box = np.stack(np.meshgrid(*[np.arange(frame.side)] * frame.torus.d, indexing="ij"), -1).reshape(-1, frame.torus.d)
    B = np.zeros((len(v1), len(v1)))
    for r, (ip, ap) in enumerate(v1):
        for c, (i, a) in enumerate(v1):
            if i != ip:
                continue
            sh = tuple(x - y for x, y in zip(ap, a))
            if min(sh) < 0:
                continue
            B[r, c] = float(np.sum(b_poly(sh, box)))
    return B


def pi2_from_pairings(frame: BlockFrame, p0: float, p1: dict, p2: dict) -> RelevantHamiltonian:
    """Relevant Hamiltonian with prescribed pairings <H, 1>, <H, b_gamma e_i>, <H, f_m>."""
    d, m, k, L = frame.torus.d, frame.torus.m, frame.k, frame.torus.L
    vol = L ** (k * d)
    v1 = v1_index(d, m)
    H = RelevantHamiltonian(d, m)
    H.a0 = p0 / vol
    for mm in v2_index(d, m):
        H.a2[mm] = p2[mm] / vol
    rhs = np.array([p1[key] for key in v1])
    B = _v1_matrix(frame, v1)
    order = np.argsort([sum(a) for _, a in v1], kind="stable")
    Bo = B[np.ix_(order, order)]
    assert np.allclose(np.diag(Bo), vol) and np.allclose(np.triu(Bo, 1), 0.0), "degenerate triangular system"
    sol = solve_triangular(Bo, rhs[order], lower=True)
    coef = np.empty_like(sol)
    coef[order] = sol
    H.a1 = {key: float(c) for key, c in zip(v1, coef)}
    return H


def pi2(K: LocalFunctional, frame: BlockFrame, T=None) -> RelevantHamiltonian:
    """Pi_2 K(B): the unique relevant Hamiltonian with the same pairings against P0 + P1 + P2."""
    P = TestPolynomialSpace(frame, frame.torus.m)
    T = K.taylor(None, 2) if T is None else T
    p1 = {(i, a): P.pair1(K, T, i, a) for i, a in P.v1}
    p2 = {mm: P.pair2(K, T, mm) for mm in P.v2}
    return pi2_from_pairings(frame, P.pair0(T), p1, p2)


def polynomial_field(frame: BlockFrame, i: int, gamma) -> np.ndarray:
    """The field b_gamma(x - base) e_i on unwrapped sites; it jumps only far from the block."""
    t = frame.torus
    pts = np.stack(np.meshgrid(*[np.arange(t.n)] * t.d, indexing="ij"), -1).reshape(-1, t.d)
    rel = np.array([frame.unwrap(x) for x in pts])
    out = np.zeros(t.field_shape)
    out[..., i] = b_poly(tuple(gamma), rel).reshape(t.grid_shape)
    return out


_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def field_pairings(F: Callable[[np.ndarray], np.ndarray], frame: BlockFrame, step: float = 0.05) -> tuple:
    """Pairings of a field functional with P0 + P1 + P2 by 5-point directional differences.

    F maps a batch of fields (B, *field_shape) to (B,).  Mixed second derivatives use
    polarisation along u + v and u - v.
    """
    t = frame.torus
    v1, v2 = v1_index(t.d, t.m), v2_index(t.d, t.m)
    dirs = {key: polynomial_field(frame, *key) for key in v1}
    lines = []
    for key in v1:
        lines.append(dirs[key])
    for (a, b) in v2:
        if a != b:
            lines += [dirs[a] + dirs[b], dirs[a] - dirs[b]]
    ts = step * np.arange(-2, 3)
    fields = [np.zeros(t.field_shape)] + [s * u for u in lines for s in ts if s != 0]
    vals = np.asarray(F(np.stack(fields)), dtype=float)
    f0 = vals[0]
    rows = []
    for j in range(len(lines)):
        side = vals[1 + 4 * j: 5 + 4 * j]
        rows.append(np.array([side[0], side[1], f0, side[2], side[3]]))
    d1 = [float(r @ _D1) / step for r in rows]
    d2 = [float(r @ _D2) / step ** 2 for r in rows]
    p1 = {key: d1[n] for n, key in enumerate(v1)}
    p2 = {}
    pos = len(v1)
    for mm in v2:
        a, b = mm
        if a == b:
            second = d2[v1.index(a)]
        else:
            second = 0.25 * (d2[pos] - d2[pos + 1])
            pos += 2
        p2[mm] = TestPolynomialSpace.N(mm) * 0.5 * second
    return float(f0), p1, p2


def pi2_field(F: Callable[[np.ndarray], np.ndarray], frame: BlockFrame, step: float = 0.05) -> RelevantHamiltonian:
    """Pi_2 of a functional given as a batched field evaluator."""
    return pi2_from_pairings(frame, *field_pairings(F, frame, step))


def relevant_functional(H: RelevantHamiltonian, frame: BlockFrame) -> LocalFunctional:
    return H.as_functional(frame.torus, frame.sites)


def remainder_functional(K: LocalFunctional, frame: BlockFrame, H: RelevantHamiltonian | None = None) -> LocalFunctional:
    """(1 - Pi_2) K(B)."""
    H = pi2(K, frame) if H is None else H
    return K.combine(relevant_functional(H, frame), 1.0, -1.0)


def orthogonality_defect(K: LocalFunctional, frame: BlockFrame, H: RelevantHamiltonian | None = None) -> float:
    """max_g |<K - Pi_2 K, g>_0| / max(1, max |<K, g>_0|) over the basis of P."""
    H = pi2(K, frame) if H is None else H
    P = TestPolynomialSpace(frame, frame.torus.m)
    pk = P.pairings(K)
    ph = P.pairings(relevant_functional(H, frame))
    return float(np.max(np.abs(pk - ph)) / max(1.0, float(np.max(np.abs(pk)))))


# ---------------------------------------------------------------------------
# functional banks


def random_cubic_bank(frame: BlockFrame, count: int, seed: int = 0, spread: str = "block",
                      max_order: int | None = None) -> list:
    """Random polynomial functionals of degree <= 3 in gradient labels near the block."""
    t = frame.torus
    rng = np.random.default_rng(seed)
    if spread == "block":
        sites = frame.sites
    else:
        sites = [tuple(int(v) for v in s) for s in np.argwhere(frame.star_mask)]
    p_phi = t.d // 2 + 2
    alphas = multi_indices(t.d, 1, p_phi if max_order is None else max_order)
    labels = [(x, i, a) for x in sites for i in range(t.m) for a in alphas]
    bank = []
    for _ in range(count):
        p = len(labels)
        keep = rng.random(p) < min(1.0, 6.0 / p) if p > 6 else np.ones(p, bool)
        keep[rng.integers(p)] = True
        lab = [l for l, kp in zip(labels, keep) if kp]
        q = len(lab)
        c1 = rng.normal(size=q)
        A = rng.normal(size=(q, q))
        c2 = 0.5 * (A + A.T)
        C3 = rng.normal(size=(q, q, q))
        C3 = sum(np.transpose(C3, perm) for perm in
                 [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]) / 6
        bank.append(LocalFunctional.polynomial(t, lab, [rng.normal(), c1, c2, C3], name="cubic"))
    return bank


# ---------------------------------------------------------------------------
# diagnostics


def pi2_boundedness(K: LocalFunctional, frame: BlockFrame, scale: NormScale, **kw) -> dict:
    """||Pi_2 K||_{k,0} against the bracket of |K(B)|_{k,B,T_0}."""
    H = pi2(K, frame)
    hn = hamiltonian_norm(H, frame.k, scale)
    b = dual_norm_Tphi(K, scale, frame.k, frame.star_mask, None, **kw)
    return {"hamiltonian_norm": hn, "K_lower": b["lower"], "K_upper": b["upper"],
            "ratio": hn / b["upper"] if b["upper"] > 0 else 0.0,
            "ratio_vs_lower": hn / b["lower"] if b["lower"] > 0 else math.inf}


def contraction_ratio(K: LocalFunctional, frame: BlockFrame, scale: NormScale, **kw) -> dict:
    """|(1 - Pi_2)K|_{k+1,B,T_0} (upper) over |K|_{k,B,T_0} (lower)."""
    Xs = frame.star_mask
    rem = remainder_functional(K, frame)
    num = dual_norm_Tphi(rem, scale, frame.k + 1, Xs, None, **kw)
    den = dual_norm_Tphi(K, scale, frame.k, Xs, None, **kw)
    return {"num": [num["lower"], num["upper"]], "den": [den["lower"], den["upper"]],
            "ratio": num["upper"] / den["lower"] if den["lower"] > 0 else math.inf}


def fit_exponent(xs: Sequence[float], ys: Sequence[float]) -> dict:
    """Least-squares slope of log y against log x with its standard error."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    dof = max(len(xs) - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return {"slope": float(coef[0]), "intercept": float(coef[1]), "se": float(math.sqrt(max(cov[0, 0], 0.0)))}


def contraction_measure(d: int, L_list: Sequence[int], k: int = 0, bank_size: int = 10, seed: int = 0,
                        m: int = 1, h: float = 1.0, bank: Callable | None = None, **kw) -> dict:
    """Fit the decay of the worst bank contraction ratio in L; passes if slope <= -d within fit error."""
    if len(L_list) < 3:
        raise ValueError("contraction_measure needs at least three L values")
    rows = []
    for L in L_list:
        N = k + 2
        while L ** N < 4 * (2 ** d + max(1, 2 * (d // 2) + 3) + d // 2 + 2) + L ** (k + 1):
            N += 1
        t = TorusGeometry(d=d, L=L, N=N, m=m)
        frame = make_frame(t, k)
        scale = NormScale(d=d, L=L, h=h, m=m)
        fs = bank(frame) if bank is not None else random_cubic_bank(frame, bank_size, seed, spread="block")
        ratios = [contraction_ratio(K, frame, scale, **kw)["ratio"] for K in fs]
        rows.append({"L": L, "N": N, "max_ratio": float(max(ratios)), "median_ratio": float(np.median(ratios))})
    fit = fit_exponent([r["L"] for r in rows], [r["max_ratio"] for r in rows])
    ref = -(d / 2 + d // 2 + 1)
    return {"rows": rows, "fit": fit, "reference_exponent": ref,
            "pass": bool(fit["slope"] - fit["se"] <= -d)}
