"""Large-field regulator: quadratic forms A_k^X, A_{k:k+1}^X, M_k^X, G_k^X as dense operators.

Operators act on flattened fields (site-major, component-minor) and annihilate constants.
The toy scale keeps V * m small enough that dense eigendecompositions are cheap.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .frd import FiniteRangeDecomposition
from .gaussian import GaussianBackend, chunk_rng
from .norms import NormScale, field_norm, region_mask
from .polymers import GeometryParams, Polymer, Region, plus, star, strictly_disjoint
from .torus import TorusGeometry, multi_indices

log = logging.getLogger(__name__)

KER_TOL = 1e-10


class WeightAdmissibilityError(RuntimeError):
    """The PSD precondition A < ((1 + zeta) C)^-1 failed; carries the violating eigenpair."""

    def __init__(self, msg, value=None, vector=None):
        super().__init__(msg)
        self.value = value
        self.vector = vector


@dataclass(frozen=True)
class WeightParams:
    d: int
    L: int
    zeta_bar: float = 0.05
    delta: float = 1e-3
    lam: float = 0.01
    mu: float = 1.0
    h: float = 1.0
    R0: int = 1

    def __post_init__(self):
        if not 0 < self.zeta_bar < 0.25:
            raise ValueError("zeta_bar must lie in (0, 1/4)")

    @property
    def R(self) -> int:
        return max(self.R0, 2 * (self.d // 2) + 3)

    @property
    def M(self) -> int:
        return 2 * (self.d // 2) + 3

    @property
    def xi_max(self) -> int:
        return (2 * self.R + 1) ** self.d

    def delta_j(self, j: int) -> float:
        return 4.0 ** (-j) * self.delta

    def zeta_bar_j(self, j: int) -> float:
        return 2 * self.zeta_bar - sum(self.mu * self.xi_max * self.delta_j(i) for i in range(j + 1))

    def h_j(self, j: int) -> float:
        return 2.0 ** j * self.h


# ---------------------------------------------------------------------------
# dense building blocks


def _diff_matrix(torus: TorusGeometry, alpha) -> np.ndarray:
    """Dense matrix of grad^alpha on flattened fields."""
    V, m = torus.volume, torus.m
    eye = np.eye(V).reshape((V,) + torus.grid_shape + (1,))
    D = torus.diff(eye, alpha).reshape(V, V).T
    return np.kron(D, np.eye(m))


@lru_cache(maxsize=64)
def _diff_cached(torus: TorusGeometry, alpha: tuple) -> np.ndarray:
    return _diff_matrix(torus, alpha)


def site_mask_of(torus: TorusGeometry, X: Polymer, geo: GeometryParams) -> np.ndarray:
    return region_mask(torus, Region.from_polymer(X, geo))


def polymer_from_mask(mask: np.ndarray, k: int, geo: GeometryParams) -> Polymer:
    """Smallest k-polymer containing every marked site."""
    s = geo.side(k)
    h = (s - 1) // 2
    nb = geo.nb(k)
    sites = np.argwhere(mask)
    blocks = {tuple(int(v) for v in ((x + h) // s) % nb) for x in sites}
    return Polymer.make(k, blocks, geo)


def star_polymer(X: Polymer, geo: GeometryParams, torus: TorusGeometry) -> Polymer:
    """X* as a polymer one scale below X (X of scale k+1 >= 1)."""
    return polymer_from_mask(region_mask(torus, star(X, geo)), X.k - 1, geo)


def chi(X: Polymer, geo: GeometryParams, torus: TorusGeometry) -> np.ndarray:
    """chi_X(x) = #{B in X : x in B+}."""
    out = np.zeros(torus.grid_shape)
    for b in X.blocks:
        out += region_mask(torus, plus(Polymer(X.k, (b,)), geo))
    return out


def build_M(X: Polymer, k: int, geo: GeometryParams, torus: TorusGeometry, M: Optional[int] = None) -> np.ndarray:
    """M_k^X = sum_{1<=|a|<=M} L^{2k(|a|-1)} (grad^*)^a chi_X grad^a."""
    M = 2 * (geo.d // 2) + 3 if M is None else M
    Vm = torus.volume * torus.m
    out = np.zeros((Vm, Vm))
    if not X.blocks:
        return out
    c = np.repeat(chi(X, geo, torus).reshape(-1), torus.m)
    for a in multi_indices(geo.d, 1, M):
        D = _diff_cached(torus, a)
        out += geo.L ** (2 * k * (sum(a) - 1)) * D.T @ (c[:, None] * D)
    return out


def build_M_bar(k: int, torus: TorusGeometry, M: int) -> np.ndarray:
    """Translation-invariant M_k (chi = 1)."""
    Vm = torus.volume * torus.m
    out = np.zeros((Vm, Vm))
    for a in multi_indices(torus.d, 1, M):
        D = _diff_cached(torus, a)
        out += torus.L ** (2 * k * (sum(a) - 1)) * D.T @ D
    return out


def M_bar_symbol(k: int, torus: TorusGeometry, M: int) -> np.ndarray:
    out = np.zeros(torus.grid_shape)
    for a in multi_indices(torus.d, 1, M):
        out += torus.L ** (2 * k * (sum(a) - 1)) * np.abs(torus.q_power(a)) ** 2
    return out


def build_G(X_mask: np.ndarray, k: int, params: WeightParams, torus: TorusGeometry) -> np.ndarray:
    """Strong weight G_k^X with the indicator of the site set X."""
    Vm = torus.volume * torus.m
    out = np.zeros((Vm, Vm))
    c = np.repeat(X_mask.reshape(-1).astype(float), torus.m)
    for a in multi_indices(torus.d, 1, torus.d // 2 + 1):
        D = _diff_cached(torus, a)
        out += torus.L ** (2 * k * (sum(a) - 1)) * D.T @ (c[:, None] * D)
    return out / params.h_j(k) ** 2


def build_QX(X_mask: np.ndarray, Q: np.ndarray, space, torus: TorusGeometry) -> np.ndarray:
    """(phi, A phi) = sum_{x in X} Q(D phi(x)) as a dense operator."""
    Vm = torus.volume * torus.m
    Ds = [_diff_cached(torus, a) for a in space.I]
    # rows of E: (site, alpha, component)
    m = torus.m
    E = np.stack([D.reshape(torus.volume, m, Vm) for D in Ds], axis=1).reshape(torus.volume, len(Ds) * m, Vm)
    Ex = E[X_mask.reshape(-1)]
    return np.einsum("xai,ab,xbj->ij", Ex, Q, Ex)


def covariance_matrix(frd: FiniteRangeDecomposition, j: int) -> np.ndarray:
    """Dense C_j (j = 1..N+1)."""
    return frd.slices[j - 1].dense()


def sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(sym(A))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def extended_f(A: np.ndarray, C: np.ndarray, factor: float = 1.0) -> np.ndarray:
    """(A^-1 - factor C)^-1 on ker(A)^perp, extended by zero on ker A."""
    A = sym(A)
    if not np.any(A):
        return np.zeros_like(A)
    S = psd_sqrt(A)
    K = sym(S @ (factor * C) @ S)
    w, v = np.linalg.eigh(K)
    if w.max() >= 1.0 - 1e-12:
        raise WeightAdmissibilityError(f"A^(1/2) C A^(1/2) has eigenvalue {w.max():.6g} >= 1", w.max(), v[:, -1])
    inv = (v / (1.0 - w)) @ v.T
    return sym(S @ inv @ S)


def neumann_f(A: np.ndarray, C: np.ndarray, terms: int) -> np.ndarray:
    """Partial sum of sum_i A (C A)^i."""
    out = np.zeros_like(A)
    P = A.copy()
    for _ in range(terms):
        out += P
        P = P @ C @ A
    return out


def min_eig_zero_average(A: np.ndarray, torus: TorusGeometry) -> tuple[float, np.ndarray]:
    """Smallest eigenvalue of A restricted to fields orthogonal to constants."""
    P = zero_average_basis(torus)
    w, v = np.linalg.eigh(sym(P.T @ A @ P))
    return float(w[0]), P @ v[:, 0]


@lru_cache(maxsize=16)
def _zab(V: int, m: int) -> np.ndarray:
    Z = np.zeros((V * m, m))
    for i in range(m):
        Z[i::m, i] = 1.0 / math.sqrt(V)
    q, _ = np.linalg.qr(np.hstack([Z, np.eye(V * m)]))
    return q[:, m:V * m]


def zero_average_basis(torus: TorusGeometry) -> np.ndarray:
    return _zab(torus.volume, torus.m)


def psd_leq(A: np.ndarray, B: np.ndarray, torus: TorusGeometry, tol: float = 1e-10) -> tuple[bool, float]:
    """A <= B on zero-average fields (relative tolerance)."""
    w, _ = min_eig_zero_average(B - A, torus)
    scale = max(1.0, float(np.abs(A).max()), float(np.abs(B).max()))
    return w >= -tol * scale, w


def inverse_on_zero_average(B: np.ndarray, torus: TorusGeometry) -> np.ndarray:
    P = zero_average_basis(torus)
    Bi = np.linalg.inv(sym(P.T @ B @ P))
    return sym(P @ Bi @ P.T)


# ---------------------------------------------------------------------------
# the recursion


class WeightFamily:
    """Lazily built A_k^X, A_{k:k+1}^X for polymers X (memoised by scale and block set)."""

    def __init__(self, frd: FiniteRangeDecomposition, params: WeightParams, Q: Optional[np.ndarray] = None):
        self.frd = frd
        self.torus = frd.torus
        self.params = params
        self.space = frd.symbol.space
        self.Q = frd.symbol.Q if Q is None else np.asarray(Q)
        self.geo = GeometryParams(self.torus.d, self.torus.L, self.torus.N, params.R0)
        self._A: dict = {}
        self._Akk: dict = {}
        self._C: dict = {}

    def C(self, j: int) -> np.ndarray:
        if j not in self._C:
            self._C[j] = covariance_matrix(self.frd, j)
        return self._C[j]

    def C_sum(self, j0: int, j1: int) -> np.ndarray:
        Vm = self.torus.volume * self.torus.m
        out = np.zeros((Vm, Vm))
        for j in range(j0, j1 + 1):
            out += self.C(j)
        return out

    def M(self, X: Polymer) -> np.ndarray:
        return build_M(X, X.k, self.geo, self.torus, self.params.M)

    def A(self, X: Polymer) -> np.ndarray:
        key = (X.k, X.blocks)
        if key in self._A:
            return self._A[key]
        k, p = X.k, self.params
        if not X.blocks:
            Vm = self.torus.volume * self.torus.m
            out = np.zeros((Vm, Vm))
        elif k == 0:
            mask = site_mask_of(self.torus, X, self.geo)
            out = (1 - 4 * p.zeta_bar) * build_QX(mask, self.Q, self.space, self.torus) + p.delta_j(0) * self.M(X)
        else:
            Xs = star_polymer(X, self.geo, self.torus)
            out = self.A_kk(Xs) + p.delta_j(k) * self.M(X)
        out = sym(out)
        self._A[key] = out
        return out

    def A_kk(self, X: Polymer) -> np.ndarray:
        """A_{k:k+1}^X = ((A_k^X)^-1 - (1 + zeta_bar) C_{k+1})^-1 (extended by zero)."""
        key = (X.k, X.blocks)
        if key not in self._Akk:
            self._Akk[key] = extended_f(self.A(X), self.C(X.k + 1), 1 + self.params.zeta_bar)
        return self._Akk[key]

    def whole(self, k: int) -> Polymer:
        nb = self.geo.nb(k)
        return Polymer.make(k, [tuple(c) for c in np.ndindex(*(nb,) * self.torus.d)], self.geo)

    def block(self, k: int, c) -> Polymer:
        return Polymer.make(k, [tuple(c)], self.geo)

    def size_k(self, X: Polymer) -> int:
        return len(X.blocks)


def weight_recursion(frd: FiniteRangeDecomposition, params: WeightParams, polymers: Iterable[Polymer] = (),
                     Q=None) -> WeightFamily:
    """Build the family and eagerly evaluate the listed polymers (raising on inadmissible parameters)."""
    fam = WeightFamily(frd, params, Q)
    for X in polymers:
        fam.A(X)
        if X.k <= frd.torus.N:
            fam.A_kk(X)
    return fam


# ---------------------------------------------------------------------------
# Gaussian identity


def gaussian_identity_rhs(A: np.ndarray, C: np.ndarray, phi: np.ndarray) -> float:
    Cs = psd_sqrt(C)
    K = sym(Cs @ A @ Cs)
    w = np.linalg.eigvalsh(K)
    if w.max() >= 1:
        raise WeightAdmissibilityError("integral diverges: C^(1/2) A C^(1/2) has eigenvalue >= 1", w.max())
    det = float(np.prod(1 - w))
    F = extended_f(A, C)
    return det ** -0.5 * math.exp(0.5 * float(phi @ F @ phi))


def gaussian_identity_check(A: np.ndarray, C: np.ndarray, phi: np.ndarray, mode: str = "auto", order: int = 120,
                            backend: Optional[GaussianBackend] = None) -> dict:
    """int exp((A(phi+psi), phi+psi)/2) mu_C(dpsi) against the closed form."""
    A, C, phi = sym(np.asarray(A, float)), sym(np.asarray(C, float)), np.asarray(phi, float)
    rhs = gaussian_identity_rhs(A, C, phi)
    w, v = np.linalg.eigh(C)
    keep = w > KER_TOL * max(w.max(), 1e-300)
    s, vecs = np.sqrt(w[keep]), v[:, keep]
    r = s.size
    if mode == "auto":
        mode = "quadrature" if r <= 2 else "mc"
    if mode == "quadrature":
        x, wt = hermegauss(order)
        wt = wt / math.sqrt(2 * math.pi)
        grids = np.meshgrid(*([x] * r), indexing="ij")
        Z = np.stack([g.reshape(-1) for g in grids], axis=-1) if r else np.zeros((1, 0))
        W = np.prod(np.stack(np.meshgrid(*([wt] * r), indexing="ij"), -1).reshape(-1, r), axis=-1) if r else np.ones(1)
        psi = (Z * s) @ vecs.T
        y = phi + psi
        vals = np.exp(0.5 * np.einsum("bi,ij,bj->b", y, A, y))
        lhs = math.fsum(W * vals)
        return {"lhs": lhs, "rhs": rhs, "abs_err": abs(lhs - rhs), "rel_err": abs(lhs - rhs) / abs(rhs),
                "se": 0.0, "mode": "quadrature", "pass": abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))}
    backend = GaussianBackend(mode="mc", n_samples=200000) if backend is None else backend
    n_pairs = backend.n_samples // 2
    rng = chunk_rng(backend.seed, backend.stream, 0)
    z = rng.standard_normal((n_pairs, r))
    psi = (z * s) @ vecs.T
    vals = []
    for sgn in (1.0, -1.0):
        y = phi + sgn * psi
        vals.append(np.exp(0.5 * np.einsum("bi,ij,bj->b", y, A, y)))
    pair = 0.5 * (vals[0] + vals[1])
    lhs = float(pair.mean())
    se = float(pair.std(ddof=1) / math.sqrt(pair.size))
    return {"lhs": lhs, "rhs": rhs, "abs_err": abs(lhs - rhs), "rel_err": abs(lhs - rhs) / abs(rhs), "se": se,
            "mode": "mc", "pass": abs(lhs - rhs) <= 3 * se}


def random_admissible_pair(dim: int, rng: np.random.Generator, radius: float = 0.4) -> tuple[np.ndarray, np.ndarray]:
    """Random PD C and PSD A with spectral radius of C^(1/2) A C^(1/2) equal to radius."""
    G = rng.normal(size=(dim, dim))
    C = G @ G.T / dim + 0.2 * np.eye(dim)
    H = rng.normal(size=(dim, dim))
    A = H @ H.T
    Cs = psd_sqrt(C)
    rho = np.linalg.eigvalsh(sym(Cs @ A @ Cs)).max()
    return A * (radius / rho), C


# ---------------------------------------------------------------------------
# property verification


def _polymers_k(fam: WeightFamily, k: int, limit: int) -> list:
    """All polymers of scale k when there are few blocks, else connected ones up to size limit."""
    from .polymers import enumerate_connected
    geo = fam.geo
    nb = geo.nb(k)
    blocks = [tuple(c) for c in np.ndindex(*(nb,) * geo.d)]
    if len(blocks) <= 10:
        out = []
        for mask in range(1, 1 << len(blocks)):
            out.append(Polymer.make(k, [b for i, b in enumerate(blocks) if mask >> i & 1], geo))
        return out
    return list(enumerate_connected(geo, k, limit))


def akbound_rhs(fam: WeightFamily, k: int, j_from: int) -> np.ndarray:
    p = fam.params
    Mbar = build_M_bar(k, fam.torus, p.M)
    B = p.lam * inverse_on_zero_average(Mbar, fam.torus) + (1 + p.zeta_bar_j(k)) * fam.C_sum(j_from, fam.torus.N + 1)
    return inverse_on_zero_average(B, fam.torus)


def _det_factor(A: np.ndarray, C: np.ndarray, rho_bar: float) -> float:
    Cs = psd_sqrt(C)
    w = np.linalg.eigvalsh(sym(Cs @ A @ Cs))
    w = (1 + rho_bar) * w
    if w.max() >= 1:
        return math.inf
    return float(np.prod(1 - w)) ** -0.5


def verify_weight_properties(fam: WeightFamily, max_blocks: int = 4, probes: int = 8, seed: int = 0,
                             h0_gate: bool = True) -> dict:
    """Matrix-level checks of the regulator properties; each item has pass flag and witness."""
    t, geo, p = fam.torus, fam.geo, fam.params
    N = t.N
    rng = np.random.default_rng(seed)
    rep: dict = {"L_gate": {"L": t.L, "required": 2 ** (t.d + 3) + 16 * geo.R,
                            "satisfied": bool(geo.satisfies("weights"))}}
    # w1: monotonicity
    worst, witness = math.inf, None
    for k in range(N + 1):
        polys = _polymers_k(fam, k, max_blocks)
        for X in polys:
            for Y in polys:
                if Y is X or not set(Y.blocks) < set(X.blocks):
                    continue
                for getter in (fam.A, fam.A_kk):
                    ok, w = psd_leq(getter(Y), getter(X), t)
                    if w < worst:
                        worst, witness = w, {"k": k, "X": X.blocks, "Y": Y.blocks}
    rep["w1"] = {"pass": bool(worst >= -1e-9), "min_eig": worst, "witness": witness}
    # w2: A_k <= akbound and A_{k:k+1} <= akk+1bound
    w2 = []
    for k in range(N + 1):
        Xw = fam.whole(k)
        okA, wA = psd_leq(fam.A(Xw), akbound_rhs(fam, k, k + 1), t)
        if k + 2 <= N + 1:
            okB, wB = psd_leq(fam.A_kk(Xw), akbound_rhs(fam, k, k + 2), t)
        else:
            okB, wB = True, math.inf
        w2.append({"k": k, "A_min_eig": wA, "Akk_min_eig": wB, "pass": bool(okA and okB)})
    rep["w2"] = {"pass": all(r["pass"] for r in w2), "rows": w2, "gated": False}
    # w3 / w4: exact splitting
    w3, w4 = [], []
    for k in range(N + 1):
        polys = _polymers_k(fam, k, max_blocks)
        for X in polys:
            for Y in polys:
                if set(X.blocks) & set(Y.blocks) or X.blocks >= Y.blocks:
                    continue
                U = X.union(Y)
                if strictly_disjoint(X, Y, geo):
                    err = float(np.abs(fam.A(U) - fam.A(X) - fam.A(Y)).max())
                    w3.append({"k": k, "X": X.blocks, "Y": Y.blocks, "err": err})
                rX, rY = Region.from_polymer(X, geo), Region.from_polymer(Y, geo)
                if rX.distance(rY) >= 0.75 * t.L ** (k + 1):
                    err = float(np.abs(fam.A_kk(U) - fam.A_kk(X) - fam.A_kk(Y)).max())
                    w4.append({"k": k, "X": X.blocks, "Y": Y.blocks, "err": err})
    rep["w3"] = {"pass": bool(w3) and max(r["err"] for r in w3) <= 1e-12, "cases": len(w3),
                 "max_err": max((r["err"] for r in w3), default=None),
                 "witness": max(w3, key=lambda r: r["err"]) if w3 else None}
    rep["w4"] = {"pass": bool(w4) and max(r["err"] for r in w4) <= 1e-12, "cases": len(w4),
                 "max_err": max((r["err"] for r in w4), default=None),
                 "witness": max(w4, key=lambda r: r["err"]) if w4 else None}
    # w5 / w6: A_k^X + G_k^Y <= A_k^{X u Y}; A_{k:k+1}^X + 2 G_k^{U+} <= A_{k+1}^U
    w5, w6 = [], []
    for k in range(N + 1):
        polys = _polymers_k(fam, k, max_blocks)[:40]
        for X in polys:
            for Y in polys:
                if set(X.blocks) & set(Y.blocks):
                    continue
                G = build_G(site_mask_of(t, Y, geo), k, p, t)
                _, w = psd_leq(fam.A(X) + G, fam.A(X.union(Y)), t)
                w5.append(w)
        if k < N:
            from .polymers import pi_map
            for X in polys:
                U = pi_map(X, geo)
                Gp = build_G(region_mask(t, plus(U, geo)), k, p, t)
                _, w = psd_leq(fam.A_kk(X) + 2 * Gp, fam.A(U), t)
                w6.append(w)
    rep["w5"] = {"pass": bool(min(w5, default=0) >= -1e-9), "min_eig": min(w5, default=None), "gated": h0_gate}
    rep["w6"] = {"pass": bool(min(w6, default=0) >= -1e-9), "min_eig": min(w6, default=None), "gated": h0_gate}
    # w7 / w8: determinant constants
    rho = (1 + p.zeta_bar) ** (1 / 3) - 1
    ap, ab = 0.0, 0.0
    for k in range(N + 1):
        C = fam.C(k + 1)
        for X in _polymers_k(fam, k, max_blocks):
            f = _det_factor(fam.A(X), C, rho)
            ap = max(ap, 2 * f ** (1 / len(X.blocks)))
            if len(X.blocks) == 1:
                ab = max(ab, 2 * f)
    rep["w7"] = {"A_P": ap, "pass": bool(math.isfinite(ap))}
    rep["w8"] = {"A_B": ab, "pass": bool(math.isfinite(ab))}
    # w9: |phi|^2_{k+1,X} <= (phi, (A_{k+1}^X - A_{k:k+1}^X) phi)
    scale = NormScale(d=t.d, L=t.L, h=p.h, m=t.m, R0=p.R0)
    w9 = []
    for k in range(N):
        X = fam.whole(k + 1)
        Xk = polymer_from_mask(site_mask_of(t, X, geo), k, geo)
        D = fam.A(X) - fam.A_kk(Xk)
        Xs = region_mask(t, star(X, geo))
        fields = [_sawtooth(t)] + [t.project_zero_average(t.random_field(rng)) for _ in range(probes)]
        for phi in fields:
            lhs = field_norm(phi, t, scale, k + 1, Xs) ** 2
            rhs = float(phi.reshape(-1) @ D @ phi.reshape(-1))
            w9.append({"k": k, "lhs": lhs, "rhs": rhs})
    rep["w9"] = {"pass": all(r["lhs"] <= r["rhs"] for r in w9), "rows": w9[:3], "gated": h0_gate,
                 "min_margin": min(r["rhs"] - r["lhs"] for r in w9) if w9 else None}
    return rep


def _sawtooth(t: TorusGeometry) -> np.ndarray:
    """phi(x) = x_1 on 0..n-1: constant gradient away from the seam."""
    x1 = np.indices(t.grid_shape)[0].astype(float)
    return t.project_zero_average(np.repeat(x1[..., None], t.m, axis=-1))


def h0(params: WeightParams, sobolev_S: float) -> float:
    """c_d delta^-1/2 with c_d = (M' 3^{2M'} S)^1/2, max with sqrt 8."""
    Mp = params.d // 2 + 1
    cd = math.sqrt(Mp * 3 ** (2 * Mp) * sobolev_S)
    return params.delta ** -0.5 * max(math.sqrt(8.0), cd)


def fitted_lambda(symbol, params: WeightParams) -> dict:
    """omega from omega A <= M_0 <= Omega A per mode; lambda = min(zeta_bar omega, 1/4)."""
    t = symbol.torus
    Mhat = M_bar_symbol(0, t, params.M)
    lam = symbol.eig[0]  # (n..,m)
    mask = np.ones(t.grid_shape, bool)
    mask[(0,) * t.d] = False
    ratio_lo = Mhat[mask][:, None] / lam[mask]
    omega = float(ratio_lo.min())
    Omega = float(ratio_lo.max())
    return {"omega": omega, "Omega": Omega, "lambda": min(params.zeta_bar * omega, 0.25)}


def opineq_check(frd: FiniteRangeDecomposition, params: WeightParams, eps: float = 0.5, delta: Optional[float] = None,
                 mu_cap: float = 1e8, tol: float = 1e-12) -> dict:
    """Smallest mu (>= 1) for which the per-momentum operator inequality holds for all k <= N-1."""
    t = frd.torus
    delta = params.delta if delta is None else delta
    lam = params.lam
    m = t.m
    I = np.eye(m)
    mask = np.ones(t.grid_shape, bool)
    mask[(0,) * t.d] = False
    Csym = {j: frd.slice_symbol(j)[mask] for j in range(1, t.N + 2)}
    Mh = {k: M_bar_symbol(k, t, params.M)[mask] for k in range(t.N + 1)}

    def margin(mu: float) -> tuple[float, int, int]:
        worst, wk, wp = math.inf, -1, -1
        for k in range(t.N):
            S = sum(Csym[j] for j in range(k + 2, t.N + 2))
            lhs = np.linalg.inv(lam / Mh[k][:, None, None] * I + (1 + eps) * S) + delta * Mh[k + 1][:, None, None] * I
            c = 1 + eps - mu * delta
            if c < 0:
                return -math.inf, k, 0
            rhs = np.linalg.inv(lam / Mh[k + 1][:, None, None] * I + c * S)
            D = rhs - lhs
            w = np.linalg.eigvalsh(0.5 * (D + np.conj(np.swapaxes(D, -1, -2))))[:, 0]
            scale = np.maximum(np.abs(np.linalg.eigvalsh(rhs)).max(axis=-1), 1e-300)
            rel = w / scale
            i = int(np.argmin(rel))
            if rel[i] < worst:
                worst, wk, wp = float(rel[i]), k, i
        return worst, wk, wp

    m0, k0, p0 = margin(1.0)
    if m0 >= -tol:
        return {"mu": 1.0, "pass": True, "delta": delta, "eps": eps, "tight_mode": {"k": k0, "index": p0, "margin": m0}}
    hi = min(mu_cap, (1 + eps) / delta if delta > 0 else mu_cap)
    mh, kh, ph = margin(hi)
    if mh < -tol:
        return {"mu": None, "pass": False, "delta": delta, "eps": eps,
                "witness": {"k": kh, "momentum_index": ph, "margin": mh}}
    lo = 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if margin(mid)[0] >= -tol:
            hi = mid
        else:
            lo = mid
    mf, kf, pf = margin(hi)
    return {"mu": hi, "pass": True, "delta": delta, "eps": eps, "tight_mode": {"k": kf, "index": pf, "margin": mf}}


def recipe_params(frd: FiniteRangeDecomposition, zeta_bar: float = 0.2, R0: int = 1, sobolev_S: Optional[float] = None,
                  eps_grid: Sequence[float] = (0.1, 0.5, 0.9), n_delta: int = 8, rounds: int = 3) -> tuple[WeightParams, dict]:
    """lambda, mu, delta and h following the admissibility recipe with fitted omega, Omega and mu."""
    t = frd.torus
    base = WeightParams(t.d, t.L, zeta_bar=zeta_bar, R0=R0)
    fl = fitted_lambda(frd.symbol, base)
    lam = fl["lambda"]
    mu = 1.0
    for _ in range(rounds):
        new = mu
        for eps in eps_grid:
            top = (1 + eps) / mu
            for dl in np.geomspace(top * 1e-6, top * 0.999, n_delta):
                r = opineq_check(frd, WeightParams(t.d, t.L, zeta_bar=zeta_bar, lam=lam, R0=R0), eps=eps, delta=float(dl))
                if r["mu"] is not None:
                    new = max(new, r["mu"])
        if new <= mu * (1 + 1e-6):
            break
        mu = new
    delta = min(zeta_bar / fl["Omega"], zeta_bar / (2 * mu * base.xi_max))
    if sobolev_S is None:
        from .norms import sobolev_estimate
        sobolev_S = sobolev_estimate(16, t.d, trials=40)["S"]
    p = WeightParams(t.d, t.L, zeta_bar=zeta_bar, delta=delta, lam=lam, mu=mu, R0=R0)
    hh = h0(p, sobolev_S)
    p = WeightParams(t.d, t.L, zeta_bar=zeta_bar, delta=delta, lam=lam, mu=mu, h=hh, R0=R0)
    return p, {"omega": fl["omega"], "Omega": fl["Omega"], "lambda": lam, "mu": mu, "delta": delta, "h0": hh,
               "sobolev_S": sobolev_S}
