"""Discrete null Lagrangians, convexification of elastic site potentials and gradient-block quadratic forms.

Configurations on a finite support A are arrays (|A|, d) ordered like the list of
offsets A.  The identity configuration is psi(y) = y.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from .torus import TorusGeometry

log = logging.getLogger(__name__)


class NullLagrangianViolation(AssertionError):
    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


class CoercivityError(RuntimeError):
    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


def unit_cell(d: int) -> list:
    return [tuple(c) for c in product((0, 1), repeat=d)]


def cube(d: int, R0: int) -> list:
    return [tuple(c) for c in product(range(R0 + 1), repeat=d)]


def identity_config(A: Sequence[tuple]) -> np.ndarray:
    return np.asarray(A, dtype=float)


def restrict_linear(F: np.ndarray, A: Sequence[tuple]) -> np.ndarray:
    """F_A(y) = F y."""
    return np.asarray(A, dtype=float) @ np.asarray(F, dtype=float).T


# ---------------------------------------------------------------------------
# discrete determinant


def _interp_gradient(psi: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the multilinear interpolation at points y (P, d): (..., P, d, d) with [r, j] = d_j (I psi)_r."""
    d = y.shape[-1]
    corners = np.array(unit_cell(d), dtype=float)  # (2^d, d)
    # basis value factors l_c(y_i) = y_i if c_i else 1 - y_i, derivative +-1
    val = np.where(corners[None] == 1, y[:, None, :], 1.0 - y[:, None, :])  # (P, 2^d, d)
    der = np.where(corners[None] == 1, 1.0, -1.0) * np.ones_like(val)
    grads = np.empty(val.shape)  # (P, 2^d, d): d_j of basis c
    for j in range(d):
        g = der[..., j].copy()
        for i in range(d):
            if i != j:
                g = g * val[..., i]
        grads[..., j] = g
    return np.einsum("...cr,pcj->...prj", psi, grads)


def discrete_det(psi: np.ndarray) -> np.ndarray:
    """Integral of det grad(I psi) over the unit cell; psi (..., 2^d, d) on the corners in product order."""
    psi = np.asarray(psi, dtype=float)
    d = psi.shape[-1]
    if d not in (2, 3) or psi.shape[-2] != 2 ** d:
        raise ValueError("discrete determinant needs d in {2, 3} and 2^d corner values")
    # det grad(I psi) has degree <= d - 1 in each coordinate; d Gauss-Legendre points are exact
    x, w = leggauss(d)
    x, w = 0.5 * (x + 1.0), 0.5 * w
    y = np.array(list(product(x, repeat=d)))
    wy = np.prod(np.array(list(product(w, repeat=d))), axis=1)
    G = _interp_gradient(psi, y)
    return np.einsum("...p,p->...", np.linalg.det(G), wy)


def shoelace_det(psi: np.ndarray) -> np.ndarray:
    """Oriented area of psi(0), psi(e1), psi(e1+e2), psi(e2) (d = 2, product-ordered corners)."""
    psi = np.asarray(psi, dtype=float)
    p = psi[..., [0, 2, 3, 1], :]  # (0,0), (1,0), (1,1), (0,1)
    x, y = p[..., 0], p[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)


# ---------------------------------------------------------------------------
# null Lagrangians


@dataclass
class NullLagrangian:
    A: list
    fn: Callable  # (..., |A|, m) -> (...)
    kind: str = "custom"
    m: int = 0

    def __call__(self, psi):
        return self.fn(np.asarray(psi, dtype=float))

    @property
    def radius(self) -> int:
        return int(max(max(abs(c) for c in a) for a in self.A))


def linear_null_lagrangian(d: int, y: Sequence[int], m: Optional[int] = None) -> NullLagrangian:
    A = [(0,) * d, tuple(y)]
    return NullLagrangian(A, lambda psi: psi[..., 1, 0] - psi[..., 0, 0], "linear", m or d)


def det_null_lagrangian(d: int) -> NullLagrangian:
    return NullLagrangian(unit_cell(d), discrete_det, "det", d)


def n0_function(d: int, R0: int = 1) -> Callable:
    """N_0(psi) = -sum_i |grad_i psi(0)|^2 + (R0 (R0+1)^{d-1})^{-1} sum_i sum_{y, y+e_i in Q} |grad_i psi(y)|^2."""
    Q = cube(d, R0)
    pos = {c: n for n, c in enumerate(Q)}
    c = 1.0 / (R0 * (R0 + 1) ** (d - 1))
    pairs = []
    for i in range(d):
        for y in Q:
            z = tuple(v + (1 if j == i else 0) for j, v in enumerate(y))
            if z in pos:
                pairs.append((pos[y], pos[z], y == (0,) * d))

    def fn(psi):
        out = 0.0
        for a, b, at0 in pairs:
            g = np.sum((psi[..., b, :] - psi[..., a, :]) ** 2, axis=-1)
            out = out + c * g - (g if at0 else 0.0)
        return out

    return fn


def n0_null_lagrangian(d: int, R0: int = 1, m: Optional[int] = None) -> NullLagrangian:
    return NullLagrangian(cube(d, R0), n0_function(d, R0), "n0", m or d)


def null_test(N: NullLagrangian, box: int = 3, trials: int = 100, seed: int = 0, tol: float = 1e-10,
              raise_on_fail: bool = False) -> dict:
    """Brute-force invariance of sum_{x in Lambda_A} N(phi|tau_x A) under changes of phi inside Lambda = [0, box)^d."""
    A = np.asarray(N.A)
    d = A.shape[1]
    m = N.m or d
    lo = A.min(axis=0)
    hi = A.max(axis=0)
    # Lambda_A = {x : (x + A) meets Lambda}
    xs = [np.arange(-hi[i], box - lo[i]) for i in range(d)]
    X = np.array(list(product(*xs)))
    pad = np.max(np.abs(A)) + 1
    origin = -(np.min(X, axis=0) + lo) + pad
    size = (np.max(X, axis=0) + hi) - (np.min(X, axis=0) + lo) + 1 + 2 * pad
    rng = np.random.Generator(np.random.Philox(seed))
    idx = tuple((X[:, None, :] + A[None, :, :] + origin).transpose(2, 0, 1))
    inside = tuple(np.array(list(product(*[range(box)] * d))).T + origin[:, None])
    worst, witness = 0.0, None
    for _ in range(trials):
        phi = rng.standard_normal(tuple(size) + (m,))
        phit = phi.copy()
        phit[inside] = rng.standard_normal((box ** d, m))
        s1 = float(np.sum(N(phi[idx])))
        s2 = float(np.sum(N(phit[idx])))
        err = abs(s1 - s2) / max(1.0, abs(s1))
        if err > worst:
            worst, witness = err, (phi, phit)
    ok = worst <= tol
    if not ok and raise_on_fail:
        raise NullLagrangianViolation(f"null Lagrangian test failed: {worst:.3e}", witness)
    return {"kind": N.kind, "trials": trials, "max_err": worst, "passed": bool(ok),
            "witness": None if ok else witness}


def periodic_sum(N: NullLagrangian, F: np.ndarray, phi: np.ndarray, torus: TorusGeometry) -> float:
    """sum_{x in T} N((F + phi)|tau_x A) with F acting on unwrapped coordinates."""
    A = np.asarray(N.A)
    d = torus.d
    n = torus.n
    sites = np.array(list(product(range(n), repeat=d)))
    Y = sites[:, None, :] + A[None]  # unwrapped
    vals = phi[tuple((Y % n).transpose(2, 0, 1))] + Y @ np.asarray(F, float).T
    return float(np.sum(N(vals)))


def periodic_null_test(N: NullLagrangian, F: np.ndarray, torus: TorusGeometry, trials: int = 20, seed: int = 0,
                       tol: float = 1e-9) -> dict:
    A = np.asarray(N.A)
    if np.max(np.abs(A)) > torus.n / 8 and torus.n < 8 * np.max(np.abs(A)):
        log.info("|A| exceeds n/8; the identity is still tested")
    F = np.asarray(F, float)
    target = torus.volume * float(N(restrict_linear(F, N.A)))
    rng = np.random.Generator(np.random.Philox(seed))
    worst, witness = 0.0, None
    for _ in range(trials):
        phi = rng.standard_normal(torus.grid_shape + (N.m or torus.d,))
        s = periodic_sum(N, F, phi, torus)
        err = abs(s - target) / max(abs(target), 1.0)
        if err > worst:
            worst, witness = err, phi
    return {"target": target, "max_rel_err": worst, "passed": bool(worst <= tol),
            "witness": None if worst <= tol else witness}


def hessian_det_on_skew(d: int, W: Optional[np.ndarray] = None, h: float = 1e-3, seed: int = 0) -> dict:
    """Second derivative of t -> det(1 + tW) at 0 against |W|^2 for skew W."""
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    if W is None:
        M = np.random.Generator(np.random.Philox(seed)).standard_normal((d, d))
        W = M - M.T
    W = np.asarray(W, float)
    I = np.eye(d)
    # det(1 + tW) is a polynomial of degree d <= 3; the central second difference is exact
    val = (np.linalg.det(I + h * W) - 2.0 + np.linalg.det(I - h * W)) / h ** 2
    ref = float(np.sum(W * W))
    return {"value": float(val), "norm2": ref, "rel_err": abs(val - ref) / max(ref, 1e-300) if ref else abs(val)}


# ---------------------------------------------------------------------------
# site potentials


@dataclass
class SitePotential:
    A: list
    fn: Callable  # (..., |A|, d) -> (...)
    name: str = "custom"
    flags: dict = field(default_factory=dict)

    def __call__(self, psi):
        return self.fn(np.asarray(psi, dtype=float))

    @property
    def d(self) -> int:
        return len(self.A[0])

    @property
    def identity(self) -> np.ndarray:
        return identity_config(self.A)


def spring_potential(d: int = 2, k_edge: float = 1.0, k_diag: float = 0.5, guard: float = 10.0,
                     guard_level: float = 0.5) -> SitePotential:
    """Springs on the edges and diagonals of the unit cell, plus an orientation guard.

    Springs alone vanish on reflections as well as rotations.  The guard
    guard * max(0, guard_level - N_det(psi))^3 is C^2, rotation and shift invariant and
    vanishes near the identity.
    """
    A = unit_cell(d)
    Y = np.asarray(A, float)
    pairs = []
    for a in range(len(A)):
        for b in range(a + 1, len(A)):
            diff = Y[b] - Y[a]
            k = k_edge if np.sum(np.abs(diff)) == 1 else k_diag
            pairs.append((a, b, float(np.linalg.norm(diff)), k))

    def fn(psi):
        out = 0.0
        for a, b, r, k in pairs:
            out = out + 0.5 * k * (np.linalg.norm(psi[..., b, :] - psi[..., a, :], axis=-1) - r) ** 2
        if guard:
            out = out + guard * np.maximum(0.0, guard_level - discrete_det(psi)) ** 3
        return out

    return SitePotential(A, fn, "springs", {"H1": True, "H2": True, "H3": True, "H4": True, "H5": True})


def _grad_fd(f: Callable, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    x = np.asarray(x, float).ravel()
    n = x.size
    E = np.eye(n) * h
    pts = np.concatenate([x + 2 * E, x + E, x - E, x - 2 * E])
    v = np.asarray(f(pts), float)
    v = v.reshape(4, n)
    return (-v[0] + 8 * v[1] - 8 * v[2] + v[3]) / (12 * h)


def hessian_fd(f: Callable, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Hessian from fourth-order second differences along e_i and e_i +- e_j (polarisation); f takes (B, n)."""
    x = np.asarray(x, float).ravel()
    n = x.size
    I = np.eye(n)
    dirs = [I[i] for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for i, j in pairs:
        dirs += [I[i] + I[j], I[i] - I[j]]
    D = np.array(dirs)
    steps = np.array([2, 1, -1, -2], float) * h
    pts = x + (steps[:, None, None] * D[None]).reshape(-1, n)
    v = np.asarray(f(np.concatenate([x[None], pts])), float)
    f0, v = v[0], v[1:].reshape(4, len(dirs))
    sec = (-v[0] + 16 * v[1] - 30 * f0 + 16 * v[2] - v[3]) / (12 * h * h)
    H = np.diag(sec[:n])
    for k, (i, j) in enumerate(pairs):
        H[i, j] = H[j, i] = 0.25 * (sec[n + 2 * k] - sec[n + 2 * k + 1])
    return H


def _flat(fn: Callable, shape: tuple) -> Callable:
    def g(v):
        v = np.asarray(v, float)
        return fn(v.reshape(v.shape[:-1] + shape))
    return g


def shift_complement(A: Sequence[tuple], d: int) -> np.ndarray:
    """Orthonormal basis (rows) of V_A^perp inside (R^d)^A, flattened site-major."""
    n = len(A) * d
    S = np.zeros((d, n))
    for i in range(d):
        S[i, i::d] = 1.0
    _, _, vt = np.linalg.svd(S)
    return vt[d:]


def skew_generators(A: Sequence[tuple], d: int) -> np.ndarray:
    """Restrictions to A of the skew matrices E_ij - E_ji, flattened."""
    out = []
    for i in range(d):
        for j in range(i + 1, d):
            W = np.zeros((d, d))
            W[i, j], W[j, i] = 1.0, -1.0
            out.append(restrict_linear(W, A).ravel())
    return np.array(out)


def certify_hypotheses(U: SitePotential, trials: int = 20, seed: int = 0) -> dict:
    """Sampled (H1) and (H3); (H2) on sampled rigid motions."""
    d = U.d
    A = U.A
    rng = np.random.Generator(np.random.Philox(seed))
    psi = U.identity[None] + 0.3 * rng.standard_normal((trials, len(A), d))
    if d == 2:
        th = rng.uniform(0, 2 * np.pi, trials)
        R = np.stack([np.stack([np.cos(th), -np.sin(th)], -1), np.stack([np.sin(th), np.cos(th)], -1)], -2)
    else:
        R = Rotation.random(trials, random_state=int(seed)).as_matrix()
    a = rng.standard_normal((trials, 1, d))
    rot = np.einsum("tij,tyj->tyi", R, psi + a)
    h1 = float(np.max(np.abs(U(rot) - U(psi))))
    rigid = np.einsum("tij,yj->tyi", R, U.identity) + a
    h2 = float(np.max(np.abs(U(rigid))))
    Hs = hessian_fd(_flat(U.fn, (len(A), d)), U.identity)
    V = shift_complement(A, d)
    S = skew_generators(A, d)
    P = V @ Hs @ V.T
    Sv = np.linalg.qr((S @ V.T).T)[0]  # skew directions in V^perp coordinates
    comp = np.linalg.svd(np.eye(V.shape[0]) - Sv @ Sv.T)[0][:, : V.shape[0] - Sv.shape[1]]
    eig = np.linalg.eigvalsh(comp.T @ P @ comp)
    return {"H1_err": h1, "H2_rigid_max": h2, "H3_min_eig": float(eig.min()),
            "hessian_null_contains_skew": bool(np.max(np.abs(P @ Sv)) < 1e-6),
            "passed": bool(h1 < 1e-9 and h2 < 1e-9 and eig.min() > 0)}


# ---------------------------------------------------------------------------
# convexification


def _extended_multi_indices(d: int, R0: int) -> list:
    """I_{R0} ordered by |alpha|_1, then lexicographically descending."""
    out = [a for a in product(range(R0 + 1), repeat=d) if any(a)]
    return sorted(out, key=lambda a: (sum(a), tuple(-v for v in a)))


def pi_matrix(d: int, m: int, R0: int) -> tuple:
    """Linear map z in G_{R0} -> psi on Q_{R0} with psi(0) = 0 and D psi(0) = z.

    psi(y) = sum_{0 != beta <= y} prod_i binom(y_i, beta_i) z_beta (discrete Newton expansion).
    Returns (matrix (|Q| m, |I| m), I, Q).
    """
    I = _extended_multi_indices(d, R0)
    Q = cube(d, R0)
    M = np.zeros((len(Q) * m, len(I) * m))
    for qi, y in enumerate(Q):
        for ai, b in enumerate(I):
            if all(bb <= yy for bb, yy in zip(b, y)):
                c = float(np.prod([math.comb(yy, bb) for yy, bb in zip(y, b)]))
                for i in range(m):
                    M[qi * m + i, ai * m + i] = c
    return M, I, Q


@dataclass
class Convexification:
    U: SitePotential
    alpha: float
    mu: float
    margin: float
    R0: int
    I: list
    Q: list
    Pi: np.ndarray
    omega1: float = 0.0
    certificate: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.U.d

    @property
    def dim(self) -> int:
        return self.Pi.shape[1]

    def _psi(self, z):
        z = np.asarray(z, float)
        d = self.d
        psi = z @ self.Pi.T
        return psi.reshape(z.shape[:-1] + (len(self.Q), d)) + identity_config(self.Q)

    def _restrict(self, psi):
        sel = [self.Q.index(a) for a in self.U.A]
        return psi[..., sel, :]

    def Uscr(self, z):
        return self.U(self._restrict(self._psi(z)))

    def Nscr(self, z):
        psi = self._psi(z)
        n0 = n0_function(self.d, self.R0)(psi - identity_config(self.Q))
        return self.alpha * discrete_det(self._restrict_cell(psi)) + self.mu / (2 * self.d) * n0

    def _restrict_cell(self, psi):
        sel = [self.Q.index(a) for a in unit_cell(self.d)]
        return psi[..., sel, :]

    def total(self, z):
        return self.Uscr(z) + self.Nscr(z)

    def Q_matrix(self, which: str = "total", h: float = 1e-3) -> np.ndarray:
        f = {"total": self.total, "U": self.Uscr, "N": self.Nscr}[which]
        return hessian_fd(f, np.zeros(self.dim), h)

    def Q_N_form(self, z: np.ndarray) -> np.ndarray:
        """Quadratic part of the polynomial N-scr: N(z) + N(-z) - 2 N(0) (exact for degree <= 3)."""
        z = np.asarray(z, float)
        return self.Nscr(z) + self.Nscr(-z) - 2 * self.Nscr(np.zeros_like(z))

    def coercivity_ratio(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, float))
        g = _grad_fd(lambda v: self.total(v), np.zeros(self.dim))
        f0 = float(self.total(np.zeros((1, self.dim)))[0])
        val = self.total(z) - f0 - z @ g
        return val / np.sum(z * z, axis=-1)


def convexify(U: SitePotential, R0: int = 1, alpha_cap: float = 2.0, probes_near: int = 400,
              probes_far: int = 400, far_radius: float = 20.0, seed: int = 0, check: bool = True) -> Convexification:
    """Choose alpha with D^2(U + alpha N_det)(1) positive definite on V_A^perp and certify coercivity on probes."""
    d = U.d
    A = U.A
    if check:
        hyp = certify_hypotheses(U, seed=seed)
        if not hyp["passed"]:
            raise ValueError(f"hypotheses not certified: {hyp}")
    else:
        hyp = {}
    V = shift_complement(A, d)
    HU = hessian_fd(_flat(U.fn, (len(A), d)), U.identity)
    sel = [A.index(c) for c in unit_cell(d)]

    def Ndet_full(v):
        psi = v.reshape(v.shape[:-1] + (len(A), d))
        return discrete_det(psi[..., sel, :])

    HN = hessian_fd(Ndet_full, U.identity)
    PU, PN = V @ HU @ V.T, V @ HN @ V.T

    def margin(a):
        return float(np.linalg.eigvalsh(PU + a * PN).min())

    m0 = margin(0.0)
    scale = float(np.abs(np.linalg.eigvalsh(PU)).max())
    if m0 > 1e-6 * scale:
        alpha, best = 0.0, m0
    else:
        res = minimize_scalar(lambda a: -margin(a), bounds=(0.0, alpha_cap), method="bounded",
                              options={"xatol": 1e-10})
        alpha, best = float(res.x), -float(res.fun)
        if best <= 0:
            w, v = np.linalg.eigh(PU + alpha * PN)
            raise CoercivityError("no alpha gives a positive definite Hessian", witness=(V.T @ v[:, 0]).tolist())
    Pi, I, Q = pi_matrix(d, d, R0)
    if not all(a in Q for a in A):
        raise ValueError("support A must lie in Q_{R0}")
    conv = Convexification(U, alpha, best / 2.0, best, R0, I, Q, Pi)
    rng = np.random.Generator(np.random.Philox(seed + 17))
    n = conv.dim
    dirs = rng.standard_normal((probes_near + probes_far, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near_r = np.geomspace(1e-3, 0.5, probes_near)
    far_r = np.geomspace(0.5, far_radius, probes_far)
    Z = dirs * np.concatenate([near_r, far_r])[:, None]
    qw, qv = np.linalg.eigh(conv.Q_matrix())
    eig_probes = np.concatenate([r * s * qv.T for r in (1e-3, 1e-2, 1e-1) for s in (1.0, -1.0)])
    Z = np.concatenate([eig_probes, Z])
    ratios = conv.coercivity_ratio(Z)
    k = int(np.argmin(ratios))
    qmin = float(qw.min())
    conv.omega1 = float(ratios[k])
    conv.certificate = {"alpha": alpha, "margin": best, "mu": best / 2.0, "margin_alpha0": m0,
                        "omega1": conv.omega1, "witness": Z[k].tolist(), "Q_min_eig": qmin,
                        "Q_lower_bound_ok": bool(qmin >= 2 * conv.omega1 - 1e-8),
                        "probe_radius": [1e-3, far_radius], "n_probes": int(Z.shape[0]),
                        "scope": "certified on probes", "hypotheses": hyp}
    if conv.omega1 <= 0:
        raise CoercivityError(f"coercivity fails at probe {k}", witness=Z[k].tolist())
    return conv


def q_nabla(hess_fn: Callable, d: int, A: Sequence[tuple]) -> np.ndarray:
    """Matrix of F -> D^2 U(1)(F_A, F_A) in the Hilbert-Schmidt basis E_is (index i * d + s).

    hess_fn returns the Hessian (|A| d, |A| d) of U at the identity.
    """
    H = hess_fn() if callable(hess_fn) else np.asarray(hess_fn)
    basis = []
    for i in range(d):
        for s in range(d):
            E = np.zeros((d, d))
            E[i, s] = 1.0
            basis.append(restrict_linear(E, A).ravel())
    B = np.array(basis)
    M = B @ H @ B.T
    return 0.5 * (M + M.T)


def q_nabla_site(U: SitePotential) -> np.ndarray:
    d = U.d
    return q_nabla(lambda: hessian_fd(_flat(U.fn, (len(U.A), d)), U.identity), d, U.A)


def q_nabla_det(d: int) -> np.ndarray:
    """Hilbert-Schmidt matrix of D^2 det(1): (tr F)^2 - tr(F^2)."""
    M = np.zeros((d * d, d * d))
    for i, s, j, t in product(range(d), repeat=4):
        M[i * d + s, j * d + t] = (1.0 if (i == s and j == t) else 0.0) - (1.0 if (i == t and j == s) else 0.0)
    return M


def second_difference_operator(M: np.ndarray, u: np.ndarray, torus: TorusGeometry) -> np.ndarray:
    """(A u)_s = -sum_{t,i,j} M[(s,i),(t,j)] D_ij u_t with symmetrised periodic second differences D_ij.

    M is indexed (component * d + direction), as returned by q_nabla.
    """
    d = torus.d
    out = np.zeros_like(u)
    for i in range(d):
        for j in range(d):
            Dij = -0.5 * (torus.backward_diff(torus.forward_diff(u, j), i) + torus.backward_diff(torus.forward_diff(u, i), j))
            for s in range(d):
                for t in range(d):
                    c = M[s * d + i, t * d + j]
                    if c:
                        out[..., s] -= c * Dij[..., t]
    return out


def periodic_QN_sum(conv: Convexification, phi: np.ndarray, torus: TorusGeometry) -> float:
    """sum_x Q_N(D phi(x)) on a periodic field."""
    z = torus.extended_gradient(phi, list(conv.I)).reshape(-1, conv.dim)
    return float(np.sum(conv.Q_N_form(z)))


def frame_indifference_check(W: Callable, F: np.ndarray, trials: int = 5, seed: int = 0) -> list:
    d = F.shape[0]
    R = Rotation.random(trials, random_state=int(seed)).as_matrix() if d == 3 else None
    rng = np.random.Generator(np.random.Philox(seed))
    out = []
    for t in range(trials):
        if d == 2:
            th = rng.uniform(0, 2 * np.pi)
            Rt = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        else:
            Rt = R[t]
        out.append((W(Rt @ F), W(F)))
    return out
