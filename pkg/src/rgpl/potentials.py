"""Potentials on the extended-gradient space G, Mayer functions and the E-norm."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

from .torus import MultiIndex, TorusGeometry, default_index_set, multi_indices, unit, validate_index_set

log = logging.getLogger(__name__)

EXP_CAP = 700.0


@dataclass(frozen=True)
class GradientSpace:
    """G = (R^m)^I with coordinates ordered alpha-major: position = a * m + i."""
    d: int
    m: int
    I: tuple

    def __post_init__(self):
        validate_index_set(self.I, self.d, max(max(a) for a in self.I))

    @classmethod
    def nearest_neighbour(cls, d: int, m: int = 1) -> "GradientSpace":
        return cls(d, m, tuple(default_index_set(d)))

    @property
    def dim(self) -> int:
        return self.m * len(self.I)

    @property
    def R0(self) -> int:
        return max(max(a) for a in self.I)

    def pos(self, alpha: MultiIndex, i: int) -> int:
        return list(self.I).index(tuple(alpha)) * self.m + i

    @property
    def gradient_positions(self) -> list[int]:
        """Coordinates of the |alpha|=1 block (z^nabla), ordered (direction, component)."""
        return [self.pos(unit(self.d, j), i) for j in range(self.d) for i in range(self.m)]

    def lift_F(self, F: np.ndarray) -> np.ndarray:
        """F (m x d) -> F_bar in G^nabla with z_(e_j, i) = F[i, j]."""
        F = np.asarray(F, dtype=float).reshape(self.m, self.d)
        z = np.zeros(self.dim)
        for j in range(self.d):
            for i in range(self.m):
                z[self.pos(unit(self.d, j), i)] = F[i, j]
        return z


@dataclass
class QuadraticForm:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if not np.allclose(self.matrix, self.matrix.T, atol=1e-12):
            raise ValueError("quadratic form matrix must be symmetric")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.einsum("...i,ij,...j->...", z, self.matrix, z)

    def coercivity(self) -> float:
        """Largest omega0 in (0,1] with omega0 |z|^2 <= Q(z) <= |z|^2 / omega0 (0 if not PD)."""
        ev = np.linalg.eigvalsh(self.matrix)
        if ev[0] <= 0:
            return 0.0
        return float(min(ev[0], 1.0 / ev[-1], 1.0))

    def gradient_coercivity(self, space: GradientSpace) -> float:
        """omega0 for the weaker condition omega0 |z^nabla|^2 <= Q(z) <= |z|^2 / omega0."""
        Q = self.matrix
        g = space.gradient_positions
        rest = [p for p in range(space.dim) if p not in g]
        ev_max = np.linalg.eigvalsh(Q)[-1]
        # minimise Q(z) over |z^nabla| = 1: Schur complement on the gradient block
        if rest:
            Qrr = Q[np.ix_(rest, rest)]
            if np.linalg.eigvalsh(Qrr)[0] <= 0:
                return 0.0
            S = Q[np.ix_(g, g)] - Q[np.ix_(g, rest)] @ np.linalg.solve(Qrr, Q[np.ix_(rest, g)])
        else:
            S = Q
        lo = np.linalg.eigvalsh(S)[0]
        if lo <= 0:
            return 0.0
        return float(min(lo, 1.0 / ev_max, 1.0))


def fd_weights(offsets: Sequence[int], r: int) -> np.ndarray:
    """Finite difference weights for the r-th derivative on integer offsets (unit step)."""
    s = np.asarray(offsets, dtype=float)
    n = len(s)
    A = np.vander(s, n, increasing=True).T
    b = np.zeros(n)
    b[r] = math.factorial(r)
    return np.linalg.solve(A, b)


def _stencil(r: int):
    if r == 0:
        return np.array([0]), np.array([1.0])
    half = (r + 1) // 2 + 1  # 4th-order accurate central stencil
    off = np.arange(-half, half + 1)
    return off, fd_weights(off, r)


def fd_step(r: int, scale) -> np.ndarray:
    """Step for an r-th derivative: eps^(1/(r+4)) * (1 + |z|); r=1 uses cbrt(eps)."""
    eps = np.finfo(float).eps
    base = eps ** (1.0 / 3.0) if r <= 1 else eps ** (1.0 / (r + 4))
    return base * (1.0 + scale)


def mixed_partial(f: Callable[[np.ndarray], np.ndarray], z: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
    """partial^alpha f at points z (..., dim) by tensor-product central differences."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    alpha = tuple(int(a) for a in alpha)
    r = sum(alpha)
    if r == 0:
        return f(z)
    h = fd_step(r, np.linalg.norm(z, axis=-1))[..., None]
    dims = [j for j, a in enumerate(alpha) if a]
    stencils = [_stencil(alpha[j]) for j in dims]
    total = np.zeros(z.shape[:-1])
    for combo in product(*[range(len(s[0])) for s in stencils]):
        shift = np.zeros(z.shape[-1])
        w = 1.0
        for (off, wts), j, c in zip(stencils, dims, combo):
            shift[j] = off[c]
            w *= wts[c]
        if w == 0.0:
            continue
        total = total + w * f(z + h * shift)
    return total / h[..., 0] ** r


class Potential:
    """A function on G with derivative access.

    ``func`` maps arrays (..., dim) to (...).  Analytic gradient/hessian
    callbacks are optional; otherwise central differences are used.
    """

    def __init__(self, func, space: GradientSpace, grad=None, hess=None, r0: int = 3, r1: int = 0,
                 name: str = "custom", params: Optional[dict] = None):
        self.func = func
        self.space = space
        self._grad = grad
        self._hess = hess
        self.r0 = r0
        self.r1 = r1
        self.name = name
        self.params = dict(params or {})

    @property
    def dim(self) -> int:
        return self.space.dim

    def __call__(self, z):
        return self.func(np.asarray(z, dtype=float))

    def gradient(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self._grad is not None:
            return self._grad(z)
        return np.stack([mixed_partial(self.func, z, unit(self.dim, j)) for j in range(self.dim)], axis=-1)

    def hessian(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self._hess is not None:
            return self._hess(z)
        n = self.dim
        H = np.zeros(z.shape[:-1] + (n, n))
        for a in range(n):
            for b in range(a, n):
                al = [0] * n
                al[a] += 1
                al[b] += 1
                v = mixed_partial(self.func, z, al)
                H[..., a, b] = v
                H[..., b, a] = v
        return H

    def partial(self, z, alpha) -> np.ndarray:
        return mixed_partial(self.func, np.asarray(z, dtype=float), alpha)

    def quadratic_form(self) -> QuadraticForm:
        H = self.hessian(np.zeros(self.dim))
        return QuadraticForm(0.5 * (H + H.T))


# built-in potentials ----------------------------------------------------

def quadratic_potential(space: GradientSpace, Q: Optional[np.ndarray] = None) -> Potential:
    Q = np.eye(space.dim) if Q is None else np.asarray(Q, dtype=float)

    def f(z):
        return 0.5 * np.einsum("...i,ij,...j->...", z, Q, z)

    return Potential(f, space, grad=lambda z: z @ Q, hess=lambda z: np.broadcast_to(Q, z.shape[:-1] + Q.shape).copy(),
                     name="quadratic", params={"Q": Q.tolist()})


def quartic_potential(space: GradientSpace, g: float = 1.0, Q: Optional[np.ndarray] = None) -> Potential:
    """U(z) = Q(z)/2 + g/4 sum_j z_j^4."""
    Q = np.eye(space.dim) if Q is None else np.asarray(Q, dtype=float)

    def f(z):
        return 0.5 * np.einsum("...i,ij,...j->...", z, Q, z) + 0.25 * g * np.sum(z ** 4, axis=-1)

    def grad(z):
        return z @ Q + g * z ** 3

    def hess(z):
        return Q + np.einsum("...i,ij->...ij", 3 * g * z ** 2, np.eye(space.dim))

    return Potential(f, space, grad=grad, hess=hess, name="quartic", params={"g": g})


def double_well_potential(space: GradientSpace, c: float = 0.5) -> Potential:
    """U(z) = |z|^2/2 - c |z|^4 + |z|^6/6: positive Hessian at 0, nonconvex for c > 0.37."""
    def f(z):
        s = np.sum(z * z, axis=-1)
        return 0.5 * s - c * s ** 2 + s ** 3 / 6.0

    def grad(z):
        s = np.sum(z * z, axis=-1)[..., None]
        return z * (1.0 - 4 * c * s + s ** 2)

    def hess(z):
        s = np.sum(z * z, axis=-1)[..., None, None]
        eye = np.eye(space.dim)
        zz = np.einsum("...i,...j->...ij", z, z)
        return eye * (1.0 - 4 * c * s + s ** 2) + zz * (-8 * c + 4 * s)

    return Potential(f, space, grad=grad, hess=hess, name="double-well", params={"c": c})


# lift from site potentials ------------------------------------------------

def _cell(d: int, R0: int) -> list[tuple]:
    return [y for y in product(range(R0 + 1), repeat=d)]


def local_gradient_matrix(d: int, m: int, R0: int) -> tuple[np.ndarray, list, list]:
    """Matrix of psi -> D psi(0) on the cell {0..R0}^d with I = I_R0 (psi(0) pinned to 0)."""
    cell = _cell(d, R0)
    I = [a for a in _cell(d, R0) if sum(a) > 0]
    I.sort(key=lambda a: (sum(a), tuple(-x for x in a)))
    free = [y for y in cell if sum(y) > 0]
    n = len(I)
    T = np.zeros((n, n))
    for r, a in enumerate(I):
        for c, y in enumerate(free):
            if all(yj <= aj for yj, aj in zip(y, a)):
                coef = 1.0
                for yj, aj in zip(y, a):
                    coef *= math.comb(aj, yj) * (-1) ** (aj - yj)
                T[r, c] = coef
    return np.kron(T, np.eye(m)), I, free


def lift_potential(U: Callable[[np.ndarray], np.ndarray], d: int, m: int, R0: int, rng=None,
                   trials: int = 20, tol: float = 1e-9) -> Potential:
    """Potential on G_R0 with U_script(D psi(0)) = U(psi) for psi on the cell {0..R0}^d.

    ``U`` takes arrays (..., (R0+1)^d, m) of cell values (lexicographic cell order).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    cell = _cell(d, R0)
    for _ in range(trials):
        psi = rng.standard_normal((len(cell), m))
        c = rng.standard_normal(m)
        if abs(U(psi + c) - U(psi)) > tol * (1 + abs(U(psi))):
            raise ValueError("site potential is not shift invariant")
    T, I, free = local_gradient_matrix(d, m, R0)
    Tinv = np.linalg.inv(T)
    space = GradientSpace(d, m, tuple(I))
    free_idx = [cell.index(y) for y in free]

    def reconstruct(z):
        z = np.asarray(z, dtype=float)
        vals = z @ Tinv.T
        psi = np.zeros(z.shape[:-1] + (len(cell), m))
        psi[..., free_idx, :] = vals.reshape(z.shape[:-1] + (len(free), m))
        return psi

    def f(z):
        return U(reconstruct(z))

    pot = Potential(f, space, name="lifted")
    pot.reconstruct = reconstruct
    return pot


# Taylor remainder, Mayer function, Hamiltonian ------------------------------

def ubar(pot: Potential, z, F=None) -> np.ndarray:
    """U(z+F) - U(F) - DU(F) z - Q_U(z)/2 with Q_U the Hessian at 0."""
    z = np.asarray(z, dtype=float)
    Fb = np.zeros(pot.dim) if F is None else pot.space.lift_F(F)
    Q = pot.quadratic_form()
    g = pot.gradient(Fb)
    return pot(z + Fb) - pot(Fb) - z @ g - 0.5 * Q(z)


@dataclass
class MayerFunction:
    """K(z) = exp(-beta Ubar(z / sqrt(beta), F)) - 1 with exponent saturation."""
    pot: Potential
    beta: float
    F: Optional[np.ndarray] = None
    saturated: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        self._Fb = np.zeros(self.pot.dim) if self.F is None else self.pot.space.lift_F(self.F)
        self._U0 = float(self.pot(self._Fb))
        self._g = np.asarray(self.pot.gradient(self._Fb), dtype=float)
        self._Q = self.pot.quadratic_form()

    @property
    def space(self) -> GradientSpace:
        return self.pot.space

    @property
    def dim(self) -> int:
        return self.pot.dim

    def exponent(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        w = z / math.sqrt(self.beta)
        ub = self.pot(w + self._Fb) - self._U0 - w @ self._g - 0.5 * self._Q(w)
        return -self.beta * ub

    def __call__(self, z) -> np.ndarray:
        e = self.exponent(z)
        if np.any(e > EXP_CAP):
            self.saturated = True
            log.warning("Mayer function exponent saturated at %g", EXP_CAP)
            e = np.minimum(e, EXP_CAP)
        return np.expm1(e)

    def partial(self, z, alpha) -> np.ndarray:
        return mixed_partial(self, z, alpha)

    @property
    def is_zero(self) -> bool:
        return self.pot.name == "quadratic"


def mayer_K(pot: Potential, z, F=None, beta: float = 1.0) -> np.ndarray:
    return MayerFunction(pot, beta, F)(z)


def hamiltonian(pot: Potential, torus: TorusGeometry, phi: np.ndarray, F=None) -> np.ndarray:
    """sum_x U(D phi(x) + F_bar)."""
    Fb = np.zeros(pot.dim) if F is None else pot.space.lift_F(F)
    Dphi = torus.extended_gradient(phi, list(pot.space.I))
    vals = pot(Dphi + Fb)
    return vals.reshape(vals.shape[: vals.ndim - torus.d] + (-1,)).sum(axis=-1)


def site_hamiltonian(U_site: Callable, torus: TorusGeometry, cell: Sequence[tuple], phi: np.ndarray, F=None) -> np.ndarray:
    """sum_x U((phi + F)|_{x + cell}) for a site potential on the given cell offsets."""
    F = np.zeros((torus.m, torus.d)) if F is None else np.asarray(F, dtype=float).reshape(torus.m, torus.d)
    coords = torus.coords
    vals = []
    for y in cell:
        shifted = torus.translate(phi, [-c for c in y])
        lin = (coords.astype(float) + np.asarray(y)) @ F.T
        vals.append(shifted + lin)
    psi = np.stack(vals, axis=-2)  # (..., n..., |cell|, m)
    out = U_site(psi)
    return out.reshape(out.shape[: out.ndim - torus.d] + (-1,)).sum(axis=-1)


# the E-norm -------------------------------------------------------------------

def _radial_grid(dim: int, r_max: float, n_radial: int, n_dirs: int, rng) -> np.ndarray:
    radii = np.concatenate([[0.0], np.geomspace(1e-3, r_max, n_radial)])
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        axes = np.vstack([np.eye(dim), -np.eye(dim)])
        rand = rng.standard_normal((n_dirs, dim))
        rand /= np.linalg.norm(rand, axis=1, keepdims=True)
        dirs = np.vstack([axes, rand])
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, dim)


def norm_E(K: Callable, Q: QuadraticForm, zeta: float, r0: int = 3, n_radial: int = 400, n_dirs: int = 64,
           seed: int = 0, r_max: Optional[float] = None, derivs: Optional[Callable] = None) -> dict:
    """Grid supremum of sum_{|a|<=r0} |d^a K| / a! * exp(-(1-zeta) Q(z)/2).

    Returns dict(value, argmax, r_max, certified) where certified means the
    weighted integrand at the outer shell is below 1e-3 of the sup.
    """
    if not 0 < zeta < 1:
        raise ValueError("zeta must lie in (0,1)")
    dim = Q.matrix.shape[0]
    lam_min = np.linalg.eigvalsh(Q.matrix)[0]
    if r_max is None:
        # weight below 1e-16 beyond this radius
        r_max = math.sqrt(2 * 16 * math.log(10) / ((1 - zeta) * max(lam_min, 1e-12)))
    rng = np.random.default_rng(seed)
    z = _radial_grid(dim, r_max, n_radial, n_dirs, rng)
    alphas = [a for a in product(range(r0 + 1), repeat=dim) if sum(a) <= r0]
    total = np.zeros(len(z))
    for a in alphas:
        fact = float(np.prod([math.factorial(x) for x in a]))
        if derivs is not None:
            v = derivs(z, a)
        else:
            v = mixed_partial(K, z, a)
        total += np.abs(v) / fact
    weight = np.exp(-0.5 * (1 - zeta) * Q(z))
    vals = total * weight
    i = int(np.argmax(vals))
    sup = float(vals[i])
    rad = np.linalg.norm(z, axis=1)
    outer = vals[rad >= 0.9 * r_max]
    certified = bool(sup == 0.0 or (outer.size and outer.max() <= 1e-3 * sup))
    return {"value": sup, "argmax": z[i].tolist(), "r_max": r_max, "grid_points": int(len(z)),
            "certified": certified}


def embedding_check(pot: Potential, deltas: Sequence[float], betas: Sequence[float], zeta: float = 0.5,
                    n_radial: int = 300) -> dict:
    """Table of ||K_{F,beta}|| over |F| = delta (along the first gradient direction) and beta."""
    Q = pot.quadratic_form()
    omega0 = Q.gradient_coercivity(pot.space)
    if omega0 <= 0:
        raise ValueError("quadratic part is not coercive")
    rows = []
    for dl in deltas:
        F = np.zeros((pot.space.m, pot.space.d))
        F[0, 0] = dl
        for b in betas:
            K = MayerFunction(pot, b, F)
            nv = norm_E(K, Q, zeta, r0=pot.r0, n_radial=n_radial)["value"]
            rows.append({"delta": dl, "beta": b, "norm": nv, "scale": dl + b ** -0.5,
                         "ratio": nv / (dl + b ** -0.5)})
    out = {"rows": rows}
    f0 = [r for r in rows if r["delta"] == min(deltas)]
    if len(f0) >= 2 and all(r["norm"] > 0 for r in f0):
        x = np.log([r["beta"] for r in f0])
        y = np.log([r["norm"] for r in f0])
        out["beta_exponent"] = float(np.polyfit(x, y, 1)[0])
    if rows and all(r["norm"] == 0 for r in rows):
        out["fitted_C"] = 0.0
    else:
        out["fitted_C"] = float(max(r["ratio"] for r in rows))
    return out
