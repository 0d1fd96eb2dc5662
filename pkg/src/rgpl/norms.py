"""Field norms, dual norms of Taylor polynomials, relevant Hamiltonians and lattice Taylor/Sobolev tools.

Functionals are represented as ``LocalFunctional``: a smooth function G of a finite
list of gradient coordinates z_l = grad^{alpha_l} phi_{i_l}(x_l).  Taylor data at phi
is the list of symmetric derivative tensors of G at z(phi).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement, permutations, product
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .potentials import fd_step, fd_weights
from .torus import MultiIndex, TorusGeometry, b_poly, binom_poly, multi_indices, unit

log = logging.getLogger(__name__)

Label = tuple  # (site tuple, component, alpha)


@dataclass(frozen=True)
class NormScale:
    d: int
    L: int
    h: float = 1.0
    m: int = 1
    R0: int = 1

    @property
    def p_phi(self) -> int:
        return self.d // 2 + 2

    @property
    def R(self) -> int:
        return max(self.R0, 2 * (self.d // 2) + 3)

    def h_j(self, j: int) -> float:
        return 2.0 ** j * self.h

    def weight(self, j: int, alpha) -> float:
        a = sum(alpha)
        return self.h_j(j) * self.L ** (-j * a) * self.L ** (-j * (self.d - 2) / 2)

    @cached_property
    def field_alphas(self) -> list:
        return multi_indices(self.d, 1, self.p_phi)


# ---------------------------------------------------------------------------
# finite differences on the torus


def diff_coefficients(alpha: MultiIndex) -> list[tuple[tuple, float]]:
    """grad^alpha f(x) = sum_beta c_beta f(x + beta) (forward differences)."""
    out = []
    for beta in product(*[range(a + 1) for a in alpha]):
        c = 1.0
        for a, b in zip(alpha, beta):
            c *= math.comb(a, b) * (-1) ** (a - b)
        out.append((beta, c))
    return out


def site_star_mask(torus: TorusGeometry, sites: np.ndarray, radius: int) -> np.ndarray:
    """Dilation of a boolean site mask by [-radius, radius]^d on the torus."""
    out = sites.copy()
    for ax in range(torus.d):
        acc = out.copy()
        for s in range(1, radius + 1):
            acc |= np.roll(out, s, axis=ax) | np.roll(out, -s, axis=ax)
        out = acc
    return out


def polymer_site_mask(torus: TorusGeometry, X, geo) -> np.ndarray:
    """Boolean site mask of a polymer on the torus."""
    from .polymers import Region
    return region_mask(torus, Region.from_polymer(X, geo))


def region_mask(torus: TorusGeometry, region) -> np.ndarray:
    mask = np.zeros(torus.grid_shape, dtype=bool)
    for piece in region.pieces:
        mask[tuple(slice(a, b + 1) for a, b in piece)] = True
    return mask


def field_norm(phi: np.ndarray, torus: TorusGeometry, scale: NormScale, j: int, Xstar: np.ndarray) -> float:
    """sup over x in X*, components, 1 <= |alpha| <= p_phi of w_j(alpha)^-1 |grad^alpha phi_i(x)|."""
    best = 0.0
    for a in scale.field_alphas:
        g = torus.diff(phi, a)[Xstar]
        if g.size:
            best = max(best, float(np.max(np.abs(g))) / scale.weight(j, a))
    return best


# ---------------------------------------------------------------------------
# Taylor tensors


def taylor_tensors(G: Callable[[np.ndarray], np.ndarray], z0: np.ndarray, r0: int) -> list:
    """Symmetric derivative tensors of G at z0 for orders 0..r0 by batched central differences."""
    z0 = np.asarray(z0, dtype=float)
    p = z0.size
    out = [np.asarray(G(z0[None, :]))[0]]
    scale = float(np.linalg.norm(z0))
    for r in range(1, r0 + 1):
        T = np.zeros((p,) * r)
        h = float(fd_step(r, scale))
        idx_list = list(combinations_with_replacement(range(p), r))
        pts, wts, owners = [], [], []
        for n_idx, idx in enumerate(idx_list):
            counts = {}
            for v in idx:
                counts[v] = counts.get(v, 0) + 1
            dims = sorted(counts)
            stencils = []
            for v in dims:
                c = counts[v]
                half = (c + 1) // 2 + 1
                off = np.arange(-half, half + 1)
                stencils.append((off, fd_weights(off, c)))
            for combo in product(*[range(len(s[0])) for s in stencils]):
                w = 1.0
                shift = np.zeros(p)
                for (off, wt), v, c in zip(stencils, dims, combo):
                    w *= wt[c]
                    shift[v] = off[c]
                if w != 0.0:
                    pts.append(z0 + h * shift)
                    wts.append(w)
                    owners.append(n_idx)
        vals = np.asarray(G(np.array(pts)), dtype=float)
        acc = np.zeros(len(idx_list))
        np.add.at(acc, np.array(owners), np.array(wts) * vals)
        acc /= h ** r
        for idx, v in zip(idx_list, acc):
            for perm in set(permutations(idx)):
                T[perm] = v
        out.append(T)
    return out


def polynomial_G(coeffs: Sequence[np.ndarray]) -> tuple[Callable, Callable]:
    """G(z) = sum_r (1/r!) C_r[z, ..., z] with symmetric tensors C_r; returns (G, exact taylor)."""
    coeffs = [np.asarray(c, dtype=float) for c in coeffs]

    def G_exact(z):
        z = np.asarray(z, dtype=float)
        out = np.full(z.shape[:-1], float(coeffs[0]))
        for r, C in enumerate(coeffs[1:], start=1):
            sub = "".join(chr(ord("a") + i) for i in range(r))
            ops = [C] + [z] * r
            spec = sub + "," + ",".join("..." + s for s in sub) + "->..."
            out = out + np.einsum(spec, *ops) / math.factorial(r)
        return out

    def taylor(z0, r0):
        z0 = np.asarray(z0, dtype=float)
        res = []
        for r in range(r0 + 1):
            acc = np.zeros((z0.size,) * r) if r else 0.0
            for s in range(r, len(coeffs)):
                C = coeffs[s]
                t = C
                for _ in range(s - r):
                    t = np.tensordot(t, z0, axes=([t.ndim - 1], [0]))
                acc = acc + t / math.factorial(s - r)
            res.append(np.asarray(acc, dtype=float))
        return res

    return G_exact, taylor


class LocalFunctional:
    """F(phi) = G(z(phi)) with z_l = grad^{alpha_l} phi_{i_l}(x_l)."""

    def __init__(self, torus: TorusGeometry, labels: Sequence[Label], G: Callable, taylor: Optional[Callable] = None,
                 name: str = "functional"):
        self.torus = torus
        self.labels = [(tuple(int(v) % torus.n for v in x), int(i), tuple(a)) for x, i, a in labels]
        for _, _, a in self.labels:
            if sum(a) < 1:
                raise ValueError("labels must carry derivatives of order >= 1 (shift invariance)")
        self.G = G
        self._taylor = taylor
        self.name = name

    @classmethod
    def polynomial(cls, torus, labels, coeffs, name="polynomial") -> "LocalFunctional":
        G, tay = polynomial_G(coeffs)
        return cls(torus, labels, G, tay, name)

    @property
    def p(self) -> int:
        return len(self.labels)

    def z(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        cols = []
        cache = {}
        for x, i, a in self.labels:
            if a not in cache:
                cache[a] = self.torus.diff(phi, a)
            cols.append(cache[a][(...,) + x + (i,)])
        return np.stack(cols, axis=-1) if cols else np.zeros(phi.shape[:-(self.torus.d + 1)] + (0,))

    def __call__(self, phi: np.ndarray) -> np.ndarray:
        return self.G(self.z(phi))

    def taylor(self, phi: Optional[np.ndarray] = None, r0: int = 3) -> list:
        z0 = np.zeros(self.p) if phi is None else self.z(phi)
        if self._taylor is not None:
            return self._taylor(z0, r0)
        return taylor_tensors(self.G, z0, r0)

    def extraction(self, sites: Sequence[tuple]) -> np.ndarray:
        """Matrix E (p x |sites| m) with z = E phi restricted to the given site list."""
        index = {s: n for n, s in enumerate(sites)}
        m = self.torus.m
        E = np.zeros((self.p, len(sites) * m))
        for l, (x, i, a) in enumerate(self.labels):
            for beta, c in diff_coefficients(a):
                y = tuple((u + b) % self.torus.n for u, b in zip(x, beta))
                if y not in index:
                    raise ValueError("functional depends on sites outside the variable set")
                E[l, index[y] * m + i] += c
        return E

    def combine(self, other: "LocalFunctional", a: float = 1.0, b: float = 1.0) -> "LocalFunctional":
        """a * self + b * other on the union of labels."""
        labels = list(dict.fromkeys(self.labels + other.labels))
        pos = {l: n for n, l in enumerate(labels)}
        i1 = np.array([pos[l] for l in self.labels], dtype=int)
        i2 = np.array([pos[l] for l in other.labels], dtype=int)

        def G(z):
            return a * self.G(z[..., i1]) + b * other.G(z[..., i2])

        def taylor(z0, r0):
            t1, t2 = self._taylor_at(z0[i1], r0), other._taylor_at(z0[i2], r0)
            out = []
            p = len(labels)
            for r in range(r0 + 1):
                T = np.zeros((p,) * r) if r else 0.0
                if r == 0:
                    out.append(a * float(t1[0]) + b * float(t2[0]))
                    continue
                T[np.ix_(*([i1] * r))] += a * t1[r]
                T[np.ix_(*([i2] * r))] += b * t2[r]
                out.append(T)
            return out

        return LocalFunctional(self.torus, labels, G, taylor, f"{self.name}+{other.name}")

    def _taylor_at(self, z0, r0):
        if self._taylor is not None:
            return self._taylor(z0, r0)
        return taylor_tensors(self.G, z0, r0)


# ---------------------------------------------------------------------------
# dual norms


def taylor_T0_norm_Rp(F: Callable, p: int, r0: int = 3, z0=None, weights=None, tensors=None) -> float:
    """sum_{|gamma| <= r0} |d^gamma F(z0)| w^gamma / gamma!  (exact dual norm for weighted l_inf)."""
    z0 = np.zeros(p) if z0 is None else np.asarray(z0, dtype=float)
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    T = taylor_tensors(F, z0, r0) if tensors is None else tensors
    total = abs(float(T[0]))
    for r in range(1, r0 + 1):
        A = np.abs(T[r])
        for _ in range(r):
            A = np.tensordot(A, w, axes=([A.ndim - 1], [0])) if A.ndim else A
        total += float(A) / math.factorial(r)
    return total


@dataclass
class DualNormContext:
    """Variable sites, constraint operator and per-label weights for one (F, j, X*)."""
    sites: list
    D: sp.csr_matrix  # rows (x in X*, i, alpha) scaled by w^-1; cols (site, i)
    label_weights: np.ndarray


def _norm_context(F: LocalFunctional, scale: NormScale, j: int, Xstar: np.ndarray) -> DualNormContext:
    t = F.torus
    m = t.m
    star_sites = [tuple(int(v) for v in s) for s in np.argwhere(Xstar)]
    for x, _, a in F.labels:
        if not Xstar[x]:
            raise ValueError(f"label site {x} outside X*")
        if sum(a) > scale.p_phi:
            raise ValueError("label order exceeds p_phi")
    site_set = set()
    for x in star_sites:
        for beta in product(range(scale.p_phi + 1), repeat=t.d):
            site_set.add(tuple((u + b) % t.n for u, b in zip(x, beta)))
    sites = sorted(site_set)
    index = {s: n for n, s in enumerate(sites)}
    rows, cols, vals = [], [], []
    r = 0
    for x in star_sites:
        for i in range(m):
            for a in scale.field_alphas:
                w = scale.weight(j, a)
                for beta, c in diff_coefficients(a):
                    y = tuple((u + b) % t.n for u, b in zip(x, beta))
                    rows.append(r)
                    cols.append(index[y] * m + i)
                    vals.append(c / w)
                r += 1
    D = sp.csr_matrix((vals, (rows, cols)), shape=(r, len(sites) * m))
    lw = np.array([scale.weight(j, a) for _, _, a in F.labels])
    return DualNormContext(sites, D, lw)


def _site_tensor(T: np.ndarray, E: np.ndarray) -> np.ndarray:
    out = T
    for _ in range(T.ndim):
        out = np.tensordot(out, E, axes=([0], [0]))
    return out


def _lp_max(c: np.ndarray, A: sp.spmatrix) -> Optional[float]:
    """max c.g subject to |A g| <= 1 (None if unbounded or failed)."""
    A_ub = sp.vstack([A, -A]).tocsr()
    b_ub = np.ones(A_ub.shape[0])
    res = linprog(-c, A_ub=A_ub, b_ub=b_ub, bounds=(None, None), method="highs")
    if res.status == 3:
        raise ValueError("dual norm unbounded: functional is not shift invariant on X*")
    if res.status != 0:
        log.warning("LP failed: %s", res.message)
        return None
    return float(-res.fun)


def _contract_except(T: np.ndarray, vecs: list, leg: int) -> np.ndarray:
    idx = list(range(T.ndim))
    sub = "".join(chr(ord("a") + i) for i in idx)
    ops = [T] + [vecs[l] for l in idx if l != leg]
    spec = sub + "," + ",".join(sub[l] for l in idx if l != leg) + "->" + sub[leg]
    return np.einsum(spec, *ops)


def dual_norm_Tphi(F: LocalFunctional, scale: NormScale, j: int, Xstar: np.ndarray, phi=None, r0: int = 3,
                   exact_max_vars: int = 6000, n_starts: int = 4, sweeps: int = 4, seed: int = 0,
                   tensors=None) -> dict:
    """Bracket (lower, upper) of |F|_{j,X,T_phi}.

    upper: weighted l1 norm of the Taylor coefficients in the gradient-label representation.
    lower: alternating per-leg LP maximisation over simple tensors.
    Orders whose full tensor LP has at most exact_max_vars variables are solved exactly.
    """
    ctx = _norm_context(F, scale, j, Xstar)
    E = F.extraction(ctx.sites)
    T = F.taylor(phi, r0) if tensors is None else tensors
    rng = np.random.default_rng(seed)
    lower = upper = abs(float(T[0]))
    per_order = [{"r": 0, "lower": lower, "upper": upper, "exact": True}]
    nv = ctx.D.shape[1]
    for r in range(1, r0 + 1):
        Tr = np.asarray(T[r], dtype=float)
        A = np.abs(Tr)
        for _ in range(r):
            A = np.tensordot(A, ctx.label_weights, axes=([A.ndim - 1], [0]))
        up = float(A) / math.factorial(r)
        if up == 0.0:
            per_order.append({"r": r, "lower": 0.0, "upper": 0.0, "exact": True})
            continue
        S = _site_tensor(Tr, E) / math.factorial(r)
        exact = None
        if nv ** r <= exact_max_vars:
            Ar = ctx.D
            for _ in range(r - 1):
                Ar = sp.kron(Ar, ctx.D, format="csr")
            exact = _lp_max(S.reshape(-1), Ar)
        lo = 0.0
        if exact is not None:
            pass
        elif r == 1:
            exact = _lp_max(S, ctx.D)
        else:
            for _ in range(n_starts):
                vecs = []
                for _l in range(r):
                    g = rng.standard_normal(nv)
                    nrm = float(np.max(np.abs(ctx.D @ g)))
                    vecs.append(g / nrm if nrm > 0 else g)
                val = 0.0
                for _s in range(sweeps):
                    for leg in range(r):
                        c = _contract_except(S, vecs, leg)
                        res = linprog(-c, A_ub=sp.vstack([ctx.D, -ctx.D]).tocsr(),
                                      b_ub=np.ones(2 * ctx.D.shape[0]), bounds=(None, None), method="highs")
                        if res.status != 0:
                            break
                        vecs[leg] = res.x
                        val = float(-res.fun)
                lo = max(lo, abs(val))
        if exact is not None:
            lo = max(lo, exact)
            up = min(up, exact)
            lo = min(lo, up)
        per_order.append({"r": r, "lower": lo, "upper": up, "exact": exact is not None})
        lower += lo
        upper += up
    return {"lower": lower, "upper": upper, "orders": per_order}


# ---------------------------------------------------------------------------
# relevant Hamiltonians


def v1_index(d: int, m: int) -> list:
    return [(i, a) for a in multi_indices(d, 1, d // 2 + 1) for i in range(m)]


def v2_index(d: int, m: int) -> list:
    """Ordered pairs (i, e_a) <= (j, e_b), lexicographic on (component, direction)."""
    base = [(i, unit(d, a)) for i in range(m) for a in range(d)]
    keyed = sorted(base, key=lambda t: (t[0], tuple(-v for v in t[1])))
    out = []
    for p in range(len(keyed)):
        for q in range(p, len(keyed)):
            out.append((keyed[p], keyed[q]))
    return out


@dataclass
class RelevantHamiltonian:
    """H(B, phi) = sum_{x in B} (a_0 + sum_v1 a grad^a phi_i + sum_v2 a grad^a phi_i grad^b phi_j)."""
    d: int
    m: int = 1
    a0: float = 0.0
    a1: dict = field(default_factory=dict)
    a2: dict = field(default_factory=dict)

    @cached_property
    def v1(self) -> list:
        return v1_index(self.d, self.m)

    @cached_property
    def v2(self) -> list:
        return v2_index(self.d, self.m)

    @property
    def size(self) -> int:
        return 1 + len(self.v1) + len(self.v2)

    def to_vector(self) -> np.ndarray:
        return np.array([self.a0] + [self.a1.get(k, 0.0) for k in self.v1] + [self.a2.get(k, 0.0) for k in self.v2])

    @classmethod
    def from_vector(cls, d: int, m: int, v: np.ndarray) -> "RelevantHamiltonian":
        H = cls(d, m)
        v = np.asarray(v, dtype=float)
        H.a0 = float(v[0])
        H.a1 = {k: float(x) for k, x in zip(H.v1, v[1:1 + len(H.v1)])}
        H.a2 = {k: float(x) for k, x in zip(H.v2, v[1 + len(H.v1):])}
        return H

    def __add__(self, other):
        return RelevantHamiltonian.from_vector(self.d, self.m, self.to_vector() + other.to_vector())

    def __sub__(self, other):
        return RelevantHamiltonian.from_vector(self.d, self.m, self.to_vector() - other.to_vector())

    def scaled(self, c: float) -> "RelevantHamiltonian":
        return RelevantHamiltonian.from_vector(self.d, self.m, c * self.to_vector())

    def density(self, torus: TorusGeometry, phi: np.ndarray) -> np.ndarray:
        """Per-site density h(x, phi), shape (*batch, n, ..., n)."""
        phi = np.asarray(phi, dtype=float)
        out = np.full(phi.shape[:-1], self.a0)
        cache = {}

        def g(i, a):
            if a not in cache:
                cache[a] = torus.diff(phi, a)
            return cache[a][..., i]

        for (i, a), c in self.a1.items():
            if c:
                out = out + c * g(i, a)
        for ((i, a), (j, b)), c in self.a2.items():
            if c:
                out = out + c * g(i, a) * g(j, b)
        return out

    def on_sites(self, torus: TorusGeometry, phi: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return np.sum(self.density(torus, phi)[..., mask], axis=-1)

    def q_matrix(self) -> np.ndarray:
        """Gradient-block matrix q with (1/2) <q z, z> = sum_v2 a z z (index j * m + i for (i, e_j))."""
        dm = self.d * self.m
        q = np.zeros((dm, dm))
        for ((i, a), (j, b)), c in self.a2.items():
            p = a.index(1) * self.m + i
            s = b.index(1) * self.m + j
            if p == s:
                q[p, p] += 2 * c
            else:
                q[p, s] += c
                q[s, p] += c
        return q

    @classmethod
    def from_q(cls, d: int, m: int, q: np.ndarray, a0: float = 0.0) -> "RelevantHamiltonian":
        H = cls(d, m, a0=a0)
        for (ia, jb) in H.v2:
            (i, a), (j, b) = ia, jb
            p = a.index(1) * m + i
            s = b.index(1) * m + j
            H.a2[(ia, jb)] = q[p, p] / 2 if p == s else q[p, s]
        return H

    def as_functional(self, torus: TorusGeometry, block_sites: Sequence[tuple]) -> LocalFunctional:
        """H(B, .) as a LocalFunctional (exact Taylor data)."""
        labels = []
        for x in block_sites:
            for i in range(self.m):
                for a in multi_indices(self.d, 1, max(1, self.d // 2 + 1)):
                    labels.append((tuple(x), i, a))
        pos = {l: n for n, l in enumerate(labels)}
        p = len(labels)
        c1 = np.zeros(p)
        c2 = np.zeros((p, p))
        for x in block_sites:
            x = tuple(x)
            for (i, a), c in self.a1.items():
                c1[pos[(x, i, a)]] += c
            for ((i, a), (j, b)), c in self.a2.items():
                u, v = pos[(x, i, a)], pos[(x, j, b)]
                c2[u, v] += c
                c2[v, u] += c
        c0 = self.a0 * len(block_sites)
        return LocalFunctional.polynomial(torus, labels, [c0, c1, c2], name="relevant")


def hamiltonian_norm(H: RelevantHamiltonian, k: int, scale: NormScale) -> float:
    d, L = scale.d, scale.L
    hk = scale.h_j(k)
    out = L ** (k * d) * abs(H.a0)
    for (i, a), c in H.a1.items():
        out += hk * L ** (k * d) * L ** (-k * (d - 2) / 2) * L ** (-k * sum(a)) * abs(c)
    for _, c in H.a2.items():
        out += hk ** 2 * abs(c)
    return float(out)


# ---------------------------------------------------------------------------
# lattice Taylor polynomials


def lattice_diff(f: Callable, z: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
    """grad^alpha f at integer points z (..., d)."""
    z = np.asarray(z)
    out = 0.0
    for beta, c in diff_coefficients(tuple(alpha)):
        out = out + c * np.asarray(f(z + np.asarray(beta)), dtype=float)
    return out


def discrete_taylor(f: Callable, a: Sequence[int], s: int) -> Callable:
    """tay_a^s f(z) = sum_{|alpha| <= s} grad^alpha f(a) b_alpha(z - a)."""
    a = np.asarray(a)
    d = a.size
    coefs = [(al, float(lattice_diff(f, a, al))) for al in multi_indices(d, 0, s)]

    def tay(z, beta=None):
        z = np.asarray(z)
        out = np.zeros(z.shape[:-1])
        for al, c in coefs:
            sh = tuple(x - y for x, y in zip(al, beta)) if beta is not None else al
            if min(sh) < 0:
                continue
            out = out + c * b_poly(sh, z - a)
        return out

    tay.coefficients = coefs
    return tay


def remainder_check(f: Callable, a: Sequence[int], s: int, rho: int) -> dict:
    """Pointwise |grad^beta (f - tay)(z)| <= M_{rho,s} binom(|z-a|_1, s-|beta|+1) on a + [0, rho]^d."""
    a = np.asarray(a)
    d = a.size
    tay = discrete_taylor(f, a, s)
    box = np.stack(np.meshgrid(*[np.arange(rho + 1)] * d, indexing="ij"), axis=-1).reshape(-1, d) + a
    M = max(float(np.max(np.abs(lattice_diff(f, box, al)))) for al in multi_indices(d, s + 1, s + 1))
    worst, sharp_gap, n_checks = -np.inf, np.inf, 0
    dist = np.sum(box - a, axis=-1)
    for beta in multi_indices(d, 0, s):
        lhs = np.abs(lattice_diff(f, box, beta) - tay(box, beta))
        rhs = M * binom_poly(dist, s - sum(beta) + 1)
        worst = max(worst, float(np.max(lhs - rhs)))
        if sum(beta) == 0:
            sharp_gap = float(np.max(np.abs(lhs - rhs)))
        n_checks += lhs.size
    return {"M": M, "max_violation": worst, "holds": worst <= 1e-9 * max(1.0, M), "checks": n_checks,
            "sharp_gap_beta0": sharp_gap}


def monomial_duality_check(alpha: Sequence[int], beta: Sequence[int], side: int = 6) -> bool:
    d = len(alpha)
    box = np.stack(np.meshgrid(*[np.arange(side + 1)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    lhs = lattice_diff(lambda z: b_poly(alpha, z), box, beta)
    diff = tuple(x - y for x, y in zip(alpha, beta))
    rhs = np.zeros(len(box)) if min(diff) < 0 else b_poly(diff, box)
    return bool(np.array_equal(np.asarray(lhs, float), np.asarray(rhs, float)))


# ---------------------------------------------------------------------------
# Sobolev


def _sobolev_rhs(f: np.ndarray, ell: int, d: int, Mp: int) -> float:
    """ell^{-d/2} sum_{|alpha| <= M'} ||(ell grad)^alpha f||_{2, B_ell}; f given on [0, ell + M']^d."""
    total = 0.0
    core = tuple(slice(0, ell + 1) for _ in range(d))
    for al in multi_indices(d, 0, Mp):
        g = f
        for ax, k in enumerate(al):
            for _ in range(k):
                g = np.diff(g, axis=ax)
        sl = tuple(slice(0, ell + 1) for _ in range(d))
        total += ell ** sum(al) * float(np.sqrt(np.sum(g[sl] ** 2)))
    return ell ** (-d / 2) * total


def sobolev_ratio(f: np.ndarray, ell: int, d: int) -> float:
    Mp = d // 2 + 1
    core = f[tuple(slice(0, ell + 1) for _ in range(d))]
    rhs = _sobolev_rhs(f, ell, d, Mp)
    return float(np.max(np.abs(core)) / rhs) if rhs > 0 else 0.0


def sobolev_estimate(ell: int, d: int, trials: int = 200, seed: int = 0) -> dict:
    """Smallest S with max|f| <= S ell^{-d/2} sum ||(ell grad)^alpha f||_2 over a random bank."""
    Mp = d // 2 + 1
    rng = np.random.default_rng(seed)
    shape = (ell + 1 + Mp,) * d
    grids = np.meshgrid(*[np.arange(s) / ell for s in shape], indexing="ij")
    best = 0.0
    kinds = {}
    for t in range(trials):
        kind = t % 4
        if kind == 0:
            f = np.full(shape, rng.normal())
        elif kind == 1:
            c = rng.normal(size=d)
            f = sum(ci * g for ci, g in zip(c, grids)) + rng.normal()
        elif kind == 2:
            kvec = rng.integers(0, 3, size=d)
            ph = rng.uniform(0, 2 * np.pi)
            f = np.cos(2 * np.pi * sum(k * g for k, g in zip(kvec, grids)) / 2 + ph)
        else:
            f = np.zeros(shape)
            f[tuple(rng.integers(0, ell + 1, size=d))] = 1.0
        r = sobolev_ratio(f, ell, d)
        kinds[kind] = max(kinds.get(kind, 0.0), r)
        best = max(best, r)
    return {"ell": ell, "d": d, "S": best, "by_kind": {str(k): v for k, v in kinds.items()}}


# ---------------------------------------------------------------------------
# two-norm inequality


def two_norm_check(F: LocalFunctional, k: int, Xstar_k: np.ndarray, phi: np.ndarray, scale: NormScale,
                   n_t: int = 5, r0: int = 3, **kw) -> dict:
    """|F|_{k+1,T_phi} <= (1 + |phi|_{k+1})^3 (|F|_{k+1,T_0} + 16 L^{-3d/2} sup_t |F|_{k,T_{t phi}})."""
    t = F.torus
    lhs = dual_norm_Tphi(F, scale, k + 1, Xstar_k, phi, r0, **kw)
    t0 = dual_norm_Tphi(F, scale, k + 1, Xstar_k, None, r0, **kw)
    sups_lo, sups_up = 0.0, 0.0
    for s in np.linspace(0.0, 1.0, n_t):
        b = dual_norm_Tphi(F, scale, k, Xstar_k, s * phi, r0, **kw)
        sups_lo = max(sups_lo, b["lower"])
        sups_up = max(sups_up, b["upper"])
    pref = (1 + field_norm(phi, t, scale, k + 1, Xstar_k)) ** 3
    fac = 16 * scale.L ** (-1.5 * scale.d)
    rhs_lo = pref * (t0["lower"] + fac * sups_lo)
    rhs_up = pref * (t0["upper"] + fac * sups_up)
    if lhs["upper"] <= rhs_lo:
        verdict = "holds"
    elif lhs["lower"] > rhs_up:
        verdict = "violated"
    else:
        verdict = "inconclusive"
    return {"lhs": [lhs["lower"], lhs["upper"]], "rhs": [rhs_lo, rhs_up], "verdict": verdict}
