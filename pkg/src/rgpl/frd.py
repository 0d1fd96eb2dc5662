"""Operator symbols, covariances and an exact finite-range decomposition.

The slices are built by polynomial functional calculus in the operator A.
With filters S_j (polynomials, S_j(0) = 1, 0 <= S_j <= 1 on the spectrum) and
T_k = S_1 ... S_k, slice k <= N has spectral weight

    g_k(lam) = (T_{k-1}(lam) - T_k(lam)) / lam  >= 0,

and the last slice takes T_N(lam) / lam.  The weights telescope to 1/lam and a
degree-n polynomial of a range-R0 stencil has range n * R0, which gives the
exact finite range.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import chebyshev as C

from .potentials import GradientSpace, QuadraticForm
from .torus import MultiIndex, TorusGeometry, multi_indices

log = logging.getLogger(__name__)

LAMBDA_MARGIN = 1e-10
FORMAT_MAGIC = b"RGPLFRD\x00"
FORMAT_VERSION = 1


class SymbolNotPositive(ValueError):
    def __init__(self, momentum, eigenvalue):
        super().__init__(f"symbol not positive at p={momentum}: eigenvalue {eigenvalue:.3e}")
        self.momentum = momentum
        self.eigenvalue = eigenvalue


def _embed_q(space: GradientSpace, q: Optional[np.ndarray]) -> np.ndarray:
    """Embed a (d m)^2 matrix on the gradient block into a G x G matrix."""
    out = np.zeros((space.dim, space.dim))
    if q is None:
        return out
    q = np.asarray(q, dtype=float)
    pos = space.gradient_positions
    if q.shape != (len(pos), len(pos)):
        raise ValueError(f"q must have shape {(len(pos), len(pos))}")
    if not np.allclose(q, q.T, atol=1e-14):
        raise ValueError("q must be symmetric")
    out[np.ix_(pos, pos)] = q
    return out


@dataclass(frozen=True, eq=False)
class OperatorSymbol:
    """A = sum (grad^a)^* Qeff_ab grad^b with Qeff = Q - q on the gradient block."""
    torus: TorusGeometry
    space: GradientSpace
    Q: np.ndarray
    q: np.ndarray
    values: np.ndarray  # (n,)*d + (m, m), Hermitian

    @property
    def Qeff(self) -> np.ndarray:
        return self.Q - _embed_q(self.space, self.q)

    @cached_property
    def eig(self):
        w, v = np.linalg.eigh(self.values)
        w = np.where(np.abs(w) < 1e-15, 0.0, w)
        return w, v

    @cached_property
    def lam_max(self) -> float:
        return float(self.eig[0].max()) * (1 + LAMBDA_MARGIN)

    @property
    def R0(self) -> int:
        return self.space.R0

    def apply(self, phi: np.ndarray) -> np.ndarray:
        """Real-space stencil application (A phi)(x) on a batch of fields."""
        t, sp = self.torus, self.space
        z = t.extended_gradient(phi, sp.I, sp.R0)
        flux = z @ self.Qeff.T
        out = np.zeros_like(phi)
        m = sp.m
        for a_idx, a in enumerate(sp.I):
            out = out + t.diff_adj(flux[..., a_idx * m:(a_idx + 1) * m], a)
        return out

    def omega(self) -> float:
        """Best omega with omega |p|^2 <= A(p) <= |p|^2 / omega on p != 0 (centered |p|)."""
        p = self.torus.momenta
        p = np.where(p > np.pi, p - 2 * np.pi, p)
        p2 = np.sum(p ** 2, axis=-1)
        w = self.eig[0]
        mask = p2 > 0
        lo = np.min(w[mask][:, 0] / p2[mask])
        hi = np.max(w[mask][:, -1] / p2[mask])
        return float(min(lo, 1.0 / hi))

    def matrix_function(self, f) -> np.ndarray:
        """f(A(p)) at every momentum, f acting on eigenvalues."""
        w, v = self.eig
        fw = f(w)
        return np.einsum("...ik,...k,...jk->...ij", v, fw, v.conj())


def build_symbol(Q, q=None, torus: TorusGeometry = None, space: GradientSpace = None) -> OperatorSymbol:
    """Fourier symbol of A^{(q)}; rejects non-positive symbols with a witness momentum."""
    if torus is None:
        raise ValueError("torus geometry required")
    if space is None:
        space = GradientSpace.nearest_neighbour(torus.d, torus.m)
    Qm = Q.matrix if isinstance(Q, QuadraticForm) else np.asarray(Q, dtype=float)
    if Qm.shape != (space.dim, space.dim):
        raise ValueError("Q has wrong shape for the gradient space")
    if not np.allclose(Qm, Qm.T, atol=1e-14):
        raise ValueError("Q must be symmetric")
    qm = np.zeros((torus.d * space.m,) * 2) if q is None else np.asarray(q, dtype=float)
    Qeff = Qm - _embed_q(space, qm)
    m = space.m
    # B(p) has shape (n..., |I| m, m): block a is q(p)^a * Id_m
    B = np.zeros(torus.grid_shape + (space.dim, m), dtype=complex)
    for a_idx, a in enumerate(space.I):
        qa = torus.q_power(a)
        for i in range(m):
            B[..., a_idx * m + i, i] = qa
    vals = np.einsum("...ai,ab,...bj->...ij", B.conj(), Qeff, B)
    vals = 0.5 * (vals + np.swapaxes(vals.conj(), -1, -2))
    sym = OperatorSymbol(torus, space, Qm, qm, vals)
    w = sym.eig[0]
    wmin = w[..., 0].copy()
    wmin.flat[0] = np.inf
    idx = int(np.argmin(wmin))
    if not wmin.flat[idx] > 0:
        p = torus.momenta.reshape(-1, torus.d)[idx]
        raise SymbolNotPositive(tuple(float(v) for v in p), float(wmin.flat[idx]))
    return sym


@dataclass(frozen=True, eq=False)
class TranslationKernel:
    """Matrix-valued kernel C(x) with (C phi)(x) = sum_y C(x - y) phi(y)."""
    torus: TorusGeometry
    values: np.ndarray  # (n,)*d + (m, m)

    @cached_property
    def fourier(self) -> np.ndarray:
        axes = tuple(range(self.torus.d))
        return np.fft.fftn(self.values, axes=axes)

    def apply(self, phi: np.ndarray) -> np.ndarray:
        t = self.torus
        ph = t.dft(phi)
        out = np.einsum("...ij,...j->...i", self.fourier, ph)
        return t.idft(out)

    def total(self) -> np.ndarray:
        return self.values.reshape(-1, self.torus.m, self.torus.m).sum(axis=0)

    def symmetry_error(self) -> float:
        """max |C(x) - C(-x)^T|."""
        rev = self.values
        for ax in range(self.torus.d):
            rev = np.roll(np.flip(rev, axis=ax), 1, axis=ax)
        return float(np.max(np.abs(self.values - np.swapaxes(rev, -1, -2))))

    def dense(self) -> np.ndarray:
        """Dense (V m) x (V m) covariance matrix, index (site, component)."""
        t = self.torus
        V, m = t.volume, t.m
        out = np.empty((V, m, V, m))
        for y in range(V):
            shift = t.site_of_flat(y)
            col = self.values
            for ax, s in enumerate(shift):
                col = np.roll(col, s, axis=ax)
            out[:, :, y, :] = col.reshape(V, m, m)
        return out.reshape(V * m, V * m)

    def derivative(self, alpha: MultiIndex) -> np.ndarray:
        """grad^alpha applied in x to every matrix entry."""
        out = self.values
        for i, a in enumerate(alpha):
            for _ in range(a):
                out = np.roll(out, -1, axis=i) - out
        return out


def covariance(symbol: OperatorSymbol) -> TranslationKernel:
    """Zero-sum kernel with C_hat(p) = A(p)^{-1} for p != 0 and C_hat(0) = 0."""
    w = symbol.eig[0]
    if np.any(w.reshape(-1, w.shape[-1])[1:] <= 0):
        raise ValueError("singular symbol at nonzero momentum")
    with np.errstate(divide="ignore"):
        Ch = symbol.matrix_function(lambda lam: np.where(lam > 0, 1.0 / np.where(lam > 0, lam, 1.0), 0.0))
    Ch[(0,) * symbol.torus.d] = 0.0
    axes = tuple(range(symbol.torus.d))
    vals = np.fft.ifftn(Ch, axes=axes).real
    return TranslationKernel(symbol.torus, vals)


# ---------------------------------------------------------------------------
# spectral filters


def frd_degrees(L: int, N: int, R0: int, rule: str = "spec") -> list[int]:
    """Maximal degree of g_k for k = 1..N."""
    if rule == "spec":
        return [int(np.floor((L ** k / 2 - 1) / R0)) for k in range(1, N + 1)]
    if rule == "tight":
        return [int((L ** k - 1) // (2 * R0)) for k in range(1, N + 1)]
    raise ValueError(f"unknown degree rule {rule!r}")


def _jackson_params(s: int, rmin: int) -> tuple[int, int, int]:
    """Pick (j, r, extra) with r (j - 1) + extra = s maximising the kernel width j."""
    best = None
    for r in range(max(rmin, 1), s + 1):
        j = s // r + 1
        if j >= 2 and (best is None or j > best[0]):
            best = (j, r)
    if best is None:
        return 1, 0, s
    j, r = best
    return j, r, s - r * (j - 1)


def jackson_filter(s: int, rmin: int = 1) -> C.Chebyshev:
    """Polynomial of degree s in t = 2 lam / lam_max - 1 with S(-1) = 1, 0 <= S <= 1.

    S = [sin(j th/2) / (j sin(th/2))]^(2r) * ((1 - t)/2)^extra with cos th = -t.
    """
    if s == 0:
        return C.Chebyshev([1.0])
    j, r, extra = _jackson_params(s, rmin)

    def f(t):
        th = np.arccos(np.clip(-t, -1.0, 1.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(th < 1e-12, 1.0, np.sin(j * th / 2) / (j * np.sin(th / 2)))
        return v ** (2 * r) * ((1 - t) / 2) ** extra

    coef = C.chebinterpolate(f, s)
    return C.Chebyshev(coef)


@dataclass(frozen=True)
class SpectralWeights:
    """g_k as Chebyshev series in t = 2 lam / lam_max - 1 for k <= N, plus T_N."""
    lam_max: float
    g: tuple
    T_last: C.Chebyshev
    degrees: tuple

    def g_lambda(self, k: int, lam: np.ndarray) -> np.ndarray:
        """g_k(lam), k = 1..N+1 (the last one only for lam > 0)."""
        lam = np.asarray(lam, dtype=float)
        t = 2 * lam / self.lam_max - 1
        if k <= len(self.g):
            return self.g[k - 1](t)
        safe = np.where(lam > 0, lam, 1.0)
        return np.where(lam > 0, self.T_last(t) / safe, 0.0)


def spectral_weights(lam_max: float, degrees: Sequence[int], rmin: int = 1) -> SpectralWeights:
    one_plus_t = C.Chebyshev([1.0, 1.0])  # (1 + t) = 2 lam / lam_max
    T_prev = C.Chebyshev([1.0])
    prev_deg = 0
    g = []
    for nk in degrees:
        s = max(nk + 1 - prev_deg, 0)
        S = jackson_filter(s, rmin)
        T = T_prev * S
        quo, rem = divmod(T_prev - T, one_plus_t)
        if quo.degree() > nk:
            quo = quo.truncate(nk + 1)
        g.append(C.Chebyshev(quo.coef * 2 / lam_max))
        T_prev, prev_deg = T, prev_deg + s
    return SpectralWeights(lam_max, tuple(g), T_prev, tuple(degrees))


def clenshaw_apply(op, coef: np.ndarray, lam_max: float, v0: np.ndarray) -> np.ndarray:
    """p(A) v0 for p = sum c_j T_j(2 A / lam_max - 1)."""
    def Tm(v):
        return (2.0 / lam_max) * op(v) - v
    b1 = np.zeros_like(v0)
    b2 = np.zeros_like(v0)
    for c in coef[:0:-1]:
        b1, b2 = c * v0 + 2 * Tm(b1) - b2, b1
    return coef[0] * v0 + Tm(b1) - b2


# ---------------------------------------------------------------------------
# decomposition


@dataclass(eq=False)
class FiniteRangeDecomposition:
    symbol: OperatorSymbol
    weights: SpectralWeights
    compact: list  # TranslationKernel, compact representatives
    K: list  # (m, m) constants, C_k(x) = -K_k for |x|_inf >= L^k / 2
    ranges: list  # L^k / 2 for k <= N, None for the last slice
    meta: dict = field(default_factory=dict)

    @property
    def torus(self) -> TorusGeometry:
        return self.symbol.torus

    @property
    def n_slices(self) -> int:
        return len(self.compact)

    @cached_property
    def slices(self) -> list:
        """Zero-sum kernels C_k = compact - K_k."""
        return [TranslationKernel(self.torus, c.values - Kk) for c, Kk in zip(self.compact, self.K)]

    def slice_symbol(self, k: int) -> np.ndarray:
        """Fourier symbol of the zero-sum slice from functional calculus (0 at p = 0)."""
        out = self.symbol.matrix_function(lambda lam: self.weights.g_lambda(k, lam))
        out[(0,) * self.torus.d] = 0.0
        return out

    def partial_sum(self, k_from: int, k_to: int) -> TranslationKernel:
        vals = sum(self.slices[k - 1].values for k in range(k_from, k_to + 1))
        return TranslationKernel(self.torus, vals)

    def outside_mask(self, k: int) -> np.ndarray:
        return np.max(np.abs(self.torus.coords), axis=-1) >= self.ranges[k - 1]


def build_frd(symbol: OperatorSymbol, L: int | None = None, N: int | None = None, rmin: int = 1,
              degree_rule: str = "spec") -> FiniteRangeDecomposition:
    t = symbol.torus
    if L is not None and L != t.L or N is not None and N != t.N:
        raise ValueError("L and N must match the torus geometry")
    L, N, m, d = t.L, t.N, t.m, t.d
    degrees = frd_degrees(L, N, symbol.R0, degree_rule)
    W = spectral_weights(symbol.lam_max, degrees, rmin)
    delta = np.zeros((m,) + t.field_shape)
    for i in range(m):
        delta[(i,) + (0,) * d + (i,)] = 1.0
    compact, K, ranges = [], [], []
    for k in range(1, N + 1):
        cols = clenshaw_apply(symbol.apply, W.g[k - 1].coef, W.lam_max, delta)
        # cols[j, x..., i] = C_k(x)[i, j]
        vals = np.moveaxis(cols, 0, -1)
        compact.append(TranslationKernel(t, vals))
        g0 = float(W.g[k - 1](-1.0))
        K.append(g0 / t.volume * np.eye(m))
        ranges.append(L ** k / 2)
    last = symbol.matrix_function(lambda lam: W.g_lambda(N + 1, lam))
    last[(0,) * d] = 0.0
    vals = np.fft.ifftn(last, axes=tuple(range(d))).real
    compact.append(TranslationKernel(t, vals))
    K.append(np.zeros((m, m)))
    ranges.append(None)
    frd = FiniteRangeDecomposition(symbol, W, compact, K, ranges,
                                   meta={"degrees": degrees, "rmin": rmin, "degree_rule": degree_rule})
    mins = frd_min_eigenvalue(frd)
    if mins < -1e-12:
        log.warning("slice positivity violated: min eigenvalue %.3e", mins)
    return frd


def telescoping_error(frd: FiniteRangeDecomposition, C_full: TranslationKernel | None = None) -> float:
    C_full = covariance(frd.symbol) if C_full is None else C_full
    total = sum(s.values for s in frd.slices)
    return float(np.max(np.abs(total - C_full.values)))


def range_violations(frd: FiniteRangeDecomposition) -> int:
    """Number of (k, x, i, j) with |x|_inf >= L^k/2 and C_k(x) != -K_k exactly."""
    count = 0
    for k in range(1, frd.n_slices):
        mask = frd.outside_mask(k)
        v = frd.slices[k - 1].values[mask] + frd.K[k - 1]
        count += int(np.count_nonzero(v))
    return count


def frd_min_eigenvalue(frd: FiniteRangeDecomposition) -> float:
    """Smallest eigenvalue over p != 0 of the DFT of every real-space slice."""
    out = np.inf
    d = frd.torus.d
    for s in frd.slices:
        F = s.fourier
        F = 0.5 * (F + np.swapaxes(F.conj(), -1, -2))
        w = np.linalg.eigvalsh(F).reshape(-1, frd.torus.m)[1:]
        out = min(out, float(w.min()) if w.size else np.inf)
    return out


def slice_sup_table(frd: FiniteRangeDecomposition, max_order: int = 4) -> dict:
    """sup_x |grad^alpha C_k(x)| for every alpha with |alpha| <= max_order."""
    alphas = multi_indices(frd.torus.d, 0, max_order)
    table = {}
    for a in alphas:
        table[a] = np.array([float(np.max(np.abs(s.derivative(a)))) for s in frd.slices])
    return table


def verify_frd_scaling(frd: FiniteRangeDecomposition, max_order: int = 4, k_min: int = 1,
                       tol: float = 0.5) -> dict:
    """Fit log sup|grad^a C_k| against (k-1) log L over k = k_min..N+1."""
    t = frd.torus
    if t.N < 3:
        raise ValueError("scaling fit needs N >= 3")
    table = slice_sup_table(frd, max_order)
    ks = np.arange(1, frd.n_slices + 1)
    sel = ks >= k_min
    fits = []
    passed = True
    for a, sups in table.items():
        order = sum(a)
        target = -(t.d - 2 + order)
        y = np.log(np.maximum(sups[sel], np.finfo(float).tiny))
        x = (ks[sel] - 1) * np.log(t.L)
        slope = float(np.polyfit(x, y, 1)[0])
        local = [float(np.log(sups[i + 1] / sups[i]) / np.log(t.L)) for i in range(len(sups) - 1)]
        ok = abs(slope - target) <= tol
        passed &= ok
        fits.append({"alpha": list(a), "k": [int(k) for k in ks[sel]], "exponent": slope,
                     "target": float(target), "local_exponents": local, "pass": bool(ok)})
    by_order = {}
    for f_ in fits:
        by_order.setdefault(sum(f_["alpha"]), []).append(f_["exponent"])
    mean_by_order = [float(np.mean(by_order[r])) for r in sorted(by_order)]
    monotone = all(mean_by_order[i + 1] < mean_by_order[i] for i in range(len(mean_by_order) - 1))
    return {"scaling_fits": fits, "sup_table": {str(list(a)): v.tolist() for a, v in table.items()},
            "monotone": bool(monotone), "pass": bool(passed)}


def frd_report(frd: FiniteRangeDecomposition, scaling: bool = True) -> dict:
    rep = {"telescoping_error": telescoping_error(frd), "range_violations": range_violations(frd),
           "min_eigenvalue": frd_min_eigenvalue(frd), "scaling_fits": []}
    if scaling and frd.torus.N >= 3:
        rep["scaling_fits"] = verify_frd_scaling(frd)["scaling_fits"]
    return rep


# ---------------------------------------------------------------------------
# binary IO: magic, u32 version, u32 header length, JSON header, f64 LE arrays


def save_frd(frd: FiniteRangeDecomposition, path) -> None:
    t = frd.torus
    header = {"d": t.d, "L": t.L, "N": t.N, "m": t.m, "I": [list(a) for a in frd.symbol.space.I],
              "Q": frd.symbol.Q.tolist(), "q": frd.symbol.q.tolist(), "meta": frd.meta,
              "n_slices": frd.n_slices}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for c, Kk in zip(frd.compact, frd.K):
            fh.write(np.ascontiguousarray(c.values, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(Kk, dtype="<f8").tobytes())


def load_frd(path) -> FiniteRangeDecomposition:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != FORMAT_MAGIC:
        raise ValueError("not an FRD file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported FRD format version {version}")
    header = json.loads(data[16:16 + hlen])
    t = TorusGeometry(header["d"], header["L"], header["N"], header["m"])
    space = GradientSpace(t.d, t.m, tuple(tuple(a) for a in header["I"]))
    sym = build_symbol(np.array(header["Q"]), np.array(header["q"]), t, space)
    meta = header["meta"]
    W = spectral_weights(sym.lam_max, meta["degrees"], meta["rmin"])
    buf = io.BytesIO(data[16 + hlen:])
    m = t.m
    compact, K, ranges = [], [], []
    for k in range(1, header["n_slices"] + 1):
        v = np.frombuffer(buf.read(8 * t.volume * m * m), dtype="<f8").reshape(t.grid_shape + (m, m))
        Kk = np.frombuffer(buf.read(8 * m * m), dtype="<f8").reshape(m, m)
        compact.append(TranslationKernel(t, v.copy()))
        K.append(Kk.copy())
        ranges.append(t.L ** k / 2 if k <= t.N else None)
    return FiniteRangeDecomposition(sym, W, compact, K, ranges, meta=meta)
