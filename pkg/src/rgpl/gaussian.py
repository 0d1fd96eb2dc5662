"""Gaussian measures with translation-invariant covariance: sampling, quadrature, R_k.

Monte Carlo draws come in chunks; chunk c uses a Philox stream keyed by
SeedSequence([seed, stream, c]), so results do not depend on how chunks are
distributed over workers.  Chunk partial sums are combined in chunk order.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Iterator, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .frd import TranslationKernel

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianBackend:
    mode: str = "quadrature"  # "quadrature" or "mc"
    seed: int = 0
    n_samples: int = 4096
    order: int = 8
    max_rank: int = 12
    max_nodes: int = 1 << 16
    min_order: int = 3
    chunk: int = 512
    threads: int = 1
    stream: int = 0

    def __post_init__(self):
        if self.mode not in ("quadrature", "mc"):
            raise ValueError(f"unknown backend mode {self.mode!r}")

    def with_stream(self, stream: int) -> "GaussianBackend":
        return replace(self, stream=stream)


def chunk_rng(seed: int, stream: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream), int(chunk)])
    return np.random.Generator(np.random.Philox(ss))


def quadrature_order(rank: int, backend: GaussianBackend) -> int:
    """Largest order <= backend.order with order**rank <= max_nodes (0 if below min_order)."""
    if rank == 0:
        return 1
    if rank > backend.max_rank:
        return 0
    o = backend.order
    while o >= backend.min_order and o ** rank > backend.max_nodes:
        o -= 1
    return o if o >= backend.min_order else 0


def tensor_rule(rank: int, order: int, chunk: int = 4096) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Standard-normal tensor Gauss-Hermite rule in chunks of (nodes (M, rank), weights (M,))."""
    x, w = hermegauss(order)
    w = w / math.sqrt(2 * math.pi)
    total = order ** rank
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = np.empty((idx.size, rank), dtype=np.int64)
        r = idx.copy()
        for j in range(rank - 1, -1, -1):
            digits[:, j] = r % order
            r //= order
        yield x[digits], np.prod(w[digits], axis=1)


class GaussianField:
    """Centered Gaussian on fields with covariance given by a translation kernel."""

    def __init__(self, kernel: TranslationKernel, rank_tol: float = 1e-12):
        self.kernel = kernel
        self.torus = kernel.torus
        self.rank_tol = rank_tol

    @cached_property
    def sqrt_symbol(self) -> np.ndarray:
        F = self.kernel.fourier
        F = 0.5 * (F + np.swapaxes(F.conj(), -1, -2))
        w, v = np.linalg.eigh(F)
        w = np.sqrt(np.clip(w, 0.0, None))
        return np.einsum("...ik,...k,...jk->...ij", v, w, v.conj())

    @cached_property
    def eigen(self) -> tuple[np.ndarray, np.ndarray]:
        """Nonzero eigenpairs of the dense covariance: (lam (r,), vecs (r, *field_shape)).

        The eigenvectors are real Fourier modes ordered by |p| (times an eigenbasis of the
        m x m block of each momentum pair), so the basis does not jump between kernels
        whose spectra are degenerate.
        """
        t = self.torus
        m = t.m
        M = self.kernel.dense()
        M = 0.5 * (M + M.T)
        modes, pair = t.real_fourier_modes
        G = modes.reshape(modes.shape[0], -1)
        lam, vecs = [], []
        for i in range(int(pair.max()) + 1 if pair.size else 0):
            rows = G[pair == i]
            E = np.einsum("ax,ij->aixj", rows, np.eye(m)).reshape(rows.shape[0] * m, -1)
            B = E @ M @ E.T
            B = 0.5 * (B + B.T)
            if m == 1 and np.allclose(B, np.diag(np.diag(B)), atol=1e-13 * max(1.0, np.abs(B).max())):
                w, v = np.diag(B).copy(), np.eye(B.shape[0])
            else:
                w, v = np.linalg.eigh(B)
            lam.append(w)
            vecs.append(v.T @ E)
        if not lam:
            return np.zeros(0), np.zeros((0,) + t.field_shape)
        w, V = np.concatenate(lam), np.concatenate(vecs)
        keep = w > self.rank_tol * max(float(w.max()), 1e-300)
        return w[keep], V[keep].reshape((-1,) + t.field_shape)

    @property
    def rank(self) -> int:
        return int(self.eigen[0].size)

    def color(self, white: np.ndarray) -> np.ndarray:
        """Map white noise (B, *field_shape) to samples with covariance C."""
        t = self.torus
        wh = t.dft(white)
        out = np.einsum("...ij,...j->...i", self.sqrt_symbol, wh)
        return t.idft(out)

    def samples(self, seed: int, stream: int, chunk: int, count: int) -> np.ndarray:
        rng = chunk_rng(seed, stream, chunk)
        return self.color(rng.standard_normal((count,) + self.torus.field_shape))

    def quadrature_nodes(self, order: int, chunk: int = 4096):
        lam, vecs = self.eigen
        s = np.sqrt(lam)
        for z, w in tensor_rule(lam.size, order, chunk):
            xi = np.tensordot(z * s, vecs, axes=(1, 0))
            yield xi, w


def expectation(F: Callable[[np.ndarray], np.ndarray], field: GaussianField, phi: np.ndarray,
                backend: GaussianBackend) -> tuple[float, float]:
    """E[F(phi + xi)] with its standard error (0 for quadrature)."""
    phi = np.asarray(phi, dtype=float)
    if backend.mode == "quadrature":
        o = quadrature_order(field.rank, backend)
        if o:
            acc = []
            for xi, w in field.quadrature_nodes(o, backend.chunk * 8):
                acc.append(float(np.dot(w, F(phi + xi))))
            return math.fsum(acc), 0.0
        log.info("rank %d above quadrature cap; falling back to Monte Carlo", field.rank)
    return _mc_expectation(F, field, phi, backend)


def _mc_expectation(F, field: GaussianField, phi, backend: GaussianBackend) -> tuple[float, float]:
    n_pairs = max(backend.n_samples // 2, 1)
    size = max(backend.chunk // 2, 1)
    chunks = [(c, min(size, n_pairs - c * size)) for c in range((n_pairs + size - 1) // size)]

    def run(spec):
        c, cnt = spec
        xi = field.samples(backend.seed, backend.stream, c, cnt)
        vals = 0.5 * (np.asarray(F(phi + xi), float) + np.asarray(F(phi - xi), float))
        return vals

    if backend.threads > 1:
        with ThreadPoolExecutor(backend.threads) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    vals = np.concatenate(parts)
    if not np.all(np.isfinite(vals)):
        raise IntegrationError("non-finite integrand values in Monte Carlo estimate")
    mean = math.fsum(vals) / vals.size
    var = math.fsum((vals - mean) ** 2) / max(vals.size - 1, 1)
    se = math.sqrt(var / vals.size)
    if not math.isfinite(se):
        raise IntegrationError("Monte Carlo variance estimate is not finite")
    return mean, se


def convolve_R(F: Callable[[np.ndarray], np.ndarray], C_k: TranslationKernel, phi: np.ndarray,
               backend: GaussianBackend | None = None) -> tuple[float, float]:
    """(R F)(phi) = int F(phi + xi) mu_{C_k}(d xi), returned as (value, standard error)."""
    backend = GaussianBackend() if backend is None else backend
    return expectation(F, GaussianField(C_k), phi, backend)


def q_smoothness_check(F: Callable, k: int, q0: np.ndarray, direction: np.ndarray, Q, torus,
                       diameters=None, make_F=None, step: float = 1e-3, p: float = 2.0,
                       backend: GaussianBackend | None = None) -> dict:
    """Central difference in t of int F d mu_{k+1}^{(q0 + t dir)} and its ratio to (D L^-k)^{d/2} |F|_p.

    With ``make_F(D)`` a family of local functionals of diameter D is swept; otherwise F is
    used as given with diameter ``diameters[0]``.  The same white noise is used for +t and -t.
    """
    from .frd import build_frd, build_symbol

    backend = GaussianBackend(mode="mc", n_samples=4096) if backend is None else backend
    diameters = [torus.L ** k] if diameters is None else list(diameters)
    q0 = np.asarray(q0, float)
    direction = np.asarray(direction, float)

    def slice_field(q):
        frd = build_frd(build_symbol(Q, q, torus))
        return GaussianField(frd.slices[k])  # slice k+1

    fields = {s: slice_field(q0 + s * step * direction) for s in (-1, 0, 1)}
    rows = []
    for D in diameters:
        G = make_F(D) if make_F is not None else F
        n_pairs = max(backend.n_samples // 2, 1)
        rng = chunk_rng(backend.seed, backend.stream, 0)
        white = rng.standard_normal((n_pairs,) + torus.field_shape)
        phi = torus.zeros()
        vals = {}
        for s, fld in fields.items():
            xi = fld.color(white)
            vals[s] = 0.5 * (np.asarray(G(phi + xi)) + np.asarray(G(phi - xi)))
        diff = (vals[1] - vals[-1]) / (2 * step)
        deriv = float(np.mean(diff))
        se = float(np.std(diff, ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
        xi0 = fields[0].color(white)
        Fp = float(np.mean(np.abs(np.asarray(G(xi0))) ** p) ** (1 / p))
        scale = (D / torus.L ** k) ** (torus.d / 2) * Fp
        rows.append({"diameter": D, "derivative": deriv, "se": se, "norm_p": Fp,
                     "ratio": abs(deriv) / scale if scale > 0 else 0.0})
    ratios = [r["ratio"] for r in rows]
    return {"k": k, "rows": rows, "max_ratio": max(ratios), "bounded": bool(max(ratios) < np.inf)}
