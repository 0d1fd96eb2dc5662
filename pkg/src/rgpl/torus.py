"""Discrete torus (Z / L^N Z)^d, m-component fields and finite differences.

Fields are dense arrays of shape ``(*batch, n, ..., n, m)`` with ``n = L**N``
grid axes and the component axis innermost.  Array index ``j`` along a grid
axis stores the site with coordinate ``j mod n``; :meth:`TorusGeometry.coords`
returns the centered representative in ``[-(n-1)/2, (n-1)/2]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product
from typing import Iterable, Sequence

import numpy as np

MultiIndex = tuple


def multi_indices(d: int, order_min: int, order_max: int) -> list[MultiIndex]:
    """All alpha in N_0^d with order_min <= |alpha|_1 <= order_max, graded lex order."""
    out = []
    for r in range(order_min, order_max + 1):
        level = [a for a in product(range(r + 1), repeat=d) if sum(a) == r]
        level.sort(reverse=True)
        out.extend(level)
    return out


def unit(d: int, i: int) -> MultiIndex:
    e = [0] * d
    e[i] = 1
    return tuple(e)


def default_index_set(d: int) -> list[MultiIndex]:
    """I = {e_1, ..., e_d}."""
    return [unit(d, i) for i in range(d)]


def validate_index_set(I: Sequence[MultiIndex], d: int, R0: int) -> None:
    for a in I:
        if len(a) != d:
            raise ValueError(f"multi-index {a} has wrong length for d={d}")
        if sum(a) == 0:
            raise ValueError("index set may not contain alpha = 0")
        if max(a) > R0:
            raise ValueError(f"|alpha|_inf > R0 for {a}")
    for i in range(d):
        if unit(d, i) not in list(I):
            raise ValueError("index set must contain all unit vectors")


@dataclass(frozen=True)
class TorusGeometry:
    d: int
    L: int
    N: int
    m: int = 1

    def __post_init__(self):
        if self.d < 1 or self.N < 1 or self.m < 1:
            raise ValueError("d, N, m must be positive")
        if self.L < 3 or self.L % 2 == 0:
            raise ValueError("L must be odd and >= 3")

    @property
    def n(self) -> int:
        return self.L ** self.N

    @property
    def volume(self) -> int:
        return self.n ** self.d

    @property
    def grid_shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def field_shape(self) -> tuple:
        return self.grid_shape + (self.m,)

    def axis(self, i: int) -> int:
        """Array axis of grid direction i (counted from the end)."""
        return -(self.d + 1) + i

    @cached_property
    def coords(self) -> np.ndarray:
        """Centered coordinates of every site, shape (n,)*d + (d,)."""
        n = self.n
        c = np.arange(n)
        c = np.where(c > (n - 1) // 2, c - n, c)
        grids = np.meshgrid(*([c] * self.d), indexing="ij")
        return np.stack(grids, axis=-1)

    def flat_index(self, x: Iterable[int]) -> int:
        x = np.mod(np.asarray(x), self.n)
        return int(np.ravel_multi_index(tuple(x), self.grid_shape))

    def site_of_flat(self, idx: int) -> tuple:
        return tuple(int(v) for v in np.unravel_index(idx, self.grid_shape))

    @cached_property
    def momenta(self) -> np.ndarray:
        """Dual torus p = 2 pi j / n (FFT ordering), shape (n,)*d + (d,)."""
        f = 2 * np.pi * np.fft.fftfreq(self.n)
        grids = np.meshgrid(*([f] * self.d), indexing="ij")
        return np.stack(grids, axis=-1)

    @cached_property
    def real_fourier_modes(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal real cos/sin modes of the nonzero momenta, ordered by |p|, shape (n^d - 1, *grid).

        Returns the modes and the index of the momentum pair each mode belongs to.
        """
        n, d = self.n, self.d
        c = np.arange(n)
        c = np.where(c > (n - 1) // 2, c - n, c)
        reps = []
        for j in np.ndindex(*self.grid_shape):
            p = tuple(int(c[i]) for i in j)
            nz = [v for v in p if v != 0]
            if nz and nz[0] > 0:
                reps.append(p)
        reps.sort(key=lambda p: (sum(v * v for v in p), p))
        x = np.stack(np.meshgrid(*([np.arange(n)] * d), indexing="ij"), axis=-1)
        norm = np.sqrt(2.0 / self.volume)
        modes, pair = [], []
        for i, p in enumerate(reps):
            arg = 2 * np.pi * (x @ np.asarray(p, float)) / n
            modes += [norm * np.cos(arg), norm * np.sin(arg)]
            pair += [i, i]
        return np.stack(modes), np.asarray(pair)

    def zeros(self, *batch) -> np.ndarray:
        return np.zeros(tuple(batch) + self.field_shape)

    def random_field(self, rng: np.random.Generator, *batch) -> np.ndarray:
        return rng.standard_normal(tuple(batch) + self.field_shape)

    def project_zero_average(self, phi: np.ndarray) -> np.ndarray:
        axes = tuple(range(-(self.d + 1), -1))
        return phi - phi.mean(axis=axes, keepdims=True)

    def inner(self, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
        axes = tuple(range(-(self.d + 1), 0))
        return np.sum(phi * psi, axis=axes)

    def translate(self, phi: np.ndarray, a: Sequence[int]) -> np.ndarray:
        """(tau_a phi)(x) = phi(x - a)."""
        out = phi
        for i, s in enumerate(a):
            if s:
                out = np.roll(out, s, axis=self.axis(i))
        return out

    # differences -----------------------------------------------------

    def forward_diff(self, phi: np.ndarray, i: int) -> np.ndarray:
        if not 0 <= i < self.d:
            raise ValueError("invalid direction")
        ax = self.axis(i)
        return np.roll(phi, -1, axis=ax) - phi

    def backward_diff(self, phi: np.ndarray, i: int) -> np.ndarray:
        """Adjoint difference (grad_i^* phi)(x) = phi(x - e_i) - phi(x)."""
        if not 0 <= i < self.d:
            raise ValueError("invalid direction")
        ax = self.axis(i)
        return np.roll(phi, 1, axis=ax) - phi

    def diff(self, phi: np.ndarray, alpha: MultiIndex) -> np.ndarray:
        out = phi
        for i, a in enumerate(alpha):
            for _ in range(a):
                out = self.forward_diff(out, i)
        return out

    def diff_adj(self, phi: np.ndarray, alpha: MultiIndex) -> np.ndarray:
        out = phi
        for i, a in enumerate(alpha):
            for _ in range(a):
                out = self.backward_diff(out, i)
        return out

    def extended_gradient(self, phi: np.ndarray, I: Sequence[MultiIndex], R0: int | None = None) -> np.ndarray:
        """D phi at every site: shape (*batch, n..., |I|*m), alpha-major ordering."""
        R0 = max(max(a) for a in I) if R0 is None else R0
        validate_index_set(I, self.d, R0)
        if self.n <= R0 + 1:
            raise ValueError("torus side must exceed R0 + 1")
        parts = [self.diff(phi, a) for a in I]
        return np.concatenate(parts, axis=-1)

    # Fourier ------------------------------------------------------------

    def dft(self, phi: np.ndarray) -> np.ndarray:
        """phi_hat(p) = sum_x exp(-i p.x) phi(x)."""
        axes = tuple(range(-(self.d + 1), -1))
        return np.fft.fftn(phi, axes=axes)

    def idft(self, phi_hat: np.ndarray, real: bool = True) -> np.ndarray:
        axes = tuple(range(-(self.d + 1), -1))
        out = np.fft.ifftn(phi_hat, axes=axes)
        return out.real if real else out

    def plancherel(self, phi_hat: np.ndarray, psi_hat: np.ndarray) -> np.ndarray:
        axes = tuple(range(-(self.d + 1), 0))
        return np.sum(phi_hat * np.conj(psi_hat), axis=axes).real / self.volume

    @cached_property
    def q_symbol(self) -> np.ndarray:
        """q_j(p) = exp(i p_j) - 1 on the dual torus, shape (n,)*d + (d,)."""
        return np.exp(1j * self.momenta) - 1.0

    def q_power(self, alpha: MultiIndex) -> np.ndarray:
        """q(p)^alpha, the Fourier multiplier of grad^alpha, shape (n,)*d."""
        q = self.q_symbol
        out = np.ones(self.grid_shape, dtype=complex)
        for i, a in enumerate(alpha):
            if a:
                out = out * q[..., i] ** a
        return out


def symbol_q(p: np.ndarray) -> np.ndarray:
    """q(p) = exp(i p) - 1 componentwise."""
    return np.exp(1j * np.asarray(p, dtype=float)) - 1.0


def binom_poly(t, k: int):
    """Falling-factorial binomial t (t-1) ... (t-k+1) / k!, extended by 0 for k < 0."""
    t = np.asarray(t, dtype=float)
    if k < 0:
        return np.zeros_like(t)
    out = np.ones_like(t)
    for j in range(k):
        out = out * (t - j) / (j + 1)
    return out


def b_poly(alpha: Sequence[int], z: np.ndarray) -> np.ndarray:
    """b_alpha(z) = prod_j binom(z_j, alpha_j); z has trailing axis of length d."""
    z = np.asarray(z)
    out = np.ones(z.shape[:-1])
    for j, a in enumerate(alpha):
        out = out * binom_poly(z[..., j], a)
    return out
