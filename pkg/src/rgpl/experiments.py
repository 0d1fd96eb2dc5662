"""Desk-scale experiments: Gaussian log-determinants, free energies, convexity scans,
scaling-limit Laplace transforms and the report pipeline."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .frd import build_frd, build_symbol, covariance, frd_min_eigenvalue, range_violations, telescoping_error
from .gaussian import GaussianField
from .potentials import (GradientSpace, MayerFunction, Potential, double_well_potential, lift_potential,
                         quadratic_potential, quartic_potential)
from .torus import TorusGeometry, multi_indices

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("schema_version", "stage", "quantity", "index", "value", "stderr")
POTENTIALS = ("quadratic", "quartic", "double-well", "springs")
STAGES = ("frd", "weights", "rg", "free_energy", "convexity", "scaling")


class PreconditionError(ValueError):
    """Invalid configuration or violated precondition (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    seed: int
    d: int = 1
    m: int = 1
    L: int = 3
    N: int = 2
    potential: dict = field(default_factory=lambda: {"name": "quartic", "g": 1.0})
    beta: float = 16.0
    mode: str = "gradient"  # or "elasticity"
    F_grid: list = field(default_factory=list)  # empty: F = 0 only
    fd_step: float = 0.1
    samples: int = 4096
    replicates: int = 8
    chunk: int = 1024
    threads: int = 1
    out: str = "out"
    stages: list = field(default_factory=lambda: list(STAGES))
    rg: dict = field(default_factory=lambda: {"beta": 32.0, "paths": 4096, "final_paths": 16384, "scrambles": 4})
    weights: dict = field(default_factory=lambda: {"max_blocks": 2, "probes": 4})
    scaling: dict = field(default_factory=lambda: {"N_list": [1, 2], "mode": None, "amplitude": 1.0,
                                                   "component": 0})

    _types = {"seed": int, "d": int, "m": int, "L": int, "N": int, "potential": dict, "beta": (int, float),
              "mode": str, "F_grid": list, "fd_step": (int, float), "samples": int, "replicates": int,
              "chunk": int, "threads": int, "out": str, "stages": list, "rg": dict, "weights": dict,
              "scaling": dict}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if "seed" not in data:
            raise PreconditionError("config: seed is mandatory")
        unknown = set(data) - set(cls._types)
        if unknown:
            raise PreconditionError(f"config: unknown keys {sorted(unknown)}")
        for k, v in data.items():
            if isinstance(v, bool) or not isinstance(v, cls._types[k]):
                raise PreconditionError(f"config: {k} has type {type(v).__name__}")
        base = cls(seed=data["seed"])
        merged = {}
        for k, v in data.items():
            if isinstance(v, dict) and k != "potential":
                merged[k] = {**getattr(base, k), **v}
            else:
                merged[k] = v
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise PreconditionError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise PreconditionError("config must be a JSON object")
        return cls.from_dict(data)

    def validate(self) -> None:
        if not 0 <= self.seed < 2 ** 64:
            raise PreconditionError("seed must be a u64")
        if self.d < 1 or self.m < 1 or self.N < 1 or self.L < 3 or self.L % 2 == 0:
            raise PreconditionError("need d, m, N >= 1 and odd L >= 3")
        if self.beta < 1:
            raise PreconditionError("beta must be >= 1")
        if self.mode not in ("gradient", "elasticity"):
            raise PreconditionError(f"unknown mode {self.mode!r}")
        if self.mode == "elasticity" and not (self.d == self.m):
            raise PreconditionError("elasticity mode needs m = d")
        if self.samples < 2 or self.replicates < 2 or self.chunk < 1 or self.threads < 1:
            raise PreconditionError("samples, replicates >= 2 and chunk, threads >= 1")
        if not self.F_grid:
            self.F_grid = [[0.0] * (self.m * self.d)]
        for F in self.F_grid:
            if len(F) != self.m * self.d:
                raise PreconditionError("each F in F_grid needs m*d entries (row-major m x d)")
        bad = set(self.stages) - set(STAGES)
        if bad:
            raise PreconditionError(f"unknown stages {sorted(bad)}")
        if self.potential.get("name") not in POTENTIALS:
            raise PreconditionError(f"potential name must be one of {POTENTIALS}")

    def canonical(self) -> dict:
        """Everything that determines the results (output path and worker count excluded)."""
        d = dataclasses.asdict(self)
        d.pop("out")
        d.pop("threads")
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def torus(self, N: Optional[int] = None) -> TorusGeometry:
        return TorusGeometry(self.d, self.L, self.N if N is None else N, self.m)


def make_potential(cfg: ExperimentConfig) -> Potential:
    p = dict(cfg.potential)
    name = p.pop("name")
    if name == "springs":
        from .elasticity import spring_potential

        if cfg.d != 2 or cfg.m != 2:
            raise PreconditionError("spring potential is two dimensional")
        sp = spring_potential(2, **p)
        ident = sp.identity
        pot = lift_potential(lambda psi: sp(psi + ident), 2, 2, 1)
        pot.name = "springs"
        return pot
    space = GradientSpace.nearest_neighbour(cfg.d, cfg.m)
    if name == "quadratic":
        Q = p.get("Q")
        return quadratic_potential(space, None if Q is None else np.asarray(Q, float))
    if name == "quartic":
        return quartic_potential(space, float(p.get("g", 1.0)))
    if name == "double-well":
        return double_well_potential(space, float(p.get("c", 0.5)))
    raise PreconditionError(f"unknown potential {name!r}")


def F_matrix(F, m: int, d: int) -> np.ndarray:
    return np.asarray(F, float).reshape(m, d)


# ---------------------------------------------------------------------------
# Gaussian terms


def gaussian_logdet_term(Q, q, torus: TorusGeometry, space: Optional[GradientSpace] = None) -> float:
    """L^{-Nd} 1/2 sum_{p != 0} [log det A^{(q)}(p) - log det A^{(0)}(p)]; the |p|^2 factors cancel."""
    try:
        s1 = build_symbol(Q, q, torus, space)
        s0 = build_symbol(Q, None, torus, space)
    except ValueError as e:
        raise PreconditionError(str(e)) from e
    w1 = s1.eig[0].reshape(-1, torus.m)[1:]
    w0 = s0.eig[0].reshape(-1, torus.m)[1:]
    return float(0.5 * np.sum(np.log(w1) - np.log(w0)) / torus.volume)


def gaussian_log_normalizer(Q, torus: TorusGeometry, space: Optional[GradientSpace] = None, beta: float = 1.0,
                            q=None) -> float:
    """log of the integral of exp(-beta/2 sum_x Q(D phi(x))) over zero-average fields (orthonormal Lebesgue)."""
    try:
        sym = build_symbol(Q, q, torus, space)
    except ValueError as e:
        raise PreconditionError(str(e)) from e
    w = sym.eig[0].reshape(-1, torus.m)[1:]
    dim = w.size
    return float(0.5 * dim * math.log(2 * math.pi / beta) - 0.5 * np.sum(np.log(w)))


def gaussian_constant(Q, torus: TorusGeometry, space: Optional[GradientSpace], beta: float) -> float:
    """-(beta L^{Nd})^{-1} log Z^Q_{N,beta}, the F-independent part of W_{N,beta}."""
    return -gaussian_log_normalizer(Q, torus, space, beta) / (beta * torus.volume)


# ---------------------------------------------------------------------------
# Monte Carlo engine


def _replicate_means(fn: Callable[[np.ndarray], np.ndarray], fld: GaussianField, seed: int, stream: int,
                     samples: int, replicates: int, chunk: int, threads: int = 1) -> np.ndarray:
    """Per-replicate antithetic sample means of fn (phi -> (B, k)); shape (replicates, k).

    Replicate r uses stream + r; chunks are drawn from a counter-based generator and
    reduced in a fixed order, so the result does not depend on the worker count.
    """
    tasks = [(r, c, min(chunk, samples - c * chunk)) for r in range(replicates)
             for c in range((samples + chunk - 1) // chunk)]

    def run(task):
        r, c, count = task
        phi = fld.samples(seed, stream + r, c, count)
        return r, np.sum(0.5 * (fn(phi) + fn(-phi)), axis=0)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, tasks))
    else:
        parts = [run(t) for t in tasks]
    out = None
    for r, v in parts:
        if out is None:
            out = np.zeros((replicates,) + np.shape(v))
        out[r] += v
    return out / samples


def _site_sum(vals: np.ndarray, d: int) -> np.ndarray:
    return vals.reshape(vals.shape[: vals.ndim - d] + (-1,)).sum(axis=-1)


def reference_field(pot: Potential, torus: TorusGeometry) -> tuple[GaussianField, np.ndarray]:
    """The Gaussian measure mu (beta = 1 after rescaling) of the quadratic part Q_U = D^2 U(0)."""
    Q = pot.quadratic_form().matrix
    try:
        sym = build_symbol(Q, None, torus, pot.space)
    except ValueError as e:
        raise PreconditionError(f"Q_U not positive on nonzero momenta: {e}") from e
    return GaussianField(covariance(sym)), Q


def log_product_mean(kappa: MayerFunction, torus: TorusGeometry, fld: GaussianField, seed: int, stream: int,
                     samples: int, replicates: int, chunk: int, threads: int = 1) -> dict:
    """log E_mu prod_x (1 + K(D phi(x))) with the integrand evaluated directly (no polymer sum)."""
    I = list(kappa.space.I)
    d = torus.d

    def fn(phi):
        e = _site_sum(np.minimum(kappa.exponent(torus.extended_gradient(phi, I)), 700.0), d)
        return np.exp(np.minimum(e, 700.0))[:, None]

    means = _replicate_means(fn, fld, seed, stream, samples, replicates, chunk, threads)[:, 0]
    M = float(np.mean(means))
    if not M > 0 or not math.isfinite(M):
        raise RuntimeError("perturbative Monte Carlo failed (non-positive or overflowing mean)")
    se = float(np.std(means, ddof=1) / math.sqrt(replicates)) / M
    reps = np.log(np.maximum(means, 1e-300))
    return {"log_Z": math.log(M), "se": se, "replicates": reps}


def perturbative_quadrature(kappa: MayerFunction, torus: TorusGeometry, fld: GaussianField, order: int = 6,
                            chunk: int = 1 << 14) -> float:
    """Full-dimensional tensor Gauss-Hermite value of E_mu prod_x (1 + K(D phi(x)))."""
    I = list(kappa.space.I)
    tot = 0.0
    for xi, w in fld.quadrature_nodes(order, chunk):
        e = _site_sum(kappa.exponent(torus.extended_gradient(xi, I)), torus.d)
        tot += float(np.dot(w, np.exp(e)))
    return tot


# ---------------------------------------------------------------------------
# free energy and convexity


def _W_values(cfg: ExperimentConfig, pot: Potential, Fs: Sequence[np.ndarray], torus: TorusGeometry,
              fld: GaussianField, Q: np.ndarray) -> list[dict]:
    V = torus.volume
    beta = float(cfg.beta)
    const = gaussian_constant(Q, torus, pot.space, beta)
    out = []
    for F in Fs:
        F = F_matrix(F, cfg.m, cfg.d)
        UF = float(pot(pot.space.lift_F(F)))
        kappa = MayerFunction(pot, beta, F)
        if pot.name == "quadratic":
            lz, se, reps, sat = 0.0, 0.0, np.zeros(cfg.replicates), False
        else:
            # common random numbers across F: the same stream for every grid point
            r = log_product_mean(kappa, torus, fld, cfg.seed, 11, cfg.samples, cfg.replicates, cfg.chunk,
                                 cfg.threads)
            lz, se, reps, sat = r["log_Z"], r["se"], r["replicates"], kappa.saturated
        Wp = -lz / V
        out.append({"F": F.ravel().tolist(), "U_Fbar": UF, "W_pert": Wp, "W_pert_se": se / V,
                    "gaussian_constant": const, "W": UF + Wp / beta + const, "W_se": se / (V * beta),
                    "W_replicates": (UF - reps / V / beta + const), "saturated": bool(sat)})
    return out


def free_energy(cfg: ExperimentConfig, Fs: Optional[Sequence] = None) -> dict:
    """W_{N,beta}(F) = U(F_bar) + W_pert(F)/beta - (beta L^{Nd})^{-1} log Z^{Q_U} on the F grid."""
    pot = make_potential(cfg)
    torus = cfg.torus()
    fld, Q = reference_field(pot, torus)
    Fs = cfg.F_grid if Fs is None else Fs
    rows = _W_values(cfg, pot, Fs, torus, fld, Q)
    for r in rows:
        r.pop("W_replicates")
    return {"rows": rows, "gaussian_constant": rows[0]["gaussian_constant"] if rows else None,
            "log_Z_QU": gaussian_log_normalizer(Q, torus, pot.space, cfg.beta)}


def hessian_directions(cfg: ExperimentConfig) -> list[np.ndarray]:
    m, d = cfg.m, cfg.d
    if cfg.mode == "elasticity":
        dirs = []
        for i in range(d):
            for j in range(i, d):
                E = np.zeros((m, d))
                if i == j:
                    E[i, i] = 1.0
                else:
                    E[i, j] = E[j, i] = 1.0 / math.sqrt(2)
                dirs.append(E)
        return dirs
    return [np.eye(m * d)[a].reshape(m, d) for a in range(m * d)]


def convexity_scan(cfg: ExperimentConfig) -> dict:
    """Finite-difference Hessians of W over the F grid with replicate error bars.

    Verdict "convex at resolution" if min-eig - 3 sigma > 0 at every grid point,
    "nonconvex at resolution" if min-eig + 3 sigma < 0 somewhere, otherwise "inconclusive".
    """
    pot = make_potential(cfg)
    torus = cfg.torus()
    fld, Q = reference_field(pot, torus)
    dirs = hessian_directions(cfg)
    h = float(cfg.fd_step)
    nd = len(dirs)
    points = []
    for F in cfg.F_grid:
        F0 = F_matrix(F, cfg.m, cfg.d)
        stencil = [F0]
        for a in range(nd):
            stencil += [F0 + h * dirs[a], F0 - h * dirs[a]]
        for a in range(nd):
            for b in range(a + 1, nd):
                for sa, sb in product((1, -1), repeat=2):
                    stencil.append(F0 + h * (sa * dirs[a] + sb * dirs[b]))
        vals = _W_values(cfg, pot, stencil, torus, fld, Q)
        W = np.array([v["W"] for v in vals])
        Wr = np.array([v["W_replicates"] for v in vals])  # (stencil, R)

        def hess(w):
            H = np.zeros((nd, nd) + w.shape[1:])
            for a in range(nd):
                H[a, a] = (w[1 + 2 * a] - 2 * w[0] + w[2 + 2 * a]) / h ** 2
            pos = 1 + 2 * nd
            for a in range(nd):
                for b in range(a + 1, nd):
                    pp, pm, mp, mm = w[pos:pos + 4]
                    H[a, b] = H[b, a] = (pp - pm - mp + mm) / (4 * h ** 2)
                    pos += 4
            return H

        H = hess(W)
        Hr = np.moveaxis(hess(Wr), -1, 0)
        lam = float(np.linalg.eigvalsh(H)[0])
        lam_r = np.array([np.linalg.eigvalsh(0.5 * (M + M.T))[0] for M in Hr])
        sigma = float(np.std(lam_r, ddof=1) / math.sqrt(len(lam_r))) if pot.name != "quadratic" else 0.0
        points.append({"F": F0.ravel().tolist(), "hessian": H.tolist(), "min_eig": lam, "sigma": sigma,
                       "saturated": any(v["saturated"] for v in vals)})
    lo = [p["min_eig"] - 3 * p["sigma"] for p in points]
    hi = [p["min_eig"] + 3 * p["sigma"] for p in points]
    if all(x > 0 for x in lo):
        verdict = "convex at resolution"
    elif any(x < 0 for x in hi):
        verdict = "nonconvex at resolution"
    else:
        verdict = "inconclusive"
    return {"points": points, "verdict": verdict, "directions": [E.ravel().tolist() for E in dirs], "step": h}


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def frame_indifference_scan(cfg: ExperimentConfig, F, angles: Sequence[float]) -> dict:
    """W(R(1 + F) - 1) against W(F) for rotations R (elasticity mode, d = m = 2)."""
    if cfg.mode != "elasticity" or cfg.d != 2:
        raise PreconditionError("frame indifference needs elasticity mode with d = 2")
    pot = make_potential(cfg)
    torus = cfg.torus()
    fld, Q = reference_field(pot, torus)
    F0 = F_matrix(F, 2, 2)
    Fs = [F0] + [rotation(a) @ (np.eye(2) + F0) - np.eye(2) for a in angles]
    vals = _W_values(cfg, pot, Fs, torus, fld, Q)
    rows = []
    for a, v in zip(angles, vals[1:]):
        diff = v["W_replicates"] - vals[0]["W_replicates"]
        se = float(np.std(diff, ddof=1) / math.sqrt(diff.size))
        delta = v["W"] - vals[0]["W"]
        rows.append({"angle": float(a), "W": v["W"], "delta": delta, "se": se,
                     "z": abs(delta) / se if se > 0 else (0.0 if delta == 0 else math.inf)})
    return {"W_F": vals[0]["W"], "rows": rows}


# ---------------------------------------------------------------------------
# scaling limit


def mode_function(k: Sequence[int], m: int = 1, component: int = 0, amplitude: float = 1.0) -> Callable:
    """x -> amplitude cos(2 pi k.x) e_component on (R/Z)^d."""
    k = np.asarray(k, float)

    def f(x):
        x = np.asarray(x, float)
        out = np.zeros(x.shape[:-1] + (m,))
        out[..., component] = amplitude * np.cos(2 * math.pi * (x @ k))
        return out

    f.mode = k
    f.amplitude = amplitude
    return f


def rescaled_field(f: Callable, torus: TorusGeometry) -> np.ndarray:
    """f_N(x) = L^{-N(d+2)/2} f(L^{-N} x) on the torus sites."""
    n = torus.n
    return n ** (-(torus.d + 2) / 2) * f(torus.coords / n)


def _grad_Q(Q: np.ndarray, q, space: GradientSpace) -> np.ndarray:
    pos = space.gradient_positions
    M = np.asarray(Q, float)[np.ix_(pos, pos)]
    return M if q is None else M - np.asarray(q, float)


def discrete_prediction(fN: np.ndarray, Q, q, torus: TorusGeometry, space: GradientSpace, beta: float = 1.0) -> float:
    """1/2 (f_N, C^{(q)} f_N) / beta, exact in Fourier space."""
    try:
        C = covariance(build_symbol(Q, q, torus, space))
    except ValueError as e:
        raise PreconditionError(str(e)) from e
    return float(0.5 * np.sum(fN * C.apply(fN)) / beta)


def continuum_prediction(f: Callable, Q, q, space: GradientSpace, beta: float = 1.0, grid: int = 32) -> float:
    """1/2 (f, C f) / beta with C the inverse of -sum (Q - q)_{ij;st} d_i d_j on mean-zero functions.

    f is sampled on a grid^d mesh; exact for trigonometric polynomials of degree < grid/2.
    """
    d, m = space.d, space.m
    axes = [np.arange(grid) / grid] * d
    x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    fx = f(x)
    fh = np.fft.fftn(fx, axes=tuple(range(d))) / grid ** d
    k = np.stack(np.meshgrid(*([np.fft.fftfreq(grid, 1.0 / grid)] * d), indexing="ij"), axis=-1)
    G = _grad_Q(Q, q, space).reshape(d, m, d, m)  # index (direction, component)
    A = (2 * math.pi) ** 2 * np.einsum("...i,...j,isjt->...st", k, k, G)
    A = A.reshape(-1, m, m)
    fh = fh.reshape(-1, m)
    tot = 0.0
    for a in range(1, A.shape[0]):
        if np.any(np.abs(fh[a]) > 0):
            tot += float(np.real(np.conj(fh[a]) @ np.linalg.solve(A[a], fh[a])))
    return 0.5 * tot / beta


def derivative_bound_ratios(f: Callable, torus: TorusGeometry, max_order: int = 3) -> dict:
    """max_x |grad^alpha f_N| L^{N(d+2)/2} L^{N|alpha|} / sup |d^alpha f| for cosine modes."""
    fN = rescaled_field(f, torus)
    n = torus.n
    kvec = np.asarray(getattr(f, "mode"), float)
    amp = abs(getattr(f, "amplitude", 1.0))
    out = {}
    for alpha in multi_indices(torus.d, 1, max_order):
        sup = amp * np.prod([(2 * math.pi * abs(kv)) ** a for kv, a in zip(kvec, alpha)])
        if sup == 0:
            continue
        val = float(np.max(np.abs(torus.diff(fN, alpha))))
        out[str(tuple(alpha))] = val * n ** ((torus.d + 2) / 2) * n ** sum(alpha) / sup
    return out


def log_mgf(cfg: ExperimentConfig, f: Callable, N: int, stream: int = 21) -> dict:
    """log E_gamma exp((f_N, phi)) by Monte Carlo as a ratio of two expectations under mu."""
    pot = make_potential(cfg)
    torus = cfg.torus(N)
    fld, Q = reference_field(pot, torus)
    fN = rescaled_field(f, torus)
    beta = float(cfg.beta)
    kappa = MayerFunction(pot, beta)
    I = list(pot.space.I)
    zero = pot.name == "quadratic"
    axes = tuple(range(1, torus.d + 2))

    def fn(phi):
        s = np.sum(phi * fN, axis=axes) / math.sqrt(beta)
        e = np.zeros(phi.shape[0]) if zero else _site_sum(kappa.exponent(torus.extended_gradient(phi, I)), torus.d)
        w = np.exp(np.minimum(e, 700.0))
        return np.stack([w * np.exp(s), w], axis=-1)

    means = _replicate_means(fn, fld, cfg.seed, stream, cfg.samples, cfg.replicates, cfg.chunk, cfg.threads)
    reps = np.log(means[:, 0]) - np.log(means[:, 1])
    est = float(math.log(np.mean(means[:, 0])) - math.log(np.mean(means[:, 1])))
    se = float(np.std(reps, ddof=1) / math.sqrt(reps.size))
    return {"log_mgf": est, "se": se, "prediction_q0": discrete_prediction(fN, Q, None, torus, pot.space, beta)}


def scaling_limit(cfg: ExperimentConfig, f: Optional[Callable] = None, N_list: Optional[Sequence[int]] = None,
                  q_hat=None, monte_carlo: bool = True) -> dict:
    """Per N: Monte Carlo log-MGF against the discrete Gaussian prediction and the continuum value."""
    sc = cfg.scaling
    if f is None:
        mode = sc.get("mode") or [1] + [0] * (cfg.d - 1)
        f = mode_function(mode, cfg.m, int(sc.get("component", 0)), float(sc.get("amplitude", 1.0)))
    N_list = list(sc.get("N_list", [1, 2]) if N_list is None else N_list)
    pot = make_potential(cfg)
    Q = pot.quadratic_form().matrix
    beta = float(cfg.beta)
    cont = continuum_prediction(f, Q, None, pot.space, beta)
    cont_q = None if q_hat is None else continuum_prediction(f, Q, q_hat, pot.space, beta)
    rows = []
    for N in N_list:
        torus = cfg.torus(N)
        fN = rescaled_field(f, torus)
        pred = discrete_prediction(fN, Q, None, torus, pot.space, beta)
        row = {"N": N, "prediction_q0": pred, "continuum": cont, "gap": abs(pred - cont),
               "derivative_ratios": derivative_bound_ratios(f, torus) if hasattr(f, "mode") else {}}
        if q_hat is not None:
            row["prediction_qhat"] = discrete_prediction(fN, Q, q_hat, torus, pot.space, beta)
            row["continuum_qhat"] = cont_q
        if monte_carlo:
            mc = log_mgf(cfg, f, N)
            row.update({"log_mgf": mc["log_mgf"], "log_mgf_se": mc["se"],
                        "z": abs(mc["log_mgf"] - pred) / mc["se"] if mc["se"] > 0 else
                        (0.0 if mc["log_mgf"] == pred else math.inf)})
        rows.append(row)
    gaps = [r["gap"] for r in rows]
    return {"rows": rows, "continuum": cont, "gap_decreasing": bool(all(b < a for a, b in zip(gaps, gaps[1:])))}


# ---------------------------------------------------------------------------
# pipeline


def _plain(x):
    """JSON-ready copy: numpy scalars and arrays to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if x is None or isinstance(x, str):
        return x
    return repr(x)


def stage_frd(cfg: ExperimentConfig) -> dict:
    pot = make_potential(cfg)
    torus = cfg.torus()
    fr = build_frd(build_symbol(pot.quadratic_form().matrix, None, torus, pot.space))
    return {"telescoping_error": telescoping_error(fr), "range_violations": range_violations(fr),
            "min_eigenvalue": frd_min_eigenvalue(fr), "slices": fr.n_slices}


def stage_weights(cfg: ExperimentConfig) -> dict:
    from .weights import recipe_params, verify_weight_properties, weight_recursion

    pot = make_potential(cfg)
    torus = cfg.torus()
    fr = build_frd(build_symbol(pot.quadratic_form().matrix, None, torus, pot.space))
    params, info = recipe_params(fr, R0=pot.space.R0)
    fam = weight_recursion(fr, params)
    rep = verify_weight_properties(fam, max_blocks=int(cfg.weights.get("max_blocks", 2)),
                                   probes=int(cfg.weights.get("probes", 4)), seed=cfg.seed)
    return {"params": {k: v for k, v in dataclasses.asdict(params).items()}, "checks": rep}


def stage_rg(cfg: ExperimentConfig) -> dict:
    from .rg import FineTuneConfig, fine_tune, gradient_product_expectation

    pot = make_potential(cfg)
    torus = cfg.torus()
    beta = float(cfg.rg.get("beta", cfg.beta))
    kappa = MayerFunction(pot, beta)
    Q = pot.quadratic_form().matrix
    lhs = None
    if cfg.d == 1 and cfg.m == 1 and pot.space.I == ((1,),):
        lhs = gradient_product_expectation(lambda z: 1.0 + kappa(z[..., None]), torus, float(Q[0, 0]))
    ft_keys = {f.name for f in dataclasses.fields(FineTuneConfig)} - {"backend", "seed"}
    ft = FineTuneConfig(seed=cfg.seed % (2 ** 32), **{k: v for k, v in cfg.rg.items() if k in ft_keys})
    res = fine_tune(kappa, torus, pot.space, Q, ft, R0=pot.space.R0, lhs=lhs,
                    kappa_is_zero=pot.name == "quadratic")
    from .rg import geometric_rate

    return {"calH": res.calH.to_vector().tolist(), "q_hat": np.asarray(res.q_hat).tolist(), "e_hat": res.e_hat,
            "inner_residuals": res.inner_residuals, "inner_rate": geometric_rate(res.inner_residuals, ft.inner_tol),
            "outer_gaps": [t["gap"] for t in res.outer_trace], "representation": res.representation,
            "beta": beta}


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """All requested stages in order; a failing stage is recorded and the others still run."""
    from .gaussian import IntegrationError

    report = {"schema_version": SCHEMA_VERSION, "config": cfg.canonical(), "config_hash": cfg.config_hash(),
              "seed": cfg.seed, "stages": {}}
    q_hat = None
    for name in STAGES:
        if name not in cfg.stages:
            report["stages"][name] = {"status": "skipped"}
            continue
        try:
            if name == "frd":
                res = stage_frd(cfg)
            elif name == "weights":
                res = stage_weights(cfg)
            elif name == "rg":
                res = stage_rg(cfg)
                q_hat = np.asarray(res["q_hat"])
            elif name == "free_energy":
                res = free_energy(cfg)
            elif name == "convexity":
                res = convexity_scan(cfg)
            else:
                res = scaling_limit(cfg, q_hat=q_hat)
            report["stages"][name] = {"status": "ok", "result": res}
        except (PreconditionError, ValueError) as e:
            report["stages"][name] = {"status": "failed", "kind": "precondition", "error": str(e)}
        except (RuntimeError, IntegrationError, np.linalg.LinAlgError, FloatingPointError) as e:
            report["stages"][name] = {"status": "failed", "kind": "numerical", "error": str(e)}
    return _plain(report)


def report_json(report: dict) -> str:
    return json.dumps(_plain(report), sort_keys=True, indent=1, ensure_ascii=True) + "\n"


def _flatten(obj, prefix: str, rows: list, stage: str) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            if k.endswith("_se") and k[:-3] in obj:
                continue
            v = obj[k]
            path = f"{prefix}.{k}" if prefix else k
            if isinstance(v, (dict, list)):
                _flatten(v, path, rows, stage)
            else:
                se = obj.get(f"{k}_se", "")
                rows.append((SCHEMA_VERSION, stage, path, "", v, se))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            if isinstance(v, (dict, list)):
                _flatten(v, f"{prefix}[{i}]", rows, stage)
            else:
                rows.append((SCHEMA_VERSION, stage, prefix, i, v, ""))


def report_csv(report: dict) -> str:
    rows: list = []
    for stage in STAGES:
        st = report["stages"].get(stage, {})
        rows.append((SCHEMA_VERSION, stage, "status", "", st.get("status", "skipped"), ""))
        if "result" in st:
            _flatten(st["result"], "", rows, stage)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def write_report(report: dict, out: str | Path, name: str = "report") -> tuple[Path, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pj, pc = out / f"{name}.json", out / f"{name}.csv"
    pj.write_text(report_json(report))
    pc.write_text(report_csv(report))
    return pj, pc
