"""Blocks, polymers, neighbourhoods, the reblocking map pi and polymer combinatorics.

k-blocks are indexed by block coordinates c in (Z / L^{N-k})^d; block c covers the
sites c L^k + [-(L^k - 1)/2, (L^k - 1)/2]^d.  Site sets built from polymers
(neighbourhoods) are kept as unions of boxes so that huge L stays cheap.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import product
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

Block = tuple


@dataclass(frozen=True)
class GeometryParams:
    d: int
    L: int
    N: int
    R0: int = 1

    def __post_init__(self):
        if self.L < 3 or self.L % 2 == 0:
            raise ValueError("L must be odd and >= 3")

    @property
    def R(self) -> int:
        return max(self.R0, 2 * (self.d // 2) + 3)

    @property
    def n(self) -> int:
        return self.L ** self.N

    def nb(self, k: int) -> int:
        return self.L ** (self.N - k)

    def side(self, k: int) -> int:
        return self.L ** k

    def wrap(self, c: Sequence[int], k: int) -> Block:
        nb = self.nb(k)
        return tuple(int(x) % nb for x in c)

    @property
    def thresholds(self) -> dict:
        d, R = self.d, self.R
        return {"pi_inclusion": 2 ** d + R, "factorization": 2 ** (d + 2) + 4 * R,
                "ustar_blocks": 4 * d * (2 ** d + R), "weights": 2 ** (d + 3) + 16 * R}

    def satisfies(self, name: str) -> bool:
        return self.L >= self.thresholds[name]


@dataclass(frozen=True, order=True)
class Polymer:
    k: int
    blocks: tuple  # sorted wrapped block coordinates

    @classmethod
    def make(cls, k: int, blocks: Iterable[Sequence[int]], geo: GeometryParams) -> "Polymer":
        return cls(k, tuple(sorted({geo.wrap(b, k) for b in blocks})))

    @property
    def size(self) -> int:
        return len(self.blocks)

    def __len__(self):
        return len(self.blocks)

    def __bool__(self):
        return bool(self.blocks)

    def union(self, other: "Polymer") -> "Polymer":
        if other.k != self.k:
            raise ValueError("scale mismatch")
        return Polymer(self.k, tuple(sorted(set(self.blocks) | set(other.blocks))))

    def translate(self, a: Sequence[int], geo: GeometryParams) -> "Polymer":
        """Translate by a (in k-block units)."""
        return Polymer.make(self.k, [tuple(c + s for c, s in zip(b, a)) for b in self.blocks], geo)


@lru_cache(maxsize=None)
def neighbour_offsets(d: int) -> tuple:
    return tuple(o for o in product((-1, 0, 1), repeat=d) if any(o))


def block_distance(a: Block, b: Block, nb: int) -> int:
    """l_inf distance between block coordinates on the block torus."""
    out = 0
    for x, y in zip(a, b):
        t = abs(x - y) % nb
        out = max(out, min(t, nb - t))
    return out


def _adjacent(a: Block, b: Block, nb: int) -> bool:
    return block_distance(a, b, nb) <= 1


def connected_components(X: Polymer, geo: GeometryParams) -> list:
    """Maximal l_inf-connected components, sorted by their least block."""
    nb = geo.nb(X.k)
    blocks = list(X.blocks)
    parent = list(range(len(blocks)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            if _adjacent(blocks[i], blocks[j], nb):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i, b in enumerate(blocks):
        groups.setdefault(find(i), []).append(b)
    return sorted(Polymer(X.k, tuple(sorted(g))) for g in groups.values())


def is_connected(X: Polymer, geo: GeometryParams) -> bool:
    return len(connected_components(X, geo)) <= 1


def is_small(X: Polymer, geo: GeometryParams) -> bool:
    return is_connected(X, geo) and X.size <= 2 ** geo.d


def strictly_disjoint(X: Polymer, Y: Polymer, geo: GeometryParams) -> bool:
    return not is_connected(X.union(Y), geo)


def parent_block(c: Block, k: int, geo: GeometryParams) -> Block:
    """The (k+1)-block containing the k-block c."""
    h = (geo.L - 1) // 2
    return geo.wrap([(x + h) // geo.L for x in c], k + 1)


def closure(X: Polymer, geo: GeometryParams) -> Polymer:
    return Polymer.make(X.k + 1, [parent_block(c, X.k, geo) for c in X.blocks], geo)


def unwrap(Y: Polymer, geo: GeometryParams, root: Block | None = None) -> dict:
    """Connected preimage of a connected polymer: wrapped block -> unwrapped coordinates."""
    nb = geo.nb(Y.k)
    members = set(Y.blocks)
    root = Y.blocks[0] if root is None else root
    out = {root: tuple(root)}
    queue = [root]
    offs = neighbour_offsets(geo.d)
    while queue:
        b = queue.pop(0)
        u = out[b]
        for o in offs:
            w = tuple((x + s) % nb for x, s in zip(b, o))
            if w in members and w not in out:
                out[w] = tuple(x + s for x, s in zip(u, o))
                queue.append(w)
    return out


def least_block(Y: Polymer, geo: GeometryParams) -> Block:
    """Block whose unwrapped centre is lexicographically first in a connected preimage."""
    cands = set()
    for r in Y.blocks:
        uw = unwrap(Y, geo, r)
        cands.add(min(uw, key=lambda b: uw[b]))
    if len(cands) == 1:
        return cands.pop()
    # only when Y wraps around a tiny torus
    return min(cands, key=lambda b: (tuple(x % geo.L for x in b), b))


def pi_tilde(Y: Polymer, geo: GeometryParams) -> Polymer:
    if not Y:
        return Polymer(Y.k + 1, ())
    if Y.size > 2 ** geo.d:
        return closure(Y, geo)
    return Polymer(Y.k + 1, (parent_block(least_block(Y, geo), Y.k, geo),))


def pi_map(X: Polymer, geo: GeometryParams) -> Polymer:
    if X.k > geo.N - 1:
        raise ValueError("pi needs k <= N - 1")
    out = Polymer(X.k + 1, ())
    for Y in connected_components(X, geo):
        out = out.union(pi_tilde(Y, geo))
    return out


# ---------------------------------------------------------------------------
# box unions on the site torus


@dataclass(frozen=True)
class Region:
    """Union of boxes [lo, hi] (inclusive, unwrapped) on (Z / n)^d."""
    d: int
    n: int
    boxes: tuple

    @classmethod
    def empty(cls, d: int, n: int) -> "Region":
        return cls(d, n, ())

    @classmethod
    def from_polymer(cls, X: Polymer, geo: GeometryParams) -> "Region":
        s = geo.side(X.k)
        h = (s - 1) // 2
        boxes = tuple((tuple(c * s - h for c in b), tuple(c * s + h for c in b)) for b in X.blocks)
        return cls(geo.d, geo.n, boxes)

    def dilate(self, r: int) -> "Region":
        return Region(self.d, self.n, tuple((tuple(a - r for a in lo), tuple(b + r for b in hi))
                                            for lo, hi in self.boxes))

    def union(self, other: "Region") -> "Region":
        return Region(self.d, self.n, self.boxes + other.boxes)

    def _axis_pieces(self, lo: int, hi: int) -> list:
        n = self.n
        if hi - lo + 1 >= n:
            return [(0, n - 1)]
        a, b = lo % n, hi % n
        return [(a, b)] if a <= b else [(a, n - 1), (0, b)]

    @cached_property
    def pieces(self) -> list:
        out = []
        for lo, hi in self.boxes:
            axes = [self._axis_pieces(a, b) for a, b in zip(lo, hi)]
            for combo in product(*axes):
                out.append(combo)
        return out

    def _grid(self, others: Sequence["Region"]):
        regs = [self] + list(others)
        cuts = []
        for ax in range(self.d):
            pts = {0, self.n}
            for r in regs:
                for p in r.pieces:
                    pts.add(p[ax][0])
                    pts.add(p[ax][1] + 1)
            cuts.append(np.array(sorted(pts)))
        shape = tuple(len(c) - 1 for c in cuts)
        masks = []
        for r in regs:
            m = np.zeros(shape, dtype=bool)
            for p in r.pieces:
                sl = tuple(slice(int(np.searchsorted(c, a)), int(np.searchsorted(c, b + 1)))
                           for c, (a, b) in zip(cuts, p))
                m[sl] = True
            masks.append(m)
        widths = [np.diff(c) for c in cuts]
        return masks, widths

    def contains(self, other: "Region") -> bool:
        (a, b), _ = self._grid([other])
        return not np.any(b & ~a)

    def measure(self) -> int:
        (m,), widths = self._grid([])
        vol = np.ones(m.shape, dtype=object)
        for ax, w in enumerate(widths):
            shape = [1] * self.d
            shape[ax] = -1
            vol = vol * np.asarray(w, dtype=object).reshape(shape)
        return int(np.sum(vol[m]))

    def block_count(self, k: int, geo: GeometryParams) -> int:
        """Number of k-blocks in a region that is a union of k-blocks."""
        return self.measure() // geo.side(k) ** self.d

    def distance(self, other: "Region") -> int:
        """l_inf distance between the two site sets (0 if they meet)."""
        best = None
        for p in self.pieces:
            for q in other.pieces:
                g = 0
                for (a1, b1), (a2, b2) in zip(p, q):
                    if a2 <= b1 and a1 <= b2:
                        gap = 0
                    else:
                        gap = min((a2 - b1) % self.n, (a1 - b2) % self.n)
                    g = max(g, gap)
                best = g if best is None else min(best, g)
        return math.inf if best is None else best


def hat(B: Block, k: int, geo: GeometryParams) -> Region:
    r = 2 ** geo.d + geo.R if k == 0 else 2 ** geo.d * geo.L ** k
    return Region.from_polymer(Polymer(k, (tuple(B),)), geo).dilate(r)


def star(X: Polymer, geo: GeometryParams) -> Region:
    k = X.k
    if k == 0:
        r = geo.R
    elif k == 1:
        r = 2 ** geo.d + geo.R
    else:
        r = 2 ** geo.d * geo.L ** (k - 1)
    return Region.from_polymer(X, geo).dilate(r)


def plus(X: Polymer, geo: GeometryParams) -> Region:
    r = geo.R if X.k == 0 else geo.L ** X.k
    return Region.from_polymer(X, geo).dilate(r)


def neighborhoods(X: Polymer, geo: GeometryParams) -> dict:
    return {"closure": closure(X, geo) if X.k < geo.N else X, "star": star(X, geo), "plus": plus(X, geo),
            "hat": {b: hat(b, X.k, geo) for b in X.blocks}}


# ---------------------------------------------------------------------------
# enumeration


@lru_cache(maxsize=None)
def lattice_animals(d: int, max_size: int) -> tuple:
    """Connected block sets in Z^d (diagonal adjacency) with the origin as lex-least block.

    Returns a tuple indexed by size - 1 of sorted tuples of sorted coordinate tuples.
    """
    origin = (0,) * d
    offs = neighbour_offsets(d)
    levels = [{frozenset([origin])}]
    for _ in range(max_size - 1):
        nxt = set()
        for A in levels[-1]:
            for c in A:
                for o in offs:
                    w = tuple(x + s for x, s in zip(c, o))
                    if w > origin and w not in A:
                        nxt.add(A | {w})
        levels.append(nxt)
    return tuple(tuple(sorted(tuple(sorted(A)) for A in lev)) for lev in levels)


def enumerate_connected(geo: GeometryParams, k: int, max_blocks: int, offsets: str = "all") -> Iterator[Polymer]:
    """Connected k-polymers up to max_blocks, one per translation class mod (L^{k+1} Z)^d.

    Each lattice animal is placed with its least block at every offset in [0, L)^d
    ('all') or at a boundary-sensitive subset of offsets ('boundary', for large L).
    Placements that self-overlap after wrapping are skipped.
    """
    L = geo.L
    if offsets == "all" or L <= 9:
        offs1 = list(range(L))
    else:
        offs1 = sorted(set(range(4)) | set(range(L - 4, L)) | {(L - 1) // 2})
    for size, level in enumerate(lattice_animals(geo.d, max_blocks), start=1):
        for shape in level:
            for off in product(offs1, repeat=geo.d):
                X = Polymer.make(k, [tuple(a + b for a, b in zip(c, off)) for c in shape], geo)
                if X.size == size:
                    yield X


def enumerate_polymers_jsonl(geo: GeometryParams, k: int, max_blocks: int, path) -> int:
    count = 0
    with open(path, "w") as fh:
        for X in enumerate_connected(geo, k, max_blocks):
            fh.write(json.dumps({"k": X.k, "blocks": [list(b) for b in X.blocks],
                                 "small": X.size <= 2 ** geo.d}) + "\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# verification


def verify_geometry(geo: GeometryParams, k: int, max_blocks: int = 3, pair_blocks: int = 2,
                    offsets: str = "boundary") -> dict:
    """Check X* in pi(X)*, separation of strictly disjoint U's and |U*|_k <= 2 |U|_k."""
    if k + 1 > geo.N - 1:
        raise ValueError("need k + 1 <= N - 1")
    report = {"d": geo.d, "L": geo.L, "N": geo.N, "k": k, "R": geo.R, "thresholds": geo.thresholds}
    # star inclusion
    n_checked, witness = 0, None
    for X in enumerate_connected(geo, k, max_blocks, offsets):
        n_checked += 1
        if not star(pi_map(X, geo), geo).contains(star(X, geo)):
            witness = [list(b) for b in X.blocks]
            break
    report["star_inclusion"] = {"applicable": geo.satisfies("pi_inclusion"), "checked": n_checked,
                                "holds": witness is None, "witness": witness}
    # separation of strictly disjoint (k+1)-polymers
    need = geo.L ** (k + 1) / 2
    min_sep, witness, n_pairs = math.inf, None, 0
    shapes = [s for lev in lattice_animals(geo.d, pair_blocks) for s in lev]
    reach = pair_blocks + 2
    for s1 in shapes:
        U1 = Polymer.make(k + 1, s1, geo)
        S1 = star(U1, geo)
        for s2 in shapes:
            for a in product(range(-reach, reach + 1), repeat=geo.d):
                U2 = Polymer.make(k + 1, [tuple(x + y for x, y in zip(c, a)) for c in s2], geo)
                if set(U1.blocks) & set(U2.blocks) or not strictly_disjoint(U1, U2, geo):
                    continue
                n_pairs += 1
                dist = S1.distance(star(U2, geo))
                if dist < min_sep:
                    min_sep = dist
                if dist < need and witness is None:
                    witness = [[list(b) for b in U1.blocks], [list(b) for b in U2.blocks]]
    report["separation"] = {"applicable": geo.satisfies("factorization"), "checked": n_pairs,
                            "min_distance": min_sep, "required": need, "holds": witness is None,
                            "witness": witness}
    # star block counts, k >= 1
    if k >= 1:
        worst, witness, cnt = 0.0, None, 0
        for U in enumerate_connected(geo, k + 1, max_blocks, offsets):
            cnt += 1
            ratio = star(U, geo).block_count(k, geo) / (U.size * geo.L ** geo.d)
            worst = max(worst, ratio)
            if ratio > 2 and witness is None:
                witness = [list(b) for b in U.blocks]
        report["ustar_blocks"] = {"applicable": geo.satisfies("ustar_blocks"), "checked": cnt,
                                  "max_ratio": worst, "holds": witness is None, "witness": witness}
        B = Polymer(k, ((0,) * geo.d,))
        report["hat_size"] = {"value": hat(B.blocks[0], k, geo).block_count(k, geo),
                              "expected": (2 ** (geo.d + 1) + 1) ** geo.d}
    report["all_hold"] = all(v["holds"] for key, v in report.items()
                             if isinstance(v, dict) and "holds" in v and v.get("applicable", True))
    return report


def alpha_app1(d: int) -> float:
    return 1.0 / ((1 + 2 ** d) * (1 + 6 ** d))


def combinatorial_bounds(geo: GeometryParams, k: int, max_blocks: int = 6) -> dict:
    """Verify |X|_k >= (1 + 2 alpha) |pi(X)|_{k+1} and find the largest delta with
    sum_{X large, pi(X) = U} delta^{|X|} <= 1 for every enumerated U."""
    a = alpha_app1(geo.d)
    partial = geo.nb(k) < 2 * max_blocks + 1
    app1_violations, n_app1 = [], 0
    by_U: dict = {}
    for X in enumerate_connected(geo, k, max_blocks):
        U = pi_map(X, geo)
        if X.size >= 2:
            n_app1 += 1
            if X.size < (1 + 2 * a) * U.size - 1e-12:
                app1_violations.append([list(b) for b in X.blocks])
        if X.size > 2 ** geo.d:
            key = _canonical(U, geo)
            by_U.setdefault(key, []).append(X.size)

    def worst_sum(delta):
        return max((sum(delta ** s for s in sizes) for sizes in by_U.values()), default=0.0)

    lo, hi = 0.0, 1.0
    if worst_sum(1.0) <= 1:
        lo = 1.0
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if worst_sum(mid) <= 1:
                lo = mid
            else:
                hi = mid
    return {"d": geo.d, "L": geo.L, "k": k, "max_blocks": max_blocks, "alpha": a,
            "app1_checked": n_app1, "app1_violations": app1_violations[:5],
            "app1_holds": not app1_violations, "delta": lo, "delta_sum": worst_sum(lo),
            "n_U": len(by_U), "cap_limited": True, "torus_too_small": partial}


def _canonical(U: Polymer, geo: GeometryParams) -> tuple:
    uw = unwrap(U, geo)
    pts = sorted(uw.values())
    base = pts[0]
    return tuple(tuple(x - y for x, y in zip(p, base)) for p in pts)
