import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgpl.polymers import (GeometryParams, Polymer, alpha_app1, closure, combinatorial_bounds,
                           connected_components, enumerate_connected, is_connected, is_small, lattice_animals,
                           parent_block, pi_map, strictly_disjoint)


def test_lattice_animal_counts():
    # king-move polyominoes: 1, 4, 20, 110 in the plane
    assert [len(l) for l in lattice_animals(2, 4)] == [1, 4, 20, 110]
    assert [len(l) for l in lattice_animals(1, 4)] == [1, 1, 1, 1]


def test_alpha_constant():
    assert alpha_app1(2) == pytest.approx(1 / 185)


def test_parent_block_centres():
    g = GeometryParams(1, 3, 3)
    assert [parent_block((c,), 0, g) for c in (-1, 0, 1, 2, 4)] == [(0,), (0,), (0,), (1,), (1,)]


def test_pi_map_small_and_large():
    g = GeometryParams(1, 3, 3)
    X = Polymer.make(0, [(0,), (1,), (2,), (3,)], g)
    assert not is_small(X, g)
    assert pi_map(X, g) == closure(X, g)
    Y = Polymer.make(0, [(0,), (1,)], g)
    assert pi_map(Y, g).size == 1


blocks = st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), min_size=1, max_size=6)


@given(blocks)
def test_components_partition(bl):
    g = GeometryParams(2, 3, 2)
    X = Polymer.make(0, bl, g)
    comps = connected_components(X, g)
    assert sorted(b for c in comps for b in c.blocks) == sorted(X.blocks)
    assert all(is_connected(c, g) for c in comps)
    for a, b in itertools.combinations(comps, 2):
        assert strictly_disjoint(a, b, g)


@given(blocks)
def test_pi_map_inside_closure(bl):
    g = GeometryParams(2, 3, 2)
    X = Polymer.make(0, bl, g)
    assert set(pi_map(X, g).blocks) <= set(closure(X, g).blocks)


def test_enumeration_one_class_per_offset():
    g = GeometryParams(1, 3, 3)
    polys = list(enumerate_connected(g, 0, 3))
    assert len(polys) == 3 * 3
    assert all(is_connected(X, g) for X in polys)


def test_combinatorial_bound_one_dimension():
    r = combinatorial_bounds(GeometryParams(1, 3, 5), 0, 6)
    assert r["app1_holds"]
    assert 0 < r["delta"] < 1 and r["delta_sum"] <= 1 + 1e-12
