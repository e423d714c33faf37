import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain, hexagon
from molflow.chem import (
    COV,
    ELEMENTS,
    SYMBOLS,
    VDW,
    VOCAB,
    WILD,
    Molecule,
    canonical_order,
    element_index,
    fingerprint,
    graph_distances,
    graph_from_edges,
    is_connected,
    kabsch_rmsd,
    perceive_bonds,
    random_rotation,
    tanimoto,
    wl_hash,
)

# Cordero covalent / Bondi vdW values, transcribed independently of the package table
REFERENCE_TABLE = {
    "C": (0.76, 1.70, 4),
    "N": (0.71, 1.55, 3),
    "O": (0.66, 1.52, 2),
    "F": (0.57, 1.47, 1),
    "S": (1.05, 1.80, 6),
    "Cl": (1.02, 1.75, 1),
    "Br": (1.20, 1.85, 1),
    "I": (1.39, 1.98, 1),
}


def test_element_table_matches_reference():
    assert VOCAB == 9 and SYMBOLS[WILD] == "*"
    for sym, (cov, vdw, val) in REFERENCE_TABLE.items():
        e = ELEMENTS[element_index(sym)]
        assert (e.covalent_radius, e.vdw_radius, e.max_valence) == (cov, vdw, val)
    assert np.all(COV > 0) and np.all(COV < VDW)
    assert ELEMENTS[WILD].max_valence is None


def test_molecule_validation():
    with pytest.raises(ValueError):
        Molecule(np.array([0, 0]), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Molecule(np.array([0]), np.array([[np.nan, 0, 0]]))
    with pytest.raises(ValueError):
        Molecule(np.array([9]), np.zeros((1, 3)))


def two_atoms(d, a="C", b="C"):
    return Molecule.from_symbols([a, b], [[0, 0, 0], [d, 0, 0]])


def test_perception_examples():
    assert perceive_bonds(two_atoms(1.52)).adj[0, 1]
    assert not perceive_bonds(two_atoms(2.5)).adj[0, 1]
    single = perceive_bonds(Molecule.from_symbols(["C"], [[0, 0, 0]]))
    assert single.edges() == []


@given(st.integers(0, 10_000))
def test_perception_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    mol = Molecule(rng.integers(0, VOCAB, 6), rng.standard_normal((6, 3)) * 1.5)
    g = perceive_bonds(mol)
    assert np.array_equal(g.adj, g.adj.T) and not g.adj.diagonal().any()
    r = random_rotation(rng)
    moved = mol.with_coords(mol.coords @ r.T + rng.standard_normal(3) * 10)
    assert np.array_equal(perceive_bonds(moved).adj, g.adj)


def test_graph_distance_examples():
    g = graph_from_edges([0, 0, 0], [(0, 1), (1, 2)])
    gd = graph_distances(g)
    assert gd.hops[0, 2] == 2 and gd.length[0, 2] == pytest.approx(3.04)
    assert gd.hops[0, 1] == 1 and gd.length[0, 1] == pytest.approx(1.52)
    g2 = graph_from_edges([0, 0], [])
    assert graph_distances(g2).hops[0, 1] == -1
    assert np.isinf(graph_distances(g2).length[0, 1])
    assert not is_connected(g2)


def test_graph_distance_tie_break_takes_shortest_length():
    # 4-ring C0-O1-C2-S3: two 2-hop paths 0->2, the one through O is shorter
    types = [element_index(s) for s in ["C", "O", "C", "S"]]
    g = graph_from_edges(types, [(0, 1), (1, 2), (2, 3), (3, 0)])
    gd = graph_distances(g)
    via_o = (0.76 + 0.66) * 2
    assert gd.hops[0, 2] == 2 and gd.length[0, 2] == pytest.approx(via_o)


def test_canonical_order_chain_all_input_orders():
    base = chain(["C", "C", "O"])
    seqs = set()
    for perm in itertools.permutations(range(3)):
        m = base.permuted(list(perm))
        order = canonical_order(m, perceive_bonds(m))
        seqs.add(tuple(m.symbols[i] for i in order))
    assert len(seqs) == 1


def test_canonical_order_single_atom():
    m = Molecule.from_symbols(["N"], [[0, 0, 0]])
    assert canonical_order(m, perceive_bonds(m)) == [0]


def test_canonical_order_ring_relabelings(rng):
    ring = hexagon(1.45)
    ring.types[2] = element_index("N")
    seqs = set()
    for _ in range(2):
        m = ring.permuted(rng.permutation(6))
        order = canonical_order(m, perceive_bonds(m))
        assert sorted(order) == list(range(6))
        seqs.add(tuple(m.symbols[i] for i in order))
    assert len(seqs) == 1


def test_canonical_order_disconnected_components_largest_first():
    coords = [[0, 0, 0], [10, 0, 0], [11.5, 0, 0], [13.0, 0.5, 0]]
    m = Molecule.from_symbols(["O", "C", "C", "C"], coords)
    order = canonical_order(m, perceive_bonds(m))
    assert order[-1] == 0 and sorted(order) == [0, 1, 2, 3]


def test_wl_hash_examples(rng):
    cco = chain(["C", "C", "O"])
    coc = chain(["C", "O", "C"])
    assert wl_hash(cco, perceive_bonds(cco)) != wl_hash(coc, perceive_bonds(coc))
    p = cco.permuted([2, 0, 1])
    assert wl_hash(p, perceive_bonds(p)) == wl_hash(cco, perceive_bonds(cco))


@given(st.integers(0, 10_000))
def test_hash_and_fingerprint_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    base = chain(["C", "C", "N", "C", "O", "S"][: rng.integers(3, 7)])
    perm = rng.permutation(len(base))
    m = base.permuted(perm)
    g0, g1 = perceive_bonds(base), perceive_bonds(m)
    assert wl_hash(m, g1) == wl_hash(base, g0)
    assert fingerprint(m, g1) == fingerprint(base, g0)


def test_tanimoto_examples():
    fp = fingerprint(hexagon(), perceive_bonds(hexagon()))
    assert tanimoto(fp, fp) == 1.0
    assert tanimoto(frozenset({1, 2}), frozenset({3})) == 0.0
    assert tanimoto(frozenset({1, 2, 3}), frozenset({2, 3, 4})) == pytest.approx(0.5)
    assert all(0 <= b < 2048 for b in fp)


def test_kabsch_examples(rng):
    a = np.array([[0.0, 0, 0], [2, 0, 0]])
    b = np.array([[0.0, 0, 0], [4, 0, 0]])
    assert kabsch_rmsd(a, b) == pytest.approx(1.0)
    x = rng.standard_normal((7, 3))
    assert kabsch_rmsd(x, x) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        kabsch_rmsd(x, x[:3])


@given(st.integers(0, 10_000))
def test_kabsch_rigid_invariance_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 3))
    r = random_rotation(rng)
    assert kabsch_rmsd(a, a @ r.T + rng.standard_normal(3)) < 1e-9
    b = rng.standard_normal((6, 3))
    assert kabsch_rmsd(a, b) == pytest.approx(kabsch_rmsd(b, a), rel=1e-9)


def test_kabsch_rejects_reflection(rng):
    a = rng.standard_normal((8, 3))
    mirrored = a * np.array([-1.0, 1.0, 1.0])
    assert kabsch_rmsd(a, mirrored) > 1e-3


@given(st.integers(0, 10_000))
def test_random_rotation_orthonormal(seed):
    r = random_rotation(np.random.default_rng(seed))
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_random_rotation_column_means_vanish():
    rng = np.random.default_rng(0)
    mats = np.stack([random_rotation(rng) for _ in range(100_000)])
    sigma = np.sqrt(1.0 / 3.0 / len(mats))  # each entry has variance 1/3 under the Haar measure
    assert np.all(np.abs(mats.mean(axis=0)) < 3 * sigma)
