import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain, hexagon
from molflow import data
from molflow.chem import COV, Molecule, perceive_bonds
from molflow.data import (
    MAX_TRAIN_ATOMS,
    Corpus,
    CorpusError,
    format_xyz,
    gen_synthetic,
    parse_xyz,
    read_corpus,
    size_sampler,
    synthetic_molecule,
    write_corpus,
)
from molflow.metrics import connectivity, pb_lite, pb_pass


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(1000, np.random.default_rng(0))


def test_every_molecule_passes_and_is_connected(corpus):
    assert len(corpus) == 1000
    assert all(pb_pass(pb_lite(m)) for m in corpus)
    assert all(connectivity(m) for m in corpus)


def test_size_histogram_covers_range(corpus):
    hist = corpus.size_histogram()
    assert set(hist) == set(range(4, 17))
    assert sum(hist.values()) == 1000


def test_elements_and_bond_lengths(corpus):
    for m in corpus.molecules[:200]:
        assert set(m.symbols) <= {"C", "N", "O", "S"}
        g = perceive_bonds(m)
        for i, j in g.edges():
            d = np.linalg.norm(m.coords[i] - m.coords[j])
            assert d == pytest.approx(COV[m.types[i]] + COV[m.types[j]], abs=1e-9)


def test_atom_order_is_depth_first(corpus):
    # in a DFS preorder of a connected graph every atom after the first has an earlier neighbour
    for m in corpus.molecules[:200]:
        adj = perceive_bonds(m).adj
        assert all(adj[k, :k].any() for k in range(1, len(m)))


def test_molecules_centred(corpus):
    for m in corpus.molecules[:50]:
        np.testing.assert_allclose(m.coords.mean(axis=0), 0.0, atol=1e-9)


def test_fixed_seed_identical_bytes():
    a = format_xyz(gen_synthetic(20, np.random.default_rng(5)))
    b = format_xyz(gen_synthetic(20, np.random.default_rng(5)))
    c = format_xyz(gen_synthetic(20, np.random.default_rng(6)))
    assert a == b and a != c


def test_requested_size(rng):
    assert len(synthetic_molecule(rng, n=9)) == 9


def test_retry_cap(monkeypatch, rng):
    monkeypatch.setattr(data, "pb_pass", lambda checks: False)
    with pytest.raises(RuntimeError, match="retry cap"):
        synthetic_molecule(rng)


def test_gen_rejects_nonpositive(rng):
    with pytest.raises(ValueError):
        gen_synthetic(0, rng)


# --- size sampling -----------------------------------------------------------------------


def test_size_sampler_single_size(rng):
    c = [chain(["C"] * 5)] * 3
    assert set(size_sampler(c, rng, 100)) == {5}
    assert size_sampler(c, rng) == 5


def test_size_sampler_two_sizes_frequency():
    c = [chain(["C"] * 4), chain(["C"] * 7)]
    draws = size_sampler(c, np.random.default_rng(3), 10_000)
    assert set(draws) <= {4, 7}
    assert abs((draws == 4).mean() - 0.5) < 3 * np.sqrt(0.25 / 10_000)


def test_size_sampler_support(corpus, rng):
    assert set(size_sampler(corpus, rng, 500)) <= set(corpus.size_histogram())
    with pytest.raises(ValueError):
        size_sampler([], rng)


# --- corpus splits -----------------------------------------------------------------------


def big(n):
    return Molecule.from_symbols(["C"] * n, np.arange(n * 3, dtype=float).reshape(n, 3))


def test_oversized_dropped_from_train_only():
    mols = [big(MAX_TRAIN_ATOMS), big(MAX_TRAIN_ATOMS + 1), hexagon()]
    train = Corpus(list(mols), "train")
    assert len(train) == 2 and train.dropped == 1
    test = Corpus(list(mols), "test")
    assert len(test) == 3 and test.dropped == 0


def test_split_off_partitions(corpus):
    train, test = corpus.split_off(64, np.random.default_rng(1))
    assert len(train) == len(corpus) - 64 and len(test) == 64
    assert test.split == "test" and train.split == "train"
    ids = {m.meta["id"] for m in train} | {m.meta["id"] for m in test}
    assert len(ids) == len(corpus)
    with pytest.raises(ValueError):
        corpus.split_off(len(corpus) + 1, np.random.default_rng(1))


# --- XYZ format --------------------------------------------------------------------------


def test_record_layout():
    m = Molecule.from_symbols(["C", "O"], [[0, 0, 0], [1.2345678, -2, 0.5]], provenance="hand made")
    m.meta["id"] = "7"
    text = format_xyz([m], split="test")
    lines = text.splitlines()
    assert lines[0] == "2"
    assert lines[1] == "id=7 split=test provenance='hand made'"
    assert lines[3] == "O 1.234568 -2.000000 0.500000"


@given(st.integers(0, 10_000))
def test_roundtrip(seed):
    mols = gen_synthetic(3, np.random.default_rng(seed)).molecules
    back = parse_xyz(format_xyz(mols, split="train"))
    assert len(back) == len(mols)
    for a, b in zip(mols, back):
        assert a.symbols == b.symbols
        assert np.abs(a.coords - b.coords).max() <= 5e-7 + 1e-12
        assert b.meta["split"] == "train" and b.provenance == a.provenance
    # formatting is a fixed point after one round
    assert format_xyz(back, split="train") == format_xyz(mols, split="train")


def test_file_roundtrip(tmp_path):
    c = gen_synthetic(5, np.random.default_rng(2))
    path = tmp_path / "toy.xyzs"
    write_corpus(path, c, split="test")
    again = read_corpus(path)
    assert again.split == "test" and len(again) == 5
    assert path.read_text() == format_xyz(again, split="test")


@pytest.mark.parametrize(
    "text",
    [
        "two\nid=0\nC 0 0 0\n",
        "3\nid=0\nC 0 0 0\n",
        "1\nid=0\nXx 0 0 0\n",
        "1\nid=0\nC 0 zero 0\n",
        "1\nid=0\nC 0 0\n",
        "1\nnot-a-pair\nC 0 0 0\n",
        "1\nid=0\nC nan 0 0\n",
    ],
)
def test_malformed_input_raises(text):
    with pytest.raises(CorpusError):
        parse_xyz(text)


def test_read_missing_or_empty(tmp_path):
    with pytest.raises(CorpusError):
        read_corpus(tmp_path / "absent.xyzs")
    (tmp_path / "empty.xyzs").write_text("\n")
    with pytest.raises(CorpusError):
        read_corpus(tmp_path / "empty.xyzs")
