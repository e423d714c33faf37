import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import ConstantOracle, IdentityOracle, ScaledOracle, TargetOracle, chain, hexagon
from molflow.chem import Molecule, fingerprint, graph_from_edges, perceive_bonds, random_rotation, tanimoto, wl_hash
from molflow.data import synthetic_molecule
from molflow.metrics import (
    PB_CHECKS,
    EquivProbe,
    PBConfig,
    connectivity,
    diversity,
    equivariance_curve,
    equivariance_error,
    evaluate,
    novelty,
    pb_lite,
    pb_pass,
    plane_deviation,
    renoise_probe,
    small_rings,
    validity,
)
from molflow.model import ModelConfig, init_params
from molflow.sampler import ModelPredictor, SampleConfig


def two_c(d):
    return Molecule.from_symbols(["C", "C"], [[0, 0, 0], [d, 0, 0]])


def ks_two_sample(a, b):
    a, b = np.sort(a), np.sort(b)
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(fa - fb).max())


# --- validity / connectivity -------------------------------------------------------------


def test_bonded_pair_valid_and_connected():
    m = two_c(1.52)
    assert validity(m) and connectivity(m)


def test_pentavalent_carbon_invalid():
    dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    m = Molecule.from_symbols(["C"] * 6, np.vstack([np.zeros(3), 1.52 * dirs]))
    assert perceive_bonds(m).degree()[0] == 5
    assert not validity(m)


def test_far_pair_disconnected_and_isolated():
    m = two_c(10.0)
    assert not connectivity(m)
    assert not validity(m)  # an isolated atom has degree 0


def test_single_atom_valid():
    assert validity(Molecule.from_symbols(["O"], [[0, 0, 0]]))


def test_wildcard_exempt_from_valence():
    dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    m = Molecule.from_symbols(["*"] + ["C"] * 5, np.vstack([np.zeros(3), 1.52 * dirs]))
    assert validity(m)


# --- PoseBusters-lite --------------------------------------------------------------------


def test_planar_hexagon_passes_everything():
    checks = pb_lite(hexagon(1.40))
    assert set(checks) == set(PB_CHECKS)
    assert pb_pass(checks)


@pytest.mark.parametrize("lift,flat", [(0.4, True), (0.5, True), (0.6, False)])
def test_lifted_ring_atom_flatness(lift, flat):
    # the best-fit plane absorbs half the lift (leverage 1/6 + 1/3), so 0.5 A sits just inside 0.25 A
    ring = hexagon(1.40)
    x = ring.coords.copy()
    x[0, 2] += lift
    assert plane_deviation(x) == pytest.approx(lift / 2, rel=0.05)
    checks = pb_lite(ring.with_coords(x))
    assert checks["flatness"] is flat


def test_ring_with_tetravalent_atom_exempt_from_flatness():
    ring = hexagon(1.40)
    x = ring.coords.copy()
    x[0, 2] += 0.6
    out = x[0] / np.linalg.norm(x[0])
    subs = [x[0] + 1.52 * (0.6 * out + 0.8 * np.array([0, 0, s])) for s in (1.0, -1.0)]
    mol = Molecule.from_symbols(["C"] * 8, np.vstack([x, subs]))
    edges = [(i, (i + 1) % 6) for i in range(6)] + [(0, 6), (0, 7)]
    g = graph_from_edges(mol.types, edges)
    assert g.degree()[0] == 4 and len(small_rings(g)) == 1
    assert pb_lite(mol, g)["flatness"]
    assert not pb_lite(ring.with_coords(x))["flatness"]


def test_separate_components_clash():
    m = two_c(1.0)
    g = graph_from_edges(m.types, [])
    checks = pb_lite(m, g)
    assert not checks["clash"] and not checks["connectivity"]


def test_stretched_bond_fails_bond_length():
    m = two_c(1.52)
    checks = pb_lite(m, cfg=PBConfig(bond_lo=0.75, bond_hi=0.99))
    assert not checks["bond_lengths"]
    assert pb_lite(m)["bond_lengths"]


def test_squeezed_angle_fails():
    # C-C-C at 60 degrees: 1-3 distance 1.52 is below the 2-hop lower bound
    ang = np.deg2rad(60)
    coords = [[1.52, 0, 0], [0, 0, 0], [1.52 * np.cos(ang), 1.52 * np.sin(ang), 0]]
    m = Molecule.from_symbols(["C", "C", "C"], coords)
    g = graph_from_edges(m.types, [(0, 1), (1, 2)])
    assert not pb_lite(m, g)["angles"]


def test_pb_pass_is_conjunction():
    base = {k: True for k in PB_CHECKS}
    assert pb_pass(base)
    for k in PB_CHECKS:
        assert not pb_pass({**base, k: False})


@given(st.integers(0, 10_000))
def test_synthetic_molecules_pass(seed):
    assert pb_pass(pb_lite(synthetic_molecule(np.random.default_rng(seed))))


@given(st.integers(0, 10_000))
def test_metrics_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    mol = synthetic_molecule(rng)
    mol = mol.with_coords(mol.coords + rng.normal(0, 0.15, mol.coords.shape))
    moved = mol.with_coords(mol.coords @ random_rotation(rng).T + rng.normal(0, 5, 3))
    g0, g1 = perceive_bonds(mol), perceive_bonds(moved)
    assert pb_lite(mol) == pb_lite(moved)
    assert validity(mol) == validity(moved)
    assert wl_hash(mol, g0) == wl_hash(moved, g1)
    assert fingerprint(mol, g0) == fingerprint(moved, g1)


def test_plane_deviation_examples():
    assert plane_deviation(hexagon().coords) == pytest.approx(0.0, abs=1e-12)
    square = np.array([[0, 0, 0.1], [1, 0, -0.1], [1, 1, 0.1], [0, 1, -0.1]], float)
    assert plane_deviation(square) == pytest.approx(0.1)


# --- diversity / novelty -----------------------------------------------------------------


def test_diversity_identical_set_is_zero():
    assert diversity([hexagon(), hexagon()]) == 0.0


def test_diversity_pair_matches_tanimoto():
    a, b = chain(["C", "C", "O", "C"]), chain(["C", "N", "C", "C", "S"])
    sim = tanimoto(fingerprint(a, perceive_bonds(a)), fingerprint(b, perceive_bonds(b)))
    assert 0 < sim < 1
    assert diversity([a, b]) == pytest.approx(1 - sim)
    with pytest.raises(ValueError):
        diversity([a])


def test_novelty_examples():
    a, b = chain(["C", "C", "O"]), chain(["C", "O", "C"])
    assert novelty([a, b], set()) == 1.0
    train = {wl_hash(a, perceive_bonds(a))}
    assert novelty([a, b], train) == 0.5
    assert novelty([a.permuted([2, 1, 0])], train) == 0.0


def test_evaluate_report():
    mols = [hexagon(), two_c(10.0), chain(["C", "C", "O"])]
    rep = evaluate(mols, train_hashes=set())
    assert rep.validity == pytest.approx(2 / 3) and rep.connectivity == pytest.approx(2 / 3)
    assert rep.pb_rate == pytest.approx(2 / 3) and rep.novelty == 1.0
    assert [r.pb_pass for r in rep.molecules] == [True, False, True]
    assert set(rep.summary()) == {"validity", "connectivity", "novelty", "diversity", "pb_rate", "n"}
    lines = rep.to_jsonl().splitlines()
    assert len(lines) == 3 and '"pb_pass": false' in lines[1]
    assert evaluate(mols[:1]).diversity is None
    with pytest.raises(ValueError):
        evaluate([])


# --- equivariance ------------------------------------------------------------------------


def test_scaled_predictor_is_equivariant():
    mol = synthetic_molecule(np.random.default_rng(3))
    for t in (0.1, 0.5, 0.9):
        assert equivariance_error(ScaledOracle(), mol, t, n_rot=32, rng=np.random.default_rng(0)) < 1e-12


def test_constant_predictor_is_not():
    mol = synthetic_molecule(np.random.default_rng(3))
    pred = ConstantOracle(np.random.default_rng(1).standard_normal((len(mol), 3)))
    assert equivariance_error(pred, mol, 0.5, n_rot=64, rng=np.random.default_rng(0)) > 1e-3


def test_identity_predictor_is_equivariant():
    mol = hexagon()
    assert equivariance_error(IdentityOracle(), mol, 0.3, rng=np.random.default_rng(2)) < 1e-12


class PreRotated:
    """The same predictor viewed in a frame rotated by q: rotate in, rotate back out."""

    def __init__(self, inner, q):
        self.inner, self.q = inner, q

    def predict(self, x, a, t, mask):
        x1, probs = self.inner.predict(np.asarray(x) @ self.q.T, a, t, mask)
        return x1 @ self.q, probs


def test_extra_input_rotation_leaves_distribution_unchanged():
    cfg = ModelConfig(hidden_size=8, n_blocks=1, n_heads=2, max_len=8)
    net = ModelPredictor(init_params(cfg, np.random.default_rng(0)), cfg)
    q = random_rotation(np.random.default_rng(99))
    mol = chain(["C", "C", "O", "N", "C"])
    n = 150
    plain = [equivariance_error(net, mol, 0.5, 8, np.random.default_rng(s)) for s in range(n)]
    rotated = [equivariance_error(PreRotated(net, q), mol, 0.5, 8, np.random.default_rng(10_000 + s)) for s in range(n)]
    assert min(plain) > 1e-6
    # two-sample KS critical value at p = 0.001
    assert ks_two_sample(plain, rotated) < 1.95 * np.sqrt(2 / n)


def test_equivariance_validation_and_curve():
    mol = hexagon()
    with pytest.raises(ValueError):
        equivariance_error(ScaledOracle(), mol, 0.5, n_rot=1)
    probe = equivariance_curve(ScaledOracle(), [mol, chain(["C", "C"])], [0.2, 0.8], n_rot=4)
    assert isinstance(probe, EquivProbe) and len(probe.eps) == 2 and all(e >= 0 for e in probe.eps)
    assert probe.to_csv().splitlines()[0] == "t,eps_equiv" and len(probe.to_csv().splitlines()) == 3


# --- partial renoising -------------------------------------------------------------------


def test_renoise_with_truth_oracle_is_flat():
    mols = [synthetic_molecule(np.random.default_rng(s)) for s in range(4)]
    rates = renoise_probe(TargetOracle(mols), mols, [0.0, 0.5, 0.9], SampleConfig(n_steps=20))
    assert rates == {0.0: 1.0, 0.5: 1.0, 0.9: 1.0}


def test_renoise_near_one_returns_input():
    mols = [synthetic_molecule(np.random.default_rng(s)) for s in range(4)]
    rates = renoise_probe(IdentityOracle(), mols, [0.9999], SampleConfig(n_steps=20))
    assert rates[0.9999] == 1.0


def test_renoise_rejects_tau_one():
    with pytest.raises(ValueError):
        renoise_probe(IdentityOracle(), [hexagon()], [1.0])


def test_renoise_deterministic():
    mols = [synthetic_molecule(np.random.default_rng(s)) for s in range(3)]
    cfg = ModelConfig(hidden_size=8, n_blocks=1, n_heads=2)
    net = ModelPredictor(init_params(cfg, np.random.default_rng(0)), cfg)
    a = renoise_probe(net, mols, [0.5], SampleConfig(n_steps=5), seed=3)
    b = renoise_probe(net, mols, [0.5], SampleConfig(n_steps=5), seed=3)
    assert a == b
