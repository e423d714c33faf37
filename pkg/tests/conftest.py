import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from molflow import tensor as T
from molflow.chem import VOCAB, Molecule

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (f64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    """Max abs difference relative to the larger gradient magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def one_hot(types, vocab=VOCAB):
    out = np.zeros(np.shape(types) + (vocab,))
    np.put_along_axis(out, np.asarray(types)[..., None], 1.0, axis=-1)
    return out


class FixedOracle:
    """Always predicts the same molecule (padded per batch row)."""

    def __init__(self, mol: Molecule):
        self.mol = mol

    def predict(self, x, a, t, mask):
        n = len(self.mol)
        x1 = np.zeros_like(np.asarray(x, dtype=float))
        x1[:, :n] = self.mol.coords
        probs = np.full(a.shape + (VOCAB,), 1.0 / VOCAB)
        probs[:, :n] = one_hot(self.mol.types)
        return x1, probs

    def predict_tensor(self, x, a, t, mask):
        return T.Tensor(self.predict(T.as_tensor(x).data, a, t, mask)[0])


class IdentityOracle:
    """x1_hat = x_t and the current types with certainty."""

    def predict(self, x, a, t, mask):
        return np.array(x, dtype=float), one_hot(a)

    def predict_tensor(self, x, a, t, mask):
        return T.as_tensor(x)


class TargetOracle:
    """Returns a per-row ground-truth molecule; rows are assigned in call order of the batch."""

    def __init__(self, mols):
        self.mols = mols

    def predict(self, x, a, t, mask):
        x1 = np.zeros_like(np.asarray(x, dtype=float))
        probs = np.full(np.shape(a) + (VOCAB,), 1.0 / VOCAB)
        for k, m in enumerate(self.mols[: len(x1)]):
            x1[k, : len(m)] = m.coords
            probs[k, : len(m)] = one_hot(m.types)
        return x1, probs


class ScaledOracle:
    """f(x) = A(pairwise distances) * x with a scalar A per molecule: exactly rotation-equivariant."""

    def __init__(self, fn=None):
        self.fn = fn or (lambda d: 0.5 + 1.0 / (1.0 + d.mean()))

    def predict(self, x, a, t, mask):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for k in range(len(x)):
            d = np.linalg.norm(x[k][:, None] - x[k][None], axis=-1)
            out[k] = self.fn(d) * x[k]
        return out, one_hot(a)


class ConstantOracle:
    def __init__(self, coords):
        self.coords = np.asarray(coords, dtype=float)

    def predict(self, x, a, t, mask):
        return np.broadcast_to(self.coords, np.shape(x)).copy(), one_hot(a)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def hexagon(edge=1.40, symbol="C"):
    ang = 2 * np.pi * np.arange(6) / 6
    r = edge  # circumradius of a regular hexagon equals its edge
    coords = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(6)], axis=1)
    return Molecule.from_symbols([symbol] * 6, coords)


def chain(symbols, bond=None):
    """Straight-ish zig-zag chain with tetrahedral angles in the xy plane."""
    from molflow.chem import COV, element_index

    coords = [np.zeros(3)]
    theta = np.deg2rad(109.47 / 2)
    for k in range(1, len(symbols)):
        b = bond or (COV[element_index(symbols[k - 1])] + COV[element_index(symbols[k])])
        dy = b * np.cos(theta) * (1 if k % 2 else -1)
        coords.append(coords[-1] + np.array([b * np.sin(theta), dy, 0.0]))
    return Molecule.from_symbols(symbols, np.array(coords))
