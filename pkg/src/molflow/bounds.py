"""Distance-bounds matrix over 1-5 bond separations and the piecewise
quadratic bounds-violation loss used for last-mile guidance."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .chem import VDW, BondGraph, Molecule, graph_distances, perceive_bonds

MAX_HOPS = 5
VDW_MARGIN = 0.1
# Two-hop pairs: lower bound is the 1-3 distance of a 90 degree angle with
# equal arms (U / sqrt 2), which admits tetrahedral, trigonal and 5-ring angles.
SQRT2 = np.sqrt(2.0)


@dataclass
class BoundsMatrix:
    lower: np.ndarray  # (N, N)
    upper: np.ndarray  # (N, N)
    hops: np.ndarray  # (N, N), -1 if unreachable
    mask: np.ndarray  # (N, N) bool, constrained pairs

    @property
    def n(self) -> int:
        return len(self.mask)

    def pairs(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.mask, 1))
        return list(zip(i.tolist(), j.tolist()))


def bounds_matrix(mol: Molecule, g: BondGraph | None = None) -> BoundsMatrix:
    """Lower/upper bounds for every pair 1-5 bonds apart.

    Upper: cumulative covalent length along the shortest path. Lower:
    vdW sum minus 0.1 A, clamped to U - 0.1 A (one hop) or U / sqrt(2) (two hops).
    """
    if g is None:
        g = perceive_bonds(mol)
    gd = graph_distances(g)
    n = len(mol)
    hops = gd.hops
    mask = (hops >= 1) & (hops <= MAX_HOPS)
    upper = np.where(mask, gd.length, np.inf)
    vdw = VDW[mol.types]
    vdw_lower = vdw[:, None] + vdw[None, :] - VDW_MARGIN
    lower = np.minimum(vdw_lower, upper - VDW_MARGIN)
    two = hops == 2
    lower = np.where(two, np.minimum(vdw_lower, upper / SQRT2), lower)
    lower = np.where(mask, lower, 0.0)
    np.fill_diagonal(upper, np.inf)
    assert lower.shape == (n, n)
    return BoundsMatrix(lower, upper, hops, mask)


def _pair_index(bm: BoundsMatrix):
    i, j = np.nonzero(np.triu(bm.mask, 1))
    return i, j


def phys_loss_np(coords: np.ndarray, bm: BoundsMatrix) -> float:
    i, j = _pair_index(bm)
    if len(i) == 0:
        return 0.0
    d = np.linalg.norm(coords[i] - coords[j], axis=-1)
    over = np.maximum(d - bm.upper[i, j], 0.0)
    under = np.maximum(bm.lower[i, j] - d, 0.0)
    return float((over * over + under * under).sum())


def phys_loss(coords, bm: BoundsMatrix) -> T.Tensor:
    """Differentiable bounds-violation loss on an (N, 3) coordinate tensor."""
    coords = T.as_tensor(coords)
    i, j = _pair_index(bm)
    if len(i) == 0:
        return T.mul(T.sum(coords), 0.0)
    n = bm.n
    # signed incidence matrix turns coordinates into pair differences via matmul
    inc = np.zeros((len(i), n))
    inc[np.arange(len(i)), i] = 1.0
    inc[np.arange(len(i)), j] = -1.0
    diff = T.matmul(inc, coords)
    d = T.sqrt(T.sum(diff * diff, axis=-1))
    over = T.relu(d - bm.upper[i, j])
    under = T.relu(T.mul(d, -1.0) + bm.lower[i, j])
    return T.sum(over * over + under * under)


def dump_csv(bm: BoundsMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "hops", "L", "U"])
    for i, j in bm.pairs():
        w.writerow([i, j, int(bm.hops[i, j]), f"{bm.lower[i, j]:.6f}", f"{bm.upper[i, j]:.6f}"])
    return buf.getvalue()
