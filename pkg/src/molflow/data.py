"""Synthetic corpus generation, size histograms and extended-XYZ I/O."""

from __future__ import annotations

import io
import shlex
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chem import COV, INDEX, SYMBOLS, Molecule, graph_from_edges, perceive_bonds, random_rotation
from .metrics import pb_lite, pb_pass

MAX_TRAIN_ATOMS = 72
MIN_SIZE, MAX_SIZE = 4, 16
RETRY_CAP = 500
TETRA = np.arccos(-1.0 / 3.0)

# max degree used by the generator (S kept divalent); weights pick among allowed elements
_GEN_ELEMENTS = (("C", 4, 0.70), ("N", 3, 0.15), ("O", 2, 0.10), ("S", 2, 0.05))


class CorpusError(ValueError):
    """Malformed or unusable corpus data."""


@dataclass
class Corpus:
    molecules: list[Molecule]
    split: str = "train"
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split == "train":
            keep = [m for m in self.molecules if len(m) <= MAX_TRAIN_ATOMS]
            self.dropped += len(self.molecules) - len(keep)
            self.molecules = keep

    def __len__(self) -> int:
        return len(self.molecules)

    def __getitem__(self, i):
        return self.molecules[i]

    def __iter__(self):
        return iter(self.molecules)

    def size_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(len(m) for m in self.molecules).items()))

    def split_off(self, n_test: int, rng: np.random.Generator) -> tuple["Corpus", "Corpus"]:
        """Random train/test partition; the test part keeps every molecule."""
        if not 0 <= n_test <= len(self):
            raise ValueError("n_test out of range")
        idx = rng.permutation(len(self))
        test = [self.molecules[i] for i in sorted(idx[:n_test])]
        train = [self.molecules[i] for i in sorted(idx[n_test:])]
        return Corpus(train, "train"), Corpus(test, "test")


def size_sampler(corpus: Sequence[Molecule], rng: np.random.Generator, size=None):
    """Draw atom counts from the corpus's empirical size distribution."""
    sizes = np.array([len(m) for m in corpus])
    if len(sizes) == 0:
        raise ValueError("empty corpus")
    out = rng.choice(sizes, size=size)
    return int(out) if size is None else out.astype(int)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def _perp_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def _tetra_slots(u: np.ndarray, phase: float) -> list[np.ndarray]:
    """Three unit directions at the tetrahedral angle from ``u``, 120 deg apart."""
    e1, e2 = _perp_basis(u)
    s, c = np.sin(TETRA), np.cos(TETRA)
    return [c * u + s * (np.cos(phase + k * 2 * np.pi / 3) * e1 + np.sin(phase + k * 2 * np.pi / 3) * e2) for k in range(3)]


def _random_tree(n: int, rng: np.random.Generator, start: list[int], caps: list[int]) -> tuple[list[int], list[tuple[int, int]]]:
    """Attach atoms to random earlier atoms with free capacity."""
    deg = list(start)
    edges = []
    while len(deg) < n:
        free = [i for i, d in enumerate(deg) if d < caps[i]]
        p = int(rng.choice(free))
        edges.append((p, len(deg)))
        deg[p] += 1
        deg.append(1)
        caps.append(4)
    return deg, edges


def _assign_elements(deg: Sequence[int], fixed: dict[int, str], rng: np.random.Generator) -> list[str]:
    out = []
    for i, d in enumerate(deg):
        if i in fixed:
            out.append(fixed[i])
            continue
        allowed = [(s, w) for s, cap, w in _GEN_ELEMENTS if d <= cap]
        w = np.array([w for _, w in allowed])
        out.append(allowed[int(rng.choice(len(allowed), p=w / w.sum()))][0])
    return out


def _bond(a: str, b: str) -> float:
    return COV[INDEX[a]] + COV[INDEX[b]]


def _grow(pos, children, symbols, start_atoms, rng):
    """Place tetrahedral subtrees hanging off already-placed atoms."""
    stack = list(start_atoms)
    while stack:
        v, u = stack.pop()  # atom, unit direction towards its parent
        kids = children.get(v, [])
        if not kids:
            continue
        if u is None:
            rot = random_rotation(rng)
            slots = [rot @ d for d in (np.array([1, 1, 1]), np.array([1, -1, -1]), np.array([-1, 1, -1]), np.array([-1, -1, 1]))]
            slots = [s / np.linalg.norm(s) for s in slots]
        else:
            slots = _tetra_slots(u, rng.uniform(0, 2 * np.pi))
        for k, d in zip(kids, slots):
            pos[k] = pos[v] + _bond(symbols[v], symbols[k]) * d
            stack.append((k, -d))


def _tree_molecule(n: int, rng: np.random.Generator):
    deg, edges = _random_tree(n, rng, [0], [4])
    symbols = _assign_elements(deg, {}, rng)
    children: dict[int, list[int]] = {}
    for p, c in edges:
        children.setdefault(p, []).append(c)
    pos = np.zeros((n, 3))
    _grow(pos, children, symbols, [(0, None)], rng)
    return symbols, pos, edges


def _ring_molecule(n: int, ring: int, rng: np.random.Generator):
    # ring atoms are carbons on a regular polygon; exocyclic bonds point radially outward
    edge = _bond("C", "C")
    radius = edge / (2 * np.sin(np.pi / ring))
    ang = 2 * np.pi * np.arange(ring) / ring
    caps = [3] * ring
    deg, tree_edges = _random_tree(n, rng, [2] * ring, caps)
    edges = [(i, (i + 1) % ring) for i in range(ring)] + tree_edges
    symbols = _assign_elements(deg, {i: "C" for i in range(ring)}, rng)
    pos = np.zeros((n, 3))
    pos[:ring, 0] = radius * np.cos(ang)
    pos[:ring, 1] = radius * np.sin(ang)
    children: dict[int, list[int]] = {}
    for p, c in tree_edges:
        children.setdefault(p, []).append(c)
    starts = []
    for i in range(ring):
        for k in children.pop(i, []):
            d = pos[i] / np.linalg.norm(pos[i])
            pos[k] = pos[i] + _bond("C", symbols[k]) * d
            starts.append((k, -d))
    _grow(pos, children, symbols, starts, rng)
    return symbols, pos, edges


def _dfs_order(n: int, edges: Iterable[tuple[int, int]]) -> list[int]:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    order, seen, stack = [], set(), [0]
    while stack:
        u = stack.pop()
        if u in seen:
            continue
        seen.add(u)
        order.append(u)
        stack.extend(sorted(nbrs[u], reverse=True))
    return order


def synthetic_molecule(rng: np.random.Generator, n: int | None = None) -> Molecule:
    """One rejection-sampled molecule that passes pb_lite and whose perceived
    bonds equal its construction bonds."""
    for _ in range(RETRY_CAP):
        size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1)) if n is None else n
        ring = int(rng.choice([0, 5, 6]))
        if ring and size >= ring:
            symbols, pos, edges = _ring_molecule(size, ring, rng)
        else:
            symbols, pos, edges = _tree_molecule(size, rng)
        order = _dfs_order(size, edges)
        inv = {old: new for new, old in enumerate(order)}
        mol = Molecule.from_symbols([symbols[i] for i in order], pos[order])
        g = perceive_bonds(mol)
        ref = graph_from_edges(mol.types, [(inv[i], inv[j]) for i, j in edges])
        if not np.array_equal(g.adj, ref.adj) or not pb_pass(pb_lite(mol, g)):
            continue
        centred = mol.coords - mol.coords.mean(axis=0)
        return mol.with_coords(centred @ random_rotation(rng).T)
    raise RuntimeError("generation retry cap exceeded")


def gen_synthetic(n: int, rng: np.random.Generator) -> Corpus:
    if n < 1:
        raise ValueError("n must be >= 1")
    mols = []
    for k in range(n):
        m = synthetic_molecule(rng)
        m.provenance = "synthetic"
        m.meta["id"] = str(k)
        mols.append(m)
    return Corpus(mols, "train")


# ---------------------------------------------------------------------------
# extended XYZ
# ---------------------------------------------------------------------------


def format_xyz(mols: Iterable[Molecule], split: str | None = None) -> str:
    buf = io.StringIO()
    for k, m in enumerate(mols):
        info = {"id": m.meta.get("id", str(k))}
        if split is not None:
            info["split"] = split
        if m.provenance:
            info["provenance"] = m.provenance
        info.update({key: str(v) for key, v in m.meta.items() if key not in info})
        buf.write(f"{len(m)}\n")
        buf.write(" ".join(f"{key}={shlex.quote(str(v))}" for key, v in info.items()) + "\n")
        for s, (x, y, z) in zip(m.symbols, m.coords):
            buf.write(f"{s} {x:.6f} {y:.6f} {z:.6f}\n")
    return buf.getvalue()


def parse_xyz(text: str) -> list[Molecule]:
    lines = text.splitlines()
    mols = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].strip())
        except ValueError as exc:
            raise CorpusError(f"line {i + 1}: expected an atom count") from exc
        if n < 1 or i + 2 + n > len(lines):
            raise CorpusError(f"line {i + 1}: truncated record")
        try:
            info = dict(tok.split("=", 1) for tok in shlex.split(lines[i + 1]))
        except ValueError as exc:
            raise CorpusError(f"line {i + 2}: malformed key=value comment") from exc
        symbols, coords = [], []
        for j, line in enumerate(lines[i + 2 : i + 2 + n], start=i + 3):
            parts = line.split()
            if len(parts) != 4 or parts[0] not in SYMBOLS:
                raise CorpusError(f"line {j}: malformed atom line")
            try:
                coords.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise CorpusError(f"line {j}: bad coordinate") from exc
            symbols.append(parts[0])
        try:
            mol = Molecule.from_symbols(symbols, np.array(coords), info.pop("provenance", ""))
        except ValueError as exc:
            raise CorpusError(str(exc)) from exc
        mol.meta.update(info)
        mols.append(mol)
        i += 2 + n
    return mols


def write_corpus(path, mols: Iterable[Molecule], split: str | None = None) -> None:
    Path(path).write_text(format_xyz(mols, split), encoding="utf-8")


def read_corpus(path, split: str | None = None) -> Corpus:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    mols = parse_xyz(text)
    if not mols:
        raise CorpusError(f"corpus {path} is empty")
    if split is None:
        split = mols[0].meta.get("split", "train")
    return Corpus(mols, split)
