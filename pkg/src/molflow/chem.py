"""Chemistry-lite substrate: element table, distance-based bond perception,
graph utilities, WL hashing/fingerprints and rigid alignment."""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

BOND_TOL = 0.4
LENGTH_UNITS = 10_000  # path lengths are summed exactly in 1e-4 A steps
FP_BITS = 2048


@dataclass(frozen=True)
class Element:
    symbol: str
    covalent_radius: float
    vdw_radius: float
    max_valence: int | None


# Cordero covalent radii (sp3 carbon), Bondi van-der-Waals radii.
# WILD ("*") borrows carbon radii and is exempt from valence checks.
ELEMENTS: tuple[Element, ...] = (
    Element("C", 0.76, 1.70, 4),
    Element("N", 0.71, 1.55, 3),
    Element("O", 0.66, 1.52, 2),
    Element("F", 0.57, 1.47, 1),
    Element("S", 1.05, 1.80, 6),
    Element("Cl", 1.02, 1.75, 1),
    Element("Br", 1.20, 1.85, 1),
    Element("I", 1.39, 1.98, 1),
    Element("*", 0.76, 1.70, None),
)
SYMBOLS = tuple(e.symbol for e in ELEMENTS)
VOCAB = len(ELEMENTS)
WILD = SYMBOLS.index("*")
INDEX = {s: i for i, s in enumerate(SYMBOLS)}
INDEX["WILD"] = WILD
COV = np.array([e.covalent_radius for e in ELEMENTS])
VDW = np.array([e.vdw_radius for e in ELEMENTS])


def element_index(symbol: str) -> int:
    """Map an element symbol to its vocabulary index; unknown elements go to "*"."""
    if symbol in INDEX:
        return INDEX[symbol]
    cap = symbol[:1].upper() + symbol[1:].lower()
    return INDEX.get(cap, WILD)


@dataclass
class Molecule:
    types: np.ndarray  # (N,) int vocabulary indices
    coords: np.ndarray  # (N, 3) angstrom
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if len(self.types) < 1:
            raise ValueError("molecule needs at least one atom")
        if len(self.types) != len(self.coords):
            raise ValueError("types and coords disagree on atom count")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinates")
        if self.types.min() < 0 or self.types.max() >= VOCAB:
            raise ValueError("atom type out of vocabulary")

    def __len__(self) -> int:
        return len(self.types)

    @property
    def symbols(self) -> list[str]:
        return [SYMBOLS[t] for t in self.types]

    @classmethod
    def from_symbols(cls, symbols, coords, provenance: str = "") -> "Molecule":
        return cls(np.array([element_index(s) for s in symbols]), coords, provenance)

    def permuted(self, perm) -> "Molecule":
        perm = np.asarray(perm)
        return Molecule(self.types[perm], self.coords[perm], self.provenance, dict(self.meta))

    def with_coords(self, coords) -> "Molecule":
        return Molecule(self.types.copy(), coords, self.provenance, dict(self.meta))


@dataclass
class BondGraph:
    adj: np.ndarray  # (N, N) bool, symmetric, zero diagonal
    ref: np.ndarray  # (N, N) reference bond length on edges, 0 elsewhere

    @property
    def n(self) -> int:
        return len(self.adj)

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adj[i])

    def degree(self) -> np.ndarray:
        return self.adj.sum(axis=1)

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adj, 1))
        return list(zip(i.tolist(), j.tolist()))


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def perceive_bonds(mol: Molecule, tol: float = BOND_TOL) -> BondGraph:
    """Bond (i, j) iff their distance is within the covalent sum plus ``tol``."""
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    cov_sum = COV[mol.types][:, None] + COV[mol.types][None, :]
    adj = pairwise_distances(mol.coords) <= cov_sum + tol
    np.fill_diagonal(adj, False)
    return BondGraph(adj, np.where(adj, cov_sum, 0.0))


def graph_from_edges(types, edges) -> BondGraph:
    types = np.asarray(types)
    n = len(types)
    adj = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        if i != j:
            adj[i, j] = adj[j, i] = True
    cov_sum = COV[types][:, None] + COV[types][None, :]
    return BondGraph(adj, np.where(adj, cov_sum, 0.0))


@dataclass
class GraphDistances:
    hops: np.ndarray  # (N, N) int, -1 where unreachable
    length: np.ndarray  # (N, N) cumulative reference length, inf where unreachable

    def reachable(self) -> np.ndarray:
        return self.hops >= 0


def graph_distances(g: BondGraph) -> GraphDistances:
    """All-pairs BFS hop counts plus the smallest cumulative reference length
    among shortest-hop paths.

    Lengths are accumulated as integers in units of 1e-4 A (table radii are
    exact in these units), so the result is the correctly rounded path sum
    whatever order the edges are visited in.
    """
    n = g.n
    hops = np.full((n, n), -1, dtype=np.int64)
    units = np.full((n, n), np.iinfo(np.int64).max)
    edge = np.rint(g.ref * LENGTH_UNITS).astype(np.int64)
    nbrs = [g.neighbors(i) for i in range(n)]
    for s in range(n):
        hops[s, s] = 0
        units[s, s] = 0
        frontier = [s]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in nbrs[u]:
                    if hops[s, v] == -1:
                        hops[s, v] = d
                        nxt.append(v)
                    if hops[s, v] == d:
                        units[s, v] = min(units[s, v], units[s, u] + edge[u, v])
            frontier = nxt
    length = np.where(hops >= 0, units / LENGTH_UNITS, np.inf)
    return GraphDistances(hops, length)


def components(g: BondGraph) -> list[list[int]]:
    seen = np.zeros(g.n, dtype=bool)
    comps = []
    for s in range(g.n):
        if seen[s]:
            continue
        comp, queue = [], deque([s])
        seen[s] = True
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in g.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def is_connected(g: BondGraph) -> bool:
    return len(components(g)) == 1


# ---------------------------------------------------------------------------
# Weisfeiler-Lehman labels, hashing, fingerprints
# ---------------------------------------------------------------------------


def _h64(payload: str) -> int:
    return int.from_bytes(hashlib.blake2b(payload.encode(), digest_size=8).digest(), "little")


def wl_labels(mol: Molecule, g: BondGraph, radius: int = 2) -> list[list[int]]:
    """Per-iteration WL labels; entry r holds the labels after r refinements."""
    deg = g.degree()
    labels = [_h64(f"{SYMBOLS[t]}|{d}") for t, d in zip(mol.types, deg)]
    history = [labels]
    nbrs = [g.neighbors(i) for i in range(g.n)]
    for _ in range(radius):
        labels = [
            _h64(f"{labels[i]}|" + ",".join(str(x) for x in sorted(labels[j] for j in nbrs[i])))
            for i in range(g.n)
        ]
        history.append(labels)
    return history


def wl_hash(mol: Molecule, g: BondGraph, radius: int = 2) -> int:
    history = wl_labels(mol, g, radius)
    return _h64(";".join(",".join(map(str, sorted(h))) for h in history))


def fingerprint(mol: Molecule, g: BondGraph, radius: int = 2, n_bits: int = FP_BITS) -> frozenset[int]:
    """Set bits = every WL label at radius 0..radius folded into ``n_bits`` bins."""
    return frozenset(lab % n_bits for h in wl_labels(mol, g, radius) for lab in h)


def tanimoto(a: frozenset[int], b: frozenset[int]) -> float:
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def canonical_order(mol: Molecule, g: BondGraph) -> list[int]:
    """Deterministic DFS order keyed on converged WL labels.

    Components are emitted largest first; each starts from its smallest
    (WL label, element, degree) atom and visits neighbours in key order.
    """
    n = g.n
    deg = g.degree()
    # refine until the partition stops splitting
    labels = wl_labels(mol, g, radius=0)[0]
    nbrs = [g.neighbors(i) for i in range(n)]
    n_classes = len(set(labels))
    for _ in range(n):
        new = [_h64(f"{labels[i]}|" + ",".join(str(x) for x in sorted(labels[j] for j in nbrs[i]))) for i in range(n)]
        k = len(set(new))
        labels = new
        if k == n_classes:
            break
        n_classes = k
    keys = [(labels[i], SYMBOLS[mol.types[i]], int(deg[i])) for i in range(n)]

    comps = components(g)
    comps.sort(key=lambda c: (-len(c), min(keys[i] for i in c)))
    order: list[int] = []
    seen = np.zeros(n, dtype=bool)
    for comp in comps:
        root = min(comp, key=lambda i: (keys[i], i))
        stack = [root]
        while stack:
            u = stack.pop()
            if seen[u]:
                continue
            seen[u] = True
            order.append(u)
            # reverse so the smallest key is popped first
            for v in sorted(nbrs[u], key=lambda j: (keys[j], j), reverse=True):
                if not seen[v]:
                    stack.append(v)
    return order


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _coords(x) -> np.ndarray:
    return np.asarray(x.coords if isinstance(x, Molecule) else x, dtype=np.float64)


def kabsch_rmsd(a, b) -> float:
    """RMSD after optimal proper rigid superposition of ``b`` onto ``a``."""
    pa, pb = _coords(a), _coords(b)
    if pa.shape != pb.shape:
        raise ValueError(f"atom count mismatch: {len(pa)} vs {len(pb)}")
    pa = pa - pa.mean(axis=0)
    pb = pb - pb.mean(axis=0)
    h = pb.T @ pa
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    rot = vt.T @ corr @ u.T
    diff = pb @ rot.T - pa
    return float(np.sqrt((diff * diff).sum() / len(pa)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
