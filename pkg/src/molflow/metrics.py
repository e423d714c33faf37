"""Evaluation: validity/connectivity, a force-field-free PoseBusters-style
check battery, novelty/diversity, the rotation-variance equivariance error
and the partial-renoising probe."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bounds import bounds_matrix
from .chem import (
    ELEMENTS,
    VDW,
    WILD,
    BondGraph,
    Molecule,
    fingerprint,
    graph_distances,
    is_connected,
    pairwise_distances,
    perceive_bonds,
    random_rotation,
    tanimoto,
    wl_hash,
)

PB_CHECKS = ("bond_lengths", "angles", "clash", "flatness", "connectivity", "valence")
_MAX_VALENCE = np.array([e.max_valence if e.max_valence is not None else 10**9 for e in ELEMENTS])


@dataclass(frozen=True)
class PBConfig:
    bond_lo: float = 0.75
    bond_hi: float = 1.25
    clash_factor: float = 0.7
    flat_tol: float = 0.25
    angle_slack: float = 1e-9


def _graph(mol: Molecule, g: BondGraph | None) -> BondGraph:
    return perceive_bonds(mol) if g is None else g


def validity(mol: Molecule, g: BondGraph | None = None) -> bool:
    """Every non-wildcard atom has 1 <= degree <= max valence (lower bound only
    when the molecule has more than one atom)."""
    g = _graph(mol, g)
    deg = g.degree()
    real = mol.types != WILD
    if np.any(deg[real] > _MAX_VALENCE[mol.types[real]]):
        return False
    if len(mol) >= 2 and np.any(deg[real] < 1):
        return False
    return True


def connectivity(mol: Molecule, g: BondGraph | None = None) -> bool:
    return is_connected(_graph(mol, g))


def small_rings(g: BondGraph, sizes: Iterable[int] = (5, 6)) -> list[tuple[int, ...]]:
    """Simple cycles of the given sizes, each reported once (smallest atom first)."""
    sizes = set(sizes)
    longest = max(sizes)
    nbrs = [g.neighbors(i).tolist() for i in range(g.n)]
    seen: set[frozenset[int]] = set()
    rings = []

    def dfs(start, path):
        u = path[-1]
        for v in nbrs[u]:
            if v == start and len(path) in sizes:
                key = frozenset(path)
                if key not in seen:
                    seen.add(key)
                    rings.append(tuple(path))
            elif v > start and v not in path and len(path) < longest:
                path.append(v)
                dfs(start, path)
                path.pop()

    for s in range(g.n):
        dfs(s, [s])
    return rings


def plane_deviation(points: np.ndarray) -> float:
    """Largest distance from the least-squares plane through ``points``."""
    centred = points - points.mean(axis=0)
    normal = np.linalg.svd(centred)[2][-1]
    return float(np.abs(centred @ normal).max())


def pb_lite(mol: Molecule, g: BondGraph | None = None, cfg: PBConfig = PBConfig()) -> dict[str, bool]:
    g = _graph(mol, g)
    d = pairwise_distances(mol.coords)
    iu = np.triu(np.ones_like(g.adj), 1)
    bonded = g.adj & iu
    ratio = d[bonded] / g.ref[bonded]
    bond_ok = bool(np.all((ratio >= cfg.bond_lo) & (ratio <= cfg.bond_hi)))

    bm = bounds_matrix(mol, g)
    two = (bm.hops == 2) & iu
    ang_ok = bool(
        np.all(d[two] >= bm.lower[two] - cfg.angle_slack) and np.all(d[two] <= bm.upper[two] + cfg.angle_slack)
    )

    far = ((bm.hops > 5) | (bm.hops < 0)) & iu
    vdw = VDW[mol.types]
    clash_ok = bool(np.all(d[far] >= cfg.clash_factor * (vdw[:, None] + vdw[None, :])[far]))

    deg = g.degree()
    flat_ok = True
    for ring in small_rings(g):
        if np.all(deg[list(ring)] <= 3) and plane_deviation(mol.coords[list(ring)]) > cfg.flat_tol:
            flat_ok = False
            break

    return {
        "bond_lengths": bond_ok,
        "angles": ang_ok,
        "clash": clash_ok,
        "flatness": flat_ok,
        "connectivity": is_connected(g),
        "valence": validity(mol, g),
    }


def pb_pass(checks: dict[str, bool]) -> bool:
    return all(checks.values())


def diversity(mols: Sequence[Molecule]) -> float:
    if len(mols) < 2:
        raise ValueError("diversity needs at least two molecules")
    fps = [fingerprint(m, perceive_bonds(m)) for m in mols]
    sims = [tanimoto(a, b) for a, b in itertools.combinations(fps, 2)]
    return 1.0 - float(np.mean(sims))


def novelty(mols: Sequence[Molecule], train_hashes: set[int]) -> float:
    if not mols:
        return 0.0
    return float(np.mean([wl_hash(m, perceive_bonds(m)) not in train_hashes for m in mols]))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MoleculeRecord:
    index: int
    n_atoms: int
    valid: bool
    connected: bool
    novel: bool | None
    pb_checks: dict[str, bool]
    pb_pass: bool


@dataclass
class MetricsReport:
    molecules: list[MoleculeRecord]
    validity: float
    connectivity: float
    novelty: float | None
    diversity: float | None
    pb_rate: float

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "molecules"}
        out["n"] = len(self.molecules)
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.molecules)


def evaluate(mols: Sequence[Molecule], train_hashes: set[int] | None = None, cfg: PBConfig = PBConfig()) -> MetricsReport:
    if not mols:
        raise ValueError("nothing to evaluate")
    records = []
    for k, m in enumerate(mols):
        g = perceive_bonds(m)
        checks = pb_lite(m, g, cfg)
        novel = None if train_hashes is None else wl_hash(m, g) not in train_hashes
        records.append(MoleculeRecord(k, len(m), validity(m, g), checks["connectivity"], novel, checks, pb_pass(checks)))
    return MetricsReport(
        molecules=records,
        validity=float(np.mean([r.valid for r in records])),
        connectivity=float(np.mean([r.connected for r in records])),
        novelty=None if train_hashes is None else float(np.mean([r.novel for r in records])),
        diversity=diversity(mols) if len(mols) >= 2 else None,
        pb_rate=float(np.mean([r.pb_pass for r in records])),
    )


# ---------------------------------------------------------------------------
# equivariance error
# ---------------------------------------------------------------------------


@dataclass
class EquivProbe:
    t: list[float]
    eps: list[float]
    n_rot: int
    per_molecule: list[list[float]] = field(default_factory=list)

    def to_csv(self) -> str:
        return "t,eps_equiv\n" + "".join(f"{t:.6f},{e:.6e}\n" for t, e in zip(self.t, self.eps))


def _rotation_variance(predictor, x_t: np.ndarray, a_t: np.ndarray, t: float, rots: np.ndarray) -> float:
    n = len(x_t)
    r = len(rots)
    xs = np.einsum("rij,nj->rni", rots, x_t)
    a = np.broadcast_to(a_t, (r, n)).copy()
    mask = np.ones((r, n), dtype=bool)
    x1 = np.asarray(predictor.predict(xs, a, np.full(r, t), mask)[0])
    z = np.einsum("rji,rnj->rni", rots, x1)  # R^T f(R x)
    z = z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12)
    return float(z.var(axis=0).mean())


def equivariance_error(predictor, mol: Molecule, t: float, n_rot: int = 64, rng: np.random.Generator | None = None) -> float:
    """Variance over random rotations R of the per-atom normalised R^T f(R x_t),
    averaged over atoms and coordinates. Zero for rotation-equivariant f."""
    from .flow import noise_state

    if n_rot < 2:
        raise ValueError("n_rot must be >= 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    state = noise_state(mol, t, rng)
    rots = np.stack([random_rotation(rng) for _ in range(n_rot)])
    eps = _rotation_variance(predictor, state.x_t, state.a_t, t, rots)
    if eps < 0 or not np.isfinite(eps):
        raise FloatingPointError("invalid equivariance error")
    return eps


def equivariance_curve(predictor, mols: Sequence[Molecule], t_grid: Sequence[float], n_rot: int = 64,
                       rng: np.random.Generator | None = None) -> EquivProbe:
    rng = rng if rng is not None else np.random.default_rng(0)
    per = [[equivariance_error(predictor, m, float(t), n_rot, rng) for m in mols] for t in t_grid]
    return EquivProbe([float(t) for t in t_grid], [float(np.mean(p)) for p in per], n_rot, per)


# ---------------------------------------------------------------------------
# partial renoising
# ---------------------------------------------------------------------------


def renoise_probe(predictor, test_mols: Sequence[Molecule], tau_grid: Sequence[float], cfg=None, seed: int = 0) -> dict[float, float]:
    """pb_lite pass rate after noising each test molecule to tau and finishing
    the sampler from there (grid = [tau] + the schedule's points above tau)."""
    from .flow import noise_state, pad_batch
    from .rng import stream
    from .sampler import SampleConfig, run_sampler, schedule

    cfg = cfg or SampleConfig()
    full = schedule(cfg.n_steps, cfg.schedule, cfg.eps_end)
    out = {}
    for tau in tau_grid:
        tau = float(tau)
        if not 0.0 <= tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        times = np.concatenate([[tau], full[full > tau + 1e-12]])
        rngs = [stream(seed, "renoise", int(round(tau * 1e6)), k) for k in range(len(test_mols))]
        states = [noise_state(m, tau, r) for m, r in zip(test_mols, rngs)]
        _, _, mask = pad_batch(test_mols)
        x = np.zeros(mask.shape + (3,))
        a = np.zeros(mask.shape, dtype=np.int64)
        for k, s in enumerate(states):
            x[k, : len(s.a_t)] = s.x_t
            a[k, : len(s.a_t)] = s.a_t
        if len(times) == 1:
            x1, probs = predictor.predict(x, a, np.full(len(x), tau), mask)
            types = probs.argmax(-1)
        else:
            x1, types, _ = run_sampler(predictor, x, a, mask, times, cfg, rngs)
        mols = [Molecule(types[k, : len(m)], x1[k, : len(m)]) for k, m in enumerate(test_mols)]
        out[tau] = float(np.mean([pb_pass(pb_lite(m)) for m in mols]))
    return out
