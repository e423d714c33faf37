"""Generation: coupled Euler-Maruyama coordinate steps and discrete-flow
type steps over a time grid, plus bounds guidance near the end of sampling.

Any object with ``predict(x, a, t, mask) -> (x1_hat, probs)`` on batched
numpy arrays can drive the sampler; guidance through the network additionally
needs ``predict_tensor(x: Tensor, a, t, mask) -> Tensor``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .bounds import bounds_matrix, phys_loss
from .chem import VOCAB, Molecule, perceive_bonds
from .model import ModelConfig, forward, softmax_np
from .rng import stream

G_KINDS = ("zero", "inv_t", "inv_t2", "one_minus_t_over_t")
MIN_GAP = 1e-4
PROB_TOL = 1e-9


@dataclass
class GuidanceConfig:
    enabled: bool = False
    t_guidance: float = 0.99
    alpha_phys: float = 0.01
    n_iters: int = 1
    mode: str = "network"  # or "direct": differentiate the state coordinates themselves


@dataclass
class SampleConfig:
    n_steps: int = 100
    g_kind: str = "inv_t"
    eps_g: float = 0.01
    gamma: float = 0.01
    g_cutoff: float = 0.9
    schedule: str = "logarithmic"
    eps_end: float = 0.01
    noise_literal: bool = False
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.g_kind not in G_KINDS:
            raise ValueError(f"unknown g_kind {self.g_kind!r}")
        if not 0 < self.guidance.t_guidance < 1:
            raise ValueError("t_guidance must lie in (0, 1)")


@dataclass
class Snapshot:
    t: float
    x_t: np.ndarray
    a_t: np.ndarray
    x1_hat: np.ndarray


def schedule(n_steps: int, kind: str = "logarithmic", eps_end: float = 0.01) -> np.ndarray:
    """Time grid t_0 = 0 < ... < t_n.

    uniform: i / n. logarithmic: 1 - t_i = eps_end ** (i / n), so steps shrink
    towards the end and the grid stops at 1 - eps_end.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    i = np.arange(n_steps + 1) / n_steps
    if kind == "uniform":
        return i
    if kind == "logarithmic":
        return 1.0 - np.exp(i * np.log(eps_end))
    raise ValueError(f"unknown schedule {kind!r}")


def g_eval(kind: str, t: float, eps: float = 0.01, cutoff: float = 0.9) -> float:
    if t > cutoff or kind == "zero":
        return 0.0
    if kind == "inv_t":
        return 1.0 / (t + eps)
    if kind == "inv_t2":
        return 1.0 / (t * t + eps)
    if kind == "one_minus_t_over_t":
        return (1.0 - t) / (t + eps)
    raise ValueError(f"unknown g_kind {kind!r}")


def euclidean_step(x_t, x1_hat, t: float, dt: float, g: float, gamma: float, noise=None, noise_literal: bool = False):
    """x <- x + (v + g s) dt + sqrt(2 g gamma dt) xi.

    ``noise`` is either a Generator or a pre-drawn standard-normal array
    shaped like ``x_t``. With ``noise_literal`` the noise is scaled by dt
    instead of sqrt(dt).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    gap = max(1.0 - t, MIN_GAP)
    v = (x1_hat - x_t) / gap
    s = g * (t * v - x_t) / gap
    out = x_t + (v + s) * dt
    amp = np.sqrt(2.0 * g * gamma)
    if amp > 0:
        xi = noise.standard_normal(x_t.shape) if isinstance(noise, np.random.Generator) else np.asarray(noise)
        out = out + (amp * dt if noise_literal else amp * np.sqrt(dt)) * xi
    if not np.all(np.isfinite(out)):
        raise T.NonFiniteError("non-finite coordinates in euclidean_step")
    return out


def discrete_flow_step(a_t, p1_hat, t: float, dt: float, noise) -> np.ndarray:
    """Jump each atom's type with rate dt/(1-t) * p1_hat.

    ``noise`` is a Generator or an array of U(0,1) draws, one per atom.
    """
    a_t = np.asarray(a_t, dtype=np.int64)
    p1_hat = np.asarray(p1_hat, dtype=np.float64)
    scale = min(dt / max(1.0 - t, MIN_GAP), 1.0)
    rate = scale * p1_hat
    onehot = np.zeros_like(p1_hat)
    np.put_along_axis(onehot, a_t[..., None], 1.0, axis=-1)
    off = (rate * (1.0 - onehot)).sum(axis=-1, keepdims=True)
    p = onehot + rate * (1.0 - onehot) - off * onehot
    if np.any(p < -PROB_TOL) or np.any(p > 1.0 + PROB_TOL):
        raise ValueError("transition probabilities left [0, 1]")
    p = np.clip(p, 0.0, 1.0)
    u = noise.random(a_t.shape) if isinstance(noise, np.random.Generator) else np.asarray(noise)
    cdf = np.cumsum(p, axis=-1)
    cdf[..., -1] = np.maximum(cdf[..., -1], 1.0)
    return (u[..., None] >= cdf).sum(axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


class ModelPredictor:
    def __init__(self, weights: dict[str, np.ndarray], cfg: ModelConfig):
        self.weights = weights
        self.cfg = cfg

    def predict(self, x, a, t, mask):
        x1, logits = forward(self.weights, self.cfg, x, a, t, mask)
        return x1.data, softmax_np(logits.data)

    def predict_tensor(self, x, a, t, mask):
        return forward(self.weights, self.cfg, x, a, t, mask)[0]


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------


def _decode_valid(x1_hat, probs, mask):
    from .metrics import connectivity, validity

    out = []
    for b in range(len(x1_hat)):
        n = int(mask[b].sum())
        mol = Molecule(probs[b, :n].argmax(-1), x1_hat[b, :n])
        g = perceive_bonds(mol)
        out.append((mol, g) if validity(mol, g) and connectivity(mol, g) else None)
    return out


def guidance_gradient(predictor, x, a, t: float, mask, gc: GuidanceConfig):
    """d L_phys / d x_t for every molecule whose decoded endpoint is valid.

    Bounds come from the decoded molecule itself. Returns (gradient, per-molecule
    loss, applied flags); rows of skipped molecules have zero gradient.
    """
    tb = np.full(len(x), t)
    x_var = T.Tensor(x, requires_grad=True)
    if gc.mode == "network":
        x1_t = predictor.predict_tensor(x_var, a, tb, mask)
        probs = predictor.predict(x, a, tb, mask)[1]
        x1_np = x1_t.data
    elif gc.mode == "direct":
        x1_t = x_var
        x1_np, probs = predictor.predict(x, a, tb, mask)
    else:
        raise ValueError(f"unknown guidance mode {gc.mode!r}")
    decoded = _decode_valid(x1_np, probs, mask)
    applied = np.array([d is not None for d in decoded])
    losses = np.zeros(len(x))
    total = None
    for b, d in enumerate(decoded):
        if d is None:
            continue
        n = int(mask[b].sum())
        term = phys_loss(x1_t[b, :n], bounds_matrix(d[0], d[1]))
        losses[b] = float(term.data)
        total = term if total is None else total + term
    if total is None or not total.requires_grad:
        return np.zeros_like(x), losses, applied
    (grad,) = T.grad(total, [x_var])
    return grad * applied[:, None, None] * mask[..., None], losses, applied


def guidance_step(predictor, x, a, t: float, mask, gc: GuidanceConfig):
    """One sign-gradient step x <- x - alpha_phys * sign(grad L_phys).

    Molecules whose decode fails valence or connectivity are left untouched.
    Returns the new state, the per-molecule loss before the step, and the
    applied flags.
    """
    grad, losses, applied = guidance_gradient(predictor, x, a, t, mask, gc)
    return x - gc.alpha_phys * np.sign(grad), losses, applied


# ---------------------------------------------------------------------------
# sampling loops
# ---------------------------------------------------------------------------


def run_sampler(predictor, x, a, mask, times: Sequence[float], cfg: SampleConfig, rngs, record: bool = False):
    """Integrate from ``times[0]`` to ``times[-1]`` starting at state (x, a).

    ``rngs`` holds one Generator per molecule. The model is evaluated at every
    grid point; the returned coordinates/types are the endpoint prediction at
    the final one. Guidance (if enabled) acts on the state at every grid point
    t_i >= t_guidance, before the model is evaluated there.
    """
    x = np.array(x, dtype=np.float64)
    a = np.array(a, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    b = len(x)
    gc = cfg.guidance
    trajectory: list[list[Snapshot]] = [[] for _ in range(b)]
    for i, t in enumerate(times):
        if gc.enabled and i > 0 and t >= gc.t_guidance - 1e-12:
            for _ in range(gc.n_iters):
                x, _, _ = guidance_step(predictor, x, a, t, mask, gc)
        x1_hat, probs = predictor.predict(x, a, np.full(b, t), mask)
        if not np.all(np.isfinite(x1_hat)):
            raise T.NonFiniteError(f"non-finite endpoint prediction at t={t:.4f}")
        if record:
            for k in range(b):
                n = int(mask[k].sum())
                trajectory[k].append(Snapshot(float(t), x[k, :n].copy(), a[k, :n].copy(), x1_hat[k, :n].copy()))
        if i == len(times) - 1:
            break
        dt = times[i + 1] - t
        g = g_eval(cfg.g_kind, t, cfg.eps_g, cfg.g_cutoff)
        xi = np.zeros_like(x)
        u = np.zeros(a.shape)
        for k in range(b):
            n = int(mask[k].sum())
            xi[k, :n] = rngs[k].standard_normal((n, 3))
            u[k, :n] = rngs[k].random(n)
        x = euclidean_step(x, x1_hat, t, dt, g, cfg.gamma, xi, cfg.noise_literal) * mask[..., None]
        a = discrete_flow_step(a, probs, t, dt, u) * mask
    return x1_hat, probs.argmax(-1), trajectory


def _pad(n_atoms: Sequence[int]):
    n_max = max(n_atoms)
    mask = np.zeros((len(n_atoms), n_max), dtype=bool)
    for k, n in enumerate(n_atoms):
        mask[k, :n] = True
    return mask


def sample(predictor, n_atoms, cfg: SampleConfig | None = None, seed: int = 0, *, start_index: int = 0,
           x0=None, a0=None, return_trajectory: bool = False, batch_size: int = 256):
    """Generate one molecule per entry of ``n_atoms``.

    Molecule k draws all its randomness from ``stream(seed, "sample", start_index + k)``,
    so results do not depend on how molecules are grouped into batches
    (up to floating-point reassociation inside batched matrix products).
    """
    cfg = cfg or SampleConfig()
    if np.isscalar(n_atoms):
        n_atoms = [int(n_atoms)]
    n_atoms = [int(n) for n in n_atoms]
    if min(n_atoms) < 1:
        raise ValueError("need at least one atom per molecule")
    times = schedule(cfg.n_steps, cfg.schedule, cfg.eps_end)
    mols: list[Molecule] = []
    trajs: list[list[Snapshot]] = []
    for lo in range(0, len(n_atoms), batch_size):
        chunk = n_atoms[lo : lo + batch_size]
        mask = _pad(chunk)
        rngs = [stream(seed, "sample", start_index + lo + k) for k in range(len(chunk))]
        x = np.zeros(mask.shape + (3,))
        a = np.zeros(mask.shape, dtype=np.int64)
        for k, n in enumerate(chunk):
            x[k, :n] = rngs[k].standard_normal((n, 3)) if x0 is None else x0[lo + k]
            a[k, :n] = rngs[k].integers(0, VOCAB, n) if a0 is None else a0[lo + k]
        x1, types, traj = run_sampler(predictor, x, a, mask, times, cfg, rngs, record=return_trajectory)
        for k, n in enumerate(chunk):
            mols.append(Molecule(types[k, :n], x1[k, :n], provenance=f"sample seed={seed} index={start_index + lo + k}"))
        trajs.extend(traj)
    if return_trajectory:
        return mols, trajs
    return mols


def guided_sample(predictor, n_atoms, cfg: SampleConfig | None = None, seed: int = 0, **kwargs):
    """``sample`` with bounds guidance switched on for t >= t_guidance."""
    cfg = cfg or SampleConfig()
    gc = GuidanceConfig(**{**cfg.guidance.__dict__, "enabled": True})
    cfg = SampleConfig(**{**cfg.__dict__, "guidance": gc})
    return sample(predictor, n_atoms, cfg, seed, **kwargs)
