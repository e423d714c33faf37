"""Training: noising, the weighted endpoint losses, Beta(alpha, 1) time
sampling, rotation augmentation and EMA."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .chem import VOCAB, Molecule, random_rotation
from .model import ModelConfig, ModelParams, forward

BETA_CAP = 100.0


@dataclass
class TrainConfig:
    alpha: float = 1.8
    lambda_discrete: float = 0.1
    ema_decay: float = 0.999
    n_rot_augs: int = 8
    rotate: bool = True
    batch_size: int = 4
    lr: float = 1e-3
    grad_clip: float = 10.0
    steps: int = 1000
    lr_schedule: str = "constant"  # or "cosine": decay to lr_min over the run
    warmup_steps: int = 0
    lr_min: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.lambda_discrete <= 1:
            raise ValueError("lambda_discrete must lie in (0, 1]")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.n_rot_augs < 1:
            raise ValueError("n_rot_augs must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.warmup_steps < 0 or not 0 <= self.lr_min <= self.lr:
            raise ValueError("need warmup_steps >= 0 and 0 <= lr_min <= lr")


def learning_rate(tc: TrainConfig, step: int) -> float:
    """Learning rate for 1-based ``step``: linear warmup, then constant or cosine decay."""
    if step <= tc.warmup_steps:
        return tc.lr * step / tc.warmup_steps
    if tc.lr_schedule == "constant":
        return tc.lr
    span = max(tc.steps - tc.warmup_steps, 1)
    frac = min((step - tc.warmup_steps) / span, 1.0)
    return tc.lr_min + 0.5 * (tc.lr - tc.lr_min) * (1.0 + np.cos(np.pi * frac))


@dataclass
class NoisyState:
    x_t: np.ndarray
    a_t: np.ndarray
    t: float


def sample_time(rng: np.random.Generator, alpha: float, size=None):
    """Draw t ~ Beta(alpha, 1) by inverting its CDF: t = u ** (1 / alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return rng.random(size) ** (1.0 / alpha)


def loss_weight(t):
    """beta(t) = min(100, 1 / (1 - t)^2)."""
    t = np.asarray(t, dtype=np.float64)
    gap = 1.0 - t
    with np.errstate(divide="ignore"):
        w = np.where(gap > 0, 1.0 / np.maximum(gap, 1e-300) ** 2, np.inf)
    return np.minimum(BETA_CAP, w)


def noise_types(a1: np.ndarray, t, rng: np.random.Generator) -> np.ndarray:
    """Keep the true type with probability t, otherwise draw uniformly over
    the vocabulary (which can also hit the true type)."""
    a1 = np.asarray(a1)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), a1.shape)
    keep = rng.random(a1.shape) < t
    return np.where(keep, a1, rng.integers(0, VOCAB, size=a1.shape))


def noise_state(mol: Molecule, t: float, rng: np.random.Generator) -> NoisyState:
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    eps = rng.standard_normal(mol.coords.shape)
    if t == 1.0:
        return NoisyState(mol.coords.copy(), mol.types.copy(), 1.0)
    return NoisyState(t * mol.coords + (1.0 - t) * eps, noise_types(mol.types, t, rng), float(t))


def pad_batch(mols: Sequence[Molecule]):
    n = max(len(m) for m in mols)
    b = len(mols)
    coords = np.zeros((b, n, 3))
    types = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, m in enumerate(mols):
        k = len(m)
        coords[i, :k] = m.coords
        types[i, :k] = m.types
        mask[i, :k] = True
    return coords, types, mask


def augment_batch(mols: Sequence[Molecule], k: int, rng: np.random.Generator, rotate: bool = True) -> list[Molecule]:
    """``k`` copies of every molecule, each under its own uniform rotation."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    for m in mols:
        for _ in range(k):
            if rotate:
                r = random_rotation(rng)
                out.append(m.with_coords(m.coords @ r.T))
            else:
                out.append(m)
    return out


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    for name, p in params.items():
        if shadow[name].shape != p.shape:
            raise ValueError(f"ema: shape mismatch for {name}")
        shadow[name] = decay * shadow[name] + (1.0 - decay) * p
    return shadow


def noisy_batch(coords, types, mask, rng: np.random.Generator, alpha: float):
    """Per-molecule t ~ Beta(alpha, 1) and the interpolated (x_t, a_t)."""
    t = sample_time(rng, alpha, len(coords))
    eps = rng.standard_normal(coords.shape)
    x_t = (t[:, None, None] * coords + (1.0 - t)[:, None, None] * eps) * mask[..., None]
    a_t = noise_types(types, t[:, None], rng) * mask
    return t, x_t, a_t


def weighted_loss(x1_hat, logits, coords, types, mask, t, lambda_discrete: float):
    """Mean over molecules of beta(t) * (coord MSE per atom + lambda * mean CE).

    Returns (loss Tensor, coordinate part, type part) with the parts already
    beta-weighted and batch-averaged (type part before lambda).
    """
    b = len(t)
    n_atoms = mask.sum(axis=1)
    w_atom = (loss_weight(t) / (n_atoms * b))[:, None] * mask
    coord = T.squared_error(x1_hat, coords, w_atom[..., None])
    typ = T.cross_entropy(logits, types, w_atom)
    total = coord + typ * lambda_discrete
    return total, float(coord.data), float(typ.data)


def batch_loss(params, cfg: ModelConfig, coords, types, mask, t, x_t, a_t, lambda_discrete: float):
    x1_hat, logits = forward(params, cfg, x_t, a_t, t, mask)
    return weighted_loss(x1_hat, logits, coords, types, mask, t, lambda_discrete)


def loss(params, cfg: ModelConfig, batch: Sequence[Molecule], rng: np.random.Generator, tc: TrainConfig | None = None):
    """Weighted training loss of a (pre-augmented) batch of molecules."""
    if not batch:
        raise ValueError("empty batch")
    tc = tc or TrainConfig()
    coords, types, mask = pad_batch(batch)
    t, x_t, a_t = noisy_batch(coords, types, mask, rng, tc.alpha)
    total, _, _ = batch_loss(params, cfg, coords, types, mask, t, x_t, a_t, tc.lambda_discrete)
    if not np.isfinite(total.data):
        raise T.NonFiniteError("non-finite loss")
    return total


def train(
    mp: ModelParams,
    corpus: Sequence[Molecule],
    tc: TrainConfig,
    rng: np.random.Generator,
    log: Callable[[dict], None] | None = None,
    log_every: int = 50,
) -> list[float]:
    """Adam + EMA training loop; returns the per-step loss history."""
    state = T.AdamState()
    history = []
    if mp.ema is None:
        mp.ema = {k: v.copy() for k, v in mp.weights.items()}
    t0 = time.time()
    for step in range(1, tc.steps + 1):
        idx = rng.integers(0, len(corpus), size=tc.batch_size)
        batch = augment_batch([corpus[i] for i in idx], tc.n_rot_augs, rng, rotate=tc.rotate)
        coords, types, mask = pad_batch(batch)
        t, x_t, a_t = noisy_batch(coords, types, mask, rng, tc.alpha)

        leaves = {k: T.Tensor(v, requires_grad=True) for k, v in mp.weights.items()}
        total, coord_part, type_part = batch_loss(leaves, mp.config, coords, types, mask, t, x_t, a_t, tc.lambda_discrete)
        if not np.isfinite(total.data):
            raise T.NonFiniteError(f"non-finite loss at step {step}")
        total.backward()
        grads = {k: leaf.grad for k, leaf in leaves.items()}
        gnorm = T.clip_grad_norm(grads, tc.grad_clip)
        T.adam_step(mp.weights, grads, state, lr=learning_rate(tc, step))
        ema_update(mp.ema, mp.weights, tc.ema_decay)
        history.append(float(total.data))
        if log is not None and (step % log_every == 0 or step == 1 or step == tc.steps):
            log(
                {
                    "step": step,
                    "t_mean": float(t.mean()),
                    "loss": float(total.data),
                    "coord_loss": coord_part,
                    "type_loss": type_part,
                    "grad_norm": gnorm,
                    "elapsed": round(time.time() - t0, 2),
                }
            )
    return history


def jsonl_logger(path):
    fh = open(path, "a", encoding="utf-8")

    def log(rec: dict) -> None:
        fh.write(json.dumps(rec) + "\n")
        fh.flush()

    log.close = fh.close  # type: ignore[attr-defined]
    return log
