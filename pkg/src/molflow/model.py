"""Non-equivariant transformer that predicts the clean endpoint (coordinates
and atom-type logits) from a noisy molecule at time t.

Token = coordinate encoding + type embedding + time encoding + sequence
position encoding. A stack of pre-norm self-attention blocks is followed by
two parallel cross-attention stacks (coordinates, types) that attend back to
the initial token embedding, and one MLP head per domain.

With ``precondition`` on, the network sees x_t rescaled to unit variance and
its coordinate head predicts a residual on top of the linear least-squares
estimate of x_1 from x_t:

    x1_hat = c_skip(t) x_t + c_out(t) F(c_in(t) x_t)

    s2 = t^2 sigma^2 + (1 - t)^2,  c_in = 1/sqrt(s2),
    c_skip = t sigma^2 / s2,        c_out = (1 - t) sigma / sqrt(s2)

where sigma is the per-axis spread of the data coordinates. The scaling is
per-molecule and per-time only, so it commutes with rotations and atom
permutations. Without it, the plain network has to carry coordinates through
layer norms and attention to the output, which it learns slowly; the high-t
predictions then end up worse than simply returning x_t / t.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .chem import VOCAB

MASK_NEG = -1e9
FF_MULT = 4
MAGIC = b"TBSC"
CKPT_VERSION = 2


@dataclass
class ModelConfig:
    hidden_size: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    atom_vocab: int = VOCAB
    max_len: int = 72
    use_positional_encoding: bool = True
    precondition: bool = True
    sigma_data: float = 1.3

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if self.hidden_size % 2:
            raise ValueError("hidden_size must be even")


def precond_coeffs(t, sigma: float):
    """(c_in, c_skip, c_out) for times ``t``."""
    t = np.asarray(t, dtype=np.float64)
    s2 = t * t * sigma * sigma + (1.0 - t) ** 2
    root = np.sqrt(s2)
    return 1.0 / root, t * sigma * sigma / s2, (1.0 - t) * sigma / root


def time_encoding(t, hidden: int) -> np.ndarray:
    """Fourier features of t: interleaved sin/cos at hidden/2 frequencies
    spaced geometrically from 1 to 1000 (in cycles per unit time)."""
    t = np.asarray(t, dtype=np.float64)
    half = hidden // 2
    freqs = np.geomspace(1.0, 1000.0, half) if half > 1 else np.ones(1)
    ang = 2.0 * np.pi * t[..., None] * freqs
    out = np.empty(t.shape + (hidden,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def positional_encoding(pos, hidden: int, enabled: bool = True) -> np.ndarray:
    """Standard sinusoidal encoding of the atom's sequence index."""
    pos = np.asarray(pos, dtype=np.float64)
    if not enabled:
        return np.zeros(pos.shape + (hidden,))
    div = 10000.0 ** (np.arange(0, hidden, 2) / hidden)
    ang = pos[..., None] / div
    out = np.empty(pos.shape + (hidden,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every weight in its fixed declared (checkpoint) order."""
    h, f = cfg.hidden_size, cfg.hidden_size * FF_MULT
    shapes: dict[str, tuple[int, ...]] = {
        "coord_enc.w": (3, h),
        "type_emb.w": (cfg.atom_vocab, h),
    }

    def attn(prefix):
        for name in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{name}"] = (h, h)
            shapes[f"{prefix}.b{name}"] = (h,)

    def ln(prefix, bias=True):
        shapes[f"{prefix}.w"] = (h,)
        if bias:
            shapes[f"{prefix}.b"] = (h,)

    def ff(prefix):
        shapes[f"{prefix}.w1"] = (h, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, h)
        shapes[f"{prefix}.b2"] = (h,)

    for i in range(cfg.n_blocks):
        ln(f"block{i}.ln1")
        attn(f"block{i}.attn")
        ln(f"block{i}.ln2")
        ff(f"block{i}.ff")
    for dom in ("xcoord", "xtype"):
        ln(f"{dom}.ln_sa")
        attn(f"{dom}.sa")
        ln(f"{dom}.ln_ca")
        attn(f"{dom}.ca")
        ln(f"{dom}.ln_ff")
        ff(f"{dom}.ff")
    # coordinate head is bias-free end to end
    ln("head_coord.ln", bias=False)
    shapes["head_coord.w1"] = (h, h)
    shapes["head_coord.w2"] = (h, 3)
    ln("head_type.ln")
    shapes["head_type.w1"] = (h, h)
    shapes["head_type.b1"] = (h,)
    shapes["head_type.w2"] = (h, cfg.atom_vocab)
    shapes["head_type.b2"] = (cfg.atom_vocab,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if name.endswith(".w") and ".ln" in name:
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name == "type_emb.w":
            params[name] = rng.standard_normal(shape)
        else:
            std = 1.0 / np.sqrt(shape[0])
            if leaf in ("wo", "w2") and not name.startswith("head"):
                std /= np.sqrt(2.0 * (cfg.n_blocks + 2))
            params[name] = rng.standard_normal(shape) * std
    return params


def n_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _attention(p, prefix, xq, xkv, n_heads, key_bias):
    q = xq @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = xkv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = xkv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    dh = q.shape[-1] // n_heads
    scale = 1.0 / np.sqrt(dh)
    heads = []
    for hd in range(n_heads):
        sl = (Ellipsis, slice(hd * dh, (hd + 1) * dh))
        scores = T.matmul(q[sl], T.transpose(k[sl])) * scale + key_bias
        heads.append(T.matmul(T.softmax(scores), v[sl]))
    out = heads[0] if n_heads == 1 else T.concat(heads, axis=-1)
    return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def _ff(p, prefix, x):
    return T.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _ln(p, prefix, x):
    return T.layer_norm(x, p[f"{prefix}.w"], p.get(f"{prefix}.b"))


def _cross_stack(p, dom, z, h0, n_heads, key_bias):
    zn = _ln(p, f"{dom}.ln_sa", z)
    z = z + _attention(p, f"{dom}.sa", zn, zn, n_heads, key_bias)
    z = z + _attention(p, f"{dom}.ca", _ln(p, f"{dom}.ln_ca", z), h0, n_heads, key_bias)
    return z + _ff(p, f"{dom}.ff", _ln(p, f"{dom}.ln_ff", z))


def forward(params, cfg: ModelConfig, coords, types, t, mask=None):
    """Endpoint prediction.

    coords (B, N, 3) array or Tensor, types (B, N) ints, t (B,) floats,
    mask (B, N) bool (True = real atom). Unbatched (N, 3)/(N,)/scalar inputs
    are accepted and give unbatched outputs. Returns (x1_hat, type_logits)
    as Tensors of shape (B, N, 3) and (B, N, vocab).
    """
    p = {k: T.as_tensor(v) for k, v in params.items()}
    coords = T.as_tensor(coords)
    types = np.asarray(types, dtype=np.int64)
    unbatched = coords.data.ndim == 2
    if unbatched:
        coords = T.slice_(coords, (None, Ellipsis))
        types = types[None]
        t = np.asarray(t, dtype=np.float64).reshape(1)
        mask = None if mask is None else np.asarray(mask)[None]
    b, n, _ = coords.shape
    if n > cfg.max_len:
        raise ValueError(f"molecule with {n} atoms exceeds max_len={cfg.max_len}")
    if types.min() < 0 or types.max() >= cfg.atom_vocab:
        raise ValueError("atom type out of vocabulary")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
    if mask is None:
        mask = np.ones((b, n), dtype=bool)
    h = cfg.hidden_size

    x_in = coords
    if cfg.precondition:
        c_in, c_skip, c_out = (c[:, None, None] for c in precond_coeffs(t, cfg.sigma_data))
        x_in = coords * c_in
    const = time_encoding(t, h)[:, None, :] + positional_encoding(np.arange(n), h, cfg.use_positional_encoding)[None]
    h0 = x_in @ p["coord_enc.w"] + T.gather(p["type_emb.w"], types) + const
    key_bias = np.where(mask, 0.0, MASK_NEG)[:, None, :]

    x = h0
    for i in range(cfg.n_blocks):
        xn = _ln(p, f"block{i}.ln1", x)
        x = x + _attention(p, f"block{i}.attn", xn, xn, cfg.n_heads, key_bias)
        x = x + _ff(p, f"block{i}.ff", _ln(p, f"block{i}.ln2", x))

    zc = _cross_stack(p, "xcoord", x, h0, cfg.n_heads, key_bias)
    zt = _cross_stack(p, "xtype", x, h0, cfg.n_heads, key_bias)

    xc = T.layer_norm(zc, p["head_coord.ln.w"])
    x1 = T.gelu(xc @ p["head_coord.w1"]) @ p["head_coord.w2"]
    if cfg.precondition:
        x1 = coords * c_skip + x1 * c_out
    xt = _ln(p, "head_type.ln", zt)
    logits = T.gelu(xt @ p["head_type.w1"] + p["head_type.b1"]) @ p["head_type.w2"] + p["head_type.b2"]
    if unbatched:
        return x1[0], logits[0]
    return x1, logits


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoint payload
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None

    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator, with_ema: bool = True) -> "ModelParams":
        w = init_params(cfg, rng)
        return cls(cfg, w, {k: v.copy() for k, v in w.items()} if with_ema else None)

    def select(self, use_ema: bool) -> dict[str, np.ndarray]:
        if use_ema:
            if self.ema is None:
                raise ValueError("checkpoint has no EMA weights")
            return self.ema
        return self.weights


_CFG_FIELDS = ("hidden_size", "n_blocks", "n_heads", "atom_vocab", "max_len", "use_positional_encoding", "precondition")
_BOOL_FIELDS = ("use_positional_encoding", "precondition")


def save_checkpoint(mp: ModelParams, path) -> None:
    """Write magic, version, config header, then f32 little-endian weight
    blocks in declared order, then an optional EMA block in the same order."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(mp))


def checkpoint_bytes(mp: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg = asdict(mp.config)
    buf.write(struct.pack("<7Id", *(int(cfg[k]) for k in _CFG_FIELDS), cfg["sigma_data"]))
    shapes = param_shapes(mp.config)
    buf.write(struct.pack("<I", len(shapes)))
    for name, shape in shapes.items():
        arr = np.asarray(mp.weights[name])
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        enc = name.encode()
        buf.write(struct.pack("<I", len(enc)) + enc)
        buf.write(struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        buf.write(arr.astype("<f4").tobytes())
    buf.write(struct.pack("<I", 1 if mp.ema is not None else 0))
    if mp.ema is not None:
        for name in shapes:
            buf.write(np.asarray(mp.ema[name]).astype("<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def checkpoint_from_bytes(data: bytes) -> ModelParams:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    *vals, sigma = struct.unpack("<7Id", take(struct.calcsize("<7Id")))
    fields = {k: (bool(v) if k in _BOOL_FIELDS else v) for k, v in zip(_CFG_FIELDS, vals)}
    cfg = ModelConfig(**fields, sigma_data=sigma)
    (count,) = struct.unpack("<I", take(4))
    weights = {}
    order = []
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = bytes(take(ln)).decode()
        (nd,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{nd}I", take(4 * nd))
        size = int(np.prod(shape)) if nd else 1
        weights[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
        order.append((name, shape))
    expected = param_shapes(cfg)
    if [n for n, _ in order] != list(expected):
        raise ValueError("checkpoint weight order does not match the declared layout")
    (has_ema,) = struct.unpack("<I", take(4))
    ema = None
    if has_ema:
        ema = {}
        for name, shape in order:
            size = int(np.prod(shape)) if shape else 1
            ema[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise ValueError("trailing bytes in checkpoint")
    return ModelParams(cfg, weights, ema)
