"""A small deterministic decoder-only transformer in numpy.

Pre-norm blocks with RMS norm, RoPE attention and a gated feed-forward.
Everything runs in float32. Attention visibility is decided by position values
rather than array order, so caches stitched out of order still behave causally.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .rope import RotationFrequencies, apply_rope


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    vocab: int = 256
    ffn_mult: int = 4
    seed: int = 0
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("layers", "heads", "head_dim", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even, got {self.head_dim}")
        if self.vocab < 2:
            raise ValueError("vocab must be at least 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.hidden


@dataclass
class LayeredKV:
    """Per-layer K/V for a sequence: ``k``/``v`` are ``(layers, tokens, heads, head_dim)``."""

    k: np.ndarray
    v: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        self.k = np.asarray(self.k, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.k.shape != self.v.shape or self.k.ndim != 4:
            raise ValueError(f"K/V shape mismatch: {self.k.shape} vs {self.v.shape}")
        if self.k.shape[1] != len(self.positions):
            raise ValueError("positions length must equal token count")

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "LayeredKV":
        shape = (cfg.layers, 0, cfg.heads, cfg.head_dim)
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32), np.zeros(0, np.int64))

    @property
    def n_tokens(self) -> int:
        return self.k.shape[1]

    @property
    def n_layers(self) -> int:
        return self.k.shape[0]

    @property
    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes

    def concat(self, other: "LayeredKV") -> "LayeredKV":
        return LayeredKV(
            np.concatenate([self.k, other.k], axis=1),
            np.concatenate([self.v, other.v], axis=1),
            np.concatenate([self.positions, other.positions]),
        )

    def take(self, idx) -> "LayeredKV":
        idx = np.asarray(idx, dtype=np.int64)
        return LayeredKV(self.k[:, idx], self.v[:, idx], self.positions[idx])

    def copy(self) -> "LayeredKV":
        return LayeredKV(self.k.copy(), self.v.copy(), self.positions.copy())

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.k, self.v, self.positions):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


LAYER_FIELDS = [f.name for f in fields(LayerWeights)]


class Model:
    """Immutable weights plus the per-layer building blocks used by every execution path."""

    def __init__(self, cfg: ModelConfig, embed, layers: list[LayerWeights], final_norm, unembed):
        self.cfg = cfg
        self.embed = embed
        self.layers = layers
        self.final_norm = final_norm
        self.unembed = unembed
        self.freqs = RotationFrequencies(cfg.head_dim, cfg.rope_base)
        self._check_shapes()

    def _check_shapes(self) -> None:
        c = self.cfg
        H, F = c.hidden, c.ffn_hidden
        expected = {
            "attn_norm": (H,), "wq": (H, H), "wk": (H, H), "wv": (H, H), "wo": (H, H),
            "ffn_norm": (H,), "w_gate": (H, F), "w_up": (H, F), "w_down": (F, H),
        }
        assert self.embed.shape == (c.vocab, H)
        assert self.unembed.shape == (H, c.vocab)
        assert self.final_norm.shape == (H,)
        assert len(self.layers) == c.layers
        for lw in self.layers:
            for name, shape in expected.items():
                if getattr(lw, name).shape != shape:
                    raise ValueError(f"{name} has shape {getattr(lw, name).shape}, expected {shape}")

    def named_weights(self):
        """Weights in checkpoint order."""
        yield "embed", self.embed
        for i, lw in enumerate(self.layers):
            for name in LAYER_FIELDS:
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "final_norm", self.final_norm
        yield "unembed", self.unembed

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, w in self.named_weights():
            h.update(np.ascontiguousarray(w, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- building blocks -------------------------------------------------

    def norm(self, x: np.ndarray, gain: np.ndarray) -> np.ndarray:
        ms = np.mean(x * x, axis=-1, keepdims=True)
        return (x / np.sqrt(ms + np.float32(self.cfg.norm_eps)) * gain).astype(np.float32)

    def embed_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab):
            raise ValueError("token id out of range")
        return self.embed[tokens].astype(np.float32)

    def qkv(self, layer: int, x: np.ndarray, positions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Post-RoPE queries and keys, and values, each ``(tokens, heads, head_dim)``."""
        c = self.cfg
        lw = self.layers[layer]
        h = self.norm(x, lw.attn_norm)
        shape = (x.shape[0], c.heads, c.head_dim)
        q = (h @ lw.wq).reshape(shape)
        k = (h @ lw.wk).reshape(shape)
        v = (h @ lw.wv).reshape(shape)
        return apply_rope(q, positions, self.freqs), apply_rope(k, positions, self.freqs), v

    def finish_layer(self, layer: int, x: np.ndarray, attn_out: np.ndarray) -> np.ndarray:
        """Output projection, residual add, gated feed-forward."""
        lw = self.layers[layer]
        x = x + attn_out.reshape(x.shape[0], -1) @ lw.wo
        h = self.norm(x, lw.ffn_norm)
        gate = h @ lw.w_gate
        act = gate / (1.0 + np.exp(-gate)) * (h @ lw.w_up)
        return (x + act @ lw.w_down).astype(np.float32)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return (self.norm(x, self.final_norm) @ self.unembed).astype(np.float32)


def masked_attention(q, k, v, mask, return_weights: bool = False):
    """Dense scaled dot-product attention.

    ``q``: (Tq, heads, d), ``k``/``v``: (Tk, heads, d), ``mask``: (Tq, Tk) bool, True = attend.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (q.shape[0], k.shape[0]):
        raise ValueError(f"mask shape {mask.shape} does not match ({q.shape[0]}, {k.shape[0]})")
    if q.shape[0] and not mask.any(axis=1).all():
        raise ValueError("attention mask has a row with no visible keys")
    scale = np.float32(1.0 / np.sqrt(q.shape[-1]))
    scores = np.matmul(q.transpose(1, 0, 2), k.transpose(1, 2, 0)) * scale
    scores = np.where(mask[None], scores, np.float32(-np.inf))
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, v.transpose(1, 0, 2)).transpose(1, 0, 2).astype(np.float32)
    if return_weights:
        return out, w
    return out


def causal_mask(query_positions, key_positions) -> np.ndarray:
    return np.asarray(key_positions)[None, :] <= np.asarray(query_positions)[:, None]


def _prepare(model: Model, tokens, positions, past):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if len(tokens) != len(positions):
        raise ValueError("tokens and positions must have equal length")
    if past is None:
        past = LayeredKV.empty(model.cfg)
    if past.n_layers != model.cfg.layers:
        raise ValueError("past KV layer count does not match the model")
    if np.intersect1d(positions, past.positions).size:
        raise ValueError("new token positions collide with past positions")
    return tokens, positions, past


def forward(model: Model, tokens, positions, past: LayeredKV | None = None, mask=None, record: dict | None = None):
    """One model call: returns ``(logits, updated_kv)``.

    ``mask`` is ``(len(tokens), past.n_tokens + len(tokens))``; when omitted, each
    query sees every key whose position is <= its own. ``record``, if given,
    collects per-layer post-RoPE queries and attention weights.
    """
    tokens, positions, past = _prepare(model, tokens, positions, past)
    cfg = model.cfg
    n = len(tokens)
    if n == 0:
        return np.zeros((0, cfg.vocab), np.float32), past
    key_pos = np.concatenate([past.positions, positions])
    if mask is None:
        mask = causal_mask(positions, key_pos)
    x = model.embed_tokens(tokens)
    new_k = np.empty((cfg.layers, n, cfg.heads, cfg.head_dim), np.float32)
    new_v = np.empty_like(new_k)
    for layer in range(cfg.layers):
        q, k, v = model.qkv(layer, x, positions)
        new_k[layer], new_v[layer] = k, v
        keys = np.concatenate([past.k[layer], k])
        vals = np.concatenate([past.v[layer], v])
        out, w = masked_attention(q, keys, vals, mask, return_weights=True)
        if record is not None:
            record.setdefault("q", []).append(q)
            record.setdefault("weights", []).append(w)
        x = model.finish_layer(layer, x, out)
    updated = past.concat(LayeredKV(new_k, new_v, positions))
    return model.logits(x), updated


def last_layer_query_states(model: Model, tokens, positions, past: LayeredKV | None = None) -> np.ndarray:
    """Post-RoPE final-layer queries for ``tokens`` run against ``past``; ``past`` is untouched."""
    tokens, positions, past = _prepare(model, tokens, positions, past)
    cfg = model.cfg
    if len(tokens) == 0:
        return np.zeros((0, cfg.heads, cfg.head_dim), np.float32)
    key_pos = np.concatenate([past.positions, positions])
    mask = causal_mask(positions, key_pos)
    x = model.embed_tokens(tokens)
    for layer in range(cfg.layers - 1):
        q, k, v = model.qkv(layer, x, positions)
        out = masked_attention(q, np.concatenate([past.k[layer], k]), np.concatenate([past.v[layer], v]), mask)
        x = model.finish_layer(layer, x, out)
    q, _, _ = model.qkv(cfg.layers - 1, x, positions)
    return q


def greedy_decode(model: Model, first_logits: np.ndarray, past: LayeredKV, max_new_tokens: int, stop_tokens=()) -> list[int]:
    """Greedy argmax continuation starting from the logits of the last prompt token."""
    out: list[int] = []
    if max_new_tokens <= 0:
        return out
    tok = int(np.argmax(first_logits))
    pos = int(past.positions.max()) + 1 if past.n_tokens else 1
    while True:
        out.append(tok)
        if tok in stop_tokens or len(out) >= max_new_tokens:
            return out
        logits, past = forward(model, [tok], [pos], past)
        tok = int(np.argmax(logits[-1]))
        pos += 1


def init_model(cfg: ModelConfig) -> Model:
    """Random weights, N(0, 0.02) from a seeded PCG64 stream; norm gains start at 1."""
    rng = np.random.default_rng(cfg.seed)
    H, F, V = cfg.hidden, cfg.ffn_hidden, cfg.vocab

    def draw(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)

    embed = draw(V, H)
    layers = []
    for _ in range(cfg.layers):
        layers.append(LayerWeights(
            attn_norm=np.ones(H, np.float32), wq=draw(H, H), wk=draw(H, H), wv=draw(H, H), wo=draw(H, H),
            ffn_norm=np.ones(H, np.float32), w_gate=draw(H, F), w_up=draw(H, F), w_down=draw(F, H),
        ))
    return Model(cfg, embed, layers, np.ones(H, np.float32), draw(H, V))


# -- checkpoint file -----------------------------------------------------
#
# magic b"FTNY", u32 version, then config:
#   u32 layers, u32 heads, u32 head_dim, u32 vocab, u32 ffn_mult, u64 seed, f64 rope_base, f64 norm_eps
# then every tensor of Model.named_weights() in order as little-endian float32.

CHECKPOINT_MAGIC = b"FTNY"
CHECKPOINT_VERSION = 1
_CFG_STRUCT = struct.Struct("<4sIIIIIIQdd")


def save_checkpoint(model: Model, path) -> None:
    c = model.cfg
    with open(path, "wb") as f:
        f.write(_CFG_STRUCT.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, c.layers, c.heads, c.head_dim,
                                 c.vocab, c.ffn_mult, c.seed, c.rope_base, c.norm_eps))
        for _, w in model.named_weights():
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < _CFG_STRUCT.size:
        raise ValueError("checkpoint truncated")
    magic, version, layers, heads, head_dim, vocab, ffn_mult, seed, base, eps = _CFG_STRUCT.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(layers=layers, heads=heads, head_dim=head_dim, vocab=vocab, ffn_mult=ffn_mult,
                      seed=seed, rope_base=base, norm_eps=eps)
    offset = _CFG_STRUCT.size
    H, F, V = cfg.hidden, cfg.ffn_hidden, cfg.vocab
    shapes = {"attn_norm": (H,), "wq": (H, H), "wk": (H, H), "wv": (H, H), "wo": (H, H),
              "ffn_norm": (H,), "w_gate": (H, F), "w_up": (H, F), "w_down": (F, H)}

    def read(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 4
        if offset + n > len(data):
            raise ValueError("checkpoint truncated")
        arr = np.frombuffer(data, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += n
        return arr

    embed = read((V, H))
    layers = [LayerWeights(**{name: read(shapes[name]) for name in LAYER_FIELDS}) for _ in range(layers)]
    final_norm = read((H,))
    unembed = read((H, V))
    return Model(cfg, embed, layers, final_norm, unembed)
