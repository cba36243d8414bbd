"""Miniature decoder-only transformer.

Pre-norm residual blocks: RMSNorm -> causal attention (RoPE, grouped KV
heads) -> residual, RMSNorm -> SwiGLU FFN -> residual; final RMSNorm and
an output projection. No biases, no weight tying, no KV cache.

Weight layout: every projection is stored [in_features, out_features] and
applied as x @ W. The embedding table is [vocab, d_model] (row gather),
the output projection [d_model, vocab].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError, VocabError
from .tensor import Tensor, from_op, _accumulate


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int | None = None
    d_ff: int = 0
    max_seq_len: int = 256
    rope_base: float = 10000.0
    rms_eps: float = 1e-5

    def __post_init__(self):
        kv = self.n_kv_heads if self.n_kv_heads is not None else self.n_heads
        object.__setattr__(self, "n_kv_heads", kv)
        if self.d_ff <= 0:
            raise ConfigError(f"d_ff must be positive, got {self.d_ff}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % kv != 0:
            raise ConfigError(f"n_heads {self.n_heads} not divisible by n_kv_heads {kv}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary embedding")
        if self.rope_base <= 0 or self.rms_eps <= 0:
            raise ConfigError("rope_base and rms_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "rope_base": self.rope_base,
            "rms_eps": self.rms_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def toy_config() -> ModelConfig:
    return ModelConfig(
        vocab_size=512, d_model=64, n_layers=2, n_heads=4, n_kv_heads=2,
        d_ff=256, max_seq_len=256,
    )


LAYER_MATRICES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in serialization order."""
    d, ff = config.d_model, config.d_ff
    kv_dim = config.n_kv_heads * config.head_dim
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, kv_dim)
        shapes[p + "wv"] = (d, kv_dim)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_gate"] = (d, ff)
        shapes[p + "w_up"] = (d, ff)
        shapes[p + "w_down"] = (ff, d)
    shapes["final_norm"] = (d,)
    shapes["output"] = (d, config.vocab_size)
    return shapes


class DecoderWeights:
    """Named parameter set for one model. Norm gains start at 1, matrices
    Gaussian(0, 0.02); both seeded."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = weight_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, t in params.items():
            if t.shape != expected[name]:
                raise ConfigError(f"{name} has shape {t.shape}, expected {expected[name]}")
        self.config = config
        self._params = {name: params[name] for name in expected}  # fixed order

    @classmethod
    def init_random(cls, config: ModelConfig, seed: int, std: float = 0.02) -> "DecoderWeights":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in weight_shapes(config).items():
            if name.endswith("norm"):
                params[name] = Tensor(np.ones(shape), requires_grad=True)
            else:
                params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
        return cls(config, params)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        p = f"layers.{i}."
        return {k[len(p):]: v for k, v in self._params.items() if k.startswith(p)}

    def set_trainable(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag

    def copy(self) -> "DecoderWeights":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self._params.items()}
        return DecoderWeights(self.config, params)


@dataclass
class DecoderLM:
    """A model handle: config + weights + optionally attached LoRA adapters.

    adapters maps full parameter names (e.g. "layers.0.wq") to adapter
    objects exposing A, B, rank, alpha."""

    config: ModelConfig
    weights: DecoderWeights
    adapters: dict | None = None

    def snapshot(self) -> "DecoderLM":
        """Frozen deep copy for use as a reference policy; adapters, if any,
        are folded in so the snapshot scores what the policy currently is."""
        w = self.weights.copy()
        if self.adapters:
            from .lora import merged_weights  # local import, avoids cycle
            w = merged_weights(DecoderLM(self.config, w, self.adapters))
        w.set_trainable(False)
        return DecoderLM(self.config, w, None)


# -------------------------------------------------------------- differentiable


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """y_i = gain_i * x_i / sqrt(mean_i(x_i^2) + eps), over the trailing axis."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rmsnorm gain shape {gain.shape} vs trailing dim {d}")
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    y = gain.data * x.data / r

    def bw(g):
        if x.requires_grad:
            gg = g * gain.data
            s = (gg * x.data).sum(axis=-1, keepdims=True)
            _accumulate(x, gg / r - x.data * s / (d * r ** 3))
        if gain.requires_grad:
            contrib = g * x.data / r
            _accumulate(gain, contrib.reshape(-1, d).sum(axis=0))

    return from_op(y, (x, gain), bw)


def _rope_angles(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    theta = base ** (-2.0 * np.arange(half) / head_dim)
    ang = positions[:, None] * theta[None, :]  # [T, half]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions: Sequence[int], base: float) -> Tensor:
    """Rotate consecutive pairs of head dims by position-dependent angles.

    x is [T, n_heads, head_dim]; pair i spins at theta_i = base^(-2i/head_dim).
    The rotation is orthogonal, so backward applies the inverse rotation."""
    if x.data.ndim != 3:
        raise ShapeError(f"rope_apply expects [T, heads, head_dim], got {x.shape}")
    t, _, hd = x.shape
    if hd % 2 != 0:
        raise ConfigError(f"rope head_dim {hd} must be even")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (t,):
        raise ContractError(f"positions length {pos.shape} vs sequence length {t}")
    cos, sin = _rope_angles(pos, hd, base)
    cos = cos[:, None, :]  # broadcast over heads
    sin = sin[:, None, :]
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        if x.requires_grad:
            ge, go = g[..., 0::2], g[..., 1::2]
            d = np.empty_like(g)
            d[..., 0::2] = ge * cos + go * sin
            d[..., 1::2] = -ge * sin + go * cos
            _accumulate(x, d)

    return from_op(y, (x,), bw)


MASK_VALUE = -1e30  # finite stand-in for -inf; exp() underflows to exactly 0


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_VALUE), k=1)


def _linear(x: Tensor, w: Tensor, adapter) -> Tensor:
    """x @ W, plus the low-rank update (alpha/r) * x @ A^T @ B^T if adapted."""
    y = T.matmul(x, w)
    if adapter is not None:
        down = T.matmul_t(x, adapter.A)        # [T, r]
        up = T.matmul_t(down, adapter.B)       # [T, out]
        y = T.add(y, T.scale(up, adapter.alpha / adapter.rank))
    return y


def _adapter_for(adapters: dict | None, name: str):
    return adapters.get(name) if adapters else None


def causal_attention(
    x: Tensor,
    layer: dict[str, Tensor],
    positions: Sequence[int],
    config: ModelConfig,
    adapters: dict | None = None,
    layer_prefix: str = "",
) -> Tensor:
    """Multi-head causal self-attention with RoPE and grouped KV heads."""
    t = x.shape[0]
    nh, nkv, hd = config.n_heads, config.n_kv_heads, config.head_dim
    q = _linear(x, layer["wq"], _adapter_for(adapters, layer_prefix + "wq"))
    k = _linear(x, layer["wk"], _adapter_for(adapters, layer_prefix + "wk"))
    v = _linear(x, layer["wv"], _adapter_for(adapters, layer_prefix + "wv"))

    q3 = T.permute(T.reshape(q, (t, nh, hd)), (1, 0, 2))     # [nh, T, hd]
    k3 = T.permute(T.reshape(k, (t, nkv, hd)), (1, 0, 2))    # [nkv, T, hd]
    v3 = T.permute(T.reshape(v, (t, nkv, hd)), (1, 0, 2))

    q3 = _rope_heads(q3, positions, config.rope_base)
    k3 = _rope_heads(k3, positions, config.rope_base)

    if nkv != nh:
        k3 = T.repeat_heads(k3, nh // nkv)
        v3 = T.repeat_heads(v3, nh // nkv)

    scores = T.scale(T.matmul(q3, T.permute(k3, (0, 2, 1))), 1.0 / np.sqrt(hd))
    scores = T.add_constant(scores, _causal_mask(t)[None, :, :])
    attn = T.softmax_rows(scores)
    ctx = T.matmul(attn, v3)                                  # [nh, T, hd]
    merged = T.reshape(T.permute(ctx, (1, 0, 2)), (t, nh * hd))
    return _linear(merged, layer["wo"], _adapter_for(adapters, layer_prefix + "wo"))


def _rope_heads(x3: Tensor, positions, base: float) -> Tensor:
    # rope_apply wants [T, heads, hd]; attention keeps heads leading
    return T.permute(rope_apply(T.permute(x3, (1, 0, 2)), positions, base), (1, 0, 2))


def swiglu_ffn(
    x: Tensor,
    layer: dict[str, Tensor],
    adapters: dict | None = None,
    layer_prefix: str = "",
) -> Tensor:
    """W_down @ (silu(W_gate x) * (W_up x)), in x @ W orientation."""
    gate = T.silu(_linear(x, layer["w_gate"], _adapter_for(adapters, layer_prefix + "w_gate")))
    up = _linear(x, layer["w_up"], _adapter_for(adapters, layer_prefix + "w_up"))
    return _linear(T.mul(gate, up), layer["w_down"], _adapter_for(adapters, layer_prefix + "w_down"))


def _check_tokens(config: ModelConfig, tokens) -> list[int]:
    ids = [int(t) for t in tokens]
    if len(ids) == 0:
        raise ContractError("empty token sequence")
    if len(ids) > config.max_seq_len:
        raise ContractError(
            f"sequence length {len(ids)} exceeds max_seq_len {config.max_seq_len}"
        )
    for pos, t in enumerate(ids):
        if not 0 <= t < config.vocab_size:
            raise VocabError(f"token id {t} at position {pos} outside vocab of size {config.vocab_size}")
    return ids


def hidden_states(lm: DecoderLM, tokens, positions: Sequence[int] | None = None) -> Tensor:
    """Final-norm hidden states [T, d_model] before the output projection."""
    ids = _check_tokens(lm.config, tokens)
    if positions is None:
        positions = list(range(len(ids)))
    cfg, w, adp = lm.config, lm.weights, lm.adapters
    x = T.embedding_gather(w["embedding"], ids)
    for i in range(cfg.n_layers):
        layer = w.layer(i)
        prefix = f"layers.{i}."
        h = rmsnorm(x, layer["attn_norm"], cfg.rms_eps)
        x = T.add(x, causal_attention(h, layer, positions, cfg, adp, prefix))
        h = rmsnorm(x, layer["ffn_norm"], cfg.rms_eps)
        x = T.add(x, swiglu_ffn(h, layer, adp, prefix))
    return rmsnorm(x, w["final_norm"], cfg.rms_eps)


def forward(lm: DecoderLM, tokens, positions: Sequence[int] | None = None) -> Tensor:
    """Logits [T, vocab] for a token sequence."""
    return T.matmul(hidden_states(lm, tokens, positions), lm.weights["output"])


def generate(
    lm: DecoderLM,
    prompt_ids: Sequence[int],
    max_new: int,
    temperature: float = 0.0,
    seed: int = 0,
    stop_token: int | None = None,
) -> list[int]:
    """Continuation of prompt_ids; at most max_new tokens.

    temperature 0 is greedy argmax (ties break to the lowest id); positive
    temperature samples from softmax(logits / temperature) with a seeded
    generator. Generation halts on stop_token, which is not included in
    the returned list. No KV cache: each step reruns the full prefix.
    """
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    if max_new < 0:
        raise ConfigError(f"max_new must be >= 0, got {max_new}")
    ids = _check_tokens(lm.config, prompt_ids)
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for _ in range(max_new):
        if len(ids) >= lm.config.max_seq_len:
            break
        logits = forward(lm, ids).data[-1]
        if temperature == 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        if stop_token is not None and nxt == stop_token:
            break
        out.append(nxt)
        ids.append(nxt)
    return out
