"""GPT-2 forward pass that records the last position's residual trajectory.

Each block applies ``x += attn(ln_1(x))`` then ``x += mlp(ln_2(x))``. The
residual of the final position is captured after the embeddings and after
every block, giving ``n_layer + 1`` states per forward call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import tensor_ops as T
from .checkpoint import CheckpointBundle
from .errors import ContextOverflowError, ContractError


@dataclass(frozen=True)
class KVCache:
    """Per-layer keys and values, each shaped (n_head, positions, head_dim).

    Never mutated: every forward call returns a fresh cache, so a cache can
    be reused to branch several continuations from the same prefix.
    """

    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]

    @property
    def length(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0


@dataclass(frozen=True)
class ResidualTrace:
    states: np.ndarray  # (n_layer + 1, n_embd)
    # Per-layer (attention, mlp) contributions to the last position, only
    # filled when forward(..., record_updates=True).
    updates: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    trace: ResidualTrace
    kv_cache: KVCache = field(repr=False)

    @property
    def position(self) -> int:
        """Absolute position of the token these logits condition on."""
        return self.kv_cache.length - 1


@dataclass(frozen=True)
class SamplerConfig:
    seed: int = 0
    temperature: float = 1.0
    max_tokens: int = 32
    mode: Literal["greedy", "temperature"] = "greedy"

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ContractError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "temperature" and not self.temperature > 0:
            raise ContractError("temperature must be positive in temperature mode")
        if self.max_tokens < 0:
            raise ContractError("max_tokens must be >= 0")
        if self.seed < 0:
            raise ContractError("seed must be non-negative")


@dataclass(frozen=True)
class GenerationStep:
    token: int
    result: ForwardResult  # the forward pass whose logits produced ``token``


@dataclass
class Generation:
    prompt: list[int]
    steps: list[GenerationStep]
    truncated: bool = False

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]


def project(bundle: CheckpointBundle, residual: np.ndarray) -> np.ndarray:
    """Final layer norm followed by the tied unembedding."""
    residual = np.asarray(residual)
    if residual.shape[-1] != bundle.config.n_embd:
        raise ContractError(f"residual width {residual.shape[-1]} != n_embd {bundle.config.n_embd}")
    g, b = bundle.ln_f
    h = T.layer_norm(residual, g, b, bundle.config.layer_norm_epsilon)
    return (h.astype(np.float64) @ bundle.unembedding64).astype(np.float32)


def _attention(bundle, w, x, past_k, past_v, offset):
    cfg = bundle.config
    n_new = x.shape[0]
    h = T.layer_norm(x, w.ln_1_g, w.ln_1_b, cfg.layer_norm_epsilon)
    qkv = T.linear(h, w.attn_w, w.attn_b)
    q, k, v = np.split(qkv, 3, axis=-1)
    # (positions, n_embd) -> (n_head, positions, head_dim)
    q, k, v = (a.reshape(n_new, cfg.n_head, cfg.head_dim).transpose(1, 0, 2) for a in (q, k, v))
    if past_k is not None:
        k = np.concatenate([past_k, k], axis=1)
        v = np.concatenate([past_v, v], axis=1)
    scores = (q.astype(np.float64) @ k.astype(np.float64).transpose(0, 2, 1)) / math.sqrt(cfg.head_dim)
    total = k.shape[1]
    q_pos = offset + np.arange(n_new)[:, None]
    k_pos = np.arange(total)[None, :]
    scores = scores + np.where(k_pos > q_pos, -np.inf, 0.0)
    # Each query sees at least itself, so every row has a finite maximum.
    probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    ctx = (probs @ v.astype(np.float64)).astype(np.float32)
    ctx = ctx.transpose(1, 0, 2).reshape(n_new, cfg.n_embd)
    return T.linear(ctx, w.proj_w, w.proj_b), np.ascontiguousarray(k), np.ascontiguousarray(v)


def _mlp(bundle, w, x):
    h = T.layer_norm(x, w.ln_2_g, w.ln_2_b, bundle.config.layer_norm_epsilon)
    return T.linear(T.gelu(T.linear(h, w.fc_w, w.fc_b)), w.mlp_proj_w, w.mlp_proj_b)


def forward(
    bundle: CheckpointBundle,
    tokens: Sequence[int],
    cache: KVCache | None = None,
    record_updates: bool = False,
) -> ForwardResult:
    """Run ``tokens`` through the model, continuing from ``cache`` if given.

    With a cache only the new tokens are supplied; their positions continue
    from ``cache.length``.
    """
    cfg = bundle.config
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    if ids.size == 0:
        raise ContractError("forward needs at least one token")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractError(f"token id out of range for vocab_size={cfg.vocab_size}")
    offset = cache.length if cache is not None else 0
    if offset + ids.size > cfg.n_ctx:
        raise ContextOverflowError(f"{offset + ids.size} positions exceed n_ctx={cfg.n_ctx}")

    x = bundle.wte[ids] + bundle.wpe[offset : offset + ids.size]
    states = [x[-1].copy()]
    updates = []
    keys, values = [], []
    for i in range(cfg.n_layer):
        w = bundle.layer(i)
        past_k = cache.keys[i] if cache is not None else None
        past_v = cache.values[i] if cache is not None else None
        attn_out, k, v = _attention(bundle, w, x, past_k, past_v, offset)
        x = x + attn_out
        mlp_out = _mlp(bundle, w, x)
        x = x + mlp_out
        states.append(x[-1].copy())
        keys.append(k)
        values.append(v)
        if record_updates:
            updates.append(np.stack([attn_out[-1], mlp_out[-1]]))

    states = np.stack(states)
    logits = project(bundle, states[-1])
    trace = ResidualTrace(states, np.stack(updates) if record_updates else None)
    return ForwardResult(logits, trace, KVCache(tuple(keys), tuple(values)))


def sampled_token(result: ForwardResult | np.ndarray) -> int:
    """The argmax token of a forward result (lowest id wins ties).

    This is the model's deterministic prediction regardless of how the
    continuation itself was sampled.
    """
    logits = result.logits if isinstance(result, ForwardResult) else result
    return T.argmax_lowest(logits)


def _draw(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    if cfg.mode == "greedy":
        return T.argmax_lowest(logits)
    probs = T.softmax(logits, cfg.temperature)
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def generate(bundle: CheckpointBundle, prompt: Sequence[int], cfg: SamplerConfig) -> Generation:
    """Autoregressive decoding with a KV cache.

    Stops early and sets ``truncated`` when the context window fills up.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ContractError("generate needs a non-empty prompt")
    gen = Generation(prompt=prompt, steps=[])
    if cfg.max_tokens == 0:
        return gen
    rng = np.random.default_rng(cfg.seed)
    result = forward(bundle, prompt)
    while True:
        token = _draw(result.logits, cfg, rng)
        gen.steps.append(GenerationStep(token, result))
        if len(gen.steps) >= cfg.max_tokens:
            break
        if result.kv_cache.length + 1 > bundle.config.n_ctx:
            gen.truncated = True
            break
        result = forward(bundle, [token], result.kv_cache)
    return gen
