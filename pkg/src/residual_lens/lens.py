"""Logit-lens projections of a residual trajectory and the metrics built on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor_ops as T
from .checkpoint import CheckpointBundle
from .errors import ContractError
from .runtime import ResidualTrace, project

METRICS = (
    "ce_vs_sampled",
    "ce_vs_gold",
    "kl_vs_output_logits",
    "kl_vs_sampled_onehot",
    "cosine_vs_sampled_embedding",
    "cosine_vs_gold_embedding",
)


@dataclass(frozen=True)
class TargetSpec:
    kind: Literal["sampled", "gold"]
    token_id: int

    def __post_init__(self):
        if self.kind not in ("sampled", "gold"):
            raise ContractError(f"unknown target kind {self.kind!r}")


@dataclass
class LensProfile:
    """Per-layer metrics for one prompt; every array has ``n_layer + 1`` entries.

    Index 0 is the embedding state before any block runs. The ``*_gold``
    arrays are None when no gold token was supplied.
    """

    sampled_token: int
    gold_token: int | None
    top_token: np.ndarray
    ce_vs_sampled: np.ndarray
    kl_vs_output_logits: np.ndarray
    kl_vs_sampled_onehot: np.ndarray
    cosine_vs_sampled_embedding: np.ndarray
    ce_vs_gold: np.ndarray | None = None
    cosine_vs_gold_embedding: np.ndarray | None = None
    residual_logits: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return len(self.ce_vs_sampled)

    @property
    def output_ce(self) -> float:
        return float(self.ce_vs_sampled[-1])

    @property
    def correct(self) -> bool | None:
        if self.gold_token is None:
            return None
        return self.sampled_token == self.gold_token

    def metric(self, name: str) -> np.ndarray | None:
        if name not in METRICS:
            raise ContractError(f"unknown metric {name!r}")
        return getattr(self, name)


def residual_prediction(bundle: CheckpointBundle, e: np.ndarray) -> np.ndarray:
    """Logits obtained by reading a residual state out through the output head."""
    if np.shape(e)[-1] != bundle.config.n_embd:
        raise ContractError(f"residual width {np.shape(e)[-1]} != n_embd {bundle.config.n_embd}")
    return project(bundle, e)


def cross_entropy_onehot(logits: np.ndarray, target: int) -> float:
    """Negative log-probability of ``target`` under ``softmax(logits)``, in nats."""
    logits = np.asarray(logits)
    if not 0 <= int(target) < logits.shape[-1]:
        raise ContractError(f"target {target} out of range for {logits.shape[-1]} logits")
    return float(-T.log_softmax(logits)[int(target)])


def kl_divergence(candidate_logits: np.ndarray, target_probs: np.ndarray) -> float:
    """KL(target || softmax(candidate)), treating 0 * log 0 as 0."""
    p = np.asarray(target_probs, dtype=np.float64)
    if p.shape[-1] != np.shape(candidate_logits)[-1]:
        raise ContractError("kl_divergence: length mismatch")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError("target_probs must be a probability vector")
    log_q = T.log_softmax(candidate_logits)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - log_q[nz])))


def onehot(index: int, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.float64)
    out[index] = 1.0
    return out


def build_profile(
    bundle: CheckpointBundle,
    trace: ResidualTrace,
    gold: int | None = None,
    keep_logits: bool = False,
) -> LensProfile:
    cfg = bundle.config
    states = trace.states
    if states.shape != (cfg.n_layer + 1, cfg.n_embd):
        raise ContractError(f"trace shape {states.shape} does not match the model")
    if gold is not None and not 0 <= gold < cfg.vocab_size:
        raise ContractError(f"gold token {gold} outside vocabulary")

    # Row-by-row so the last row repeats the forward pass's projection exactly.
    logits = np.stack([residual_prediction(bundle, s) for s in states])
    log_q = T.log_softmax(logits)
    y_hat = T.argmax_lowest(logits[-1])

    log_p_out = log_q[-1]
    p_out = np.exp(log_p_out)
    kl_out = np.sum(p_out * (log_p_out - log_q), axis=-1)
    ce_hat = -log_q[:, y_hat]

    wte = bundle.wte
    cos_hat = np.array([T.cosine(s, wte[y_hat]) for s in states])
    profile = LensProfile(
        sampled_token=y_hat,
        gold_token=gold,
        top_token=logits.argmax(axis=-1),
        ce_vs_sampled=ce_hat,
        kl_vs_output_logits=np.maximum(kl_out, 0.0),
        # KL against a one-hot target carries no entropy term: it is the CE.
        kl_vs_sampled_onehot=ce_hat.copy(),
        cosine_vs_sampled_embedding=cos_hat,
        residual_logits=logits if keep_logits else None,
    )
    if gold is not None:
        if gold == y_hat:
            profile.ce_vs_gold = ce_hat.copy()
            profile.cosine_vs_gold_embedding = cos_hat.copy()
        else:
            profile.ce_vs_gold = -log_q[:, gold]
            profile.cosine_vs_gold_embedding = np.array([T.cosine(s, wte[gold]) for s in states])
    return profile
