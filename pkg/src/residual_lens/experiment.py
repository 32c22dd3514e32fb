"""Corpus runs and the statistics computed over them."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import tensor_ops as T
from .checkpoint import CheckpointBundle
from .errors import ContractError, ResidualLensError, UndefinedAUCError
from .idioms import IdiomSample
from .lens import METRICS, LensProfile, build_profile, cross_entropy_onehot
from .runtime import SamplerConfig, forward, generate
from .tokenizer import BpeVocab

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1.5
GROUPS = ("correct", "incorrect", "all")


@dataclass(frozen=True)
class BoxStats:
    n: int
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]


def box_stats(values: Sequence[float]) -> BoxStats:
    """Quartiles, 1.5 x IQR whiskers and the points beyond them.

    Whiskers end at the most extreme data point inside the fences, but never
    inside the box (interpolated quartiles can fall between data points).
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise ContractError("box_stats needs at least one value")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    outliers = x[(x < lo_fence) | (x > hi_fence)]
    return BoxStats(
        n=int(x.size),
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        whisker_low=float(min(inside.min(), q1)),
        whisker_high=float(max(inside.max(), q3)),
        outliers=tuple(float(v) for v in outliers),
    )


@dataclass
class LayerAggregate:
    """Box statistics per layer for one metric and one correctness group."""

    metric: str
    group: str
    layers: list[BoxStats]

    @property
    def medians(self) -> np.ndarray:
        return np.array([b.median for b in self.layers])


@dataclass
class DeltaLossTable:
    """Mean per-layer change of the gold-target CE; negative means the loss fell.

    Row ``i`` is the update made by block ``i + 1``.
    """

    groups: dict[str, np.ndarray]
    counts: dict[str, int]


@dataclass
class RocResult:
    points: np.ndarray  # (m, 2) rows of (false positive rate, true positive rate)
    thresholds: np.ndarray  # points[j] for j >= 1 classifies score <= thresholds[j - 1] as correct
    auc: float
    u_statistic: float
    n_correct: int
    n_incorrect: int


@dataclass
class FitSummary:
    exponential_rate: float
    exponential_mean: float
    normal_mean: float
    normal_std: float
    threshold: float
    n_correct: int
    n_incorrect: int
    # Kolmogorov-Smirnov distance of each sample to its fitted distribution.
    exponential_ks: float = float("nan")
    normal_ks: float = float("nan")
    # Fraction of all samples the threshold rule labels correctly.
    threshold_accuracy: float = float("nan")


@dataclass
class ExperimentResult:
    profiles: list[LensProfile]
    samples: list[IdiomSample]
    aggregates: list[LayerAggregate]
    delta_loss: DeltaLossTable
    roc: RocResult | None
    fits: FitSummary | None
    failures: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def roc_auc(correct_scores: Sequence[float], incorrect_scores: Sequence[float]) -> RocResult:
    """ROC of the rule "score <= t predicts correct", swept over every distinct score.

    The area is the trapezoid integral of the curve. ``u_statistic`` counts
    (correct, incorrect) pairs where the correct score is lower, ties
    counting one half, so ``auc == u_statistic / (n_correct * n_incorrect)``.
    """
    c = np.asarray(correct_scores, dtype=np.float64).ravel()
    w = np.asarray(incorrect_scores, dtype=np.float64).ravel()
    if c.size == 0 or w.size == 0:
        raise UndefinedAUCError(
            f"ROC needs both classes (got {c.size} correct, {w.size} incorrect)"
        )
    thresholds = np.unique(np.concatenate([c, w]))
    tpr = np.searchsorted(np.sort(c), thresholds, side="right") / c.size
    fpr = np.searchsorted(np.sort(w), thresholds, side="right") / w.size
    points = np.column_stack([np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr])])
    auc = float(np.sum(np.diff(points[:, 0]) * (points[1:, 1] + points[:-1, 1]) / 2.0))

    ranks = stats.rankdata(np.concatenate([c, w]))
    u = float(ranks[c.size:].sum() - w.size * (w.size + 1) / 2.0)
    return RocResult(points, thresholds, auc, u, int(c.size), int(w.size))


def fit_distributions(
    correct_scores: Sequence[float],
    incorrect_scores: Sequence[float],
    threshold: float = DEFAULT_THRESHOLD,
) -> FitSummary:
    c = np.asarray(correct_scores, dtype=np.float64)
    w = np.asarray(incorrect_scores, dtype=np.float64)
    if c.size == 0 or w.size == 0:
        raise ContractError("fit_distributions needs scores in both groups")
    mean_c = float(c.mean())
    rate = 1.0 / mean_c if mean_c > 0 else float("inf")
    mu, sd = float(w.mean()), float(w.std())
    exp_ks = float(stats.kstest(c, "expon", args=(0, mean_c)).statistic) if mean_c > 0 else float("nan")
    norm_ks = float(stats.kstest(w, "norm", args=(mu, sd)).statistic) if sd > 0 else float("nan")
    hits = np.sum(c <= threshold) + np.sum(w > threshold)
    return FitSummary(
        exponential_rate=rate,
        exponential_mean=mean_c,
        normal_mean=mu,
        normal_std=sd,
        threshold=float(threshold),
        n_correct=int(c.size),
        n_incorrect=int(w.size),
        exponential_ks=exp_ks,
        normal_ks=norm_ks,
        threshold_accuracy=float(hits / (c.size + w.size)),
    )


def delta_loss_table(profiles: Iterable[LensProfile]) -> DeltaLossTable:
    rows: dict[str, list[np.ndarray]] = {g: [] for g in GROUPS}
    for p in profiles:
        if p.ce_vs_gold is None:
            raise ContractError("delta_loss_table needs profiles built with a gold token")
        d = np.diff(p.ce_vs_gold)
        rows["all"].append(d)
        rows["correct" if p.correct else "incorrect"].append(d)
    groups = {g: np.mean(v, axis=0) for g, v in rows.items() if v}
    return DeltaLossTable(groups=groups, counts={g: len(v) for g, v in rows.items()})


def layer_aggregates(profiles: Sequence[LensProfile], metrics: Sequence[str] = METRICS) -> list[LayerAggregate]:
    out = []
    for metric in metrics:
        members: dict[str, list[np.ndarray]] = {g: [] for g in GROUPS}
        for p in profiles:
            values = p.metric(metric)
            if values is None:
                continue
            members["all"].append(values)
            if p.correct is not None:
                members["correct" if p.correct else "incorrect"].append(values)
        for group in GROUPS:
            if not members[group]:
                continue
            mat = np.stack(members[group])
            out.append(LayerAggregate(metric, group, [box_stats(mat[:, i]) for i in range(mat.shape[1])]))
    return out


def split_output_ce(profiles: Iterable[LensProfile]) -> tuple[list[float], list[float]]:
    correct, incorrect = [], []
    for p in profiles:
        (correct if p.correct else incorrect).append(p.output_ce)
    return correct, incorrect


def _profile_sample(bundle, vocab, sample, keep_logits):
    ids = vocab.encode(sample.prompt)
    result = forward(bundle, ids)
    return build_profile(bundle, result.trace, gold=sample.target_token, keep_logits=keep_logits)


def run_idiom_experiment(
    bundle: CheckpointBundle,
    vocab: BpeVocab,
    samples: Sequence[IdiomSample],
    threshold: float = DEFAULT_THRESHOLD,
    workers: int = 1,
    keep_logits: bool = False,
    metrics: Sequence[str] = METRICS,
) -> ExperimentResult:
    """Greedy single-token prediction for every prompt, then all aggregates.

    A sample whose forward pass fails is recorded in ``failures`` and left
    out of the statistics.
    """
    if not samples:
        raise ContractError("run_idiom_experiment needs at least one sample")
    ordered = sorted(samples, key=lambda s: s.source_index)

    def run(sample):
        try:
            return _profile_sample(bundle, vocab, sample, keep_logits), None
        except ResidualLensError as exc:
            log.warning("sample %d failed: %s", sample.source_index, exc)
            return None, {"source_index": sample.source_index, "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, ordered))
    else:
        outcomes = [run(s) for s in ordered]

    profiles, kept, failures = [], [], []
    for sample, (profile, failure) in zip(ordered, outcomes):
        if failure is not None:
            failures.append(failure)
        else:
            profiles.append(profile)
            kept.append(sample)

    notes = []
    aggregates = layer_aggregates(profiles, metrics) if profiles else []
    delta = delta_loss_table(profiles)
    correct, incorrect = split_output_ce(profiles)
    try:
        roc = roc_auc(correct, incorrect)
    except UndefinedAUCError as exc:
        roc = None
        notes.append(f"undefined AUC: {exc}")
    fits = fit_distributions(correct, incorrect, threshold) if correct and incorrect else None
    return ExperimentResult(profiles, kept, aggregates, delta, roc, fits, failures, notes)


@dataclass(frozen=True)
class TokenRecord:
    step: int
    token_id: int
    token_text: str
    argmax_id: int
    ce_vs_argmax: float
    ce_vs_sampled: float
    flagged: bool


def generation_scan(
    bundle: CheckpointBundle,
    vocab: BpeVocab,
    prompt: str,
    cfg: SamplerConfig,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[list[TokenRecord], bool]:
    """Per-token output cross-entropy along a generated continuation.

    Returns the records and whether generation stopped at the context limit.
    Each token is flagged when its CE against the argmax prediction exceeds
    ``threshold``.
    """
    if not prompt:
        raise ContractError("generation_scan needs a non-empty prompt")
    gen = generate(bundle, vocab.encode(prompt), cfg)
    records = []
    for i, step in enumerate(gen.steps):
        logits = step.result.logits
        top = T.argmax_lowest(logits)
        ce_top = cross_entropy_onehot(logits, top)
        records.append(TokenRecord(
            step=i + 1,
            token_id=step.token,
            token_text=vocab.decode([step.token]),
            argmax_id=top,
            ce_vs_argmax=ce_top,
            ce_vs_sampled=cross_entropy_onehot(logits, step.token),
            flagged=ce_top > threshold,
        ))
    return records, gen.truncated
