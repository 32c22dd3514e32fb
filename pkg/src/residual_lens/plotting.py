"""Figures rendered next to the data files when ``--figures`` is passed.

matplotlib is imported lazily so the numeric core never depends on it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .experiment import ExperimentResult, TokenRecord
from .lens import LensProfile

CORRECT_COLOR = "tab:blue"
INCORRECT_COLOR = "tab:red"

_TITLES = {
    "ce_vs_sampled": "Cross-entropy (layer, argmax target)",
    "ce_vs_gold": "Cross-entropy (layer, gold target)",
    "kl_vs_output_logits": "KL divergence (layer, output logits)",
    "kl_vs_sampled_onehot": "KL divergence (layer, argmax one-hot)",
    "cosine_vs_sampled_embedding": "Cosine similarity (layer, argmax embedding)",
    "cosine_vs_gold_embedding": "Cosine similarity (layer, gold embedding)",
}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.dpi": 110, "axes.spines.top": False, "axes.spines.right": False})
    return plt


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path)
    return path.name


def _layer_boxes(ax, profiles, metric):
    groups = [
        ([p for p in profiles if p.correct], CORRECT_COLOR, -0.2, "correct"),
        ([p for p in profiles if p.correct is False], INCORRECT_COLOR, 0.2, "incorrect"),
    ]
    for members, color, shift, label in groups:
        if not members:
            continue
        mat = np.stack([p.metric(metric) for p in members])
        pos = np.arange(mat.shape[1]) + shift
        bp = ax.boxplot(
            [mat[:, i] for i in range(mat.shape[1])], positions=pos, widths=0.35,
            patch_artist=True, manage_ticks=False, flierprops={"markersize": 2},
        )
        for box in bp["boxes"]:
            box.set(facecolor=color, alpha=0.45, edgecolor=color)
        for key in ("medians", "whiskers", "caps", "fliers"):
            for artist in bp[key]:
                artist.set(color=color)
        ax.plot([], [], color=color, label=f"{label} (n={len(members)})")
    ax.set_xlabel("layer")
    ax.legend(frameon=False)


def idiom_figures(result: ExperimentResult, out_dir: str | Path, metrics: Sequence[str]) -> list[str]:
    plt = _pyplot()
    out_dir = Path(out_dir)
    files = []
    profiles = result.profiles
    for metric in metrics:
        if not profiles or profiles[0].metric(metric) is None:
            continue
        fig, ax = plt.subplots(figsize=(10, 4))
        _layer_boxes(ax, profiles, metric)
        ax.set_title(_TITLES[metric])
        files.append(_save(fig, out_dir / f"layers_{metric}.png"))
        plt.close(fig)

    if result.roc is not None and result.fits is not None:
        fits = result.fits
        correct = [p.output_ce for p in profiles if p.correct]
        incorrect = [p.output_ce for p in profiles if p.correct is False]
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
        bins = np.linspace(0, max(correct + incorrect) * 1.05, 30)
        ax0.hist(correct, bins=bins, density=True, alpha=0.5, color=CORRECT_COLOR, label="correct")
        ax0.hist(incorrect, bins=bins, density=True, alpha=0.5, color=INCORRECT_COLOR, label="incorrect")
        xs = np.linspace(0, bins[-1], 200)
        ax0.plot(xs, fits.exponential_rate * np.exp(-fits.exponential_rate * xs), color=CORRECT_COLOR)
        if fits.normal_std > 0:
            z = (xs - fits.normal_mean) / fits.normal_std
            ax0.plot(xs, np.exp(-0.5 * z**2) / (fits.normal_std * np.sqrt(2 * np.pi)), color=INCORRECT_COLOR)
        ax0.axvline(fits.threshold, color="0.4", ls="--", lw=1)
        ax0.set_xlabel("output cross-entropy (nats)")
        ax0.legend(frameon=False)
        pts = result.roc.points
        ax1.plot(pts[:, 0], pts[:, 1], color="k")
        ax1.plot([0, 1], [0, 1], color="0.7", ls=":")
        ax1.set_xlabel("false positive rate")
        ax1.set_ylabel("true positive rate")
        ax1.set_title(f"AUC = {result.roc.auc:.4f}")
        files.append(_save(fig, out_dir / "output_ce.png"))
        plt.close(fig)

    groups = [g for g in ("correct", "incorrect", "all") if g in result.delta_loss.groups]
    if groups:
        mat = np.stack([result.delta_loss.groups[g] for g in groups])
        lim = float(np.abs(mat).max()) or 1.0
        fig, ax = plt.subplots(figsize=(12, 1 + 0.5 * len(groups)))
        im = ax.imshow(mat, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
        ax.set_yticks(range(len(groups)), groups)
        ax.set_xticks(range(mat.shape[1]), [str(i + 1) for i in range(mat.shape[1])], fontsize=7)
        ax.set_xlabel("layer")
        fig.colorbar(im, ax=ax, label="mean change in CE (gold)")
        files.append(_save(fig, out_dir / "delta_loss.png"))
        plt.close(fig)
    return files


def token_figure(records: Sequence[TokenRecord], out_dir: str | Path, threshold: float) -> list[str]:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(6, 0.25 * len(records) + 2), 3.5))
    steps = [r.step for r in records]
    colors = [INCORRECT_COLOR if r.flagged else CORRECT_COLOR for r in records]
    ax.bar(steps, [r.ce_vs_argmax for r in records], color=colors)
    ax.set_xticks(steps, [r.token_text for r in records], rotation=90, fontsize=7)
    ax.axhline(threshold, color="0.4", ls="--", lw=1)
    ax.set_ylabel("output cross-entropy (nats)")
    name = _save(fig, Path(out_dir) / "tokens.png")
    plt.close(fig)
    return [name]


def trace_figure(profile: LensProfile, out_dir: str | Path) -> list[str]:
    plt = _pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.5))
    layers = np.arange(profile.n_states)
    ax0.plot(layers, profile.ce_vs_sampled, label="argmax target")
    if profile.ce_vs_gold is not None:
        ax0.plot(layers, profile.ce_vs_gold, label="gold target")
    ax0.set_ylabel("cross-entropy (nats)")
    ax1.plot(layers, profile.cosine_vs_sampled_embedding, label="argmax target")
    if profile.cosine_vs_gold_embedding is not None:
        ax1.plot(layers, profile.cosine_vs_gold_embedding, label="gold target")
    ax1.set_ylabel("cosine similarity")
    for ax in (ax0, ax1):
        ax.set_xlabel("layer")
        ax.legend(frameon=False)
    name = _save(fig, Path(out_dir) / "trace.png")
    plt.close(fig)
    return [name]
