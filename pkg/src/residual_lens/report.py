"""File formats for experiment outputs.

Layer-indexed tables go to CSV (or JSON with ``fmt="json"``), per-sample
records to JSONL, scalars to JSON. Nothing here writes timestamps except the
run manifest, so data files from identical greedy runs are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
import os
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .experiment import DeltaLossTable, ExperimentResult, FitSummary, LayerAggregate, RocResult, TokenRecord
from .idioms import IdiomSample
from .lens import METRICS, LensProfile
from .tokenizer import BpeVocab

AGGREGATE_COLUMNS = (
    "metric", "group", "layer", "n", "q1", "median", "q3",
    "whisker_low", "whisker_high", "n_outliers", "outliers",
)
DELTA_COLUMNS = ("layer", "correct", "incorrect", "all")
ROC_COLUMNS = ("threshold", "fpr", "tpr")
TOKEN_FIELDS = ("step", "token_id", "token_text", "argmax_id", "ce_vs_argmax", "ce_vs_sampled", "flagged")
PROFILE_FIELDS = (
    "source_index", "idiom_text", "prompt", "target_word", "gold_token", "sampled_token",
    "sampled_text", "correct", "output_ce", "top_token", *METRICS,
)
TRACE_METRIC_COLUMNS = {
    "ce": ("ce_vs_sampled", "ce_vs_gold"),
    "kl": ("kl_vs_output_logits", "kl_vs_sampled_onehot"),
    "cosine": ("cosine_vs_sampled_embedding", "cosine_vs_gold_embedding"),
}
TRACE_METRIC_COLUMNS["all"] = tuple(c for k in ("ce", "kl", "cosine") for c in TRACE_METRIC_COLUMNS[k])


def _num(x) -> float | None:
    x = float(x)
    return None if math.isnan(x) else x


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return None if not math.isfinite(f) else f
    return obj


def dump_json(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if v is None else v for v in r])


def _fmt(x) -> str | None:
    if x is None:
        return None
    return repr(float(x))


# -- idiom experiment ----------------------------------------------------------


def profile_record(profile: LensProfile, sample: IdiomSample | None, vocab: BpeVocab | None) -> dict:
    rec = {
        "source_index": sample.source_index if sample else None,
        "idiom_text": sample.idiom_text if sample else None,
        "prompt": sample.prompt if sample else None,
        "target_word": sample.target_word if sample else None,
        "gold_token": profile.gold_token,
        "sampled_token": profile.sampled_token,
        "sampled_text": vocab.decode([profile.sampled_token]) if vocab else None,
        "correct": profile.correct,
        "output_ce": profile.output_ce,
        "top_token": [int(t) for t in profile.top_token],
    }
    for m in METRICS:
        arr = profile.metric(m)
        rec[m] = None if arr is None else [float(v) for v in arr]
    return rec


def aggregate_rows(aggregates: Iterable[LayerAggregate]) -> list[tuple]:
    rows = []
    for agg in aggregates:
        for layer, b in enumerate(agg.layers):
            rows.append((
                agg.metric, agg.group, layer, b.n, _fmt(b.q1), _fmt(b.median), _fmt(b.q3),
                _fmt(b.whisker_low), _fmt(b.whisker_high), len(b.outliers),
                ";".join(repr(v) for v in b.outliers),
            ))
    return rows


def delta_rows(table: DeltaLossTable) -> list[tuple]:
    n = max((len(v) for v in table.groups.values()), default=0)
    rows = []
    for i in range(n):
        rows.append((i + 1, *(_fmt(table.groups[g][i]) if g in table.groups else None for g in DELTA_COLUMNS[1:])))
    return rows


def roc_rows(roc: RocResult) -> list[tuple]:
    thresholds = [None, *roc.thresholds]
    return [(_fmt(t), _fmt(p[0]), _fmt(p[1])) for t, p in zip(thresholds, roc.points)]


def _write_table(out_dir: Path, stem: str, columns, rows, fmt: str) -> str:
    if fmt == "json":
        name = f"{stem}.json"
        records = [dict(zip(columns, r)) for r in rows]
        for rec in records:
            for k, v in rec.items():
                if k == "outliers":
                    rec[k] = [float(x) for x in v.split(";")] if v else []
                elif isinstance(v, str) and k not in ("metric", "group"):
                    rec[k] = float(v)
        dump_json(records, out_dir / name)
    else:
        name = f"{stem}.csv"
        _write_csv(out_dir / name, columns, rows)
    return name


def summary_dict(result: ExperimentResult, dataset_report: dict | None = None) -> dict:
    roc = result.roc
    fits: FitSummary | None = result.fits
    delta = result.delta_loss
    return {
        "manifest": "manifest.json",
        "n_samples": len(result.profiles),
        "n_correct": sum(1 for p in result.profiles if p.correct),
        "n_incorrect": sum(1 for p in result.profiles if p.correct is False),
        "auc": roc.auc if roc else None,
        "u_statistic": roc.u_statistic if roc else None,
        "u_normalized": roc.u_statistic / (roc.n_correct * roc.n_incorrect) if roc else None,
        "auc_undefined": None if roc else "; ".join(result.notes) or "undefined",
        "fits": asdict(fits) if fits else None,
        "delta_loss_sum": {g: float(v.sum()) for g, v in delta.groups.items()},
        "delta_loss_counts": delta.counts,
        "failures": result.failures,
        "dataset": dataset_report,
    }


def write_idiom_outputs(
    out_dir: str | os.PathLike,
    result: ExperimentResult,
    vocab: BpeVocab | None,
    fmt: str = "csv",
    dataset_report: dict | None = None,
) -> list[str]:
    out_dir = Path(out_dir)
    with open(out_dir / "profiles.jsonl", "w", encoding="utf-8") as f:
        for profile, sample in zip(result.profiles, result.samples):
            f.write(json.dumps(profile_record(profile, sample, vocab), ensure_ascii=False) + "\n")
    files = ["profiles.jsonl"]
    files.append(_write_table(out_dir, "aggregates", AGGREGATE_COLUMNS, aggregate_rows(result.aggregates), fmt))
    files.append(_write_table(out_dir, "delta_loss", DELTA_COLUMNS, delta_rows(result.delta_loss), fmt))
    files.append(_write_table(out_dir, "roc", ROC_COLUMNS, roc_rows(result.roc) if result.roc else [], fmt))
    dump_json(summary_dict(result, dataset_report), out_dir / "summary.json")
    files.append("summary.json")
    return files


# -- generation and trace --------------------------------------------------------


def write_tokens(out_dir: str | os.PathLike, records: Sequence[TokenRecord], chart: bool = False) -> list[str]:
    out_dir = Path(out_dir)
    with open(out_dir / "tokens.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({k: getattr(r, k) for k in TOKEN_FIELDS}, ensure_ascii=False) + "\n")
    files = ["tokens.jsonl"]
    if chart:
        _write_csv(
            out_dir / "tokens_chart.csv",
            ("step", "token_text", "ce_vs_argmax", "flagged"),
            [(r.step, r.token_text, _fmt(r.ce_vs_argmax), int(r.flagged)) for r in records],
        )
        files.append("tokens_chart.csv")
    return files


def trace_columns(metric: str) -> tuple[str, ...]:
    return ("layer", "top_token_id", "top_token_text", *TRACE_METRIC_COLUMNS[metric])


def trace_rows(profile: LensProfile, vocab: BpeVocab, metric: str = "all") -> list[dict]:
    cols = TRACE_METRIC_COLUMNS[metric]
    rows = []
    for i in range(profile.n_states):
        row = {
            "layer": i,
            "top_token_id": int(profile.top_token[i]),
            "top_token_text": vocab.decode([int(profile.top_token[i])]),
        }
        for c in cols:
            arr = profile.metric(c)
            row[c] = None if arr is None else float(arr[i])
        rows.append(row)
    return rows


def write_trace(out_dir: str | os.PathLike, rows: list[dict], metric: str, fmt: str = "csv") -> str:
    out_dir = Path(out_dir)
    cols = trace_columns(metric)
    if fmt == "json":
        dump_json(rows, out_dir / "trace.json")
        return "trace.json"
    _write_csv(out_dir / "trace.csv", cols, [tuple(_fmt(r[c]) if c in TRACE_METRIC_COLUMNS["all"] else r[c] for c in cols) for r in rows])
    return "trace.csv"


# -- manifest ------------------------------------------------------------------------


def source_revision() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
        return f"git:{rev}"
    except (OSError, subprocess.SubprocessError):
        return f"version:{__version__}"


@dataclass
class RunManifest:
    command: str
    model_dir: str
    dataset: str | None = None
    seed: int | None = None
    temperature: float | None = None
    target: str | None = None
    metric: str | None = None
    threshold: float | None = None
    config: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    source_revision: str = field(default_factory=source_revision)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: str | None = None

    def finish(self, out_dir: str | os.PathLike) -> None:
        self.finished_at = datetime.now(timezone.utc).isoformat()
        dump_json(asdict(self), Path(out_dir) / "manifest.json")
