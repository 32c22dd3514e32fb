"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data or model validation error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from .checkpoint import ModelConfig, load_checkpoint, synthetic_checkpoint, write_checkpoint
from .errors import CheckpointError, ContractError, DatasetError, ResidualLensError
from .experiment import DEFAULT_THRESHOLD, generation_scan, run_idiom_experiment
from .idioms import INSTRUCTION, build_dataset, bundled_idioms, load_epie, read_dataset, write_dataset
from .lens import METRICS, build_profile
from .report import RunManifest, trace_rows, write_idiom_outputs, write_tokens, write_trace
from .runtime import SamplerConfig, forward
from .tokenizer import BpeVocab

log = logging.getLogger("residual_lens")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
LOCK_NAME = ".residual_lens.lock"

_METRIC_FAMILIES = {
    "ce": {"ce_vs_sampled", "ce_vs_gold"},
    "kl": {"kl_vs_output_logits", "kl_vs_sampled_onehot"},
    "cosine": {"cosine_vs_sampled_embedding", "cosine_vs_gold_embedding"},
    "all": set(METRICS),
}
_TARGET_METRICS = {
    "sampled": {"ce_vs_sampled", "kl_vs_output_logits", "kl_vs_sampled_onehot", "cosine_vs_sampled_embedding"},
    "gold": {"ce_vs_gold", "cosine_vs_gold_embedding"},
    None: set(METRICS),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class OutputLockedError(ResidualLensError):
    pass


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise OutputLockedError(f"{out_dir} is in use by another run (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _selected_metrics(metric: str, target: str | None) -> list[str]:
    chosen = _METRIC_FAMILIES[metric] & _TARGET_METRICS[target]
    return [m for m in METRICS if m in chosen]


def _load_model(args):
    bundle = load_checkpoint(args.model_dir)
    vocab = BpeVocab.from_dir(args.tokenizer_dir or args.model_dir)
    if vocab.vocab_size != bundle.config.vocab_size:
        raise CheckpointError(
            f"tokenizer has {vocab.vocab_size} tokens but the model expects {bundle.config.vocab_size}"
        )
    return bundle, vocab


def _load_samples(path: Path, vocab: BpeVocab):
    """Accept a built dataset.jsonl, or a raw idiom list that gets built here."""
    first = ""
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                first = line
                break
    if path.suffix == ".jsonl" and '"prompt"' in first:
        return read_dataset(path), None
    samples, report = build_dataset(load_epie(path), vocab)
    return samples, report.to_dict()


def cmd_idioms(args) -> int:
    bundle, vocab = _load_model(args)
    samples, build_report = _load_samples(Path(args.dataset), vocab)
    if args.limit:
        samples = samples[: args.limit]
    if not samples:
        raise DatasetError(f"{args.dataset} yields no usable samples")
    metrics = _selected_metrics(args.metric, args.target)
    out = Path(args.out)
    with output_lock(out):
        manifest = RunManifest(
            command="idioms", model_dir=str(args.model_dir), dataset=str(args.dataset),
            target=args.target, metric=args.metric, threshold=args.threshold,
            config=bundle.config.to_dict(),
        )
        result = run_idiom_experiment(
            bundle, vocab, samples, threshold=args.threshold, workers=args.workers, metrics=metrics,
        )
        files = write_idiom_outputs(out, result, vocab, fmt=args.format, dataset_report=build_report)
        if args.figures:
            from .plotting import idiom_figures

            files += idiom_figures(result, out, metrics)
        manifest.outputs = files
        manifest.finish(out)
    if result.roc is not None:
        log.info("%d samples, AUC %.4f", len(result.profiles), result.roc.auc)
    return EXIT_OK


def cmd_generate(args) -> int:
    if not args.prompt:
        raise UsageError("--prompt must be non-empty")
    bundle, vocab = _load_model(args)
    cfg = SamplerConfig(
        seed=args.seed,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        mode="greedy" if args.greedy else "temperature",
    )
    out = Path(args.out)
    with output_lock(out):
        manifest = RunManifest(
            command="generate", model_dir=str(args.model_dir), seed=args.seed,
            temperature=None if args.greedy else args.temperature, threshold=args.threshold,
            target="sampled", config=bundle.config.to_dict(), extra={"prompt": args.prompt},
        )
        records, truncated = generation_scan(bundle, vocab, args.prompt, cfg, threshold=args.threshold)
        files = write_tokens(out, records, chart=args.chart)
        if args.figures and records:
            from .plotting import token_figure

            files += token_figure(records, out, args.threshold)
        manifest.outputs = files
        manifest.extra["truncated"] = truncated
        manifest.finish(out)
    return EXIT_OK


def cmd_trace(args) -> int:
    if not args.prompt:
        raise UsageError("--prompt must be non-empty")
    bundle, vocab = _load_model(args)
    gold = args.gold_id
    if args.gold is not None:
        gold = vocab.as_single_token(args.gold, with_leading_space=True)
        if gold is None:
            raise DatasetError(f"gold word {args.gold!r} is not a single token (with leading space)")
    result = forward(bundle, vocab.encode(args.prompt))
    profile = build_profile(bundle, result.trace, gold=gold)
    rows = trace_rows(profile, vocab, args.metric)
    out = Path(args.out)
    with output_lock(out):
        manifest = RunManifest(
            command="trace", model_dir=str(args.model_dir), metric=args.metric,
            target="gold" if gold is not None else "sampled", config=bundle.config.to_dict(),
            extra={"prompt": args.prompt, "gold_token": gold, "sampled_token": profile.sampled_token},
        )
        files = [write_trace(out, rows, args.metric, args.format)]
        if args.figures:
            from .plotting import trace_figure

            files += trace_figure(profile, out)
        manifest.outputs = files
        manifest.finish(out)
    return EXIT_OK


def cmd_dataset(args) -> int:
    vocab = BpeVocab.from_dir(args.tokenizer_dir)
    idioms = load_epie(args.idioms) if args.idioms else bundled_idioms()
    joiner = "\n" if args.joiner == "newline" else " "
    samples, report = build_dataset(idioms, vocab, instruction=args.instruction, joiner=joiner)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "exclusions"}))
    return EXIT_OK


def cmd_synth(args) -> int:
    merges = []
    if args.merges_from:
        source = BpeVocab.from_dir(args.merges_from)
        merges = sorted(source.merge_rank, key=source.merge_rank.get)[: args.n_merges]
    vocab = BpeVocab.from_merges(merges)
    config = ModelConfig(
        n_layer=args.n_layer, n_head=args.n_head, n_embd=args.n_embd,
        vocab_size=vocab.vocab_size, n_ctx=args.n_ctx,
    )
    out = Path(args.out)
    write_checkpoint(synthetic_checkpoint(config, seed=args.seed), out)
    vocab.save(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="residual-lens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_args(p):
        p.add_argument("--model-dir", required=True, type=Path)
        p.add_argument("--tokenizer-dir", type=Path, help="defaults to --model-dir")
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
        p.add_argument("--figures", action="store_true", help="also render PNG figures")

    p = sub.add_parser("idioms", help="per-layer metrics, ROC and fits over an idiom dataset")
    model_args(p)
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--target", choices=("sampled", "gold"))
    p.add_argument("--metric", choices=("ce", "kl", "cosine", "all"), default="all")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--limit", type=int, default=0, help="only the first N samples")
    p.set_defaults(func=cmd_idioms)

    p = sub.add_parser("generate", help="per-token output cross-entropy of a generation")
    model_args(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--temperature", type=float, default=0.8)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--max-tokens", type=int, default=50)
    p.add_argument("--chart", action="store_true", help="also write tokens_chart.csv")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("trace", help="layer-by-layer lens table for one prompt")
    model_args(p)
    p.add_argument("--prompt", required=True)
    gold = p.add_mutually_exclusive_group()
    gold.add_argument("--gold", help="gold next word (tokenised with a leading space)")
    gold.add_argument("--gold-id", type=int)
    p.add_argument("--metric", choices=("ce", "kl", "cosine", "all"), default="all")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("dataset", help="build dataset.jsonl from an idiom list")
    p.add_argument("--tokenizer-dir", required=True, type=Path)
    p.add_argument("--idioms", type=Path, help="idioms.txt or idioms.jsonl; defaults to the bundled list")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--instruction", default=INSTRUCTION)
    p.add_argument("--joiner", choices=("space", "newline"), default="space")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("synth", help="write a small random-weight model directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-layer", type=int, default=2)
    p.add_argument("--n-head", type=int, default=2)
    p.add_argument("--n-embd", type=int, default=8)
    p.add_argument("--n-ctx", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--merges-from", type=Path, help="tokenizer dir whose first merges are reused")
    p.add_argument("--n-merges", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"residual-lens: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"residual-lens: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DatasetError, ContractError) as exc:
        print(f"residual-lens: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"residual-lens: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        print(f"residual-lens: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
