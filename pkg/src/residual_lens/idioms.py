"""Idiom-completion prompts with single-token gold answers."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import regex

from .errors import DatasetError
from .tokenizer import BpeVocab

INSTRUCTION = (
    "The following prompt is the beginning of a popular English idiom, "
    "please respond with a single word to complete the phrase."
)

_LAST_WORD = regex.compile(r"^(.*\S)\s+(\S+)$", regex.DOTALL)


@dataclass(frozen=True)
class IdiomSample:
    idiom_text: str
    prompt: str
    target_word: str
    target_token: int
    source_index: int


@dataclass
class DatasetBuildReport:
    source_count: int = 0
    accepted: int = 0
    excluded_multitoken: int = 0
    excluded_other: int = 0
    exclusions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def load_epie(path: str | os.PathLike) -> list[str]:
    """Read idioms from a one-per-line text file or a JSONL file of ``{"idiom": ...}``.

    Blank lines are skipped; everything else is kept verbatim, in order.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read idiom file {path}: {exc}") from exc
    lines = [ln.rstrip("\r") for ln in text.split("\n")]
    if path.suffix == ".jsonl":
        idioms = []
        for n, ln in enumerate(lines, 1):
            if not ln.strip():
                continue
            try:
                idioms.append(json.loads(ln)["idiom"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{n}: expected an object with an 'idiom' field") from exc
        return idioms
    return [ln for ln in lines if ln.strip()]


def write_idioms_jsonl(idioms: Iterable[str], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for idiom in idioms:
            f.write(json.dumps({"idiom": idiom}, ensure_ascii=False) + "\n")


def bundled_idioms() -> list[str]:
    """The idiom list shipped with the package (common static English idioms)."""
    text = resources.files("residual_lens").joinpath("data/idioms.txt").read_text(encoding="utf-8")
    return [ln for ln in text.splitlines() if ln.strip()]


def build_dataset(
    source: Sequence[str],
    vocab: BpeVocab,
    instruction: str = INSTRUCTION,
    joiner: str = " ",
) -> tuple[list[IdiomSample], DatasetBuildReport]:
    """Split each idiom before its last word and keep those whose answer is one token.

    The answer is tokenised with a leading space, as it would follow the
    prompt in running text.
    """
    samples = []
    report = DatasetBuildReport(source_count=len(source))
    for idx, raw in enumerate(source):
        idiom = raw.strip()
        m = _LAST_WORD.match(idiom)
        if m is None:
            report.excluded_other += 1
            report.exclusions.append({"source_index": idx, "idiom": raw, "reason": "fewer than two words"})
            continue
        head, last = m.group(1), m.group(2)
        token = vocab.as_single_token(last, with_leading_space=True)
        if token is None:
            report.excluded_multitoken += 1
            pieces = [vocab.decode([t]) for t in vocab.encode(" " + last)]
            report.exclusions.append({"source_index": idx, "idiom": raw, "reason": "multi-token target", "pieces": pieces})
            continue
        samples.append(IdiomSample(
            idiom_text=idiom,
            prompt=f"{instruction}{joiner}{head}",
            target_word=last,
            target_token=token,
            source_index=idx,
        ))
        report.accepted += 1
    return samples, report


DATASET_FIELDS = ("idiom_text", "prompt", "target_word", "target_token", "source_index")


def write_dataset(samples: Iterable[IdiomSample], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps({k: getattr(s, k) for k in DATASET_FIELDS}, ensure_ascii=False) + "\n")


def read_dataset(path: str | os.PathLike) -> list[IdiomSample]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    samples = []
    for n, ln in enumerate(lines, 1):
        if not ln.strip():
            continue
        try:
            rec = json.loads(ln)
            samples.append(IdiomSample(
                idiom_text=str(rec["idiom_text"]),
                prompt=str(rec["prompt"]),
                target_word=str(rec["target_word"]),
                target_token=int(rec["target_token"]),
                source_index=int(rec["source_index"]),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{n}: malformed dataset record ({exc})") from exc
    return samples
