"""Byte-level BPE compatible with the published GPT-2 vocabulary files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import regex

from .errors import ContractError, DatasetError

VOCAB_FILE = "vocab.json"
MERGES_FILE = "merges.txt"

# Pre-tokenisation pattern used by GPT-2.
_PRETOKENIZE = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict[int, str]:
    """Map each byte to a printable code point so vocab entries are plain strings.

    Printable latin-1 bytes map to themselves; the remaining 68 bytes are
    shifted to code points from 256 upwards in byte order.
    """
    keep = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    table = {}
    extra = 0
    for b in range(256):
        if b in keep:
            table[b] = chr(b)
        else:
            table[b] = chr(256 + extra)
            extra += 1
    return table


def pretokenize(text: str) -> list[str]:
    return _PRETOKENIZE.findall(text)


@dataclass(frozen=True, eq=False)
class BpeVocab:
    token_to_id: dict[str, int]
    merge_rank: dict[tuple[str, str], int]
    byte_encoder: dict[int, str] = field(default_factory=bytes_to_unicode)

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise DatasetError("vocabulary ids must be dense and unique in [0, vocab_size)")
        missing = [c for c in self.byte_encoder.values() if c not in self.token_to_id]
        if missing:
            raise DatasetError(f"vocabulary lacks {len(missing)} single-byte tokens")
        object.__setattr__(self, "id_to_token", {i: t for t, i in self.token_to_id.items()})
        object.__setattr__(self, "byte_decoder", {c: b for b, c in self.byte_encoder.items()})
        object.__setattr__(self, "_bpe", lru_cache(maxsize=65536)(self._bpe_uncached))

    @property
    def vocab_size(self) -> int:
        return len(self.token_to_id)

    @classmethod
    def from_files(cls, vocab_path: str | os.PathLike, merges_path: str | os.PathLike) -> "BpeVocab":
        try:
            token_to_id = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
            lines = Path(merges_path).read_text(encoding="utf-8").split("\n")
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read tokenizer files: {exc}") from exc
        pairs = []
        for line in lines:
            if not line or line.startswith("#version"):
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise DatasetError(f"malformed merge line {line!r}")
            pairs.append((parts[0], parts[1]))
        return cls(token_to_id, {p: r for r, p in enumerate(pairs)})

    @classmethod
    def from_dir(cls, directory: str | os.PathLike) -> "BpeVocab":
        directory = Path(directory).expanduser()
        return cls.from_files(directory / VOCAB_FILE, directory / MERGES_FILE)

    @classmethod
    def from_merges(cls, merges: Iterable[tuple[str, str]]) -> "BpeVocab":
        """Build a self-consistent vocabulary: the 256 byte tokens, then one
        token per merge, in merge order."""
        enc = bytes_to_unicode()
        token_to_id = {enc[b]: i for i, b in enumerate(range(256))}
        ranks = {}
        for a, b in merges:
            if a not in token_to_id or b not in token_to_id:
                continue
            merged = a + b
            if merged in token_to_id:
                continue
            ranks[(a, b)] = len(ranks)
            token_to_id[merged] = len(token_to_id)
        return cls(token_to_id, ranks)

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / VOCAB_FILE).write_text(json.dumps(self.token_to_id, ensure_ascii=False), encoding="utf-8")
        ordered = sorted(self.merge_rank.items(), key=lambda kv: kv[1])
        body = "\n".join(f"{a} {b}" for (a, b), _ in ordered)
        (directory / MERGES_FILE).write_text("#version: 0.2\n" + body + "\n", encoding="utf-8")

    def _bpe_uncached(self, piece: str) -> tuple[str, ...]:
        parts = list(piece)
        ranks = self.merge_rank
        while len(parts) > 1:
            best = None
            best_rank = None
            for pair in zip(parts, parts[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == best[0] and parts[i + 1] == best[1]:
                    merged.append(best[0] + best[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return tuple(parts)

    def encode(self, text: str) -> list[int]:
        ids = []
        enc = self.byte_encoder
        for piece in pretokenize(text):
            mapped = "".join(enc[b] for b in piece.encode("utf-8"))
            ids.extend(self.token_to_id[t] for t in self._bpe(mapped))
        return ids

    def decode_bytes(self, ids: Sequence[int]) -> bytes:
        out = bytearray()
        for i in ids:
            i = int(i)
            if not 0 <= i < self.vocab_size:
                raise ContractError(f"token id {i} outside vocabulary of size {self.vocab_size}")
            out.extend(self.byte_decoder[c] for c in self.id_to_token[i])
        return bytes(out)

    def decode(self, ids: Sequence[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def as_single_token(self, word: str, with_leading_space: bool = True) -> int | None:
        """Id of ``word`` if it encodes to exactly one token, else None."""
        if not word:
            raise ContractError("as_single_token needs a non-empty word")
        ids = self.encode(" " + word if with_leading_space else word)
        return ids[0] if len(ids) == 1 else None
