"""Record next-token logits from the Hugging Face GPT-2 implementation.

One-time fixture recorder for the golden parity check. It shares no code with
residual_lens: weights are loaded by ``transformers`` and prompts tokenised by the
``tokenizers`` byte-level BPE.

    python scripts/record_golden.py --model-dir ~/models/gpt2 --out tests/data/gpt2_golden.npz
"""

from __future__ import annotations

import argparse
import hashlib
from pathlib import Path

import numpy as np

PROMPTS = (
    "The quick brown fox jumps over the lazy",
    "Alan Turing",
    "Actions speak louder than",
    "In 1492, Columbus sailed across the",
    "The capital of France is",
)


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def record(model_dir: Path, out: Path, prompts=PROMPTS, tokenizer_dir: Path | None = None) -> dict:
    import torch
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import GPT2LMHeadModel

    tok_dir = Path(tokenizer_dir or model_dir)
    tokenizer = Tokenizer(models.BPE.from_file(str(tok_dir / "vocab.json"), str(tok_dir / "merges.txt")))
    tokenizer.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    model = GPT2LMHeadModel.from_pretrained(model_dir, torch_dtype=torch.float32).eval()

    ids, logits = [], []
    with torch.no_grad():
        for p in prompts:
            t = tokenizer.encode(p).ids
            ids.append(t)
            logits.append(model(torch.tensor([t])).logits[0, -1].numpy().astype(np.float32))

    width = max(len(t) for t in ids)
    padded = np.full((len(ids), width), -1, dtype=np.int64)
    for i, t in enumerate(ids):
        padded[i, : len(t)] = t
    fixture = {
        "prompts": np.array(prompts),
        "token_ids": padded,
        "logits": np.stack(logits),
        "checkpoint_sha256": np.array(file_sha256(Path(model_dir) / "model.safetensors")),
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, **fixture)
    return fixture


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model-dir", required=True, type=Path)
    ap.add_argument("--tokenizer-dir", type=Path)
    ap.add_argument("--out", required=True, type=Path)
    args = ap.parse_args(argv)
    fx = record(args.model_dir.expanduser(), args.out, tokenizer_dir=args.tokenizer_dir)
    print(f"wrote {args.out}: {len(fx['prompts'])} prompts, vocab {fx['logits'].shape[1]}")


if __name__ == "__main__":
    main()
