import os
from pathlib import Path

import pytest

from residual_lens.checkpoint import ModelConfig, load_checkpoint, synthetic_checkpoint, write_checkpoint
from residual_lens.tokenizer import BpeVocab

DATA = Path(__file__).parent / "data"
GPT2_TOKENIZER = DATA / "gpt2-tokenizer"

TINY = ModelConfig(n_layer=2, n_head=2, n_embd=8, vocab_size=16, n_ctx=64)


def gpt2_dir(var: str = "RESIDUAL_LENS_GPT2_DIR", default: str = "~/models/gpt2") -> Path | None:
    """Directory of a GPT-2 checkpoint if one is available locally."""
    path = Path(os.environ.get(var, default)).expanduser()
    if (path / "model.safetensors").exists() and (path / "config.json").exists():
        return path
    return None


@pytest.fixture(scope="session")
def gpt2_vocab():
    return BpeVocab.from_dir(GPT2_TOKENIZER)


@pytest.fixture(scope="session")
def tiny_bundle():
    return synthetic_checkpoint(TINY, seed=1234)


@pytest.fixture(scope="session")
def small_vocab(gpt2_vocab):
    """Bytes plus the first 120 GPT-2 merges: a real but small BPE vocabulary."""
    merges = sorted(gpt2_vocab.merge_rank, key=gpt2_vocab.merge_rank.get)[:120]
    return BpeVocab.from_merges(merges)


@pytest.fixture(scope="session")
def tiny_lm_dir(tmp_path_factory, small_vocab):
    """A model directory (weights + tokenizer) small enough for CLI runs."""
    path = tmp_path_factory.mktemp("tiny_lm")
    config = ModelConfig(n_layer=2, n_head=2, n_embd=16, vocab_size=small_vocab.vocab_size, n_ctx=256)
    write_checkpoint(synthetic_checkpoint(config, seed=7), path)
    small_vocab.save(path)
    return path


@pytest.fixture(scope="session")
def tiny_lm(tiny_lm_dir, small_vocab):
    return load_checkpoint(tiny_lm_dir), small_vocab


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
