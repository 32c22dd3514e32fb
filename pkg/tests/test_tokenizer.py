import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from tokenizers import Tokenizer, decoders, models, pre_tokenizers

from residual_lens.errors import ContractError
from residual_lens.idioms import bundled_idioms
from residual_lens.tokenizer import BpeVocab, bytes_to_unicode, pretokenize

from conftest import GPT2_TOKENIZER

SAMPLES = [
    "Hello world, it's 2024!",
    "  leading spaces and trailing   ",
    "Actions speak louder than words",
    "naïve café — déjà vu 😀 東京",
    "line one\nline two\r\n\ttabbed",
    "I'll we've they're you'd she's",
    "1234567890 3.14159 -42",
]


@pytest.fixture(scope="module")
def oracle():
    """The Hugging Face tokenizers byte-level BPE over the same files."""
    tok = Tokenizer(models.BPE.from_file(str(GPT2_TOKENIZER / "vocab.json"), str(GPT2_TOKENIZER / "merges.txt")))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    return tok


def test_byte_table_is_a_bijection():
    table = bytes_to_unicode()
    assert sorted(table) == list(range(256))
    assert len(set(table.values())) == 256
    assert table[ord("A")] == "A"
    assert table[ord(" ")] == "Ġ"


def test_empty():
    vocab = BpeVocab.from_dir(GPT2_TOKENIZER)
    assert vocab.encode("") == []
    assert vocab.decode([]) == ""


@pytest.mark.parametrize("text", SAMPLES)
def test_matches_reference_tokenizer(gpt2_vocab, oracle, text):
    assert gpt2_vocab.encode(text) == oracle.encode(text).ids


def test_matches_reference_on_idiom_corpus(gpt2_vocab, oracle):
    for idiom in bundled_idioms():
        assert gpt2_vocab.encode(idiom) == oracle.encode(idiom).ids


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=60))
def test_roundtrip(gpt2_vocab, text):
    assert gpt2_vocab.decode(gpt2_vocab.encode(text)) == text


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=st.characters(codec="utf-8"), max_size=40))
def test_deterministic_and_agrees_with_reference(gpt2_vocab, oracle, text):
    first = gpt2_vocab.encode(text)
    assert gpt2_vocab.encode(text) == first
    assert first == oracle.encode(text).ids


def test_roundtrip_on_idiom_corpus(gpt2_vocab):
    for idiom in bundled_idioms():
        assert gpt2_vocab.decode(gpt2_vocab.encode(idiom)) == idiom


def test_single_id_decode_matches_table(gpt2_vocab):
    raw = json.loads((GPT2_TOKENIZER / "vocab.json").read_text(encoding="utf-8"))
    inverse = {c: b for b, c in bytes_to_unicode().items()}
    for token, idx in list(raw.items())[::97]:
        assert gpt2_vocab.decode_bytes([idx]) == bytes(inverse[c] for c in token)


def test_decode_rejects_out_of_range(gpt2_vocab):
    with pytest.raises(ContractError):
        gpt2_vocab.decode([gpt2_vocab.vocab_size])
    with pytest.raises(ContractError):
        gpt2_vocab.decode([-1])


class TestSingleToken:
    def test_common_word_with_space(self, gpt2_vocab):
        assert gpt2_vocab.as_single_token("words") == gpt2_vocab.encode(" words")[0]

    def test_help_ful_split(self, gpt2_vocab):
        # Without the leading space the word breaks into "help" + "ful".
        assert gpt2_vocab.as_single_token("helpful", with_leading_space=False) is None
        assert [gpt2_vocab.decode([i]) for i in gpt2_vocab.encode("helpful")] == ["help", "ful"]

    def test_helpful_with_space_is_one_token(self, gpt2_vocab, oracle):
        # GPT-2 has a dedicated " helpful" entry.
        assert oracle.encode(" helpful").ids == [7613]
        assert gpt2_vocab.as_single_token("helpful", with_leading_space=True) == 7613

    def test_multi_token_word(self, gpt2_vocab):
        assert gpt2_vocab.as_single_token("grapevine") is None

    def test_empty_word(self, gpt2_vocab):
        with pytest.raises(ContractError):
            gpt2_vocab.as_single_token("")

    def test_vocabulary_sweep(self, gpt2_vocab):
        """Every id whose text is one pre-token re-encodes to exactly that id."""
        checked = 0
        for i in range(gpt2_vocab.vocab_size):
            try:
                text = gpt2_vocab.decode_bytes([i]).decode("utf-8")
            except UnicodeDecodeError:
                continue
            if len(pretokenize(text)) != 1:
                continue
            checked += 1
            space = text.startswith(" ") and len(text) > 1
            word = text[1:] if space else text
            assert gpt2_vocab.as_single_token(word, with_leading_space=space) == i
        assert checked > 49_000


def test_from_merges_builds_consistent_vocab(gpt2_vocab):
    merges = sorted(gpt2_vocab.merge_rank, key=gpt2_vocab.merge_rank.get)[:50]
    small = BpeVocab.from_merges(merges)
    assert small.vocab_size == 256 + 50
    for text in SAMPLES:
        assert small.decode(small.encode(text)) == text
    # "Ġt" is the first GPT-2 merge, so " t" is a single token here too.
    assert len(small.encode(" t")) == 1


def test_save_and_reload(tmp_path, small_vocab):
    small_vocab.save(tmp_path)
    again = BpeVocab.from_dir(tmp_path)
    assert again.token_to_id == small_vocab.token_to_id
    assert again.merge_rank == small_vocab.merge_rank
