from hypothesis import given, strategies as st

from auxlatent.vocab import (LATENT_END, LATENT_PAD, LATENT_START, SPECIALS, Vocabulary,
                             count_latent_blocks, join_tokens, tokenize_text)

VOCAB = Vocabulary()
text_tokens = st.lists(st.sampled_from([t for t in VOCAB.tokens if t not in ("<pad>",)]), max_size=40)


def test_special_ids_distinct():
    ids = [VOCAB.index[t] for t in SPECIALS]
    assert len(set(ids)) == len(SPECIALS)


@given(text_tokens)
def test_encode_decode_round_trip(tokens):
    ids = VOCAB.encode_tokens(tokens)
    text = VOCAB.decode(ids)
    assert VOCAB.encode(text) == ids
    assert VOCAB.decode(VOCAB.encode(text)) == text


def test_boxed_answer_tokenization():
    assert tokenize_text("\\boxed{12}") == ["\\boxed{", "1", "2", "}"]
    assert join_tokens(["\\boxed{", "1", "2", "}"]) == "\\boxed{12}"


def test_unknown_token_rejected():
    import pytest
    with pytest.raises(KeyError, match="zebra"):
        VOCAB.encode("connect zebra")


def test_block_counting():
    block = [LATENT_START, LATENT_PAD, LATENT_PAD, LATENT_END]
    assert count_latent_blocks([]) == 0
    assert count_latent_blocks(["a"] + block + ["b"]) == 1
    assert count_latent_blocks(block + block) == 2
    # empty or unterminated blocks are not well formed
    assert count_latent_blocks([LATENT_START, LATENT_END]) == 0
    assert count_latent_blocks([LATENT_START, LATENT_PAD]) == 0
