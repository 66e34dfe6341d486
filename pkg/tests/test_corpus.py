from __future__ import annotations

import json

import numpy as np
import pytest

from ectg.corpus import (
    CorpusError,
    Dialogue,
    UNK,
    Vocab,
    RESERVED_TOKENS,
    build_vocab,
    make_utterance,
    parse_corpus,
    serialize_corpus,
    tokenize,
)
from conftest import TOY_CORPUS


def test_tokenize_isolates_punctuation():
    assert tokenize("I love NLP!") == ["i", "love", "nlp", "!"]


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_keeps_intra_word_hyphen():
    assert tokenize("ex-girlfriend") == ["ex-girlfriend"]


def test_tokenize_idempotent_on_joined_output(toy_dialogues):
    texts = [u.text for d in toy_dialogues for u in d.utterances]
    texts += ["Hello, world!  It's 3:45pm... ok?", "semi-final score: 2-1"]
    for text in texts:
        toks = tokenize(text)
        assert tokenize(" ".join(toks)) == toks


def _line(**kw):
    obj = {
        "id": "d1",
        "emotion": "joyful",
        "utterances": [
            {"speaker": "speaker", "text": "I love NLP!", "cause_spans": [[1, 2]]},
            {"speaker": "listener", "text": "me too"},
        ],
    }
    obj.update(kw)
    return json.dumps(obj)


def test_parse_valid_line():
    dialogues = parse_corpus(_line())
    assert len(dialogues) == 1
    d = dialogues[0]
    assert d.id == "d1"
    assert d.utterances[0].tokens == ("i", "love", "nlp", "!")
    assert d.utterances[0].cause_spans == ((1, 2),)
    assert d.utterances[1].cause_spans == ()


def test_parse_malformed_json_names_line():
    with pytest.raises(CorpusError, match="line 2"):
        parse_corpus(_line() + "\n{oops\n")


def test_parse_span_out_of_range_names_dialogue():
    bad = _line(utterances=[
        {"speaker": "speaker", "text": "hi there", "cause_spans": [[0, 5]]},
        {"speaker": "listener", "text": "me too"},
    ])
    with pytest.raises(CorpusError, match="span out of range") as err:
        parse_corpus(bad)
    assert "d1" in str(err.value)


def test_parse_rejects_non_alternating_speakers():
    bad = _line(utterances=[
        {"speaker": "speaker", "text": "hi"},
        {"speaker": "speaker", "text": "hi again"},
    ])
    with pytest.raises(CorpusError, match="alternate"):
        parse_corpus(bad)


def test_parse_rejects_overlapping_spans():
    bad = _line(utterances=[
        {"speaker": "speaker", "text": "one two three four", "cause_spans": [[0, 2], [1, 3]]},
        {"speaker": "listener", "text": "me too"},
    ])
    with pytest.raises(CorpusError, match="overlap"):
        parse_corpus(bad)


def test_toy_corpus_roundtrip_byte_identical():
    raw = TOY_CORPUS.read_bytes()
    dialogues = parse_corpus(raw)
    assert len(dialogues) == 32
    assert serialize_corpus(dialogues) == raw


def test_parse_serialize_parse_identity(toy_dialogues):
    again = parse_corpus(serialize_corpus(toy_dialogues))
    assert again == toy_dialogues


def _toy_single(text: str) -> list[Dialogue]:
    return [Dialogue(
        id="x", emotion="joyful",
        utterances=(make_utterance("speaker", text), make_utterance("listener", text)),
    )]


def test_build_vocab_frequency_then_lexicographic():
    vocab = build_vocab(_toy_single("a a b"), min_freq=1)
    assert vocab.itos == list(RESERVED_TOKENS) + ["a", "b"]


def test_build_vocab_min_freq_threshold():
    # each token appears twice (speaker + listener turn), so the bar is 4
    vocab = build_vocab(_toy_single("a a b"), min_freq=4)
    assert vocab.itos == list(RESERVED_TOKENS) + ["a"]
    assert vocab.lookup("b") == UNK


def test_build_vocab_empty_corpus_reserved_only():
    vocab = build_vocab([], min_freq=1)
    assert vocab.itos == list(RESERVED_TOKENS)


def test_build_vocab_size_matches_distinct_token_count(toy_dialogues):
    # brute-force oracle: count distinct tokens with a nested loop
    distinct = set()
    for d in toy_dialogues:
        for u in d.utterances:
            for t in u.tokens:
                distinct.add(t)
    vocab = build_vocab(toy_dialogues, min_freq=1)
    assert len(vocab) == len(distinct) + len(RESERVED_TOKENS)


def test_vocab_roundtrip_all_ids(toy_vocab):
    for idx, token in enumerate(toy_vocab.itos):
        assert toy_vocab.lookup(token) == idx
        assert toy_vocab.token(idx) == token


def test_vocab_random_strings_unk(rng):
    vocab = Vocab(["hello"])
    alphabet = "abcdefghij"
    for _ in range(50):
        word = "".join(alphabet[int(i)] for i in rng.integers(0, 10, size=8))
        if word not in vocab:
            assert vocab.lookup(word) == UNK
