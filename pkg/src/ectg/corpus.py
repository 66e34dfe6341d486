"""Dialogue corpus parsing, tokenization, and vocabulary.

The on-disk format is JSON-Lines, one dialogue per line:

    {"id": str, "emotion": str,
     "utterances": [{"speaker": "speaker"|"listener", "text": str,
                     "cause_spans": [[start, end], ...]}]}

cause_spans are inclusive token-index ranges into the tokenized text and
may be omitted.  serialize_corpus() emits the canonical form of this
schema, byte-reproducibly.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass

SPEAKER = "speaker"
LISTENER = "listener"

# lowercase words (intra-word hyphens kept) or single punctuation marks
_TOKEN_RE = re.compile(r"\w+(?:-\w+)*|[^\w\s]")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, isolate punctuation, split on whitespace.  Hyphenated
    words stay single tokens ("ex-girlfriend")."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    tokens: tuple[str, ...]
    cause_spans: tuple[tuple[int, int], ...] = ()

    def span_tokens(self, span: tuple[int, int]) -> list[str]:
        start, end = span
        return list(self.tokens[start : end + 1])


@dataclass(frozen=True)
class Dialogue:
    id: str
    emotion: str
    utterances: tuple[Utterance, ...]

    @property
    def context(self) -> tuple[Utterance, ...]:
        return self.utterances[:-1]

    @property
    def response(self) -> Utterance:
        return self.utterances[-1]


def make_utterance(speaker: str, text: str, cause_spans=()) -> Utterance:
    """Validated constructor used by the parser and by tests."""
    if speaker not in (SPEAKER, LISTENER):
        raise CorpusError(f"unknown speaker role {speaker!r}")
    tokens = tuple(tokenize(text))
    if not tokens:
        raise CorpusError("utterance has no tokens")
    spans = []
    for raw in cause_spans:
        if len(raw) != 2:
            raise CorpusError(f"span {raw!r} is not a [start, end] pair")
        start, end = int(raw[0]), int(raw[1])
        if not (0 <= start <= end < len(tokens)):
            raise CorpusError(f"span out of range: [{start}, {end}] in {len(tokens)} tokens")
        spans.append((start, end))
    for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
        if s2 <= e1:
            raise CorpusError(f"spans not sorted/non-overlapping: [{s1},{e1}] then [{s2},{e2}]")
    return Utterance(speaker=speaker, text=text, tokens=tokens, cause_spans=tuple(spans))


def parse_corpus(data: bytes | str) -> list[Dialogue]:
    """Parse JSONL bytes into validated dialogues, preserving file order."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    dialogues: list[Dialogue] = []
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
        try:
            dialogues.append(_parse_dialogue(obj))
        except CorpusError as exc:
            did = obj.get("id", "?") if isinstance(obj, dict) else "?"
            raise CorpusError(f"line {lineno}, dialogue {did!r}: {exc}") from exc
    return dialogues


def _parse_dialogue(obj) -> Dialogue:
    if not isinstance(obj, dict):
        raise CorpusError("dialogue must be a JSON object")
    did = obj.get("id")
    emotion = obj.get("emotion")
    if not did or not isinstance(did, str):
        raise CorpusError("missing dialogue id")
    if not emotion or not isinstance(emotion, str):
        raise CorpusError("missing emotion label")
    raw_utts = obj.get("utterances")
    if not isinstance(raw_utts, list) or len(raw_utts) < 2:
        raise CorpusError("dialogue needs at least 2 utterances")
    utterances = []
    for u in raw_utts:
        if not isinstance(u, dict):
            raise CorpusError("utterance must be a JSON object")
        utterances.append(make_utterance(u.get("speaker", ""), u.get("text", ""), u.get("cause_spans", [])))
    for a, b in zip(utterances, utterances[1:]):
        if a.speaker == b.speaker:
            raise CorpusError(f"speakers do not alternate ({a.speaker!r} twice)")
    return Dialogue(id=did, emotion=emotion, utterances=tuple(utterances))


def serialize_corpus(dialogues: list[Dialogue]) -> bytes:
    """Canonical JSONL serialization; parse(serialize(parse(x))) == parse(x)
    and re-serializing a canonical file is byte-identical."""
    lines = []
    for d in dialogues:
        obj = {
            "id": d.id,
            "emotion": d.emotion,
            "utterances": [
                {
                    "speaker": u.speaker,
                    "text": u.text,
                    "cause_spans": [[s, e] for s, e in u.cause_spans],
                }
                for u in d.utterances
            ],
        }
        lines.append(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def load_corpus(path) -> list[Dialogue]:
    with open(path, "rb") as fh:
        return parse_corpus(fh.read())


PAD, UNK, BOS, EOS, CLS, SEP = range(6)
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<cls>", "<sep>")


class Vocab:
    """Token/id bijection with six fixed reserved ids (pad, unk, bos, eos,
    cls, sep).  Unknown tokens look up as UNK."""

    def __init__(self, tokens: list[str]):
        self.itos: list[str] = list(RESERVED_TOKENS) + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]


def build_vocab(dialogues: list[Dialogue], min_freq: int = 1) -> Vocab:
    """Vocabulary of all tokens with corpus frequency >= min_freq, ordered
    by descending frequency then lexicographically."""
    if min_freq < 1:
        raise CorpusError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    for d in dialogues:
        for u in d.utterances:
            counts.update(u.tokens)
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


def emotion_labels(dialogues: list[Dialogue]) -> list[str]:
    """Sorted distinct emotion labels of a corpus."""
    return sorted({d.emotion for d in dialogues})
