"""Rule-based keyword extraction over cause spans (RAKE-style).

Candidate phrases are maximal stopword/punctuation-free runs.  Each word
scores degree/frequency on the phrase co-occurrence graph; a phrase
scores the sum of its word scores.  The extractor returns the unique
words of the selected phrases in original span order.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    """The bundled stopword list (see stopwords.txt for its version)."""
    text = resources.files("ectg").joinpath("stopwords.txt").read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line)
    return frozenset(words)


def is_punctuation(token: str) -> bool:
    return not any(c.isalnum() for c in token)


def candidate_phrases(tokens: list[str], stop: frozenset[str] | None = None) -> list[list[str]]:
    """Split a token run into candidate phrases at stopwords/punctuation."""
    stop = stopwords() if stop is None else stop
    phrases: list[list[str]] = []
    current: list[str] = []
    for tok in tokens:
        if tok in stop or is_punctuation(tok):
            if current:
                phrases.append(current)
                current = []
        else:
            current.append(tok)
    if current:
        phrases.append(current)
    return phrases


def score_phrases(phrases: list[list[str]]) -> list[tuple[list[str], float]]:
    """RAKE scores: word score = degree/frequency, phrase score = sum."""
    freq: dict[str, int] = {}
    degree: dict[str, int] = {}
    for phrase in phrases:
        for word in phrase:
            freq[word] = freq.get(word, 0) + 1
            degree[word] = degree.get(word, 0) + len(phrase)
    scored = []
    for phrase in phrases:
        scored.append((phrase, sum(degree[w] / freq[w] for w in phrase)))
    return scored


def extract_keywords(tokens, top_k: int | None = None, stop: frozenset[str] | None = None) -> list[str]:
    """Unique content words of the top_k highest-scoring candidate phrases
    (all phrases when top_k is None), in original token order."""
    tokens = list(tokens)
    phrases = candidate_phrases(tokens, stop)
    if not phrases:
        return []
    scored = score_phrases(phrases)
    if top_k is not None:
        # stable sort keeps original order among equal scores
        scored = sorted(scored, key=lambda ps: -ps[1])[:top_k]
    chosen = {w for phrase, _ in scored for w in phrase}
    seen = set()
    out = []
    for tok in tokens:
        if tok in chosen and tok not in seen:
            seen.add(tok)
            out.append(tok)
    return out
