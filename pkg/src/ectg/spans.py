"""Emotion-cause span identification: a small self-attention encoder over
utterance tokens plus the emotion label, with start/end pointer heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .corpus import Vocab, SEP


class SpanModelError(ValueError):
    pass


@dataclass(frozen=True)
class CauseSpan:
    start: int
    end: int
    score: float = 0.0


class SpanModel:
    """Pointer-attention span extractor.  The encoder input is the
    utterance tokens followed by [SEP] and the emotion embedding; pointing
    is restricted to the token positions."""

    def __init__(
        self,
        rng: np.random.Generator,
        vocab: Vocab,
        emotions: list[str],
        d_model: int = 128,
        n_heads: int = 4,
        n_layers: int = 2,
        max_len: int = 64,
    ):
        self.vocab = vocab
        self.emotions = list(emotions)
        self.emotion_index = {e: i for i, e in enumerate(self.emotions)}
        self.d_model = d_model
        self.token_emb = nn.Embedding(rng, len(vocab), d_model)
        self.emotion_emb = nn.Embedding(rng, len(self.emotions), d_model)
        self.pos_emb = nn.PositionEmbedding(rng, max_len + 2, d_model)
        self.encoder = nn.TransformerEncoder(rng, d_model, n_heads, n_layers)
        self.start_head = nn.Linear(rng, d_model, 1, bias=False)
        self.end_head = nn.Linear(rng, d_model, 1, bias=False)

    def params(self) -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        out.update(nn.prefix_params(self.token_emb.params(), "token_emb"))
        out.update(nn.prefix_params(self.emotion_emb.params(), "emotion_emb"))
        out.update(nn.prefix_params(self.pos_emb.params(), "pos_emb"))
        out.update(nn.prefix_params(self.encoder.params(), "encoder"))
        out.update(nn.prefix_params(self.start_head.params(), "start_head"))
        out.update(nn.prefix_params(self.end_head.params(), "end_head"))
        return out


def encode_with_emotion(model: SpanModel, token_ids, emotion: str) -> nn.Tensor:
    """Hidden states over tokens + [SEP] + emotion; length = len(tokens)+2."""
    if len(token_ids) == 0:
        raise SpanModelError("cannot encode an empty utterance")
    if emotion not in model.emotion_index:
        raise SpanModelError(f"unknown emotion {emotion!r}; known: {', '.join(model.emotions)}")
    toks = nn.take_rows(model.token_emb.table, list(token_ids) + [SEP])
    emo = nn.take_rows(model.emotion_emb.table, [model.emotion_index[emotion]])
    x = nn.concat([toks, emo], axis=0)
    x = nn.add(x, model.pos_emb(x.shape[0]))
    return model.encoder(x)


def pointer_logits(model: SpanModel, hidden: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
    """Start/end scores over the utterance token positions only (the two
    trailing SEP/emotion positions are cut off)."""
    n_tokens = hidden.shape[0] - 2
    if n_tokens <= 0:
        raise SpanModelError("no unmasked token positions to point at")
    token_hidden = hidden[:n_tokens]
    start = nn.reshape(model.start_head(token_hidden), (n_tokens,))
    end = nn.reshape(model.end_head(token_hidden), (n_tokens,))
    return start, end


def predict_span(model: SpanModel, hidden: nn.Tensor) -> CauseSpan:
    """Greedy pointer decode: argmax start, then argmax end restricted to
    positions >= start.  Ties break to the smallest index."""
    start_logits, end_logits = pointer_logits(model, hidden)
    start_dist = nn.softmax(start_logits)
    s = int(np.argmax(start_dist.data))
    n = start_dist.data.shape[0]
    end_mask = np.arange(n) < s
    end_dist = nn.softmax(nn.masked_fill(end_logits, end_mask, -np.inf))
    e = int(np.argmax(end_dist.data))
    score = float(np.log(start_dist.data[s]) + np.log(end_dist.data[e]))
    return CauseSpan(start=s, end=e, score=score)


def span_loss(start_dist: nn.Tensor, end_dist: nn.Tensor, gold: CauseSpan) -> nn.Tensor:
    """Pointer NLL: -log p_start(gold.start) - log p_end(gold.end)."""
    n = start_dist.shape[0]
    if not (0 <= gold.start <= gold.end < n):
        raise SpanModelError(f"gold span ({gold.start}, {gold.end}) outside {n} positions")
    ps = float(start_dist.data[gold.start])
    pe = float(end_dist.data[gold.end])
    if ps <= 0.0 or pe <= 0.0:
        raise SpanModelError("gold position has zero probability (masked out)")
    return nn.neg(nn.add(nn.log_(start_dist[gold.start]), nn.log_(end_dist[gold.end])))


def span_training_loss(model: SpanModel, token_ids, emotion: str, gold: CauseSpan) -> nn.Tensor:
    """Teacher-forced loss for one utterance: the end distribution is
    masked to positions >= the gold start."""
    hidden = encode_with_emotion(model, token_ids, emotion)
    start_logits, end_logits = pointer_logits(model, hidden)
    n = start_logits.shape[0]
    start_dist = nn.softmax(start_logits)
    end_mask = np.arange(n) < gold.start
    end_dist = nn.softmax(nn.masked_fill(end_logits, end_mask, -np.inf))
    return span_loss(start_dist, end_dist, gold)


def model_spans(model: SpanModel):
    """Span source for graph construction backed by a trained model."""

    def source(utt, dialogue):
        hidden = encode_with_emotion(model, model.vocab.encode(utt.tokens), dialogue.emotion)
        span = predict_span(model, hidden)
        return [(span.start, span.end)]

    return source
