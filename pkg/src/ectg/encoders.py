"""Hierarchical dialogue encoding: per-utterance [CLS] vectors, a
cross-utterance encoder over them, and the recurrent concept flow that
summarizes the context's concept sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .corpus import Vocab, CLS


class UtteranceEncoder:
    """Self-attention encoder returning the hidden vector of a prepended
    [CLS] token as the utterance summary."""

    def __init__(self, rng, vocab: Vocab, d_model: int, n_heads: int = 4, n_layers: int = 2, max_len: int = 64):
        self.vocab = vocab
        self.d_model = d_model
        self.token_emb = nn.Embedding(rng, len(vocab), d_model)
        self.pos_emb = nn.PositionEmbedding(rng, max_len + 1, d_model)
        self.encoder = nn.TransformerEncoder(rng, d_model, n_heads, n_layers)

    def hidden_states(self, token_ids) -> nn.Tensor:
        if len(token_ids) == 0:
            raise ValueError("cannot encode an empty utterance")
        x = nn.take_rows(self.token_emb.table, [CLS] + list(token_ids))
        x = nn.add(x, self.pos_emb(x.shape[0]))
        return self.encoder(x)

    def encode(self, token_ids) -> nn.Tensor:
        """h_cls: position-0 hidden state over [CLS] + tokens."""
        return self.hidden_states(token_ids)[0]

    def params(self):
        out = {}
        out.update(nn.prefix_params(self.token_emb.params(), "token_emb"))
        out.update(nn.prefix_params(self.pos_emb.params(), "pos_emb"))
        out.update(nn.prefix_params(self.encoder.params(), "encoder"))
        return out


class ContextEncoder:
    """Models dependencies between the utterance summaries; position
    embeddings are over the utterance index, no causal mask."""

    def __init__(self, rng, d_model: int, n_heads: int = 4, n_layers: int = 1, max_utterances: int = 32):
        self.pos_emb = nn.PositionEmbedding(rng, max_utterances, d_model)
        self.encoder = nn.TransformerEncoder(rng, d_model, n_heads, n_layers)

    def __call__(self, h_cls: nn.Tensor) -> nn.Tensor:
        x = nn.add(h_cls, self.pos_emb(h_cls.shape[0]))
        return self.encoder(x)

    def params(self):
        out = {}
        out.update(nn.prefix_params(self.pos_emb.params(), "pos_emb"))
        out.update(nn.prefix_params(self.encoder.params(), "encoder"))
        return out


class ConceptFlow:
    """GRU over attention-pooled concept embeddings, one step per
    utterance.  Attention scores are bilinear in the previous state."""

    def __init__(self, rng, d_emb: int, d_gru: int):
        self.d_emb = d_emb
        self.d_gru = d_gru
        self.w3 = nn.parameter(rng, (d_gru, d_emb))
        self.gru = nn.GRUCell(rng, d_emb, d_gru)

    def initial_state(self) -> nn.Tensor:
        return nn.Tensor(np.zeros(self.d_gru))

    def step(self, hs_prev: nn.Tensor, concept_embs: nn.Tensor | None):
        """One flow step.  concept_embs is (m, d_emb) or None for an empty
        concept set, which steps the GRU on a zero input."""
        if concept_embs is None or concept_embs.shape[0] == 0:
            pooled = nn.Tensor(np.zeros(self.d_emb))
            return self.gru(hs_prev, pooled), None
        scores = nn.matmul(concept_embs, nn.matmul(nn.transpose(self.w3), hs_prev))
        alpha = nn.softmax(scores)
        pooled = nn.matmul(nn.transpose(concept_embs), alpha)
        return self.gru(hs_prev, pooled), alpha

    def params(self):
        out = {"w3": self.w3}
        out.update(nn.prefix_params(self.gru.params(), "gru"))
        return out


@dataclass
class ContextEncoding:
    """Everything the concept decoder needs about one dialogue context."""

    h_cls: nn.Tensor           # (n, d_model)
    H_cls: nn.Tensor           # (n, d_model)
    hs: list[nn.Tensor]        # hs_0 .. hs_n, each (d_gru,)
    alphas: list[nn.Tensor | None]  # per-utterance concept attention


def concept_flow(flow: ConceptFlow, concept_sets, vertex_table: nn.Tensor):
    """Run the flow over per-utterance concept id sets (ids into
    vertex_table rows).  Returns (hs_1..hs_n, alphas)."""
    hs = [flow.initial_state()]
    alphas: list[nn.Tensor | None] = []
    for ids in concept_sets:
        embs = nn.take_rows(vertex_table, list(ids)) if len(ids) else None
        nxt, alpha = flow.step(hs[-1], embs)
        hs.append(nxt)
        alphas.append(alpha)
    return hs[1:], alphas
