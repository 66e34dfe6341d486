"""Response concept prediction over the transition graph.

A causal decoder over already-chosen concepts (cross-attending into the
context encoding) drives a two-level graph attention: first over the
retrieved subgraphs, then over each subgraph's tail candidates; the
product is the next-concept distribution.  A non-autoregressive
insertion head over the reference response provides the auxiliary loss
that keeps concept selection grounded in actual response wording.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .corpus import Dialogue, Utterance, Vocab, BOS, EOS
from .encoders import ConceptFlow, ContextEncoder, ContextEncoding, UtteranceEncoder, concept_flow
from .graph import EctGraph, Subgraph, SpanSource, retrieve_subgraphs, utterance_concepts

logger = logging.getLogger(__name__)

STOP_CONCEPT = "<stop>"


class ConceptPredictionError(ValueError):
    pass


class ConceptPredictor:
    """All trainables for response concept prediction.

    The vertex embedding table has one row per graph vertex plus two
    reserved rows: a begin-of-sequence concept and the stop vertex that
    terminates decoding.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        vocab: Vocab,
        vertices: list[str],
        d_model: int = 128,
        d_gru: int = 768,
        n_heads: int = 4,
        max_len: int = 64,
        max_utterances: int = 32,
        max_concepts: int = 5,
    ):
        self.vocab = vocab
        self.vertices = list(vertices)
        self.vertex_rows = {v: i for i, v in enumerate(self.vertices)}
        self.bos_row = len(self.vertices)
        self.stop_row = len(self.vertices) + 1
        self.d_model = d_model
        self.d_gru = d_gru
        self.max_concepts = max_concepts

        self.utt_encoder = UtteranceEncoder(rng, vocab, d_model, n_heads, n_layers=2, max_len=max_len)
        self.ctx_encoder = ContextEncoder(rng, d_model, n_heads, n_layers=1, max_utterances=max_utterances)
        self.flow = ConceptFlow(rng, d_model, d_gru)
        self.vertex_emb = nn.Embedding(rng, len(self.vertices) + 2, d_model)
        self.decoder = nn.TransformerDecoder(rng, d_model, n_heads, n_layers=2)
        self.w4 = nn.parameter(rng, (d_model, d_model + d_gru))
        self.w5 = nn.parameter(rng, (d_model, 2 * d_model))
        self.w6 = nn.parameter(rng, (d_model, 2 * d_model + d_gru))
        self.w7 = nn.parameter(rng, (d_model, d_model))
        # insertion head: one non-causal decoder block over the partial
        # response, cross-attending into the concept decoder's states
        self.ins_pos = nn.PositionEmbedding(rng, max_len + 2, d_model)
        self.ins_layer = nn.DecoderLayer(rng, d_model, n_heads, 4 * d_model)
        self.ins_out = nn.Linear(rng, 2 * d_model, len(vocab) + 1)
        self.no_insert_id = len(vocab)

    def params(self) -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        out.update(nn.prefix_params(self.utt_encoder.params(), "utt_encoder"))
        out.update(nn.prefix_params(self.ctx_encoder.params(), "ctx_encoder"))
        out.update(nn.prefix_params(self.flow.params(), "flow"))
        out.update(nn.prefix_params(self.vertex_emb.params(), "vertex_emb"))
        out.update(nn.prefix_params(self.decoder.params(), "decoder"))
        out.update({"w4": self.w4, "w5": self.w5, "w6": self.w6, "w7": self.w7})
        out.update(nn.prefix_params(self.ins_pos.params(), "ins_pos"))
        out.update(nn.prefix_params(self.ins_layer.params(), "ins_layer"))
        out.update(nn.prefix_params(self.ins_out.params(), "ins_out"))
        return out


def concept_set_for(
    utt: Utterance,
    dialogue: Dialogue,
    vertex_rows: dict[str, int],
    span_source: SpanSource,
    max_concepts: int,
) -> list[str]:
    """Concepts of one utterance that exist in the graph, first-occurrence
    order, capped at max_concepts."""
    words = utterance_concepts(utt, dialogue, span_source)
    return [w for w in words if w in vertex_rows][:max_concepts]


def encode_dialogue(model: ConceptPredictor, dialogue: Dialogue, span_source: SpanSource) -> ContextEncoding:
    """Run the hierarchical encoders and concept flow over the context
    turns (everything except the reference response)."""
    context = dialogue.context
    if not context:
        raise ConceptPredictionError(f"dialogue {dialogue.id!r} has no context turns")
    cls_vecs = [nn.reshape(model.utt_encoder.encode(model.vocab.encode(u.tokens)), (1, model.d_model)) for u in context]
    h_cls = nn.concat(cls_vecs, axis=0)
    H_cls = model.ctx_encoder(h_cls)
    sets = [
        [model.vertex_rows[c] for c in concept_set_for(u, dialogue, model.vertex_rows, span_source, model.max_concepts)]
        for u in context
    ]
    hs, alphas = concept_flow(model.flow, sets, model.vertex_emb.table)
    return ContextEncoding(h_cls=h_cls, H_cls=H_cls, hs=hs, alphas=alphas)


def decode_states(model: ConceptPredictor, concept_rows: list[int], H_cls: nn.Tensor):
    """Causal decoder pass over [BOS-concept] + decoded concepts; returns
    (per-step hidden states, penultimate-layer states)."""
    rows = [model.bos_row] + list(concept_rows)
    x = nn.take_rows(model.vertex_emb.table, rows)
    final, _, layer_states = model.decoder(x, H_cls, causal=True)
    penult = layer_states[-2] if len(layer_states) >= 2 else layer_states[-1]
    return final, penult


def decode_hidden(model: ConceptPredictor, concept_rows: list[int], H_cls: nn.Tensor) -> nn.Tensor:
    """Decoder hidden for the next step given already-decoded concepts."""
    final, _ = decode_states(model, concept_rows, H_cls)
    return final[final.shape[0] - 1]


@dataclass
class AttendSubgraph:
    """A retrieved subgraph resolved to vertex-table rows."""

    head: str
    head_row: int
    tails: list[str]
    tail_rows: list[int]


def prepare_subgraphs(model: ConceptPredictor, subgraphs: list[Subgraph], add_stop: bool = True) -> list[AttendSubgraph]:
    """Resolve subgraphs against the model's vertex table, dropping
    vertices the model was never trained on (possible when evaluating
    with a different graph), and append the stop vertex to every tail
    candidate list."""
    out: list[AttendSubgraph] = []
    for sg in subgraphs:
        head_row = model.vertex_rows.get(sg.head)
        if head_row is None:
            continue
        tails, tail_rows = [], []
        for _, tail in sg.pairs:
            row = model.vertex_rows.get(tail)
            if row is not None:
                tails.append(tail)
                tail_rows.append(row)
        if add_stop:
            tails.append(STOP_CONCEPT)
            tail_rows.append(model.stop_row)
        if tails:
            out.append(AttendSubgraph(head=sg.head, head_row=head_row, tails=tails, tail_rows=tail_rows))
    return out


@dataclass
class GraphAttention:
    """Two-level attention over subgraphs and their tail candidates.
    P(next concept = pair (j,k)) = alpha_heads[j] * alpha_tails[j][k]."""

    heads: list[str]
    alpha_heads: nn.Tensor          # (J,)
    tails: list[list[str]]
    alpha_tails: list[nn.Tensor]    # each (N_j,)

    def joint(self) -> list[np.ndarray]:
        return [self.alpha_heads.data[j] * self.alpha_tails[j].data for j in range(len(self.heads))]

    def prob_of_tail(self, name: str) -> nn.Tensor | None:
        """Total probability of decoding a given tail concept, summed over
        every subgraph offering it."""
        terms = []
        for j, tail_names in enumerate(self.tails):
            for k, tail in enumerate(tail_names):
                if tail == name:
                    terms.append(nn.mul(self.alpha_heads[j], self.alpha_tails[j][k]))
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = nn.add(total, t)
        return total

    def argmax_pair(self) -> tuple[int, int]:
        best = (-1.0, 0, 0)
        for j, probs in enumerate(self.joint()):
            k = int(np.argmax(probs))
            if probs[k] > best[0]:
                best = (float(probs[k]), j, k)
        return best[1], best[2]


def graph_attend(model: ConceptPredictor, hdc_t: nn.Tensor, hs_n: nn.Tensor, subgraphs: list[AttendSubgraph]) -> GraphAttention:
    """Tail attention first (it feeds the subgraph scores), then subgraph
    attention over the attention-pooled head/tail pair vectors."""
    if not subgraphs:
        raise ConceptPredictionError("no transition available: empty subgraph list")
    state = nn.concat([hdc_t, hs_n], axis=0)
    query4 = nn.matmul(model.w4, state)
    head_scores: list[nn.Tensor] = []
    alpha_tails: list[nn.Tensor] = []
    for sg in subgraphs:
        head_vec = nn.take_rows(model.vertex_emb.table, [sg.head_row])[0]
        tail_mat = nn.take_rows(model.vertex_emb.table, sg.tail_rows)
        query6 = nn.matmul(model.w6, nn.concat([state, head_vec], axis=0))
        keys = nn.matmul(tail_mat, nn.transpose(model.w7))
        beta_tails = nn.matmul(keys, query6)
        a_tails = nn.softmax(beta_tails)
        alpha_tails.append(a_tails)
        head_mat = nn.take_rows(model.vertex_emb.table, [sg.head_row] * len(sg.tail_rows))
        pair_mat = nn.concat([head_mat, tail_mat], axis=1)
        pair_vec = nn.matmul(nn.transpose(pair_mat), a_tails)
        beta_j = nn.dot(query4, nn.matmul(model.w5, pair_vec))
        head_scores.append(nn.reshape(beta_j, (1,)))
    alpha_heads = nn.softmax(nn.concat(head_scores, axis=0))
    return GraphAttention(
        heads=[sg.head for sg in subgraphs],
        alpha_heads=alpha_heads,
        tails=[list(sg.tails) for sg in subgraphs],
        alpha_tails=alpha_tails,
    )


def concept_nll(
    model: ConceptPredictor,
    enc: ContextEncoding,
    subgraphs: list[AttendSubgraph],
    gold_concepts: list[str],
    strict: bool = False,
):
    """Teacher-forced NLL over the gold concept sequence plus the final
    stop step.  Gold concepts unreachable from the retrieved subgraphs are
    skipped with a warning (or raise in strict mode).

    Returns (loss tensor or None, steps counted, penultimate decoder
    states for the insertion head).
    """
    gold_rows = [model.vertex_rows[c] for c in gold_concepts if c in model.vertex_rows]
    gold_names = [c for c in gold_concepts if c in model.vertex_rows] + [STOP_CONCEPT]
    final, penult = decode_states(model, gold_rows, enc.H_cls)
    hs_n = enc.hs[-1]
    terms: list[nn.Tensor] = []
    if subgraphs:
        for t, gold in enumerate(gold_names):
            hdc_t = final[t]
            attention = graph_attend(model, hdc_t, hs_n, subgraphs)
            p = attention.prob_of_tail(gold)
            if p is None:
                if strict:
                    raise ConceptPredictionError(f"gold concept {gold!r} unreachable at step {t + 1}")
                logger.warning("gold concept %r unreachable at step %d; skipping", gold, t + 1)
                continue
            terms.append(nn.neg(nn.log_(p)))
    if not terms:
        return None, 0, penult
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    return nn.mul(total, nn.Tensor(1.0 / len(terms))), len(terms), penult


def sample_partial(rng: np.random.Generator, n: int) -> tuple[int, ...]:
    """Random ordered subsequence of 0..n-1 (any length, possibly empty)."""
    k = int(rng.integers(0, n + 1))
    if k == 0:
        return ()
    return tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))


def insertion_loss(
    model: ConceptPredictor,
    penult_states: nn.Tensor,
    gold_ids: list[int],
    partial: tuple[int, ...],
):
    """Slot-insertion NLL: the partial hypothesis (an ordered subsequence
    of the reference response) defines k+1 slots; each slot is trained to
    produce its missing gold tokens with uniform weight 1/|missing|, or
    the reserved no-insert symbol when nothing is missing.  The slot
    encoder cross-attends into the concept decoder's intermediate states,
    which is what routes response supervision back into concept
    selection.

    Returns (loss, per-slot log-distributions) so callers can recompute
    the weighted double sum independently.
    """
    if not gold_ids:
        raise ConceptPredictionError("insertion loss needs a non-empty reference response")
    k = len(partial)
    partial_ids = [gold_ids[i] for i in partial]
    seq = [BOS] + partial_ids + [EOS]
    x = nn.take_rows(model.utt_encoder.token_emb.table, seq)
    x = nn.add(x, model.ins_pos(len(seq)))
    states, _ = model.ins_layer(x, penult_states, None)
    slot_mat = nn.concat([states[: k + 1], states[1 : k + 2]], axis=1)
    log_probs = nn.log_softmax(model.ins_out(slot_mat), axis=-1)

    bounds = [-1] + list(partial) + [len(gold_ids)]
    rows, cols, weights = [], [], []
    for pos in range(k + 1):
        missing = list(range(bounds[pos] + 1, bounds[pos + 1]))
        if missing:
            w = 1.0 / len(missing)
            for n in missing:
                rows.append(pos)
                cols.append(gold_ids[n])
                weights.append(w)
        else:
            rows.append(pos)
            cols.append(model.no_insert_id)
            weights.append(1.0)
    picked = nn.pick(log_probs, rows, cols)
    weighted = nn.mul(picked, nn.Tensor(np.asarray(weights)))
    loss = nn.mul(nn.neg(nn.sum_(weighted)), nn.Tensor(1.0 / (k + 1)))
    return loss, log_probs


def combined_loss(l_g: nn.Tensor, l_c: nn.Tensor | None, r: float) -> nn.Tensor:
    """Multi-task objective: insertion loss plus r times the concept NLL."""
    if r < 0:
        raise ConceptPredictionError(f"loss weight r must be >= 0, got {r}")
    if l_c is None:
        return l_g
    return nn.add(l_g, nn.mul(l_c, nn.Tensor(float(r))))


def gold_response_concepts(model: ConceptPredictor, dialogue: Dialogue, span_source: SpanSource) -> list[str]:
    return concept_set_for(dialogue.response, dialogue, model.vertex_rows, span_source, model.max_concepts)


def dialogue_loss(
    model: ConceptPredictor,
    graph: EctGraph,
    dialogue: Dialogue,
    span_source: SpanSource,
    r: float,
    rng: np.random.Generator,
    strict: bool = False,
):
    """Full training objective for one dialogue: insertion loss over a
    sampled partial response plus weighted concept NLL."""
    enc = encode_dialogue(model, dialogue, span_source)
    cs_n = concept_set_for(dialogue.context[-1], dialogue, model.vertex_rows, span_source, model.max_concepts)
    subgraphs = prepare_subgraphs(model, retrieve_subgraphs(graph, cs_n))
    gold = gold_response_concepts(model, dialogue, span_source)
    l_c, counted, penult = concept_nll(model, enc, subgraphs, gold, strict=strict)
    gold_ids = model.vocab.encode(dialogue.response.tokens)
    partial = sample_partial(rng, len(gold_ids))
    l_g, _ = insertion_loss(model, penult, gold_ids, partial)
    return combined_loss(l_g, l_c, r), l_g, l_c, counted


def predict_concepts(
    model: ConceptPredictor,
    graph: EctGraph,
    dialogue: Dialogue,
    span_source: SpanSource,
    max_concepts: int | None = None,
) -> list[str]:
    """Greedy decode: take the argmax (subgraph, tail) pair each step,
    masking already-decoded tails, until the stop vertex or the cap."""
    max_concepts = model.max_concepts if max_concepts is None else max_concepts
    enc = encode_dialogue(model, dialogue, span_source)
    cs_n = concept_set_for(dialogue.context[-1], dialogue, model.vertex_rows, span_source, model.max_concepts)
    subgraphs = prepare_subgraphs(model, retrieve_subgraphs(graph, cs_n))
    if not subgraphs:
        return []
    decoded: list[str] = []
    while len(decoded) < max_concepts:
        rows = [model.vertex_rows[c] for c in decoded]
        hdc_t = decode_hidden(model, rows, enc.H_cls)
        attention = graph_attend(model, hdc_t, enc.hs[-1], subgraphs)
        best = (-1.0, None)
        for j, probs in enumerate(attention.joint()):
            for k, tail in enumerate(attention.tails[j]):
                if tail != STOP_CONCEPT and tail in decoded:
                    continue
                if probs[k] > best[0]:
                    best = (float(probs[k]), tail)
        tail = best[1]
        if tail is None or tail == STOP_CONCEPT:
            break
        decoded.append(tail)
    return decoded
