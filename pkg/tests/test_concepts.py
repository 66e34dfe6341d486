from __future__ import annotations

import math

import numpy as np
import pytest

from ectg import nn
from ectg.concepts import (
    AttendSubgraph,
    ConceptPredictionError,
    ConceptPredictor,
    STOP_CONCEPT,
    combined_loss,
    concept_nll,
    decode_hidden,
    decode_states,
    dialogue_loss,
    encode_dialogue,
    graph_attend,
    insertion_loss,
    predict_concepts,
    prepare_subgraphs,
    sample_partial,
)
from ectg.corpus import Vocab, build_vocab, load_corpus
from ectg.graph import Subgraph, build_graph, collect_transitions, gold_spans, retrieve_subgraphs

from conftest import TOY_CORPUS


def tiny_model(rng, vertices=("love", "together", "girlfriend", "party"), d_model=12, d_gru=10):
    vocab = Vocab(["i", "wish", "you", "love", ",", "may", "be", "together", "party", "the"])
    model = ConceptPredictor(
        rng, vocab, list(vertices),
        d_model=d_model, d_gru=d_gru, n_heads=2, max_len=24, max_utterances=8, max_concepts=5,
    )
    return model, vocab


def subgraph(model, head, tails, add_stop=True):
    return prepare_subgraphs(model, [Subgraph(head=head, pairs=tuple((head, t) for t in tails))], add_stop=add_stop)


def random_state(rng, model):
    hdc = nn.Tensor(rng.normal(size=model.d_model))
    hs_n = nn.Tensor(rng.normal(size=model.d_gru))
    return hdc, hs_n


def test_decode_hidden_t1_uses_bos_only(rng):
    model, _ = tiny_model(rng)
    H = nn.Tensor(rng.normal(size=(2, model.d_model)))
    h = decode_hidden(model, [], H)
    assert h.shape == (model.d_model,)


def test_decode_causality_prefix_states_stable(rng):
    model, _ = tiny_model(rng)
    H = nn.Tensor(rng.normal(size=(3, model.d_model)))
    short, _ = decode_states(model, [0, 1], H)
    longer, _ = decode_states(model, [0, 1, 2], H)
    assert np.allclose(short.data, longer.data[:3], atol=1e-12)


def test_decode_full_pass_matches_stepwise(rng):
    # no-cache oracle: one causal pass equals per-step decodes
    model, _ = tiny_model(rng)
    H = nn.Tensor(rng.normal(size=(3, model.d_model)))
    rows = [0, 2, 1]
    full, _ = decode_states(model, rows, H)
    for t in range(len(rows) + 1):
        step = decode_hidden(model, rows[:t], H)
        assert np.allclose(step.data, full.data[t], atol=1e-12)


def test_graph_attend_singleton_probabilities(rng):
    model, _ = tiny_model(rng)
    hdc, hs_n = random_state(rng, model)
    att = graph_attend(model, hdc, hs_n, subgraph(model, "girlfriend", ["love"], add_stop=False))
    assert att.alpha_heads.data[0] == pytest.approx(1.0)
    assert att.alpha_tails[0].data[0] == pytest.approx(1.0)
    assert att.joint()[0][0] == pytest.approx(1.0)


def test_graph_attend_identical_tails_split_evenly(rng):
    model, _ = tiny_model(rng)
    model.vertex_emb.table.data[1] = model.vertex_emb.table.data[0]  # love == together rows
    hdc, hs_n = random_state(rng, model)
    att = graph_attend(model, hdc, hs_n, subgraph(model, "girlfriend", ["love", "together"], add_stop=False))
    assert att.alpha_tails[0].data == pytest.approx([0.5, 0.5])


def test_graph_attend_empty_subgraphs_signal(rng):
    model, _ = tiny_model(rng)
    hdc, hs_n = random_state(rng, model)
    with pytest.raises(ConceptPredictionError, match="no transition available"):
        graph_attend(model, hdc, hs_n, [])


def test_graph_attend_hand_arithmetic_two_by_two(rng):
    """Scalar evaluation of the two-level attention on a 2x2 instance."""
    model, _ = tiny_model(rng, d_model=4, d_gru=3)
    d, g = 4, 3
    w4 = rng.normal(size=(d, d + g))
    w5 = rng.normal(size=(d, 2 * d))
    w6 = rng.normal(size=(d, 2 * d + g))
    w7 = rng.normal(size=(d, d))
    model.w4.data[:] = w4
    model.w5.data[:] = w5
    model.w6.data[:] = w6
    model.w7.data[:] = w7
    table = rng.normal(size=model.vertex_emb.table.shape)
    model.vertex_emb.table.data[:] = table
    hdc = rng.normal(size=d)
    hs_n = rng.normal(size=g)

    subgraphs = [
        AttendSubgraph(head="girlfriend", head_row=2, tails=["love", "together"], tail_rows=[0, 1]),
        AttendSubgraph(head="party", head_row=3, tails=["love", "together"], tail_rows=[0, 1]),
    ]
    att = graph_attend(model, nn.Tensor(hdc), nn.Tensor(hs_n), subgraphs)

    # scalar re-evaluation
    state = np.concatenate([hdc, hs_n])
    betas = []
    alpha_tails = []
    for head_row, tail_rows in ((2, [0, 1]), (3, [0, 1])):
        e_head = table[head_row]
        q6 = w6 @ np.concatenate([state, e_head])
        b_jk = np.array([(w7 @ table[t]) @ q6 for t in tail_rows])
        a_jk = np.exp(b_jk - b_jk.max())
        a_jk /= a_jk.sum()
        alpha_tails.append(a_jk)
        pair_vec = sum(a_jk[k] * np.concatenate([e_head, table[t]]) for k, t in enumerate(tail_rows))
        betas.append((w4 @ state) @ (w5 @ pair_vec))
    betas = np.array(betas)
    a_heads = np.exp(betas - betas.max())
    a_heads /= a_heads.sum()

    assert np.allclose(att.alpha_heads.data, a_heads, atol=1e-9)
    for j in range(2):
        assert np.allclose(att.alpha_tails[j].data, alpha_tails[j], atol=1e-9)
        assert np.allclose(att.joint()[j], a_heads[j] * alpha_tails[j], atol=1e-9)


def test_joint_distribution_sums_to_one(rng):
    model, _ = tiny_model(rng)
    for _ in range(50):
        hdc, hs_n = random_state(rng, model)
        sgs = subgraph(model, "girlfriend", ["love", "together"]) + subgraph(model, "party", ["love"])
        att = graph_attend(model, hdc, hs_n, sgs)
        total = sum(float(p.sum()) for p in att.joint())
        assert total == pytest.approx(1.0, abs=1e-9)


def test_prob_of_tail_sums_across_subgraphs(rng):
    model, _ = tiny_model(rng)
    hdc, hs_n = random_state(rng, model)
    sgs = subgraph(model, "girlfriend", ["love", "together"]) + subgraph(model, "party", ["love"])
    att = graph_attend(model, hdc, hs_n, sgs)
    p = att.prob_of_tail("love").item()
    expected = att.joint()[0][0] + att.joint()[1][0]
    assert p == pytest.approx(float(expected), abs=1e-12)
    assert att.prob_of_tail("absent") is None


def _encoding(rng, model, n_utts=2):
    H = nn.Tensor(rng.normal(size=(n_utts, model.d_model)))
    hs = [nn.Tensor(rng.normal(size=model.d_gru)) for _ in range(n_utts)]
    from ectg.encoders import ContextEncoding

    return ContextEncoding(h_cls=H, H_cls=H, hs=hs, alphas=[None] * n_utts)


def test_concept_nll_analytic_quarter(rng):
    # fabricate a single-step case with P(gold) = 0.25 by symmetry:
    # four identical tail embeddings under one head
    model, _ = tiny_model(rng)
    for row in (1, 2, 3):
        model.vertex_emb.table.data[row] = model.vertex_emb.table.data[0]
    model.vertex_emb.table.data[model.stop_row] = model.vertex_emb.table.data[0]
    enc = _encoding(rng, model)
    sgs = [AttendSubgraph(head="girlfriend", head_row=2,
                          tails=["love", "together", "girlfriend", "party"],
                          tail_rows=[0, 1, 2, 3])]
    loss, counted, _ = concept_nll(model, enc, sgs, ["love"])
    # two steps: gold "love" (p=0.25 by symmetry) and stop (unreachable -> skipped)
    assert counted == 1
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-9)


def test_concept_nll_matches_scalar_recomputation(rng):
    model, _ = tiny_model(rng)
    enc = _encoding(rng, model)
    sgs = subgraph(model, "girlfriend", ["love", "together"]) + subgraph(model, "party", ["love"])
    gold = ["love", "together"]
    loss, counted, _ = concept_nll(model, enc, sgs, gold)
    assert counted == 3  # love, together, stop

    final, _ = decode_states(model, [model.vertex_rows[g] for g in gold], enc.H_cls)
    expected = 0.0
    for t, name in enumerate(gold + [STOP_CONCEPT]):
        att = graph_attend(model, final[t], enc.hs[-1], sgs)
        p = 0.0
        for j, tails in enumerate(att.tails):
            for k, tail in enumerate(tails):
                if tail == name:
                    p += float(att.alpha_heads.data[j] * att.alpha_tails[j].data[k])
        expected += -math.log(p)
    assert loss.item() == pytest.approx(expected / 3.0, abs=1e-9)


def test_concept_nll_strict_raises_on_unreachable(rng):
    model, _ = tiny_model(rng)
    enc = _encoding(rng, model)
    sgs = subgraph(model, "girlfriend", ["love"])
    with pytest.raises(ConceptPredictionError, match="unreachable"):
        concept_nll(model, enc, sgs, ["party"], strict=True)


def test_concept_nll_skips_unreachable_by_default(rng, caplog):
    model, _ = tiny_model(rng)
    enc = _encoding(rng, model)
    sgs = subgraph(model, "girlfriend", ["love"])
    with caplog.at_level("WARNING"):
        loss, counted, _ = concept_nll(model, enc, sgs, ["party"])
    assert counted == 1  # stop step still counted
    assert "unreachable" in caplog.text


def test_sample_partial_is_sorted_subset(rng):
    for _ in range(200):
        n = int(rng.integers(1, 10))
        partial = sample_partial(rng, n)
        assert list(partial) == sorted(set(partial))
        assert all(0 <= i < n for i in partial)


def test_insertion_loss_full_partial_trains_no_insert(rng):
    model, vocab = tiny_model(rng)
    states = nn.Tensor(rng.normal(size=(3, model.d_model)))
    gold = vocab.encode(["i", "wish", "you"])
    loss, log_probs = insertion_loss(model, states, gold, (0, 1, 2))
    expected = -log_probs.data[:, model.no_insert_id].mean()
    assert loss.item() == pytest.approx(float(expected), abs=1e-12)


def test_insertion_loss_empty_partial_formula(rng):
    model, vocab = tiny_model(rng)
    states = nn.Tensor(rng.normal(size=(2, model.d_model)))
    gold = vocab.encode(["love", "together"])
    loss, log_probs = insertion_loss(model, states, gold, ())
    expected = -0.5 * (log_probs.data[0, gold[0]] + log_probs.data[0, gold[1]])
    assert loss.item() == pytest.approx(float(expected), abs=1e-12)


def test_insertion_loss_matches_scalar_double_sum(rng):
    model, vocab = tiny_model(rng)
    states = nn.Tensor(rng.normal(size=(4, model.d_model)))
    gold = vocab.encode(["i", "wish", "you", "love", ",", "may"])
    partial = (1, 4)
    loss, log_probs = insertion_loss(model, states, gold, partial)
    # scalar oracle: slots are gaps around kept positions 1 and 4
    k = len(partial)
    bounds = [-1, 1, 4, len(gold)]
    expected = 0.0
    for pos in range(k + 1):
        missing = list(range(bounds[pos] + 1, bounds[pos + 1]))
        if missing:
            expected += sum(-log_probs.data[pos, gold[n]] * (1.0 / len(missing)) for n in missing)
        else:
            expected += -log_probs.data[pos, model.no_insert_id]
    expected /= k + 1
    assert loss.item() == pytest.approx(float(expected), abs=1e-12)


def test_insertion_loss_empty_reference_rejected(rng):
    model, _ = tiny_model(rng)
    states = nn.Tensor(rng.normal(size=(2, model.d_model)))
    with pytest.raises(ConceptPredictionError, match="non-empty"):
        insertion_loss(model, states, [], ())


def test_combined_loss_weighting():
    l_g = nn.Tensor(1.0)
    l_c = nn.Tensor(2.0)
    assert combined_loss(l_g, l_c, 0.0).item() == pytest.approx(1.0)
    assert combined_loss(l_g, l_c, 0.5).item() == pytest.approx(2.0)
    assert combined_loss(l_g, None, 1.0).item() == pytest.approx(1.0)


def test_combined_loss_gradient_is_sum_of_parts(rng, toy_vocab):
    dialogues = load_corpus(TOY_CORPUS)
    graph = build_graph(collect_transitions(dialogues), 0.0, 2)
    model = ConceptPredictor(rng, toy_vocab, list(graph.vertices), d_model=12, d_gru=10,
                             n_heads=2, max_len=24, max_utterances=8)
    d = dialogues[0]
    probe_rng = np.random.default_rng(4)

    def parts(r):
        local = np.random.default_rng(8)
        total, l_g, l_c, _ = dialogue_loss(model, graph, d, gold_spans, r, local)
        return total

    params = model.params()
    for p in params.values():
        p.zero_grad()
    parts(0.0).backward()
    g_lg = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.zero_grad()
    parts(1.0).backward()
    g_sum = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.zero_grad()
    # gradient of r*L_c alone, from the identity grad(L_g + r L_c) - grad(L_g)
    lc_part = {k: g_sum[k] - g_lg[k] for k in params}
    half = parts(0.5)
    for p in params.values():
        p.zero_grad()
    half.backward()
    for k, p in params.items():
        expected = g_lg[k] + 0.5 * lc_part[k]
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert np.allclose(got, expected, atol=1e-9), k


def test_predict_concepts_empty_cs_n(rng, toy_vocab):
    dialogues = load_corpus(TOY_CORPUS)
    graph = build_graph(collect_transitions(dialogues), 0.0, 2)
    model = ConceptPredictor(rng, toy_vocab, list(graph.vertices), d_model=12, d_gru=10,
                             n_heads=2, max_len=24, max_utterances=8)

    def no_spans(utt, dialogue):
        return []

    assert predict_concepts(model, graph, dialogues[0], no_spans) == []


def test_predict_concepts_respects_cap_and_no_duplicates(rng, toy_vocab):
    dialogues = load_corpus(TOY_CORPUS)
    graph = build_graph(collect_transitions(dialogues), 0.0, 2)
    model = ConceptPredictor(rng, toy_vocab, list(graph.vertices), d_model=12, d_gru=10,
                             n_heads=2, max_len=24, max_utterances=8)
    for d in dialogues[:6]:
        out = predict_concepts(model, graph, d, gold_spans, max_concepts=1)
        assert len(out) <= 1
        full = predict_concepts(model, graph, d, gold_spans)
        assert len(full) <= model.max_concepts
        assert len(full) == len(set(full))
        assert STOP_CONCEPT not in full


def test_prepare_subgraphs_drops_unknown_vertices(rng):
    model, _ = tiny_model(rng, vertices=("love", "girlfriend"))
    sgs = prepare_subgraphs(model, [
        Subgraph(head="girlfriend", pairs=(("girlfriend", "love"), ("girlfriend", "missing"))),
        Subgraph(head="unknown", pairs=(("unknown", "love"),)),
    ])
    assert len(sgs) == 1
    assert sgs[0].tails == ["love", STOP_CONCEPT]
