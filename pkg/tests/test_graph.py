from __future__ import annotations

import math

import numpy as np
import pytest

from ectg.corpus import LISTENER, parse_corpus
from ectg.graph import (
    CooccurrenceCounts,
    EctGraph,
    EctGraphFormatError,
    NEG_INF,
    build_graph,
    collect_transitions,
    gold_spans,
    load_counts,
    load_graph,
    pmi,
    retrieve_subgraphs,
    save_counts,
    save_graph,
    utterance_concepts,
    whole_utterance_span,
)


def brute_force_counts(dialogues) -> CooccurrenceCounts:
    """Independent nested-loop recount, written against the definition."""
    counts = CooccurrenceCounts()
    for d in dialogues:
        for i in range(len(d.utterances) - 1):
            nxt = d.utterances[i + 1]
            if nxt.speaker != LISTENER:
                continue
            heads = utterance_concepts(d.utterances[i], d, gold_spans)
            tails = utterance_concepts(nxt, d, gold_spans)
            for h in heads:
                for t in tails:
                    counts.observe(h, t)
    return counts


def test_fig2_style_single_dialogue_counts(mini_dialogues):
    counts = collect_transitions(mini_dialogues[:1])
    assert counts.joint == {("girlfriend", "love"): 1, ("girlfriend", "together"): 1}
    assert counts.total == 2
    assert counts.head == {"girlfriend": 2}
    assert counts.tail == {"love": 1, "together": 1}


def test_empty_concept_sets_contribute_nothing():
    lines = (
        '{"id": "e1", "emotion": "sad", "utterances": ['
        '{"speaker": "speaker", "text": "just the and of", "cause_spans": [[0, 3]]},'
        '{"speaker": "listener", "text": "warm waves here", "cause_spans": [[0, 1]]}]}'
    )
    counts = collect_transitions(parse_corpus(lines))
    assert counts.total == 0 and not counts.joint


def test_toy_counts_match_brute_force_recount(toy_dialogues):
    fast = collect_transitions(toy_dialogues)
    slow = brute_force_counts(toy_dialogues)
    assert fast.joint == slow.joint
    assert fast.head == slow.head
    assert fast.tail == slow.tail
    assert fast.total == slow.total


def test_merge_is_commutative_monoid(toy_dialogues):
    a = collect_transitions(toy_dialogues[:10])
    b = collect_transitions(toy_dialogues[10:])
    merged = a.merge(b)
    whole = collect_transitions(toy_dialogues)
    assert merged.joint == whole.joint and merged.total == whole.total
    assert b.merge(a).joint == merged.joint


def test_pmi_single_pair_is_zero():
    counts = CooccurrenceCounts()
    counts.observe("a", "b")
    assert pmi(counts, "a", "b") == pytest.approx(0.0)


def test_pmi_unseen_pair_negative_infinity():
    counts = CooccurrenceCounts()
    counts.observe("a", "b")
    assert pmi(counts, "a", "c") == NEG_INF
    assert pmi(counts, "zz", "b") == NEG_INF


def test_pmi_hand_arithmetic():
    # T=4, head(h)=2, tail(t)=2, joint=2 -> ln 2
    counts = CooccurrenceCounts()
    counts.observe("h", "t")
    counts.observe("h", "t")
    counts.observe("x", "y")
    counts.observe("y", "x")
    assert pmi(counts, "h", "t") == pytest.approx(math.log(2.0), abs=1e-12)


def test_build_graph_threshold_disabled_keeps_all(toy_dialogues):
    counts = collect_transitions(toy_dialogues)
    graph = build_graph(counts, pmi_threshold=-math.inf, min_count=1)
    assert graph.n_edges == len(counts.joint)


def test_build_graph_threshold_infinite_empty(toy_dialogues):
    counts = collect_transitions(toy_dialogues)
    graph = build_graph(counts, pmi_threshold=math.inf, min_count=1)
    assert graph.n_edges == 0 and len(graph.vertices) == 0


def test_toy_graph_equals_brute_force_filter(toy_dialogues):
    counts = brute_force_counts(toy_dialogues)
    threshold, min_count = 0.0, 1
    expected = set()
    for (h, t), c in counts.joint.items():
        score = math.log(c * counts.total / (counts.head[h] * counts.tail[t]))
        if c >= min_count and score >= threshold:
            expected.add((h, t))
    graph = build_graph(collect_transitions(toy_dialogues), threshold, min_count)
    got = {(graph.vertices[h], graph.vertices[t]) for h, t, _, _ in graph.edges}
    assert got == expected


def test_retrieve_subgraphs_empty_concept_set(toy_dialogues):
    graph = build_graph(collect_transitions(toy_dialogues), 0.0, 2)
    assert retrieve_subgraphs(graph, []) == []


def test_retrieve_subgraphs_fig2_mini_graph(mini_dialogues):
    graph = build_graph(collect_transitions(mini_dialogues), 0.0, 2)
    subgraphs = retrieve_subgraphs(graph, ["girlfriend"])
    assert len(subgraphs) == 1
    assert subgraphs[0].head == "girlfriend"
    assert subgraphs[0].pairs == (("girlfriend", "love"), ("girlfriend", "together"))


def test_retrieve_subgraphs_matches_linear_scan(rng, toy_dialogues):
    graph = build_graph(collect_transitions(toy_dialogues), 0.0, 1)
    pool = list(graph.vertices) + ["nonsense", "absent"]
    edges = [(graph.vertices[h], graph.vertices[t]) for h, t, _, _ in graph.edges]
    for _ in range(50):
        cs_n = [pool[int(i)] for i in rng.integers(0, len(pool), size=int(rng.integers(0, 5)))]
        got = retrieve_subgraphs(graph, cs_n)
        expected = []
        for concept in cs_n:
            pairs = tuple((concept, t) for h, t in edges if h == concept)
            if pairs:
                expected.append((concept, pairs))
        assert [(s.head, s.pairs) for s in got] == expected
        for s in got:
            assert set(s.pairs) <= set(edges)
            assert s.head in cs_n


def test_graph_roundtrip_empty():
    empty = build_graph(CooccurrenceCounts(joint={("a", "b"): 1}, head={"a": 1}, tail={"b": 1}, total=1), 10.0, 5)
    again = load_graph(save_graph(empty))
    assert again.vertices == () and again.edges == ()


def test_graph_roundtrip_toy(toy_dialogues):
    graph = build_graph(collect_transitions(toy_dialogues), 0.0, 2)
    again = load_graph(save_graph(graph))
    assert again.vertices == graph.vertices
    assert again.edges == graph.edges
    assert save_graph(again) == save_graph(graph)


def test_graph_corrupted_magic():
    with pytest.raises(EctGraphFormatError, match="not an ECT graph file"):
        load_graph(b"\x89PNG not json")
    with pytest.raises(EctGraphFormatError, match="not an ECT graph file"):
        load_graph(b"[1, 2, 3]")


def test_graph_version_mismatch(toy_dialogues):
    graph = build_graph(collect_transitions(toy_dialogues), 0.0, 2)
    blob = save_graph(graph).replace(b'"version":1', b'"version":9')
    with pytest.raises(EctGraphFormatError, match="version"):
        load_graph(blob)


def test_graph_truncation():
    # a truncated file is not valid JSON -> format error
    with pytest.raises(EctGraphFormatError):
        load_graph(b'{"version":1,"vertices":["a"],"edg')


def test_stored_pmi_recomputable_from_counts_sidecar(toy_dialogues):
    counts = collect_transitions(toy_dialogues)
    graph = build_graph(counts, 0.0, 2)
    sidecar = load_counts(save_counts(counts))
    for h, t, stored_pmi, co_count in graph.edges:
        head, tail = graph.vertices[h], graph.vertices[t]
        assert sidecar.joint[(head, tail)] == co_count
        recomputed = math.log(co_count * sidecar.total / (sidecar.head[head] * sidecar.tail[tail]))
        assert abs(recomputed - stored_pmi) < 1e-9


def test_build_is_pure_function_byte_identical(toy_dialogues):
    a = save_graph(build_graph(collect_transitions(toy_dialogues), 0.0, 2))
    b = save_graph(build_graph(brute_force_counts(toy_dialogues), 0.0, 2))
    assert a == b


def test_whole_utterance_span_covers_everything(toy_dialogues):
    u = toy_dialogues[0].utterances[0]
    assert whole_utterance_span(u, toy_dialogues[0]) == [(0, len(u.tokens) - 1)]


def test_no_seca_changes_edge_set(toy_dialogues):
    span_graph = build_graph(collect_transitions(toy_dialogues, gold_spans), 0.0, 2)
    whole_graph = build_graph(collect_transitions(toy_dialogues, whole_utterance_span), 0.0, 2)
    a = {(span_graph.vertices[h], span_graph.vertices[t]) for h, t, _, _ in span_graph.edges}
    b = {(whole_graph.vertices[h], whole_graph.vertices[t]) for h, t, _, _ in whole_graph.edges}
    assert a != b
