"""The emotion cause transition graph: co-occurrence counting over
adjacent (context turn, response turn) pairs, PMI edge weighting and
filtering, subgraph retrieval, and a canonical JSON file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

from .corpus import Dialogue, Utterance, LISTENER
from .keywords import extract_keywords

NEG_INF = float("-inf")


class EctGraphFormatError(ValueError):
    pass


SpanSource = Callable[[Utterance, Dialogue], list[tuple[int, int]]]


def gold_spans(utt: Utterance, dialogue: Dialogue) -> list[tuple[int, int]]:
    """Use annotated cause spans; utterances without them yield nothing."""
    return list(utt.cause_spans)


def whole_utterance_span(utt: Utterance, dialogue: Dialogue) -> list[tuple[int, int]]:
    """Treat the entire utterance as the cause span.  This is both the
    untrained fallback and the span-analysis-off ablation."""
    return [(0, len(utt.tokens) - 1)]


def utterance_concepts(
    utt: Utterance,
    dialogue: Dialogue,
    span_source: SpanSource,
    keyword_extractor=extract_keywords,
) -> list[str]:
    """Deduplicated keywords over all cause spans of one utterance."""
    seen = set()
    out: list[str] = []
    for span in span_source(utt, dialogue):
        for word in keyword_extractor(utt.span_tokens(span)):
            if word not in seen:
                seen.add(word)
                out.append(word)
    return out


@dataclass
class CooccurrenceCounts:
    """Pair-population counts behind PMI.  Counting is a commutative
    monoid, so shards can be merged."""

    joint: dict[tuple[str, str], int] = field(default_factory=dict)
    head: dict[str, int] = field(default_factory=dict)
    tail: dict[str, int] = field(default_factory=dict)
    total: int = 0

    def observe(self, h: str, t: str) -> None:
        self.joint[(h, t)] = self.joint.get((h, t), 0) + 1
        self.head[h] = self.head.get(h, 0) + 1
        self.tail[t] = self.tail.get(t, 0) + 1
        self.total += 1

    def merge(self, other: "CooccurrenceCounts") -> "CooccurrenceCounts":
        out = CooccurrenceCounts(dict(self.joint), dict(self.head), dict(self.tail), self.total)
        for k, v in other.joint.items():
            out.joint[k] = out.joint.get(k, 0) + v
        for k, v in other.head.items():
            out.head[k] = out.head.get(k, 0) + v
        for k, v in other.tail.items():
            out.tail[k] = out.tail.get(k, 0) + v
        out.total += other.total
        return out


def collect_transitions(
    dialogues: list[Dialogue],
    span_source: SpanSource = gold_spans,
    keyword_extractor=extract_keywords,
) -> CooccurrenceCounts:
    """Count concept transitions for every adjacent pair (U_i, U_{i+1})
    where U_{i+1} is a listener turn: each head concept of U_i crossed
    with each tail concept of U_{i+1}."""
    counts = CooccurrenceCounts()
    for d in dialogues:
        for prev, nxt in zip(d.utterances, d.utterances[1:]):
            if nxt.speaker != LISTENER:
                continue
            heads = utterance_concepts(prev, d, span_source, keyword_extractor)
            if not heads:
                continue
            tails = utterance_concepts(nxt, d, span_source, keyword_extractor)
            for h in heads:
                for t in tails:
                    counts.observe(h, t)
    return counts


def pmi(counts: CooccurrenceCounts, h: str, t: str) -> float:
    """Natural-log PMI over the transition-pair population; unseen pairs
    get -inf so the filter always drops them."""
    if counts.total <= 0:
        raise ValueError("pmi undefined: no observed transitions")
    joint = counts.joint.get((h, t), 0)
    if joint == 0:
        return NEG_INF
    ch = counts.head.get(h, 0)
    ct = counts.tail.get(t, 0)
    return math.log(joint * counts.total / (ch * ct))


@dataclass(frozen=True)
class Subgraph:
    head: str
    pairs: tuple[tuple[str, str], ...]


class EctGraph:
    """Immutable directed concept graph.  Vertices sorted lexicographically,
    edges sorted by (head, tail): builds are canonical and reproducible."""

    def __init__(self, vertices: list[str], edges: list[tuple[int, int, float, int]]):
        self.vertices: tuple[str, ...] = tuple(vertices)
        self.edges: tuple[tuple[int, int, float, int], ...] = tuple(
            (int(h), int(t), float(p), int(c)) for h, t, p, c in edges
        )
        self.vertex_index: dict[str, int] = {v: i for i, v in enumerate(self.vertices)}
        n = len(self.vertices)
        for h, t, _, _ in self.edges:
            if not (0 <= h < n and 0 <= t < n):
                raise EctGraphFormatError(f"edge endpoint out of range: ({h}, {t}) with {n} vertices")
        adj: dict[int, list[tuple[int, float, int]]] = {}
        for h, t, p, c in self.edges:
            adj.setdefault(h, []).append((t, p, c))
        self._adj = adj

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def __contains__(self, concept: str) -> bool:
        return concept in self.vertex_index

    def neighbors(self, concept: str) -> list[tuple[str, float, int]]:
        """Out-neighbors of a vertex as (tail, pmi, co_count), in canonical
        edge order."""
        idx = self.vertex_index.get(concept)
        if idx is None:
            return []
        return [(self.vertices[t], p, c) for t, p, c in self._adj.get(idx, [])]


def build_graph(counts: CooccurrenceCounts, pmi_threshold: float = 0.0, min_count: int = 2) -> EctGraph:
    """Keep edges with joint count >= min_count and pmi >= threshold."""
    surviving: list[tuple[str, str, float, int]] = []
    for (h, t), c in counts.joint.items():
        if c < min_count:
            continue
        score = pmi(counts, h, t)
        if score >= pmi_threshold:
            surviving.append((h, t, score, c))
    vertices = sorted({h for h, _, _, _ in surviving} | {t for _, t, _, _ in surviving})
    index = {v: i for i, v in enumerate(vertices)}
    edges = sorted(
        ((index[h], index[t], p, c) for h, t, p, c in surviving),
        key=lambda e: (vertices[e[0]], vertices[e[1]]),
    )
    return EctGraph(vertices, edges)


def retrieve_subgraphs(graph: EctGraph, cs_n) -> list[Subgraph]:
    """One subgraph per concept of the last-utterance concept set that has
    out-edges: the concept is the head, each direct neighbor a tail."""
    out: list[Subgraph] = []
    for concept in cs_n:
        pairs = tuple((concept, tail) for tail, _, _ in graph.neighbors(concept))
        if pairs:
            out.append(Subgraph(head=concept, pairs=pairs))
    return out


GRAPH_FORMAT_VERSION = 1


def save_graph(graph: EctGraph) -> bytes:
    obj = {
        "version": GRAPH_FORMAT_VERSION,
        "vertices": list(graph.vertices),
        "edges": [[h, t, p, c] for h, t, p, c in graph.edges],
    }
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def load_graph(data: bytes) -> EctGraph:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EctGraphFormatError("not an ECT graph file") from exc
    if not isinstance(obj, dict) or "vertices" not in obj or "edges" not in obj:
        raise EctGraphFormatError("not an ECT graph file")
    version = obj.get("version")
    if version != GRAPH_FORMAT_VERSION:
        raise EctGraphFormatError(f"unsupported ECT graph version {version!r}")
    return EctGraph(obj["vertices"], [tuple(e) for e in obj["edges"]])


def save_counts(counts: CooccurrenceCounts) -> bytes:
    """Sidecar with the raw counts so stored PMI values can be re-derived."""
    obj = {
        "version": GRAPH_FORMAT_VERSION,
        "total": counts.total,
        "head": {k: counts.head[k] for k in sorted(counts.head)},
        "tail": {k: counts.tail[k] for k in sorted(counts.tail)},
        "joint": [[h, t, c] for (h, t), c in sorted(counts.joint.items())],
    }
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def load_counts(data: bytes) -> CooccurrenceCounts:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EctGraphFormatError("not an ECT graph counts file") from exc
    counts = CooccurrenceCounts()
    counts.total = int(obj["total"])
    counts.head = {k: int(v) for k, v in obj["head"].items()}
    counts.tail = {k: int(v) for k, v in obj["tail"].items()}
    counts.joint = {(h, t): int(c) for h, t, c in obj["joint"]}
    return counts
