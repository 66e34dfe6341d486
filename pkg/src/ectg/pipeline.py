"""End-to-end orchestration: model construction, stagewise training with
loss logs and checkpoints, response generation, and the ablation harness.
Everything is seeded and deterministic so command outputs are
byte-reproducible."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .concepts import (
    ConceptPredictor,
    dialogue_loss,
    predict_concepts,
)
from .config import RunConfig
from .corpus import Dialogue, Vocab, build_vocab, emotion_labels, load_corpus
from .generator import (
    GeneratorInput,
    ResponseGenerator,
    build_input,
    generate_with_trace,
    generation_loss,
)
from .graph import (
    EctGraph,
    build_graph,
    collect_transitions,
    gold_spans,
    load_graph,
    whole_utterance_span,
)
from .metrics import EvalReport, evaluate_corpus
from .spans import CauseSpan, SpanModel, model_spans, predict_span, encode_with_emotion, span_training_loss

logger = logging.getLogger(__name__)

SPAN_CKPT = "spans.ckpt"
CONCEPT_CKPT = "concepts.ckpt"
GENERATOR_CKPT = "generator.ckpt"


class TrainingAborted(RuntimeError):
    """Loss or gradient went non-finite; the last-good checkpoint on disk
    is the result."""


class MissingInput(FileNotFoundError):
    pass


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def span_source_for(config: RunConfig, span_model: SpanModel | None = None):
    if config.no_seca or config.span_source == "whole":
        return whole_utterance_span
    if config.span_source == "model":
        if span_model is None:
            raise MissingInput("span_source = model requires a trained span checkpoint")
        return model_spans(span_model)
    return gold_spans


@dataclass
class Workspace:
    """Everything a command needs, loaded once."""

    config: RunConfig
    dialogues: list[Dialogue]
    vocab: Vocab
    emotions: list[str]


def load_workspace(config: RunConfig) -> Workspace:
    corpus_path = _require(config.corpus, "corpus")
    dialogues = load_corpus(corpus_path)
    vocab = build_vocab(dialogues, config.min_freq)
    return Workspace(config=config, dialogues=dialogues, vocab=vocab, emotions=emotion_labels(dialogues))


def build_span_model(config: RunConfig, vocab: Vocab, emotions: list[str], rng: np.random.Generator) -> SpanModel:
    return SpanModel(
        rng, vocab, emotions,
        d_model=config.d_model, n_heads=config.n_heads, n_layers=2, max_len=config.max_len,
    )


def build_concept_model(config: RunConfig, vocab: Vocab, graph: EctGraph, rng: np.random.Generator) -> ConceptPredictor:
    return ConceptPredictor(
        rng, vocab, list(graph.vertices),
        d_model=config.d_model, d_gru=config.d_gru, n_heads=config.n_heads,
        max_len=config.max_len, max_utterances=config.max_utterances,
        max_concepts=config.max_concepts,
    )


def build_generator(config: RunConfig, vocab: Vocab, rng: np.random.Generator) -> ResponseGenerator:
    return ResponseGenerator(
        rng, vocab,
        d_model=config.d_model, n_heads=config.n_heads,
        max_src_len=config.max_src_len, max_len=config.max_gen_len,
    )


def build_graph_from_corpus(config: RunConfig, dialogues: list[Dialogue], span_model: SpanModel | None = None):
    source = span_source_for(config, span_model)
    counts = collect_transitions(dialogues, source)
    graph = build_graph(counts, config.pmi_threshold, config.min_count)
    return graph, counts


def load_graph_file(config: RunConfig) -> EctGraph:
    return load_graph(_require(config.graph, "graph file").read_bytes())


def _save_stage(path: Path, model, config: RunConfig, extra: dict | None = None) -> None:
    echo = config.to_dict()
    if extra:
        echo.update(extra)
    nn.save_checkpoint(path, model.params(), echo, config.seed)


def _load_stage(path: Path, model) -> None:
    ckpt = nn.load_checkpoint(_require(path, "checkpoint"))
    nn.load_into(model.params(), ckpt)


def _batches(n_items: int, batch_size: int, step: int) -> list[int]:
    """Deterministic round-robin batch for a given step."""
    if n_items == 0:
        return []
    start = (step * batch_size) % n_items
    return [(start + i) % n_items for i in range(min(batch_size, n_items))]


@dataclass
class TrainResult:
    rows: list[tuple]          # (step, loss, l_g, l_c) with None for n/a
    steps_run: int
    stopped_early: bool = False


def _mean_loss(terms: list[nn.Tensor]) -> nn.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    return nn.mul(total, nn.Tensor(1.0 / len(terms)))


def span_training_set(dialogues: list[Dialogue]):
    """(dialogue, utterance) pairs that carry at least one gold span."""
    out = []
    for d in dialogues:
        for u in d.utterances:
            if u.cause_spans:
                out.append((d, u))
    return out


def train_spans(
    model: SpanModel,
    dialogues: list[Dialogue],
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    ckpt_path: Path | None = None,
    checkpoint_every: int = 0,
    config: RunConfig | None = None,
    stop_when=None,
) -> TrainResult:
    samples = span_training_set(dialogues)
    if not samples and steps > 0:
        raise TrainingAborted("no utterances with gold cause spans to train on")
    opt = nn.Adam(model.params(), lr=lr)
    rows = []
    if ckpt_path is not None:
        _save_stage(ckpt_path, model, config)
    for step in range(steps):
        idxs = _batches(len(samples), batch_size, step)
        terms = []
        for i in idxs:
            d, u = samples[i]
            gold_raw = u.cause_spans[int(rng.integers(len(u.cause_spans)))]
            gold = CauseSpan(gold_raw[0], gold_raw[1])
            terms.append(span_training_loss(model, model.vocab.encode(u.tokens), d.emotion, gold))
        loss = _mean_loss(terms)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite span loss at step {step + 1}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((step + 1, value, None, None))
        if ckpt_path is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            _save_stage(ckpt_path, model, config)
        if stop_when is not None and stop_when(step + 1, value, model):
            if ckpt_path is not None:
                _save_stage(ckpt_path, model, config)
            return TrainResult(rows, step + 1, stopped_early=True)
    if ckpt_path is not None:
        _save_stage(ckpt_path, model, config)
    return TrainResult(rows, steps)


def span_exact_match(model: SpanModel, dialogues: list[Dialogue]) -> float:
    """Fraction of gold-spanned utterances whose best-scoring prediction
    exactly matches one of the gold spans."""
    samples = span_training_set(dialogues)
    if not samples:
        return 0.0
    hits = 0
    for d, u in samples:
        hidden = encode_with_emotion(model, model.vocab.encode(u.tokens), d.emotion)
        span = predict_span(model, hidden)
        if (span.start, span.end) in set(u.cause_spans):
            hits += 1
    return hits / len(samples)


def train_concepts(
    model: ConceptPredictor,
    graph: EctGraph,
    dialogues: list[Dialogue],
    config: RunConfig,
    rng: np.random.Generator,
    span_source,
    ckpt_path: Path | None = None,
    stop_when=None,
) -> TrainResult:
    opt = nn.Adam(model.params(), lr=config.lr)
    rows = []
    if ckpt_path is not None:
        _save_stage(ckpt_path, model, config, {"n_vertices": len(graph.vertices)})
    for step in range(config.steps):
        idxs = _batches(len(dialogues), config.batch_size, step)
        totals, lgs, lcs, counted = [], [], [], 0
        for i in idxs:
            total, l_g, l_c, n = dialogue_loss(model, graph, dialogues[i], span_source, config.r, rng)
            totals.append(total)
            lgs.append(float(l_g.data))
            if l_c is not None:
                lcs.append(float(l_c.data))
                counted += n
        loss = _mean_loss(totals)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite concept loss at step {step + 1}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        lg_mean = sum(lgs) / len(lgs) if lgs else None
        lc_mean = sum(lcs) / len(lcs) if lcs else None
        rows.append((step + 1, value, lg_mean, lc_mean))
        if ckpt_path is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            _save_stage(ckpt_path, model, config, {"n_vertices": len(graph.vertices)})
        if stop_when is not None and stop_when(step + 1, value, model):
            if ckpt_path is not None:
                _save_stage(ckpt_path, model, config, {"n_vertices": len(graph.vertices)})
            return TrainResult(rows, step + 1, stopped_early=True)
    if ckpt_path is not None:
        _save_stage(ckpt_path, model, config, {"n_vertices": len(graph.vertices)})
    return TrainResult(rows, config.steps)


def concept_nll_on_corpus(
    model: ConceptPredictor,
    graph: EctGraph,
    dialogues: list[Dialogue],
    span_source,
    r_ignored: float = 0.0,
) -> float:
    """Mean teacher-forced concept NLL over a corpus (L_c only)."""
    from .concepts import concept_nll, encode_dialogue, concept_set_for, prepare_subgraphs, gold_response_concepts
    from .graph import retrieve_subgraphs

    values = []
    for d in dialogues:
        enc = encode_dialogue(model, d, span_source)
        cs_n = concept_set_for(d.context[-1], d, model.vertex_rows, span_source, model.max_concepts)
        subgraphs = prepare_subgraphs(model, retrieve_subgraphs(graph, cs_n))
        gold = gold_response_concepts(model, d, span_source)
        l_c, counted, _ = concept_nll(model, enc, subgraphs, gold)
        if l_c is not None:
            values.append(float(l_c.data))
    return sum(values) / len(values) if values else float("nan")


def predicted_concepts_for_corpus(
    model: ConceptPredictor | None,
    graph: EctGraph | None,
    dialogues: list[Dialogue],
    span_source,
    no_graph: bool = False,
) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for d in dialogues:
        if no_graph or model is None or graph is None:
            out[d.id] = []
        else:
            out[d.id] = predict_concepts(model, graph, d, span_source)
    return out


def generator_inputs(
    vocab: Vocab,
    dialogues: list[Dialogue],
    concepts_by_id: dict[str, list[str]],
    max_src_len: int,
) -> dict[str, GeneratorInput]:
    return {
        d.id: build_input(vocab, [list(u.tokens) for u in d.context], concepts_by_id.get(d.id, []), max_src_len)
        for d in dialogues
    }


def train_generator(
    model: ResponseGenerator,
    dialogues: list[Dialogue],
    inputs: dict[str, GeneratorInput],
    config: RunConfig,
    rng: np.random.Generator,
    ckpt_path: Path | None = None,
    stop_when=None,
) -> TrainResult:
    opt = nn.Adam(model.params(), lr=config.lr)
    force_copy = 0.0 if config.no_copy else None
    rows = []
    if ckpt_path is not None:
        _save_stage(ckpt_path, model, config)
    for step in range(config.steps):
        idxs = _batches(len(dialogues), config.batch_size, step)
        terms = []
        for i in idxs:
            d = dialogues[i]
            loss, _ = generation_loss(model, inputs[d.id], list(d.response.tokens), force_copy=force_copy)
            terms.append(loss)
        loss = _mean_loss(terms)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite generator loss at step {step + 1}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((step + 1, value, None, None))
        if ckpt_path is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            _save_stage(ckpt_path, model, config)
        if stop_when is not None and stop_when(step + 1, value, model):
            if ckpt_path is not None:
                _save_stage(ckpt_path, model, config)
            return TrainResult(rows, step + 1, stopped_early=True)
    if ckpt_path is not None:
        _save_stage(ckpt_path, model, config)
    return TrainResult(rows, config.steps)


def loss_csv(rows: list[tuple]) -> str:
    lines = ["step,loss,l_g,l_c"]
    for step, loss, l_g, l_c in rows:
        lines.append(
            f"{step},{loss!r},{'' if l_g is None else repr(l_g)},{'' if l_c is None else repr(l_c)}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class LoadedModels:
    span: SpanModel | None
    concept: ConceptPredictor | None
    generator: ResponseGenerator
    graph: EctGraph | None


def load_models(ws: Workspace, need_span: bool = False) -> LoadedModels:
    """Rebuild model skeletons from config + corpus and load checkpoints.
    The concept model and graph are skipped under no_graph."""
    config = ws.config
    rng = np.random.default_rng(config.seed)
    ckpt_dir = Path(config.checkpoint_dir)
    span = None
    if need_span or config.span_source == "model":
        span = build_span_model(config, ws.vocab, ws.emotions, rng)
        _load_stage(ckpt_dir / SPAN_CKPT, span)
    concept = None
    graph = None
    if not config.no_graph:
        graph = load_graph_file(config)
        concept = build_concept_model(config, ws.vocab, graph, np.random.default_rng(config.seed + 1))
        _load_stage(ckpt_dir / CONCEPT_CKPT, concept)
    generator = build_generator(config, ws.vocab, np.random.default_rng(config.seed + 2))
    _load_stage(ckpt_dir / GENERATOR_CKPT, generator)
    return LoadedModels(span=span, concept=concept, generator=generator, graph=graph)


def generate_records(ws: Workspace, models: LoadedModels, dialogues: list[Dialogue]) -> list[dict]:
    """One output record per dialogue: predicted concepts, the decoded
    response, and per-token copy provenance."""
    config = ws.config
    source = span_source_for(config, models.span)
    concepts_by_id = predicted_concepts_for_corpus(models.concept, models.graph, dialogues, source, config.no_graph)
    force_copy = 0.0 if config.no_copy else None
    records = []
    for d in dialogues:
        gin = build_input(ws.vocab, [list(u.tokens) for u in d.context], concepts_by_id[d.id], config.max_src_len)
        tokens, copied = generate_with_trace(models.generator, gin, max_len=config.max_gen_len, force_copy=force_copy)
        records.append(
            {
                "id": d.id,
                "concepts": concepts_by_id[d.id],
                "response": " ".join(tokens),
                "copied": copied,
            }
        )
    return records


VARIANTS = ("full", "w/o copy", "w/o seca", "w/o graph")


def run_variants(ws: Workspace, models: LoadedModels, dialogues: list[Dialogue]):
    """Evaluate the trained model under each ablation: generation metrics
    against the references plus the teacher-forced generation loss."""
    config = ws.config
    references = [list(d.response.tokens) for d in dialogues]
    reports: dict[str, EvalReport] = {}
    losses: dict[str, dict[str, float]] = {}
    seca_less_graph = None
    for variant in VARIANTS:
        no_copy = config.no_copy or variant == "w/o copy"
        no_graph = config.no_graph or variant == "w/o graph"
        if variant == "w/o seca":
            if seca_less_graph is None:
                seca_less_graph, _ = build_graph_from_corpus(
                    apply_no_seca(config), ws.dialogues, None
                )
            graph = seca_less_graph
            source = whole_utterance_span
        else:
            graph = models.graph
            source = span_source_for(config, models.span)
        concepts_by_id = predicted_concepts_for_corpus(models.concept, graph, dialogues, source, no_graph)
        force_copy = 0.0 if no_copy else None
        hyps = []
        loss_values = []
        for d in dialogues:
            gin = build_input(ws.vocab, [list(u.tokens) for u in d.context], concepts_by_id[d.id], config.max_src_len)
            tokens, _ = generate_with_trace(models.generator, gin, max_len=config.max_gen_len, force_copy=force_copy)
            hyps.append(tokens)
            loss, _ = generation_loss(models.generator, gin, list(d.response.tokens), force_copy=force_copy)
            loss_values.append(float(loss.data))
        reports[variant] = evaluate_corpus(hyps, references)
        losses[variant] = {"tf_loss": sum(loss_values) / len(loss_values)}
    return reports, losses


def apply_no_seca(config: RunConfig) -> RunConfig:
    from dataclasses import replace

    return replace(config, no_seca=True)
