"""Command-line entry point.

    ectg build-graph --config run.cfg
    ectg train --config run.cfg --stage all
    ectg generate --config run.cfg --out out/responses.jsonl
    ectg eval --hyp out/responses.jsonl --ref corpus.jsonl
    ectg eval --variants --config run.cfg
    ectg inspect --graph out/graph.json girlfriend
    ectg chat --config run.cfg

Exit codes: 0 success, 1 domain error, 2 missing input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .corpus import CorpusError, load_corpus, make_utterance, Dialogue, LISTENER, SPEAKER
from .generator import build_input, generate_with_trace
from .graph import EctGraphFormatError, load_graph, save_counts, save_graph
from .metrics import evaluate_corpus, format_table
from .nn import CheckpointError
from .pipeline import MissingInput, TrainingAborted

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_MISSING = 2


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(command: str, config: RunConfig | None, inputs: list[Path], outputs: list[Path], out_dir: Path) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict() if config else None,
        "inputs": {str(p): _sha256(p) for p in sorted(set(inputs)) if p.exists()},
        "outputs": {str(p): _sha256(p) for p in sorted(set(outputs)) if p.exists()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command.replace('-', '_')}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config_from_args(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in (
        "corpus", "graph", "checkpoint_dir", "output_dir", "seed", "steps",
        "batch_size", "lr", "pmi_threshold", "min_count", "span_source",
        "max_concepts", "d_model", "d_gru",
    ):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    for flag in ("no_copy", "no_seca", "no_graph"):
        if getattr(args, flag, False):
            overrides[flag] = True
    return apply_overrides(config, overrides)


def cmd_build_graph(args) -> int:
    config = _config_from_args(args)
    corpus_path = Path(config.corpus)
    if not corpus_path.exists():
        print(f"error: corpus not found: {corpus_path}", file=sys.stderr)
        return EXIT_MISSING
    dialogues = load_corpus(corpus_path)
    span_model = None
    if config.span_source == "model" and not config.no_seca:
        ws = pipeline.load_workspace(config)
        span_model = pipeline.build_span_model(config, ws.vocab, ws.emotions, np.random.default_rng(config.seed))
        pipeline._load_stage(Path(config.checkpoint_dir) / pipeline.SPAN_CKPT, span_model)
    graph, counts = pipeline.build_graph_from_corpus(config, dialogues, span_model)
    graph_path = Path(config.graph)
    graph_path.parent.mkdir(parents=True, exist_ok=True)
    graph_path.write_bytes(save_graph(graph))
    counts_path = graph_path.with_suffix(".counts.json")
    counts_path.write_bytes(save_counts(counts))
    if not dialogues:
        print("warning: empty corpus; wrote an empty graph", file=sys.stderr)
    print(f"vertices: {len(graph.vertices)}")
    print(f"edges: {graph.n_edges}")
    pmis = [e[2] for e in graph.edges]
    if pmis:
        lo, hi = min(pmis), max(pmis)
        buckets = 5
        width = (hi - lo) / buckets or 1.0
        hist = [0] * buckets
        for p in pmis:
            hist[min(buckets - 1, int((p - lo) / width))] += 1
        print("pmi histogram:")
        for i, count in enumerate(hist):
            print(f"  [{lo + i * width:+.3f}, {lo + (i + 1) * width:+.3f}): {count}")
    write_manifest("build-graph", config, [corpus_path], [graph_path, counts_path], Path(config.output_dir))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config_from_args(args)
    ws = pipeline.load_workspace(config)
    stage = args.stage
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []

    def log_rows(name: str, rows) -> None:
        path = out_dir / f"loss_{name}.csv"
        path.write_text(pipeline.loss_csv(rows), encoding="utf-8")
        outputs.append(path)

    stages = ("spans", "concepts", "generator") if stage == "all" else (stage,)
    for st in stages:
        if st == "spans":
            model = pipeline.build_span_model(config, ws.vocab, ws.emotions, np.random.default_rng(config.seed))
            result = pipeline.train_spans(
                model, ws.dialogues, config.steps, config.lr, config.batch_size,
                np.random.default_rng(config.seed + 10),
                ckpt_path=ckpt_dir / pipeline.SPAN_CKPT,
                checkpoint_every=config.checkpoint_every, config=config,
            )
            log_rows("spans", result.rows)
            outputs.append(ckpt_dir / pipeline.SPAN_CKPT)
        elif st == "concepts":
            if config.no_graph:
                print("skipping concept stage: no_graph is set")
                continue
            graph = pipeline.load_graph_file(config)
            span_model = None
            if config.span_source == "model":
                span_model = pipeline.build_span_model(config, ws.vocab, ws.emotions, np.random.default_rng(config.seed))
                pipeline._load_stage(ckpt_dir / pipeline.SPAN_CKPT, span_model)
            model = pipeline.build_concept_model(config, ws.vocab, graph, np.random.default_rng(config.seed + 1))
            result = pipeline.train_concepts(
                model, graph, ws.dialogues, config,
                np.random.default_rng(config.seed + 11),
                pipeline.span_source_for(config, span_model),
                ckpt_path=ckpt_dir / pipeline.CONCEPT_CKPT,
            )
            log_rows("concepts", result.rows)
            outputs.append(ckpt_dir / pipeline.CONCEPT_CKPT)
        elif st == "generator":
            span_model = None
            if config.span_source == "model":
                span_model = pipeline.build_span_model(config, ws.vocab, ws.emotions, np.random.default_rng(config.seed))
                pipeline._load_stage(ckpt_dir / pipeline.SPAN_CKPT, span_model)
            source = pipeline.span_source_for(config, span_model)
            concept_model = None
            graph = None
            if not config.no_graph:
                graph = pipeline.load_graph_file(config)
                concept_model = pipeline.build_concept_model(config, ws.vocab, graph, np.random.default_rng(config.seed + 1))
                pipeline._load_stage(ckpt_dir / pipeline.CONCEPT_CKPT, concept_model)
            concepts = pipeline.predicted_concepts_for_corpus(concept_model, graph, ws.dialogues, source, config.no_graph)
            inputs = pipeline.generator_inputs(ws.vocab, ws.dialogues, concepts, config.max_src_len)
            model = pipeline.build_generator(config, ws.vocab, np.random.default_rng(config.seed + 2))
            result = pipeline.train_generator(
                model, ws.dialogues, inputs, config,
                np.random.default_rng(config.seed + 12),
                ckpt_path=ckpt_dir / pipeline.GENERATOR_CKPT,
            )
            log_rows("generator", result.rows)
            outputs.append(ckpt_dir / pipeline.GENERATOR_CKPT)
        else:
            print(f"error: unknown stage {st!r}", file=sys.stderr)
            return EXIT_DOMAIN
    write_manifest("train", config, [Path(config.corpus)], outputs, out_dir)
    return EXIT_OK


def cmd_generate(args) -> int:
    config = _config_from_args(args)
    ws = pipeline.load_workspace(config)
    dialogues = load_corpus(args.input) if args.input else ws.dialogues
    models = pipeline.load_models(ws)
    records = pipeline.generate_records(ws, models, dialogues)
    out_path = Path(args.out) if args.out else Path(config.output_dir) / "responses.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(rec, ensure_ascii=False, separators=(",", ":")) for rec in records]
    out_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    print(f"wrote {len(records)} responses to {out_path}")
    inputs = [Path(config.corpus), Path(config.graph)] + [Path(config.checkpoint_dir) / n for n in (pipeline.SPAN_CKPT, pipeline.CONCEPT_CKPT, pipeline.GENERATOR_CKPT)]
    write_manifest("generate", config, inputs, [out_path], Path(config.output_dir))
    return EXIT_OK


def _load_hyp_file(path: Path) -> list[tuple[str, list[str]]]:
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append((obj["id"], obj["response"].split()))
    return out


def cmd_eval(args) -> int:
    if args.variants:
        config = _config_from_args(args)
        ws = pipeline.load_workspace(config)
        models = pipeline.load_models(ws)
        reports, losses = pipeline.run_variants(ws, models, ws.dialogues)
        print(format_table(reports, losses))
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "variants.json"
        payload = {
            name: {"metrics": json.loads(reports[name].to_json()), **losses[name]} for name in reports
        }
        report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest("eval", config, [Path(config.corpus), Path(config.graph)], [report_path], out_dir)
        return EXIT_OK
    if not args.hyp or not args.ref:
        print("error: eval needs --hyp and --ref (or --variants with --config)", file=sys.stderr)
        return EXIT_DOMAIN
    hyp_path, ref_path = Path(args.hyp), Path(args.ref)
    for p in (hyp_path, ref_path):
        if not p.exists():
            print(f"error: file not found: {p}", file=sys.stderr)
            return EXIT_MISSING
    hyps = _load_hyp_file(hyp_path)
    refs = load_corpus(ref_path)
    if len(hyps) != len(refs):
        print(f"error: {len(hyps)} hypotheses vs {len(refs)} references", file=sys.stderr)
        return EXIT_DOMAIN
    for (hid, _), ref in zip(hyps, refs):
        if hid != ref.id:
            print(f"error: id mismatch: hypothesis {hid!r} vs reference {ref.id!r}", file=sys.stderr)
            return EXIT_DOMAIN
    report = evaluate_corpus([h for _, h in hyps], [list(r.response.tokens) for r in refs])
    print(format_table({"eval": report}))
    print(report.to_json())
    return EXIT_OK


def cmd_inspect(args) -> int:
    graph_path = Path(args.graph)
    if not graph_path.exists():
        print(f"error: graph file not found: {graph_path}", file=sys.stderr)
        return EXIT_MISSING
    graph = load_graph(graph_path.read_bytes())
    concept = args.concept
    if concept not in graph:
        print(f"{concept!r} is not a vertex", file=sys.stderr)
        return EXIT_DOMAIN
    neighbors = sorted(graph.neighbors(concept), key=lambda n: (-n[1], n[0]))
    for tail, pmi_value, count in neighbors:
        print(f"{concept} -> {tail}  pmi={pmi_value:.4f}  count={count}")
    if not neighbors:
        print(f"{concept} has no outgoing transitions")
    return EXIT_OK


def cmd_chat(args) -> int:
    config = _config_from_args(args)
    ws = pipeline.load_workspace(config)
    models = pipeline.load_models(ws)
    emotion = args.emotion
    history: list = []
    force_copy = 0.0 if config.no_copy else None
    source = pipeline.span_source_for(config, models.span)
    print("ectg chat: /reset clears context, /quit exits")
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        if text == "/quit":
            break
        if text == "/reset":
            history = []
            print("(context cleared)")
            continue
        try:
            history.append(make_utterance(SPEAKER, text))
            placeholder = make_utterance(LISTENER, "...")
            dialogue = Dialogue(id=f"chat-{len(history)}", emotion=emotion, utterances=tuple(history) + (placeholder,))
            concepts = []
            if models.concept is not None and models.graph is not None and not config.no_graph:
                concepts = pipeline.predict_concepts(models.concept, models.graph, dialogue, source)
            gin = build_input(ws.vocab, [list(u.tokens) for u in history], concepts, config.max_src_len)
            tokens, _ = generate_with_trace(models.generator, gin, max_len=config.max_gen_len, force_copy=force_copy)
            reply = " ".join(tokens)
            print(f"concepts: {concepts}")
            print(f"> {reply}")
            history.append(make_utterance(LISTENER, reply if reply else "..."))
        except Exception as exc:  # keep the loop alive on generation errors
            print(f"(generation failed: {exc})", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ectg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_ablations: bool = True):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--corpus", default=None)
        p.add_argument("--graph", default=None)
        p.add_argument("--checkpoint-dir", dest="checkpoint_dir", default=None)
        p.add_argument("--output-dir", dest="output_dir", default=None)
        p.add_argument("--seed", type=int, default=None)
        if with_ablations:
            p.add_argument("--no-copy", dest="no_copy", action="store_true")
            p.add_argument("--no-seca", dest="no_seca", action="store_true")
            p.add_argument("--no-graph", dest="no_graph", action="store_true")

    p = sub.add_parser("build-graph", help="build and save the transition graph")
    add_common(p)
    p.add_argument("--pmi-threshold", dest="pmi_threshold", type=float, default=None)
    p.add_argument("--min-count", dest="min_count", type=int, default=None)
    p.add_argument("--span-source", dest="span_source", default=None)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train one stage or all of them")
    add_common(p)
    p.add_argument("--stage", choices=("spans", "concepts", "generator", "all"), default="all")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--span-source", dest="span_source", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate responses for a corpus")
    add_common(p)
    p.add_argument("--input", default=None, help="corpus to respond to (defaults to the training corpus)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score hypotheses against references")
    add_common(p)
    p.add_argument("--hyp", default=None)
    p.add_argument("--ref", default=None)
    p.add_argument("--variants", action="store_true", help="run the ablation comparison table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="list a vertex's outgoing transitions")
    p.add_argument("--graph", required=True)
    p.add_argument("concept")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("chat", help="interactive debugging REPL")
    add_common(p)
    p.add_argument("--emotion", default="neutral")
    p.set_defaults(func=cmd_chat)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, CorpusError, EctGraphFormatError, CheckpointError, TrainingAborted, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
