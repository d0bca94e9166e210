"""Command-line entry point.

Structured JSONL events go to stdout; human-readable summaries go to stderr.
Every mutating subcommand writes a run manifest. Exit code 0 on success,
nonzero with a single machine-parseable error event otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import corpus as corpus_mod
from . import evaluation, neighbors, pipeline, terms
from .config import load_config
from .errors import ConfigError, XrecapError
from .manifest import RunManifest
from .recaption import RewriteStrategy
from .training import config_hash


def emit(event: dict) -> None:
    sys.stdout.write(json.dumps(event, ensure_ascii=False, sort_keys=True) + "\n")


def say(message: str) -> None:
    print(message, file=sys.stderr)


def _new_manifest(command: str, cfg=None) -> RunManifest:
    manifest = RunManifest(command=command, tool_version=__version__)
    if cfg is not None:
        manifest.config_hash = config_hash(
            {k: v for k, v in cfg.raw.items()} | {"out_dir": str(cfg.out_dir)}
        )
    return manifest


def _finish(manifest: RunManifest, cfg) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifests_dir = cfg.out_path("manifests")
    manifests_dir.mkdir(parents=True, exist_ok=True)
    name = manifest.command.replace(" ", "-").replace(":", "-")
    manifest.save(manifests_dir / f"{name}.json")


def _load(args) -> object:
    return load_config(args.config, out_dir=args.out_dir)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_corpus_ingest(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("corpus ingest", cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = pipeline.stage_ingest(cfg, manifest, expected_lang=args.expected_lang)
    _finish(manifest, cfg)
    emit({"event": "done", "command": "corpus ingest", "outputs": [str(p) for p in outputs]})
    say(f"ingested corpus into {cfg.out_dir}")
    return 0


def cmd_corpus_synth(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("corpus synth", cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = pipeline.stage_synth(cfg, manifest)
    _finish(manifest, cfg)
    emit({"event": "done", "command": "corpus synth", "outputs": [str(p) for p in outputs]})
    say(f"synthetic corpus written under {cfg.out_dir}")
    return 0


def cmd_split_make(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("split make", cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    target = pipeline.stage_split(cfg, manifest)
    _finish(manifest, cfg)
    split = corpus_mod.CorpusSplit.load(target)
    emit(
        {
            "event": "done",
            "command": "split make",
            "sizes": {
                "reference": len(split.reference_ids),
                "train": len(split.train_ids),
                "eval": len(split.eval_ids),
            },
        }
    )
    say(
        f"split sizes ref/train/eval: {len(split.reference_ids)}/"
        f"{len(split.train_ids)}/{len(split.eval_ids)}"
    )
    return 0


def cmd_refsel_assign(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("refsel assign", cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    target = pipeline.stage_refsel(cfg, manifest)
    _finish(manifest, cfg)
    emit({"event": "done", "command": "refsel assign", "output": str(target)})
    say(f"guidance assignments written to {target}")
    return 0


def cmd_refsel_query(args) -> int:
    store = corpus_mod.ingest_embeddings(args.index)
    split = corpus_mod.CorpusSplit.load(args.ids)
    ids = getattr(split, args.ids_field)
    index = neighbors.build_index(store, ids)
    results = index.query(store.vector(args.query_id), args.k)
    emit(
        {
            "event": "refsel_query",
            "query_id": args.query_id,
            "results": [{"image_id": i, "similarity": s} for i, s in results],
        }
    )
    return 0


def cmd_recap_run(args) -> int:
    cfg = _load(args)
    strategies = (
        tuple(RewriteStrategy(s) for s in args.strategy) if args.strategy else cfg.recaption.strategies
    )
    if not strategies:
        raise ConfigError(["recap run: strategy list must be non-empty"])
    if RewriteStrategy.TARGETED_RECAPTION in strategies:
        guidance_path = cfg.out_path(pipeline.GUIDANCE_JSONL)
        if not guidance_path.exists():
            raise ConfigError(
                [f"recap run --strategy targeted_recaption: guidance assignments missing: {guidance_path}"]
            )
    manifest = _new_manifest("recap run", cfg)
    outputs = []
    for strategy in strategies:
        outputs.append(pipeline.stage_recap(cfg, manifest, strategy))
        if args.audit_sample_out:
            rows = [json.loads(line) for line in Path(outputs[-1]).read_text(encoding="utf-8").splitlines()]
            results = rows if len(rows) <= args.audit_sample_size else None
            if results is None:
                import numpy as np

                rng = np.random.default_rng(cfg.generation.seed)
                chosen = sorted(rng.choice(len(rows), size=args.audit_sample_size, replace=False).tolist())
                results = [rows[i] for i in chosen]
            sample_path = Path(args.audit_sample_out)
            with sample_path.open("w", encoding="utf-8", newline="\n") as fh:
                for row in results:
                    fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")
            manifest.record_output(sample_path)
    _finish(manifest, cfg)
    emit({"event": "done", "command": "recap run", "outputs": [str(p) for p in outputs]})
    say(f"rewrites written for strategies: {', '.join(s.value for s in strategies)}")
    return 0


def cmd_translate_run(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("translate run", cfg)
    outputs = []
    if args.infile:
        out = args.outfile or str(Path(args.infile).with_suffix(".translated.jsonl"))
        outputs.append(pipeline.translate_captions_file(cfg, manifest, args.infile, out))
    else:
        for strategy in cfg.recaption.strategies:
            outputs.append(pipeline.stage_translate(cfg, manifest, strategy))
    _finish(manifest, cfg)
    emit({"event": "done", "command": "translate run", "outputs": [str(p) for p in outputs]})
    say("translation complete")
    return 0


def cmd_train_run(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("train run", cfg)
    checkpoint = pipeline.stage_train(cfg, manifest)
    _finish(manifest, cfg)
    emit({"event": "done", "command": "train run", "checkpoint": str(checkpoint)})
    say(f"checkpoint written to {checkpoint}")
    return 0


def cmd_eval_retrieve(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("eval retrieve", cfg)
    report_path = pipeline.stage_eval(cfg, manifest)
    if args.restrict:
        restricted_path = pipeline.restricted_reports(
            cfg, manifest, cfg.out_path(pipeline.RANKINGS_JSON), Path(args.restrict)
        )
        say(f"restricted report: {restricted_path}")
    _finish(manifest, cfg)
    summary = json.loads(report_path.read_text(encoding="utf-8"))
    emit({"event": "done", "command": "eval retrieve", "report": summary["mean"]})
    say(f"mean recall: {summary['mean']['mean_recall']:.1f} (report: {report_path})")
    return 0


def cmd_eval_errorset(args) -> int:
    native = json.loads(Path(args.native).read_text(encoding="utf-8"))
    mt = json.loads(Path(args.mt).read_text(encoding="utf-8"))
    set_name = args.set_name
    if set_name is None:
        names = sorted(native)
        if len(names) != 1:
            raise XrecapError(f"--set-name required; dump contains sets {names}")
        set_name = names[0]
    payload = {"counts": {}, "members": {}}
    for direction in ("i2t", "t2i"):
        native_rankings = pipeline.rankings_from_json(native[set_name][direction])
        mt_rankings = pipeline.rankings_from_json(mt[set_name][direction])
        error_set = evaluation.build_error_set(native_rankings, mt_rankings, direction)
        payload["members"][direction] = sorted(error_set.member_ids)
        payload["counts"][direction] = len(error_set.member_ids)
    Path(args.out).write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
        newline="\n",
    )
    emit({"event": "done", "command": "eval errorset", "counts": payload["counts"]})
    say(f"error-set sizes i2t/t2i: {payload['counts']['i2t']}/{payload['counts']['t2i']}")
    return 0


def cmd_eval_rouge(args) -> int:
    candidates = Path(args.candidates).read_text(encoding="utf-8").splitlines()
    references = Path(args.references).read_text(encoding="utf-8").splitlines()
    if len(candidates) != len(references):
        raise XrecapError(
            f"candidate/reference line counts differ: {len(candidates)} vs {len(references)}"
        )
    means = evaluation.mean_rouge(zip(candidates, references))
    if args.out:
        import csv as csv_mod

        with Path(args.out).open("w", encoding="utf-8", newline="") as fh:
            writer = csv_mod.writer(fh, lineterminator="\n")
            writer.writerow(list(evaluation.ROUGE_VARIANTS))
            writer.writerow([f"{means[v]:.6f}" for v in evaluation.ROUGE_VARIANTS])
    emit({"event": "done", "command": "eval rouge", "mean_f1": means})
    say("  ".join(f"{v}={means[v]:.3f}" for v in evaluation.ROUGE_VARIANTS))
    return 0


def _load_supercats(args) -> terms.SupercategorySet:
    return terms.SupercategorySet.load(args.supercats)


def cmd_terms_analyze(args) -> int:
    taxonomy = terms.load_taxonomy(args.edges, args.lemmas)
    supercats = _load_supercats(args)
    captions = corpus_mod.ingest_captions(args.captions)
    aliases = terms.load_aliases(args.aliases) if args.aliases else None
    tagged = terms.load_tagged(args.tagged) if args.tagged else None
    dist = terms.distribution(
        captions,
        taxonomy,
        supercats,
        min_count=args.min_count,
        mode=args.mode,
        tagged=tagged,
        aliases=aliases,
    )
    dist.save(args.out)
    emit(
        {
            "event": "done",
            "command": "terms analyze",
            "total_nouns": dist.total_nouns,
            "unmapped": dist.unmapped_count,
            "unmatched": dist.unmatched_count,
        }
    )
    say(f"distribution written to {args.out} ({dist.total_nouns} nouns)")
    return 0


def cmd_terms_compare(args) -> int:
    dist_a = terms.TermDistribution.load(args.a)
    dist_b = terms.TermDistribution.load(args.b)
    rows = terms.compare(dist_a, dist_b, union_threshold=args.threshold)
    terms.write_comparison_csv(rows, args.out)
    emit({"event": "done", "command": "terms compare", "rows": len(rows)})
    say(f"comparison written to {args.out} ({len(rows)} rows)")
    return 0


def cmd_pipeline_all(args) -> int:
    cfg = _load(args)
    manifest = _new_manifest("pipeline all", cfg)
    pipeline.pipeline_all(cfg, manifest, emit=emit)
    _finish(manifest, cfg)
    emit({"event": "done", "command": "pipeline all", "out_dir": str(cfg.out_dir)})
    say(f"pipeline complete; artifacts under {cfg.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_config_args(parser) -> None:
    parser.add_argument("--config", required=True, help="TOML pipeline config")
    parser.add_argument("--out-dir", default=None, help="override [paths].out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xrecap", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    groups = parser.add_subparsers(dest="group", required=True)

    corpus_group = groups.add_parser("corpus", help="corpus ingestion and synthesis")
    corpus_sub = corpus_group.add_subparsers(dest="command", required=True)
    p = corpus_sub.add_parser("ingest", help="validate and canonicalize corpus files")
    _add_config_args(p)
    p.add_argument("--expected-lang", default=None)
    p.set_defaults(handler=cmd_corpus_ingest)
    p = corpus_sub.add_parser("synth", help="generate the synthetic corpus")
    _add_config_args(p)
    p.set_defaults(handler=cmd_corpus_synth)

    split_group = groups.add_parser("split", help="corpus splits")
    split_sub = split_group.add_subparsers(dest="command", required=True)
    p = split_sub.add_parser("make", help="make a reference/train/eval split")
    _add_config_args(p)
    p.set_defaults(handler=cmd_split_make)

    refsel_group = groups.add_parser("refsel", help="nearest-neighbor guidance selection")
    refsel_sub = refsel_group.add_subparsers(dest="command", required=True)
    p = refsel_sub.add_parser("assign", help="assign guidance examples to train images")
    _add_config_args(p)
    p.set_defaults(handler=cmd_refsel_assign)
    p = refsel_sub.add_parser("query", help="query the reference index")
    p.add_argument("--index", required=True, help="embedding store file")
    p.add_argument("--ids", required=True, help="split manifest JSON")
    p.add_argument("--ids-field", default="reference_ids", choices=["reference_ids", "train_ids", "eval_ids"])
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(handler=cmd_refsel_query)

    recap_group = groups.add_parser("recap", help="rewrite generation")
    recap_sub = recap_group.add_subparsers(dest="command", required=True)
    p = recap_sub.add_parser("run", help="generate rewrites for configured strategies")
    _add_config_args(p)
    p.add_argument("--strategy", action="append", default=None, choices=[s.value for s in RewriteStrategy])
    p.add_argument("--audit-sample-out", default=None, help="export a seeded random sample for human review")
    p.add_argument("--audit-sample-size", type=int, default=200)
    p.set_defaults(handler=cmd_recap_run)

    translate_group = groups.add_parser("translate", help="machine translation")
    translate_sub = translate_group.add_subparsers(dest="command", required=True)
    p = translate_sub.add_parser("run", help="translate rewrites (or a captions file with --in)")
    _add_config_args(p)
    p.add_argument("--in", dest="infile", default=None)
    p.add_argument("--out", dest="outfile", default=None)
    p.set_defaults(handler=cmd_translate_run)

    train_group = groups.add_parser("train", help="projection-head training")
    train_sub = train_group.add_subparsers(dest="command", required=True)
    p = train_sub.add_parser("run", help="train the projection head")
    _add_config_args(p)
    p.set_defaults(handler=cmd_train_run)

    eval_group = groups.add_parser("eval", help="retrieval and caption evaluation")
    eval_sub = eval_group.add_subparsers(dest="command", required=True)
    p = eval_sub.add_parser("retrieve", help="bidirectional retrieval report")
    _add_config_args(p)
    p.add_argument("--restrict", default=None, help="error-set JSON; also emit a restricted report")
    p.set_defaults(handler=cmd_eval_retrieve)
    p = eval_sub.add_parser("errorset", help="native-vs-translation error sets")
    p.add_argument("--native", required=True, help="rankings dump of the native-trained model")
    p.add_argument("--mt", required=True, help="rankings dump of the MT-trained model")
    p.add_argument("--set-name", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval_errorset)
    p = eval_sub.add_parser("rouge", help="ROUGE-1/2/3/4/L mean F1")
    p.add_argument("--candidates", required=True, help="text file, one candidate per line")
    p.add_argument("--references", required=True, help="text file, one reference per line")
    p.add_argument("--out", default=None, help="CSV output")
    p.set_defaults(handler=cmd_eval_rouge)

    terms_group = groups.add_parser("terms", help="object-term distribution analysis")
    terms_sub = terms_group.add_subparsers(dest="command", required=True)
    p = terms_sub.add_parser("analyze", help="count supercategory terms in a corpus")
    p.add_argument("--captions", required=True)
    p.add_argument("--edges", required=True, help="taxonomy edge list")
    p.add_argument("--lemmas", required=True, help="taxonomy lemma index")
    p.add_argument("--supercats", required=True, help="JSON list of [name, anchor] pairs")
    p.add_argument("--mode", default="lexicon", choices=list(terms.EXTRACT_MODES))
    p.add_argument("--tagged", default=None, help="pretagged tokens JSONL (pretagged mode)")
    p.add_argument("--aliases", default=None, help="lemma alias TSV")
    p.add_argument("--min-count", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_terms_analyze)
    p = terms_sub.add_parser("compare", help="compare two saved distributions")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--threshold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_terms_compare)

    pipeline_group = groups.add_parser("pipeline", help="end-to-end orchestration")
    pipeline_sub = pipeline_group.add_subparsers(dest="command", required=True)
    p = pipeline_sub.add_parser("all", help="run every configured stage in order")
    _add_config_args(p)
    p.set_defaults(handler=cmd_pipeline_all)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except XrecapError as exc:
        emit({"event": "error", "error_class": type(exc).__name__, "message": str(exc)})
        say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
