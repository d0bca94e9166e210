"""Pipeline stages shared by the CLI subcommands and ``pipeline all``.

Stage order: build/ingest corpus, split, select guidance, recaption,
translate, train, evaluate. Every stage reads and writes files under the
configured output directory using fixed names, so running ``pipeline all``
and running the subcommands one at a time produce identical artifacts.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation, neighbors, recaption
from .config import PipelineConfig, build_llm_endpoint, build_mt_endpoint
from .errors import ConfigError, XrecapError
from .manifest import RunManifest, StageTimer
from .recaption import RewriteStrategy
from .training import ContrastiveProjection, load_checkpoint, save_checkpoint

STRATEGY_TO_SOURCE = {
    RewriteStrategy.PARAPHRASE: corpus_mod.CaptionSource.REWRITE_PARAPHRASE,
    RewriteStrategy.DIVERSE_RECAPTION: corpus_mod.CaptionSource.REWRITE_DIVERSE,
    RewriteStrategy.TARGETED_RECAPTION: corpus_mod.CaptionSource.REWRITE_TARGETED,
}

# Fixed artifact names under the output directory.
CORPUS_DIR = "corpus"
IMAGES_EMB = "corpus/images.emb"
TEXT_EN_EMB = "corpus/text_en.emb"
TEXT_NATIVE_EMB = "corpus/text_native.emb"
TEXT_REWRITE_EMB = "corpus/text_rewrite.emb"
CAPTIONS_JSONL = "corpus/captions.jsonl"
SPLIT_JSON = "split.json"
GUIDANCE_JSONL = "guidance.jsonl"
REWRITES_DIR = "rewrites"
CHECKPOINT = "checkpoint.xrc"
TRAIN_LOG = "train_log.csv"
RANKINGS_JSON = "rankings.json"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError([f"{what} not found: {path} (run the producing stage first?)"])
    return path


def stage_synth(cfg: PipelineConfig, manifest: RunManifest) -> list[Path]:
    """Generate the synthetic corpus and write its stores and captions."""
    if cfg.synthetic is None:
        raise ConfigError(["corpus.synthetic is not configured"])
    with StageTimer(manifest, "synth"):
        syn = corpus_mod.generate_synthetic(cfg.synthetic)
        out = cfg.out_path(CORPUS_DIR)
        out.mkdir(parents=True, exist_ok=True)
        outputs = []
        for name, store in (
            (IMAGES_EMB, syn.image_store),
            (TEXT_EN_EMB, syn.text_en),
            (TEXT_NATIVE_EMB, syn.text_native),
            (TEXT_REWRITE_EMB, syn.text_rewrite),
        ):
            target = cfg.out_path(name)
            corpus_mod.write_embeddings(store, target)
            outputs.append(target)
        captions_path = cfg.out_path(CAPTIONS_JSONL)
        corpus_mod.write_captions(syn.captions, captions_path)
        outputs.append(captions_path)
    for path in outputs:
        manifest.record_output(path)
    manifest.seeds["synthetic"] = cfg.synthetic.seed
    return outputs


def stage_ingest(
    cfg: PipelineConfig, manifest: RunManifest, expected_lang: str | None = None
) -> list[Path]:
    """Validate external corpus files and re-serialize them canonically."""
    outputs = []
    with StageTimer(manifest, "ingest"):
        out = cfg.out_path(CORPUS_DIR)
        out.mkdir(parents=True, exist_ok=True)
        store = None
        if cfg.image_store is not None:
            src = _require(cfg.resolve(cfg.image_store), "corpus.image_store")
            manifest.record_input(src)
            store = corpus_mod.ingest_embeddings(src)
        merged: list[corpus_mod.CaptionRecord] = []
        for cpath in cfg.captions:
            src = _require(cfg.resolve(cpath), "corpus.captions entry")
            manifest.record_input(src)
            merged.extend(corpus_mod.ingest_captions(src, expected_lang=expected_lang))
        if store is not None and merged:
            corpus_mod.check_caption_images(merged, store.ids)
        if store is not None:
            target = cfg.out_path(IMAGES_EMB)
            corpus_mod.write_embeddings(store, target)
            outputs.append(target)
        if merged:
            target = cfg.out_path(CAPTIONS_JSONL)
            corpus_mod.write_captions(merged, target)
            outputs.append(target)
    for path in outputs:
        manifest.record_output(path)
    return outputs


def stage_split(cfg: PipelineConfig, manifest: RunManifest) -> Path:
    """Split image ids into reference/train/eval sets."""
    with StageTimer(manifest, "split"):
        images_path = _require(cfg.out_path(IMAGES_EMB), "image store")
        manifest.record_input(images_path)
        store = corpus_mod.ingest_embeddings(images_path)
        split = corpus_mod.make_split(
            store.ids, cfg.split.ref_fraction, cfg.split.train_fraction, cfg.split.seed
        )
        target = cfg.out_path(SPLIT_JSON)
        split.save(target)
    manifest.seeds["split"] = cfg.split.seed
    manifest.record_output(target)
    return target


def stage_refsel(cfg: PipelineConfig, manifest: RunManifest) -> Path:
    """Assign a guidance example to every train image."""
    with StageTimer(manifest, "refsel"):
        images_path = _require(cfg.out_path(IMAGES_EMB), "image store")
        split_path = _require(cfg.out_path(SPLIT_JSON), "split manifest")
        captions_path = _require(cfg.out_path(CAPTIONS_JSONL), "captions file")
        for p in (images_path, split_path, captions_path):
            manifest.record_input(p)
        store = corpus_mod.ingest_embeddings(images_path)
        split = corpus_mod.CorpusSplit.load(split_path)
        captions = corpus_mod.ingest_captions(captions_path)
        by_image_src = corpus_mod.captions_by_image(captions, cfg.source_lang)
        by_image_tgt = corpus_mod.captions_by_image(captions, cfg.target_lang)
        index = neighbors.build_index(store, split.reference_ids)
        assignments = neighbors.assign_guidance(
            split.train_ids, store, index, by_image_src, by_image_tgt, cfg.refsel
        )
        target = cfg.out_path(GUIDANCE_JSONL)
        neighbors.write_assignments(assignments, target)
    manifest.seeds["refsel"] = cfg.refsel.seed
    manifest.record_output(target)
    return target


def _load_caption_lookup(cfg: PipelineConfig) -> dict[str, corpus_mod.CaptionRecord]:
    captions_path = _require(cfg.out_path(CAPTIONS_JSONL), "captions file")
    return {c.caption_id: c for c in corpus_mod.ingest_captions(captions_path)}


def stage_recap(cfg: PipelineConfig, manifest: RunManifest, strategy: RewriteStrategy) -> Path:
    """Run one rewrite strategy over the train captions."""
    with StageTimer(manifest, f"recap:{strategy.value}"):
        split = corpus_mod.CorpusSplit.load(_require(cfg.out_path(SPLIT_JSON), "split manifest"))
        captions_by_id = _load_caption_lookup(cfg)
        train_ids = set(split.train_ids)
        train_captions = [
            c
            for c in captions_by_id.values()
            if c.image_id in train_ids and c.lang == cfg.recaption.prompt_lang
        ]
        train_captions.sort(key=lambda c: c.caption_id)
        llm = build_llm_endpoint(cfg.llm_cfg)
        guidance = None
        if strategy is RewriteStrategy.TARGETED_RECAPTION:
            guidance_path = _require(cfg.out_path(GUIDANCE_JSONL), "guidance assignments")
            manifest.record_input(guidance_path)
            rows = neighbors.read_assignments(guidance_path)
            translator = build_mt_endpoint(cfg.mt_cfg)
            guidance = recaption.prepare_guidance(
                rows,
                captions_by_id,
                translator=translator,
                translation_params=cfg.translation,
                prompt_lang=cfg.recaption.prompt_lang,
            )
        run = recaption.build_rewrite_set(
            train_captions,
            strategy,
            guidance,
            llm,
            cfg.generation,
            failure_threshold=cfg.recaption.failure_threshold,
            concurrency=cfg.recaption.concurrency,
            reprompt_on_parse_failure=cfg.recaption.reprompt_on_parse_failure,
        )
        rewrites_dir = cfg.out_path(REWRITES_DIR)
        rewrites_dir.mkdir(parents=True, exist_ok=True)
        target = rewrites_dir / f"{strategy.value}.jsonl"
        failures = rewrites_dir / f"{strategy.value}.failures.jsonl"
        recaption.write_rewrites(run, target, failures)
    manifest.seeds["generation"] = cfg.generation.seed
    manifest.record_output(target)
    manifest.record_output(failures)
    return target


def stage_translate(cfg: PipelineConfig, manifest: RunManifest, strategy: RewriteStrategy) -> Path:
    """Translate one strategy's rewrites into target-language caption records."""
    with StageTimer(manifest, f"translate:{strategy.value}"):
        rewrites_path = _require(
            cfg.out_path(REWRITES_DIR) / f"{strategy.value}.jsonl", "rewrites file"
        )
        manifest.record_input(rewrites_path)
        captions_by_id = _load_caption_lookup(cfg)
        translator = build_mt_endpoint(cfg.mt_cfg)
        records = []
        with rewrites_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                original = captions_by_id[row["train_caption_id"]]
                translated = recaption.translate(
                    translator,
                    row["extracted_text"],
                    cfg.source_lang,
                    cfg.target_lang,
                    cfg.translation,
                )
                records.append(
                    corpus_mod.CaptionRecord(
                        caption_id=f"{original.caption_id}-rw-{strategy.value}",
                        image_id=original.image_id,
                        lang=cfg.target_lang,
                        source=STRATEGY_TO_SOURCE[strategy],
                        text=translated,
                    )
                )
        target = cfg.out_path(REWRITES_DIR) / f"{strategy.value}.translated.jsonl"
        corpus_mod.write_captions(records, target)
    manifest.record_output(target)
    return target


def translate_captions_file(cfg: PipelineConfig, manifest: RunManifest, in_path, out_path) -> Path:
    """Translate an arbitrary captions JSONL into the target language."""
    in_path = _require(Path(in_path), "captions input")
    manifest.record_input(in_path)
    translator = build_mt_endpoint(cfg.mt_cfg)
    records = []
    for record in corpus_mod.ingest_captions(in_path):
        translated = recaption.translate(
            translator, record.text, record.lang, cfg.target_lang, cfg.translation
        )
        source = record.source
        if source is corpus_mod.CaptionSource.NATIVE:
            source = corpus_mod.CaptionSource.MACHINE_TRANSLATED
        records.append(
            corpus_mod.CaptionRecord(
                caption_id=f"{record.caption_id}-{cfg.target_lang}",
                image_id=record.image_id,
                lang=cfg.target_lang,
                source=source,
                text=translated,
            )
        )
    out_path = Path(out_path)
    corpus_mod.write_captions(records, out_path)
    manifest.record_output(out_path)
    return out_path


def _train_inputs(cfg: PipelineConfig):
    image_path = (
        cfg.resolve(cfg.train.image_store)
        if cfg.train.image_store
        else cfg.out_path(IMAGES_EMB)
    )
    text_path = (
        cfg.resolve(cfg.train.text_store) if cfg.train.text_store else cfg.out_path(TEXT_EN_EMB)
    )
    rewrite_paths = []
    if cfg.train.augment:
        for strategy in cfg.recaption.strategies:
            configured = cfg.train.rewrite_stores.get(strategy.value)
            if configured:
                rewrite_paths.append(cfg.resolve(configured))
            else:
                rewrite_paths.append(cfg.out_path(TEXT_REWRITE_EMB))
    return image_path, text_path, rewrite_paths


def stage_train(cfg: PipelineConfig, manifest: RunManifest) -> Path:
    """Train the projection head on train-split pairs with optional augmentation."""
    with StageTimer(manifest, "train"):
        image_path, text_path, rewrite_paths = _train_inputs(cfg)
        split = corpus_mod.CorpusSplit.load(_require(cfg.out_path(SPLIT_JSON), "split manifest"))
        for p in [image_path, text_path] + rewrite_paths:
            _require(p, "training store")
            manifest.record_input(p)
        images = corpus_mod.ingest_embeddings(image_path)
        texts = corpus_mod.ingest_embeddings(text_path)
        rewrite_stores = [corpus_mod.ingest_embeddings(p) for p in rewrite_paths]
        train_ids = [i for i in split.train_ids if i in texts]
        if len(train_ids) != len(split.train_ids):
            missing = sorted(set(split.train_ids) - set(train_ids))
            raise XrecapError(f"text store is missing train ids: {missing[:5]}")
        X = texts.matrix(train_ids)
        y = images.matrix(train_ids)
        rewrites = None
        if rewrite_stores:
            rewrites = [
                np.stack([store.vector(i) for store in rewrite_stores]) for i in train_ids
            ]
        est = ContrastiveProjection(
            batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate,
            epochs=cfg.train.epochs,
            temperature=cfg.train.temperature,
            optimizer=cfg.train.optimizer,
            seed=cfg.train.seed,
        )
        est.fit(X, y, rewrites=rewrites)
        checkpoint_path = cfg.out_path(CHECKPOINT)
        save_checkpoint(
            est.head_, checkpoint_path, seed=cfg.train.seed, cfg_hash=est.config_hash()
        )
        log_path = cfg.out_path(TRAIN_LOG)
        with log_path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "mean_loss", "wall_ms"])
            for epoch, (loss, wall) in enumerate(
                zip(est.epoch_losses_, est.epoch_wall_ms_), start=1
            ):
                writer.writerow([epoch, f"{loss:.12g}", f"{wall:.3f}"])
    manifest.seeds["train"] = cfg.train.seed
    manifest.record_output(checkpoint_path)
    # The training log carries wall-clock timings and is excluded from
    # reproducibility digests.
    return checkpoint_path


def _eval_inputs(cfg: PipelineConfig):
    image_path = (
        cfg.resolve(cfg.eval_opts.image_store)
        if cfg.eval_opts.image_store
        else cfg.out_path(IMAGES_EMB)
    )
    if cfg.eval_opts.text_stores:
        text_paths = [cfg.resolve(p) for p in cfg.eval_opts.text_stores]
    else:
        text_paths = [cfg.out_path(TEXT_NATIVE_EMB)]
    if cfg.eval_opts.checkpoint == "none":
        checkpoint_path = None
    elif cfg.eval_opts.checkpoint:
        checkpoint_path = cfg.resolve(cfg.eval_opts.checkpoint)
    else:
        checkpoint_path = cfg.out_path(CHECKPOINT)
    return image_path, text_paths, checkpoint_path


def evaluate_stores(
    images: corpus_mod.EmbeddingStore,
    texts: corpus_mod.EmbeddingStore,
    eval_ids,
    head=None,
    gold: dict | None = None,
):
    """Bidirectional rankings for one gold set, optionally through a projection head.

    ``gold`` maps text id -> image id; identity by shared ids when omitted.
    """
    eval_ids = list(eval_ids)
    text_ids = eval_ids if gold is None else sorted(gold)
    if gold is None:
        gold = {i: i for i in eval_ids}
    image_matrix = images.matrix(eval_ids)
    text_matrix = texts.matrix(text_ids)
    if head is not None:
        from .training import project

        text_matrix = project(head, text_matrix)
    inverse: dict[str, str] = {}
    for text_id in text_ids:
        image_id = gold[text_id]
        if image_id in inverse:
            raise XrecapError(
                f"gold map assigns two captions to image {image_id!r}; "
                "use one caption set per image per evaluation set"
            )
        inverse[image_id] = text_id
    missing = [i for i in eval_ids if i not in inverse]
    if missing:
        raise XrecapError(f"images without a gold caption: {missing[:5]}")
    i2t = evaluation.rank_all(
        eval_ids, image_matrix, text_ids, text_matrix, {i: inverse[i] for i in eval_ids}
    )
    t2i = evaluation.rank_all(text_ids, text_matrix, eval_ids, image_matrix, gold)
    return i2t, t2i


def _rankings_to_json(rankings) -> list[dict]:
    return [
        {
            "query_id": r.query_id,
            "rank_of_gold": r.rank_of_gold,
            "ranked_gallery_ids": list(r.ranked_gallery_ids),
        }
        for r in rankings
    ]


def rankings_from_json(rows) -> list[evaluation.RankingResult]:
    return [
        evaluation.RankingResult(
            query_id=row["query_id"],
            ranked_gallery_ids=tuple(row["ranked_gallery_ids"]),
            rank_of_gold=row["rank_of_gold"],
        )
        for row in rows
    ]


def write_report_csv(reports: dict, path) -> None:
    """One row per set plus the across-set mean; one-decimal rendering."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["set", "i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "mean_recall"])
        for name, report in reports.items():
            row = [name] + [f"{v:.1f}" for v in report["scores"]] + [f"{report['mean_recall']:.1f}"]
            writer.writerow(row)


def stage_eval(cfg: PipelineConfig, manifest: RunManifest) -> Path:
    """Evaluate the trained checkpoint on the eval split, per gold set and averaged."""
    with StageTimer(manifest, "eval"):
        image_path, text_paths, checkpoint_path = _eval_inputs(cfg)
        split = corpus_mod.CorpusSplit.load(_require(cfg.out_path(SPLIT_JSON), "split manifest"))
        _require(image_path, "eval image store")
        manifest.record_input(image_path)
        images = corpus_mod.ingest_embeddings(image_path)
        head = None
        if checkpoint_path is not None:
            _require(checkpoint_path, "checkpoint (set eval.checkpoint='none' for raw features)")
            head, _meta = load_checkpoint(checkpoint_path)
            manifest.record_input(checkpoint_path)
        gold = None
        if cfg.eval_opts.gold != "identity":
            gold_path = _require(cfg.resolve(cfg.eval_opts.gold), "gold map")
            manifest.record_input(gold_path)
            gold = json.loads(gold_path.read_text(encoding="utf-8"))
        per_set = {}
        rankings_dump = {}
        for text_path in text_paths:
            _require(text_path, "eval text store")
            manifest.record_input(text_path)
            texts = corpus_mod.ingest_embeddings(text_path)
            i2t, t2i = evaluate_stores(images, texts, split.eval_ids, head=head, gold=gold)
            report = evaluation.recall_report(i2t, t2i)
            name = text_path.stem
            per_set[name] = {"scores": list(report.scores), "mean_recall": report.mean_recall}
            rankings_dump[name] = {
                "i2t": _rankings_to_json(i2t),
                "t2i": _rankings_to_json(t2i),
            }
        mean_scores = [
            float(np.mean([entry["scores"][i] for entry in per_set.values()])) for i in range(6)
        ]
        summary = {
            "sets": per_set,
            "mean": {
                "scores": mean_scores,
                "mean_recall": float(np.mean([e["mean_recall"] for e in per_set.values()])),
            },
            "checkpoint": checkpoint_path.name if head is not None else None,
        }
        report_path = cfg.out_path(REPORT_JSON)
        report_path.write_text(
            json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
            newline="\n",
        )
        csv_path = cfg.out_path(REPORT_CSV)
        rows = dict(per_set)
        rows["mean"] = summary["mean"]
        write_report_csv(rows, csv_path)
        rankings_path = cfg.out_path(RANKINGS_JSON)
        rankings_path.write_text(
            json.dumps(rankings_dump, ensure_ascii=False, sort_keys=True) + "\n",
            encoding="utf-8",
            newline="\n",
        )
    for p in (report_path, csv_path, rankings_path):
        manifest.record_output(p)
    return report_path


def restricted_reports(cfg: PipelineConfig, manifest: RunManifest, rankings_path, errorset_path) -> Path:
    """Recall over error-set members only, per gold set; rankings stay full-gallery."""
    _require(rankings_path, "rankings dump")
    _require(errorset_path, "error-set file")
    manifest.record_input(errorset_path)
    dumps = json.loads(Path(rankings_path).read_text(encoding="utf-8"))
    members = json.loads(Path(errorset_path).read_text(encoding="utf-8"))["members"]
    i2t_set = evaluation.ErrorSet("i2t", frozenset(members["i2t"]))
    t2i_set = evaluation.ErrorSet("t2i", frozenset(members["t2i"]))
    out = {}
    for name, dump in dumps.items():
        rep = evaluation.restricted_report(
            rankings_from_json(dump["i2t"]),
            rankings_from_json(dump["t2i"]),
            i2t_set,
            t2i_set,
        )
        out[name] = {"scores": list(rep.scores), "mean_recall": rep.mean_recall}
    target = cfg.out_path("report_restricted.json")
    target.write_text(
        json.dumps(out, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
        newline="\n",
    )
    manifest.record_output(target)
    return target


def pipeline_all(cfg: PipelineConfig, manifest: RunManifest, emit=lambda event: None) -> None:
    """Run every configured stage in order."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    stages: list[tuple[str, object]] = []
    if cfg.synthetic is not None:
        stages.append(("corpus synth", lambda: stage_synth(cfg, manifest)))
    else:
        stages.append(("corpus ingest", lambda: stage_ingest(cfg, manifest)))
    stages.append(("split make", lambda: stage_split(cfg, manifest)))
    stages.append(("refsel assign", lambda: stage_refsel(cfg, manifest)))
    for strategy in cfg.recaption.strategies:
        stages.append(
            (f"recap run:{strategy.value}", lambda s=strategy: stage_recap(cfg, manifest, s))
        )
        stages.append(
            (f"translate run:{strategy.value}", lambda s=strategy: stage_translate(cfg, manifest, s))
        )
    stages.append(("train run", lambda: stage_train(cfg, manifest)))
    stages.append(("eval retrieve", lambda: stage_eval(cfg, manifest)))
    for name, fn in stages:
        emit({"event": "stage_start", "stage": name})
        started = time.perf_counter()
        fn()
        emit(
            {
                "event": "stage_end",
                "stage": name,
                "elapsed_ms": round((time.perf_counter() - started) * 1e3, 3),
            }
        )
