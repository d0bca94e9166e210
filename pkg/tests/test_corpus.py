"""Corpus data model, file formats, splits, and the synthetic generator."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from xrecap.corpus import (
    CaptionRecord,
    CaptionSource,
    CorpusSplit,
    EmbeddingStore,
    SyntheticSpec,
    generate_synthetic,
    ingest_captions,
    ingest_embeddings,
    make_split,
    write_captions,
    write_embeddings,
    write_embeddings_json,
)
from xrecap.errors import CorpusFormatError


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


class TestIngestCaptions:
    def test_single_line_field_mapping(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        write_lines(
            path,
            ['{"caption_id":"c1","image_id":"i1","lang":"ja","source":"native","text":"弁当"}'],
        )
        records = ingest_captions(path)
        assert records == [
            CaptionRecord("c1", "i1", "ja", CaptionSource.NATIVE, "弁当")
        ]
        assert records[0].source is CaptionSource.NATIVE

    def test_duplicate_caption_id_names_both_lines(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        lines = []
        for i in range(1, 11):
            cid = "c1" if i in (3, 9) else f"c{i + 100}"
            lines.append(
                json.dumps(
                    {"caption_id": cid, "image_id": "i1", "lang": "en", "source": "native", "text": "x"}
                )
            )
        write_lines(path, lines)
        with pytest.raises(CorpusFormatError, match=r"'c1' on lines 3 and 9"):
            ingest_captions(path)

    def test_five_line_fixture_matches_hand_parse(self, tmp_path):
        # Hand-built rows; the oracle is the literal list below.
        rows = [
            ("c1", "i1", "en", "native", "a dog"),
            ("c2", "i1", "ja", "native", "犬が走る"),
            ("c3", "i2", "en", "machine_translated", "a red car"),
            ("c4", "i2", "de", "rewrite_targeted", "ein rotes Auto"),
            ("c5", "i3", "en", "rewrite_paraphrase", "an automobile"),
        ]
        path = tmp_path / "caps.jsonl"
        write_lines(
            path,
            [
                json.dumps(
                    {"caption_id": c, "image_id": i, "lang": g, "source": s, "text": t},
                    ensure_ascii=False,
                )
                for c, i, g, s, t in rows
            ],
        )
        records = ingest_captions(path)
        assert [(r.caption_id, r.image_id, r.lang, r.source.value, r.text) for r in records] == rows

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        write_lines(
            path,
            [
                '{"caption_id":"c1","image_id":"i1","lang":"en","source":"native","text":"x"}',
                "{not json",
            ],
        )
        with pytest.raises(CorpusFormatError, match=r":2: malformed JSON"):
            ingest_captions(path)

    def test_language_mismatch(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        write_lines(
            path,
            ['{"caption_id":"c1","image_id":"i1","lang":"de","source":"native","text":"x"}'],
        )
        with pytest.raises(CorpusFormatError, match="does not match expected 'ja'"):
            ingest_captions(path, expected_lang="ja")

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        write_lines(
            path,
            ['{"caption_id":"c1","image_id":"i1","lang":"en","source":"native","text":"x","extra":1}'],
        )
        with pytest.raises(CorpusFormatError, match="unknown"):
            ingest_captions(path)

    def test_empty_text_rejected(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        write_lines(
            path,
            ['{"caption_id":"c1","image_id":"i1","lang":"en","source":"native","text":"  "}'],
        )
        with pytest.raises(CorpusFormatError, match="empty text"):
            ingest_captions(path)

    def test_roundtrip_byte_identical(self, tmp_path):
        records = [
            CaptionRecord("c1", "i1", "ja", CaptionSource.NATIVE, "弁当とご飯"),
            CaptionRecord("c2", "i2", "en", CaptionSource.REWRITE_DIVERSE, 'quotes " and \\ slash'),
        ]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_captions(records, p1)
        write_captions(ingest_captions(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestEmbeddingStore:
    def test_normalization(self):
        store = EmbeddingStore(2, {"a": [3.0, 4.0]})
        np.testing.assert_allclose(store.vector("a"), [0.6, 0.8], atol=1e-15)

    def test_zero_vector_rejected(self):
        with pytest.raises(CorpusFormatError, match="zero vector"):
            EmbeddingStore(2, {"a": [0.0, 0.0]})

    def test_nonfinite_rejected(self):
        with pytest.raises(CorpusFormatError, match="non-finite"):
            EmbeddingStore(2, {"a": [1.0, float("nan")]})

    def test_dim_mismatch_rejected(self):
        with pytest.raises(CorpusFormatError, match="dim"):
            EmbeddingStore(3, {"a": [1.0, 0.0]})

    def test_all_norms_unit_from_random_fixture(self, tmp_path):
        rng = np.random.default_rng(3)
        store = EmbeddingStore(8, {f"v{i}": rng.standard_normal(8) for i in range(10)})
        path = tmp_path / "x.emb"
        write_embeddings(store, path)
        reread = ingest_embeddings(path)
        for key, vec in reread.items():
            # Independent norm recomputation, plain Python.
            norm = math.sqrt(sum(float(x) * float(x) for x in vec))
            assert abs(norm - 1.0) <= 1e-6, key

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(0)
        store = EmbeddingStore(4, {"a": rng.standard_normal(4), "b": rng.standard_normal(4)})
        path = tmp_path / "x.emb"
        write_embeddings(store, path)
        data = path.read_bytes()
        # Keep the count=2 header but drop the second row.
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(CorpusFormatError, match="truncated"):
            ingest_embeddings(path)

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "x.emb"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CorpusFormatError, match="magic mismatch"):
            ingest_embeddings(path)

    def test_emb1_roundtrip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        store = EmbeddingStore(5, {f"id-{i}": rng.standard_normal(5) for i in range(7)})
        p1, p2 = tmp_path / "a.emb", tmp_path / "b.emb"
        write_embeddings(store, p1)
        write_embeddings(ingest_embeddings(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_json_roundtrip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(12)
        store = EmbeddingStore(4, {f"id-{i}": rng.standard_normal(4) for i in range(3)})
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        write_embeddings_json(store, p1)
        write_embeddings_json(ingest_embeddings(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_json_fallback_reads_fixture(self, tmp_path):
        path = tmp_path / "f.json"
        path.write_text(json.dumps({"dim": 2, "entries": {"a": [3, 4]}}), encoding="utf-8")
        store = ingest_embeddings(path)
        np.testing.assert_allclose(store.vector("a"), [0.6, 0.8])


class TestMakeSplit:
    def test_floor_arithmetic(self):
        split = make_split([f"i{k}" for k in range(10)], 0.3, 0.5, seed=7)
        assert (len(split.reference_ids), len(split.train_ids), len(split.eval_ids)) == (3, 5, 2)

    def test_determinism(self):
        ids = [f"i{k}" for k in range(10)]
        assert make_split(ids, 0.3, 0.5, seed=7) == make_split(ids, 0.3, 0.5, seed=7)

    def test_order_insensitive(self):
        ids = [f"i{k}" for k in range(10)]
        assert make_split(ids, 0.3, 0.5, seed=7) == make_split(list(reversed(ids)), 0.3, 0.5, seed=7)

    def test_scaled_ratios(self):
        # floor(29 * 0.103) = 2, floor(29 * 0.782) = 22, remainder 5.
        split = make_split([f"i{k}" for k in range(29)], 0.103, 0.782, seed=0)
        assert (len(split.reference_ids), len(split.train_ids), len(split.eval_ids)) == (2, 22, 5)

    def test_disjoint(self):
        split = make_split([f"i{k}" for k in range(17)], 0.4, 0.4, seed=3)
        ref, train, ev = set(split.reference_ids), set(split.train_ids), set(split.eval_ids)
        assert not (ref & train or ref & ev or train & ev)
        assert ref | train | ev == {f"i{k}" for k in range(17)}

    def test_too_few_images(self):
        with pytest.raises(ValueError, match="at least 3"):
            make_split(["a", "b"], 0.3, 0.3, seed=0)

    def test_bad_fractions(self):
        ids = ["a", "b", "c", "d"]
        with pytest.raises(ValueError):
            make_split(ids, 0.0, 0.5, seed=0)
        with pytest.raises(ValueError):
            make_split(ids, 0.6, 0.5, seed=0)

    def test_manifest_roundtrip(self, tmp_path):
        split = make_split([f"i{k}" for k in range(10)], 0.3, 0.5, seed=7)
        path = tmp_path / "split.json"
        split.save(path)
        assert CorpusSplit.load(path) == split


class TestSyntheticGenerator:
    def test_determinism_byte_identical(self, tmp_path):
        spec = SyntheticSpec(2, 8, 8, 0.5, 0.1, seed=5)
        p1, p2 = tmp_path / "a.emb", tmp_path / "b.emb"
        write_embeddings(generate_synthetic(spec).text_native, p1)
        write_embeddings(generate_synthetic(spec).text_native, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rewrites_track_native_distribution(self):
        spec = SyntheticSpec(4, 32, 16, 0.8, 0.1, seed=7)
        syn = generate_synthetic(spec)
        # Independent mean-cosine computation with plain loops.
        cos_nat_rw, cos_nat_mt = [], []
        for image in syn.images:
            nat = syn.text_native.vector(image.image_id)
            rw = syn.text_rewrite.vector(image.image_id)
            mt = syn.text_en.vector(image.image_id)
            cos_nat_rw.append(sum(a * b for a, b in zip(nat, rw)))
            cos_nat_mt.append(sum(a * b for a, b in zip(nat, mt)))
        assert np.mean(cos_nat_rw) > np.mean(cos_nat_mt)

    def test_zero_shift_same_distribution(self):
        # >= 1000 pairs; means must agree within 3 standard errors.
        spec = SyntheticSpec(16, 64, 8, 0.0, 0.1, seed=9)
        syn = generate_synthetic(spec)
        nat_mt, nat_rw = [], []
        for image in syn.images:
            nat = syn.text_native.vector(image.image_id)
            nat_mt.append(float(nat @ syn.text_en.vector(image.image_id)))
            nat_rw.append(float(nat @ syn.text_rewrite.vector(image.image_id)))
        n = len(nat_mt)
        assert n >= 1000
        diff = np.mean(nat_mt) - np.mean(nat_rw)
        se = math.sqrt(np.var(nat_mt) / n + np.var(nat_rw) / n)
        assert abs(diff) < 3 * se

    def test_unit_norms_everywhere(self, synthetic_corpus):
        for store in (
            synthetic_corpus.image_store,
            synthetic_corpus.text_en,
            synthetic_corpus.text_native,
            synthetic_corpus.text_rewrite,
        ):
            norms = np.linalg.norm(store.matrix(), axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_captions_reference_images(self, synthetic_corpus):
        image_ids = {im.image_id for im in synthetic_corpus.images}
        langs = {c.lang for c in synthetic_corpus.captions}
        assert langs == {"en", "xx"}
        assert all(c.image_id in image_ids for c in synthetic_corpus.captions)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="dim"):
            SyntheticSpec(2, 4, 3, 0.1, 0.1, seed=0)
        with pytest.raises(ValueError):
            SyntheticSpec(0, 4, 8, 0.1, 0.1, seed=0)


class TestLanguageTags:
    @pytest.mark.parametrize("tag", ["en", "ja", "de", "pt-br", "zh-hant"])
    def test_valid_tags(self, tag):
        CaptionRecord("c1", "i1", tag, CaptionSource.NATIVE, "x")

    @pytest.mark.parametrize("tag", ["", "EN", "en_US", "ja1", "-en", "en-", "e n"])
    def test_invalid_tags(self, tag):
        with pytest.raises(ValueError, match="language tag"):
            CaptionRecord("c1", "i1", tag, CaptionSource.NATIVE, "x")
