"""Prompt rendering, final-tag parsing, endpoint clients, and rewrite runs."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrecap.corpus import CaptionRecord, CaptionSource, make_split
from xrecap.errors import EndpointError, PromptParseError, RewriteRunAborted
from xrecap.neighbors import GuidanceExample, RefSelConfig, build_index, select_guidance
from xrecap.recaption import (
    EchoLlmEndpoint,
    GenerationParams,
    IdentityTranslatorEndpoint,
    RewriteStrategy,
    TranslationParams,
    TransportError,
    build_rewrite_set,
    complete,
    parse_final,
    prepare_guidance,
    render_prompt,
    sample_for_audit,
    translate,
    translate_batch,
)

GOLDEN_INPUT = "A plastic container with rice and vegetables on a table."


def make_guidance(
    in_text="A truck parked on the side of the road.",
    out_text="A car is stopped before the crossing.",
):
    return GuidanceExample(
        reference_image_id="ref-1",
        input_caption=CaptionRecord("c-in", "ref-1", "en", CaptionSource.NATIVE, in_text),
        output_caption=CaptionRecord("c-out", "ref-1", "xx", CaptionSource.NATIVE, out_text),
        similarity=0.9,
    )


def no_sleep(_):
    pass


class ScriptedLlm:
    """Test double returning a canned (status, payload) sequence."""

    model = "scripted"

    def __init__(self, responses):
        self.responses = list(responses)
        self.bodies = []

    def image_content(self, image_uri):
        return {"type": "image_url", "image_url": {"url": image_uri}}

    def send(self, body):
        self.bodies.append(body)
        item = self.responses.pop(0) if len(self.responses) > 1 else self.responses[0]
        if isinstance(item, Exception):
            raise item
        return item


def ok(content):
    return 200, {"choices": [{"message": {"content": content}}]}


class TestRenderPrompt:
    @pytest.mark.parametrize(
        "strategy, guidance",
        [
            (RewriteStrategy.PARAPHRASE, None),
            (RewriteStrategy.DIVERSE_RECAPTION, None),
            (RewriteStrategy.TARGETED_RECAPTION, make_guidance()),
        ],
    )
    def test_matches_golden_bytes(self, golden_dir, strategy, guidance):
        rendered = render_prompt(strategy, GOLDEN_INPUT, guidance)
        golden = (golden_dir / f"prompt_{strategy.value}.txt").read_bytes()
        assert rendered.encode("utf-8") == golden

    def test_paraphrase_contains_demo_line(self):
        rendered = render_prompt(RewriteStrategy.PARAPHRASE, "a dog")
        assert "<final> There is a blue bicycle and red motorcycle on the street. </final>" in rendered

    def test_targeted_demo_block(self):
        rendered = render_prompt(RewriteStrategy.TARGETED_RECAPTION, "a dog", make_guidance())
        assert "Input: A catcher catching a ball that has just gone by the hitter." in rendered
        assert "Output: The batter in the orange uniform just missed the ball." in rendered

    def test_reference_block_two_lines(self):
        rendered = render_prompt(
            RewriteStrategy.TARGETED_RECAPTION, "a dog", make_guidance("src text", "tgt text")
        )
        assert "Reference example(s)\nInput: src text\nOutput: tgt text\n\nInference" in rendered

    def test_pure(self):
        a = render_prompt(RewriteStrategy.DIVERSE_RECAPTION, "a dog")
        b = render_prompt(RewriteStrategy.DIVERSE_RECAPTION, "a dog")
        assert a == b

    def test_guidance_required_for_targeted(self):
        with pytest.raises(ValueError, match="requires a guidance"):
            render_prompt(RewriteStrategy.TARGETED_RECAPTION, "a dog")

    def test_guidance_forbidden_otherwise(self):
        with pytest.raises(ValueError, match="does not take"):
            render_prompt(RewriteStrategy.PARAPHRASE, "a dog", make_guidance())

    def test_placeholder_like_caption_not_reexpanded(self):
        rendered = render_prompt(
            RewriteStrategy.TARGETED_RECAPTION,
            "a {input} dog",
            make_guidance("has {input} inside", "tgt"),
        )
        assert "a {input} dog" in rendered
        assert "has {input} inside" in rendered

    def test_ends_with_output_cue(self):
        for strategy, g in (
            (RewriteStrategy.PARAPHRASE, None),
            (RewriteStrategy.DIVERSE_RECAPTION, None),
            (RewriteStrategy.TARGETED_RECAPTION, make_guidance()),
        ):
            assert render_prompt(strategy, "x", g).endswith("Output: ")


class TestParseFinal:
    def test_direct_extraction(self):
        assert parse_final("<final> A bento box with rice. </final>") == "A bento box with rice."

    def test_first_match_rule(self):
        assert parse_final("noise <final>x</final> tail <final>y</final>") == "x"

    def test_missing_tag(self):
        with pytest.raises(PromptParseError, match="missing final tag"):
            parse_final("no tags here")

    def test_missing_closing_tag(self):
        with pytest.raises(PromptParseError, match="closing"):
            parse_final("<final> unterminated")

    def test_empty_content(self):
        with pytest.raises(PromptParseError, match="empty"):
            parse_final("<final>   </final>")

    def test_nested_tag_rejected(self):
        with pytest.raises(PromptParseError, match="nested"):
            parse_final("<final><final>x</final>")

    @given(st.text(alphabet=st.characters(blacklist_characters="<>"), min_size=1, max_size=80))
    @settings(max_examples=120, deadline=None)
    def test_wrap_then_parse_is_identity(self, caption):
        trimmed = caption.strip()
        if not trimmed:
            return
        assert parse_final(f"<final> {trimmed} </final>") == trimmed


class TestComplete:
    def test_mock_round_trip(self):
        llm = ScriptedLlm([ok("<final>ok</final>")])
        assert complete(llm, "prompt", params=GenerationParams(), sleep=no_sleep) == "<final>ok</final>"

    def test_request_body_carries_params_verbatim(self):
        llm = ScriptedLlm([ok("<final>ok</final>")])
        complete(llm, "the prompt", params=GenerationParams(0.0, 42, 448), sleep=no_sleep)
        body = llm.bodies[0]
        assert body["temperature"] == 0.0
        assert body["seed"] == 42
        assert body["max_tokens"] == 448
        assert body["model"] == "scripted"
        assert body["messages"][0]["role"] == "user"
        assert body["messages"][0]["content"][0] == {"type": "text", "text": "the prompt"}

    def test_image_attached_when_uri_given(self):
        llm = ScriptedLlm([ok("<final>ok</final>")])
        complete(llm, "p", image_uri="http://img/1.jpg", params=GenerationParams(), sleep=no_sleep)
        parts = llm.bodies[0]["messages"][0]["content"]
        assert parts[1] == {"type": "image_url", "image_url": {"url": "http://img/1.jpg"}}

    def test_five_hundred_retried_five_times(self):
        llm = ScriptedLlm([(500, {})])
        sleeps = []
        with pytest.raises(EndpointError) as err:
            complete(llm, "p", params=GenerationParams(), sleep=sleeps.append)
        assert err.value.attempts == 5
        assert len(llm.bodies) == 5
        assert sleeps == [0.5, 1.0, 2.0, 4.0]

    def test_backoff_capped(self):
        llm = ScriptedLlm([TransportError("down")])
        sleeps = []
        with pytest.raises(EndpointError):
            complete(llm, "p", params=GenerationParams(), sleep=sleeps.append)
        assert max(sleeps) <= 8.0

    def test_transport_failure_then_success(self):
        llm = ScriptedLlm([TransportError("blip"), ok("<final>ok</final>"), ok("<final>ok</final>")])
        assert complete(llm, "p", params=GenerationParams(), sleep=no_sleep) == "<final>ok</final>"
        assert len(llm.bodies) == 2

    def test_client_error_fails_immediately(self):
        llm = ScriptedLlm([(403, {})])
        with pytest.raises(EndpointError, match="HTTP 403"):
            complete(llm, "p", params=GenerationParams(), sleep=no_sleep)
        assert len(llm.bodies) == 1

    def test_empty_response_is_error(self):
        llm = ScriptedLlm([ok("   ")])
        with pytest.raises(EndpointError, match="empty"):
            complete(llm, "p", params=GenerationParams(), sleep=no_sleep)


class TestTranslate:
    def test_identity_translator(self):
        mt = IdentityTranslatorEndpoint()
        assert translate(mt, "bonjour", "fr", "en", TranslationParams(), no_sleep) == "bonjour"

    def test_request_carries_params(self):
        mt = IdentityTranslatorEndpoint()
        translate(mt, "hello", "en", "ja", TranslationParams(200, "greedy"), no_sleep)
        body = mt.requests[0]
        assert body == {
            "text": "hello",
            "source_lang": "en",
            "target_lang": "ja",
            "max_tokens": 200,
            "decoding": "greedy",
        }

    def test_batch_preserves_order(self):
        mt = IdentityTranslatorEndpoint()
        texts = ["one", "two", "three"]
        assert translate_batch(mt, texts, "en", "de", TranslationParams(), no_sleep) == texts

    def test_greedy_only(self):
        with pytest.raises(ValueError, match="greedy"):
            TranslationParams(decoding="sampling")


def train_caption(i, image_id=None):
    return CaptionRecord(
        f"cap{i:03d}", image_id or f"img{i:03d}", "en", CaptionSource.NATIVE, f"scene number {i}"
    )


class TestBuildRewriteSet:
    def test_all_valid(self):
        captions = [train_caption(i) for i in range(10)]
        run = build_rewrite_set(
            captions, RewriteStrategy.PARAPHRASE, None, EchoLlmEndpoint("input"), sleep=no_sleep
        )
        assert len(run.results) == 10
        assert run.failures == []
        assert [r.train_caption_id for r in run.results] == [c.caption_id for c in captions]

    def test_failure_collected_below_threshold(self):
        captions = [train_caption(i) for i in range(10)]
        responses = [ok("<final>fine</final>")] * 4 + [ok("no tags")] + [ok("<final>fine</final>")]
        llm = ScriptedLlm(responses)
        run = build_rewrite_set(
            captions,
            RewriteStrategy.PARAPHRASE,
            None,
            llm,
            failure_threshold=0.2,
            sleep=no_sleep,
        )
        assert len(run.results) == 9
        assert len(run.failures) == 1
        assert run.failures[0].error_class == "PromptParseError"
        assert len(run.results) + len(run.failures) == len(captions)

    def test_aborts_above_threshold(self):
        captions = [train_caption(i) for i in range(10)]
        responses = [ok("<final>fine</final>")] * 4 + [ok("no tags")] + [ok("<final>fine</final>")]
        llm = ScriptedLlm(responses)
        with pytest.raises(RewriteRunAborted, match="exceeds"):
            build_rewrite_set(
                captions,
                RewriteStrategy.PARAPHRASE,
                None,
                llm,
                failure_threshold=0.05,
                sleep=no_sleep,
            )

    def test_targeted_requires_assignments(self):
        with pytest.raises(ValueError, match="guidance"):
            build_rewrite_set(
                [train_caption(0)],
                RewriteStrategy.TARGETED_RECAPTION,
                {},
                EchoLlmEndpoint("guidance"),
                sleep=no_sleep,
            )

    def test_echo_guidance_oracle_on_synthetic_corpus(self, synthetic_corpus):
        ids = [im.image_id for im in synthetic_corpus.images]
        split = make_split(ids, 0.3, 0.4, seed=9)
        index = build_index(synthetic_corpus.image_store, split.reference_ids)
        by_image = {}
        for c in synthetic_corpus.captions:
            by_image.setdefault((c.image_id, c.lang), []).append(c)
        src = {i: by_image[(i, "en")] for i in ids}
        tgt = {i: by_image[(i, "xx")] for i in ids}
        guidance = {}
        for train_id in split.train_ids:
            guidance[train_id] = select_guidance(
                train_id,
                synthetic_corpus.image_store.vector(train_id),
                index,
                src,
                tgt,
                RefSelConfig(seed=5),
            )
        captions = [src[i][0] for i in split.train_ids]
        run = build_rewrite_set(
            captions,
            RewriteStrategy.TARGETED_RECAPTION,
            guidance,
            EchoLlmEndpoint("guidance"),
            sleep=no_sleep,
        )
        assert len(run.results) == len(captions)
        for result, caption in zip(run.results, captions):
            assert result.extracted_text == guidance[caption.image_id].output_caption.text

    def test_concurrency_preserves_order(self):
        captions = [train_caption(i) for i in range(24)]
        run = build_rewrite_set(
            captions,
            RewriteStrategy.DIVERSE_RECAPTION,
            None,
            EchoLlmEndpoint("input"),
            concurrency=4,
            sleep=no_sleep,
        )
        assert [r.train_caption_id for r in run.results] == [c.caption_id for c in captions]
        assert [r.extracted_text for r in run.results] == [c.text for c in captions]

    def test_reprompt_flag_allows_one_retry(self):
        captions = [train_caption(0)]
        llm = ScriptedLlm([ok("garbled"), ok("<final>second try</final>"), ok("x")])
        run = build_rewrite_set(
            captions,
            RewriteStrategy.PARAPHRASE,
            None,
            llm,
            failure_threshold=1.0,
            reprompt_on_parse_failure=True,
            sleep=no_sleep,
        )
        assert run.results[0].extracted_text == "second try"
        assert "Reminder" in llm.bodies[1]["messages"][0]["content"][0]["text"]


class TestPrepareGuidance:
    def test_translates_and_caches(self):
        captions = {
            "in1": CaptionRecord("in1", "r1", "en", CaptionSource.NATIVE, "src one"),
            "out1": CaptionRecord("out1", "r1", "xx", CaptionSource.NATIVE, "tgt one"),
        }
        rows = [
            {"train_image_id": f"t{i}", "reference_image_id": "r1", "similarity": 0.5,
             "input_caption_id": "in1", "output_caption_id": "out1"}
            for i in range(3)
        ]
        mt = IdentityTranslatorEndpoint()
        guidance = prepare_guidance(rows, captions, translator=mt, prompt_lang="en", sleep=no_sleep)
        assert len(guidance) == 3
        # One distinct output caption -> exactly one translation request.
        assert len(mt.requests) == 1
        assert guidance["t0"].output_caption.text == "tgt one"

    def test_already_prompt_language_skips_translation(self):
        captions = {
            "in1": CaptionRecord("in1", "r1", "en", CaptionSource.NATIVE, "src"),
            "out1": CaptionRecord("out1", "r1", "en", CaptionSource.NATIVE, "tgt"),
        }
        rows = [{"train_image_id": "t0", "reference_image_id": "r1", "similarity": 0.1,
                 "input_caption_id": "in1", "output_caption_id": "out1"}]
        guidance = prepare_guidance(rows, captions, translator=None, prompt_lang="en")
        assert guidance["t0"].output_caption.text == "tgt"

    def test_unknown_caption_id(self):
        rows = [{"train_image_id": "t0", "reference_image_id": "r1", "similarity": 0.1,
                 "input_caption_id": "missing", "output_caption_id": "missing"}]
        with pytest.raises(ValueError, match="unknown caption id"):
            prepare_guidance(rows, {}, translator=None)


class StubSession:
    def __init__(self, status=200, payload=None):
        self.calls = []
        self.status = status
        self.payload = payload or {"choices": [{"message": {"content": "<final>ok</final>"}}]}

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})

        class Response:
            status_code = self.status
            _payload = self.payload

            def json(inner):
                return inner._payload

        return Response()


class TestHttpEndpoints:
    def test_llm_posts_json_with_auth_header(self):
        from xrecap.recaption import HttpLlmEndpoint

        session = StubSession()
        endpoint = HttpLlmEndpoint(
            "http://llm.local/v1/chat", model="llama", auth_token="sekrit", session=session
        )
        out = complete(endpoint, "hi", params=GenerationParams(), sleep=no_sleep)
        assert out == "<final>ok</final>"
        call = session.calls[0]
        assert call["url"] == "http://llm.local/v1/chat"
        assert call["headers"]["Authorization"] == "Bearer sekrit"
        assert call["json"]["model"] == "llama"

    def test_base64_image_transport_reads_file(self, tmp_path):
        from xrecap.recaption import HttpLlmEndpoint

        img = tmp_path / "pic.png"
        img.write_bytes(b"\x89PNG fake")
        endpoint = HttpLlmEndpoint(
            "http://llm.local", model="m", image_transport="base64", session=StubSession()
        )
        part = endpoint.image_content(str(img))
        assert part["image_url"]["url"].startswith("data:image/png;base64,")

    def test_translator_posts_body(self):
        from xrecap.recaption import HttpTranslatorEndpoint

        session = StubSession(payload={"text": "hallo"})
        endpoint = HttpTranslatorEndpoint("http://mt.local/translate", session=session)
        out = translate(endpoint, "hello", "en", "de", TranslationParams(), no_sleep)
        assert out == "hallo"
        assert session.calls[0]["json"]["target_lang"] == "de"

    def test_endpoint_factories_pull_credentials_from_env(self, monkeypatch):
        from xrecap.config import build_llm_endpoint, build_mt_endpoint

        monkeypatch.setenv("XRECAP_TOKEN", "from-env")
        llm = build_llm_endpoint(
            {"kind": "http", "base_url": "http://x", "model": "m", "auth_env": "XRECAP_TOKEN"}
        )
        assert llm.auth_token == "from-env"
        mt = build_mt_endpoint({"kind": "http", "base_url": "http://y", "auth_env": "XRECAP_TOKEN"})
        assert mt.auth_token == "from-env"


class TestAuditSample:
    def test_small_input_returned_whole(self):
        results = ["a", "b", "c"]
        assert sample_for_audit(results, size=200, seed=0) == results

    def test_sample_is_seeded_and_sized(self):
        results = list(range(1000))
        s1 = sample_for_audit(results, size=200, seed=7)
        s2 = sample_for_audit(results, size=200, seed=7)
        assert s1 == s2
        assert len(s1) == 200
        assert len(set(s1)) == 200
