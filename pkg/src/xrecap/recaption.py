"""Rewrite prompt rendering, endpoint clients, and rewrite-set construction.

Three rewrite strategies are supported: text-only paraphrasing, image-
conditioned diverse recaptioning, and targeted recaptioning steered by a
nearest-neighbor guidance example. Rewrites are generated in the source
language first and machine-translated afterwards; the pipeline enforces that
order. Model output must wrap the caption in a single <final>...</final>
block.
"""

from __future__ import annotations

import base64
import json
import mimetypes
import re
import time

import numpy as np
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import requests

from ._validation import check_positive_int
from .corpus import CaptionRecord
from .errors import EndpointError, PromptParseError, RewriteRunAborted
from .neighbors import GuidanceExample

MAX_ATTEMPTS = 5
BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 8.0

FINAL_OPEN = "<final>"
FINAL_CLOSE = "</final>"


class RewriteStrategy(str, Enum):
    PARAPHRASE = "paraphrase"
    DIVERSE_RECAPTION = "diverse_recaption"
    TARGETED_RECAPTION = "targeted_recaption"


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    seed: int = 42
    max_tokens: int = 448

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        check_positive_int(self.max_tokens, "max_tokens")


@dataclass(frozen=True)
class TranslationParams:
    max_tokens: int = 200
    decoding: str = "greedy"

    def __post_init__(self):
        check_positive_int(self.max_tokens, "max_tokens")
        if self.decoding != "greedy":
            raise ValueError(f"decoding must be 'greedy', got {self.decoding!r}")


@dataclass(frozen=True)
class RewriteResult:
    train_caption_id: str
    strategy: RewriteStrategy
    raw_output: str
    extracted_text: str
    guidance: GuidanceExample | None = None

    def __post_init__(self):
        if not self.extracted_text.strip():
            raise ValueError("extracted_text must be non-empty")
        if FINAL_OPEN in self.extracted_text or FINAL_CLOSE in self.extracted_text:
            raise ValueError("extracted_text must not contain final-tag markers")


@dataclass(frozen=True)
class RewriteFailure:
    train_caption_id: str
    error_class: str
    message: str
    attempts: int


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

PARAPHRASE_TEMPLATE = (
    "Task: The objective is to paraphrase an English caption to reflect diversity in how "
    "speakers around the world describe objects, especially across languages. It is very "
    "important to strictly follow the listed requirements.\n"
    "\n"
    "Requirements:\n"
    "- Output only a single paraphrased caption which must start with <final> and end with </final>.\n"
    "- Example: <final> There is a blue bicycle and red motorcycle on the street. </final>\n"
    "- Do not output any additional quotes, text, comments, explanations, or details. Just the caption.\n"
    "\n"
    "Please complete this example:\n"
    "Input: {input}\n"
    "Output: "
)

DIVERSE_TEMPLATE = (
    "Task Description: For an input image and an input caption, produce a one-sentence image "
    "caption that differs significantly from the input caption in order of phrases, sentence "
    "structure, semantic content, which objects are described, and/or level of detail. Make sure "
    "the output differs from the input caption and use the image for guidance. Only perform "
    "changes that are correct and semantically relevant to the given input image. After "
    "\"Output: \", always output a <final> tag, followed by a rewritten caption, then </final>. "
    "Never any other text or explanation. One task demo for formatting and change instruction is "
    "provided.\n"
    "\n"
    "Task Demo:\n"
    "Inference\n"
    "Input: A young boy holding a baseball bat during a baseball game.\n"
    "Output: <final> The batter in the grey uniform is waiting for a ball during a game. </final>\n"
    "\n"
    "Now perform the task exactly as above:\n"
    "Inference\n"
    "Input: {input}\n"
    "Output: "
)

TARGETED_TEMPLATE = (
    "Task Description: For an input image, image caption, and reference input-output caption(s) "
    "for similar image(s), rewrite the image caption with similar changes to the style, level of "
    "detail, and object terms as in the reference examples. Only perform changes that are correct "
    "and semantically relevant to the given input image. After \"Output: \", always output a "
    "<final> tag, followed by a rewritten caption, then </final>. Never any other text or "
    "explanation. One task demo for formatting and change instruction is provided.\n"
    "\n"
    "Task Demo:\n"
    "Reference example(s)\n"
    "Input: A catcher catching a ball that has just gone by the hitter.\n"
    "Output: The batter in the orange uniform just missed the ball.\n"
    "Inference\n"
    "Input: A young boy holding a baseball bat during a baseball game.\n"
    "Output: <final> The batter in the grey uniform is waiting for a ball during a game. </final>\n"
    "\n"
    "Now perform the task exactly as above:\n"
    "Reference example(s)\n"
    "{reference_examples}\n"
    "\n"
    "Inference\n"
    "Input: {input}\n"
    "Output: "
)

_TEMPLATES = {
    RewriteStrategy.PARAPHRASE: PARAPHRASE_TEMPLATE,
    RewriteStrategy.DIVERSE_RECAPTION: DIVERSE_TEMPLATE,
    RewriteStrategy.TARGETED_RECAPTION: TARGETED_TEMPLATE,
}

_PLACEHOLDER_RE = re.compile(r"\{(input|reference_examples)\}")

FORMAT_REMINDER = (
    "\n\nReminder: respond with exactly one caption wrapped as "
    "<final> caption text </final> and nothing else."
)


def render_prompt(
    strategy: RewriteStrategy,
    input_caption: str,
    guidance: GuidanceExample | None = None,
) -> str:
    """Render the prompt for a strategy, byte-stable for identical inputs.

    The targeted strategy requires a guidance example (its reference block is
    rendered as the two lines ``Input: <src>`` / ``Output: <tgt>``); the other
    strategies forbid one.
    """
    strategy = RewriteStrategy(strategy)
    if strategy is RewriteStrategy.TARGETED_RECAPTION:
        if guidance is None:
            raise ValueError("targeted recaptioning requires a guidance example")
        reference_block = f"Input: {guidance.input_caption.text}\nOutput: {guidance.output_caption.text}"
    else:
        if guidance is not None:
            raise ValueError(f"strategy {strategy.value} does not take a guidance example")
        reference_block = ""
    substitutions = {"input": input_caption, "reference_examples": reference_block}
    # Single-pass substitution so caption text containing placeholder-like
    # braces is never re-expanded.
    return _PLACEHOLDER_RE.sub(lambda m: substitutions[m.group(1)], _TEMPLATES[strategy])


def parse_final(raw: str) -> str:
    """Extract the trimmed text between the first <final> and the next </final>."""
    start = raw.find(FINAL_OPEN)
    if start < 0:
        raise PromptParseError("missing final tag")
    end = raw.find(FINAL_CLOSE, start + len(FINAL_OPEN))
    if end < 0:
        raise PromptParseError("missing closing final tag")
    content = raw[start + len(FINAL_OPEN) : end].strip()
    if not content:
        raise PromptParseError("empty content between final tags")
    if FINAL_OPEN in content:
        raise PromptParseError("nested final tag in content")
    return content


# ---------------------------------------------------------------------------
# Endpoints
# ---------------------------------------------------------------------------


class TransportError(EndpointError):
    """Request never produced an HTTP response (connection/timeout failure)."""


class HttpLlmEndpoint:
    """Chat-completion endpoint: POST {model, messages, temperature, seed, max_tokens}."""

    def __init__(
        self,
        base_url: str,
        model: str,
        auth_token: str | None = None,
        image_transport: str = "url",
        timeout_s: float = 120.0,
        session=None,
    ):
        if image_transport not in ("url", "base64"):
            raise ValueError(f"image_transport must be 'url' or 'base64', got {image_transport!r}")
        self.base_url = base_url
        self.model = model
        self.auth_token = auth_token
        self.image_transport = image_transport
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def image_content(self, image_uri: str) -> dict:
        if self.image_transport == "url":
            return {"type": "image_url", "image_url": {"url": image_uri}}
        data = Path(image_uri).read_bytes()
        mime = mimetypes.guess_type(image_uri)[0] or "application/octet-stream"
        encoded = base64.b64encode(data).decode("ascii")
        return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{encoded}"}}

    def send(self, body: dict) -> tuple[int, dict]:
        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        try:
            response = self._session.post(
                self.base_url, json=body, headers=headers, timeout=self.timeout_s
            )
        except requests.RequestException as exc:
            raise TransportError(f"LLM endpoint unreachable: {exc}") from exc
        try:
            payload = response.json()
        except ValueError:
            payload = {}
        return response.status_code, payload


class HttpTranslatorEndpoint:
    """Translation endpoint: POST {text, source_lang, target_lang, max_tokens, decoding}."""

    def __init__(self, base_url: str, auth_token: str | None = None, timeout_s: float = 120.0, session=None):
        self.base_url = base_url
        self.auth_token = auth_token
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def send(self, body: dict) -> tuple[int, dict]:
        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        try:
            response = self._session.post(
                self.base_url, json=body, headers=headers, timeout=self.timeout_s
            )
        except requests.RequestException as exc:
            raise TransportError(f"MT endpoint unreachable: {exc}") from exc
        try:
            payload = response.json()
        except ValueError:
            payload = {}
        return response.status_code, payload


def _extract_inference_input(prompt: str) -> str:
    # Rendered prompts end with "Input: <caption>\nOutput: ".
    parts = prompt.rsplit("\nInput: ", 1)
    if len(parts) != 2:
        return "unparsed"
    return parts[1].rsplit("\nOutput: ", 1)[0]


def _extract_guidance_output(prompt: str) -> str | None:
    # The last reference block reads "Reference example(s)\nInput: <src>\nOutput: <tgt>\n\nInference".
    marker = "Reference example(s)\nInput: "
    idx = prompt.rfind(marker)
    if idx < 0:
        return None
    segment = prompt[idx:]
    out_idx = segment.find("\nOutput: ")
    if out_idx < 0:
        return None
    rest = segment[out_idx + len("\nOutput: "):]
    end = rest.find("\n\nInference")
    return rest[:end] if end >= 0 else None


class EchoLlmEndpoint:
    """Deterministic offline stand-in for the LLM endpoint.

    mode="input" echoes the inference caption; mode="guidance" echoes the
    guidance example's output caption (falling back to the input when the
    prompt has no reference block). Useful for desk-scale pipeline runs and
    tests.
    """

    model = "echo"

    def __init__(self, mode: str = "input"):
        if mode not in ("input", "guidance"):
            raise ValueError(f"mode must be 'input' or 'guidance', got {mode!r}")
        self.mode = mode
        self.requests: list[dict] = []

    def image_content(self, image_uri: str) -> dict:
        return {"type": "image_url", "image_url": {"url": image_uri}}

    def send(self, body: dict) -> tuple[int, dict]:
        self.requests.append(body)
        prompt = next(
            part["text"] for part in body["messages"][0]["content"] if part["type"] == "text"
        )
        text = None
        if self.mode == "guidance":
            text = _extract_guidance_output(prompt)
        if text is None:
            text = _extract_inference_input(prompt)
        content = f"{FINAL_OPEN} {text} {FINAL_CLOSE}"
        return 200, {"choices": [{"message": {"content": content}}]}


class IdentityTranslatorEndpoint:
    """Offline translator that returns its input unchanged."""

    def __init__(self):
        self.requests: list[dict] = []

    def send(self, body: dict) -> tuple[int, dict]:
        self.requests.append(body)
        return 200, {"text": body["text"]}


def _with_retries(send: Callable[[], tuple[int, dict]], what: str, sleep: Callable[[float], None]):
    last_error = None
    for attempt in range(1, MAX_ATTEMPTS + 1):
        try:
            status, payload = send()
        except TransportError as exc:
            last_error = f"{exc}"
        else:
            if 200 <= status < 300:
                return payload, attempt
            last_error = f"HTTP {status}"
            if status < 500:
                raise EndpointError(f"{what} failed: {last_error}", attempts=attempt)
        if attempt < MAX_ATTEMPTS:
            sleep(min(BACKOFF_CAP_S, BACKOFF_BASE_S * 2 ** (attempt - 1)))
    raise EndpointError(
        f"{what} failed after {MAX_ATTEMPTS} attempts: {last_error}", attempts=MAX_ATTEMPTS
    )


def complete(
    endpoint,
    prompt: str,
    image_uri: str | None = None,
    params: GenerationParams = GenerationParams(),
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Send one chat request and return the first message content.

    Transport failures and 5xx responses are retried with capped exponential
    backoff up to 5 attempts; 4xx responses and empty content fail
    immediately (temperature-0 generation would only repeat them).
    """
    content: list[dict] = [{"type": "text", "text": prompt}]
    if image_uri is not None:
        content.append(endpoint.image_content(image_uri))
    body = {
        "model": endpoint.model,
        "messages": [{"role": "user", "content": content}],
        "temperature": params.temperature,
        "seed": params.seed,
        "max_tokens": params.max_tokens,
    }
    payload, attempts = _with_retries(lambda: endpoint.send(body), "LLM request", sleep)
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise EndpointError("LLM response missing choices[0].message.content", attempts=attempts)
    if not isinstance(text, str) or not text.strip():
        raise EndpointError("LLM returned an empty response", attempts=attempts)
    return text


def translate(
    endpoint,
    text: str,
    source_lang: str,
    target_lang: str,
    params: TranslationParams = TranslationParams(),
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Translate one text with greedy decoding; one request per caption."""
    body = {
        "text": text,
        "source_lang": source_lang,
        "target_lang": target_lang,
        "max_tokens": params.max_tokens,
        "decoding": params.decoding,
    }
    payload, attempts = _with_retries(lambda: endpoint.send(body), "MT request", sleep)
    translated = payload.get("text")
    if not isinstance(translated, str) or not translated.strip():
        raise EndpointError("MT returned an empty response", attempts=attempts)
    return translated


def translate_batch(
    endpoint,
    texts: Sequence[str],
    source_lang: str,
    target_lang: str,
    params: TranslationParams = TranslationParams(),
    sleep: Callable[[float], None] = time.sleep,
) -> list[str]:
    """Translate texts one request each, outputs in input order."""
    return [translate(endpoint, t, source_lang, target_lang, params, sleep) for t in texts]


# ---------------------------------------------------------------------------
# Guidance preparation and rewrite runs
# ---------------------------------------------------------------------------


def prepare_guidance(
    assignment_rows: Sequence[dict],
    captions_by_id: Mapping[str, CaptionRecord],
    translator=None,
    translation_params: TranslationParams = TranslationParams(),
    prompt_lang: str = "en",
    sleep: Callable[[float], None] = time.sleep,
) -> dict[str, GuidanceExample]:
    """Resolve assignment rows into guidance examples rendered in the prompt language.

    Output captions not already in ``prompt_lang`` are translated (one request
    per distinct caption id; results cached by caption id).
    """
    translation_cache: dict[str, str] = {}
    guidance: dict[str, GuidanceExample] = {}
    for row in assignment_rows:
        try:
            input_caption = captions_by_id[row["input_caption_id"]]
            output_caption = captions_by_id[row["output_caption_id"]]
        except KeyError as exc:
            raise ValueError(f"assignment references unknown caption id {exc.args[0]!r}") from exc
        if output_caption.lang != prompt_lang:
            if translator is None:
                raise ValueError(
                    f"guidance caption {output_caption.caption_id!r} is in "
                    f"{output_caption.lang!r} but no translator endpoint is configured"
                )
            cid = output_caption.caption_id
            if cid not in translation_cache:
                translation_cache[cid] = translate(
                    translator, output_caption.text, output_caption.lang, prompt_lang,
                    translation_params, sleep,
                )
            output_caption = CaptionRecord(
                caption_id=output_caption.caption_id,
                image_id=output_caption.image_id,
                lang=output_caption.lang,
                source=output_caption.source,
                text=translation_cache[cid],
            )
        guidance[row["train_image_id"]] = GuidanceExample(
            reference_image_id=row["reference_image_id"],
            input_caption=input_caption,
            output_caption=output_caption,
            similarity=float(row["similarity"]),
        )
    return guidance


@dataclass
class RewriteRun:
    results: list[RewriteResult]
    failures: list[RewriteFailure]


def build_rewrite_set(
    captions: Sequence[CaptionRecord],
    strategy: RewriteStrategy,
    guidance: Mapping[str, GuidanceExample] | None,
    llm,
    params: GenerationParams = GenerationParams(),
    *,
    image_uri_of: Mapping[str, str] | None = None,
    failure_threshold: float = 0.05,
    concurrency: int = 1,
    reprompt_on_parse_failure: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> RewriteRun:
    """Generate one rewrite per caption, collecting failures instead of dropping them.

    Output order matches input order; ``len(results) + len(failures)`` always
    equals the input count. The run aborts (raising
    :class:`RewriteRunAborted`) when the failure rate exceeds
    ``failure_threshold``.
    """
    strategy = RewriteStrategy(strategy)
    check_positive_int(concurrency, "concurrency")
    if not 0 <= failure_threshold <= 1:
        raise ValueError(f"failure_threshold must be in [0, 1], got {failure_threshold}")
    if strategy is RewriteStrategy.TARGETED_RECAPTION:
        if guidance is None:
            raise ValueError("targeted recaptioning requires guidance assignments")
        missing = [c.image_id for c in captions if c.image_id not in guidance]
        if missing:
            raise ValueError(f"no guidance assignment for images: {sorted(set(missing))[:5]}")

    def run_one(caption: CaptionRecord):
        example = guidance[caption.image_id] if strategy is RewriteStrategy.TARGETED_RECAPTION else None
        prompt = render_prompt(strategy, caption.text, example)
        image_uri = None
        if strategy is not RewriteStrategy.PARAPHRASE and image_uri_of:
            image_uri = image_uri_of.get(caption.image_id)
        attempts_used = 0
        try:
            raw = complete(llm, prompt, image_uri, params, sleep)
            attempts_used = 1
            try:
                extracted = parse_final(raw)
            except PromptParseError:
                if not reprompt_on_parse_failure:
                    raise
                raw = complete(llm, prompt + FORMAT_REMINDER, image_uri, params, sleep)
                attempts_used += 1
                extracted = parse_final(raw)
            return RewriteResult(
                train_caption_id=caption.caption_id,
                strategy=strategy,
                raw_output=raw,
                extracted_text=extracted,
                guidance=example,
            ), None
        except (EndpointError, PromptParseError) as exc:
            attempts = getattr(exc, "attempts", max(attempts_used, 1))
            return None, RewriteFailure(
                train_caption_id=caption.caption_id,
                error_class=type(exc).__name__,
                message=str(exc),
                attempts=attempts,
            )

    if concurrency == 1:
        outcomes = [run_one(c) for c in captions]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(pool.map(run_one, captions))

    results = [r for r, _ in outcomes if r is not None]
    failures = [f for _, f in outcomes if f is not None]
    if captions and len(failures) / len(captions) > failure_threshold:
        raise RewriteRunAborted(
            f"rewrite failure rate {len(failures)}/{len(captions)} exceeds "
            f"threshold {failure_threshold:g}",
            results=results,
            failures=failures,
        )
    return RewriteRun(results=results, failures=failures)


def write_rewrites(run: RewriteRun, results_path, failures_path=None) -> None:
    """Export a rewrite run as JSONL (results, and failures when a path is given)."""
    results_path = Path(results_path)
    with results_path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in run.results:
            obj = {
                "train_caption_id": r.train_caption_id,
                "strategy": r.strategy.value,
                "raw_output": r.raw_output,
                "extracted_text": r.extracted_text,
                "reference_image_id": r.guidance.reference_image_id if r.guidance else None,
            }
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
    if failures_path is not None:
        failures_path = Path(failures_path)
        with failures_path.open("w", encoding="utf-8", newline="\n") as fh:
            for f in run.failures:
                obj = {
                    "train_caption_id": f.train_caption_id,
                    "error_class": f.error_class,
                    "message": f.message,
                    "attempts": f.attempts,
                }
                fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
                fh.write("\n")


def sample_for_audit(results: Sequence[RewriteResult], size: int = 200, seed: int = 0) -> list[RewriteResult]:
    """Seeded uniform sample (without replacement) of rewrites for human review."""
    if len(results) <= size:
        return list(results)
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(results), size=size, replace=False).tolist())
    return [results[i] for i in chosen]
