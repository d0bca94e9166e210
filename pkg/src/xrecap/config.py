"""TOML pipeline configuration: parsing, validation, endpoint construction.

One config file drives every subcommand; flags override config values.
Validation collects every problem rather than stopping at the first.
Endpoint credentials come from environment variables only (the config names
the variable, never the secret).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .corpus import SyntheticSpec
from .errors import ConfigError
from .neighbors import RefSelConfig
from .recaption import (
    EchoLlmEndpoint,
    GenerationParams,
    HttpLlmEndpoint,
    HttpTranslatorEndpoint,
    IdentityTranslatorEndpoint,
    RewriteStrategy,
    TranslationParams,
)

STRATEGY_NAMES = tuple(s.value for s in RewriteStrategy)


@dataclass
class SplitOptions:
    ref_fraction: float = 0.25
    train_fraction: float = 0.5
    seed: int = 0


@dataclass
class RecaptionOptions:
    strategies: tuple = (RewriteStrategy.TARGETED_RECAPTION,)
    failure_threshold: float = 0.05
    concurrency: int = 1
    reprompt_on_parse_failure: bool = False
    prompt_lang: str = "en"


@dataclass
class TrainOptions:
    batch_size: int = 32
    learning_rate: float = 0.05
    epochs: int = 30
    temperature: float = 0.07
    optimizer: str = "adam"
    seed: int = 0
    augment: bool = True
    image_store: str | None = None
    text_store: str | None = None
    rewrite_stores: dict = field(default_factory=dict)


@dataclass
class EvalOptions:
    image_store: str | None = None
    text_stores: tuple = ()
    gold: str = "identity"
    checkpoint: str | None = None


@dataclass
class PipelineConfig:
    base_dir: Path
    out_dir: Path
    synthetic: SyntheticSpec | None = None
    image_store: str | None = None
    captions: tuple = ()
    source_lang: str = "en"
    target_lang: str = "xx"
    split: SplitOptions = field(default_factory=SplitOptions)
    refsel: RefSelConfig = field(default_factory=RefSelConfig)
    llm_cfg: dict = field(default_factory=lambda: {"kind": "echo_input"})
    mt_cfg: dict = field(default_factory=lambda: {"kind": "identity"})
    generation: GenerationParams = field(default_factory=GenerationParams)
    translation: TranslationParams = field(default_factory=TranslationParams)
    recaption: RecaptionOptions = field(default_factory=RecaptionOptions)
    train: TrainOptions = field(default_factory=TrainOptions)
    eval_opts: EvalOptions = field(default_factory=EvalOptions)
    raw: dict = field(default_factory=dict, repr=False)

    def resolve(self, value: str) -> Path:
        """Resolve a config path: absolute kept, relative against the config dir."""
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    def out_path(self, *parts) -> Path:
        return self.out_dir.joinpath(*parts)


def _take(table: dict, key: str, kind, problems: list, where: str, default=None):
    if key not in table:
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        problems.append(f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
        return default
    return value


def load_config(path, out_dir=None) -> PipelineConfig:
    """Parse and validate a TOML pipeline config; raises ConfigError listing all problems."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    with path.open("rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: TOML parse error: {exc}"])

    problems: list[str] = []
    base_dir = path.parent

    paths_tbl = raw.get("paths", {})
    cfg_out = out_dir or paths_tbl.get("out_dir") or "out"
    out_path = Path(cfg_out)
    if not out_path.is_absolute():
        out_path = base_dir / out_path

    cfg = PipelineConfig(base_dir=base_dir, out_dir=out_path, raw=raw)

    corpus_tbl = raw.get("corpus", {})
    cfg.source_lang = _take(corpus_tbl, "source_lang", str, problems, "corpus", "en")
    cfg.target_lang = _take(corpus_tbl, "target_lang", str, problems, "corpus", "xx")
    if "synthetic" in corpus_tbl:
        syn = corpus_tbl["synthetic"]
        try:
            cfg.synthetic = SyntheticSpec(
                num_concepts=syn.get("num_concepts", 4),
                images_per_concept=syn.get("images_per_concept", 48),
                dim=syn.get("dim", 16),
                shift_magnitude=syn.get("shift_magnitude", 0.8),
                noise_sigma=syn.get("noise_sigma", 0.1),
                seed=syn.get("seed", 0),
                source_lang=cfg.source_lang,
                target_lang=cfg.target_lang,
            )
        except (ValueError, TypeError) as exc:
            problems.append(f"corpus.synthetic: {exc}")
    cfg.image_store = _take(corpus_tbl, "image_store", str, problems, "corpus")
    captions = corpus_tbl.get("captions", [])
    if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        problems.append("corpus.captions: expected a list of paths")
    else:
        cfg.captions = tuple(captions)
    if isinstance(cfg.image_store, str) and not cfg.resolve(cfg.image_store).exists():
        problems.append(f"corpus.image_store: path does not exist: {cfg.resolve(cfg.image_store)}")
    for cpath in cfg.captions:
        if not cfg.resolve(cpath).exists():
            problems.append(f"corpus.captions: path does not exist: {cfg.resolve(cpath)}")

    split_tbl = raw.get("split", {})
    cfg.split = SplitOptions(
        ref_fraction=_take(split_tbl, "ref_fraction", float, problems, "split", 0.25),
        train_fraction=_take(split_tbl, "train_fraction", float, problems, "split", 0.5),
        seed=_take(split_tbl, "seed", int, problems, "split", 0),
    )
    if not 0 < cfg.split.ref_fraction:
        problems.append("split.ref_fraction: must be positive")
    if not 0 < cfg.split.train_fraction:
        problems.append("split.train_fraction: must be positive")
    if cfg.split.ref_fraction + cfg.split.train_fraction > 1 + 1e-12:
        problems.append("split: ref_fraction + train_fraction must be <= 1")

    refsel_tbl = raw.get("refsel", {})
    try:
        cfg.refsel = RefSelConfig(
            k=_take(refsel_tbl, "k", int, problems, "refsel", 1),
            seed=_take(refsel_tbl, "seed", int, problems, "refsel", 0),
        )
    except ValueError as exc:
        problems.append(f"refsel: {exc}")

    endpoints_tbl = raw.get("endpoints", {})
    cfg.llm_cfg = dict(endpoints_tbl.get("llm", {"kind": "echo_input"}))
    cfg.mt_cfg = dict(endpoints_tbl.get("mt", {"kind": "identity"}))
    llm_kind = cfg.llm_cfg.get("kind", "http")
    if llm_kind not in ("http", "echo_input", "echo_guidance"):
        problems.append(f"endpoints.llm.kind: unknown kind {llm_kind!r}")
    elif llm_kind == "http":
        for key in ("base_url", "model"):
            if not isinstance(cfg.llm_cfg.get(key), str):
                problems.append(f"endpoints.llm.{key}: required for kind='http'")
    mt_kind = cfg.mt_cfg.get("kind", "http")
    if mt_kind not in ("http", "identity"):
        problems.append(f"endpoints.mt.kind: unknown kind {mt_kind!r}")
    elif mt_kind == "http" and not isinstance(cfg.mt_cfg.get("base_url"), str):
        problems.append("endpoints.mt.base_url: required for kind='http'")

    gen_tbl = raw.get("generation", {})
    try:
        cfg.generation = GenerationParams(
            temperature=_take(gen_tbl, "temperature", float, problems, "generation", 0.0),
            seed=_take(gen_tbl, "seed", int, problems, "generation", 42),
            max_tokens=_take(gen_tbl, "max_tokens", int, problems, "generation", 448),
        )
    except ValueError as exc:
        problems.append(f"generation: {exc}")

    tr_tbl = raw.get("translation", {})
    try:
        cfg.translation = TranslationParams(
            max_tokens=_take(tr_tbl, "max_tokens", int, problems, "translation", 200),
            decoding=_take(tr_tbl, "decoding", str, problems, "translation", "greedy"),
        )
    except ValueError as exc:
        problems.append(f"translation: {exc}")

    recap_tbl = raw.get("recaption", {})
    strategy_names = recap_tbl.get("strategies", ["targeted_recaption"])
    strategies = []
    if not isinstance(strategy_names, list) or not strategy_names:
        problems.append("recaption.strategies: expected a non-empty list")
    else:
        for name in strategy_names:
            if name not in STRATEGY_NAMES:
                problems.append(
                    f"recaption.strategies: unknown strategy {name!r} (choose from {STRATEGY_NAMES})"
                )
            else:
                strategies.append(RewriteStrategy(name))
    cfg.recaption = RecaptionOptions(
        strategies=tuple(strategies) or (RewriteStrategy.TARGETED_RECAPTION,),
        failure_threshold=_take(recap_tbl, "failure_threshold", float, problems, "recaption", 0.05),
        concurrency=_take(recap_tbl, "concurrency", int, problems, "recaption", 1),
        reprompt_on_parse_failure=_take(
            recap_tbl, "reprompt_on_parse_failure", bool, problems, "recaption", False
        ),
        prompt_lang=_take(recap_tbl, "prompt_lang", str, problems, "recaption", "en"),
    )
    if not 0 <= cfg.recaption.failure_threshold <= 1:
        problems.append("recaption.failure_threshold: must be in [0, 1]")
    if cfg.recaption.concurrency < 1:
        problems.append("recaption.concurrency: must be >= 1")

    train_tbl = raw.get("train", {})
    rewrite_stores = train_tbl.get("rewrite_stores", {})
    if not isinstance(rewrite_stores, dict):
        problems.append("train.rewrite_stores: expected a table of strategy = path")
        rewrite_stores = {}
    cfg.train = TrainOptions(
        batch_size=_take(train_tbl, "batch_size", int, problems, "train", 32),
        learning_rate=_take(train_tbl, "learning_rate", float, problems, "train", 0.05),
        epochs=_take(train_tbl, "epochs", int, problems, "train", 30),
        temperature=_take(train_tbl, "temperature", float, problems, "train", 0.07),
        optimizer=_take(train_tbl, "optimizer", str, problems, "train", "adam"),
        seed=_take(train_tbl, "seed", int, problems, "train", 0),
        augment=_take(train_tbl, "augment", bool, problems, "train", True),
        image_store=_take(train_tbl, "image_store", str, problems, "train"),
        text_store=_take(train_tbl, "text_store", str, problems, "train"),
        rewrite_stores=dict(rewrite_stores),
    )
    if cfg.train.batch_size < 2:
        problems.append("train.batch_size: must be >= 2")
    if cfg.train.optimizer not in ("adam", "sgd"):
        problems.append(f"train.optimizer: must be 'adam' or 'sgd', got {cfg.train.optimizer!r}")
    if cfg.train.temperature <= 0:
        problems.append("train.temperature: must be positive")
    if cfg.train.epochs < 1:
        problems.append("train.epochs: must be >= 1")

    eval_tbl = raw.get("eval", {})
    text_stores = eval_tbl.get("text_stores", [])
    if not isinstance(text_stores, list) or not all(isinstance(t, str) for t in text_stores):
        problems.append("eval.text_stores: expected a list of paths")
        text_stores = []
    cfg.eval_opts = EvalOptions(
        image_store=_take(eval_tbl, "image_store", str, problems, "eval"),
        text_stores=tuple(text_stores),
        gold=_take(eval_tbl, "gold", str, problems, "eval", "identity"),
        checkpoint=_take(eval_tbl, "checkpoint", str, problems, "eval"),
    )

    if cfg.synthetic is None and cfg.image_store is None:
        problems.append("corpus: either corpus.synthetic or corpus.image_store must be set")

    if problems:
        raise ConfigError(problems)
    return cfg


def _auth_token(cfg: dict) -> str | None:
    env_name = cfg.get("auth_env")
    if not env_name:
        return None
    return os.environ.get(env_name)


def build_llm_endpoint(cfg: dict):
    kind = cfg.get("kind", "http")
    if kind == "echo_input":
        return EchoLlmEndpoint(mode="input")
    if kind == "echo_guidance":
        return EchoLlmEndpoint(mode="guidance")
    return HttpLlmEndpoint(
        base_url=cfg["base_url"],
        model=cfg["model"],
        auth_token=_auth_token(cfg),
        image_transport=cfg.get("image_transport", "url"),
        timeout_s=float(cfg.get("timeout_s", 120.0)),
    )


def build_mt_endpoint(cfg: dict):
    kind = cfg.get("kind", "http")
    if kind == "identity":
        return IdentityTranslatorEndpoint()
    return HttpTranslatorEndpoint(
        base_url=cfg["base_url"],
        auth_token=_auth_token(cfg),
        timeout_s=float(cfg.get("timeout_s", 120.0)),
    )
