"""Exception types shared across the toolkit."""


class XrecapError(Exception):
    """Base class for all toolkit errors."""


class CorpusFormatError(XrecapError):
    """A corpus file (captions JSONL, embedding store, split manifest) is malformed."""


class ConfigError(XrecapError):
    """Pipeline configuration is invalid. The message lists every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class EndpointError(XrecapError):
    """An LLM or MT endpoint request failed permanently."""

    def __init__(self, message, *, attempts=1):
        super().__init__(message)
        self.attempts = attempts


class PromptParseError(XrecapError):
    """Model output did not contain a well-formed final-tag block."""


class RewriteRunAborted(XrecapError):
    """Failure rate of a rewrite run exceeded the configured threshold."""

    def __init__(self, message, *, results=(), failures=()):
        super().__init__(message)
        self.results = list(results)
        self.failures = list(failures)


class TaxonomyError(XrecapError):
    """Taxonomy file is malformed, cyclic, or contains dangling references."""


class CheckpointError(XrecapError):
    """Projection-head checkpoint is corrupt or incompatible."""


class TrainingDiverged(XrecapError):
    """Training loss became non-finite."""

    def __init__(self, message, *, step):
        super().__init__(message)
        self.step = step
