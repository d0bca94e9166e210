"""Cross-lingual multimodal recaptioning toolkit.

Builds augmented cross-lingual retrieval training data by rewriting captions
with nearest-neighbor guidance, trains a text projection head contrastively
over frozen embeddings, and evaluates retrieval, error sets, ROUGE, and
object-term distributions.
"""

__version__ = "0.1.0"

from .corpus import (
    CaptionRecord,
    CaptionSource,
    CorpusSplit,
    EmbeddingStore,
    ImageRecord,
    SyntheticSpec,
    generate_synthetic,
    ingest_captions,
    ingest_embeddings,
    make_split,
)
from .evaluation import (
    ErrorSet,
    RankingResult,
    RetrievalReport,
    build_error_set,
    rank_all,
    recall_report,
    restricted_report,
    rouge,
)
from .neighbors import GuidanceExample, NnIndex, RefSelConfig, build_index, select_guidance
from .recaption import (
    GenerationParams,
    RewriteResult,
    RewriteStrategy,
    TranslationParams,
    build_rewrite_set,
    parse_final,
    render_prompt,
)
from .training import (
    AugmentationPool,
    ContrastiveProjection,
    ProjectionHead,
    contrastive_loss,
    load_checkpoint,
    project,
    sample_positive,
    save_checkpoint,
)

__all__ = [
    "__version__",
    "AugmentationPool",
    "CaptionRecord",
    "CaptionSource",
    "ContrastiveProjection",
    "CorpusSplit",
    "EmbeddingStore",
    "ErrorSet",
    "GenerationParams",
    "GuidanceExample",
    "ImageRecord",
    "NnIndex",
    "ProjectionHead",
    "RankingResult",
    "RefSelConfig",
    "RetrievalReport",
    "RewriteResult",
    "RewriteStrategy",
    "SyntheticSpec",
    "TranslationParams",
    "build_error_set",
    "build_index",
    "build_rewrite_set",
    "contrastive_loss",
    "generate_synthetic",
    "ingest_captions",
    "ingest_embeddings",
    "load_checkpoint",
    "make_split",
    "parse_final",
    "project",
    "rank_all",
    "recall_report",
    "render_prompt",
    "restricted_report",
    "rouge",
    "sample_positive",
    "save_checkpoint",
    "select_guidance",
]
