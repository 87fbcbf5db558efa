"""Multi-scale visual content refinement over pluggable embedding backends.

The pipeline decomposes an image into a scale set of crop views, scores
every view with a text classifier, keeps the most confident view per scale
by prediction margin, and merges the kept features weighted by scale.  The
refined feature replaces the global one in the zero-shot and cache-adapter
classifiers.  Backends provide the features: a binary file store, a
synthetic planted-scene world, or anything implementing encode_views.
"""

__version__ = "0.1.0"

from .adapter import (
    AdapterConfig,
    CacheModel,
    adapter_logits,
    build_cache,
    cache_logits,
    grid_search,
    train_cache_keys,
)
from .embeddings import (
    EmbeddingStore,
    FileBackend,
    TextClassifier,
    build_text_classifier,
    load_embedding_file,
    load_text_classifier,
    make_store,
    normalize,
    write_embedding_file,
    write_text_classifier,
)
from .errors import (
    FormatError,
    InvalidArgumentError,
    MissingEmbeddingError,
    NotFoundError,
    ValidationError,
    VcrError,
)
from .evaluation import (
    AblationConfig,
    BenchmarkConfig,
    Episode,
    EvalReport,
    build_fewshot_episode,
    evaluate,
    run_ablation,
    run_domain_generalization,
    synthetic_benchmark,
)
from .geometry import (
    GLOBAL,
    CropRect,
    ScaleSet,
    ViewSet,
    build_scale_set,
    build_view_set,
    sample_crops,
    ten_crop_rects,
)
from .refine import (
    RefinedFeature,
    SelectionResult,
    merge_features,
    prediction_margin,
    refine_image,
    select_view,
    zero_shot_logits,
)
from .synthetic import (
    Disc,
    SyntheticBackend,
    SyntheticScene,
    disc_rect_overlap,
    generate_scenes,
    synthetic_encode,
)
