"""Action spotting and replay grounding over per-second soccer embeddings.

The package covers the temporal-detection half of a two-stage pipeline:
it consumes pre-extracted per-second feature sequences, trains
transformer (and NetVLAD-pooling) heads on them, post-processes the raw
detections and scores everything with tolerance-based average precision.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    EventAnnotation,
    FeatureSequence,
    GameHalf,
    ReplayAnnotation,
    Snippet,
    build_snippet_dataset,
    combine_features,
    parse_game_time,
    parse_labels,
)
from .checkpoint import Model, load_model, save_model  # noqa: F401
from .evaluation import (  # noqa: F401
    EvalReport,
    ReplayStats,
    average_map,
    average_precision_at_tol,
    replay_average_ap,
    replay_stats,
)
from .grounding import (  # noqa: F401
    GroundingPrediction,
    GroundingSample,
    ReplayQuery,
    filter_predictions,
    fuse_with_spotting,
    ground_forward,
    ground_loss,
    infer_grounding,
    merge_nms,
    sample_grounding_pairs,
    train_grounding,
)
from .nn import (  # noqa: F401
    AdamState,
    EncoderConfig,
    adam_step,
    encoder_backward,
    encoder_forward,
    grad_check,
    positional_encoding,
)
from .npyio import parse_npy, write_npy  # noqa: F401
from .spotting import (  # noqa: F401
    Chunk,
    DatasetSplits,
    NetVLADConfig,
    SpotPrediction,
    TrainSpec,
    make_chunks,
    mixup,
    netvlad_pool_forward,
    nms_1d,
    spot_forward,
    spot_game,
    train_spotting,
)
from .synth import SynthConfig, synth_dataset, synth_generate  # noqa: F401
from .vocab import DEFAULT_VOCAB, load_vocab, save_vocab  # noqa: F401
