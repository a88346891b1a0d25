"""Attention-based and segmentwise token pruning for audio encoder outputs."""

__version__ = "0.1.0"

from .attention import aggregate_scores, scores_from_qk, softmax_attention
from .cost_model import ModelShape, audio_token_count, bench_prefill, estimate_cost
from .pruning import (
    apply_selection,
    bottom_k,
    coverage_metrics,
    identity,
    prune,
    random_prune,
    segment_partition,
    segmentwise_top_k,
    top_k,
    visionzip_prune,
)
from .tensor_store import load_prune_result, load_tensor, save_prune_result, save_tensor
from .types import (
    AttentionTensor,
    EmbeddingSequence,
    Ordering,
    PruneConfig,
    PruneResult,
    QKTensor,
    RemainderPolicy,
    Strategy,
    TokenScores,
)
