"""Token selection strategies and their application to embedding sequences.

Ties are always broken in favour of the lower (earlier) token index, so every
strategy is a deterministic function of its inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .types import (
    EmbeddingSequence,
    InvariantError,
    Ordering,
    PruneConfig,
    PruneResult,
    QKTensor,
    RemainderPolicy,
    Strategy,
    TokenScores,
    round_half_up,
)

log = logging.getLogger(__name__)

_TWO64 = 1 << 64


class PruneError(InvariantError):
    pass


@dataclass(frozen=True)
class SegmentPartition:
    """Contiguous segments ``[boundaries[s], boundaries[s+1])`` covering ``[0, N)``."""

    boundaries: np.ndarray

    @property
    def n_segments(self) -> int:
        return self.boundaries.size - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def segment_of(self, indices: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.boundaries, indices, side="right") - 1


@dataclass(frozen=True)
class CoverageMetrics:
    attention_mass_captured: float
    segment_occupancy: float
    max_temporal_gap: int


def segment_partition(n: int, s: int) -> SegmentPartition:
    """Split ``n`` tokens into ``s`` balanced segments, larger ones first."""
    if s < 1:
        raise PruneError(f"number of segments must be >= 1, got {s}")
    if s > n:
        raise PruneError(f"cannot split {n} tokens into {s} non-empty segments")
    base, extra = divmod(n, s)
    sizes = np.full(s, base, dtype=np.int64)
    sizes[:extra] += 1
    return SegmentPartition(np.concatenate([[0], np.cumsum(sizes)]))


def _descending(scores: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """``indices`` sorted by score (high first), ties by ascending index."""
    indices = np.asarray(indices, dtype=np.int64)
    return indices[np.lexsort((indices, -scores[indices]))]


def _ascending(scores: np.ndarray, indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    return indices[np.lexsort((indices, scores[indices]))]


def _order(scores: np.ndarray, kept: np.ndarray, ordering: Ordering) -> np.ndarray:
    if ordering is Ordering.TEMPORAL:
        return np.sort(kept)
    return _descending(scores, kept)


def top_k(scores: TokenScores, cfg: PruneConfig) -> PruneResult:
    s = scores.scores
    k = cfg.resolve_k(s.size)
    kept = _descending(s, np.arange(s.size))[:k]
    return PruneResult(
        kept_indices=_order(s, kept, cfg.ordering),
        n_tokens_in=s.size,
        strategy=Strategy.TOP_K,
        k_requested=k,
        ordering=cfg.ordering,
    )


def bottom_k(scores: TokenScores, cfg: PruneConfig) -> PruneResult:
    s = scores.scores
    k = cfg.resolve_k(s.size)
    kept = _ascending(s, np.arange(s.size))[:k]
    return PruneResult(
        kept_indices=_order(s, kept, cfg.ordering),
        n_tokens_in=s.size,
        strategy=Strategy.BOTTOM_K,
        k_requested=k,
        ordering=cfg.ordering,
    )


def segmentwise_top_k(scores: TokenScores, cfg: PruneConfig) -> PruneResult:
    """Keep the ``K // S`` best tokens of each of ``S`` temporal segments.

    Scores are compared against the whole sequence, only the quota is local.
    Under ``RemainderPolicy.STRICT`` the ``K mod S`` leftover budget (and any
    shortfall from segments smaller than the quota) is dropped; under
    ``GREEDY_FILL`` it goes to the best tokens not yet selected. With one
    segment this is exactly :func:`top_k`.
    """
    s = scores.scores
    n = s.size
    k = cfg.resolve_k(n)
    partition = segment_partition(n, cfg.segments)
    quota = k // cfg.segments
    if quota == 0 and cfg.remainder_policy is RemainderPolicy.STRICT:
        log.warning("K=%d < S=%d: strict segmentwise selection keeps no tokens", k, cfg.segments)

    picked = []
    for lo, hi in zip(partition.boundaries[:-1], partition.boundaries[1:]):
        picked.append(_descending(s, np.arange(lo, hi))[:quota])
    kept = np.concatenate(picked)

    if cfg.remainder_policy is RemainderPolicy.GREEDY_FILL and kept.size < k:
        mask = np.ones(n, dtype=bool)
        mask[kept] = False
        fill = _descending(s, np.flatnonzero(mask))[: k - kept.size]
        kept = np.concatenate([kept, fill])

    return PruneResult(
        kept_indices=_order(s, kept, cfg.ordering),
        n_tokens_in=n,
        strategy=Strategy.SEGMENTWISE_TOP_K,
        k_requested=k,
        ordering=cfg.ordering,
        segments=cfg.segments,
    )


def visionzip_split(k: int, contextual_ratio: float) -> tuple[int, int]:
    """Split a budget ``k`` into (dominant, contextual) counts."""
    dominant = max(1, round_half_up(k / (1.0 + contextual_ratio)))
    return dominant, k - dominant


def visionzip_prune(
    scores: TokenScores,
    keys: Optional[QKTensor],
    embeddings: EmbeddingSequence,
    cfg: PruneConfig,
) -> PruneResult:
    """Dominant tokens by attention plus merged contextual tokens.

    The remaining (non-dominant) tokens are grouped around ``C`` targets spaced
    evenly through them in time; every other remaining token joins the target
    whose key (all heads concatenated) is most cosine-similar, and each group
    is replaced by the mean of its embeddings. This is a simplified take on
    VisionZip's contextual merge, not a port of it.
    """
    s = scores.scores
    n = s.size
    if embeddings.n_tokens != n:
        raise PruneError(f"embeddings have {embeddings.n_tokens} tokens, scores have {n}")
    k = cfg.resolve_k(n)
    n_dom, n_ctx = visionzip_split(k, cfg.contextual_ratio)
    if cfg.contextual_ratio > 0 and k < 2:
        raise PruneError("VisionZip needs a budget of at least 2 tokens when contextual_ratio > 0")

    dominant = _descending(s, np.arange(n))[:n_dom]
    contextual = None
    if n_ctx > 0:
        if keys is None:
            raise PruneError("VisionZip contextual merging needs key vectors")
        if keys.n_tokens != n:
            raise PruneError(f"keys have {keys.n_tokens} tokens, scores have {n}")
        contextual = _merge_contextual(dominant, keys, embeddings, n_ctx)

    return PruneResult(
        kept_indices=_order(s, dominant, cfg.ordering),
        n_tokens_in=n,
        strategy=Strategy.VISIONZIP,
        k_requested=k,
        ordering=cfg.ordering,
        contextual_tokens=contextual,
    )


def _merge_contextual(
    dominant: np.ndarray, keys: QKTensor, embeddings: EmbeddingSequence, n_ctx: int
) -> np.ndarray:
    n = embeddings.n_tokens
    remaining = np.setdiff1d(np.arange(n), dominant)
    step = max(1, remaining.size // n_ctx)
    target_pos = np.arange(0, remaining.size, step)[:n_ctx]
    targets = remaining[target_pos]
    others = np.delete(remaining, target_pos)

    flat = keys.keys.astype(np.float64).transpose(1, 0, 2).reshape(n, -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    unit = flat / np.maximum(norms, 1e-12)
    assign = np.argmax(unit[others] @ unit[targets].T, axis=1)

    emb = embeddings.data.astype(np.float64)
    sums = emb[targets].copy()
    counts = np.ones(n_ctx)
    np.add.at(sums, assign, emb[others])
    np.add.at(counts, assign, 1.0)
    return (sums / counts[:, None]).astype(embeddings.data.dtype)


def seeded_sample(n: int, k: int, seed: int) -> np.ndarray:
    """Draw ``k`` of ``range(n)`` uniformly without replacement.

    Partial Fisher-Yates shuffle driven by raw 64-bit outputs of numpy's
    PCG64 (seeded through ``SeedSequence(seed)``); bounded integers use
    rejection sampling, so the result depends only on the PCG64 stream.
    """
    if not 0 <= k <= n:
        raise PruneError(f"cannot sample {k} of {n} items")
    bitgen = np.random.PCG64(seed)
    pool = list(range(n))
    for i in range(k):
        span = n - i
        limit = _TWO64 - (_TWO64 % span)
        while True:
            draw = int(bitgen.random_raw())
            if draw < limit:
                break
        j = i + draw % span
        pool[i], pool[j] = pool[j], pool[i]
    return np.array(pool[:k], dtype=np.int64)


def random_prune(n: int, cfg: PruneConfig) -> PruneResult:
    """Seeded uniform selection, returned in temporal order."""
    if cfg.seed is None:
        raise PruneError("random pruning needs a seed")
    k = cfg.resolve_k(n)
    return PruneResult(
        kept_indices=np.sort(seeded_sample(n, k, cfg.seed)),
        n_tokens_in=n,
        strategy=Strategy.RANDOM,
        k_requested=k,
        ordering=Ordering.TEMPORAL,
    )


def identity(n: int) -> PruneResult:
    return PruneResult(
        kept_indices=np.arange(n),
        n_tokens_in=n,
        strategy=Strategy.IDENTITY,
        k_requested=n,
        ordering=Ordering.TEMPORAL,
    )


def prune(
    scores: TokenScores,
    cfg: PruneConfig,
    embeddings: Optional[EmbeddingSequence] = None,
    keys: Optional[QKTensor] = None,
) -> PruneResult:
    """Dispatch on ``cfg.strategy``."""
    strategy = cfg.strategy
    if strategy is Strategy.TOP_K:
        return top_k(scores, cfg)
    if strategy is Strategy.SEGMENTWISE_TOP_K:
        return segmentwise_top_k(scores, cfg)
    if strategy is Strategy.BOTTOM_K:
        return bottom_k(scores, cfg)
    if strategy is Strategy.RANDOM:
        return random_prune(scores.n_tokens, cfg)
    if strategy is Strategy.IDENTITY:
        return identity(scores.n_tokens)
    if strategy is Strategy.VISIONZIP:
        if embeddings is None:
            raise PruneError("VisionZip needs the embedding sequence")
        return visionzip_prune(scores, keys, embeddings, cfg)
    raise PruneError(f"unknown strategy {strategy!r}")


def apply_selection(embeddings: EmbeddingSequence, result: PruneResult) -> EmbeddingSequence:
    """Gather kept rows in result order, then append any contextual rows."""
    if result.n_tokens_in != embeddings.n_tokens:
        raise PruneError(
            f"result was computed for {result.n_tokens_in} tokens, embeddings have {embeddings.n_tokens}"
        )
    rows = embeddings.data[result.kept_indices]
    if result.contextual_tokens is not None:
        ctx = result.contextual_tokens
        if ctx.shape[1] != embeddings.dim:
            raise PruneError(f"contextual tokens have dim {ctx.shape[1]}, embeddings {embeddings.dim}")
        rows = np.concatenate([rows, ctx.astype(rows.dtype, copy=False)])
    if rows.shape[0] == 0:
        raise PruneError("selection is empty")
    return EmbeddingSequence(rows)


def coverage_metrics(result: PruneResult, scores: TokenScores, s_eval: int) -> CoverageMetrics:
    """Attention mass kept, fraction of segments hit, and largest index gap.

    ``s_eval`` is clamped to N. Gaps are measured between consecutive kept
    indices only: a single kept token has gap 0 and an empty selection N.
    Contextual tokens carry no index and are ignored.
    """
    s = scores.scores
    n = s.size
    if result.n_tokens_in != n:
        raise PruneError(f"result was computed for {result.n_tokens_in} tokens, scores have {n}")
    kept = np.sort(result.kept_indices)
    total = s.sum()
    mass = float(s[kept].sum() / total) if total > 0 else 0.0

    partition = segment_partition(n, min(max(s_eval, 1), n))
    hit = np.unique(partition.segment_of(kept))
    occupancy = hit.size / partition.n_segments

    if kept.size == 0:
        gap = n
    elif kept.size == 1:
        gap = 0
    else:
        gap = int(np.diff(kept).max())
    return CoverageMetrics(min(mass, 1.0), occupancy, gap)
