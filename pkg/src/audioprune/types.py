"""Domain types shared by every module.

All tensors are plain numpy arrays wrapped in small dataclasses that check
their invariants on construction. One audio sample per object; batching is
left to the caller.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

# Tolerance on attention row sums.
ROW_SUM_ATOL = 1e-5


class InvariantError(ValueError):
    """A domain object was built from data that breaks its invariants."""


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class EmbeddingSequence:
    """N x D token embeddings (one row per audio token)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise InvariantError(f"embeddings must be rank 2, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise InvariantError(f"embeddings must be non-empty, got shape {data.shape}")
        _require_finite("embeddings", data)
        object.__setattr__(self, "data", data)

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class QKTensor:
    """Per-head queries and keys, each H x N x Dh."""

    queries: np.ndarray
    keys: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.queries)
        k = np.asarray(self.keys)
        if q.shape != k.shape:
            raise InvariantError(f"queries {q.shape} and keys {k.shape} differ in shape")
        if q.ndim != 3 or min(q.shape) < 1:
            raise InvariantError(f"queries/keys must be H x N x Dh, got {q.shape}")
        _require_finite("queries", q)
        _require_finite("keys", k)
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "keys", k)

    @classmethod
    def from_stacked(cls, stacked: np.ndarray) -> "QKTensor":
        """Split a 2 x H x N x Dh array (queries first) into a QKTensor."""
        stacked = np.asarray(stacked)
        if stacked.ndim != 4 or stacked.shape[0] != 2:
            raise InvariantError(f"stacked qk must have shape (2, H, N, Dh), got {stacked.shape}")
        return cls(stacked[0], stacked[1])

    def stacked(self) -> np.ndarray:
        return np.stack([self.queries, self.keys])

    @property
    def n_heads(self) -> int:
        return self.queries.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.queries.shape[1]

    @property
    def head_dim(self) -> int:
        return self.queries.shape[2]


@dataclass(frozen=True)
class AttentionTensor:
    """Post-softmax attention weights, H x N x N, rows indexed by query."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights)
        if w.ndim != 3 or w.shape[1] != w.shape[2] or min(w.shape) < 1:
            raise InvariantError(f"attention must be H x N x N, got {w.shape}")
        _require_finite("attention", w)
        if w.min() < 0.0 or w.max() > 1.0:
            raise InvariantError("attention weights must lie in [0, 1]")
        dev = np.abs(w.sum(axis=-1, dtype=np.float64) - 1.0).max()
        if dev > ROW_SUM_ATOL:
            raise InvariantError(f"attention rows must sum to 1 (max deviation {dev:.3g})")
        object.__setattr__(self, "weights", w)

    @property
    def n_heads(self) -> int:
        return self.weights.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class TokenScores:
    """Per-token importance: nonnegative, one value per token."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise InvariantError(f"scores must be a non-empty vector, got shape {s.shape}")
        _require_finite("scores", s)
        if s.min() < 0.0:
            raise InvariantError("scores must be nonnegative")
        object.__setattr__(self, "scores", s)

    @property
    def n_tokens(self) -> int:
        return self.scores.size


class Strategy(str, enum.Enum):
    TOP_K = "topk"
    SEGMENTWISE_TOP_K = "segmentwise"
    VISIONZIP = "visionzip"
    RANDOM = "random"
    BOTTOM_K = "bottomk"
    IDENTITY = "identity"


class Ordering(str, enum.Enum):
    DESCENDING_ATTENTION = "descending-attention"
    TEMPORAL = "temporal"


class RemainderPolicy(str, enum.Enum):
    STRICT = "strict"
    GREEDY_FILL = "greedy-fill"


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class PruneConfig:
    """How many tokens to keep and how to pick them.

    Exactly one of ``k`` and ``retention_rate`` may be set; with neither,
    every token is kept. A rate resolves to ``max(1, round(rate * N))``
    with halves rounded up.
    """

    strategy: Strategy = Strategy.TOP_K
    k: Optional[int] = None
    retention_rate: Optional[float] = None
    segments: int = 10
    ordering: Ordering = Ordering.DESCENDING_ATTENTION
    contextual_ratio: float = 0.18
    seed: Optional[int] = None
    remainder_policy: RemainderPolicy = RemainderPolicy.STRICT

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "ordering", Ordering(self.ordering))
        object.__setattr__(self, "remainder_policy", RemainderPolicy(self.remainder_policy))
        if self.k is not None and self.retention_rate is not None:
            raise InvariantError("give either k or retention_rate, not both")
        if self.k is not None and self.k < 1:
            raise InvariantError(f"k must be positive, got {self.k}")
        if self.retention_rate is not None and not 0.0 < self.retention_rate <= 1.0:
            raise InvariantError(f"retention_rate must be in (0, 1], got {self.retention_rate}")
        if self.segments < 1:
            raise InvariantError(f"segments must be >= 1, got {self.segments}")
        if not 0.0 <= self.contextual_ratio < 1.0:
            raise InvariantError(f"contextual_ratio must be in [0, 1), got {self.contextual_ratio}")

    def resolve_k(self, n_tokens: int) -> int:
        if self.k is not None:
            k = self.k
        elif self.retention_rate is not None:
            k = max(1, round_half_up(self.retention_rate * n_tokens))
        else:
            k = n_tokens
        if k > n_tokens:
            raise InvariantError(f"k={k} exceeds the number of tokens N={n_tokens}")
        return k

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "k": self.k,
            "retention_rate": self.retention_rate,
            "segments": self.segments,
            "ordering": self.ordering.value,
            "contextual_ratio": self.contextual_ratio,
            "seed": self.seed,
            "remainder_policy": self.remainder_policy.value,
        }


@dataclass
class PruneResult:
    """Kept token indices, in output order, plus optional merged tokens."""

    kept_indices: np.ndarray
    n_tokens_in: int
    strategy: Strategy
    k_requested: int
    ordering: Ordering
    segments: Optional[int] = None
    contextual_tokens: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        idx = np.asarray(self.kept_indices, dtype=np.int64).reshape(-1)
        self.kept_indices = idx
        self.strategy = Strategy(self.strategy)
        self.ordering = Ordering(self.ordering)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_tokens_in):
            raise InvariantError("kept index out of range")
        if np.unique(idx).size != idx.size:
            raise InvariantError("kept indices must be distinct")
        if self.ordering is Ordering.TEMPORAL and np.any(np.diff(idx) <= 0):
            raise InvariantError("temporal ordering requires strictly increasing indices")
        if self.contextual_tokens is not None:
            ctx = np.asarray(self.contextual_tokens)
            if ctx.ndim != 2:
                raise InvariantError("contextual tokens must be a C x D matrix")
            self.contextual_tokens = ctx
        if self.k_kept > self.k_requested:
            raise InvariantError(f"kept {self.k_kept} tokens, more than requested {self.k_requested}")

    @property
    def contextual_count(self) -> int:
        return 0 if self.contextual_tokens is None else self.contextual_tokens.shape[0]

    @property
    def k_kept(self) -> int:
        return int(self.kept_indices.size) + self.contextual_count

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "n_tokens_in": int(self.n_tokens_in),
            "k_requested": int(self.k_requested),
            "k_kept": self.k_kept,
            "segments": None if self.segments is None else int(self.segments),
            "ordering": self.ordering.value,
            "kept_indices": [int(i) for i in self.kept_indices],
            "contextual_count": self.contextual_count,
        }
