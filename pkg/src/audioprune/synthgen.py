"""Synthetic attention and embeddings with a few clustered "hot" tokens.

Recipe: per head and query row, hot-column logits (Gaussian jitter) and
cold-column logits (a temporally smooth background field plus jitter) are
softmaxed, with a per-row logit offset on the hot columns solved so the hot
tokens take exactly ``concentration`` of the row's mass. Every generated
tensor is row-stochastic and the hot tokens receive ``concentration * N`` of
the aggregated score.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .types import AttentionTensor, EmbeddingSequence, InvariantError, QKTensor

# Relative weight of per-entry jitter against the smooth background.
_JITTER = 0.5


class InfeasibleSpecError(InvariantError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_tokens: int = 750
    n_heads: int = 4
    n_hot: int = 30
    cluster_width: int = 5
    concentration: float = 0.8
    noise_scale: float = 1.0
    seed: int = 0
    dim: int = 1280
    # Correlation length (tokens) of the background attention field.
    background_width: float = 25.0
    # Strength of the shared direction inside a hot cluster, in units of sqrt(dim).
    cluster_separation: float = 1.0

    def __post_init__(self) -> None:
        if self.n_tokens < 1 or self.n_heads < 1 or self.dim < 1:
            raise InfeasibleSpecError("n_tokens, n_heads and dim must be positive")
        if not 0 <= self.n_hot <= self.n_tokens:
            raise InfeasibleSpecError(f"n_hot={self.n_hot} must be in [0, {self.n_tokens}]")
        if self.cluster_width < 1:
            raise InfeasibleSpecError("cluster_width must be >= 1")
        if not 0.0 < self.concentration < 1.0:
            raise InfeasibleSpecError("concentration must be in (0, 1)")
        if self.noise_scale < 0 or self.background_width < 0 or self.cluster_separation < 0:
            raise InfeasibleSpecError("noise_scale, background_width and cluster_separation must be >= 0")
        n_clusters = self.n_clusters
        # Clusters are separated by at least one cold token.
        if self.n_hot + max(n_clusters - 1, 0) > self.n_tokens:
            raise InfeasibleSpecError(
                f"{n_clusters} separated clusters holding {self.n_hot} hot tokens do not fit in {self.n_tokens}"
            )

    @property
    def n_clusters(self) -> int:
        return math.ceil(self.n_hot / self.cluster_width)

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(spec: SynthSpec) -> list[np.random.Generator]:
    children = np.random.SeedSequence(spec.seed).spawn(4)
    return [np.random.default_rng(c) for c in children]


def hot_clusters(spec: SynthSpec) -> list[np.ndarray]:
    """Index arrays of the hot clusters, in temporal order.

    All clusters have ``cluster_width`` tokens except possibly the last.
    Positions are uniform over non-overlapping placements with at least one
    cold token between neighbours.
    """
    m = spec.n_clusters
    if m == 0:
        return []
    sizes = [spec.cluster_width] * m
    sizes[-1] = spec.n_hot - spec.cluster_width * (m - 1)
    slack = spec.n_tokens - spec.n_hot - (m - 1)
    rng = _streams(spec)[0]
    slots = np.sort(rng.choice(slack + m, size=m, replace=False))
    clusters = []
    offset = 0
    for slot, size in zip(slots, sizes):
        # (slot - i) spare cold tokens + i separators + earlier hot tokens
        start = int(slot) + offset
        clusters.append(np.arange(start, start + size))
        offset += size
    return clusters


def hot_indices(spec: SynthSpec) -> np.ndarray:
    clusters = hot_clusters(spec)
    return np.concatenate(clusters) if clusters else np.empty(0, dtype=np.int64)


def _smooth_field(rng: np.random.Generator, n: int, width: float) -> np.ndarray:
    white = rng.standard_normal(n)
    if width > 0:
        radius = int(math.ceil(3 * width))
        t = np.arange(-radius, radius + 1)
        kernel = np.exp(-0.5 * (t / width) ** 2)
        kernel /= kernel.sum()
        padded = np.pad(white, radius, mode="reflect" if n > radius else "wrap")
        white = np.convolve(padded, kernel, mode="valid")
    std = white.std()
    return (white - white.mean()) / std if std > 0 else np.zeros(n)


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=-1, keepdims=True)
    out = np.exp(logits)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def gen_attention(spec: SynthSpec) -> AttentionTensor:
    """H x N x N attention where the hot tokens draw ``concentration`` of every row."""
    n, h = spec.n_tokens, spec.n_heads
    rng = _streams(spec)[1]
    hot = hot_indices(spec)
    is_hot = np.zeros(n, dtype=bool)
    is_hot[hot] = True
    cold = np.flatnonzero(~is_hot)

    field = _smooth_field(rng, n, spec.background_width)
    jitter = rng.standard_normal((h, n, n))
    logits = spec.noise_scale * (field[None, None, :] + _JITTER * jitter)

    weights = np.zeros((h, n, n))
    if hot.size and cold.size:
        weights[:, :, hot] = spec.concentration * _row_softmax(logits[:, :, hot])
        weights[:, :, cold] = (1.0 - spec.concentration) * _row_softmax(logits[:, :, cold])
    else:
        weights[:] = _row_softmax(logits)
    return AttentionTensor(weights)


def gen_embeddings(spec: SynthSpec) -> EmbeddingSequence:
    """N x D Gaussian embeddings; each hot cluster shares a mean direction."""
    rng = _streams(spec)[2]
    data = rng.standard_normal((spec.n_tokens, spec.dim))
    scale = spec.cluster_separation * math.sqrt(spec.dim)
    for cluster in hot_clusters(spec):
        direction = rng.standard_normal(spec.dim)
        direction /= np.linalg.norm(direction)
        data[cluster] += scale * direction
    return EmbeddingSequence(data.astype(np.float32))


def gen_qk(spec: SynthSpec, embeddings: EmbeddingSequence, head_dim: int = 64) -> QKTensor:
    """Queries and keys as seeded random per-head projections of the embeddings.

    Projection keeps the cluster geometry, which is what VisionZip-style key
    similarity needs. These are not the logits behind :func:`gen_attention`.
    """
    rng = _streams(spec)[3]
    x = embeddings.data.astype(np.float64)
    d = x.shape[1]
    wq = rng.standard_normal((spec.n_heads, d, head_dim)) / math.sqrt(d)
    wk = rng.standard_normal((spec.n_heads, d, head_dim)) / math.sqrt(d)
    q = np.einsum("nd,hde->hne", x, wq)
    k = np.einsum("nd,hde->hne", x, wk)
    return QKTensor(q.astype(np.float32), k.astype(np.float32))
