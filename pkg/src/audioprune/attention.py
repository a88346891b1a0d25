"""Per-head attention and per-token importance scores.

Everything accumulates in float64 whatever the input precision; column sums
over 750+ query rows drift noticeably in float32.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from .types import AttentionTensor, QKTensor, TokenScores

SumOver = Literal["queries", "keys"]


def softmax_attention(qk: QKTensor) -> AttentionTensor:
    """Row-wise softmax of ``Q_h K_h^T / sqrt(Dh)`` for every head."""
    q = qk.queries.astype(np.float64)
    k = qk.keys.astype(np.float64)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(qk.head_dim)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return AttentionTensor(weights)


def aggregate_scores(attn: AttentionTensor, sum_over: SumOver = "queries") -> TokenScores:
    """Collapse attention into one importance value per token.

    The default sums each key column over all query rows (attention
    *received* by a token), then averages over heads, so the scores total N.
    ``sum_over="keys"`` sums rows instead; on a row-stochastic tensor that
    gives all ones and exists only for experiments.
    """
    w = attn.weights.astype(np.float64, copy=False)
    if sum_over == "queries":
        per_head = w.sum(axis=1)
    elif sum_over == "keys":
        per_head = w.sum(axis=2)
    else:
        raise ValueError(f"sum_over must be 'queries' or 'keys', got {sum_over!r}")
    return TokenScores(per_head.mean(axis=0))


def scores_from_qk(qk: QKTensor) -> TokenScores:
    return aggregate_scores(softmax_attention(qk))


def max_normalized(scores: TokenScores) -> np.ndarray:
    """Scores divided by their maximum (all zeros stay zeros)."""
    peak = scores.scores.max()
    if peak == 0.0:
        return np.zeros_like(scores.scores)
    return scores.scores / peak
