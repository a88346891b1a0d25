"""Slow, independent reference computations used as test oracles.

Plain Python loops and math.fsum; nothing here shares code with the package.
"""

import math


def softmax_attention_oracle(q, k):
    """q, k: nested lists H x N x Dh. Returns H x N x N nested lists."""
    out = []
    for qh, kh in zip(q, k):
        dh = len(qh[0])
        head = []
        for qi in qh:
            logits = [math.fsum(a * b for a, b in zip(qi, kj)) / math.sqrt(dh) for kj in kh]
            top = max(logits)
            exps = [math.exp(x - top) for x in logits]
            total = math.fsum(exps)
            head.append([e / total for e in exps])
        out.append(head)
    return out


def column_sum_oracle(weights):
    """weights: H x N x N nested lists. Mean over heads of column sums."""
    h = len(weights)
    n = len(weights[0])
    return [math.fsum(weights[a][i][j] for a in range(h) for i in range(n)) / h for j in range(n)]


def top_k_oracle(scores, k):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def bottom_k_oracle(scores, k):
    return sorted(range(len(scores)), key=lambda i: (scores[i], i))[:k]


def balanced_sizes(n, s):
    """Sizes of s contiguous segments of n tokens, larger first."""
    sizes = []
    remaining = n
    for seg in range(s):
        size = -(-remaining // (s - seg))  # ceil
        sizes.append(size)
        remaining -= size
    return sizes


def segmentwise_oracle(scores, k, s):
    """Set of indices chosen by strict segmentwise top-k."""
    quota = k // s
    chosen = []
    start = 0
    for size in balanced_sizes(len(scores), s):
        seg = list(range(start, start + size))
        seg.sort(key=lambda i: (-scores[i], i))
        chosen.extend(seg[:quota])
        start += size
    return chosen


def prefill_flops_oracle(n, layers, d, dff):
    # 2 FLOPs per multiply-add: QKVO 4*(n*d*d), QK^T and PV 2*(n*n*d), FFN 2*(n*d*dff)
    macs = 4 * n * d * d + 2 * n * n * d + 2 * n * d * dff
    return layers * 2 * macs


def decode_flops_oracle(n, layers, d, dff):
    macs = 4 * d * d + 2 * n * d + 2 * d * dff
    return layers * 2 * macs
