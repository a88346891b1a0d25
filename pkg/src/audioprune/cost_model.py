"""Token counts, analytic FLOPs and a prefill matmul micro-benchmark.

FLOPs convention: one multiply-add counts as 2 FLOPs, everywhere. Vocabulary
projection, norms and activations are ignored.
"""

from __future__ import annotations

import hashlib
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

# 16 kHz audio -> 10 ms hop (100 frames/s) -> 2-frame patches (50 Hz)
# -> stride-2 pooling after the encoder (25 Hz).
TOKENS_PER_SECOND = 25
# Absorbs float error in durations such as k * 0.04.
_DURATION_EPS = 1e-9


@dataclass(frozen=True)
class ModelShape:
    n_layers: int = 32
    model_dim: int = 4096
    n_heads: int = 32
    ffn_dim: int = 11008

    def __post_init__(self) -> None:
        for name in ("n_layers", "model_dim", "n_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass(frozen=True)
class CostEstimate:
    n_context: int
    prefill_flops: int
    prefill_attention_flops: int
    decode_flops_per_token: int
    decode_context_flops: int

    @property
    def attention_share(self) -> float:
        """Fraction of prefill FLOPs in the score and value products."""
        return self.prefill_attention_flops / self.prefill_flops

    @property
    def decode_context_share(self) -> float:
        return self.decode_context_flops / self.decode_flops_per_token


def audio_token_count(duration_s: float) -> int:
    """Number of encoder tokens for ``duration_s`` seconds of audio (25 per second)."""
    if duration_s < 0:
        raise ValueError(f"duration must be nonnegative, got {duration_s}")
    return int(math.floor(duration_s * TOKENS_PER_SECOND + _DURATION_EPS))


def prefill_attention_flops(n: int, shape: ModelShape) -> int:
    # Q K^T and P V, each n x n x D multiply-adds.
    return shape.n_layers * 4 * n * n * shape.model_dim


def prefill_flops(n: int, shape: ModelShape) -> int:
    if n < 1:
        raise ValueError(f"prefill needs at least one token, got {n}")
    D, F = shape.model_dim, shape.ffn_dim
    projections = 8 * n * D * D  # Q, K, V, O
    ffn = 4 * n * D * F  # up + down
    return shape.n_layers * (projections + ffn) + prefill_attention_flops(n, shape)


def decode_context_flops(n: int, shape: ModelShape) -> int:
    # One query against n cached keys and values.
    return shape.n_layers * 4 * n * shape.model_dim


def decode_flops_per_token(n: int, shape: ModelShape) -> int:
    if n < 1:
        raise ValueError(f"decode needs a context of at least one token, got {n}")
    D, F = shape.model_dim, shape.ffn_dim
    return shape.n_layers * (8 * D * D + 4 * D * F) + decode_context_flops(n, shape)


def estimate_cost(n_context: int, shape: ModelShape = ModelShape()) -> CostEstimate:
    return CostEstimate(
        n_context=n_context,
        prefill_flops=prefill_flops(n_context, shape),
        prefill_attention_flops=prefill_attention_flops(n_context, shape),
        decode_flops_per_token=decode_flops_per_token(n_context, shape),
        decode_context_flops=decode_context_flops(n_context, shape),
    )


class BenchAllocationError(MemoryError):
    pass


@dataclass(frozen=True)
class BenchStats:
    n_tokens: int
    times_ms: tuple[float, ...] = field(repr=False)
    operand_digest: str = field(repr=False)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.times_ms)

    @property
    def std_ms(self) -> float:
        return statistics.stdev(self.times_ms)


def _layer_operands(n: int, shape: ModelShape, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, F = shape.model_dim, shape.ffn_dim

    def mat(rows: int, cols: int, fan_in: int) -> np.ndarray:
        return (rng.standard_normal((rows, cols), dtype=np.float32) / np.float32(math.sqrt(fan_in)))

    return {
        "x": rng.standard_normal((n, D), dtype=np.float32),
        "wq": mat(D, D, D),
        "wk": mat(D, D, D),
        "wv": mat(D, D, D),
        "wo": mat(D, D, D),
        "w_up": mat(D, F, D),
        "w_down": mat(F, D, F),
    }


def _layer_prefill(ops: dict[str, np.ndarray], shape: ModelShape) -> np.ndarray:
    x = ops["x"]
    n = x.shape[0]
    H, Dh = shape.n_heads, shape.head_dim

    def heads(t: np.ndarray) -> np.ndarray:
        return t.reshape(n, H, Dh).transpose(1, 0, 2)

    q, k, v = heads(x @ ops["wq"]), heads(x @ ops["wk"]), heads(x @ ops["wv"])
    logits = q @ k.transpose(0, 2, 1) * np.float32(1.0 / math.sqrt(Dh))
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(1, 0, 2).reshape(n, -1)
    h = x + ctx @ ops["wo"]
    return h + np.maximum(h @ ops["w_up"], 0) @ ops["w_down"]


def bench_prefill(n: int, shape: ModelShape, reps: int = 10, seed: int = 0, warmup: int = 1) -> BenchStats:
    """Time one transformer layer's prefill matmuls on ``n`` tokens.

    Operands are drawn once from ``seed`` and reused for every repetition.
    ``warmup`` untimed runs precede the ``reps`` timed ones. Wall-clock from
    ``time.perf_counter_ns``; do not run two benchmarks concurrently.
    """
    if reps < 3:
        raise ValueError(f"reps must be >= 3 to report a spread, got {reps}")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    try:
        ops = _layer_operands(n, shape, seed)
        for _ in range(max(1, warmup)):
            _layer_prefill(ops, shape)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            _layer_prefill(ops, shape)
            times.append((time.perf_counter_ns() - t0) / 1e6)
    except MemoryError as exc:
        raise BenchAllocationError(f"cannot allocate prefill operands for n={n}, {shape}") from exc

    digest = hashlib.sha256()
    for name in sorted(ops):
        digest.update(ops[name].tobytes())
    return BenchStats(n_tokens=n, times_ms=tuple(times), operand_digest=digest.hexdigest())
