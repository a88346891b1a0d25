"""``audioprune`` command line: aggregate, prune, synth, metrics, estimate, bench.

Every flag can also come from a TOML file given with ``--config``; keys in a
``[<command>]`` table override top-level keys, and explicit flags override
both. Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .attention import aggregate_scores, max_normalized, softmax_attention
from .cost_model import ModelShape, audio_token_count, bench_prefill, estimate_cost
from .pruning import apply_selection, coverage_metrics, prune
from .synthgen import SynthSpec, gen_attention, gen_embeddings, gen_qk, hot_indices
from .tensor_store import (
    TensorStoreError,
    load_prune_result,
    load_tensor,
    read_header,
    save_prune_result,
    save_tensor,
)
from .types import (
    AttentionTensor,
    EmbeddingSequence,
    InvariantError,
    Ordering,
    PruneConfig,
    QKTensor,
    RemainderPolicy,
    Strategy,
    TokenScores,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("audioprune")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

COST_COLUMNS = [
    "n_tokens",
    "prefill_flops",
    "attention_share",
    "decode_flops_per_token",
    "bench_mean_ms",
    "bench_std_ms",
]
METRIC_COLUMNS = [
    "strategy",
    "n_tokens_in",
    "k_requested",
    "k_kept",
    "segments_eval",
    "attention_mass_captured",
    "segment_occupancy",
    "max_temporal_gap",
]


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("token counts must be positive integers")
    return values


def _reps(text: str) -> int:
    reps = int(text)
    if reps < 3:
        raise argparse.ArgumentTypeError(f"--reps must be >= 3, got {reps}")
    return reps


def _enum_value(enum_cls, value: str, flag: str):
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise UsageError(f"{flag}: invalid choice {value!r} (choose from {choices})") from None


# -- output helpers -----------------------------------------------------------


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def _write_manifest(
    path: Path,
    command: str,
    args: argparse.Namespace,
    inputs: dict[str, str],
    outputs: dict[str, str],
    prune_config: Optional[PruneConfig] = None,
) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "command": command,
        "args": resolved,
        "inputs": inputs,
        "outputs": outputs,
        "prune_config": None if prune_config is None else prune_config.to_dict(),
        "seed": resolved.get("seed"),
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _scores_rows(scores: TokenScores, extra: Optional[np.ndarray] = None) -> list[list[Any]]:
    norm = max_normalized(scores)
    rows = []
    for i, (s, m) in enumerate(zip(scores.scores, norm)):
        row = [i, _fmt(s), _fmt(m)]
        if extra is not None:
            row.append(int(extra[i]))
        rows.append(row)
    return rows


def _load_scores(path: str) -> TokenScores:
    arr = load_tensor(path, 2)
    if arr.shape[0] != 1:
        raise InvariantError(f"{path}: scores must be stored as a 1 x N matrix, got {arr.shape}")
    return TokenScores(arr[0])


def _load_qk(path: str) -> QKTensor:
    return QKTensor.from_stacked(load_tensor(path, 4))


def _load_keys(path: str) -> QKTensor:
    """Keys from either a rank-3 H x N x Dh file or a stacked 2 x H x N x Dh qk file."""
    shape, _ = read_header(path)
    if len(shape) == 4:
        return _load_qk(path)
    keys = load_tensor(path, 3)
    return QKTensor(keys, keys)


# -- commands ---------------------------------------------------------------


def cmd_aggregate(args: argparse.Namespace) -> int:
    if (args.qk is None) == (args.attn is None):
        raise UsageError("give exactly one of --qk and --attn")
    if args.out is None:
        raise UsageError("--out is required")
    if args.qk is not None:
        attn = softmax_attention(_load_qk(args.qk))
        source = {"qk": args.qk}
    else:
        attn = AttentionTensor(load_tensor(args.attn, 3))
        source = {"attn": args.attn}
    scores = aggregate_scores(attn, sum_over=args.sum_over)

    out = Path(args.out)
    csv_path = out.with_suffix(".csv")
    save_tensor(scores.scores[None, :], out)
    _write_csv(csv_path, ["index", "score", "max_normalized_score"], _scores_rows(scores))
    _write_manifest(
        out.with_suffix(".manifest.json"),
        "aggregate",
        args,
        source,
        {"scores": str(out), "csv": str(csv_path)},
    )
    log.info("wrote %d scores to %s", scores.n_tokens, out)
    return EXIT_OK


def _prune_config(args: argparse.Namespace) -> PruneConfig:
    if args.k is not None and args.rate is not None:
        raise UsageError("give at most one of --k and --rate")
    strategy = _enum_value(Strategy, args.strategy, "--strategy")
    if strategy is Strategy.RANDOM and args.seed is None:
        raise UsageError("--strategy random needs --seed")
    return PruneConfig(
        strategy=strategy,
        k=args.k,
        retention_rate=args.rate,
        segments=args.segments,
        ordering=_enum_value(Ordering, args.ordering, "--ordering"),
        contextual_ratio=args.contextual_ratio,
        seed=args.seed,
        remainder_policy=_enum_value(RemainderPolicy, args.remainder, "--remainder"),
    )


def cmd_prune(args: argparse.Namespace) -> int:
    if args.scores is None or args.out_dir is None:
        raise UsageError("--scores and --out-dir are required")
    try:
        cfg = _prune_config(args)
    except InvariantError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.strategy is Strategy.VISIONZIP and (args.embeddings is None or args.keys is None):
        raise UsageError("--strategy visionzip needs --embeddings and --keys")

    scores = _load_scores(args.scores)
    embeddings = None if args.embeddings is None else EmbeddingSequence(load_tensor(args.embeddings, 2))
    keys = None if args.keys is None else _load_keys(args.keys)
    result = prune(scores, cfg, embeddings=embeddings, keys=keys)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {"result": str(out_dir / "result.json"), "metrics": str(out_dir / "metrics.csv")}
    save_prune_result(result, out_dir / "result.json")
    if result.contextual_tokens is not None:
        save_tensor(result.contextual_tokens, out_dir / "contextual.npy")
        outputs["contextual"] = str(out_dir / "contextual.npy")
    if embeddings is not None:
        save_tensor(apply_selection(embeddings, result).data, out_dir / "pruned.npy")
        outputs["pruned"] = str(out_dir / "pruned.npy")

    s_eval = min(cfg.segments, scores.n_tokens)
    metrics = coverage_metrics(result, scores, s_eval)
    _write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, [_metrics_row(result, s_eval, metrics)])

    inputs = {k: getattr(args, k) for k in ("scores", "embeddings", "keys") if getattr(args, k) is not None}
    _write_manifest(out_dir / "manifest.json", "prune", args, inputs, outputs, cfg)
    log.info("%s kept %d of %d tokens", cfg.strategy.value, result.k_kept, result.n_tokens_in)
    return EXIT_OK


def _metrics_row(result, s_eval, metrics) -> list[Any]:
    return [
        result.strategy.value,
        result.n_tokens_in,
        result.k_requested,
        result.k_kept,
        s_eval,
        _fmt(metrics.attention_mass_captured),
        _fmt(metrics.segment_occupancy),
        metrics.max_temporal_gap,
    ]


def cmd_synth(args: argparse.Namespace) -> int:
    if args.out_dir is None:
        raise UsageError("--out-dir is required")
    try:
        spec = SynthSpec(
            n_tokens=args.n_tokens,
            n_heads=args.heads,
            n_hot=args.n_hot,
            cluster_width=args.cluster_width,
            concentration=args.concentration,
            noise_scale=args.noise_scale,
            seed=args.seed,
            dim=args.dim,
            background_width=args.background_width,
            cluster_separation=args.cluster_separation,
        )
    except InvariantError as exc:
        raise UsageError(str(exc)) from exc

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    attn = gen_attention(spec)
    scores = aggregate_scores(attn)
    embeddings = gen_embeddings(spec)
    qk = gen_qk(spec, embeddings, head_dim=args.head_dim)

    outputs = {
        name: str(out_dir / f"{name}.npy") for name in ("attention", "scores", "embeddings", "qk", "keys")
    }
    save_tensor(attn.weights, outputs["attention"])
    save_tensor(scores.scores[None, :], outputs["scores"])
    save_tensor(embeddings.data, outputs["embeddings"])
    save_tensor(qk.stacked(), outputs["qk"])
    save_tensor(qk.keys, outputs["keys"])

    is_hot = np.zeros(spec.n_tokens, dtype=np.int64)
    is_hot[hot_indices(spec)] = 1
    outputs["csv"] = str(out_dir / "scores.csv")
    _write_csv(out_dir / "scores.csv", ["index", "score", "max_normalized_score", "hot"], _scores_rows(scores, is_hot))
    outputs["spec"] = str(out_dir / "synth_spec.json")
    (out_dir / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_manifest(out_dir / "manifest.json", "synth", args, {}, outputs)
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    if args.result is None or args.scores is None:
        raise UsageError("--result and --scores are required")
    result = load_prune_result(args.result)
    scores = _load_scores(args.scores)
    s_eval = min(args.segments, scores.n_tokens)
    metrics = coverage_metrics(result, scores, s_eval)
    out = Path(args.out) if args.out else Path(args.result).with_name("metrics.csv")
    _write_csv(out, METRIC_COLUMNS, [_metrics_row(result, s_eval, metrics)])
    _write_manifest(
        out.with_suffix(".manifest.json"),
        "metrics",
        args,
        {"result": args.result, "scores": args.scores},
        {"metrics": str(out)},
    )
    return EXIT_OK


def _shape(args: argparse.Namespace) -> ModelShape:
    try:
        return ModelShape(args.layers, args.dim, args.heads, args.ffn_dim)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _token_grid(args: argparse.Namespace) -> list[int]:
    grid = list(args.n_tokens)
    if args.audio_seconds is not None:
        full = audio_token_count(args.audio_seconds)
        grid = [max(1, round(full * r / 100)) for r in (100, 50, 25, 10)]
    return grid


def _cost_row(n: int, shape: ModelShape, bench=None) -> list[Any]:
    est = estimate_cost(n, shape)
    return [
        n,
        est.prefill_flops,
        _fmt(est.attention_share),
        est.decode_flops_per_token,
        "" if bench is None else _fmt(bench.mean_ms),
        "" if bench is None else _fmt(bench.std_ms),
    ]


def cmd_estimate(args: argparse.Namespace) -> int:
    shape = _shape(args)
    rows = [_cost_row(n, shape) for n in _token_grid(args)]
    out = Path(args.out)
    _write_csv(out, COST_COLUMNS, rows)
    _write_manifest(out.with_suffix(".manifest.json"), "estimate", args, {}, {"csv": str(out)})
    for row in rows:
        log.info("n=%d prefill=%.3e FLOPs attention_share=%s decode=%.3e FLOPs/token", row[0], row[1], row[2], row[3])
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    shape = _shape(args)
    rows = []
    for n in _token_grid(args):
        stats = bench_prefill(n, shape, reps=args.reps, seed=args.seed, warmup=args.warmup)
        log.info("n=%d %.2f +- %.2f ms", n, stats.mean_ms, stats.std_ms)
        rows.append(_cost_row(n, shape, stats))
    out = Path(args.out)
    _write_csv(out, COST_COLUMNS, rows)
    _write_manifest(out.with_suffix(".manifest.json"), "bench", args, {}, {"csv": str(out)})
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_shape_flags(p: argparse.ArgumentParser) -> None:
    default = ModelShape()
    p.add_argument("--layers", type=int, default=default.n_layers)
    p.add_argument("--dim", type=int, default=default.model_dim)
    p.add_argument("--heads", type=int, default=default.n_heads)
    p.add_argument("--ffn-dim", type=int, default=default.ffn_dim)
    p.add_argument("--n-tokens", type=_int_list, default=[750, 375, 188, 75], help="comma-separated token counts")
    p.add_argument(
        "--audio-seconds",
        type=float,
        default=None,
        help="derive the grid (100/50/25/10%% of the token count) from an audio duration",
    )


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML file with flag defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="audioprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("aggregate", parents=[common], help="attention -> per-token scores")
    p.add_argument("--qk", help="stacked 2 x H x N x Dh queries/keys npy")
    p.add_argument("--attn", help="H x N x N attention npy")
    p.add_argument("--out", help="scores npy (1 x N); a .csv and .manifest.json are written beside it")
    p.add_argument("--sum-over", choices=["queries", "keys"], default="queries")
    p.set_defaults(func=cmd_aggregate)
    subs["aggregate"] = p

    p = sub.add_parser("prune", parents=[common], help="select tokens")
    p.add_argument("--scores")
    p.add_argument("--embeddings")
    p.add_argument("--keys", help="H x N x Dh keys npy, or a stacked qk npy")
    p.add_argument("--strategy", default=Strategy.TOP_K.value, help=", ".join(s.value for s in Strategy))
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--segments", type=int, default=10)
    p.add_argument("--ordering", default=Ordering.DESCENDING_ATTENTION.value)
    p.add_argument("--contextual-ratio", type=float, default=0.18)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--remainder", default=RemainderPolicy.STRICT.value)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_prune)
    subs["prune"] = p

    p = sub.add_parser("synth", parents=[common], help="generate synthetic attention and embeddings")
    default = SynthSpec()
    p.add_argument("--n-tokens", type=int, default=default.n_tokens)
    p.add_argument("--heads", type=int, default=default.n_heads)
    p.add_argument("--n-hot", type=int, default=default.n_hot)
    p.add_argument("--cluster-width", type=int, default=default.cluster_width)
    p.add_argument("--concentration", type=float, default=default.concentration)
    p.add_argument("--noise-scale", type=float, default=default.noise_scale)
    p.add_argument("--background-width", type=float, default=default.background_width)
    p.add_argument("--cluster-separation", type=float, default=default.cluster_separation)
    p.add_argument("--seed", type=int, default=default.seed)
    p.add_argument("--dim", type=int, default=default.dim)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_synth)
    subs["synth"] = p

    p = sub.add_parser("metrics", parents=[common], help="coverage metrics for a saved result")
    p.add_argument("--result")
    p.add_argument("--scores")
    p.add_argument("--segments", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    subs["metrics"] = p

    p = sub.add_parser("estimate", parents=[common], help="analytic prefill/decode FLOPs")
    _add_shape_flags(p)
    p.add_argument("--out", default="estimate.csv")
    p.set_defaults(func=cmd_estimate)
    subs["estimate"] = p

    p = sub.add_parser("bench", parents=[common], help="time one layer's prefill matmuls")
    _add_shape_flags(p)
    p.add_argument("--reps", type=_reps, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)
    subs["bench"] = p

    return parser, subs


def _config_defaults(path: str, command: str, sub: argparse.ArgumentParser) -> dict[str, str]:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    merged = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    merged.update(doc.get(command, {}))
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in merged.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"{path}: unknown setting {key!r} for {command}")
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        # Strings get the same type conversion as command-line values.
        defaults[dest] = value if isinstance(value, bool) else str(value)
    return defaults


def _parse(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = _config_defaults(args.config, args.command, subs[args.command])
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        subs[args.command].set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def run(args: argparse.Namespace) -> int:
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except UsageError as exc:
        print(f"audioprune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TensorStoreError, InvariantError, ValueError, OSError, MemoryError) as exc:
        print(f"audioprune {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"audioprune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args)


def replay(manifest_path: str, out: Optional[str] = None) -> int:
    """Re-run the command recorded in a manifest.

    ``out`` redirects the outputs: a directory for commands with ``--out-dir``,
    a file path for the others.
    """
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    parser, subs = build_parser()
    command = manifest["command"]
    args = argparse.Namespace(**manifest["args"])
    args.func = subs[command].get_default("func")
    args.config = None
    if out is not None:
        if hasattr(args, "out_dir"):
            args.out_dir = out
        else:
            args.out = out
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
