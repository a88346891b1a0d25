"""npy v1.0 tensor I/O and PruneResult JSON serialization.

Only little-endian float32/float64, C-ordered payloads are accepted. The
reader refuses anything it would otherwise have to truncate, pad or
reinterpret.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib import format as npy_format

from .types import Ordering, PruneResult, Strategy

PathLike = Union[str, os.PathLike]

_ACCEPTED_DESCR = ("<f4", "<f8")

PRUNE_RESULT_FIELDS = (
    "strategy",
    "n_tokens_in",
    "k_requested",
    "k_kept",
    "segments",
    "ordering",
    "kept_indices",
    "contextual_count",
)


class TensorStoreError(Exception):
    """Base class for every load/save failure."""


class MissingFileError(TensorStoreError, FileNotFoundError):
    pass


class MalformedHeaderError(TensorStoreError):
    pass


class PayloadSizeError(MalformedHeaderError):
    """Payload byte count disagrees with the header shape."""


class WrongRankError(TensorStoreError):
    pass


class NonFiniteError(TensorStoreError):
    pass


class UnwritablePathError(TensorStoreError):
    pass


def read_header(path: PathLike) -> tuple[tuple[int, ...], np.dtype]:
    """Return ``(shape, dtype)`` of an npy file without reading its payload."""
    with _open_for_read(path) as fh:
        shape, dtype = _read_header(fh, path)
    return shape, dtype


def load_tensor(path: PathLike, expected_rank: int) -> np.ndarray:
    """Load a finite float tensor of rank ``expected_rank`` from an npy v1.0 file."""
    with _open_for_read(path) as fh:
        shape, dtype = _read_header(fh, path)
        if len(shape) != expected_rank:
            raise WrongRankError(f"{path}: expected rank {expected_rank}, file has shape {shape}")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = fh.read()
    if len(payload) != expected:
        raise PayloadSizeError(f"{path}: header promises {expected} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{path}: tensor contains NaN or Inf")
    return arr


def save_tensor(tensor: np.ndarray, path: PathLike) -> None:
    arr = np.asarray(tensor)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to save a tensor with NaN or Inf")
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    try:
        with open(path, "wb") as fh:
            npy_format.write_array(fh, arr, version=(1, 0), allow_pickle=False)
    except OSError as exc:
        raise UnwritablePathError(f"cannot write {path}: {exc}") from exc


def save_prune_result(result: PruneResult, path: PathLike) -> None:
    text = json.dumps(result.to_dict(), indent=2) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise UnwritablePathError(f"cannot write {path}: {exc}") from exc


def load_prune_result(path: PathLike, contextual_tokens: Optional[np.ndarray] = None) -> PruneResult:
    """Read a PruneResult JSON document.

    Merged contextual rows are not part of the JSON. Pass them in to get a
    result that ``apply_selection`` can materialize; otherwise a zero-width
    placeholder keeps ``contextual_count`` intact.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise MissingFileError(str(path)) from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: invalid JSON: {exc}") from exc
    missing = [f for f in PRUNE_RESULT_FIELDS if f not in doc]
    if missing:
        raise MalformedHeaderError(f"{path}: missing fields {missing}")

    n_ctx = int(doc["contextual_count"])
    if contextual_tokens is None and n_ctx:
        contextual_tokens = np.empty((n_ctx, 0))
    elif contextual_tokens is not None and contextual_tokens.shape[0] != n_ctx:
        raise MalformedHeaderError(
            f"{path}: contextual_count={n_ctx} but {contextual_tokens.shape[0]} rows supplied"
        )
    result = PruneResult(
        kept_indices=np.asarray(doc["kept_indices"], dtype=np.int64),
        n_tokens_in=int(doc["n_tokens_in"]),
        strategy=Strategy(doc["strategy"]),
        k_requested=int(doc["k_requested"]),
        ordering=Ordering(doc["ordering"]),
        segments=doc["segments"],
        contextual_tokens=contextual_tokens,
    )
    if result.k_kept != doc["k_kept"]:
        raise MalformedHeaderError(f"{path}: k_kept={doc['k_kept']} disagrees with the kept indices")
    return result


def _open_for_read(path: PathLike):
    try:
        return open(path, "rb")
    except FileNotFoundError as exc:
        raise MissingFileError(f"no such file: {path}") from exc
    except IsADirectoryError as exc:
        raise MissingFileError(f"not a file: {path}") from exc


def _read_header(fh, path: PathLike) -> tuple[tuple[int, ...], np.dtype]:
    try:
        version = npy_format.read_magic(fh)
        if version != (1, 0):
            raise MalformedHeaderError(f"{path}: npy version {version} unsupported, need 1.0")
        shape, fortran_order, dtype = npy_format.read_array_header_1_0(fh)
    except MalformedHeaderError:
        raise
    except (ValueError, EOFError, SyntaxError) as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from exc
    if fortran_order:
        raise MalformedHeaderError(f"{path}: Fortran-ordered payloads are not accepted")
    if dtype.str not in _ACCEPTED_DESCR:
        raise MalformedHeaderError(f"{path}: dtype {dtype.str} not in {_ACCEPTED_DESCR}")
    return tuple(int(d) for d in shape), dtype
