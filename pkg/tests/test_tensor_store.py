import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from audioprune.pruning import segmentwise_top_k, top_k
from audioprune.tensor_store import (
    MalformedHeaderError,
    MissingFileError,
    NonFiniteError,
    PayloadSizeError,
    UnwritablePathError,
    WrongRankError,
    load_prune_result,
    load_tensor,
    read_header,
    save_prune_result,
    save_tensor,
)
from audioprune.types import AttentionTensor, InvariantError, PruneConfig, PruneResult, TokenScores


def _raw_npy(header: str, payload: bytes, version=(1, 0)) -> bytes:
    # Hand-rolled writer so the reader is not only checked against numpy's.
    prefix_len = 10
    pad = 64 - (prefix_len + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    return b"\x93NUMPY" + bytes(version) + struct.pack("<H", len(header)) + header.encode("latin1") + payload


def test_load_hand_written_file(tmp_path):
    path = tmp_path / "m.npy"
    payload = struct.pack("<6f", 1, 2, 3, 4, 5, 6)
    path.write_bytes(_raw_npy("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }", payload))
    arr = load_tensor(path, 2)
    assert arr.dtype == np.float32
    np.testing.assert_array_equal(arr, [[1, 2, 3], [4, 5, 6]])


def test_load_float64(tmp_path):
    path = tmp_path / "m.npy"
    payload = struct.pack("<2d", 0.25, -3.5)
    path.write_bytes(_raw_npy("{'descr': '<f8', 'fortran_order': False, 'shape': (1, 2), }", payload))
    np.testing.assert_array_equal(load_tensor(path, 2), [[0.25, -3.5]])


def test_empty_file_is_malformed(tmp_path):
    path = tmp_path / "empty.npy"
    path.write_bytes(b"")
    with pytest.raises(MalformedHeaderError):
        load_tensor(path, 2)


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_tensor(tmp_path / "nope.npy", 2)


def test_wrong_rank(tmp_path):
    path = tmp_path / "cube.npy"
    save_tensor(np.zeros((2, 2, 2), dtype=np.float32), path)
    with pytest.raises(WrongRankError):
        load_tensor(path, 2)


def test_non_finite_rejected(tmp_path):
    path = tmp_path / "nan.npy"
    np.save(path, np.array([[1.0, np.nan]]))
    with pytest.raises(NonFiniteError):
        load_tensor(path, 2)
    with pytest.raises(NonFiniteError):
        save_tensor(np.array([[np.inf]]), tmp_path / "inf.npy")


@pytest.mark.parametrize(
    "header",
    [
        "{'descr': '<i4', 'fortran_order': False, 'shape': (1, 1), }",
        "{'descr': '>f4', 'fortran_order': False, 'shape': (1, 1), }",
        "{'descr': '<f4', 'fortran_order': True, 'shape': (1, 1), }",
        "{'descr': '<f4', 'shape': (1, 1), }",
        "not a dict",
    ],
)
def test_unsupported_headers(tmp_path, header):
    path = tmp_path / "bad.npy"
    path.write_bytes(_raw_npy(header, b"\x00" * 4))
    with pytest.raises(MalformedHeaderError):
        load_tensor(path, 2)


def test_version_2_rejected(tmp_path):
    path = tmp_path / "v2.npy"
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, np.zeros((1, 1), dtype=np.float32), version=(2, 0))
    with pytest.raises(MalformedHeaderError):
        load_tensor(path, 2)


@pytest.mark.parametrize("delta", [-4, 4])
def test_payload_size_mismatch_is_not_silently_fixed(tmp_path, delta):
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }"
    path = tmp_path / "short.npy"
    path.write_bytes(_raw_npy(header, b"\x00" * (16 + delta)))
    with pytest.raises(PayloadSizeError):
        load_tensor(path, 2)


def test_round_trip_scalar_matrix(tmp_path):
    path = tmp_path / "half.npy"
    save_tensor(np.array([[0.5]], dtype=np.float32), path)
    np.testing.assert_array_equal(load_tensor(path, 2), [[0.5]])


def test_round_trip_random_float32_is_bit_exact(tmp_path, rng):
    path = tmp_path / "r.npy"
    for _ in range(20):
        t = rng.standard_normal((4, 7)).astype(np.float32)
        save_tensor(t, path)
        back = load_tensor(path, 2)
        assert back.dtype == np.float32
        assert back.tobytes() == t.tobytes()


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(
        np.float32,
        hnp.array_shapes(min_dims=1, max_dims=4, max_side=6),
        elements=st.floats(width=32, allow_nan=False, allow_infinity=False),
    )
)
def test_round_trip_property(tmp_path_factory, t):
    path = tmp_path_factory.mktemp("rt") / "t.npy"
    save_tensor(t, path)
    back = load_tensor(path, t.ndim)
    assert back.shape == t.shape and back.tobytes() == t.tobytes()


def test_written_file_is_npy_1_0(tmp_path):
    path = tmp_path / "v.npy"
    save_tensor(np.ones((3, 2), dtype=np.float64), path)
    raw = path.read_bytes()
    assert raw[:6] == b"\x93NUMPY" and raw[6:8] == b"\x01\x00"
    assert read_header(path) == ((3, 2), np.dtype("<f8"))


def test_fortran_array_saved_c_ordered(tmp_path):
    t = np.asfortranarray(np.arange(6, dtype=np.float32).reshape(2, 3))
    save_tensor(t, tmp_path / "f.npy")
    np.testing.assert_array_equal(load_tensor(tmp_path / "f.npy", 2), t)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(UnwritablePathError):
        save_tensor(np.zeros((1, 1)), blocker / "t.npy")
    with pytest.raises(UnwritablePathError):
        save_tensor(np.zeros((1, 1)), tmp_path / "missing-dir" / "t.npy")


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_directory(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o555)
    try:
        with pytest.raises(UnwritablePathError):
            save_tensor(np.zeros((1, 1)), ro / "t.npy")
    finally:
        ro.chmod(0o755)


def test_attention_validation_row_sums():
    good = np.full((1, 4, 4), 0.25)
    AttentionTensor(good)
    bad = good.copy()
    bad[0, 2, 1] += 2e-5
    with pytest.raises(InvariantError):
        AttentionTensor(bad)
    nearly = good.copy()
    nearly[0, 2, 1] += 5e-6
    AttentionTensor(nearly)


def test_prune_result_json_top_k(tmp_path):
    result = top_k(TokenScores(np.array([0.1, 0.9, 0.5])), PruneConfig(k=2))
    save_prune_result(result, tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["kept_indices"] == [1, 2]
    assert doc["k_kept"] == 2
    assert set(doc) == {
        "strategy", "n_tokens_in", "k_requested", "k_kept", "segments", "ordering", "kept_indices",
        "contextual_count",
    }


def test_prune_result_json_segments(tmp_path, rng):
    scores = TokenScores(rng.random(100))
    result = segmentwise_top_k(scores, PruneConfig(strategy="segmentwise", k=30, segments=10))
    save_prune_result(result, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["segments"] == 10


def test_prune_result_round_trip_random(tmp_path, rng):
    for i in range(50):
        n = int(rng.integers(1, 200))
        k = int(rng.integers(1, n + 1))
        ordering = ["temporal", "descending-attention"][i % 2]
        scores = TokenScores(rng.random(n))
        result = top_k(scores, PruneConfig(k=k, ordering=ordering))
        path = tmp_path / f"r{i}.json"
        save_prune_result(result, path)
        back = load_prune_result(path)
        assert back.to_dict() == result.to_dict()


def test_prune_result_contextual_count_survives(tmp_path):
    result = PruneResult(
        kept_indices=[3, 0], n_tokens_in=5, strategy="visionzip", k_requested=3,
        ordering="descending-attention", contextual_tokens=np.ones((1, 4)),
    )
    save_prune_result(result, tmp_path / "v.json")
    assert load_prune_result(tmp_path / "v.json").contextual_count == 1
    restored = load_prune_result(tmp_path / "v.json", contextual_tokens=np.ones((1, 4)))
    np.testing.assert_array_equal(restored.contextual_tokens, np.ones((1, 4)))
    with pytest.raises(MalformedHeaderError):
        load_prune_result(tmp_path / "v.json", contextual_tokens=np.ones((2, 4)))


def test_prune_result_json_malformed(tmp_path):
    (tmp_path / "x.json").write_text("{")
    with pytest.raises(MalformedHeaderError):
        load_prune_result(tmp_path / "x.json")
    (tmp_path / "y.json").write_text('{"strategy": "topk"}')
    with pytest.raises(MalformedHeaderError):
        load_prune_result(tmp_path / "y.json")
