import numpy as np
import pytest

from audioprune.attention import aggregate_scores
from audioprune.synthgen import (
    InfeasibleSpecError,
    SynthSpec,
    gen_attention,
    gen_embeddings,
    gen_qk,
    hot_clusters,
    hot_indices,
)
from audioprune.types import AttentionTensor


def test_uniform_limit():
    spec = SynthSpec(n_tokens=64, n_hot=0, noise_scale=0.0, dim=8)
    scores = aggregate_scores(gen_attention(spec)).scores
    np.testing.assert_allclose(scores, 1.0, rtol=0.05)


def test_uniform_limit_with_tiny_concentration():
    # hot tokens take almost nothing, cold ones share the rest evenly
    spec = SynthSpec(n_tokens=100, n_hot=10, concentration=1e-9, noise_scale=0.0, dim=8)
    scores = aggregate_scores(gen_attention(spec)).scores
    cold = np.setdiff1d(np.arange(100), hot_indices(spec))
    np.testing.assert_allclose(scores[cold], 100 / 90, rtol=1e-6)


def test_hot_tokens_get_their_mass():
    for seed in range(5):
        spec = SynthSpec(n_tokens=100, n_hot=10, concentration=0.8, seed=seed, dim=8)
        scores = aggregate_scores(gen_attention(spec)).scores
        assert scores[hot_indices(spec)].sum() >= 0.8 * 100 * (1 - 1e-3)
        assert abs(scores.sum() - 100) < 1e-4


def test_determinism():
    spec = SynthSpec(n_tokens=80, n_hot=8, seed=42, dim=16)
    assert gen_attention(spec).weights.tobytes() == gen_attention(spec).weights.tobytes()
    assert gen_embeddings(spec).data.tobytes() == gen_embeddings(spec).data.tobytes()
    other = SynthSpec(n_tokens=80, n_hot=8, seed=43, dim=16)
    assert gen_attention(spec).weights.tobytes() != gen_attention(other).weights.tobytes()


def test_clusters_are_contiguous_separated_and_in_range():
    for seed in range(200):
        spec = SynthSpec(n_tokens=60, n_hot=17, cluster_width=4, seed=seed, dim=4)
        clusters = hot_clusters(spec)
        assert [c.size for c in clusters] == [4, 4, 4, 4, 1]
        for c in clusters:
            assert np.all(np.diff(c) == 1)
        for a, b in zip(clusters, clusters[1:]):
            assert b[0] - a[-1] >= 2
        assert clusters[0][0] >= 0 and clusters[-1][-1] < 60


def test_tight_packing_is_feasible():
    # 3 clusters of 2 with 2 separators fill 8 tokens exactly
    spec = SynthSpec(n_tokens=8, n_hot=6, cluster_width=2, dim=4)
    assert hot_indices(spec).tolist() == [0, 1, 3, 4, 6, 7]
    gen_attention(spec)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_tokens=10, n_hot=11),
        dict(n_tokens=8, n_hot=6, cluster_width=1),
        dict(n_tokens=10, n_hot=2, concentration=1.0),
        dict(n_tokens=10, n_hot=2, cluster_width=0),
    ],
)
def test_infeasible_specs(kwargs):
    with pytest.raises(InfeasibleSpecError):
        SynthSpec(dim=4, **kwargs)


def test_every_token_hot():
    spec = SynthSpec(n_tokens=5, n_hot=5, cluster_width=5, dim=4)
    AttentionTensor(gen_attention(spec).weights)


def test_embedding_shape():
    spec = SynthSpec(n_tokens=750, dim=1280, n_heads=1)
    assert gen_embeddings(spec).data.shape == (750, 1280)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_same_cluster_more_similar_than_cross_cluster():
    for seed in range(100):
        spec = SynthSpec(n_tokens=120, n_hot=12, cluster_width=4, seed=seed, dim=64)
        emb = gen_embeddings(spec).data.astype(np.float64)
        clusters = hot_clusters(spec)
        within = _cos(emb[clusters[0][0]], emb[clusters[0][1]])
        cross = np.mean([_cos(emb[a], emb[b]) for a in clusters[0] for b in clusters[1]])
        assert within > cross


def test_qk_shapes_and_determinism():
    spec = SynthSpec(n_tokens=30, n_hot=3, dim=16, n_heads=2)
    emb = gen_embeddings(spec)
    qk = gen_qk(spec, emb, head_dim=8)
    assert qk.keys.shape == (2, 30, 8)
    assert gen_qk(spec, emb, head_dim=8).keys.tobytes() == qk.keys.tobytes()
