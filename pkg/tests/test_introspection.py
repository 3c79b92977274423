import numpy as np
import pytest
import torch

from rxnlm.introspection import (EmbeddingPCA, embedding_matrix, export_attention, nearest_tokens, pca_project,
                                 sentence_vector, token_distance)
from rxnlm.model import ModelConfig, Seq2SeqTransformer


@pytest.fixture(scope="module")
def model():
    return Seq2SeqTransformer(ModelConfig(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
                                          max_length=64))


def test_token_distance_is_a_metric(model):
    assert token_distance("C", "C", model) == 0.0
    assert token_distance("C", "N", model) == pytest.approx(token_distance("N", "C", model))
    w = embedding_matrix(model)
    assert token_distance(118, 129, model) == pytest.approx(np.linalg.norm(w[118] - w[129]))
    assert nearest_tokens("C", model, k=3)[0][1] <= nearest_tokens("C", model, k=3)[-1][1]


def test_pca_recovers_a_known_axis():
    rng = np.random.default_rng(0)
    x = np.outer(rng.normal(size=200), [3.0, 4.0, 0.0]) / 5 + rng.normal(scale=0.01, size=(200, 3))
    res = pca_project(x, 2)
    assert np.allclose(np.abs(res.components[0]), [0.6, 0.8, 0.0], atol=0.01)
    assert res.explained_variance_ratio[0] > 0.99
    assert res.components[0][np.argmax(np.abs(res.components[0]))] > 0
    assert np.allclose(pca_project(-x, 2).components, res.components)  # sign convention is data-independent


def test_pca_estimator(model):
    w = embedding_matrix(model)
    est = EmbeddingPCA(n_components=3).fit(w)
    assert np.allclose(est.transform(w), pca_project(w, 3).coords)
    with pytest.raises(ValueError):
        pca_project(w, 0)


def test_attention_export_labels_and_rows(model):
    for kind, shape in (("encoder", (7, 7)), ("decoder", (6, 6)), ("cross", (6, 7))):
        amap = export_attention("CC>>O", model, kind=kind)
        assert amap.matrix.shape == shape
        assert np.allclose(amap.matrix.sum(1), 1.0, atol=1e-6)
    tsv = export_attention("CC>>O", model, head=0).to_tsv().splitlines()
    assert tsv[0].split("\t") == ["query", "<cls>", "C", "C", ">", ">", "O", "<end>"]
    assert len(tsv) == 8


def test_sentence_vector_pooling(model):
    end = sentence_vector("CC>>O", model, "end")
    mean = sentence_vector("CC>>O", model, "mean")
    assert end.shape == mean.shape == (16,) and not np.allclose(end, mean)
    with pytest.raises(ValueError):
        sentence_vector("CC>>O", model, "max")
