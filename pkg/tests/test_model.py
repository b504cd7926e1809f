import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caml.gradcheck import run_gradcheck
from caml.model import (
    CamlParams,
    DescEmbedderParams,
    ModelError,
    ModelKind,
    attention_forward,
    backward,
    classify,
    conv_forward,
    desc_embed,
    dropout_mask,
    forward,
    init_params,
    maxpool_forward,
    pad_widths,
    predict,
)
from caml.numerics import make_rng


def tiny(seed=0, V=12, d_e=4, d_c=3, k=3, L=5, desc=False):
    rng = make_rng(seed, "test")
    return init_params(rng.normal(size=(V, d_e)), L, d_c, k, rng, with_desc=desc)


# -- convolution ------------------------------------------------------------------

def test_zero_filters_give_zero_activations():
    emb = np.random.default_rng(0).normal(size=(6, 3))
    H, _ = conv_forward([1, 2, 5, 3], emb, np.zeros((3, 3, 2)), np.zeros(2))
    assert H.shape == (2, 4) and np.all(H == 0)


def test_single_token_hand_convolution():
    emb = np.array([[0.0], [2.0]])
    H, _ = conv_forward([1], emb, np.ones((3, 1, 1)), np.zeros(1))
    # both neighbours are zero padding, so only the centre tap sees x = 2
    assert H[0, 0] == math.tanh(2.0)


@pytest.mark.parametrize("k, left, right", [(1, 0, 0), (3, 1, 1), (4, 1, 2), (10, 4, 5)])
def test_pad_widths(k, left, right):
    assert pad_widths(k) == (left, right)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 7])
def test_conv_keeps_length(k):
    emb = np.random.default_rng(1).normal(size=(9, 2))
    H, _ = conv_forward([1, 2, 3, 4, 5], emb, np.ones((k, 2, 3)), np.zeros(3))
    assert H.shape == (3, 5)


def test_conv_window_alignment():
    # position n sees tokens n-left .. n-left+k-1: check with one-hot filter taps
    emb = np.arange(8.0)[:, None] / 10
    ids = [1, 2, 3, 4, 5]
    k = 4
    left, _ = pad_widths(k)
    for tap in range(k):
        W = np.zeros((k, 1, 1))
        W[tap] = 1.0
        H, _ = conv_forward(ids, emb, W, np.zeros(1))
        for n in range(len(ids)):
            src = n - left + tap
            expected = math.tanh(emb[ids[src], 0]) if 0 <= src < len(ids) else 0.0
            assert H[0, n] == pytest.approx(expected, abs=1e-15)


def test_empty_document_rejected():
    with pytest.raises(ModelError):
        conv_forward([], np.ones((3, 2)), np.ones((1, 2, 1)), np.zeros(1))


def test_dropout_mask():
    assert dropout_mask(make_rng(0), 4, 3, 0.0) is None
    m = dropout_mask(make_rng(0), 200, 50, 0.2)
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.8}
    assert abs(m.mean() - 1.0) < 0.02


# -- attention, pooling, classification -----------------------------------------

def test_zero_attention_is_uniform_mean():
    H = np.random.default_rng(2).uniform(-1, 1, size=(3, 5))
    alpha, V = attention_forward(H, np.zeros((2, 3)))
    np.testing.assert_allclose(alpha, 0.2)
    np.testing.assert_allclose(V, np.tile(H.mean(axis=1), (2, 1)), atol=1e-15)


def test_single_position_attention():
    H = np.array([[0.3], [-0.2]])
    alpha, V = attention_forward(H, np.random.default_rng(0).normal(size=(4, 2)))
    np.testing.assert_array_equal(alpha, np.ones((4, 1)))
    np.testing.assert_allclose(V, np.tile(H[:, 0], (4, 1)))


def test_attention_hand_softmax():
    alpha, V = attention_forward(np.eye(2), np.array([[10.0, 0.0]]))
    e = math.exp(10)
    np.testing.assert_allclose(alpha[0], [e / (e + 1), 1 / (e + 1)], rtol=1e-14)
    np.testing.assert_allclose(V[0], [e / (e + 1), 1 / (e + 1)], rtol=1e-14)


def test_maxpool_examples():
    v, a = maxpool_forward(np.array([[1.0, 3.0, 2.0]]))
    assert v.tolist() == [3.0] and a.tolist() == [1]
    v, a = maxpool_forward(np.array([[2.0, 2.0]]))
    assert a.tolist() == [0]
    v, a = maxpool_forward(np.array([[0.4], [-0.1]]))
    assert v.tolist() == [0.4, -0.1]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_maxpool_dominates(d_c, N, seed):
    H = np.random.default_rng(seed).uniform(-1, 1, size=(d_c, N))
    v, a = maxpool_forward(H)
    assert np.all(v[:, None] >= H)
    np.testing.assert_array_equal(v, H[np.arange(d_c), a])


def test_classify_examples():
    np.testing.assert_array_equal(classify(np.ones((3, 2)), np.zeros((3, 2)), np.zeros(3)), [0.5] * 3)
    yhat = classify(np.array([[1.0, 0.0]]), np.array([[math.log(3), 5.0]]), np.zeros(1))
    assert yhat[0] == pytest.approx(0.75, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 15))
def test_attention_is_convex_combination(seed, N):
    p = tiny(seed)
    ids = make_rng(seed, "ids").integers(0, 12, N)
    t = forward(p, ids, ModelKind.CAML)
    np.testing.assert_allclose(t.alpha.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(t.alpha >= 0)
    lo, hi = t.H.min(axis=1), t.H.max(axis=1)
    assert np.all(t.V >= lo - 1e-12) and np.all(t.V <= hi + 1e-12)


def test_single_position_caml_equals_cnn_vector():
    p = tiny(3)
    caml = forward(p, [4], ModelKind.CAML)
    cnn = forward(p, [4], ModelKind.CNN)
    np.testing.assert_allclose(caml.V, np.tile(cnn.V, (p.n_labels, 1)), atol=1e-15)


def test_label_permutation_equivariance():
    p = tiny(4)
    perm = np.array([3, 0, 4, 1, 2])
    q = CamlParams(p.embeddings, p.conv_weight, p.conv_bias, p.attention[perm], p.out_weight[perm],
                   p.out_bias[perm])
    ids = [2, 5, 7, 1, 9, 3]
    a, b = forward(p, ids), forward(q, ids)
    np.testing.assert_allclose(b.alpha, a.alpha[perm], atol=1e-15)
    np.testing.assert_allclose(b.V, a.V[perm], atol=1e-15)
    np.testing.assert_allclose(b.yhat, a.yhat[perm], atol=1e-15)


def test_predict_shape():
    p = tiny()
    assert predict(p, [[1, 2], [3, 4, 5]]).shape == (2, 5)
    assert predict(p, []).shape == (0, 5)


# -- description embedder ---------------------------------------------------------

def test_zero_description_filters():
    desc = DescEmbedderParams(np.zeros((3, 2, 4)), np.zeros(4))
    t = desc_embed([1, 2], desc, np.ones((3, 2)))
    assert t.z.shape == (4,) and np.all(t.z == 0)


def test_description_single_token_identity_filter():
    emb = np.array([[0.0], [0.7]])
    desc = DescEmbedderParams(np.array([[[1.5]]]), np.zeros(1))
    assert desc_embed([1], desc, emb).z[0] == math.tanh(1.5 * 0.7)


def test_description_errors():
    p = tiny(desc=True)
    with pytest.raises(ModelError):
        desc_embed([], p.desc, p.embeddings)
    with pytest.raises(ModelError):
        desc_embed([1], None, p.embeddings)


# -- gradients ------------------------------------------------------------------

def test_output_bias_gradient_is_residual():
    p = tiny(5)
    y = np.array([1.0, 0, 0, 1, 0])
    t = forward(p, [1, 2, 3])
    g = backward(t, p, y)
    np.testing.assert_array_equal(g["out_bias"], t.yhat - y)


def test_pad_row_gradient_is_zero():
    p = tiny(6)
    g = backward(forward(p, [0, 0, 3, 4, 0]), p, np.ones(5), rho=0.1)
    assert np.all(g["embeddings"][0] == 0)


@pytest.mark.parametrize("kind", ["caml", "cnn"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(kind, seed):
    report = run_gradcheck(seed=seed, kind=kind)
    assert report.passed, report.lines()
    assert set(report.max_rel_error) == {"embeddings", "conv_weight", "conv_bias", "attention", "out_weight",
                                         "out_bias", "desc.conv_weight", "desc.conv_bias"}


@pytest.mark.parametrize("k", [1, 2, 4])
def test_gradients_even_and_unit_filters(k):
    assert run_gradcheck(seed=7, k=k, n_tokens=6).passed


def test_gradients_without_regularizers():
    report = run_gradcheck(seed=3, lam=0.0, rho=0.0)
    assert report.passed and "desc.conv_weight" not in report.max_rel_error


def test_injected_fault_detected():
    assert run_gradcheck(inject_fault=True).failed == ["conv_weight"]


def test_params_roundtrip_and_validate():
    p = tiny(desc=True)
    q = CamlParams.from_tensors(p.tensors())
    for name, arr in p.tensors().items():
        np.testing.assert_array_equal(arr, q.tensors()[name])
    bad = dict(p.tensors())
    bad["attention"] = np.zeros((2, 2))
    with pytest.raises(ModelError):
        CamlParams.from_tensors(bad)
