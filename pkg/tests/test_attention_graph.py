import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentgraph import tensor as T
from momentgraph.attention import (
    fbw,
    fbw_similarity,
    frame_specific_sentence,
    word_specific_video,
)
from momentgraph.config import ModelConfig
from momentgraph.graph import (
    build_visual_semantic_nodes,
    init_wcvg_params,
    message_passing_step,
    run_wcvg,
)
from momentgraph.gradcheck import finite_diff_check
from momentgraph.params import ParamStore

from oracles import cosine, cosine_grid, softmax_rows

H = 4


def wcvg_params(T_iter=3, tied=True, seed=0, hidden=H):
    cfg = ModelConfig(vocab_size=3, feature_dim=2, hidden=hidden, pe_dim=2, T=T_iter,
                      tied_iterations=tied)
    store = ParamStore(rng_seed=seed)
    init_wcvg_params(store, cfg)
    return store


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# --- frame-by-word similarity ------------------------------------------------------


def test_fbw_self_similarity_diagonal():
    V = rand(3, 5)
    s = fbw_similarity(T.Tensor(V), T.Tensor(V)).values
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-6)


def test_fbw_orthogonal_rows():
    s = fbw_similarity(T.Tensor(np.eye(3)[:2]), T.Tensor(np.eye(3)[2:])).values
    np.testing.assert_array_equal(s, 0.0)


def test_fbw_entries_match_scalar_cosine():
    V, W = rand(2, 6, seed=1), rand(3, 6, seed=2)
    s = fbw_similarity(T.Tensor(V), T.Tensor(W)).values
    for i in range(2):
        for j in range(3):
            assert abs(s[i, j] - cosine(V[i], W[j])) < 1e-12


# --- frame-specific sentence -------------------------------------------------------


def test_single_word_sentence_is_that_word():
    W = rand(1, 4)
    l = frame_specific_sentence(T.Tensor(rand(5, 1)), T.Tensor(W)).values
    np.testing.assert_allclose(l, np.repeat(W, 5, axis=0), atol=1e-15)


def test_uniform_row_gives_word_mean():
    W = rand(3, 4)
    l = frame_specific_sentence(T.Tensor(np.full((2, 3), 0.3)), T.Tensor(W)).values
    np.testing.assert_allclose(l, np.tile(W.mean(axis=0), (2, 1)), atol=1e-15)


def test_ln2_row_weights():
    l = frame_specific_sentence(T.Tensor([[math.log(2), 0.0]]), T.Tensor(np.eye(2))).values
    np.testing.assert_allclose(l[0], [2 / 3, 1 / 3], atol=1e-15)


# --- word-specific video -----------------------------------------------------------


def test_single_frame_video_is_that_frame():
    V = rand(1, 4)
    f = word_specific_video(T.Tensor(rand(1, 3)), T.Tensor(V)).values
    np.testing.assert_allclose(f, np.repeat(V, 3, axis=0), atol=1e-15)


def test_uniform_column_gives_frame_mean():
    V = rand(4, 3)
    f = word_specific_video(T.Tensor(np.full((4, 2), -0.2)), T.Tensor(V)).values
    np.testing.assert_allclose(f, np.tile(V.mean(axis=0), (2, 1)), atol=1e-15)


def test_word_specific_video_two_line_oracle():
    s, V = rand(3, 2, seed=3), rand(3, 5, seed=4)
    a = np.exp(s) / np.exp(s).sum(axis=0)
    expected = a.T @ V
    np.testing.assert_allclose(word_specific_video(T.Tensor(s), T.Tensor(V)).values, expected,
                               rtol=0, atol=1e-12)


# --- invariants --------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_permutation_equivariance(n, q, seed):
    rng = np.random.default_rng(seed)
    V, W = rng.normal(size=(n, 3)), rng.normal(size=(q, 3))
    pf, pw = rng.permutation(n), rng.permutation(q)
    base = fbw(T.Tensor(V), T.Tensor(W))
    perm = fbw(T.Tensor(V[pf]), T.Tensor(W[pw]))
    # frames reordered: l follows the frames, f is unchanged up to word order
    np.testing.assert_allclose(perm.l.values, base.l.values[pf], atol=1e-12)
    np.testing.assert_allclose(perm.f.values, base.f.values[pw], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_duplicate_word_keeps_convex_combination(n, q, seed):
    rng = np.random.default_rng(seed)
    V, W = rng.normal(size=(n, 3)), rng.normal(size=(q, 3))
    W2 = np.vstack([W, W[:1]])
    out = fbw(T.Tensor(V), T.Tensor(W2))
    a = out.a_word.values
    assert (a >= 0).all()
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.l.values, a @ W2, atol=1e-12)


def test_fbw_gradients_on_3x2():
    store = ParamStore()
    store.add("V", rand(3, 4, seed=5))
    store.add("W", rand(2, 4, seed=6))
    wl, wf = rand(3, 4, seed=7), rand(2, 4, seed=8)

    def loss(p):
        out = fbw(p["V"], p["W"])
        return T.add(T.reduce_sum(T.mul(out.l, wl)), T.reduce_sum(T.mul(out.f, wf)))

    report = finite_diff_check(loss, store, tol=1e-6)
    assert report.passed, report.table()


# --- visual-semantic nodes -----------------------------------------------------------


def test_zero_w1_gives_zero_nodes():
    p = wcvg_params()
    p["wcvg.W1"].values[...] = 0.0
    p["wcvg.b1"].values[...] = 0.0
    out = build_visual_semantic_nodes(T.Tensor(rand(2, H)), T.Tensor(rand(2, H)), p)
    np.testing.assert_array_equal(out.values, 0.0)


def test_identity_w1_passes_nonnegative_words():
    p = wcvg_params()
    p["wcvg.W1"].values[...] = np.vstack([np.eye(H), np.zeros((H, H))])
    p["wcvg.b1"].values[...] = 0.0
    W = np.abs(rand(3, H))
    out = build_visual_semantic_nodes(T.Tensor(W), T.Tensor(rand(3, H)), p)
    np.testing.assert_array_equal(out.values, W)


def test_w1_gradient_through_downstream_loss():
    p = wcvg_params(T_iter=2)
    V0, W = T.Tensor(rand(4, H, seed=1)), T.Tensor(rand(3, H, seed=2))
    att = fbw(V0, W)
    weights = rand(4, H, seed=3)

    def loss(params):
        V_T, _ = run_wcvg(V0, W, att.f, params, 2)
        return T.reduce_sum(T.mul(V_T, weights))

    report = finite_diff_check(loss, p, names=["wcvg.W1", "wcvg.b1"])
    assert report.passed, report.table()


# --- message passing -------------------------------------------------------------------


def test_identity_w2_is_passthrough():
    p = wcvg_params()
    p["wcvg.W2"].values[...] = np.vstack([np.eye(H), np.zeros((H, H))])
    p["wcvg.b2"].values[...] = 0.0
    V = rand(3, H)
    out = message_passing_step(T.Tensor(V), T.Tensor(rand(2, H)), p)
    np.testing.assert_array_equal(out.values, V)


def test_single_word_message_is_that_node():
    p = wcvg_params()
    w = rand(1, H)
    p["wcvg.W2"].values[...] = np.vstack([np.zeros((H, H)), np.eye(H)])
    p["wcvg.b2"].values[...] = 0.0
    out = message_passing_step(T.Tensor(rand(5, H)), T.Tensor(w), p)
    np.testing.assert_allclose(out.values, np.repeat(w, 5, axis=0), atol=1e-15)


def test_message_step_hand_oracle():
    p = wcvg_params(seed=4)
    V, w = rand(3, H, seed=5), rand(2, H, seed=6)
    W2, b2 = p["wcvg.W2"].values, p["wcvg.b2"].values
    s = cosine_grid(V, w)
    expected = []
    for i in range(3):
        e = [math.exp(s[i, j]) for j in range(2)]
        msg = (e[0] * w[0] + e[1] * w[1]) / (e[0] + e[1])
        expected.append(np.concatenate([V[i], msg]) @ W2 + b2)
    out = message_passing_step(T.Tensor(V), T.Tensor(w), p).values
    np.testing.assert_allclose(out, np.array(expected), rtol=0, atol=1e-10)


def test_messages_are_convex_combinations():
    p = wcvg_params()
    V, w = T.Tensor(rand(4, H)), T.Tensor(rand(3, H))
    from momentgraph.graph import WcvgTrace

    trace = WcvgTrace()
    message_passing_step(V, w, p, trace=trace)
    a = trace.a_l[0].values
    assert (a >= 0).all()
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


# --- run_wcvg ----------------------------------------------------------------------------


def test_zero_iterations_return_input():
    p = wcvg_params(T_iter=0)
    V0 = T.Tensor(rand(3, H))
    V_T, trace = run_wcvg(V0, T.Tensor(rand(2, H)), T.Tensor(rand(2, H)), p, 0)
    assert V_T is V0 and len(trace) == 0


def test_one_iteration_matches_manual_step():
    p = wcvg_params(T_iter=1)
    V0, W, f = T.Tensor(rand(3, H, seed=1)), T.Tensor(rand(2, H, seed=2)), T.Tensor(rand(2, H, seed=3))
    V_T, _ = run_wcvg(V0, W, f, p, 1)
    manual = message_passing_step(V0, build_visual_semantic_nodes(W, f, p), p)
    np.testing.assert_array_equal(V_T.values, manual.values)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_three_iteration_trace_rows_normalized(n, q, seed):
    p = wcvg_params(T_iter=3, seed=seed % 7)
    rng = np.random.default_rng(seed)
    _, trace = run_wcvg(T.Tensor(rng.normal(size=(n, H))), T.Tensor(rng.normal(size=(q, H))),
                        T.Tensor(rng.normal(size=(q, H))), p, 3)
    assert len(trace.s_prime) == 3
    for t in range(3):
        np.testing.assert_allclose(trace.a_l[t].values.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(trace.a_frame[t].values.sum(axis=0), 1.0, atol=1e-6)


def test_untied_iterations_use_separate_weights():
    p = wcvg_params(T_iter=2, tied=False)
    assert {"wcvg.W2.0", "wcvg.W2.1"} <= set(p.names()) and "wcvg.W2" not in p
    V0, W, f = T.Tensor(rand(3, H)), T.Tensor(rand(2, H)), T.Tensor(rand(2, H))
    before, _ = run_wcvg(V0, W, f, p, 2)
    p["wcvg.W2.1"].values[...] *= 2.0
    after, _ = run_wcvg(V0, W, f, p, 2)
    assert not np.allclose(before.values, after.values)


def test_frame_permutation_equivariance_end_to_end():
    p = wcvg_params(T_iter=3, seed=2)
    V0, W = rand(5, H, seed=7), rand(3, H, seed=8)
    perm = np.array([3, 0, 4, 1, 2])

    def run(V):
        att = fbw(T.Tensor(V), T.Tensor(W))
        return run_wcvg(T.Tensor(V), T.Tensor(W), att.f, p, 3)[0].values

    np.testing.assert_allclose(run(V0[perm]), run(V0)[perm], atol=1e-12)


def test_softmax_oracle_agrees_with_rows():
    s = rand(3, 4)
    np.testing.assert_allclose(T.row_softmax(T.Tensor(s), "rows").values, softmax_rows(s), atol=1e-15)
