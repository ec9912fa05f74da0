"""Full pair pipeline: encoders -> frame-by-word attention -> visual graph -> relevance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import FbwTensors, fbw
from .encoders import (
    encode_feature_batch,
    encode_frames,
    encode_token_batch,
    encode_words,
    init_encoder_params,
)
from .graph import WcvgTrace, init_wcvg_params, run_wcvg
from .params import ParamStore
from .similarity import frame_relevance, lse_pool


@dataclass
class PairForward:
    fbw: FbwTensors
    trace: WcvgTrace
    V_T: T.Tensor
    r: T.Tensor  # per-frame relevance, (..., N)


def init_params(cfg, seed=0):
    store = ParamStore(rng_seed=seed, dtype=np.dtype(cfg.dtype))
    init_encoder_params(store, cfg)
    init_wcvg_params(store, cfg)
    return store


def forward_pair(V0, W, params, cfg):
    """Run one or many (video, query) pairs; leading dims of V0 and W broadcast."""
    att = fbw(V0, W)
    V_T, trace = run_wcvg(V0, W, att.f, params, cfg.T)
    return PairForward(fbw=att, trace=trace, V_T=V_T, r=frame_relevance(V_T, att.l))


def video_query_similarity(video, query, params, cfg):
    """Whole-video LSE similarity of one pair (a scalar Tensor)."""
    V0 = encode_frames(video, params, cfg)
    W = encode_words(query, params, cfg)
    return lse_pool(forward_pair(V0, W, params, cfg).r, cfg.lse_lambda)


def similarity_grid(videos, queries, params, cfg):
    """S[v, q] for every video x query in the batch, as a (B_v, B_q) Tensor.

    Equal-length inputs are scored in a single broadcast pass; otherwise
    pairs are scored one at a time.
    """
    lam = cfg.lse_lambda
    same_n = len({v.n_frames for v in videos}) == 1
    same_q = len({len(q.tokens) for q in queries}) == 1
    if same_n and same_q:
        V0 = encode_feature_batch(np.stack([v.features for v in videos]), params, cfg)
        W = encode_token_batch(
            np.array([q.tokens for q in queries]), params, cfg, [q.query_id for q in queries]
        )
        V0 = T.reshape(V0, (V0.shape[0], 1) + V0.shape[1:])
        return lse_pool(forward_pair(V0, W, params, cfg).r, lam)
    Vs = [encode_frames(v, params, cfg) for v in videos]
    Ws = [encode_words(q, params, cfg) for q in queries]
    rows = [T.stack([lse_pool(forward_pair(V, W, params, cfg).r, lam) for W in Ws]) for V in Vs]
    return T.stack(rows)


def pair_forward(video, query, params, cfg):
    return forward_pair(encode_frames(video, params, cfg), encode_words(query, params, cfg), params, cfg)
