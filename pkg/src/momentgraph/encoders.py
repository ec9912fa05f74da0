"""Word and frame encoders.

Words go through an embedding table and a single-layer GRU; frames go
through FC + ReLU and get a fixed position code appended (sinusoidal, or
the two temporal-endpoint features in the ablation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .params import ParamStore, read_arrays

GRU_GATES = ("z", "r", "h")


@dataclass
class QueryTokens:
    query_id: str
    video_id: str
    tokens: list
    raw_text: str = ""
    gt_span: tuple | None = None

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        if not self.tokens:
            raise DataError(f"query {self.query_id}: empty token sequence")
        if self.gt_span is not None:
            start, end = (float(x) for x in self.gt_span)
            if not 0 <= start < end:
                raise DataError(f"query {self.query_id}: bad gt_span {self.gt_span}")
            self.gt_span = (start, end)


@dataclass
class VideoFeatures:
    video_id: str
    features: np.ndarray
    seconds_per_unit: float = 1.0
    frame_positions: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"video {self.video_id}: features must be an N x D matrix with N >= 1")
        bad = np.flatnonzero(~np.isfinite(self.features).all(axis=1))
        if bad.size:
            raise DataError(f"video {self.video_id}: non-finite values in row {int(bad[0])}")
        if self.frame_positions is None:
            self.frame_positions = np.arange(self.features.shape[0])
        if self.seconds_per_unit <= 0:
            raise DataError(f"video {self.video_id}: seconds_per_unit must be > 0")

    @property
    def n_frames(self):
        return self.features.shape[0]


def positional_encoding(pos, d, M=10000.0):
    """Entry i is sin(pos / M**(i/d)) for even i and cos(...) for odd i."""
    if d < 1:
        raise ContractError("positional encoding width must be >= 1")
    return pe_table(np.array([pos]), d, M)[0]


def pe_table(positions, d, M=10000.0):
    positions = np.asarray(positions, dtype=np.float64)
    i = np.arange(d)
    angles = positions[:, None] / np.power(float(M), i / d)[None, :]
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


def temporal_endpoint_features(i, n):
    if not 0 <= i < n:
        raise ContractError(f"frame index {i} outside [0, {n})")
    return np.array([i / n, (i + 1) / n])


def frame_tail(n_frames, cfg):
    """Non-trainable block appended to every frame (N x tail_dim)."""
    if cfg.pe_mode == "pe":
        return pe_table(np.arange(n_frames), cfg.pe_dim, cfg.M)
    if cfg.pe_mode == "tef":
        return np.stack([temporal_endpoint_features(i, n_frames) for i in range(n_frames)])
    return np.zeros((n_frames, 0))


def init_encoder_params(store: ParamStore, cfg):
    De, H = cfg.embed_dim, cfg.hidden
    store.uniform("embedding", (cfg.vocab_size, De), De)
    for g in GRU_GATES:
        store.uniform(f"gru.W_{g}", (De, H), De)
        store.uniform(f"gru.U_{g}", (H, H), H)
        store.uniform(f"gru.b_{g}", (H,), H)
    store.uniform("visual_fc.weight", (cfg.feature_dim, cfg.visual_out), cfg.feature_dim)
    store.uniform("visual_fc.bias", (cfg.visual_out,), cfg.feature_dim)


def load_embeddings(store: ParamStore, path):
    """Replace the embedding table with vectors from a checkpoint-format file."""
    arrays = read_arrays(path)
    if "embedding" not in arrays:
        raise DataError(f"{path}: no 'embedding' entry")
    emb = arrays["embedding"]
    if emb.shape != store["embedding"].shape:
        raise DataError(f"{path}: embedding shape {emb.shape} != {store['embedding'].shape}")
    store["embedding"].values = emb.astype(store.dtype)


def gru(x, params, h0=None):
    """Run the GRU over ``x`` of shape (..., Q, D_e); returns all hidden states (..., Q, H)."""
    H = params["gru.U_z"].shape[0]
    if x.ndim == 2:
        h0 = None if h0 is None else T.reshape(T.as_tensor(h0), (1, H))
        out = gru(T.reshape(x, (1,) + x.shape), params, h0)
        return T.reshape(out, out.shape[1:])
    proj = {g: T.matmul(x, params[f"gru.W_{g}"]) + params[f"gru.b_{g}"] for g in GRU_GATES}
    lead = x.shape[:-2]
    h = T.Tensor(np.zeros(lead + (H,), dtype=x.dtype)) if h0 is None else T.as_tensor(h0)
    outs = []
    for j in range(x.shape[-2]):
        step = (Ellipsis, j, slice(None))
        z = T.sigmoid(proj["z"][step] + T.matmul(h, params["gru.U_z"]))
        r = T.sigmoid(proj["r"][step] + T.matmul(h, params["gru.U_r"]))
        cand = T.tanh(proj["h"][step] + T.matmul(T.mul(r, h), params["gru.U_h"]))
        h = h + T.mul(z, cand - h)  # (1 - z) * h + z * cand
        outs.append(h)
    return T.stack(outs, axis=-2)


def _check_tokens(tokens, vocab_size, query_id):
    arr = np.asarray(tokens)
    if arr.size == 0 or (arr < 0).any() or (arr >= vocab_size).any():
        raise DataError(f"query {query_id}: token id outside vocabulary [0, {vocab_size})")
    return arr


def encode_words(query, params, cfg, h0=None):
    """Q x H word representations for one query (QueryTokens or a token list)."""
    qid = getattr(query, "query_id", "<anonymous>")
    tokens = getattr(query, "tokens", query)
    arr = _check_tokens(tokens, cfg.vocab_size, qid)
    if h0 is not None:
        h0 = T.as_tensor(np.asarray(h0, dtype=params.dtype))
    return gru(T.take(params["embedding"], arr), params, h0)


def encode_token_batch(token_matrix, params, cfg, query_ids=None):
    """B x Q token ids (equal length) -> B x Q x H."""
    arr = np.asarray(token_matrix)
    if arr.ndim != 2:
        raise ContractError("token batch must be a B x Q matrix")
    _check_tokens(arr, cfg.vocab_size, ",".join(query_ids or ["<batch>"]))
    return gru(T.take(params["embedding"], arr), params)


def encode_feature_batch(features, params, cfg):
    """B x N x D_v raw features -> B x N x (visual_out + tail)."""
    feats = np.asarray(features, dtype=params.dtype)
    if feats.shape[-1] != cfg.feature_dim:
        raise DataError(f"feature width {feats.shape[-1]} != configured {cfg.feature_dim}")
    hidden = T.relu(T.matmul(T.Tensor(feats), params["visual_fc.weight"]) + params["visual_fc.bias"])
    if cfg.tail_dim == 0:
        return hidden
    tail = frame_tail(feats.shape[-2], cfg).astype(params.dtype)
    tail = np.broadcast_to(tail, feats.shape[:-1] + (cfg.tail_dim,))
    return T.concat([hidden, T.Tensor(tail)], axis=-1)


def encode_frames(vf: VideoFeatures, params, cfg):
    """N x H frame representations for one video."""
    if vf.features.shape[1] != cfg.feature_dim:
        raise DataError(
            f"video {vf.video_id}: feature width {vf.features.shape[1]} != {cfg.feature_dim}"
        )
    return encode_feature_batch(vf.features, params, cfg)
