"""Segment-level relevance: per-frame cosines pooled with LogSumExp."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError


@dataclass(frozen=True)
class SegmentSpan:
    """Frames [start_idx, end_idx) and the matching time range in seconds."""

    start_idx: int
    end_idx: int
    start_sec: float
    end_sec: float

    def __post_init__(self):
        if not 0 <= self.start_idx < self.end_idx:
            raise ContractError(f"invalid span [{self.start_idx}, {self.end_idx})")

    @classmethod
    def from_frames(cls, start, end, seconds_per_frame=1.0):
        return cls(int(start), int(end), start * seconds_per_frame, end * seconds_per_frame)

    @property
    def length(self):
        return self.end_idx - self.start_idx


def frame_relevance(V_T, L):
    """Cosine between each refined frame and its frame-specific sentence rep."""
    return T.cosine_rows(V_T, L)


def lse_pool(r, lam):
    """(1/lam) * log(sum_k exp(lam * r_k)) over the last axis.

    Evaluated as max_k r_k + log(sum_k exp(lam * (r_k - max))) / lam so a
    single-frame segment returns its cosine bit for bit.
    """
    r = T.as_tensor(r)
    if r.shape[-1] == 0:
        raise ContractError("LSE pooling over an empty segment")
    m = r.values.max(axis=-1, keepdims=True)
    e = np.exp(lam * (r.values - m))
    total = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(total) / lam)[..., 0]
    weights = e / total

    def bw(g):
        return (g[..., None] * weights,)

    return T.Tensor.from_op(out, (r,), bw, "lse_pool")


def lse_similarity(V_T, L, span, lam):
    n = V_T.shape[-2]
    if span.end_idx > n:
        raise ContractError(f"span [{span.start_idx}, {span.end_idx}) exceeds {n} frames")
    window = (Ellipsis, slice(span.start_idx, span.end_idx), slice(None))
    return lse_pool(frame_relevance(T.take(V_T, window), T.take(L, window)), lam)


def lse_np(r, lam):
    r = np.asarray(r, dtype=np.float64)
    if r.size == 0:
        raise ContractError("LSE pooling over an empty segment")
    m = r.max()
    return m + np.log(np.exp(lam * (r - m)).sum()) / lam


def segment_score(r, start, end, lam, mode="contrast"):
    """Score frames [start, end) of per-frame relevances ``r`` for ranking.

    ``lse``      raw LogSumExp pooling; grows with every frame added.
    ``lse_mean`` LogSumExp minus log(K)/lam, a length-neutral soft maximum.
    ``contrast`` lse_mean inside minus lse_mean over the rest of the video;
                 the whole video scores 0.
    """
    r = np.asarray(r, dtype=np.float64)
    inside = r[start:end]
    if mode == "lse":
        return lse_np(inside, lam)
    mean_in = lse_np(inside, lam) - np.log(inside.size) / lam
    if mode == "lse_mean":
        return mean_in
    if mode != "contrast":
        raise ContractError(f"unknown segment score {mode!r}")
    rest = np.concatenate([r[:start], r[end:]])
    if rest.size == 0:
        return 0.0
    return mean_in - (lse_np(rest, lam) - np.log(rest.size) / lam)
