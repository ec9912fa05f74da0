"""Bidirectional triplet loss with top-K hard negatives, and Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .model import similarity_grid


@dataclass
class LossConfig:
    margin: float = 0.7
    top_k_negatives: int = 15
    batch_videos: int = 32


class NumericAbort(NumericError):
    def __init__(self, message, pair_ids=()):
        super().__init__(message)
        self.pair_ids = list(pair_ids)


def triplet_loss(sim_pos, sim_neg, margin):
    """max(0, margin - sim_pos + sim_neg)."""
    return T.relu(T.add(T.sub(T.as_tensor(margin), sim_pos), sim_neg))


def top_k_excluding(scores, exclude, k):
    """Indices of the k largest scores other than ``exclude``; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return [int(i) for i in order if i != exclude][:k]


def mine_hard_negatives(S, k):
    """Masks over the similarity grid S[video, query].

    ``query_mask[i, j]``: query j is one of the k hardest negatives for video i.
    ``video_mask[j, i]``: video j is one of the k hardest negatives for query i.
    """
    S = np.asarray(S)
    B = S.shape[0]
    query_mask = np.zeros_like(S)
    video_mask = np.zeros_like(S)
    for i in range(B):
        query_mask[i, top_k_excluding(S[i, :], i, k)] = 1.0
        video_mask[top_k_excluding(S[:, i], i, k), i] = 1.0
    return query_mask, video_mask


def batch_loss(videos, queries, params, model_cfg, loss_cfg):
    """Sum of hinge terms over both negative directions for a batch of positive pairs.

    ``videos[i]`` and ``queries[i]`` form the i-th positive pair.  Returns
    ``(loss, info)`` where info carries the similarity grid and masks.
    """
    if len(videos) != len(queries):
        raise ContractError("videos and queries must pair up one-to-one")
    if len({v.video_id for v in videos}) < 2:
        raise ContractError("a batch needs at least 2 distinct videos")
    if len({v.video_id for v in videos}) != len(videos):
        raise ContractError("batch videos must be pairwise distinct")
    S = similarity_grid(videos, queries, params, model_cfg)
    k = min(loss_cfg.top_k_negatives, len(videos) - 1)
    query_mask, video_mask = mine_hard_negatives(S.values, k)
    B = len(videos)
    pos = T.take(S, (np.arange(B), np.arange(B)))
    margin = loss_cfg.margin
    # row i: anchor video i against negative queries; column i: anchor query i against negative videos
    hinge_q = T.relu(T.add(T.sub(margin, T.reshape(pos, (B, 1))), S))
    hinge_v = T.relu(T.add(T.sub(margin, T.reshape(pos, (1, B))), S))
    loss = T.add(T.reduce_sum(T.mul(hinge_q, query_mask)), T.reduce_sum(T.mul(hinge_v, video_mask)))
    active = int(((hinge_q.values > 0) * query_mask).sum() + ((hinge_v.values > 0) * video_mask).sum())
    info = {
        "S": S.values,
        "query_mask": query_mask,
        "video_mask": video_mask,
        "terms": int(query_mask.sum() + video_mask.sum()),
        "active_hinges": active,
    }
    return loss, info


class Adam:
    """Adam with one (m, v) slot per parameter name."""

    def __init__(self, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        out = {"__step__": np.array([float(self.step_count)])}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, arrays, dtype=np.float64):
        self.step_count = int(arrays["__step__"][0])
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            if key.startswith("m/"):
                self.m[key[2:]] = np.array(arr, dtype=dtype)
            elif key.startswith("v/"):
                self.v[key[2:]] = np.array(arr, dtype=dtype)


def train_step(videos, queries, params, optimizer, model_cfg, loss_cfg):
    """Forward, backward and one Adam update.  Returns (loss value, info)."""
    params.zero_grad()
    ids = [f"{v.video_id}/{q.query_id}" for v, q in zip(videos, queries)]
    try:
        loss, info = batch_loss(videos, queries, params, model_cfg, loss_cfg)
    except NumericError as exc:
        raise NumericAbort(f"numeric failure in forward pass: {exc}", ids) from exc
    value = loss.item()
    if not np.isfinite(value):
        raise NumericAbort(f"non-finite loss {value}", ids)
    loss.backward()
    optimizer.step(params)
    params.zero_grad()
    return value, info
