"""Candidate segments, ranking, and Recall@N / mIoU evaluation."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .similarity import SegmentSpan, segment_score

REPORT_SCHEMA = {
    "type": "object",
    "required": ["grid", "miou", "query_count", "config_hash", "checkpoint_hash"],
    "properties": {
        "grid": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["n", "iou", "recall", "upper_bound", "random_baseline"],
                "properties": {
                    "n": {"type": "integer", "minimum": 1},
                    "iou": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "recall": {"type": "number", "minimum": 0, "maximum": 1},
                    "upper_bound": {"type": "number", "minimum": 0, "maximum": 1},
                    "random_baseline": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "query_count": {"type": "integer", "minimum": 0},
        "config_hash": {"type": ["string", "null"]},
        "checkpoint_hash": {"type": ["string", "null"]},
        "segment_score": {"type": "string"},
        "oracle": {"type": "boolean"},
    },
}


class ShortVideoWarning(UserWarning):
    """Video is shorter than every window size; one clipped window is returned."""


@dataclass
class ProposalScheme:
    kind: str
    unit_count: int | None = None
    window_sizes: tuple = ()
    seconds_per_unit: float = 1.0

    def __post_init__(self):
        if self.kind not in ("unit_spans", "fixed_windows"):
            raise ContractError(f"unknown proposal scheme {self.kind!r}")
        if self.kind == "fixed_windows" and not self.window_sizes:
            raise ContractError("fixed_windows needs window_sizes")
        self.window_sizes = tuple(int(s) for s in self.window_sizes)

    def seconds_per_frame_for(self, n_frames):
        if self.kind == "unit_spans" and self.unit_count:
            return self.seconds_per_unit * self.unit_count / n_frames
        return self.seconds_per_unit

    def to_json(self):
        d = {"kind": self.kind, "seconds_per_unit": self.seconds_per_unit}
        if self.kind == "unit_spans":
            d["unit_count"] = self.unit_count
        else:
            d["window_sizes"] = list(self.window_sizes)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(
            kind=d["kind"],
            unit_count=d.get("unit_count"),
            window_sizes=tuple(d.get("window_sizes", ())),
            seconds_per_unit=float(d.get("seconds_per_unit", 1.0)),
        )


def enumerate_proposals(scheme, video_len):
    """Candidate spans for a video of ``video_len`` frames, in a fixed order.

    unit_spans: every contiguous run of units, by start then end.
    fixed_windows: for each size, back-to-back windows clipped at the end.
    """
    if video_len < 1:
        raise ContractError("video must have at least one frame")
    spf = scheme.seconds_per_frame_for(video_len)
    if scheme.kind == "unit_spans":
        u = scheme.unit_count or video_len
        if video_len % u:
            raise DataError(f"{video_len} frames do not split into {u} equal units")
        fpu = video_len // u
        return [
            SegmentSpan.from_frames(a * fpu, b * fpu, spf)
            for a in range(u)
            for b in range(a + 1, u + 1)
        ]
    if all(s > video_len for s in scheme.window_sizes):
        warnings.warn(
            f"video of {video_len} frames is shorter than every window size", ShortVideoWarning
        )
        return [SegmentSpan.from_frames(0, video_len, spf)]
    spans = []
    for size in scheme.window_sizes:
        for start in range(0, video_len, size):
            spans.append(SegmentSpan.from_frames(start, min(start + size, video_len), spf))
    return spans


def _bounds(span):
    if isinstance(span, SegmentSpan):
        return span.start_sec, span.end_sec
    return float(span[0]), float(span[1])


def temporal_iou(a, b):
    """Intersection over union of two time ranges (SegmentSpans or (start, end) pairs)."""
    a0, a1 = _bounds(a)
    b0, b1 = _bounds(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


@dataclass
class ScoredSegment:
    span: SegmentSpan
    score: float
    rank: int = 0


def rank_spans(spans, scores):
    order = sorted(range(len(spans)), key=lambda i: (-scores[i], spans[i].start_idx, spans[i].length))
    return [ScoredSegment(spans[i], float(scores[i]), rank) for rank, i in enumerate(order, 1)]


def relevance_profile(video, query, params, cfg):
    """Per-frame relevance r_k of one pair, computed without recording gradients."""
    from .model import pair_forward

    with T.no_grad():
        return pair_forward(video, query, params, cfg).r.values.astype(np.float64)


def rank_segments(video, query, scheme, params, cfg, mode="contrast"):
    r = relevance_profile(video, query, params, cfg)
    spans = enumerate_proposals(scheme, video.n_frames)
    scores = [segment_score(r, s.start_idx, s.end_idx, cfg.lse_lambda, mode) for s in spans]
    return rank_spans(spans, scores)


def oracle_ranking(spans, gt_span):
    """Best-IoU-first ordering of the proposals."""
    return rank_spans(spans, [temporal_iou(s, gt_span) for s in spans])


def expected_random_recall(ious, n, theta):
    """Chance that a uniformly random ranking puts a qualifying span in its top n."""
    total = len(ious)
    good = int(sum(i >= theta for i in ious))
    n = min(n, total)
    all_draws = math.comb(total, n)
    return (all_draws - math.comb(total - good, n)) / all_draws


@dataclass
class QueryResult:
    query_id: str
    ranked_ious: list
    all_ious: list


@dataclass
class EvalReport:
    recall: dict = field(default_factory=dict)
    upper_bound: dict = field(default_factory=dict)
    random_baseline: dict = field(default_factory=dict)
    miou: float = 0.0
    query_count: int = 0
    config_hash: str | None = None
    checkpoint_hash: str | None = None
    segment_score: str = "contrast"
    oracle: bool = False

    def to_json(self):
        grid = [
            {
                "n": int(n),
                "iou": float(t),
                "recall": self.recall[(n, t)],
                "upper_bound": self.upper_bound[(n, t)],
                "random_baseline": self.random_baseline[(n, t)],
            }
            for (n, t) in self.recall
        ]
        return {
            "grid": grid,
            "miou": self.miou,
            "query_count": self.query_count,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "segment_score": self.segment_score,
            "oracle": self.oracle,
        }

    def format_table(self):
        ns = sorted({n for n, _ in self.recall})
        ts = sorted({t for _, t in self.recall})
        head = "".join(f"{'iou = ' + str(t):^{8 * len(ns)}}" for t in ts)
        sub = "".join(f"{'R@' + str(n):>8}" for _ in ts for n in ns)
        lines = [f"{'':<14}{head}", f"{'':<14}{sub}"]
        for label, table in (("model", self.recall), ("upper bound", self.upper_bound),
                             ("random", self.random_baseline)):
            vals = "".join(f"{100 * table[(n, t)]:8.2f}" for t in ts for n in ns)
            lines.append(f"{label:<14}{vals}")
        lines.append(f"mIoU {100 * self.miou:.2f}   queries {self.query_count}")
        return "\n".join(lines)


def score_query(dataset, query, params, cfg, mode="contrast", oracle=False):
    if query.gt_span is None:
        raise DataError(f"query {query.query_id} has no gt_span")
    video = dataset.videos[query.video_id]
    spans = enumerate_proposals(dataset.scheme, video.n_frames)
    if oracle:
        ranked = oracle_ranking(spans, query.gt_span)
    else:
        ranked = rank_segments(video, query, dataset.scheme, params, cfg, mode)
    return QueryResult(
        query.query_id,
        [temporal_iou(s.span, query.gt_span) for s in ranked],
        [temporal_iou(s, query.gt_span) for s in spans],
    )


def aggregate(results, Ns, thetas):
    report = EvalReport(query_count=len(results))
    count = max(len(results), 1)
    for n in Ns:
        for t in thetas:
            key = (int(n), float(t))
            report.recall[key] = sum(any(i >= t for i in r.ranked_ious[:n]) for r in results) / count
            report.upper_bound[key] = sum(max(r.all_ious) >= t for r in results) / count
            report.random_baseline[key] = (
                sum(expected_random_recall(r.all_ious, n, t) for r in results) / count
            )
    report.miou = sum(r.ranked_ious[0] for r in results) / count
    return report


def evaluate(dataset, params, cfg, Ns=(1, 5, 10), thetas=(0.3, 0.5, 0.7), mode="contrast",
             oracle=False, threads=1):
    """Recall@N at each IoU threshold, mIoU of the top-1 span, and oracle upper bounds."""
    for q in dataset.queries:
        if q.gt_span is None:
            raise DataError(f"query {q.query_id} has no gt_span")

    def one(q):
        return score_query(dataset, q, params, cfg, mode, oracle)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, dataset.queries))
    else:
        results = [one(q) for q in dataset.queries]
    report = aggregate(results, Ns, thetas)
    report.segment_score = mode
    report.oracle = oracle
    return report
