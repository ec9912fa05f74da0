"""Feature files, dataset manifests, vocabularies and synthetic data.

Feature file layout (little-endian)::

    b"LGFV" | u32 version | u32 N | u32 D | N*D float32, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import SyntheticSpec
from .encoders import QueryTokens, VideoFeatures
from .errors import ContractError, DataError, FormatError
from .params import write_arrays
from .proposals import ProposalScheme, enumerate_proposals, temporal_iou

FEATURE_MAGIC = b"LGFV"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def save_features(path, features):
    arr = np.asarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ContractError("features must be a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_feature_matrix(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    magic, version, n, d = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = _HEADER.size + 4 * n * d
    if len(buf) != expected:
        raise FormatError(
            f"{path}: header says {n}x{d} ({expected} bytes) but file has {len(buf)} bytes",
            offset=min(len(buf), expected),
        )
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(n, d).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite value in row {int(bad[0])}")
    return arr


def load_features(path, video_id=None, seconds_per_unit=1.0):
    arr = read_feature_matrix(path)
    vid = video_id or os.path.splitext(os.path.basename(path))[0]
    return VideoFeatures(vid, arr, seconds_per_unit=seconds_per_unit)


def read_vocab(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def write_vocab(path, tokens):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok in tokens:
            fh.write(tok + "\n")


@dataclass
class DatasetManifest:
    name: str
    split: str
    scheme: ProposalScheme
    videos: list
    queries: list
    vocab: str = "vocab.txt"
    root: str = "."

    def video_ids(self):
        return [v["video_id"] for v in self.videos]

    def validate(self):
        known = set(self.video_ids())
        if len(known) != len(self.videos):
            raise DataError(f"manifest {self.name}: duplicate video ids")
        for q in self.queries:
            if q.video_id not in known:
                raise DataError(f"query {q.query_id}: unknown video {q.video_id}")
            if self.split in ("val", "test") and q.gt_span is None:
                raise DataError(f"query {q.query_id}: {self.split} queries need gt_span")
        return self

    def to_json(self):
        return {
            "name": self.name,
            "split": self.split,
            "scheme": self.scheme.to_json(),
            "vocab": self.vocab,
            "videos": self.videos,
            "queries": [
                {
                    "query_id": q.query_id,
                    "video_id": q.video_id,
                    "tokens": q.tokens,
                    "raw_text": q.raw_text,
                    "gt_span": list(q.gt_span) if q.gt_span is not None else None,
                }
                for q in self.queries
            ],
        }


def save_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path, vocab=None):
    """Parse a JSON manifest; queries without ``tokens`` are tokenized by whitespace."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    root = os.path.dirname(os.path.abspath(path))
    vocab_path = os.path.join(root, raw.get("vocab", "vocab.txt"))
    index = None
    queries = []
    for q in raw.get("queries", []):
        tokens = q.get("tokens")
        if tokens is None:
            if index is None:
                words = vocab if vocab is not None else read_vocab(vocab_path)
                index = {w: i for i, w in enumerate(words)}
            try:
                tokens = [index[w] for w in q.get("raw_text", "").split()]
            except KeyError as exc:
                raise DataError(f"query {q.get('query_id')}: word {exc} not in vocabulary") from None
        gt = q.get("gt_span")
        queries.append(
            QueryTokens(
                query_id=str(q["query_id"]),
                video_id=str(q["video_id"]),
                tokens=tokens,
                raw_text=q.get("raw_text", ""),
                gt_span=tuple(gt) if gt is not None else None,
            )
        )
    manifest = DatasetManifest(
        name=raw.get("name", os.path.basename(path)),
        split=raw.get("split", "train"),
        scheme=ProposalScheme.from_json(raw["scheme"]),
        videos=[dict(v) for v in raw.get("videos", [])],
        queries=queries,
        vocab=raw.get("vocab", "vocab.txt"),
        root=root,
    )
    return manifest.validate()


@dataclass
class Dataset:
    manifest: DatasetManifest
    videos: dict = field(default_factory=dict)

    @property
    def queries(self):
        return self.manifest.queries

    @property
    def scheme(self):
        return self.manifest.scheme

    def feature_dim(self):
        return next(iter(self.videos.values())).features.shape[1]

    def queries_by_video(self):
        out = {vid: [] for vid in self.manifest.video_ids()}
        for q in self.manifest.queries:
            out[q.video_id].append(q)
        return out


def load_dataset(path):
    manifest = load_manifest(path)
    spu = manifest.scheme.seconds_per_frame_for
    videos = {}
    for v in manifest.videos:
        fpath = os.path.join(manifest.root, v["feature_path"])
        arr = read_feature_matrix(fpath)
        videos[v["video_id"]] = VideoFeatures(
            v["video_id"], arr, seconds_per_unit=spu(arr.shape[0])
        )
    if not videos:
        raise DataError(f"{path}: manifest lists no videos")
    widths = {vf.features.shape[1] for vf in videos.values()}
    if len(widths) != 1:
        raise DataError(f"{path}: feature widths differ across videos: {sorted(widths)}")
    return Dataset(manifest, videos)


def batch_iterator(dataset, batch_videos, seed, epoch):
    """Yield lists of (video, query) positives; every video appears at most once per epoch.

    The order depends only on (seed, epoch).  The final short batch is dropped.
    """
    by_video = {k: v for k, v in dataset.queries_by_video().items() if v}
    if len(by_video) < 2:
        raise ContractError("batch iteration needs at least 2 videos with queries")
    if batch_videos < 2:
        raise ContractError("batch_videos must be >= 2")
    rng = np.random.default_rng([int(seed), int(epoch)])
    ids = list(by_video)
    order = rng.permutation(len(ids))
    picks = rng.integers(0, 1 << 30, size=len(ids))
    for start in range(0, len(ids) - batch_videos + 1, batch_videos):
        batch = []
        for pos in order[start : start + batch_videos]:
            vid = ids[pos]
            qs = by_video[vid]
            batch.append((dataset.videos[vid], qs[picks[pos] % len(qs)]))
        yield batch


# ---------------------------------------------------------------------------
# synthetic data

SPLIT_ORDER = ("train", "val", "test")


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec, out_dir):
    """Write vocab, concept table, LGFV features and one manifest per split.

    Every video shows one background concept, except for a planted event of
    ``words_per_query`` consecutive blocks of ``frames_per_concept`` frames,
    each block a distinct non-background concept.  The query lists the event
    concepts in order and the event is its ground-truth span.  With
    ``background_concepts > 0`` the last that many concepts only ever appear as
    background and never in a query.
    """
    spec.validate()
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    K, D, N = spec.concept_count, spec.feature_dim, spec.frames_per_video
    fpc, wpq = spec.frames_per_concept, spec.words_per_query
    n_bg = spec.background_concepts
    concepts = _unit_rows(rng, K, D).astype(np.float32)
    vocab = [f"c{k}" for k in range(K)] + [f"w{k}" for k in range(spec.vocab_size - K)]
    write_vocab(os.path.join(out_dir, "vocab.txt"), vocab)
    write_arrays(os.path.join(out_dir, "concepts.lgan"), {"concepts": concepts})

    scheme = ProposalScheme("unit_spans", unit_count=N, seconds_per_unit=spec.seconds_per_unit)
    paths = {}
    for split in SPLIT_ORDER:
        if split not in spec.videos_per_split:
            continue
        videos, queries = [], []
        for n in range(int(spec.videos_per_split[split])):
            vid = f"{split}_{n:05d}"
            if n_bg:
                background = int(K - n_bg + rng.integers(n_bg))
                perm = rng.permutation(K - n_bg)
                event = [int(c) for c in perm[:wpq]]
            else:
                perm = rng.permutation(K)
                background, event = int(perm[0]), [int(c) for c in perm[1 : 1 + wpq]]
            if len(event) < wpq:
                # fewer concepts than words: repeat, keeping neighbours distinct
                pool = [c for c in range(K - n_bg) if c != background] or [background]
                while len(event) < wpq:
                    event.append(next(c for c in rng.permutation(pool) if not event or c != event[-1]))
            start = int(rng.integers(N - wpq * fpc + 1))
            labels = np.full(N, background)
            labels[start : start + wpq * fpc] = np.repeat(event, fpc)
            frames = concepts[labels].astype(np.float64)
            if spec.noise_sigma > 0:
                frames = frames + spec.noise_sigma * rng.normal(size=frames.shape)
            rel = os.path.join("features", f"{vid}.lgfv")
            save_features(os.path.join(out_dir, rel), frames)
            spu = spec.seconds_per_unit
            span = (start * spu, (start + wpq * fpc) * spu)
            videos.append(
                {"video_id": vid, "feature_path": rel, "unit_count": N,
                 "frame_concepts": [int(c) for c in labels]}
            )
            queries.append(QueryTokens(f"{vid}_q0", vid, event, " ".join(vocab[t] for t in event), span))
        manifest = DatasetManifest(f"synthetic-{spec.seed}", split, scheme, videos, queries)
        paths[split] = os.path.join(out_dir, f"{split}.json")
        save_manifest(paths[split], manifest)
    return paths


def decode_concepts(features, concepts):
    """Nearest concept (by cosine) for every frame."""
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(concepts, dtype=np.float64)
    fn = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    cn = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    return np.argmax(fn @ cn.T, axis=1)


def nearest_concept_span(features, tokens, concepts, scheme):
    """Proposal agreeing best with the query's concepts after nearest-concept decoding.

    Agreement = matching frames inside - other frames inside - matching frames outside.
    """
    labels = decode_concepts(features, concepts)
    hit = np.isin(labels, list(tokens)).astype(int)
    total = hit.sum()
    best, best_key = None, None
    for span in enumerate_proposals(scheme, len(labels)):
        inside = hit[span.start_idx : span.end_idx].sum()
        score = inside - (span.length - inside) - (total - inside)
        key = (-score, span.start_idx, span.length)
        if best_key is None or key < best_key:
            best, best_key = span, key
    return best


def nearest_concept_oracle(dataset, concepts, theta=0.5):
    """R@1 at ``theta`` of the nearest-concept decoder over every query."""
    hits = 0
    for q in dataset.queries:
        vf = dataset.videos[q.video_id]
        span = nearest_concept_span(vf.features, q.tokens, concepts, dataset.scheme)
        hits += temporal_iou((span.start_sec, span.end_sec), q.gt_span) >= theta
    return hits / max(len(dataset.queries), 1)
