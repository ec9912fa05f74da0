"""Run configuration: JSON file plus command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

PE_MODES = ("pe", "tef", "none")
SEGMENT_SCORES = ("contrast", "lse", "lse_mean")


@dataclass
class SyntheticSpec:
    """Planted-alignment dataset: a background concept with one planted event per video."""

    concept_count: int = 8
    vocab_size: int = 8
    feature_dim: int = 32
    frames_per_video: int = 12
    frames_per_concept: int = 1
    words_per_query: int = 2
    background_concepts: int = 0
    videos_per_split: dict = field(default_factory=lambda: {"train": 200, "test": 50})
    noise_sigma: float = 0.1
    seconds_per_unit: float = 1.0
    seed: int = 7

    def validate(self):
        if self.concept_count < 1:
            raise ConfigError("concept_count must be >= 1")
        if self.concept_count > self.vocab_size:
            raise ConfigError(
                f"concept_count ({self.concept_count}) exceeds vocab_size ({self.vocab_size})"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.feature_dim < 1 or self.frames_per_video < 1 or self.frames_per_concept < 1:
            raise ConfigError("feature_dim, frames_per_video, frames_per_concept must be >= 1")
        if self.words_per_query < 1:
            raise ConfigError("words_per_query must be >= 1")
        if self.words_per_query * self.frames_per_concept > self.frames_per_video:
            raise ConfigError("the planted event does not fit in frames_per_video")
        if self.concept_count < 2:
            raise ConfigError("need at least 2 concepts (background plus event)")
        if not 0 <= self.background_concepts < self.concept_count:
            raise ConfigError("background_concepts must leave at least one event concept")
        if self.seconds_per_unit <= 0:
            raise ConfigError("seconds_per_unit must be > 0")
        for split, n in self.videos_per_split.items():
            if split not in ("train", "val", "test"):
                raise ConfigError(f"unknown split {split!r}")
            if int(n) < 0:
                raise ConfigError(f"negative video count for {split}")
        return self


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    embed_dim: int = 300
    hidden: int = 512
    pe_dim: int = 64
    pe_mode: str = "pe"
    M: float = 10000.0
    T: int = 3
    tied_iterations: bool = True
    lse_lambda: float = 6.0
    visual_fc_out: int | None = None
    dtype: str = "float64"

    @property
    def tail_dim(self):
        return {"pe": self.pe_dim, "tef": 2, "none": 0}[self.pe_mode]

    @property
    def visual_out(self):
        if self.visual_fc_out is not None:
            return self.visual_fc_out
        if self.pe_mode == "tef":
            return self.hidden - 2
        # "none" keeps the PE-sized gap so the width mismatch surfaces in the FBW step
        return self.hidden - self.pe_dim

    @property
    def frame_dim(self):
        return self.visual_out + self.tail_dim

    def validate(self):
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.lse_lambda <= 0:
            raise ConfigError("lse_lambda must be > 0")
        if self.pe_mode == "pe" and (self.pe_dim < 1 or self.pe_dim % 2):
            raise ConfigError("pe_dim must be a positive even number")
        if self.visual_out < 1:
            raise ConfigError("visual FC output width must be >= 1")
        if self.M <= 0:
            raise ConfigError("M must be > 0")
        return self


@dataclass
class RunConfig:
    embed_dim: int = 300
    hidden: int = 512
    pe_dim: int = 64
    feature_dim: int | None = None
    visual_fc_out: int | None = None
    pe_mode: str = "pe"
    M: float = 10000.0
    T: int = 3
    tied_iterations: bool = True
    lse_lambda: float = 6.0
    margin: float = 0.7
    top_k: int = 15
    lr: float = 1e-5
    batch_videos: int = 32
    epochs: int = 10
    seed: int = 0
    shuffle_seed: int = 0
    dtype: str = "float64"
    segment_score: str = "contrast"
    recall_at: list = field(default_factory=lambda: [1, 5, 10])
    iou_thresholds: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    threads: int = 1
    max_query_len: int = 64
    data_dir: str = "data"
    train_manifest: str | None = None
    eval_manifest: str | None = None
    vocab: str | None = None
    embeddings: str | None = None
    checkpoint_dir: str = "runs"
    checkpoint: str | None = None
    report: str | None = None
    log: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    # --- derived paths -------------------------------------------------
    def path(self, key):
        explicit = getattr(self, key)
        if explicit:
            return explicit
        defaults = {
            "train_manifest": os.path.join(self.data_dir, "train.json"),
            "eval_manifest": os.path.join(self.data_dir, "test.json"),
            "vocab": os.path.join(self.data_dir, "vocab.txt"),
            "checkpoint": os.path.join(self.checkpoint_dir, "model.lgan"),
            "report": os.path.join(self.checkpoint_dir, "report.json"),
            "log": os.path.join(self.checkpoint_dir, "train_log.jsonl"),
        }
        return defaults.get(key)

    def model_config(self, vocab_size, feature_dim):
        if self.feature_dim is not None and self.feature_dim != feature_dim:
            raise ConfigError(
                f"config feature_dim={self.feature_dim} but data has width {feature_dim}"
            )
        return ModelConfig(
            vocab_size=vocab_size,
            feature_dim=feature_dim,
            embed_dim=self.embed_dim,
            hidden=self.hidden,
            pe_dim=self.pe_dim,
            pe_mode=self.pe_mode,
            M=self.M,
            T=self.T,
            tied_iterations=self.tied_iterations,
            lse_lambda=self.lse_lambda,
            visual_fc_out=self.visual_fc_out,
            dtype=self.dtype,
        ).validate()

    def validate(self):
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}")
        if self.segment_score not in SEGMENT_SCORES:
            raise ConfigError(f"segment_score must be one of {SEGMENT_SCORES}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.T < 0 or self.epochs < 0:
            raise ConfigError("T and epochs must be >= 0")
        if self.batch_videos < 2:
            raise ConfigError("batch_videos must be >= 2")
        if not 1 <= self.top_k < self.batch_videos:
            raise ConfigError("top_k must satisfy 1 <= top_k < batch_videos")
        if self.lr <= 0 or self.lse_lambda <= 0:
            raise ConfigError("lr and lse_lambda must be > 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.recall_at or any(int(n) < 1 for n in self.recall_at):
            raise ConfigError("recall_at must hold positive integers")
        if not self.iou_thresholds or any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ConfigError("iou_thresholds must lie in (0, 1]")
        self.synthetic.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        """Digest of everything that can change results (paths and threads excluded)."""
        d = self.to_dict()
        for k in ("data_dir", "train_manifest", "eval_manifest", "vocab", "embeddings",
                  "checkpoint_dir", "checkpoint", "report", "log", "threads"):
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_RUN_FIELDS = {f.name: f for f in fields(RunConfig)}
_SYNTH_FIELDS = {f.name for f in fields(SyntheticSpec)}


def config_from_dict(data):
    """Build a RunConfig, rejecting unknown keys at every level."""
    data = dict(data)
    unknown = sorted(set(data) - set(_RUN_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    synth = data.pop("synthetic", None) or {}
    bad = sorted(set(synth) - _SYNTH_FIELDS)
    if bad:
        raise ConfigError(f"unknown synthetic keys: {', '.join(bad)}")
    try:
        return RunConfig(**data, synthetic=SyntheticSpec(**synth))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides=None):
    data = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for key, value in (overrides or {}).items():
        if key.startswith("synthetic."):
            data.setdefault("synthetic", {})[key.split(".", 1)[1]] = value
        else:
            data[key] = value
    return config_from_dict(data)
