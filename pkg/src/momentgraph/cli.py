"""Command-line entry point: synth, train, eval, gradcheck and attention.

Every subcommand reads a JSON config (``--config``) and applies overrides
from per-key flags (``--hidden 64``) or ``--set key=value``.  Exit codes:
0 ok, 1 check failure, 2 config or data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import tensor as T
from .config import RunConfig, load_config
from .data import (
    batch_iterator,
    generate_synthetic,
    load_dataset,
    nearest_concept_oracle,
    read_vocab,
)
from .encoders import QueryTokens, VideoFeatures, load_embeddings
from .errors import ConfigError, DataError, MomentGraphError, NumericError
from .gradcheck import finite_diff_check
from .model import init_params, pair_forward
from .params import load_checkpoint, read_arrays, save_checkpoint, write_arrays
from .proposals import REPORT_SCHEMA, evaluate
from .training import Adam, LossConfig, NumericAbort, batch_loss, train_step

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
VERIFY_THRESHOLD = 0.95


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any key, e.g. synthetic.seed=3 (value parsed as JSON)")
    group = parser.add_argument_group("config keys")
    for f in dataclasses.fields(RunConfig):
        if f.name == "synthetic":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs = {"dest": f"cfg_{f.name}", "default": argparse.SUPPRESS}
        if isinstance(default, bool):
            kwargs["type"] = _parse_bool
        elif isinstance(default, list):
            kwargs.update(nargs="+", type=type(default[0]))
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            kwargs["type"] = type(default)
        elif f.name in ("feature_dim", "visual_fc_out"):
            kwargs["type"] = int
        group.add_argument(flag, help=f"default: {default}", **kwargs)


def build_config(args):
    overrides = {}
    for key, value in vars(args).items():
        if key.startswith("cfg_"):
            overrides[key[4:]] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    if getattr(args, "fbw_only", False):
        overrides["T"] = 0
    cfg = load_config(args.config, overrides)
    return cfg.validate()


def _vocab_size(cfg, dataset):
    path = cfg.vocab or os.path.join(dataset.manifest.root, dataset.manifest.vocab)
    return len(read_vocab(path))


def _model_for(cfg, dataset):
    mcfg = cfg.model_config(_vocab_size(cfg, dataset), dataset.feature_dim())
    params = init_params(mcfg, cfg.seed)
    if cfg.embeddings:
        load_embeddings(params, cfg.embeddings)
    return mcfg, params


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg, args, out):
    paths = generate_synthetic(cfg.synthetic, cfg.data_dir)
    for split, path in paths.items():
        print(f"{split}: {path}", file=out)
    if args.verify:
        concepts = read_arrays(os.path.join(cfg.data_dir, "concepts.lgan"))["concepts"]
        ok = True
        for split, path in paths.items():
            ds = load_dataset(path)
            if not ds.queries:
                continue
            score = nearest_concept_oracle(ds, concepts, theta=0.5)
            status = "ok" if score >= VERIFY_THRESHOLD else "FAIL"
            print(f"verify {split}: nearest-concept R@1@0.5 = {score:.3f} [{status}]", file=out)
            ok &= score >= VERIFY_THRESHOLD
        if not ok:
            return EXIT_CHECK
    return EXIT_OK


def _checkpoint_name(cfg, epoch):
    return os.path.join(cfg.checkpoint_dir, f"epoch_{epoch:04d}.lgan")


def _latest_epoch(cfg):
    found = []
    for path in glob.glob(os.path.join(cfg.checkpoint_dir, "epoch_*.opt.lgan")):
        stem = os.path.basename(path)[len("epoch_"):-len(".opt.lgan")]
        if stem.isdigit():
            found.append(int(stem))
    return max(found) if found else None


def cmd_train(cfg, args, out):
    dataset = load_dataset(cfg.path("train_manifest"))
    mcfg, params = _model_for(cfg, dataset)
    optimizer = Adam(cfg.lr)
    loss_cfg = LossConfig(cfg.margin, cfg.top_k, cfg.batch_videos)
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    _write_json(os.path.join(cfg.checkpoint_dir, "config.json"), cfg.to_dict())

    start_epoch, step = 0, 0
    log_mode = "w"
    if args.resume:
        start_epoch = _latest_epoch(cfg)
        if start_epoch is None:
            raise DataError(f"nothing to resume in {cfg.checkpoint_dir}")
        load_checkpoint(_checkpoint_name(cfg, start_epoch), params)
        opt_state = read_arrays(_checkpoint_name(cfg, start_epoch)[:-5] + ".opt.lgan")
        step = int(opt_state.pop("__global_step__")[0])
        optimizer.load_state(opt_state, dtype=params.dtype)
        log_mode = "a"
        print(f"resumed from epoch {start_epoch}", file=out)
    else:
        save_checkpoint(params, _checkpoint_name(cfg, 0))
        _save_opt(cfg, 0, optimizer, 0)

    with open(cfg.path("log"), log_mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            losses = []
            for batch in batch_iterator(dataset, cfg.batch_videos, cfg.shuffle_seed, epoch):
                t0 = time.perf_counter()
                videos = [v for v, _ in batch]
                queries = [q for _, q in batch]
                loss, info = train_step(videos, queries, params, optimizer, mcfg, loss_cfg)
                step += 1
                losses.append(loss)
                record = {"epoch": epoch + 1, "step": step, "loss": loss, "lr": optimizer.lr,
                          "active_hinges": info["active_hinges"],
                          "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                log.write(json.dumps(record) + "\n")
            log.flush()
            save_checkpoint(params, _checkpoint_name(cfg, epoch + 1))
            _save_opt(cfg, epoch + 1, optimizer, step)
            mean = float(np.mean(losses)) if losses else float("nan")
            print(f"epoch {epoch + 1}/{cfg.epochs}  loss {mean:.4f}  steps {len(losses)}", file=out)
    save_checkpoint(params, cfg.path("checkpoint"))
    print(f"checkpoint: {cfg.path('checkpoint')}", file=out)
    return EXIT_OK


def _save_opt(cfg, epoch, optimizer, step):
    state = optimizer.state()
    state["__global_step__"] = np.array([float(step)])
    write_arrays(_checkpoint_name(cfg, epoch)[:-5] + ".opt.lgan", state)


def _load_trained(cfg, dataset, required=True):
    mcfg, params = _model_for(cfg, dataset)
    path = cfg.path("checkpoint")
    if not os.path.exists(path):
        if required:
            raise DataError(f"checkpoint not found: {path}")
        return mcfg, params, None
    load_checkpoint(path, params)
    return mcfg, params, sha256_file(path)


def cmd_eval(cfg, args, out):
    dataset = load_dataset(cfg.path("eval_manifest"))
    mcfg, params, ckpt_hash = _load_trained(cfg, dataset, required=not args.oracle)
    report = evaluate(dataset, params, mcfg, Ns=cfg.recall_at, thetas=cfg.iou_thresholds,
                      mode=cfg.segment_score, oracle=args.oracle, threads=cfg.threads)
    report.config_hash = cfg.hash()
    report.checkpoint_hash = ckpt_hash
    doc = report.to_json()
    jsonschema.validate(doc, REPORT_SCHEMA)
    _write_json(cfg.path("report"), doc)
    print(report.format_table(), file=out)
    print(f"report: {cfg.path('report')}", file=out)
    return EXIT_OK


def gradcheck_instance(cfg):
    """A 2-video, 4-frame, 3-word double-precision problem and its loss function."""
    mcfg = dataclasses.replace(
        cfg.model_config(10, 6), hidden=16, embed_dim=8, pe_dim=4, visual_fc_out=None,
        dtype="float64",
    ).validate()
    params = init_params(mcfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    videos = [VideoFeatures(f"v{i}", rng.normal(size=(4, 6))) for i in range(2)]
    queries = [QueryTokens(f"q{i}", f"v{i}", rng.integers(0, 10, size=3)) for i in range(2)]
    loss_cfg = LossConfig(margin=cfg.margin, top_k_negatives=1, batch_videos=2)

    def loss_fn(p):
        return batch_loss(videos, queries, p, mcfg, loss_cfg)[0]

    return params, loss_fn


def cmd_gradcheck(cfg, args, out):
    t0 = time.perf_counter()
    params, loss_fn = gradcheck_instance(cfg)
    report = finite_diff_check(loss_fn, params, h=args.step, tol=args.tol)
    print(report.table(), file=out)
    elapsed = time.perf_counter() - t0
    if report.passed:
        print(f"gradcheck passed ({len(report.rows)} parameters, {elapsed:.1f} s)", file=out)
        return EXIT_OK
    print(f"gradcheck FAILED: {', '.join(report.failures())}", file=out)
    return EXIT_CHECK


def _matrix(t):
    return np.asarray(t.values, dtype=np.float64).tolist()


def _attention_block(s, a_word, a_frame):
    return {
        "shape": list(s.shape),
        "s": _matrix(s),
        "a_word": _matrix(a_word),
        "a_frame": _matrix(a_frame),
    }


def cmd_attention(cfg, args, out):
    dataset = load_dataset(cfg.path("eval_manifest"))
    mcfg, params, _ = _load_trained(cfg, dataset, required=True)
    queries = {q.query_id: q for q in dataset.queries}
    qid = args.query_id or dataset.queries[0].query_id
    if qid not in queries:
        raise DataError(f"unknown query id {qid!r}")
    query = queries[qid]
    with T.no_grad():
        fwd = pair_forward(dataset.videos[query.video_id], query, params, mcfg)
    doc = {
        "query_id": qid,
        "video_id": query.video_id,
        "tokens": query.tokens,
        **_attention_block(fwd.fbw.s, fwd.fbw.a_word, fwd.fbw.a_frame),
        "relevance": _matrix(fwd.r),
    }
    for t in range(len(fwd.trace)):
        tr = fwd.trace
        doc[f"iter_{t}"] = _attention_block(tr.s_prime[t], tr.a_l[t], tr.a_frame[t])
    path = args.out or os.path.join(cfg.checkpoint_dir, f"attention_{qid}.json")
    _write_json(path, doc)
    print(f"attention: {path}", file=out)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "attention": cmd_attention,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="momentgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate the planted-alignment synthetic dataset")
    p.add_argument("--verify", action="store_true", help="check the nearest-concept oracle")
    p = sub.add_parser("train", help="train and write per-epoch checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
    p.add_argument("--fbw-only", action="store_true", help="skip the visual graph (T=0)")
    p = sub.add_parser("eval", help="Recall@N / mIoU report for a checkpoint")
    p.add_argument("--oracle", action="store_true", help="rank proposals by true IoU")
    p.add_argument("--fbw-only", action="store_true", help="skip the visual graph (T=0)")
    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    p.add_argument("--step", type=float, default=1e-5, help="central difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    p = sub.add_parser("attention", help="dump attention maps for one query")
    p.add_argument("--query-id", help="query to inspect (default: first in the manifest)")
    p.add_argument("--out", help="output JSON path")
    p.add_argument("--fbw-only", action="store_true", help="skip the visual graph (T=0)")
    for name, sp in sub.choices.items():
        _add_config_flags(sp)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, args, out=out)
    except NumericAbort as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        if exc.pair_ids:
            print(f"  batch pairs: {', '.join(exc.pair_ids)}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MomentGraphError, jsonschema.ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
