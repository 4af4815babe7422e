"""Command line driver: gen-data, train, eval, predict.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 checkpoint error.
``MHMTL_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import DataError, Sample, generate, load_manifest, read_image, save_dataset, write_png
from .engine import evaluate, load_model, predict, score_predictions, oracle_predictions, train
from .model import RoutingError
from .tasks import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

def _thread_limit():
    n = os.environ.get("MHMTL_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def _synth_splits(cfg: RunConfig, seed: int) -> tuple[list[Sample], list[Sample]]:
    synth = cfg.data.synth
    if synth is None:
        raise ConfigError("data.synth: required to generate data")
    orig = tuple(synth.orig_size) if synth.orig_size else None
    size_range = tuple(synth.size_range)
    train_s, val_s = [], []
    for task in cfg.model.tasks:
        # disjoint streams: even seeds for train, odd for validation
        train_s += generate(2 * seed, task, synth.count, orig, size_range)
        if synth.val_count:
            val_s += generate(2 * seed + 1, task, synth.val_count, orig, size_range)
    return train_s, val_s


def _by_subtask(samples) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.task.subtask_id, []).append(s)
    return out


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    seed = cfg.run_seed if args.seed is None else args.seed
    train_s, val_s = _synth_splits(cfg, seed)
    out = Path(args.out)
    for sub in ("train", "val"):
        if (out / sub).exists():
            shutil.rmtree(out / sub)
    save_dataset(train_s, out / "train")
    if val_s:
        save_dataset(val_s, out / "val")
    print(f"wrote {len(train_s)} training and {len(val_s)} validation records under {out}")
    return EXIT_OK


def _load_split(path, cfg: RunConfig):
    samples = load_manifest(path)
    known = {t.subtask_id: t for t in cfg.model.tasks}
    for s in samples:
        if known.get(s.task.subtask_id) != s.task:
            raise ConfigError(f"model.tasks: manifest task {s.task.subtask_id!r} is missing or differs from the config")
    return samples


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out or cfg.output_dir)
    if cfg.data.train_manifest:
        train_s = _load_split(cfg.data.train_manifest, cfg)
        val_s = _load_split(cfg.data.val_manifest, cfg) if cfg.data.val_manifest else []
    else:
        train_s, val_s = _synth_splits(cfg, cfg.run_seed)
    if args.resume is None:
        # fresh run: drop stale logs so reruns are idempotent
        for name in ("metrics.jsonl", "losses.jsonl", "last.ckpt", "best.ckpt"):
            (out / name).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    result = train(
        cfg,
        _by_subtask(train_s),
        _by_subtask(val_s) or None,
        out_dir=out,
        resume=args.resume,
        stop_after=args.stop_after,
    )
    with open(out / "losses.jsonl", "w") as fh:
        for rec in result.losses:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    last = result.log[-1] if result.log else None
    print(f"trained {len(result.losses)} / {result.total_steps} steps; checkpoints in {out}")
    if last:
        print(json.dumps(last["category_means"], sort_keys=True))
    return EXIT_OK


def _predictions_from_manifest(path, samples):
    """A dataset-format manifest read as predictions (labels become predictions)."""
    preds = oracle_predictions(load_manifest(path))
    ids = {s.id for s in samples}
    return [p for p in preds if p.id in ids]


def _model_for(checkpoint, config_path):
    mcfg = RunConfig.load(config_path).model if config_path else None
    return load_model(checkpoint, mcfg)


def cmd_eval(args) -> int:
    samples = load_manifest(args.manifest)
    if args.predictions:
        report = score_predictions(samples, _predictions_from_manifest(args.predictions, samples))
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint: required unless --predictions is given")
        model = _model_for(args.checkpoint, args.config)
        for s in samples:
            if s.task.subtask_id not in model.tasks:
                raise RoutingError(f"manifest subtask {s.task.subtask_id!r} has no head in this checkpoint")
        report = evaluate(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    (out / "eval_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _model_for(args.checkpoint, args.config)
    if args.subtask not in model.tasks:
        raise RoutingError(f"unknown subtask {args.subtask!r}; checkpoint has {sorted(model.tasks)}")
    task = model.tasks[args.subtask]
    try:
        image = read_image(args.image)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from exc
    sample = Sample(id=Path(args.image).stem, image=image, task=task, label=None, orig_size=image.shape)
    pred = predict(model, [sample])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = pred.to_json()
    record["orig_size"] = list(image.shape)
    if pred.mask is not None:
        write_png(out / "mask.png", pred.mask.astype(np.uint8))
        record["mask_path"] = "mask.png"
    (out / "prediction.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhmtl", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset", allow_abbrev=False)
    p.add_argument("--config", required=True, help="run config (JSON) naming the tasks and data.synth")
    p.add_argument("--out", required=True, help="output directory; train/ and val/ are created inside")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model", allow_abbrev=False)
    p.add_argument("--config", required=True, help="run config (JSON)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this many global steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or a predictions manifest) on a dataset", allow_abbrev=False)
    p.add_argument("--checkpoint", default=None, help="model checkpoint")
    p.add_argument("--manifest", required=True, help="ground-truth manifest (file or dataset directory)")
    p.add_argument("--predictions", default=None, help="score this manifest's labels instead of running a model")
    p.add_argument("--config", default=None, help="run config whose model digest must match the checkpoint")
    p.add_argument("--out", default=".", help="directory for eval_report.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one image for one subtask", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="input image (PNG/PGM; colour is averaged to gray)")
    p.add_argument("--subtask", required=True, help="subtask id to route to")
    p.add_argument("--config", default=None, help="run config whose model digest must match the checkpoint")
    p.add_argument("--out", default=".", help="directory for prediction.json (and mask.png)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, RoutingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ckpt_io.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
