"""``csvt`` command line: synth-data, pretrain, finetune, eval, bench, attnmap."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .bench import run_scaling
from .config import ConfigError, RunConfig, parse_text
from .data import LABELS, load_images, read_image, read_manifest, split, synth_generate
from .metrics import (attention_saliency, confusion, cv_evaluate, metrics, metrics_rows,
                      write_metrics_csv, write_pgm)
from .model import CsvtModel
from .ssl import pretrain
from .tensor.checkpoint import CheckpointError, load as load_checkpoint, save as save_checkpoint
from .tensor.image import bilinear_resize
from .train import finetune, predict

log = logging.getLogger("csvt")


class CommandError(Exception):
    pass


def _fit_size(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly resize a stack to size x size where needed."""
    if images.shape[1:3] == (size, size):
        return images
    return np.stack([bilinear_resize(im, size, size) for im in images]).astype(images.dtype)


def _records(args):
    if not args.data:
        raise CommandError("a manifest is required (--data/--manifest)")
    return read_manifest(args.data)


def _load_into(model: CsvtModel, path, for_init: bool) -> None:
    """Load a checkpoint; an SSL checkpoint may lack the classifier head."""
    try:
        state = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"cannot read checkpoint {path}: {exc}") from None
    if for_init:
        missing = model.load_state_dict(state, strict=False, skip_prefixes=("ssl.", "head."))
        if missing:
            raise CommandError("incompatible checkpoint:\n  "
                               + "\n  ".join(f"{k}: missing from checkpoint" for k in missing))
    else:
        model.load_state_dict(state, strict=True, skip_prefixes=("ssl.",))


def _model_state(model: CsvtModel) -> dict:
    return {k: np.asarray(v) for k, v in model.state_dict().items()}


# -- commands -------------------------------------------------------------


def cmd_synth(args, rc: RunConfig) -> None:
    spec = rc.synth()
    if args.spec:
        text = Path(args.spec).read_text(encoding="utf-8")
        # bare SynthSpec names are accepted as well as synth.* keys
        lines = []
        for raw in text.splitlines():
            body = raw.split("#", 1)[0].strip()
            if body and "=" in body and "." not in body.split("=", 1)[0]:
                body = "synth." + body
            lines.append(body)
        values = parse_text("\n".join(lines), args.spec)
        extra = {k: v for k, v in values.items() if not k.startswith("synth.")}
        if extra:
            raise ConfigError(f"{args.spec}: only synth keys are allowed, got {sorted(extra)}")
        spec = RunConfig({**rc.values, **values}).synth()
    images, records = synth_generate(spec, args.out, k=args.folds, fmt=args.format)
    log.info("wrote %d images and %s", len(images), Path(args.out) / "manifest.csv")


def cmd_pretrain(args, rc: RunConfig) -> None:
    records = _records(args)
    images = load_images(records)
    cfg = rc.ssl()
    out = Path(args.out)
    loss_log = Path(args.log) if args.log else out.with_name(out.name + ".loss.csv")
    state = pretrain(images, rc.model(), cfg, ckpt_path=out, log_path=loss_log)
    last = state.log[-1] if state.log else None
    log.info("pretrained %d steps; final loss %s; checkpoint %s; log %s",
             state.step, f"{last[5]:.4f}" if last else "n/a", out, loss_log)


def _build_model(rc: RunConfig, init) -> CsvtModel:
    model = CsvtModel(rc.model(), seed=rc["seed"])
    if init:
        _load_into(model, init, for_init=True)
        log.info("initialised backbone from %s", init)
    return model


def _train_and_predict(rc: RunConfig, init, train, test, log_path=None):
    mcfg = rc.model()
    model = _build_model(rc, init)
    if train:
        x = load_images(train)
        finetune(model, x, [r.label_index for r in train], rc.finetune(), log_path)
    preds = predict(model, _fit_size(load_images(test), mcfg.image_size), rc.eval().batch_size)
    return model, preds


def cmd_finetune(args, rc: RunConfig) -> None:
    records = _records(args)
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.csv")
    has_folds = all(r.fold is not None for r in records)
    if args.fold == "all":
        if not has_folds:
            raise CommandError("cross-validation needs fold assignments in the manifest")
        k = max(r.fold for r in records) + 1

        def build(train, fold):
            ckpt = out.with_name(f"{out.stem}.fold{fold}{out.suffix}")
            logp = out.with_name(f"{out.stem}.fold{fold}.train.csv")
            test = [r for r in records if r.fold == fold]
            model, preds = _train_and_predict(rc, args.init, train, test, logp)
            save_checkpoint(ckpt, _model_state(model))
            cache = dict(zip((r.path for r in test), preds))
            return lambda recs: [cache[r.path] for r in recs]

        report = cv_evaluate(build, records, k=k, out_csv=metrics_path)
        log.info("cross-validated accuracy %.4f over %d folds -> %s",
                 report.mean_accuracy, k, metrics_path)
        return
    if has_folds:
        fold = int(args.fold)
        train, test = split(records, fold)
        if not test:
            raise CommandError(f"fold {fold} is empty")
    else:
        fold = "all"
        train, test = list(records), list(records)
        log.info("manifest has no folds; evaluating on the training set")
    logp = out.with_name(out.name + ".train.csv")
    model, preds = _train_and_predict(rc, args.init, train, test, logp)
    m = metrics(confusion([r.label_index for r in test], preds, len(LABELS)))
    write_metrics_csv(metrics_path, metrics_rows(fold, m))
    save_checkpoint(out, _model_state(model))
    log.info("fold %s accuracy %.4f; checkpoint %s; metrics %s", fold, m.accuracy, out,
             metrics_path)


def cmd_eval(args, rc: RunConfig) -> None:
    records = _records(args)
    mcfg = rc.model()
    model = CsvtModel(mcfg, seed=rc["seed"])
    _load_into(model, args.ckpt, for_init=False)
    fold = "all"
    if args.fold is not None:
        fold = int(args.fold)
        records = [r for r in records if r.fold == fold]
        if not records:
            raise CommandError(f"fold {fold} is empty")
    preds = predict(model, _fit_size(load_images(records), mcfg.image_size),
                    rc.eval().batch_size)
    m = metrics(confusion([r.label_index for r in records], preds, len(LABELS)))
    write_metrics_csv(args.out, metrics_rows(fold, m))
    log.info("accuracy %.4f on %d images -> %s", m.accuracy, len(records), args.out)


def cmd_bench(args, rc: RunConfig) -> None:
    b = rc.bench()
    sizes = args.sizes or list(b.sizes)
    timing = b.timing and not args.no_timing
    report = run_scaling(sizes, rc.model(), repeats=args.repeats or b.repeats, warmup=b.warmup,
                         timing=timing, element_budget=b.element_budget, seed=rc["seed"])
    out = Path(args.out)
    report.write_csv(out)
    report.write_fit_csv(out.with_name(out.stem + ".fit.csv"))
    report.write_gnuplot(out.with_name(out.stem + ".dat"))
    for note in report.notes:
        log.info("%s", note)
    for v in ("cba", "sa"):
        s = report.slopes(v)
        log.info("%s: attention flops slope %.3f, time slope %.3f", v, s["attention_flops"],
                 s["ms"])
    if timing and not report.valid:
        raise CommandError("timings too noisy (std/mean >= 0.25) after reruns")


def cmd_attnmap(args, rc: RunConfig) -> None:
    mcfg = rc.model()
    model = CsvtModel(mcfg, seed=rc["seed"])
    _load_into(model, args.ckpt, for_init=False)
    image = read_image(args.image)
    p = mcfg.patch_size
    h, w = (image.shape[0] // p) * p, (image.shape[1] // p) * p
    if h == 0 or w == 0:
        raise CommandError(f"image smaller than one {p}x{p} patch")
    grid = attention_saliency(model, image[:h, :w], upsample=not args.grid)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".pgm")
    write_pgm(out, grid)
    log.info("saliency map %dx%d -> %s", grid.shape[1], grid.shape[0], out)


# -- argument parsing -----------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {"default": None}
    p.add_argument("--config", help="config file or preset name (full, desk)", **kw)
    p.add_argument("--seed", type=int, help="seed for every random stream", **kw)
    p.add_argument("--threads", type=int, help="BLAS threads", **kw)
    p.add_argument("--precision", choices=("f32", "f64"), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csvt", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("synth-data", cmd_synth, "render the synthetic canopy dataset")
    p.add_argument("--spec", help="key = value file of generator settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--folds", type=int, default=5)

    p = add("pretrain", cmd_pretrain, "self-distillation pretraining")
    p.add_argument("--data", "--manifest", dest="data", help="manifest CSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")

    p = add("finetune", cmd_finetune, "supervised fine-tuning and held-out evaluation")
    p.add_argument("--data", "--manifest", dest="data", help="manifest CSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="checkpoint to initialise the backbone from")
    p.add_argument("--fold", default="0", help="held-out fold, or 'all' for cross-validation")
    p.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")

    p = add("eval", cmd_eval, "metrics of a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", "--manifest", dest="data", help="manifest CSV")
    p.add_argument("--fold", help="only evaluate this fold")
    p.add_argument("--out", default="metrics.csv", help="metrics CSV")

    p = add("bench", cmd_bench, "attention cost scaling report")
    p.add_argument("--sizes", type=int, nargs="+", help="input sizes in pixels")
    p.add_argument("--repeats", type=int)
    p.add_argument("--no-timing", action="store_true", help="analytic columns only")
    p.add_argument("--out", default="report.csv")

    p = add("attnmap", cmd_attnmap, "saliency heatmap as a PGM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="PGM path (default: image path with .pgm)")
    p.add_argument("--grid", action="store_true", help="write the patch grid, not upsampled")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        rc = RunConfig.load(args.config, seed=args.seed, threads=args.threads,
                            precision=args.precision)
    except (ConfigError, OSError) as exc:
        print(f"csvt: error: {exc}", file=sys.stderr)
        return 2
    log.info("resolved config:\n%s", rc.dump().rstrip())
    previous = T.precision_name()
    T.set_precision(rc["precision"])
    try:
        with threadpool_limits(limits=rc["threads"]):
            args.func(args, rc)
    except (CommandError, ConfigError, CheckpointError, ValueError, OSError, RuntimeError) as exc:
        print(f"csvt: error: {exc}", file=sys.stderr)
        return 1
    finally:
        T.set_precision(previous)
    return 0


if __name__ == "__main__":
    sys.exit(main())
