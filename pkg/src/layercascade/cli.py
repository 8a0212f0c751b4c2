"""Command-line front end.

Subcommands: gen-data, train, infer, sweep-rho, stats, bench, grad-check.
Exit codes: 0 success, 1 invalid input, 2 internal invariant violation.

Under ``--deterministic`` BLAS runs single-threaded and wall-clock fields
are left out of infer/sweep-rho outputs, so those files are byte-stable.
``bench`` always reports timings; that is its purpose.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradsuite
from .backbone import BackboneConfig, build_model, load_checkpoint, save_checkpoint
from .cascade import dense_forward, infer
from .errors import ConfigError, InvariantViolation, StateError, ValidationError
from .regionconv import flop_count, region_conv_forward
from .tensorcore import ConvSpec, downsample_labels, set_threads, softmax_channels, upsample_labels
from .toolkit import imageio
from .toolkit.analysis import boundary_fraction, difficulty_partition, stage_stats
from .toolkit.data import gen_dataset, read_manifest, write_dataset
from .training import (
    TrainConfig,
    cascade_train,
    dropout_train,
    evaluate,
    initial_train,
    lc_drop_rates,
    mc_baseline_train,
)

log = logging.getLogger("layercascade")

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _write_text(path, text):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_data: str | None = None
    val_data: str | None = None
    out_dir: str = "run"

    def to_dict(self):
        return {"backbone": self.backbone.to_dict(), "train": self.train.to_dict(),
                "train_data": self.train_data, "val_data": self.val_data, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"backbone", "train", "train_data", "val_data", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(BackboneConfig.from_dict(d.get("backbone", {})), TrainConfig.from_dict(d.get("train", {})),
                   d.get("train_data"), d.get("val_data"), d.get("out_dir", "run"))


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(d, dotted, value):
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a config section")
        node = node[k]
    node[keys[-1]] = value


# train flags -> dotted config keys
TRAIN_FLAGS = {
    "train_data": "train_data",
    "val_data": "val_data",
    "out": "out_dir",
    "epochs_initial": "train.epochs_initial",
    "epochs_cascade": "train.epochs_cascade",
    "mc_epochs_per_stage": "train.mc_epochs_per_stage",
    "lr": "train.lr_initial",
    "batch_size": "train.batch_size",
    "rho": "train.rho",
    "class_count": "backbone.class_count",
}


def resolve_run_config(args):
    d = RunConfig().to_dict()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
        d = RunConfig.from_dict(loaded).to_dict()
    if args.seed is not None:
        d["backbone"]["seed"] = d["train"]["seed"] = args.seed
    for flag, dotted in TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            _apply_override(d, dotted, v)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _apply_override(d, k, _parse_value(v))
    if args.baseline == "dsn":
        d["backbone"]["rho"] = 1.0
        d["train"]["rho"] = 1.0
    return RunConfig.from_dict(d)


def _sidecar(ckpt):
    return Path(ckpt).with_suffix(".json")


def save_model(model, path, config: BackboneConfig, optimizer=None):
    save_checkpoint(model, path, optimizer)
    _sidecar(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")


def open_model(path, model_config=None):
    cfg_path = Path(model_config) if model_config else _sidecar(path)
    if not cfg_path.exists():
        raise ConfigError(f"no backbone config for {path} (looked for {cfg_path})")
    return load_checkpoint(path, BackboneConfig.from_json(cfg_path))


def _load_split(path, what):
    if path is None:
        raise ConfigError(f"{what} data not given")
    return read_manifest(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    seed = 0 if args.seed is None else args.seed
    samples = gen_dataset(args.count, args.size, args.classes, seed, args.ambiguity)
    path = write_dataset(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), path)
    return EXIT_OK


def cmd_train(args):
    run = resolve_run_config(args)
    if args.baseline == "dropout" and not (args.drop_rates or args.rates_from):
        raise ConfigError("--baseline dropout needs --drop-rates or --rates-from")
    if args.phase == "cascade" and not args.checkpoint:
        raise ConfigError("--phase cascade needs --checkpoint from an initial run")
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=1, sort_keys=True) + "\n")
    train = _load_split(run.train_data, "train")
    val = _load_split(run.val_data, "val") if run.val_data else None
    dt = np.dtype(run.backbone.dtype)
    train = (train[0].astype(dt), train[1])
    if val is not None:
        val = (val[0].astype(dt), val[1])
    cfg = run.train

    if args.phase == "cascade":
        model = load_checkpoint(args.checkpoint, run.backbone)
    else:
        model = build_model(run.backbone)

    callback = None
    if args.checkpoint_every:
        def callback(model, opt, phase, epoch):
            if model.epoch % args.checkpoint_every == 0:
                save_model(model, out / f"epoch{model.epoch:04d}.ckpt", run.backbone, opt)

    if args.baseline == "mc":
        model, report = mc_baseline_train(model, train, cfg, val, callback=callback)
    elif args.baseline == "dropout":
        if args.drop_rates:
            rates = _floats(args.drop_rates)
        else:
            lc = open_model(args.rates_from)
            rates = lc_drop_rates(lc, train[0].astype(lc.stem.params()[0].data.dtype))
        log.info("dropout rates %s", rates)
        model, report = dropout_train(model, train, cfg, rates, val, callback=callback)
    else:
        report = None
        if args.phase in ("initial", "all"):
            model, report = initial_train(model, train, cfg, val, callback=callback)
            save_model(model, out / "initial.ckpt", run.backbone)
        if args.phase in ("cascade", "all"):
            model, report = cascade_train(model, train, cfg, val, report, callback)
    save_model(model, out / "model.ckpt", run.backbone)
    report.to_csv(out / "report.csv")
    if val is not None and report.rows:
        log.info("final val mIoU %.4f", report.rows[-1]["miou_val"])
    return EXIT_OK


def _images_for(args):
    if args.data:
        images, _ = read_manifest(args.data)
        names = [f"img{i:05d}" for i in range(len(images))]
        return list(images), names
    if not args.image:
        raise ConfigError("give --image or --data")
    return [imageio.read_image(p) for p in args.image], [Path(p).stem for p in args.image]


def cmd_infer(args):
    model = open_model(args.checkpoint, args.model_config)
    dt = model.stem.params()[0].data.dtype
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, names = _images_for(args)
    for image, name in zip(images, names):
        res = infer(image.astype(dt), model, args.rho)
        labels = res.upsampled()[0]
        imageio.write_labels(out / f"{name}.labels.pgm", labels)
        imageio.write_colormap(out / f"{name}.color.ppm", labels)
        for k, m in enumerate(res.exit_masks):
            imageio.write_mask(out / f"{name}.exit_s{k + 1}.ppm", upsample_labels(m[0], model.output_stride))
        ledger = res.ledger.to_dict()
        if args.deterministic:
            for e in ledger["stages"]:
                e.pop("wall_time")
            ledger.pop("total_time")
        ledger["rho"] = model.rho_for(0, args.rho)
        ledger["exit_fractions"] = res.exit_fractions()
        (out / f"{name}.ledger.json").write_text(json.dumps(ledger, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep_rho(args):
    model = open_model(args.checkpoint, args.model_config)
    images, labels = read_manifest(args.data)
    images = images.astype(model.stem.params()[0].data.dtype)
    n_st = len(model.stages)
    header = (["rho"] + [f"exit_s{k + 1}_pct" for k in range(n_st)]
              + ["miou", "flops_per_image", "ms_per_image"])
    rows = []
    for rho in _floats(args.rhos):
        ev = evaluate(model, images, labels, rho, full_resolution=args.full_resolution)
        ms = "" if args.deterministic else _fmt(1000.0 * ev["seconds"] / len(images))
        rows.append([_fmt(rho)] + [_fmt(100.0 * f) for f in ev["exit_fractions"]]
                    + [_fmt(ev["miou"]), str(ev["flops"] // len(images)), ms])
    _write_text(args.out, _csv_text(header, rows))
    return EXIT_OK


def stats_rows(model, images, labels, rho=None, threshold=0.95, radius=2, batch_size=16):
    """Rows ``(metric, class, stage, value)`` for the difficulty statistics."""
    k = model.class_count
    y = downsample_labels(labels, model.output_stride)
    finals, masks = [], []
    for i in range(0, len(images), batch_size):
        finals.append(softmax_channels(dense_forward(images[i:i + batch_size], model)[-1]))
        masks.append(infer(images[i:i + batch_size], model, rho).exit_masks)
    probs = np.concatenate(finals)
    exit_masks = [np.concatenate([m[s] for m in masks]) for s in range(len(model.stages))]
    part = difficulty_partition(probs, y, threshold)
    rows = [("pixels", "", "", int(part.evaluated.sum()))]
    rows += [(f"{name}_fraction", "", "", v) for name, v in part.fractions().items()]
    rows.append(("hs_boundary_fraction", "", "", boundary_fraction(part.hs, y, radius)))
    rows.append(("all_boundary_fraction", "", "", boundary_fraction(part.evaluated, y, radius)))
    rows.append(("boundary_radius", "", "", radius))
    st = stage_stats(exit_masks, y, k)
    for c in range(k):
        for s in range(len(model.stages)):
            rows.append(("exited", c, s + 1, int(st.exited[c, s])))
            rows.append(("processed", c, s + 1, int(st.processed[c, s])))
        for s in range(len(model.stages) - 1):
            rows.append(("ratio", c, f"{s + 2}/{s + 1}", float(st.ratios[c, s])))
    return rows


def cmd_stats(args):
    model = open_model(args.checkpoint, args.model_config)
    images, labels = read_manifest(args.data)
    images = images.astype(model.stem.params()[0].data.dtype)
    rows = stats_rows(model, images, labels, args.rho, args.threshold, args.radius)
    text = _csv_text(["metric", "class", "stage", "value"], [[a, b, c, _fmt(v)] for a, b, c, v in rows])
    _write_text(args.out, text)
    return EXIT_OK


def bench_rows(size=128, channels=64, densities=(0.25, 1.0), repeats=20, seed=0, dtype=np.float32):
    """Rows ``(density, dense_ms, rc_ms, speedup, rc_flops, dense_flops)``; median timings."""
    rng = np.random.default_rng(seed)
    spec = ConvSpec.same(channels, channels, 3)
    x = rng.standard_normal((1, channels, size, size)).astype(dtype)
    w = (rng.standard_normal(spec.weight_shape) * 0.05).astype(dtype)
    b = np.zeros(channels, dtype)
    dense_mask = np.ones((1, size, size), bool)
    dense_flops = flop_count(spec, size * size)
    rows = []
    for d in densities:
        if not 0.0 <= d <= 1.0:
            raise ConfigError(f"density must lie in [0, 1], got {d}")
        mask = np.zeros(size * size, bool)
        mask[rng.choice(size * size, int(round(d * size * size)), replace=False)] = True
        mask = mask.reshape(1, size, size)
        dense_t, rc_t = [], []
        for _ in range(repeats):
            # interleave so drift hits both paths equally
            t0 = time.perf_counter()
            region_conv_forward(x, dense_mask, spec, w, b, density_threshold=0.0)
            dense_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            region_conv_forward(x, mask, spec, w, b)
            rc_t.append(time.perf_counter() - t0)
        dms, rms = 1000 * float(np.median(dense_t)), 1000 * float(np.median(rc_t))
        rows.append((d, dms, rms, dms / rms if rms > 0 else float("inf"),
                     flop_count(spec, int(mask.sum())), dense_flops))
    return rows


def cmd_bench(args):
    rows = bench_rows(args.size, args.channels, _floats(args.densities), args.repeats,
                      0 if args.seed is None else args.seed)
    text = _csv_text(["density", "dense_ms", "rc_ms", "speedup", "flops", "dense_flops"],
                     [[_fmt(v) if i < 4 else str(v) for i, v in enumerate(r)] for r in rows])
    _write_text(args.out, text)
    return EXIT_OK


def cmd_grad_check(args):
    ops = args.ops.split(",") if args.ops else None
    bad = [o for o in ops or [] if o not in gradsuite.CHECKS]
    if bad:
        raise ConfigError(f"unknown ops {bad}; choose from {sorted(gradsuite.CHECKS)}")
    rows = gradsuite.run_suite(args.seeds, ops, args.tolerance)
    text = _csv_text(["op", "seeds", "max_rel_error", "pass"],
                     [[op, n, f"{err:.3e}", "PASS" if ok else "FAIL"] for op, n, err, ok in rows])
    _write_text(args.out, text)
    failed = [r[0] for r in rows if not r[3]]
    if failed:
        raise InvariantViolation(f"gradient check failed for {failed}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="layercascade", description="Layer cascade segmentation toolkit.")
    p.add_argument("--seed", type=int, default=None, help="overrides config seeds")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS; omit wall-clock fields from outputs")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (ignored with --deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--ambiguity", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="initial and/or cascade training, or a baseline")
    t.add_argument("--config", help="run config JSON; flags override it")
    t.add_argument("--train-data")
    t.add_argument("--val-data")
    t.add_argument("--out")
    t.add_argument("--phase", choices=["initial", "cascade", "all"], default="all")
    t.add_argument("--checkpoint", help="initial-phase checkpoint for --phase cascade")
    t.add_argument("--baseline", choices=["mc", "dsn", "dropout"])
    t.add_argument("--drop-rates", help="per-stage label drop rates for --baseline dropout")
    t.add_argument("--rates-from", help="LC checkpoint to measure dropout rates from")
    t.add_argument("--epochs-initial", type=int)
    t.add_argument("--epochs-cascade", type=int)
    t.add_argument("--mc-epochs-per-stage", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--rho", type=float)
    t.add_argument("--class-count", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also save a checkpoint (with optimizer velocity) every N epochs")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. backbone.head_channels=16")
    t.set_defaults(func=cmd_train)

    def model_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--model-config", help="backbone JSON (default: checkpoint sidecar)")

    i = sub.add_parser("infer", help="label maps, exit masks and flop ledger")
    model_flags(i)
    i.add_argument("--image", nargs="*")
    i.add_argument("--data", help="dataset manifest instead of --image")
    i.add_argument("--rho", type=float)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("sweep-rho", help="exit fractions, mIoU and cost per threshold")
    model_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--rhos", default="0.8,0.9,0.93,0.95,0.97,0.985,0.995,1.0")
    s.add_argument("--full-resolution", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_rho)

    st = sub.add_parser("stats", help="easy/moderate/hard partition and stage distribution")
    model_flags(st)
    st.add_argument("--data", required=True)
    st.add_argument("--rho", type=float)
    st.add_argument("--threshold", type=float, default=0.95)
    st.add_argument("--radius", type=int, default=2)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)

    b = sub.add_parser("bench", help="region conv vs dense conv timing")
    b.add_argument("--size", type=int, default=128)
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--densities", default="0.1,0.25,0.5,0.75,1.0")
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    gc = sub.add_parser("grad-check", help="finite-difference gradient checks")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--ops", help=f"comma list from {','.join(gradsuite.CHECKS)}")
    gc.add_argument("--tolerance", type=float, default=gradsuite.TOLERANCE)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        if args.deterministic:
            set_threads(1)
        elif args.threads is not None:
            set_threads(args.threads)
        return args.func(args)
    except (ValidationError, StateError, ValueError, OSError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    except InvariantViolation as e:
        log.error("invariant violated: %s", e)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
