"""Two-phase training for a layer cascade, plus the comparison baselines.

Initial training supervises every stage head on the full label map (deep
supervision). Cascade training routes each batch through the cascade at
``rho`` and restricts stage k's loss to the pixels forwarded to stage k.
Both phases update all stages jointly from one backward pass.

The model-cascade baseline trains one stage at a time with all earlier
stages frozen; the dropout baseline replaces routing with random label
dropout at fixed per-stage rates.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cascade import CascadeModel, infer, run_stage, run_stem
from .errors import ConfigError, StateError
from .regionconv import mask_from_confidence
from .tensorcore import (
    IGNORE_LABEL,
    OptimizerState,
    downsample_labels,
    masked_cross_entropy,
    sgd_step,
    softmax_channels,
    upsample_labels,
)
from .toolkit.metrics import confusion_matrix, miou

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_drop_factor: float = 10.0
    drop_every_initial: int = 10
    drop_every_cascade: int = 15
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs_initial: int = 20
    epochs_cascade: int = 30
    # per-stage epochs for the model-cascade baseline; None splits the LC budget evenly
    mc_epochs_per_stage: int | None = None
    rho: float | None = None
    seed: int = 0
    stage_loss_weights: list | None = None
    flip: bool = True
    eval_full_resolution: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr_initial", "lr_drop_factor", "momentum"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.drop_every_initial < 1 or self.drop_every_cascade < 1:
            raise ConfigError("batch_size and drop intervals must be >= 1")
        if self.epochs_initial < 0 or self.epochs_cascade < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.rho is not None and not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, phase: str, config: TrainConfig) -> float:
    """Step decay: ``lr_initial * drop_factor ** -floor(epoch / drop_every)``."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    every = config.drop_every_cascade if phase == "cascade" else config.drop_every_initial
    return config.lr_initial * config.lr_drop_factor ** -(epoch // every)


@dataclass
class TrainReport:
    stages: int
    rows: list = field(default_factory=list)

    def header(self):
        return (["epoch", "phase", "lr"] + [f"loss_s{k + 1}" for k in range(self.stages)]
                + [f"exit_s{k + 1}" for k in range(self.stages)] + ["miou_train", "miou_val"])

    def add(self, epoch, phase, lr, losses, exits, miou_train, miou_val):
        self.rows.append({"epoch": epoch, "phase": phase, "lr": lr, "losses": list(losses),
                          "exits": list(exits), "miou_train": miou_train, "miou_val": miou_val})

    def extend(self, other):
        self.rows.extend(other.rows)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow([r["epoch"], r["phase"], repr(r["lr"])] + [repr(float(x)) for x in r["losses"]]
                       + [repr(float(x)) for x in r["exits"]]
                       + [repr(float(r["miou_train"])),
                          "" if r["miou_val"] is None else repr(float(r["miou_val"]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text


@dataclass
class StepResult:
    losses: list
    contrib_counts: list
    exit_counts: list
    merged: np.ndarray
    # filled only with probe=True
    grad_logits: list | None = None
    contrib_masks: list | None = None


def _check_data(model, labels):
    valid = labels[labels != IGNORE_LABEL]
    if valid.size and int(valid.max()) >= model.class_count:
        raise ConfigError(f"labels reach {int(valid.max())} but the model has {model.class_count} classes")


def train_step(model: CascadeModel, images, labels, optimizer: OptimizerState | None, *,
               mode="initial", rho=None, weights=None, train_stages=None, drop_rates=None,
               rng=None, probe=False) -> StepResult:
    """One forward/backward/update on a batch.

    ``labels`` are at prediction resolution. ``mode`` is ``initial`` (every
    stage sees every pixel), ``cascade`` (routed, stage loss on forwarded
    pixels), or ``dropout`` (every stage sees a random subset at
    ``drop_rates``). ``train_stages`` restricts which stage losses are
    optimised; stages after the last trained stage are not run and stages
    before the first are treated as frozen feature extractors.
    """
    n_stages = len(model.stages)
    weights = [1.0] * n_stages if weights is None else list(weights)
    rho = model.rho if rho is None else rho
    train_stages = list(range(n_stages)) if train_stages is None else sorted(train_stages)
    first, last_run = train_stages[0], train_stages[-1]
    model.zero_grad()

    feats = run_stem(images, model)
    n, _, h, w = feats.shape
    active = np.ones((n, h, w), dtype=bool)
    merged = np.zeros((n, h, w), dtype=np.int64)
    ran, dlogits, contrib_masks = [], [], []
    losses, contrib_counts, exit_counts = [], [], []
    for k in range(last_run + 1):
        stage = model.stages[k]
        if not active.any():
            ran.append(False)
            dlogits.append(None)
            contrib_masks.append(active.copy())
            losses.append(0.0)
            contrib_counts.append(0)
            exit_counts.append(0)
            continue
        mask = None if (mode != "cascade" or active.all()) else active
        feats, logits = run_stage(feats, mask, stage)
        probs = softmax_channels(logits)
        if mode == "dropout" and drop_rates is not None:
            contrib = rng.random((n, h, w)) >= drop_rates[k]
        else:
            contrib = active.copy()
        is_last = k == n_stages - 1
        if mode == "cascade" and not is_last:
            exit_mask, forward = mask_from_confidence(probs, model.rho_for(k, rho), active)
        elif is_last:
            exit_mask, forward = active.copy(), np.zeros_like(active)
        else:
            exit_mask, forward = np.zeros_like(active), active
        merged = np.where(exit_mask, probs.argmax(axis=1), merged)
        loss, g = masked_cross_entropy(probs, labels, contrib)
        n_contrib = int(((labels != IGNORE_LABEL) & contrib).sum())
        ran.append(True)
        dlogits.append(g * g.dtype.type(weights[k]) if k in train_stages and weights[k] != 0 and n_contrib
                       else None)
        contrib_masks.append(contrib)
        losses.append(loss)
        contrib_counts.append(n_contrib)
        exit_counts.append(int(exit_mask.sum()))
        if mode == "cascade":
            active = forward
    if last_run < n_stages - 1 and ran[last_run]:
        # truncated run (model-cascade training): last run stage labels the rest
        merged = np.where(active, probs.argmax(axis=1), merged)

    # backward, last stage first; gf is the gradient w.r.t. the current stage's output features
    gf = None
    for k in range(last_run, first - 1, -1):
        if not ran[k]:
            continue
        stage = model.stages[k]
        if dlogits[k] is not None:
            gh = stage.head.backward(dlogits[k])
            gf = gh if gf is None else gf + gh
        if gf is not None:
            gf = stage.body.backward(gf)
    if gf is not None and first == 0:
        model.stem.backward(gf)
    if optimizer is not None:
        sgd_step(model.params(), optimizer)
    res = StepResult(losses, contrib_counts, exit_counts, merged)
    if probe:
        res.grad_logits = dlogits
        res.contrib_masks = contrib_masks
    return res


def iterate_batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _augment(images, labels, rng):
    flip = rng.random(len(images)) < 0.5
    if flip.any():
        images = images.copy()
        labels = labels.copy()
        images[flip] = images[flip][..., ::-1]
        labels[flip] = labels[flip][..., ::-1]
    return images, labels


def evaluate(model: CascadeModel, images, labels, rho=None, batch_size=16, full_resolution=False):
    """Cascade inference over a dataset. Labels are at input resolution."""
    k = model.class_count
    conf = np.zeros((k, k), dtype=np.int64)
    exits = np.zeros(len(model.stages), dtype=np.int64)
    flops, seconds, total = 0, 0.0, 0
    masks = []
    for i in range(0, len(images), batch_size):
        res = infer(images[i:i + batch_size], model, rho)
        gt = labels[i:i + batch_size]
        if full_resolution:
            pred = upsample_labels(res.labels, model.output_stride)
        else:
            pred, gt = res.labels, downsample_labels(gt, model.output_stride)
        conf += confusion_matrix(pred, gt, k)
        exits += np.array([int(m.sum()) for m in res.exit_masks])
        total += res.labels.size
        flops += res.ledger.total_flops
        seconds += res.ledger.total_time
        masks.append(res.exit_masks)
    ious, mean = miou(conf)
    return {"miou": mean, "ious": ious, "confusion": conf, "exit_fractions": (exits / total).tolist(),
            "flops": flops, "seconds": seconds, "images": len(images), "exit_masks": masks}


def _run_phase(model, train, config: TrainConfig, *, phase, epochs, mode, rho=None, val=None,
               train_stages=None, drop_rates=None, report=None, callback=None, start_epoch=0):
    images, labels = train
    _check_data(model, labels)
    labels_ds = downsample_labels(labels, model.output_stride)
    opt = OptimizerState(config.lr_initial, config.momentum, config.weight_decay)
    report = report if report is not None else TrainReport(len(model.stages))
    aug_rng = np.random.default_rng([config.seed, 7919, start_epoch])
    drop_rng = np.random.default_rng([config.seed, 104729, start_epoch])
    k = model.class_count
    eval_rho = rho if mode == "cascade" else (config.rho if config.rho is not None else model.rho)
    for epoch in range(epochs):
        opt.learning_rate = lr_schedule(epoch, "cascade" if phase == "cascade" else "initial", config)
        loss_sum = np.zeros(len(model.stages))
        loss_batches = np.zeros(len(model.stages))
        conf = np.zeros((k, k), dtype=np.int64)
        for idx in iterate_batches(len(images), config.batch_size, config.seed, start_epoch + epoch):
            x, y = images[idx], labels_ds[idx]
            if config.flip:
                x, y = _augment(x, y, aug_rng)
            res = train_step(model, x, y, opt, mode=mode, rho=rho, weights=config.stage_loss_weights,
                             train_stages=train_stages, drop_rates=drop_rates, rng=drop_rng)
            for s, (loss, cnt) in enumerate(zip(res.losses, res.contrib_counts)):
                if cnt:
                    loss_sum[s] += loss
                    loss_batches[s] += 1
            conf += confusion_matrix(res.merged, y, k)
            if not all(math.isfinite(v) for v in res.losses):
                raise StateError(f"non-finite loss in {phase} epoch {epoch}: {res.losses}")
        model.epoch = start_epoch + epoch + 1
        losses = np.where(loss_batches > 0, loss_sum / np.maximum(loss_batches, 1), 0.0)
        miou_train = miou(conf)[1] if conf.sum() else float("nan")
        miou_val, exits = None, None
        if val is not None:
            ev = evaluate(model, val[0], val[1], eval_rho, full_resolution=config.eval_full_resolution)
            miou_val, exits = ev["miou"], ev["exit_fractions"]
        if exits is None:
            exits = [0.0] * (len(model.stages) - 1) + [1.0]
        report.add(start_epoch + epoch, phase, opt.learning_rate, losses, exits, miou_train, miou_val)
        log.info("%s epoch %d lr %.3g loss %s exits %s miou train %.4f val %s", phase, epoch,
                 opt.learning_rate, np.round(losses, 4).tolist(), np.round(exits, 3).tolist(),
                 miou_train, miou_val)
        if callback is not None:
            callback(model, opt, phase, epoch)
    return model, report


def initial_train(model, train, config: TrainConfig, val=None, report=None, callback=None):
    """Deep-supervision phase: every stage learns the full label map."""
    model, report = _run_phase(model, train, config, phase="initial", epochs=config.epochs_initial,
                               mode="initial", val=val, report=report, callback=callback)
    model.phase = "initial"
    return model, report


def cascade_train(model, train, config: TrainConfig, val=None, report=None, callback=None, force=False):
    """Routed fine-tuning: stage k learns only on pixels forwarded to it."""
    if model.phase not in ("initial", "cascade") and not force:
        raise StateError("cascade_train expects a model that finished initial training (pass force=True)")
    rho = config.rho if config.rho is not None else model.rho
    model, report = _run_phase(model, train, config, phase="cascade", epochs=config.epochs_cascade,
                               mode="cascade", rho=rho, val=val, report=report, callback=callback,
                               start_epoch=model.epoch)
    model.phase = "cascade"
    return model, report


def mc_epochs(config: TrainConfig, n_stages):
    if config.mc_epochs_per_stage is not None:
        return config.mc_epochs_per_stage
    return max(1, (config.epochs_initial + config.epochs_cascade) // n_stages)


def mc_baseline_train(model, train, config: TrainConfig, val=None, report=None, callback=None):
    """Model cascade: train stage k alone, earlier stages (and the stem) frozen.

    Stage 1 learns the full map; stage k > 1 learns on the pixels forwarded
    by the frozen stages before it.
    """
    rho = config.rho if config.rho is not None else model.rho
    report = report if report is not None else TrainReport(len(model.stages))
    epochs = mc_epochs(config, len(model.stages))
    start = 0
    try:
        for t in range(len(model.stages)):
            if t > 0:
                model.stem.set_frozen(True)
                model.stages[t - 1].set_frozen(True)
            _run_phase(model, train, config, phase=f"mc{t + 1}", epochs=epochs,
                       mode="initial" if t == 0 else "cascade", rho=rho, val=val, train_stages=[t],
                       report=report, callback=callback, start_epoch=start)
            start += epochs
    finally:
        for stage in model.stages:
            stage.set_frozen(False)
        for p in model.stem.params():
            p.frozen = p.name.endswith((".scale", ".shift"))
    model.phase = "cascade"
    return model, report


def dropout_train(model, train, config: TrainConfig, drop_rates, val=None, report=None, callback=None):
    """Deep supervision, then a second phase with random per-stage label dropout."""
    if len(drop_rates) != len(model.stages):
        raise ConfigError("need one drop rate per stage")
    model, report = initial_train(model, train, config, val, report, callback)
    _run_phase(model, train, config, phase="dropout", epochs=config.epochs_cascade, mode="dropout",
               val=val, drop_rates=list(drop_rates), report=report, callback=callback,
               start_epoch=model.epoch)
    model.phase = "cascade"
    return model, report


def lc_drop_rates(model, images, rho=None, batch_size=16):
    """Fraction of pixels that never reach each stage under cascade routing."""
    reached = np.zeros(len(model.stages))
    total = 0
    for i in range(0, len(images), batch_size):
        res = infer(images[i:i + batch_size], model, rho)
        exited = np.array([m.sum() for m in res.exit_masks], dtype=np.float64)
        reached += np.cumsum(exited[::-1])[::-1]
        total += res.labels.size
    return (1.0 - reached / total).tolist()
