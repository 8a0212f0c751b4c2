"""Layer cascade: staged inference with per-pixel early exit.

A :class:`CascadeModel` is one network cut into stages. The stem runs
densely; each stage then runs its body and head as region convolutions on
the pixels still active, and pixels whose top softmax probability reaches
``rho`` exit with that stage's argmax label. The final stage labels
everything left. Stage label maps are disjoint, so merging is a plain
union.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantViolation
from .layers import Conv, ResidualBlock, Sequential
from .regionconv import mask_from_confidence
from .tensorcore import IGNORE_LABEL, softmax_channels, upsample_labels


@dataclass
class Stage:
    transition: Conv | None
    blocks: list[ResidualBlock]
    head: Sequential
    dilation: int = 1

    def __post_init__(self):
        layers = ([self.transition] if self.transition is not None else []) + list(self.blocks)
        self.body = Sequential(layers)

    @property
    def out_classes(self):
        return self.head.conv_layers()[-1].spec.out_channels

    def params(self):
        return self.body.params() + self.head.params()

    def conv_layers(self):
        return self.body.conv_layers() + self.head.conv_layers()

    def set_frozen(self, frozen):
        for p in self.params():
            # frozen norms stay frozen regardless
            if p.name.endswith((".scale", ".shift")):
                continue
            p.frozen = frozen


@dataclass
class CascadeModel:
    stem: Sequential
    stages: list[Stage]
    rho: float
    class_count: int
    output_stride: int = 1
    stage_rhos: list[float] | None = None
    phase: str | None = None
    epoch: int = 0
    config: object = None

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a cascade needs at least one stage")
        for k, s in enumerate(self.stages):
            if s.out_classes != self.class_count:
                raise ConfigError(f"stage {k + 1} head has {s.out_classes} outputs, expected {self.class_count}")
            for conv in s.conv_layers():
                if conv.spec.stride != 1:
                    raise ConfigError(f"stage {k + 1} contains a strided conv; staged layers must be stride 1")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")

    def params(self):
        return self.stem.params() + [p for s in self.stages for p in s.params()]

    def named_params(self):
        return {p.name: p for p in self.params()}

    def param_count(self):
        return sum(p.data.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def rho_for(self, k, rho=None):
        if rho is not None:
            return rho
        if self.stage_rhos is not None:
            return self.stage_rhos[k]
        return self.rho


@dataclass
class StageCost:
    name: str
    active_count: int = 0
    flops: int = 0
    wall_time: float = 0.0


@dataclass
class FlopLedger:
    entries: list[StageCost] = field(default_factory=list)

    def add(self, name, active_count, flops, wall_time):
        for e in self.entries:
            if e.name == name:
                e.active_count += active_count
                e.flops += flops
                e.wall_time += wall_time
                return e
        e = StageCost(name, active_count, flops, wall_time)
        self.entries.append(e)
        return e

    def __getitem__(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def total_flops(self):
        return sum(e.flops for e in self.entries)

    @property
    def total_time(self):
        return sum(e.wall_time for e in self.entries)

    def merge(self, other: FlopLedger):
        for e in other.entries:
            self.add(e.name, e.active_count, e.flops, e.wall_time)

    def to_dict(self):
        return {
            "stages": [vars(e).copy() for e in self.entries],
            "total_flops": self.total_flops,
            "total_time": self.total_time,
        }


@dataclass
class StagePrediction:
    logits: np.ndarray
    probs: np.ndarray
    exit_mask: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray


def stage_name(k):
    return f"stage{k + 1}"


def run_stem(image, model: CascadeModel, ledger: FlopLedger | None = None):
    t0 = time.perf_counter()
    feats = model.stem.forward(image)
    if ledger is not None:
        flops = sum(c.last_flops for c in model.stem.conv_layers())
        ledger.add("stem", image.shape[0] * image.shape[2] * image.shape[3], flops, time.perf_counter() - t0)
    return feats


def run_stage(features, active, stage: Stage, ledger: FlopLedger | None = None, name="stage"):
    """Run one stage on the ``active`` pixels.

    ``active=None`` runs the stage densely. Otherwise every conv is a region
    conv on ``active``, features outside ``active`` pass through the masked
    residual blocks untouched, and logits are zero outside ``active``. A
    stage with a channel transition has zero features outside ``active``.
    """
    n, _, h, w = features.shape
    if active is not None:
        active = np.asarray(active, dtype=bool)
        if active.shape == (h, w):
            active = np.broadcast_to(active, (n, h, w))
        if active.shape != (n, h, w):
            raise ConfigError(f"active mask {active.shape} does not match features {features.shape}")
    t0 = time.perf_counter()
    if active is not None and not active.any():
        if stage.transition is not None:
            out = np.zeros((n, stage.transition.spec.out_channels, h, w), dtype=features.dtype)
        else:
            out = features
        logits = np.zeros((n, stage.out_classes, h, w), dtype=features.dtype)
        if ledger is not None:
            ledger.add(name, 0, 0, time.perf_counter() - t0)
        return out, logits
    out = stage.body.forward(features, active)
    logits = stage.head.forward(out, active)
    if ledger is not None:
        count = n * h * w if active is None else int(np.count_nonzero(active))
        flops = sum(c.last_flops for c in stage.conv_layers())
        ledger.add(name, count, flops, time.perf_counter() - t0)
    return out, logits


def route(probs, active, rho: float, is_last: bool):
    """Return ``(StagePrediction, forward_mask)`` for one stage's output."""
    active = np.asarray(active, dtype=bool)
    if is_last:
        exit_mask = active.copy()
        forward = np.zeros_like(active)
    else:
        exit_mask, forward = mask_from_confidence(probs, rho, active)
    argmax = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    labels = np.where(exit_mask, argmax, IGNORE_LABEL).astype(np.uint8 if probs.shape[1] <= 255 else np.int64)
    confidences = np.where(exit_mask, conf, 0).astype(probs.dtype)
    return StagePrediction(None, probs, exit_mask, labels, confidences), forward


def merge(predictions, full_shape=None):
    """Union of the stages' exit label maps; each pixel must be covered once."""
    if not predictions:
        raise InvariantViolation("nothing to merge")
    shape = predictions[0].exit_mask.shape if full_shape is None else tuple(full_shape)
    coverage = np.zeros(shape, dtype=np.int32)
    out = np.full(shape, IGNORE_LABEL, dtype=predictions[0].labels.dtype)
    for pred in predictions:
        coverage += pred.exit_mask
        out = np.where(pred.exit_mask, pred.labels, out)
    if (coverage != 1).any():
        bad = int((coverage != 1).sum())
        raise InvariantViolation(f"{bad} pixels covered {coverage.min()}..{coverage.max()} times by stage exits")
    return out


@dataclass
class InferenceResult:
    labels: np.ndarray  # merged labels at prediction resolution, (n, h, w)
    exit_masks: list[np.ndarray]
    ledger: FlopLedger
    probs: list[np.ndarray | None]
    predictions: list[StagePrediction]
    output_stride: int = 1

    def upsampled(self):
        return upsample_labels(self.labels, self.output_stride)

    def exit_fractions(self):
        total = self.labels.size
        return [float(m.sum()) / total for m in self.exit_masks]


def _as_batch(image):
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4:
        raise ConfigError(f"expected a CHW or NCHW image, got shape {image.shape}")
    return image


def infer(image, model: CascadeModel, rho_override: float | None = None) -> InferenceResult:
    """Run the full cascade on an image or batch of images."""
    image = _as_batch(image)
    dtype = model.stem.params()[0].data.dtype if model.stem.params() else image.dtype
    image = image.astype(dtype, copy=False)
    ledger = FlopLedger()
    feats = run_stem(image, model, ledger)
    n, _, h, w = feats.shape
    active = np.ones((n, h, w), dtype=bool)
    preds, probs_out = [], []
    last = len(model.stages) - 1
    for k, stage in enumerate(model.stages):
        name = stage_name(k)
        if not active.any():
            ledger.add(name, 0, 0, 0.0)
            empty = np.zeros((n, h, w), dtype=bool)
            preds.append(StagePrediction(None, None, empty, np.full((n, h, w), IGNORE_LABEL, np.uint8),
                                         np.zeros((n, h, w), dtype=dtype)))
            probs_out.append(None)
            continue
        feats, logits = run_stage(feats, active, stage, ledger, name)
        probs = softmax_channels(logits)
        pred, active = route(probs, active, model.rho_for(k, rho_override), k == last)
        pred.logits = logits
        preds.append(pred)
        probs_out.append(probs)
    labels = merge(preds, (n, h, w))
    return InferenceResult(labels, [p.exit_mask for p in preds], ledger, probs_out, preds,
                           model.output_stride)


def dense_forward(image, model: CascadeModel, ledger: FlopLedger | None = None):
    """All stages on all pixels, no routing. Returns per-stage logits."""
    image = _as_batch(image)
    dtype = model.stem.params()[0].data.dtype if model.stem.params() else image.dtype
    feats = run_stem(image.astype(dtype, copy=False), model, ledger)
    logits = []
    for k, stage in enumerate(model.stages):
        feats, lg = run_stage(feats, None, stage, ledger, stage_name(k))
        logits.append(lg)
    return logits
