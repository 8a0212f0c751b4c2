"""Mini three-stage backbone and its binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"LCKP" | u32 version=1 | u8 phase | u32 epoch | u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64)
                | u8 rank | rank * u64 dims | raw element data

Phase is 0 after initial training, 1 after cascade training and 2 for an
untrained model. Optimizer velocities are stored as ordinary tensors under
``velocity/<param name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cascade import CascadeModel, Stage
from .errors import ConfigError, FormatError, ShapeMismatchError, VersionError
from .layers import Affine, Conv, ReLU, ResidualBlock, Sequential
from .tensorcore import ConvSpec, OptimizerState, Param, he_normal

MAGIC = b"LCKP"
VERSION = 1
PHASES = {"initial": 0, "cascade": 1, None: 2}
PHASE_NAMES = {v: k for k, v in PHASES.items()}
DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}
HEAD_STD = 0.01


@dataclass
class BackboneConfig:
    class_count: int = 4
    in_channels: int = 3
    # (out_channels, kernel, stride) per stem conv
    stem: list = field(default_factory=lambda: [[16, 3, 2], [32, 3, 2]])
    stage_blocks: list = field(default_factory=lambda: [2, 2, 2])
    stage_channels: list = field(default_factory=lambda: [32, 48, 64])
    stage_dilations: list = field(default_factory=lambda: [1, 2, 4])
    head_channels: int = 32
    rho: float = 0.985
    stage_rhos: list | None = None
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = len(self.stage_blocks)
        if n < 1:
            raise ConfigError("need at least one stage")
        if len(self.stage_channels) != n or len(self.stage_dilations) != n:
            raise ConfigError("stage_blocks, stage_channels and stage_dilations must have equal length")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if min(self.stage_channels) < 1 or min(self.stage_dilations) < 1 or min(self.stage_blocks) < 0:
            raise ConfigError("stage channels/dilations must be positive and block counts non-negative")
        if self.head_channels < 1:
            raise ConfigError("head_channels must be positive")
        if not self.stem:
            raise ConfigError("stem needs at least one conv")
        for entry in self.stem:
            if len(entry) != 3 or min(entry) < 1:
                raise ConfigError(f"bad stem entry {entry}; expected [out_channels, kernel, stride]")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if self.stage_rhos is not None and len(self.stage_rhos) != n:
            raise ConfigError("stage_rhos must have one entry per stage")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def output_stride(self):
        s = 1
        for _, _, stride in self.stem:
            s *= stride
        return s

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _conv(rng, name, spec, dtype, std=None):
    if std is None:
        w = he_normal(rng, spec.weight_shape, dtype)
    else:
        w = (rng.standard_normal(spec.weight_shape) * std).astype(dtype)
    bias = Param(f"{name}.bias", np.zeros(spec.out_channels, dtype=dtype)) if spec.has_bias else None
    return Conv(spec, Param(f"{name}.weight", w), bias)


def _affine(name, channels, dtype):
    return Affine(Param(f"{name}.scale", np.ones(channels, dtype=dtype)),
                  Param(f"{name}.shift", np.zeros(channels, dtype=dtype)))


def build_model(config: BackboneConfig) -> CascadeModel:
    """Deterministic function of ``config`` (including its seed)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    stem_layers = []
    cin = config.in_channels
    for i, (cout, k, stride) in enumerate(config.stem):
        spec = ConvSpec(cin, cout, (k, k), stride, 1, k // 2)
        stem_layers += [_conv(rng, f"stem.{i}", spec, dt), _affine(f"stem.{i}.norm", cout, dt), ReLU()]
        cin = cout
    stages = []
    for s, (nblocks, ch, dil) in enumerate(zip(config.stage_blocks, config.stage_channels,
                                               config.stage_dilations)):
        prefix = f"stage{s + 1}"
        transition = None
        if ch != cin:
            transition = _conv(rng, f"{prefix}.transition", ConvSpec.same(cin, ch, 1), dt)
        blocks = []
        for b in range(nblocks):
            bp = f"{prefix}.block{b}"
            blocks.append(ResidualBlock(Sequential([
                _affine(f"{bp}.norm1", ch, dt), ReLU(),
                _conv(rng, f"{bp}.conv1", ConvSpec.same(ch, ch, 3, dil), dt),
                _affine(f"{bp}.norm2", ch, dt), ReLU(),
                _conv(rng, f"{bp}.conv2", ConvSpec.same(ch, ch, 3, dil), dt),
            ])))
        head = Sequential([
            _conv(rng, f"{prefix}.head.conv1", ConvSpec.same(ch, config.head_channels, 3), dt, HEAD_STD),
            ReLU(),
            _conv(rng, f"{prefix}.head.conv2", ConvSpec.same(config.head_channels, config.class_count, 1),
                  dt, HEAD_STD),
        ])
        stages.append(Stage(transition, blocks, head, dil))
        cin = ch
    return CascadeModel(Sequential(stem_layers), stages, config.rho, config.class_count,
                        config.output_stride, config.stage_rhos, None, 0, config)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CascadeModel, path, optimizer: OptimizerState | None = None):
    tensors = [(name, p.data) for name, p in model.named_params().items()]
    if optimizer is not None:
        tensors += [(f"velocity/{name}", v) for name, v in sorted(optimizer.velocity.items())]
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IBII", VERSION, PHASES[model.phase], model.epoch, len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_TAGS:
            raise ConfigError(f"cannot store dtype {arr.dtype} ({name})")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BB", DTYPE_TAGS[arr.dtype], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    path = Path(path)
    path.write_bytes(bytes(buf))
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.name = None

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", offset=self.pos, name=self.name)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Parse a checkpoint file into ``(phase, epoch, {name: array})``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    phase_tag, epoch, count = r.unpack("<BII", "header")
    if phase_tag not in PHASE_NAMES:
        raise FormatError(f"unknown phase marker {phase_tag}", offset=8)
    tensors = {}
    for _ in range(count):
        r.name = None
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not utf-8", offset=r.pos - nlen) from None
        r.name = name
        tag, rank = r.unpack("<BB", "dtype/rank")
        if tag not in TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", offset=r.pos - 2, name=name)
        dims = r.unpack(f"<{rank}Q", "dims")
        dtype = TAG_DTYPES[tag].newbyteorder("<")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = r.take(nbytes, "data")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(TAG_DTYPES[tag])
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", offset=r.pos)
    return PHASE_NAMES[phase_tag], epoch, tensors


def load_checkpoint(path, model_or_config, optimizer: OptimizerState | None = None) -> CascadeModel:
    """Load weights into a model (built from a config if one is given)."""
    if isinstance(model_or_config, BackboneConfig):
        model = build_model(model_or_config)
    else:
        model = model_or_config
    phase, epoch, tensors = read_checkpoint(path)
    params = model.named_params()
    stored = {k: v for k, v in tensors.items() if not k.startswith("velocity/")}
    bad = sorted(set(params) ^ set(stored))
    bad += sorted(n for n in set(params) & set(stored) if params[n].data.shape != stored[n].shape
                  or params[n].data.dtype != stored[n].dtype)
    if bad:
        raise ShapeMismatchError(bad)
    for name, p in params.items():
        p.data = stored[name].copy()
        p.grad = None
    if optimizer is not None:
        optimizer.velocity = {k[len("velocity/"):]: v.copy() for k, v in tensors.items()
                              if k.startswith("velocity/")}
    model.phase = phase
    model.epoch = epoch
    return model
