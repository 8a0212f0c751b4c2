"""Layer cascade semantic segmentation on a numpy tensor engine."""
from .backbone import BackboneConfig, build_model, load_checkpoint, save_checkpoint
from .cascade import CascadeModel, FlopLedger, dense_forward, infer, merge, route, run_stage
from .errors import (
    ConfigError,
    FormatError,
    InvariantViolation,
    ShapeMismatchError,
    StateError,
    ValidationError,
    VersionError,
)
from .regionconv import flop_count, mask_from_confidence, masked_residual, region_conv_forward
from .training import TrainConfig, cascade_train, initial_train, lr_schedule, mc_baseline_train

__version__ = "0.1.0"
