from .analysis import boundary_fraction, difficulty_partition, stage_stats
from .data import SynthSample, gen_dataset
from .metrics import confusion_matrix, miou
