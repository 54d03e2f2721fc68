"""Progressive segmented training: continual learning on one network by freezing
importance-selected units task by task, with a rehearsal memory."""

from .datasets import LabeledDataset, TaskStream, make_stream, synth_gaussians
from .model import LayerSpec, SegmentMap, UnitRef, build_network, forward
from .training import STRATEGIES, RunMetrics, TrainConfig, run_strategy

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset", "TaskStream", "make_stream", "synth_gaussians",
    "LayerSpec", "SegmentMap", "UnitRef", "build_network", "forward",
    "STRATEGIES", "RunMetrics", "TrainConfig", "run_strategy",
]
