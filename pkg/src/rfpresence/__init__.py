"""rfpresence: device-free human presence detection from WiFi channel state.

Synthesizes MIMO-OFDM CSI streams, preprocesses windows into magnitude and
antenna-phase-difference images, classifies them with a from-scratch
two-branch CNN, and votes per-second presence decisions online.
"""

__version__ = "0.1.0"

from .csi import (  # noqa: F401
    CsiFrame,
    CsiStream,
    CsiWindow,
    StreamHeader,
    downselect_subcarriers,
    stack_window,
    validate_window,
)
from .preprocess import InputImagePair, PipelineVariant, make_input  # noqa: F401
from .model import Model, build_model_spec, count_params, load_model, save_model  # noqa: F401
from .pipeline import Dataset, TrainConfig, build_dataset, evaluate, train  # noqa: F401
from .detector import DetectorConfig, DetectionTimeline, run_detection, vote_second  # noqa: F401
