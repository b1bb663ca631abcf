"""Training-free ownership watermarking for on-device classifiers shipped in app packages."""

from .engine import run, run_with_tap
from .model_format import parse_model
from .reweighting import Scenario, SolveGoal, WatermarkSpec, embed_watermark
from .rooting import find_target_layer, root_model, serialize_model
from .triggers import TriggerSpec
from .verification import verify_ownership

__version__ = "0.1.0"

__all__ = [
    "Scenario", "SolveGoal", "TriggerSpec", "WatermarkSpec", "embed_watermark",
    "find_target_layer", "parse_model", "root_model", "run", "run_with_tap",
    "serialize_model", "verify_ownership",
]
