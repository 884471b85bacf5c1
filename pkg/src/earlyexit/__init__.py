"""Early-exit multi-exit CNNs in numpy: joint training, entropy-gated inference, threshold screening."""

__version__ = "0.1.0"

from .config import b_lenet, load_config, parse_config
from .graph import BranchSpec, NetworkSpec, backward_joint, forward_all_exits, init_params
from .inference import ThresholdVector, entropy, evaluate, fast_inference
from .modelio import load_model, save_model
from .screening import select_knee, sweep

__all__ = [
    "BranchSpec", "NetworkSpec", "ThresholdVector", "b_lenet", "backward_joint", "entropy", "evaluate",
    "fast_inference", "forward_all_exits", "init_params", "load_config", "load_model", "parse_config",
    "save_model", "select_knee", "sweep",
]
