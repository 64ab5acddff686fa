"""Joint-attention analysis and prompt-based editing on a toy MM-DiT."""

from .editing import EditConfig, compare_replace_modes, edit_real, edit_synthetic
from .flow import FlowState, TimeGrid, euler_sample, guided_sample, invert
from .model import HookSet, ModelConfig, ToyMMDiT, encode_prompt

__all__ = [
    "EditConfig",
    "FlowState",
    "HookSet",
    "ModelConfig",
    "TimeGrid",
    "ToyMMDiT",
    "compare_replace_modes",
    "edit_real",
    "edit_synthetic",
    "encode_prompt",
    "euler_sample",
    "guided_sample",
    "invert",
]

__version__ = "0.1.0"
