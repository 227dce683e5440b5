"""Training-free subject swapping in diffusion generation.

Capture the self- and cross-attention state of a source denoising
trajectory, then regenerate with a personalized concept token while
injecting the captured state over a step-gated schedule, so the new subject
inherits the source's layout and pose.
"""

from .attention import (
    AttentionRecord,
    SwapFlags,
    SwapSchedule,
    apply_cross_swap,
    apply_self_swap,
    decide_swap,
    scaled_attention,
)
from .bank import AttentionBank, banks_equal, load_bank, save_bank
from .errors import SubswapError
from .nulltext import NullTextBank, load_nullbank, optimize_null_text, save_nullbank
from .pipeline import (
    GenerationConfig,
    generate,
    generate_with_capture,
    initial_noise,
    subject_swap,
)
from .prompts import PromptSpec, build_target_prompt, prompt_from_text
from .sampling import (
    NoiseSchedule,
    Trajectory,
    cfg_predict,
    ddim_invert,
    ddim_step,
    load_trajectory,
    reconstruct,
    save_trajectory,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionBank",
    "AttentionRecord",
    "GenerationConfig",
    "NoiseSchedule",
    "NullTextBank",
    "PromptSpec",
    "SubswapError",
    "SwapFlags",
    "SwapSchedule",
    "Trajectory",
    "apply_cross_swap",
    "apply_self_swap",
    "banks_equal",
    "build_target_prompt",
    "cfg_predict",
    "ddim_invert",
    "ddim_step",
    "decide_swap",
    "generate",
    "generate_with_capture",
    "initial_noise",
    "load_bank",
    "load_nullbank",
    "load_trajectory",
    "optimize_null_text",
    "prompt_from_text",
    "reconstruct",
    "save_bank",
    "save_nullbank",
    "save_trajectory",
    "scaled_attention",
    "subject_swap",
    "__version__",
]
