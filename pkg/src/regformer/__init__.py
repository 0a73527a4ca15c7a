"""Region-masked transformer for single-image deraining, from scratch.

The package is organized by concern:

* :mod:`regformer.tensor` -- float64 tensors + reverse-mode autodiff tape
* :mod:`regformer.nn` -- conv/layer-norm/activation kernels, AdamW, schedule
* :mod:`regformer.model` -- region masks, masked attention, the full network
* :mod:`regformer.data` -- image I/O, synthetic rain, patch sampling
* :mod:`regformer.metrics` -- Y-channel PSNR/SSIM and CSV reports
* :mod:`regformer.oracles` -- naive reference implementations for testing
* :mod:`regformer.cli` -- train/infer/eval/mask-dump/synth-data commands
"""

from .model import ModelConfig, Regformer, init_params, param_count
from .nn import AdamW, ParamStore, cosine_lr
from .tensor import Tape, Tensor

__all__ = [
    "ModelConfig",
    "Regformer",
    "init_params",
    "param_count",
    "AdamW",
    "ParamStore",
    "cosine_lr",
    "Tape",
    "Tensor",
]

__version__ = "0.1.0"
