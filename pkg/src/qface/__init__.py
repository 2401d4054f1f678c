"""qface: query-driven multi-task face analysis at desk scale.

A from-scratch differentiable tensor engine, a ViT-style encoder with
masked-image pretraining, multi-stage feature fusion with stage embeddings,
a query-driven cross-attention decoder, and a five-task synthetic face
suite for end-to-end training and ablation.
"""
import os as _os
import sys as _sys

# QFACE_THREADS caps worker parallelism repo-wide. The model's tensors are
# tiny, so threaded BLAS loses to its own synchronization; default the BLAS
# pools to that cap (1 if unset) unless numpy is already loaded or the user
# pinned the knobs themselves.
if "numpy" not in _sys.modules:
    _cap = _os.environ.get("QFACE_THREADS", "1")
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)

from .autodiff import Tensor, backward, grad_check
from .encoder import EncoderConfig
from .model import ModelConfig, QFace
from .baseline import MultiHead
from .tasks import TaskSpec, desk_task_suite, paper_task_suite
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "EncoderConfig", "ModelConfig",
    "QFace", "MultiHead", "TaskSpec", "desk_task_suite", "paper_task_suite",
    "RngStream", "__version__",
]
