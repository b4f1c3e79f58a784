"""Framework-free contrastive cross-modal video-language pre-training."""

import os as _os

# cap BLAS threads before numpy loads; COCO_NUM_THREADS wins over the defaults
_threads = _os.environ.get("COCO_NUM_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .config import ExperimentConfig, ModelConfig, TrainConfig, DataConfig, build_config  # noqa: E402
from .model import CoCoBert  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402

__all__ = [
    "CoCoBert", "DataConfig", "ExperimentConfig", "ModelConfig", "Tensor", "TrainConfig",
    "backward", "build_config", "no_grad",
]
__version__ = "0.1.0"
