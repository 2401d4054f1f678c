import os
import sys

# pin BLAS pools before numpy ever loads; threaded BLAS loses badly on the
# tiny shapes this suite trains at
if "numpy" not in sys.modules:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")

import numpy as np
import pytest

from qface.encoder import EncoderConfig
from qface.model import ModelConfig
from qface.tasks import desk_task_suite


TINY_ENCODER = EncoderConfig(image_size=16, patch_size=8, hidden_dim=16, depth=3,
                             heads=2, mlp_ratio=2.0, drop_path_rate=0.2,
                             fusion_layers=(1, 2, 3))


@pytest.fixture(scope="session")
def tiny_encoder():
    return TINY_ENCODER


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig(encoder=TINY_ENCODER, tasks=desk_task_suite(), decoder_heads=2)


@pytest.fixture(scope="session")
def tiny_split():
    from qface.synthdata import build_split

    return build_split(48, 16, seed=3, image_size=16)


@pytest.fixture(scope="session")
def rng64():
    return np.random.default_rng(1234)
