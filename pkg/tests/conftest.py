import pytest
import torch

from mtdaflow.config import BackboneSpec, HyperParams, SourceConvergence
from mtdaflow.data import make_synthetic
from mtdaflow.model import ModelBundle

IMAGE_SIZE = 16


@pytest.fixture
def registry():
    """3 classes, 3 targets with shifts 0.1 / 0.3 / 0.6, 10 samples per class, 16 x 16."""
    return make_synthetic(3, 3, [0.1, 0.3, 0.6], per_class=10, seed=0, image_size=IMAGE_SIZE)


@pytest.fixture
def spec():
    return BackboneSpec(kind="small_conv", d_f=32, conv_channels=[8, 8, 8])


@pytest.fixture
def hp():
    return HyperParams(
        B_s=8,
        B_t=4,
        K=6,
        K_star=3,
        K_prime=2,
        seed=0,
        eval_batch_size=64,
        source_convergence=SourceConvergence(patience=2, min_delta=1e-3, max_iters=5, check_every=1),
    )


@pytest.fixture
def model(registry, spec):
    torch.manual_seed(0)
    return ModelBundle.build(spec, registry.n_c, in_channels=3, image_size=IMAGE_SIZE)


def tiny_config_layers(tmp_path, **hp):
    """Nested config layer for a fast run into tmp_path/run."""
    return {
        "hp": {
            "B_s": 8,
            "B_t": 4,
            "K": 6,
            "K_star": 3,
            "K_prime": 2,
            "eval_batch_size": 64,
            "source_convergence": {"max_iters": 5, "check_every": 1, "patience": 2},
            **hp,
        },
        "backbone": {"d_f": 32, "conv_channels": [8, 8, 8]},
        "data": {"image_size": IMAGE_SIZE, "synthetic": {"n_c": 3, "N": 3, "shifts": [0.1, 0.3, 0.6], "per_class": 10}},
        "output_dir": str(tmp_path / "run"),
        "progress": False,
    }
