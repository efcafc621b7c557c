import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from amcl.datasets import SyntheticVeinConfig, generate_synthetic_dataset
from amcl.encoders import register_encoder
from amcl.gan import MaskGenerator, init_dcgan_weights

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


class ToyMLP(nn.Module):
    """Two-layer embedding used by the gradient and ascent checks."""

    def __init__(self, hidden=6, out=4, pool=8):
        super().__init__()
        self.pool = pool
        self.fc1 = nn.Linear((64 // pool) ** 2, hidden)
        self.fc2 = nn.Linear(hidden, out)
        self.embed_dim = out

    def forward(self, x):
        h = nn.functional.avg_pool2d(x, self.pool).flatten(1)
        return self.fc2(torch.tanh(self.fc1(h)))


register_encoder("toy-mlp", ToyMLP)


def toy_generator(seed=0, channels=(4, 4, 4, 4), dtype=torch.float64, scale=1.0):
    torch.manual_seed(seed)
    g = MaskGenerator(channels=channels)
    g.apply(init_dcgan_weights)
    # calibrate the batch-norm running statistics so that evaluation-mode fields
    # have unit-scale activations, as they would after training
    for m in g.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.momentum = None
    g.train()
    with torch.no_grad():
        g(torch.randn(512, 128))
        g.layers[-1][0].weight.mul_(scale)
    return g.to(dtype).eval()


@pytest.fixture(scope="session")
def small_split():
    return generate_synthetic_dataset(SyntheticVeinConfig(num_classes=4, images_per_class_per_session=3, seed=7))


@pytest.fixture(scope="session")
def reference_split():
    return generate_synthetic_dataset(SyntheticVeinConfig(seed=42))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
