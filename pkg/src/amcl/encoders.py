"""Embedding networks and the registry that names them."""
import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ContractViolation


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    """Four residual stages (w, 2w, 4w, 8w channels) and global average pooling."""

    def __init__(self, base_width=64, in_channels=1):
        super().__init__()
        w = base_width
        self.stem = nn.Sequential(nn.Conv2d(in_channels, w, 3, 2, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        self.stages = nn.Sequential(
            BasicBlock(w, w, 1),
            BasicBlock(w, 2 * w, 2),
            BasicBlock(2 * w, 4 * w, 2),
            BasicBlock(4 * w, 8 * w, 2),
        )
        self.embed_dim = 8 * w

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.stages(self.stem(x)), 1).flatten(1)


class SimpleCNNEncoder(nn.Module):
    """Plain conv/pool stack, a light alternative to the residual encoder."""

    def __init__(self, base_width=32, in_channels=1):
        super().__init__()
        layers, cin = [], in_channels
        for i in range(4):
            cout = base_width * 2 ** i
            layers += [nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(), nn.MaxPool2d(2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.embed_dim = cin

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


class Encoder(nn.Module):
    """Shape-checking wrapper: (n, 64, 64) or (n, 1, 64, 64) images -> (n, embed_dim)."""

    def __init__(self, body, architecture_id):
        super().__init__()
        self.body = body
        self.architecture_id = architecture_id
        self.embed_dim = body.embed_dim

    def forward(self, x):
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, 64, 64):
            raise ContractViolation(f"encoder input must have shape (n, 1, 64, 64), got {tuple(x.shape)}")
        return self.body(x)


ENCODERS = {
    "resnet-small": lambda: ResNetEncoder(64),
    "resnet-tiny": lambda: ResNetEncoder(16),
    "simple-cnn": lambda: SimpleCNNEncoder(32),
}


def register_encoder(name, factory):
    """Add an encoder factory; ``factory()`` must return a module with an ``embed_dim``."""
    ENCODERS[name] = factory


def build_encoder(architecture_id="resnet-small", seed=None):
    if architecture_id not in ENCODERS:
        raise ContractViolation(f"unknown encoder {architecture_id!r}; known: {sorted(ENCODERS)}")
    if seed is not None:
        torch.manual_seed(seed)
    return Encoder(ENCODERS[architecture_id](), architecture_id)


class ProjectionHead(nn.Module):
    def __init__(self, dim, hidden=None, out=None):
        super().__init__()
        hidden = hidden or dim
        out = out or dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, out))

    def forward(self, x):
        return self.net(x)
