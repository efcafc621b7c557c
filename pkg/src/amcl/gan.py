"""DCGAN-style generator/discriminator pair that models the block-mask distribution."""
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn
from torch.nn import functional as F

from ._rng import as_generator
from .checkpoint import load_checkpoint, load_module, save_module
from .exceptions import ContractViolation, ModeCollapseError
from .masking import MaskCorpus, snap_to_grid

logger = logging.getLogger(__name__)

LATENT_DIM = 128
GENERATOR_CHANNELS = (2048, 1024, 512, 256)
DISCRIMINATOR_CHANNELS = (32, 64, 128)

# (channels, height, width) after each layer for the default architecture
GENERATOR_TABLE = [(2048, 4, 4), (1024, 8, 8), (512, 16, 16), (256, 32, 32), (1, 64, 64)]
DISCRIMINATOR_TABLE = [(32, 16, 16), (64, 8, 8), (128, 4, 4), (1, 1, 1)]


def _activation(name, negative_slope):
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(negative_slope)
    raise ContractViolation(f"unknown activation {name!r}")


class MaskGenerator(nn.Module):
    """Transposed-convolution stack: latent (d, 1, 1) -> field (1, S, S) in [-1, 1].

    Every hidden layer doubles the resolution from 4x4; with the default four
    hidden widths the output is 64x64.
    """

    def __init__(self, latent_dim=LATENT_DIM, channels=GENERATOR_CHANNELS, activation="relu", negative_slope=0.2):
        super().__init__()
        self.latent_dim = latent_dim
        self.channels = tuple(int(c) for c in channels)
        self.activation = activation
        self.negative_slope = negative_slope
        layers = []
        cin = latent_dim
        for i, cout in enumerate(self.channels):
            stride, padding = (1, 0) if i == 0 else (2, 1)
            layers.append(nn.Sequential(
                nn.ConvTranspose2d(cin, cout, 4, stride, padding, bias=False),
                nn.BatchNorm2d(cout),
                _activation(activation, negative_slope),
            ))
            cin = cout
        layers.append(nn.Sequential(nn.ConvTranspose2d(cin, 1, 4, 2, 1, bias=True), nn.Tanh()))
        self.layers = nn.ModuleList(layers)

    @property
    def output_size(self):
        return 4 * 2 ** len(self.channels)

    def architecture(self):
        return {"latent_dim": self.latent_dim, "channels": list(self.channels),
                "activation": self.activation, "negative_slope": self.negative_slope}

    def expected_shapes(self):
        shapes = [(c, 4 * 2 ** i, 4 * 2 ** i) for i, c in enumerate(self.channels)]
        return shapes + [(1, self.output_size, self.output_size)]

    def _check_latent(self, z):
        if z.ndim == 2:
            z = z[:, :, None, None]
        if z.ndim != 4 or z.shape[1:] != (self.latent_dim, 1, 1):
            raise ContractViolation(f"latent batch must have shape (n, {self.latent_dim}), got {tuple(z.shape)}")
        return z

    def forward(self, z):
        h = self._check_latent(z)
        for layer in self.layers:
            h = layer(h)
        return h

    def forward_shapes(self, z):
        """Per-layer output shapes (without the batch axis) for an architecture audit."""
        h = self._check_latent(z)
        shapes = []
        for layer in self.layers:
            h = layer(h)
            shapes.append(tuple(h.shape[1:]))
        return shapes


class MaskDiscriminator(nn.Module):
    """Convolution stack: (1, 64, 64) -> probability of being a real mask."""

    def __init__(self, channels=DISCRIMINATOR_CHANNELS, negative_slope=0.2, activation="leaky_relu"):
        super().__init__()
        self.channels = tuple(int(c) for c in channels)
        if len(self.channels) != 3:
            raise ContractViolation("the discriminator has exactly three hidden layers")
        self.negative_slope = negative_slope
        self.activation = activation
        c1, c2, c3 = self.channels
        act = lambda: _activation(activation, negative_slope)  # noqa: E731
        self.layers = nn.ModuleList([
            nn.Sequential(nn.Conv2d(1, c1, 8, 4, 2, bias=False), nn.BatchNorm2d(c1), act()),
            nn.Sequential(nn.Conv2d(c1, c2, 4, 2, 1, bias=False), nn.BatchNorm2d(c2), act()),
            nn.Sequential(nn.Conv2d(c2, c3, 4, 2, 1, bias=False), nn.BatchNorm2d(c3), act()),
            nn.Conv2d(c3, 1, 4, 1, 0, bias=True),
        ])

    def architecture(self):
        return {"channels": list(self.channels), "activation": self.activation,
                "negative_slope": self.negative_slope}

    def expected_shapes(self):
        c1, c2, c3 = self.channels
        return [(c1, 16, 16), (c2, 8, 8), (c3, 4, 4), (1, 1, 1)]

    def _check_input(self, x):
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, 64, 64):
            raise ContractViolation(f"discriminator input must have shape (n, 1, 64, 64), got {tuple(x.shape)}")
        return x

    def logits(self, x):
        h = self._check_input(x)
        for layer in self.layers:
            h = layer(h)
        return h.reshape(-1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))

    def forward_shapes(self, x):
        h = self._check_input(x)
        shapes = []
        for layer in self.layers:
            h = layer(h)
            shapes.append(tuple(h.shape[1:]))
        return shapes


def init_dcgan_weights(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def generator_forward(g, z):
    """Continuous mask field(s) ``G(z)``; accepts one latent vector or a batch."""
    z = torch.as_tensor(z, dtype=next(g.parameters()).dtype)
    single = z.ndim == 1
    out = g(z[None] if single else z)
    return out[0] if single else out


def discriminator_forward(d, field):
    field = torch.as_tensor(field, dtype=next(d.parameters()).dtype)
    single = field.ndim == 3
    out = d(field[None] if single else field)
    return out[0] if single else out


def discriminator_loss(real_logits, fake_logits, real_label=1.0):
    """Negated GAN value: -(E log D(x) + E log(1 - D(G(z)))).

    ``real_label < 1`` gives one-sided label smoothing.
    """
    return (F.binary_cross_entropy_with_logits(real_logits, torch.full_like(real_logits, real_label))
            + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))


def generator_loss(fake_logits, non_saturating=True):
    if non_saturating:
        # -E log D(G(z))
        return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    # E log(1 - D(G(z))), minimised by the generator
    return -F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))


def gan_value(d, g, real, z):
    """E_x log D(x) + E_z log(1 - D(G(z)))."""
    real_logits = d.logits(real)
    fake_logits = d.logits(g(z))
    return -discriminator_loss(real_logits, fake_logits)


def encode_masks(masks):
    """{0, 1} keep/occlude masks -> {-1, +1} targets for the tanh output."""
    return 2.0 * np.asarray(masks, dtype=np.float32) - 1.0


def binarize(field):
    """Keep (1) where the continuous field is positive, occlude (0) elsewhere."""
    if isinstance(field, torch.Tensor):
        return (field > 0).to(field.dtype)
    return (np.asarray(field) > 0).astype(np.uint8)


@dataclass(frozen=True)
class GanTrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 2e-4
    betas: tuple = (0.5, 0.999)
    seed: int = 0
    latent_dim: int = LATENT_DIM
    generator_channels: tuple = GENERATOR_CHANNELS
    discriminator_channels: tuple = DISCRIMINATOR_CHANNELS
    generator_activation: str = "relu"
    discriminator_negative_slope: float = 0.2
    non_saturating: bool = True
    real_label: float = 0.9
    instance_noise: float = 0.5
    collapse_threshold: float = 1e-6
    collapse_patience: int = 3

    def validate(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ContractViolation("epochs must be non-negative, batch_size and learning_rate positive")
        if not 0.0 < self.real_label <= 1.0 or self.instance_noise < 0:
            raise ContractViolation("real_label must lie in (0, 1] and instance_noise be non-negative")
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise ContractViolation(f"momentum decays must lie in (0, 1), got {self.betas}")
        return self

    def build(self):
        g = MaskGenerator(self.latent_dim, self.generator_channels, self.generator_activation)
        d = MaskDiscriminator(self.discriminator_channels, self.discriminator_negative_slope)
        return g, d


class _MaskSource:
    """Uniform access to masks given as a corpus or a (n, 64, 64) array."""

    def __init__(self, masks):
        if isinstance(masks, MaskCorpus):
            self.corpus, self.array = masks, None
            self.n = len(masks)
        else:
            arr = np.asarray(masks)
            if arr.ndim != 3 or arr.shape[1:] != (64, 64):
                raise ContractViolation(f"masks must have shape (n, 64, 64), got {arr.shape}")
            self.corpus, self.array = None, arr
            self.n = len(arr)
        if self.n == 0:
            raise ContractViolation("the mask corpus is empty")

    def batch(self, idx):
        m = self.corpus.to_array(idx) if self.corpus is not None else self.array[idx]
        return torch.from_numpy(encode_masks(m))[:, None]


def train_gan(corpus, config=None, generator=None, discriminator=None, callback=None):
    """Alternating minimax training on a mask corpus.

    Returns ``(generator, discriminator, trace)`` with ``trace`` a list of
    ``(epoch, d_loss, g_loss)`` epoch means.  Both networks see Gaussian
    instance noise on their inputs, annealed linearly from
    ``instance_noise`` to zero over the run; without it the discriminator
    separates exact +-1 masks from tanh outputs at once and the generator
    collapses.  Raises
    :class:`ModeCollapseError` when the discriminator loss stays below
    ``collapse_threshold`` for ``collapse_patience`` consecutive epochs.
    """
    config = (config or GanTrainConfig()).validate()
    source = _MaskSource(corpus)
    torch.manual_seed(config.seed)
    if generator is None or discriminator is None:
        generator, discriminator = config.build()
        generator.apply(init_dcgan_weights)
        discriminator.apply(init_dcgan_weights)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=tuple(config.betas))
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=tuple(config.betas))
    rng = torch.Generator().manual_seed(config.seed)
    trace, low = [], 0
    generator.train()
    discriminator.train()
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(source.n, generator=rng).numpy()
        d_sum = g_sum = 0.0
        batches = 0
        sigma = config.instance_noise * (1.0 - (epoch - 1) / config.epochs)

        def noisy(x):
            return x + sigma * torch.randn(x.shape, generator=rng) if sigma > 0 else x

        for start in range(0, source.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            real = source.batch(idx)
            z = torch.randn(len(idx), config.latent_dim, generator=rng)

            fake = generator(z)
            opt_d.zero_grad()
            d_loss = discriminator_loss(discriminator.logits(noisy(real)), discriminator.logits(noisy(fake.detach())),
                                        config.real_label)
            d_loss.backward()
            opt_d.step()

            opt_g.zero_grad()
            g_loss = generator_loss(discriminator.logits(noisy(fake)), config.non_saturating)
            g_loss.backward()
            opt_g.step()

            d_sum += d_loss.item()
            g_sum += g_loss.item()
            batches += 1
        row = (epoch, d_sum / batches, g_sum / batches)
        trace.append(row)
        logger.info("gan epoch %d d_loss %.4f g_loss %.4f", *row)
        if callback is not None:
            callback(row)
        low = low + 1 if row[1] < config.collapse_threshold else 0
        if low >= config.collapse_patience:
            raise ModeCollapseError(
                f"discriminator loss below {config.collapse_threshold:g} for {low} consecutive epochs "
                f"(last d_loss={row[1]:.3g}, g_loss={row[2]:.3g}); the generator has likely collapsed")
    generator.eval()
    discriminator.eval()
    return generator, discriminator, trace


def sample_latents(n, latent_dim=LATENT_DIM, random_state=None):
    rng = as_generator(random_state)
    return rng.standard_normal((n, latent_dim)).astype(np.float32)


@torch.no_grad()
def sample_masks(g_star, zs, snap=False, patch_size=16):
    """Binary (n, 64, 64) masks from a frozen generator; batch-norm statistics stay fixed."""
    was_training = g_star.training
    g_star.eval()
    try:
        z = torch.as_tensor(np.asarray(zs), dtype=next(g_star.parameters()).dtype)
        if z.ndim == 1:
            z = z[None]
        out = []
        for chunk in torch.split(z, 256):
            out.append(binarize(g_star(chunk))[:, 0].numpy().astype(np.uint8))
        masks = np.concatenate(out) if out else np.zeros((0, 64, 64), np.uint8)
    finally:
        g_star.train(was_training)
    return snap_to_grid(masks, patch_size) if snap else masks


def save_generator(path, g, meta=None):
    return save_module(path, g, "mask-generator", {"architecture": g.architecture(), **(meta or {})})


def save_discriminator(path, d, meta=None):
    return save_module(path, d, "mask-discriminator", {"architecture": d.architecture(), **(meta or {})})


def load_generator(path):
    _, header = load_checkpoint(path)
    arch = header["meta"].get("architecture", {})
    g = MaskGenerator(arch.get("latent_dim", LATENT_DIM), tuple(arch.get("channels", GENERATOR_CHANNELS)),
                      arch.get("activation", "relu"), arch.get("negative_slope", 0.2))
    load_module(path, g, "mask-generator")
    return g.eval()


def load_discriminator(path):
    _, header = load_checkpoint(path)
    arch = header["meta"].get("architecture", {})
    d = MaskDiscriminator(tuple(arch.get("channels", DISCRIMINATOR_CHANNELS)),
                          arch.get("negative_slope", 0.2), arch.get("activation", "leaky_relu"))
    load_module(path, d, "mask-discriminator")
    return d.eval()


class MaskGAN(BaseEstimator):
    """Estimator wrapper: ``fit`` on a mask corpus, then ``sample`` binary masks."""

    def __init__(self, epochs=50, batch_size=128, learning_rate=2e-4, betas=(0.5, 0.999), seed=0,
                 latent_dim=LATENT_DIM, generator_channels=GENERATOR_CHANNELS,
                 discriminator_channels=DISCRIMINATOR_CHANNELS, generator_activation="relu",
                 discriminator_negative_slope=0.2, non_saturating=True, real_label=0.9, instance_noise=0.5):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.betas = betas
        self.seed = seed
        self.latent_dim = latent_dim
        self.generator_channels = generator_channels
        self.discriminator_channels = discriminator_channels
        self.generator_activation = generator_activation
        self.discriminator_negative_slope = discriminator_negative_slope
        self.non_saturating = non_saturating
        self.real_label = real_label
        self.instance_noise = instance_noise

    def _config(self):
        names = {f.name for f in fields(GanTrainConfig)}
        return GanTrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None):
        self.generator_, self.discriminator_, self.loss_trace_ = train_gan(X, self._config())
        return self

    def _check_fitted(self):
        if not hasattr(self, "generator_"):
            raise ContractViolation("MaskGAN is not fitted yet")

    def generate(self, z):
        self._check_fitted()
        return sample_masks(self.generator_, z)

    def sample(self, n, random_state=None, snap=False):
        self._check_fitted()
        return sample_masks(self.generator_, sample_latents(n, self.latent_dim, random_state), snap=snap)


def config_to_dict(config):
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def mask_ratio(masks):
    """Occluded fraction per mask."""
    m = np.asarray(masks)
    return 1.0 - m.reshape(len(m), -1).mean(axis=1)
