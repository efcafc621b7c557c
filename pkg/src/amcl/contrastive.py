"""Two-view augmentation and the SimCLR-style objectives, plain and masked."""
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

from ._rng import as_generator
from ._validation import check_images, check_positive, check_probability
from .exceptions import ContractViolation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Classical augmentations applied independently to each view.

    ``grayscale_prob`` is kept for parity with RGB pipelines; on the
    single-channel images used here grayscale conversion is the identity.
    """

    crop_scale_range: tuple = (0.6, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    blur_prob: float = 0.5
    grayscale_prob: float = 0.0
    rotation_deg: float = 10.0
    blur_sigma_range: tuple = (0.1, 1.5)

    @classmethod
    def identity(cls):
        return cls(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0, blur_prob=0.0,
                   grayscale_prob=0.0, rotation_deg=0.0)

    def validate(self):
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ContractViolation(f"crop_scale_range must lie within (0, 1], got {self.crop_scale_range}")
        for name in ("flip_prob", "blur_prob", "grayscale_prob"):
            check_probability(getattr(self, name), name)
        check_positive(self.jitter_strength, "jitter_strength", strict=False)
        check_positive(self.rotation_deg, "rotation_deg", strict=False)
        return self


@dataclass
class ViewBatch:
    originals: np.ndarray
    view_a: np.ndarray
    view_b: np.ndarray
    view_a_masked: np.ndarray = None
    masks: np.ndarray = None
    latent_index: np.ndarray = None

    def __post_init__(self):
        n = len(self.originals)
        for name in ("view_a", "view_b", "view_a_masked", "masks", "latent_index"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ContractViolation(f"{name} has {len(v)} entries, expected {n}")

    def __len__(self):
        return len(self.originals)

    def anchors(self):
        return self.view_a_masked if self.view_a_masked is not None else self.view_a

    def subset(self, idx):
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return ViewBatch(self.originals[idx], self.view_a[idx], self.view_b[idx],
                         pick(self.view_a_masked), pick(self.masks), pick(self.latent_index))


def _augment_one(x, policy, rng):
    out = x
    lo, hi = policy.crop_scale_range
    if hi - lo > 0 or lo < 1.0 or policy.rotation_deg > 0:
        scale = rng.uniform(lo, hi)
        log_ratio = rng.uniform(np.log(3 / 4), np.log(4 / 3))
        ch = min(1.0, np.sqrt(scale / np.exp(log_ratio)))
        cw = min(1.0, np.sqrt(scale * np.exp(log_ratio)))
        cy = rng.uniform(-(1 - ch) / 2, (1 - ch) / 2) * 64
        cx = rng.uniform(-(1 - cw) / 2, (1 - cw) / 2) * 64
        theta = np.deg2rad(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
        if not (ch == 1.0 and cw == 1.0 and theta == 0.0):
            c, s = np.cos(theta), np.sin(theta)
            # output pixel -> input pixel, around the image centre
            A = np.array([[c, -s], [s, c]]) @ np.diag([ch, cw])
            centre = np.array([31.5, 31.5])
            offset = centre + np.array([cy, cx]) - A @ centre
            out = ndimage.affine_transform(out, A, offset=offset, order=1, mode="reflect")
    if rng.random() < policy.flip_prob:
        out = out[:, ::-1]
    if policy.jitter_strength > 0:
        j = policy.jitter_strength
        contrast = rng.uniform(max(0.0, 1 - j), 1 + j)
        brightness = rng.uniform(-j / 2, j / 2)
        mean = out.mean()
        out = (out - mean) * contrast + mean + brightness
    if rng.random() < policy.blur_prob:
        out = ndimage.gaussian_filter(out, rng.uniform(*policy.blur_sigma_range), mode="reflect")
    rng.random()  # grayscale draw; identity on single-channel data
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_views(batch, policy=None, rng_state=None):
    """Two independently augmented views per image (no masking)."""
    X = check_images(batch, "batch")
    policy = (policy or AugmentationPolicy()).validate()
    rng = as_generator(rng_state)
    view_a = np.empty_like(X)
    view_b = np.empty_like(X)
    for i, x in enumerate(X):
        view_a[i] = _augment_one(x, policy, rng)
        view_b[i] = _augment_one(x, policy, rng)
    return ViewBatch(X, view_a, view_b)


def cosine_similarity(u, v):
    """u.v / (|u| |v|); defined as 0 (with a warning) when either vector is zero."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine similarity of a zero vector is taken as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_matrix(a, b):
    """Pairwise cosine similarities between rows; zero rows give 0."""
    return F.normalize(a, dim=1) @ F.normalize(b, dim=1).T


def rowwise_cosine(a, b):
    a = a.flatten(1)
    b = b.flatten(1)
    return (F.normalize(a, dim=1) * F.normalize(b, dim=1)).sum(dim=1)


def contrastive_loss(anchors, positives, temperature=1.0, include_positive_in_denominator=False):
    """Mean over i of -log( exp(S_ii / t) / sum_j exp(S_ij / t) ).

    By default the sum runs over j != i only (negatives), so the loss can go
    below zero.  ``S`` is the cosine similarity between anchor i and
    positive-view j.
    """
    n = anchors.shape[0]
    if n < 2:
        raise ContractViolation("the contrastive loss needs a batch of at least 2")
    sim = cosine_matrix(anchors, positives) / temperature
    pos = sim.diagonal()
    if include_positive_in_denominator:
        denom = torch.logsumexp(sim, dim=1)
    else:
        eye = torch.eye(n, dtype=torch.bool, device=sim.device)
        denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    return (denom - pos).mean()


@dataclass(frozen=True)
class ContrastiveConfig:
    batch_size: int = 32
    temperature: float = 1.0
    lambda_reg: float = 0.5
    alpha: float = 1e-2
    beta: float = 1e-1
    epochs: int = 50
    t1: int = 1
    t2: int = 1
    latent_set_size: int = None
    latent_pool: str = "per-batch"
    latent_max_norm: float = 3.0 * np.sqrt(128)
    include_positive_in_denominator: bool = False
    projection_head: bool = False
    encoder: str = "resnet-small"
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    @property
    def K(self):
        return self.latent_set_size or self.batch_size

    def validate(self):
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be at least 2")
        check_positive(self.temperature, "temperature")
        check_positive(self.lambda_reg, "lambda_reg", strict=False)
        check_positive(self.alpha, "alpha", strict=False)
        check_positive(self.beta, "beta", strict=False)
        if self.epochs < 0 or self.t1 < 1 or self.t2 < 0:
            raise ContractViolation("epochs must be >= 0, t1 >= 1 and t2 >= 0")
        if self.latent_set_size is not None and self.latent_set_size < 1:
            raise ContractViolation("latent_set_size must be positive")
        if self.latent_pool not in ("per-batch", "fixed"):
            raise ContractViolation(f"latent_pool must be 'per-batch' or 'fixed', got {self.latent_pool!r}")
        if self.latent_pool == "per-batch" and self.latent_set_size not in (None, self.batch_size):
            raise ContractViolation("per-batch latent pools have exactly batch_size members")
        check_positive(self.latent_max_norm, "latent_max_norm")
        self.augmentation.validate()
        return self

    def replace(self, **changes):
        return replace(self, **changes)


def _as_tensor(x, like=None):
    dtype = torch.float32 if like is None else like
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _param_dtype(module):
    return next(module.parameters()).dtype


def embed_pair(e, anchors, positives, head=None):
    """Embed anchors and positives in a single forward pass (shared batch statistics)."""
    n = anchors.shape[0]
    out = e(torch.cat([anchors, positives], dim=0))
    if head is not None:
        out = head(out)
    return out[:n], out[n:]


def encode(e, x):
    """Embedding(s) of one image or a batch, computed in evaluation mode."""
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim == 2
    X = check_images(arr, "x", allow_single=True)
    was_training = e.training
    e.eval()
    try:
        with torch.no_grad():
            outs = [e(_as_tensor(chunk, _param_dtype(e))) for chunk in np.array_split(X, max(1, len(X) // 256 + 1))
                    if len(chunk)]
    finally:
        e.train(was_training)
    out = torch.cat(outs).numpy()
    return out[0] if single else out


def simclr_loss(views, e, config=None, head=None):
    """Contrastive loss of a view batch under encoder ``e`` (in its current mode)."""
    config = config or ContrastiveConfig()
    dtype = _param_dtype(e)
    a, b = embed_pair(e, _as_tensor(views.anchors(), dtype), _as_tensor(views.view_b, dtype), head)
    return contrastive_loss(a, b, config.temperature, config.include_positive_in_denominator)


def straight_through_masks(g_star, z):
    """Hard {0, 1} masks in the forward pass; gradients pass to the tanh field unchanged."""
    fld = g_star(z)[:, 0]
    hard = (fld > 0).to(fld.dtype)
    return hard + (fld - fld.detach())


def masked_views(view_a, g_star, z):
    """``(x_A * M, M)`` with ``M`` the straight-through mask of ``G(z)``."""
    m = straight_through_masks(g_star, z)
    return view_a * m, m


def masked_simclr_loss(views, zs, e, g_star, config=None, head=None):
    """Contrastive loss with anchors ``E(x_A * G(z))``; differentiable in the encoder and in ``zs``.

    ``g_star`` is used in evaluation mode so its normalisation statistics stay
    frozen.  Returns the scalar loss.
    """
    loss, _ = _masked_loss_and_views(views, zs, e, g_star, config, head)
    return loss


def _masked_loss_and_views(views, zs, e, g_star, config, head):
    config = config or ContrastiveConfig()
    dtype = _param_dtype(e)
    g_star.eval()
    z = zs if isinstance(zs, torch.Tensor) else torch.as_tensor(np.asarray(zs), dtype=_param_dtype(g_star))
    xa = _as_tensor(views.view_a, dtype)
    xam, m = masked_views(xa, g_star, z.to(_param_dtype(g_star)))
    xam = xam.to(dtype)
    a, b = embed_pair(e, xam, _as_tensor(views.view_b, dtype), head)
    loss = contrastive_loss(a, b, config.temperature, config.include_positive_in_denominator)
    return loss, (xa, xam, m)
