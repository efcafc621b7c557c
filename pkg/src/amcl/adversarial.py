"""Alternating min-max training of a contrastive encoder against a set of GAN latents.

The encoder descends the masked contrastive loss with vanilla SGD; the latent
vectors feeding the frozen mask generator ascend the same loss plus a
pixel-space cosine term that keeps masked views close to their source.
"""
import contextlib
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from ._rng import substream, subseed
from ._validation import check_images
from .checkpoint import load_checkpoint, load_module, save_module
from .contrastive import (AugmentationPolicy, ContrastiveConfig, ViewBatch, _as_tensor, _masked_loss_and_views,
                          _param_dtype, augment_views, encode, rowwise_cosine, simclr_loss)
from .datasets import DatasetSplit
from .encoders import ProjectionHead, build_encoder
from .exceptions import ContractViolation, NonFiniteGradientError
from .gan import LATENT_DIM, sample_masks

logger = logging.getLogger(__name__)

MODES = ("amcl", "masked-simclr", "simclr")


@dataclass
class LatentSet:
    members: np.ndarray
    assignment: np.ndarray = None

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float32)
        if self.members.ndim != 2 or self.members.shape[1] != LATENT_DIM:
            raise ContractViolation(f"latent members must have shape (K, {LATENT_DIM}), got {self.members.shape}")

    def __len__(self):
        return len(self.members)

    @classmethod
    def initial(cls, k, random_state=None):
        """``k`` standard-normal draws, matching the generator's training prior."""
        rng = random_state if isinstance(random_state, np.random.Generator) else np.random.default_rng(random_state)
        return cls(rng.standard_normal((k, LATENT_DIM)).astype(np.float32))


@dataclass
class AdversarialState:
    encoder: torch.nn.Module
    latent_set: LatentSet
    generator: torch.nn.Module
    config: ContrastiveConfig
    head: torch.nn.Module = None
    epoch: int = 0
    t1: int = 0
    t2: int = 0
    history: list = field(default_factory=list)

    def record(self, phase, step, loss, regularizer):
        self.history.append({"epoch": self.epoch, "phase": phase, "step": step,
                             "loss": float(loss), "regularizer": float(regularizer)})

    def encoder_parameters(self):
        params = list(self.encoder.parameters())
        if self.head is not None:
            params += list(self.head.parameters())
        return params


def _batch_latents(batch, state, requires_grad=False):
    if batch.latent_index is None:
        raise ContractViolation("batch carries no latent assignment")
    z_all = torch.from_numpy(state.latent_set.members.copy()).to(_param_dtype(state.generator))
    z_all.requires_grad_(requires_grad)
    return z_all, z_all[torch.as_tensor(batch.latent_index, dtype=torch.long)]


def amcl_objective(batch, state, z=None):
    """Masked contrastive loss plus ``lambda * mean_i cos(x_A_i, x_A_i * M_i)`` on raw pixels.

    Returns ``(objective, regularizer)`` as tensors; ``z`` overrides the
    latents taken from ``state`` for the batch.
    """
    if z is None:
        _, z = _batch_latents(batch, state)
    loss, (xa, xam, _) = _masked_loss_and_views(batch, z, state.encoder, state.generator, state.config, state.head)
    reg = rowwise_cosine(xa, xam).mean()
    return loss + state.config.lambda_reg * reg.to(loss.dtype), reg


def _check_finite(grads, what):
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in the {what} update")


def encoder_step(batch, state):
    """One vanilla SGD step on the encoder: theta <- theta - alpha * grad of the contrastive loss.

    The cosine regulariser does not depend on the encoder and is left out of
    the gradient.  Uses ``batch.view_a_masked`` when present, otherwise builds
    the masked anchors from the current latents.
    """
    enc = state.encoder
    enc.train()
    if state.head is not None:
        state.head.train()
    if batch.view_a_masked is None and batch.latent_index is not None:
        with torch.no_grad():
            masks = sample_masks(state.generator, state.latent_set.members[batch.latent_index])
        batch = ViewBatch(batch.originals, batch.view_a, batch.view_b,
                          batch.view_a * masks.astype(batch.view_a.dtype), masks, batch.latent_index)
    params = state.encoder_parameters()
    loss = simclr_loss(batch, enc, state.config, state.head)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    _check_finite(grads, "encoder")
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.sub_(state.config.alpha * g)
        anchors = batch.anchors()
        reg = rowwise_cosine(_as_tensor(batch.view_a), _as_tensor(anchors)).mean()
    state.t1 += 1
    state.record("encoder", state.t1, loss.item(), reg.item())
    return enc


def _clamp_norm(z, max_norm):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    scale = np.minimum(1.0, max_norm / np.maximum(norms, 1e-12))
    return (z * scale).astype(np.float32)


def latent_gradient(batch, state):
    """Gradient of the batch-mean objective with respect to every latent member, shape (K, d)."""
    was_training = state.encoder.training
    state.encoder.eval()
    if state.head is not None:
        state.head.eval()
    try:
        z_all, z = _batch_latents(batch, state, requires_grad=True)
        objective, reg = amcl_objective(batch, state, z)
        (grad,) = torch.autograd.grad(objective, z_all)
    finally:
        state.encoder.train(was_training)
    return grad, objective.detach(), reg.detach()


def latent_step(batch, state):
    """Gradient ascent on the latents: z <- z + beta * grad, then a norm clamp."""
    grad, objective, reg = latent_gradient(batch, state)
    _check_finite([grad], "latent")
    updated = state.latent_set.members + state.config.beta * grad.numpy().astype(np.float32)
    state.latent_set.members = _clamp_norm(updated, state.config.latent_max_norm)
    state.t2 += 1
    state.record("latent", state.t2, objective.item(), reg.item())
    return state.latent_set


@contextlib.contextmanager
def frozen(module):
    """Evaluation mode and no parameter gradients for the duration of the block."""
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
        module.train(was_training)


def _training_images(data):
    if isinstance(data, DatasetSplit):
        return data.X_train
    return check_images(data, "X")


def build_epoch(X, state, epoch, mode="amcl"):
    """Assemble one epoch's sample set: shuffled images, two views each, masked anchors.

    Randomness comes from per-epoch substreams of ``config.seed`` so that runs
    in different modes see identical views and orderings.
    """
    config = state.config
    n = len(X)
    order = substream(config.seed, f"order/{epoch}").permutation(n)
    views = augment_views(X[order], config.augmentation, substream(config.seed, f"augment/{epoch}"))
    if mode == "simclr":
        return views
    K = len(state.latent_set)
    positions = np.arange(n)
    if config.latent_pool == "per-batch":
        perm = substream(config.seed, f"assign/{epoch}").permutation(K)
        index = perm[positions % K]
    else:
        index = (positions + epoch * n) % K
    state.latent_set.assignment = index
    masks = sample_masks(state.generator, state.latent_set.members)[index]
    return ViewBatch(views.originals, views.view_a, views.view_b,
                     views.view_a * masks.astype(np.float32), masks, index)


def minibatches(n, batch_size):
    idx = [np.arange(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(idx) > 1 and len(idx[-1]) < 2:
        idx[-2] = np.concatenate([idx[-2], idx[-1]])
        idx.pop()
    return idx


def init_state(generator, config, encoder=None):
    config = config.validate()
    if encoder is None:
        encoder = build_encoder(config.encoder, seed=subseed(config.seed, "encoder-init"))
    head = None
    if config.projection_head:
        torch.manual_seed(subseed(config.seed, "head-init"))
        head = ProjectionHead(encoder.embed_dim)
    latents = LatentSet.initial(config.K, substream(config.seed, "latents"))
    return AdversarialState(encoder, latents, generator, config, head)


def run_amcl(data, generator, config=None, mode="amcl", encoder=None, callback=None):
    """Joint training loop.

    Per epoch: masks are drawn from the current latent set and applied to one
    view of every image; then ``t1`` encoder steps run on successive
    minibatches, followed by ``t2`` latent ascent steps.  ``mode`` selects
    ``"amcl"`` (the full loop), ``"masked-simclr"`` (masks from the initial
    latents, no ascent) or ``"simclr"`` (no masks).

    Returns ``(encoder, state)``.
    """
    if mode not in MODES:
        raise ContractViolation(f"mode must be one of {MODES}, got {mode!r}")
    config = (config or ContrastiveConfig()).validate()
    X = _training_images(data)
    if len(X) < 2:
        raise ContractViolation("need at least two training images")
    if generator is None and mode != "simclr":
        raise ContractViolation(f"mode {mode!r} needs a trained mask generator")
    state = init_state(generator, config, encoder)
    batches = minibatches(len(X), config.batch_size)
    guard = frozen(generator) if generator is not None else contextlib.nullcontext()
    with guard:
        for epoch in range(1, config.epochs + 1):
            state.epoch, state.t1, state.t2 = epoch, 0, 0
            omega = build_epoch(X, state, epoch, mode)
            for t in range(config.t1):
                encoder_step(omega.subset(batches[t % len(batches)]), state)
            if mode == "amcl":
                for t in range(config.t2):
                    latent_step(omega.subset(batches[t % len(batches)]), state)
            if callback is not None:
                callback(state)
            last = state.history[-1]
            logger.info("epoch %d %s loss %.4f reg %.4f", epoch, last["phase"], last["loss"], last["regularizer"])
    state.encoder.eval()
    return state.encoder, state


def config_hash(obj):
    """Stable digest of a config-like object (dataclass or mapping), independent of key order."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    text = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def save_pretrained(path, state, mode="amcl", meta=None):
    extra = {"latent_set": state.latent_set.members}
    if state.head is not None:
        extra.update({f"head.{k}": v for k, v in state.head.state_dict().items()})
    info = {"mode": mode, "config_hash": config_hash(state.config), "embed_dim": state.encoder.embed_dim,
            "epochs": state.epoch, **(meta or {})}
    return save_module(path, state.encoder, state.encoder.architecture_id, info, extra)


def load_pretrained(path, architecture_id=None):
    """Return ``(encoder, latent_set, header)`` from a combined checkpoint."""
    tensors, header = load_checkpoint(path)
    arch = architecture_id or header["architecture_id"]
    encoder = build_encoder(arch)
    load_module(path, encoder, arch)
    encoder.eval()
    latents = LatentSet(tensors["latent_set"]) if "latent_set" in tensors else None
    return encoder, latents, header


def write_history_csv(history, path):
    lines = ["epoch,phase,step,loss,regularizer"]
    for h in history:
        lines.append(f"{h['epoch']},{h['phase']},{h['step']},{h['loss']!r},{h['regularizer']!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


class AMCLPretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised encoder pretraining as a transformer.

    ``fit(X)`` trains on unlabeled images; ``transform(X)`` returns embeddings.
    """

    def __init__(self, generator=None, mode="amcl", encoder="resnet-small", batch_size=32, temperature=1.0,
                 lambda_reg=0.5, alpha=1e-2, beta=1e-1, epochs=50, t1=1, t2=1, latent_set_size=None,
                 latent_pool="per-batch", latent_max_norm=3.0 * math.sqrt(LATENT_DIM),
                 include_positive_in_denominator=False, projection_head=False, augmentation=None, seed=0):
        self.generator = generator
        self.mode = mode
        self.encoder = encoder
        self.batch_size = batch_size
        self.temperature = temperature
        self.lambda_reg = lambda_reg
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.t1 = t1
        self.t2 = t2
        self.latent_set_size = latent_set_size
        self.latent_pool = latent_pool
        self.latent_max_norm = latent_max_norm
        self.include_positive_in_denominator = include_positive_in_denominator
        self.projection_head = projection_head
        self.augmentation = augmentation
        self.seed = seed

    def contrastive_config(self):
        names = {f.name for f in fields(ContrastiveConfig)}
        params = {k: v for k, v in self.get_params(deep=False).items() if k in names}
        params["augmentation"] = self.augmentation or AugmentationPolicy()
        return ContrastiveConfig(**params)

    def fit(self, X, y=None):
        X = check_images(X)
        self.encoder_, self.state_ = run_amcl(X, self.generator, self.contrastive_config(), mode=self.mode)
        self.latent_set_ = self.state_.latent_set
        self.history_ = self.state_.history
        return self

    def transform(self, X):
        if not hasattr(self, "encoder_"):
            raise ContractViolation("AMCLPretrainer is not fitted yet")
        return encode(self.encoder_, check_images(X))
