"""Random patch-aligned block masks and their application to images.

Mask polarity: 1 keeps a pixel, 0 occludes it.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import as_generator
from ._validation import IMAGE_SIZE
from .datasets import Image
from .exceptions import ContractViolation

CORPUS_MAGIC = "AMCL-MASKS"
CORPUS_VERSION = "v1"


@dataclass(frozen=True)
class MaskSamplerConfig:
    patch_size: int = 16
    ratio_min: float = 0.20
    ratio_max: float = 0.80
    corpus_size: int = 100_000
    seed: int = 0

    @property
    def grid(self):
        return IMAGE_SIZE // self.patch_size

    def validate(self):
        if self.patch_size <= 0 or IMAGE_SIZE % self.patch_size:
            raise ContractViolation(f"patch_size must divide {IMAGE_SIZE}, got {self.patch_size}")
        if not 0.0 <= self.ratio_min <= self.ratio_max <= 1.0:
            raise ContractViolation(
                f"need 0 <= ratio_min <= ratio_max <= 1, got [{self.ratio_min}, {self.ratio_max}]")
        if self.corpus_size <= 0:
            raise ContractViolation("corpus_size must be positive")
        return self


@dataclass(frozen=True)
class Mask:
    grid: np.ndarray
    patch_size: int

    @property
    def ratio(self):
        return float((self.grid == 0).sum()) / self.grid.size

    @classmethod
    def from_patches(cls, patches, patch_size):
        grid = np.kron(np.asarray(patches, dtype=np.uint8), np.ones((patch_size, patch_size), dtype=np.uint8))
        return cls(grid, patch_size)

    def patches(self):
        """The P x P keep/occlude bitmap; raises if the grid is not block-constant."""
        if not is_patch_aligned(self.grid, self.patch_size):
            raise ContractViolation("mask is not constant within aligned patches")
        return self.grid[:: self.patch_size, :: self.patch_size].copy()


def occluded_patch_count(ratio, num_patches):
    """round(ratio * num_patches), ties rounding half up."""
    return int(np.floor(ratio * num_patches + 0.5))


def _sample_patches(config, rng):
    P2 = config.grid ** 2
    r = rng.uniform(config.ratio_min, config.ratio_max)
    k = occluded_patch_count(r, P2)
    bits = np.ones(P2, dtype=np.uint8)
    bits[rng.choice(P2, size=k, replace=False)] = 0
    return bits.reshape(config.grid, config.grid)


def sample_mask(config, rng_state=None):
    """Draw one block mask: a uniform ratio, then that many patches occluded uniformly."""
    config = config.validate()
    rng = as_generator(rng_state)
    return Mask.from_patches(_sample_patches(config, rng), config.patch_size)


@dataclass
class MaskCorpus:
    """Many masks held compactly as (n, P, P) patch bitmaps."""

    patches: np.ndarray
    patch_size: int

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, i):
        return Mask.from_patches(self.patches[i], self.patch_size)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def to_array(self, indices=None):
        """Rasterised masks, shape (n, 64, 64), dtype uint8."""
        p = self.patches if indices is None else self.patches[indices]
        return np.repeat(np.repeat(p, self.patch_size, axis=1), self.patch_size, axis=2).astype(np.uint8)

    def ratios(self):
        return 1.0 - self.patches.reshape(len(self), -1).mean(axis=1)

    def save(self, path):
        save_mask_corpus(self, path)


def build_mask_corpus(config, path=None):
    config = config.validate()
    rng = np.random.default_rng(config.seed)
    patches = np.stack([_sample_patches(config, rng) for _ in range(config.corpus_size)])
    corpus = MaskCorpus(patches, config.patch_size)
    if path is not None:
        save_mask_corpus(corpus, path)
    return corpus


def _hex_width(num_patches):
    return (num_patches + 3) // 4


def encode_patches(bits):
    """Hex string of a row-major patch bitmap, first patch in the most significant bit."""
    flat = np.asarray(bits, dtype=np.uint8).ravel()
    value = int("".join("1" if b else "0" for b in flat), 2)
    return format(value, f"0{_hex_width(flat.size)}x")


def decode_patches(text, grid):
    n = grid * grid
    value = int(text, 16)
    if value >> n:
        raise ContractViolation(f"mask record {text!r} has more than {n} bits")
    bits = [(value >> (n - 1 - i)) & 1 for i in range(n)]
    return np.asarray(bits, dtype=np.uint8).reshape(grid, grid)


def save_mask_corpus(corpus, path):
    path = Path(path)
    lines = [f"{CORPUS_MAGIC} {CORPUS_VERSION} {corpus.patch_size} {len(corpus)}"]
    lines.extend(encode_patches(p) for p in corpus.patches)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_mask_corpus(path):
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != CORPUS_MAGIC or header[1] != CORPUS_VERSION:
            raise ContractViolation(f"{path}: not an {CORPUS_MAGIC} {CORPUS_VERSION} file")
        patch_size, count = int(header[2]), int(header[3])
        if patch_size <= 0 or IMAGE_SIZE % patch_size:
            raise ContractViolation(f"{path}: invalid patch size {patch_size}")
        grid = IMAGE_SIZE // patch_size
        records = [line.strip() for line in fh if line.strip()]
    if len(records) != count:
        raise ContractViolation(f"{path}: header declares {count} masks, found {len(records)}")
    patches = np.stack([decode_patches(r, grid) for r in records]) if records else np.zeros((0, grid, grid), np.uint8)
    return MaskCorpus(patches, patch_size)


def is_patch_aligned(grid, patch_size):
    g = np.asarray(grid)
    P = g.shape[0] // patch_size
    blocks = g.reshape(P, patch_size, P, patch_size)
    return bool((blocks == blocks[:, :1, :, :1]).all())


def snap_to_grid(masks, patch_size=16):
    """Majority vote per aligned block; ties keep the block."""
    m = np.asarray(masks)
    single = m.ndim == 2
    if single:
        m = m[None]
    n, H, W = m.shape
    P = H // patch_size
    votes = m.reshape(n, P, patch_size, P, patch_size).mean(axis=(2, 4))
    out = np.repeat(np.repeat((votes >= 0.5).astype(np.uint8), patch_size, axis=1), patch_size, axis=2)
    return out[0] if single else out


def apply_mask(x, m):
    """Hadamard product of an image with a mask.

    Accepts :class:`Image` / :class:`Mask` objects or raw arrays (batched
    arrays broadcast pairwise).  Image metadata is carried through.
    """
    pixels = x.pixels if isinstance(x, Image) else np.asarray(x)
    grid = m.grid if isinstance(m, Mask) else np.asarray(m)
    if pixels.shape != grid.shape:
        raise ContractViolation(f"image shape {pixels.shape} does not match mask shape {grid.shape}")
    out = pixels * grid.astype(pixels.dtype if np.issubdtype(pixels.dtype, np.floating) else np.float32)
    if isinstance(x, Image):
        return Image(out, x.class_id, x.session_id)
    return out
