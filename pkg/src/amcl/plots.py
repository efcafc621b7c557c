"""Static figures written next to the metric files of a run."""
import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image as PILImage  # noqa: E402

from .exceptions import AMCLError  # noqa: E402

TILE = 64
MARGIN = 2


class MissingArtifactError(AMCLError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(str(m) for m in self.missing))


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def gallery(tiles, grid=8, margin=MARGIN, background=255):
    """Lay out up to grid*grid 64x64 tiles (values in [0, 1]) as one uint8 image."""
    size = grid * TILE + (grid + 1) * margin
    canvas = np.full((size, size), background, dtype=np.uint8)
    for k, tile in enumerate(tiles[: grid * grid]):
        r, c = divmod(k, grid)
        y = margin + r * (TILE + margin)
        x = margin + c * (TILE + margin)
        canvas[y:y + TILE, x:x + TILE] = np.round(np.clip(tile, 0, 1) * 255).astype(np.uint8)
    return canvas


def save_gallery(path, tiles, grid=8):
    PILImage.fromarray(gallery(tiles, grid), mode="L").save(path)
    return Path(path)


def plot_gan_loss(csv_path, out_path):
    rows = _read_csv(csv_path)
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [float(r["d_loss"]) for r in rows], label="discriminator")
    ax.plot(epochs, [float(r["g_loss"]) for r in rows], label="generator")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_history(csv_paths, out_path, column="loss", xlabel="epoch"):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, path in csv_paths.items():
        rows = _read_csv(path)
        if "phase" in rows[0]:
            for phase in ("encoder", "latent"):
                sel = [r for r in rows if r["phase"] == phase]
                if sel:
                    ax.plot(range(len(sel)), [float(r[column]) for r in sel], label=f"{label} ({phase})")
        else:
            ax.plot([int(r["epoch"]) for r in rows], [float(r[column]) for r in rows], label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(column)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_roc(reports, out_path):
    """One curve per evaluated mode; ``reports`` maps mode -> report JSON path."""
    fig, ax = plt.subplots(figsize=(4.2, 4))
    for mode, path in reports.items():
        with open(path) as fh:
            data = json.load(fh)
        roc = np.asarray(data["roc"])
        ax.plot(roc[:, 0], roc[:, 1], label=f"{mode} (EER {100 * data['eer']:.2f}%)")
    ax.plot([0, 1], [0, 1], color="0.8", lw=0.8, ls="--")
    ax.set_xscale("symlog", linthresh=1e-2)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("genuine accept rate")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def emit_plots(output_dir, images=None):
    """Write every figure whose inputs exist in ``output_dir``.

    ``images`` (optional, (n, 64, 64)) are used for the masked half of the
    mask gallery.  Raises :class:`MissingArtifactError` listing the absent
    inputs when no figure can be produced.
    """
    out = Path(output_dir)
    written, missing = [], []

    gan_csv = out / "gan_loss.csv"
    if gan_csv.exists():
        written.append(plot_gan_loss(gan_csv, out / "gan_loss.png"))
    else:
        missing.append(gan_csv)

    gen_ckpt = out / "generator.ckpt"
    if gen_ckpt.exists():
        written.append(mask_gallery(gen_ckpt, out / "mask_gallery.png", images))
    else:
        missing.append(gen_ckpt)

    hist = {p.stem[len("pretrain_"):-len("_history")]: p for p in sorted(out.glob("pretrain_*_history.csv"))}
    if hist:
        written.append(plot_history(hist, out / "pretrain_loss.png", xlabel="step"))
    else:
        missing.append(out / "pretrain_<mode>_history.csv")

    ft = {p.stem[len("finetune_"):-len("_loss")]: p for p in sorted(out.glob("finetune_*_loss.csv"))}
    if ft:
        written.append(plot_history(ft, out / "finetune_loss.png"))
    else:
        missing.append(out / "finetune_<mode>_loss.csv")

    reports = {p.stem[len("report_"):]: p for p in sorted(out.glob("report_*.json"))}
    if reports:
        written.append(plot_roc(reports, out / "roc.png"))
    else:
        missing.append(out / "report_<mode>.json")

    if not written:
        raise MissingArtifactError(missing)
    return written


def mask_gallery(generator_ckpt, out_path, images=None, seed=0):
    """8x8 gallery: generated masks, then (if images are given) the same masks applied to images."""
    from .gan import load_generator, sample_latents, sample_masks

    g = load_generator(generator_ckpt)
    if images is not None and len(images):
        masks = sample_masks(g, sample_latents(32, g.latent_dim, seed))
        imgs = np.asarray(images, dtype=np.float32)[np.arange(32) % len(images)]
        tiles = list(masks.astype(np.float32)) + list(imgs * masks)
    else:
        tiles = list(sample_masks(g, sample_latents(64, g.latent_dim, seed)).astype(np.float32))
    return save_gallery(out_path, tiles)
