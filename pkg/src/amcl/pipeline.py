"""Stage orchestration: each stage reads earlier artifacts and records its own in a manifest."""
import hashlib
import json
import logging
import time
from pathlib import Path

import torch

from ._rng import subseed
from .adversarial import load_pretrained, run_amcl, save_pretrained, write_history_csv
from .checkpoint import load_checkpoint, load_module, save_module
from .datasets import generate_synthetic_dataset, load_image_directory, save_image_directory
from .encoders import build_encoder
from .evalkit import Classifier, ComparisonRow, evaluate, finetune, write_comparison_csv
from .gan import load_generator, save_discriminator, save_generator, train_gan
from .masking import build_mask_corpus, load_mask_corpus
from .plots import MissingArtifactError, emit_plots, mask_gallery, plot_gan_loss, plot_history, plot_roc

logger = logging.getLogger(__name__)

STAGES = ("synth-data", "gen-masks", "train-gan", "pretrain", "finetune", "eval", "compare", "report")
MANIFEST = "manifest.jsonl"


class StageFailure(Exception):
    pass


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Newline-delimited JSON records, one per artifact; re-running a stage replaces its records."""

    def __init__(self, output_dir):
        self.root = Path(output_dir)
        self.path = self.root / MANIFEST

    def records(self):
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def _write(self, records):
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    def replace_stage(self, stage, artifacts, wall_time, config_hash):
        rels = [str(Path(a).relative_to(self.root)) for a in artifacts]
        keep = [r for r in self.records() if r["stage"] != stage and r.get("artifact") not in set(rels)]
        new = [{"stage": stage, "artifact": rel, "hash": file_hash(self.root / rel),
                "wall_time_s": round(wall_time, 3), "config_hash": config_hash, "status": "ok"} for rel in rels]
        self._write(keep + new)

    def record_failure(self, stage, error, wall_time, config_hash):
        keep = [r for r in self.records() if r["stage"] != stage]
        keep.append({"stage": stage, "artifact": None, "hash": None, "wall_time_s": round(wall_time, 3),
                     "config_hash": config_hash, "status": "failed", "error": str(error)})
        self._write(keep)

    def completed(self, stage, config_hash):
        recs = [r for r in self.records() if r["stage"] == stage]
        if not recs or any(r.get("status") != "ok" or r.get("config_hash") != config_hash for r in recs):
            return False
        return all((self.root / r["artifact"]).exists() and file_hash(self.root / r["artifact"]) == r["hash"]
                   for r in recs)


class Pipeline:
    def __init__(self, config):
        self.config = config
        self.out = config.output_dir
        self.manifest = Manifest(self.out)

    # -- helpers ------------------------------------------------------------

    def _require(self, *paths):
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise MissingArtifactError(missing)

    def data_dir(self):
        if self.config["data.source"] == "directory":
            return Path(self.config["data.root"])
        return self.out / "data"

    def load_split(self):
        d = self.data_dir()
        if self.config["data.source"] == "synthetic":
            self._require(d)
        return load_image_directory(d, self.config["data.train_session"], self.config["data.test_session"])

    def generator(self):
        path = self.out / "generator.ckpt"
        self._require(path)
        return load_generator(path)

    def _modes_needing_generator(self, modes):
        return any(m in ("amcl", "masked-simclr") for m in modes)

    # -- stages -------------------------------------------------------------

    def synth_data(self):
        if self.config["data.source"] != "synthetic":
            logger.info("data.source is a directory; nothing to synthesise")
            return []
        cfg = self.config.synthetic()
        split = generate_synthetic_dataset(cfg)
        d = self.out / "data"
        if d.exists():
            for p in sorted(d.rglob("*.png")):
                p.unlink()
        files = save_image_directory(split, d)
        cfg_path = d / "synthetic_config.txt"
        cfg_path.write_text(cfg.to_text())
        return files + [cfg_path]

    def gen_masks(self):
        path = self.out / "masks.txt"
        build_mask_corpus(self.config.masks(), path)
        return [path]

    def train_gan(self):
        corpus_path = self.out / "masks.txt"
        self._require(corpus_path)
        corpus = load_mask_corpus(corpus_path)
        g, d, trace = train_gan(corpus, self.config.gan())
        paths = [save_generator(self.out / "generator.ckpt", g, {"config_hash": self.config.config_hash}),
                 save_discriminator(self.out / "discriminator.ckpt", d, {"config_hash": self.config.config_hash})]
        csv_path = self.out / "gan_loss.csv"
        csv_path.write_text("epoch,d_loss,g_loss\n" + "".join(f"{e},{dl!r},{gl!r}\n" for e, dl, gl in trace))
        paths.append(csv_path)
        paths.append(plot_gan_loss(csv_path, self.out / "gan_loss.png"))
        images = None
        try:
            images = self.load_split().X_train
        except Exception:  # the gallery falls back to masks only
            pass
        paths.append(mask_gallery(paths[0], self.out / "mask_gallery.png", images))
        return paths

    def pretrain(self):
        modes = self.config["pretrain.modes"]
        split = self.load_split()
        g = self.generator() if self._modes_needing_generator(modes) else None
        cfg = self.config.pretrain()
        paths, hists = [], {}
        for mode in modes:
            _, state = run_amcl(split, g, cfg, mode=mode)
            paths.append(save_pretrained(self.out / f"encoder_{mode}.ckpt", state, mode))
            hists[mode] = write_history_csv(state.history, self.out / f"pretrain_{mode}_history.csv")
            paths.append(hists[mode])
        if hists:
            paths.append(plot_history(hists, self.out / "pretrain_loss.png", xlabel="step"))
        return paths

    def _initial_encoder(self, mode):
        if mode == "scratch":
            return build_encoder(self.config["pretrain.encoder"],
                                 seed=subseed(self.config.pretrain().seed, "encoder-init"))
        path = self.out / f"encoder_{mode}.ckpt"
        self._require(path)
        encoder, _, _ = load_pretrained(path)
        return encoder

    def finetune(self):
        split = self.load_split()
        cfg = self.config.finetune()
        paths, losses = [], {}
        for mode in self.config["finetune.modes"]:
            encoder = self._initial_encoder(mode)
            torch.manual_seed(subseed(cfg.seed, "head-init"))
            clf, trace = finetune(Classifier(encoder, split.num_classes), split, cfg)
            paths.append(save_module(self.out / f"classifier_{mode}.ckpt", clf, f"classifier/{encoder.architecture_id}",
                                     {"mode": mode, "num_classes": split.num_classes,
                                      "config_hash": self.config.config_hash}))
            p = self.out / f"finetune_{mode}_loss.csv"
            p.write_text("epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(trace)))
            losses[mode] = p
            paths.append(p)
        if losses:
            paths.append(plot_history(losses, self.out / "finetune_loss.png"))
        return paths

    def load_classifier(self, mode):
        path = self.out / f"classifier_{mode}.ckpt"
        self._require(path)
        _, header = load_checkpoint(path)
        arch = header["architecture_id"].split("/", 1)[1]
        clf = Classifier(build_encoder(arch), header["meta"]["num_classes"])
        load_module(path, clf, header["architecture_id"])
        return clf.eval()

    def eval(self):
        split = self.load_split()
        paths, reports = [], {}
        for mode in self.config["finetune.modes"]:
            report = evaluate(self.load_classifier(mode), split, self.config["eval.score"])
            p = report.to_json(self.out / f"report_{mode}.json", self.config.config_hash)
            reports[mode] = p
            paths.append(Path(p))
        paths.append(plot_roc(reports, self.out / "roc.png"))
        return paths

    def compare(self):
        rows = []
        for mode in self.config["finetune.modes"]:
            p = self.out / f"report_{mode}.json"
            self._require(p)
            data = json.loads(p.read_text())
            rows.append(ComparisonRow(mode, data["accuracy"], data["eer"]))
        return [write_comparison_csv(rows, self.out / "compare.csv")]

    def report(self):
        images = None
        try:
            images = self.load_split().X_train
        except Exception:
            pass
        return emit_plots(self.out, images)

    # -- driver -------------------------------------------------------------

    def run_stage(self, stage, resume=False):
        if resume and self.manifest.completed(stage, self.config.config_hash):
            logger.info("stage %s already complete; skipping", stage)
            return []
        method = getattr(self, stage.replace("-", "_"))
        self.out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        try:
            with torch.random.fork_rng():
                paths = method()
        except MissingArtifactError as exc:
            self.manifest.record_failure(stage, str(exc), time.perf_counter() - start,
                                         self.config.config_hash)
            raise
        except Exception as exc:
            self.manifest.record_failure(stage, f"{type(exc).__name__}: {exc}", time.perf_counter() - start,
                                         self.config.config_hash)
            raise StageFailure(f"stage {stage} failed: {exc}") from exc
        self.manifest.replace_stage(stage, paths, time.perf_counter() - start, self.config.config_hash)
        logger.info("stage %s wrote %d artifacts", stage, len(paths))
        return paths


def run_pipeline(config, stages, resume=False):
    """Run ``stages`` in pipeline order; returns the artifact paths per stage."""
    order = [s for s in STAGES if s in stages]
    pipe = Pipeline(config)
    pipe.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    resolved = pipe.out / "config.ini"
    text = config.to_ini()
    unchanged = resolved.exists() and resolved.read_text() == text
    if not (unchanged and pipe.manifest.completed("config", config.config_hash)):
        resolved.write_text(text)
        pipe.manifest.replace_stage("config", [resolved], time.perf_counter() - start, config.config_hash)
    out = {}
    for stage in order:
        out[stage] = pipe.run_stage(stage, resume=resume)
    return out

