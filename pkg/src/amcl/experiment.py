"""Sectioned key-value experiment configuration.

Every key has a typed default; a config file only needs to list what it
changes.  ``config_hash`` digests the fully resolved settings in sorted
order, so it does not depend on how the file is laid out.
"""
import configparser
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from ._rng import subseed
from .contrastive import AugmentationPolicy, ContrastiveConfig
from .datasets import SyntheticVeinConfig
from .evalkit import PRETRAIN_MODES, FinetuneConfig
from .exceptions import AMCLError, ContractViolation
from .gan import GanTrainConfig
from .masking import MaskSamplerConfig

OUTPUT_ENV = "AMCL_OUTPUT_DIR"


class ConfigError(AMCLError):
    pass


DEFAULTS = {
    "experiment": {
        "seed": 42,
        "output_dir": "runs/default",
    },
    "data": {
        "source": "synthetic",
        "root": "",
        "train_session": 1,
        "test_session": 2,
        "num_classes": 20,
        "images_per_class_per_session": 5,
        "vessel_count_range": (4, 7),
        "vessel_width_range": (1.5, 3.5),
        "noise_level": 0.03,
    },
    "masks": {
        "patch_size": 16,
        "ratio_min": 0.2,
        "ratio_max": 0.8,
        "corpus_size": 100000,
    },
    "gan": {
        "epochs": 50,
        "batch_size": 128,
        "learning_rate": 2e-4,
        "betas": (0.5, 0.999),
        "generator_channels": (2048, 1024, 512, 256),
        "discriminator_channels": (32, 64, 128),
        "generator_activation": "relu",
        "discriminator_negative_slope": 0.2,
        "real_label": 0.9,
        "instance_noise": 0.5,
        "snap_to_grid": False,
    },
    "pretrain": {
        "modes": ("simclr", "amcl"),
        "encoder": "resnet-small",
        "batch_size": 32,
        "temperature": 1.0,
        "lambda_reg": 0.5,
        "alpha": 1e-2,
        "beta": 1e-1,
        "epochs": 50,
        "t1": 1,
        "t2": 1,
        "latent_set_size": 0,
        "latent_pool": "per-batch",
        "include_positive_in_denominator": False,
        "projection_head": False,
        "crop_scale_min": 0.6,
        "crop_scale_max": 1.0,
        "flip_prob": 0.5,
        "jitter_strength": 0.4,
        "blur_prob": 0.5,
        "rotation_deg": 10.0,
    },
    "finetune": {
        "modes": ("scratch", "simclr", "amcl"),
        "epochs": 30,
        "learning_rate": 1e-3,
        "batch_size": 32,
        "weight_decay": 0.0,
    },
    "eval": {
        "score": "cosine",
    },
}


def _parse(default, text, where):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        section, name = key.split(".", 1)
        return self.values[section][name]

    @property
    def seed(self):
        return self.values["experiment"]["seed"]

    @property
    def output_dir(self):
        return Path(self.values["experiment"]["output_dir"])

    def canonical_text(self):
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                if section == "experiment" and key == "output_dir":
                    continue
                lines.append(f"{section}.{key}={_format(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    def to_ini(self):
        out = []
        for section, items in self.values.items():
            out.append(f"[{section}]")
            out.extend(f"{k} = {_format(v)}" for k, v in items.items())
            out.append("")
        return "\n".join(out)

    # -- stage configs ------------------------------------------------------

    def stage_seed(self, stage):
        return subseed(self.seed, stage) % (2 ** 31)

    def synthetic(self):
        d = self.values["data"]
        return SyntheticVeinConfig(num_classes=d["num_classes"],
                                   images_per_class_per_session=d["images_per_class_per_session"],
                                   vessel_count_range=d["vessel_count_range"],
                                   vessel_width_range=d["vessel_width_range"],
                                   noise_level=d["noise_level"], seed=self.seed)

    def masks(self):
        m = self.values["masks"]
        return MaskSamplerConfig(m["patch_size"], m["ratio_min"], m["ratio_max"], m["corpus_size"],
                                 self.stage_seed("masks"))

    def gan(self):
        g = self.values["gan"]
        return GanTrainConfig(epochs=g["epochs"], batch_size=g["batch_size"], learning_rate=g["learning_rate"],
                              betas=g["betas"], seed=self.stage_seed("gan"),
                              generator_channels=g["generator_channels"],
                              discriminator_channels=g["discriminator_channels"],
                              generator_activation=g["generator_activation"],
                              discriminator_negative_slope=g["discriminator_negative_slope"],
                              real_label=g["real_label"], instance_noise=g["instance_noise"])

    def pretrain(self):
        p = self.values["pretrain"]
        policy = AugmentationPolicy(crop_scale_range=(p["crop_scale_min"], p["crop_scale_max"]),
                                    flip_prob=p["flip_prob"], jitter_strength=p["jitter_strength"],
                                    blur_prob=p["blur_prob"], rotation_deg=p["rotation_deg"])
        return ContrastiveConfig(batch_size=p["batch_size"], temperature=p["temperature"],
                                 lambda_reg=p["lambda_reg"], alpha=p["alpha"], beta=p["beta"], epochs=p["epochs"],
                                 t1=p["t1"], t2=p["t2"], latent_set_size=p["latent_set_size"] or None,
                                 latent_pool=p["latent_pool"],
                                 include_positive_in_denominator=p["include_positive_in_denominator"],
                                 projection_head=p["projection_head"], encoder=p["encoder"],
                                 augmentation=policy, seed=self.stage_seed("pretrain"))

    def finetune(self):
        f = self.values["finetune"]
        return FinetuneConfig(epochs=f["epochs"], learning_rate=f["learning_rate"], batch_size=f["batch_size"],
                              weight_decay=f["weight_decay"], seed=self.stage_seed("finetune"))

    def validate(self):
        """Build every stage config so that bad values fail before any stage runs."""
        try:
            if self.values["data"]["source"] == "synthetic":
                self.synthetic().validate()
            elif self.values["data"]["source"] == "directory":
                if not self.values["data"]["root"]:
                    raise ConfigError("data.root is required when data.source = directory")
            else:
                raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {self.values['data']['source']!r}")
            self.masks().validate()
            self.gan().validate()
            self.pretrain().validate()
            self.finetune().validate()
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from None
        from .encoders import ENCODERS

        if self.values["pretrain"]["encoder"] not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.values['pretrain']['encoder']!r}")
        for m in self.values["pretrain"]["modes"]:
            if m not in ("simclr", "amcl", "masked-simclr"):
                raise ConfigError(f"pretrain.modes: unknown mode {m!r}")
        for m in self.values["finetune"]["modes"]:
            if m not in PRETRAIN_MODES + ("masked-simclr",):
                raise ConfigError(f"finetune.modes: unknown mode {m!r}")
        if self.values["eval"]["score"] not in ("cosine", "posterior"):
            raise ConfigError("eval.score must be 'cosine' or 'posterior'")
        return self


def load_config(path=None, overrides=(), env=None):
    """Resolve defaults < config file < ``--set`` overrides < ``AMCL_OUTPUT_DIR``."""
    env = os.environ if env is None else env
    values = {s: dict(items) for s, items in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            read = parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, text in parser.items(section):
                _apply(values, section, key, text, f"{path}: {section}.{key}")
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, name = key.strip().split(".", 1)
        _apply(values, section, name, text, f"--set {key}")
    if env.get(OUTPUT_ENV):
        values["experiment"]["output_dir"] = env[OUTPUT_ENV]
    return ExperimentConfig(values).validate()


def _apply(values, section, key, text, where):
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"{where}: unknown setting")
    values[section][key] = _parse(DEFAULTS[section][key], text, where)
