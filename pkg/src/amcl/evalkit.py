"""Fine-tuning with a softmax head, and identification / verification metrics."""
import copy
import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from torch import nn
from torch.nn import functional as F

from ._rng import substream, subseed
from ._validation import check_images, check_labels
from .adversarial import run_amcl
from .contrastive import AugmentationPolicy, ContrastiveConfig, _augment_one, encode
from .datasets import DatasetSplit
from .encoders import Encoder, build_encoder
from .exceptions import ContractViolation

logger = logging.getLogger(__name__)


class Classifier(nn.Module):
    """Encoder followed by a linear layer; ``forward`` returns logits."""

    def __init__(self, encoder, num_classes):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.embed_dim, num_classes)
        self.num_classes = num_classes

    def forward(self, x):
        return self.head(self.encoder(x))

    def predict_proba(self, X):
        X = check_images(X)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logits = torch.cat([self(torch.from_numpy(c)) for c in np.array_split(X, len(X) // 256 + 1) if len(c)])
        finally:
            self.train(was_training)
        return F.softmax(logits.double(), dim=1).numpy()


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    augmentation: AugmentationPolicy = None
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ContractViolation("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        return self


def finetune(classifier, split, config=None):
    """Full-network cross-entropy training on ``split``'s training images.

    Returns ``(classifier, losses)`` with one mean loss per epoch.
    """
    config = (config or FinetuneConfig()).validate()
    X = check_images(split.X_train, "split.X_train")
    y = check_labels(split.y_train, len(X), "split.y_train")
    if classifier.num_classes != split.num_classes:
        raise ContractViolation(
            f"classifier has {classifier.num_classes} outputs but the split has {split.num_classes} classes")
    torch.manual_seed(subseed(config.seed, "finetune/torch"))
    opt = torch.optim.Adam(classifier.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    losses = []
    classifier.train()
    for epoch in range(config.epochs):
        rng = substream(config.seed, f"finetune/{epoch}")
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2 and start > 0:
                continue
            xb = X[idx]
            if config.augmentation is not None:
                xb = np.stack([_augment_one(x, config.augmentation, rng) for x in xb])
            opt.zero_grad()
            loss = F.cross_entropy(classifier(torch.from_numpy(xb)), torch.from_numpy(y[idx]))
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(X))
        logger.info("finetune epoch %d loss %.4f", epoch + 1, losses[-1])
    classifier.eval()
    return classifier, losses


# -- verification metrics ---------------------------------------------------

def roc_curve(genuine, impostor):
    """FAR and FRR at every distinct score threshold (accept when score >= threshold).

    The threshold list is bracketed by -inf (accept everything) and +inf
    (reject everything).
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    if len(g) == 0 or len(i) == 0:
        raise ContractViolation("need at least one genuine and one impostor score")
    t = np.concatenate([[-np.inf], np.unique(np.concatenate([g, i])), [np.inf]])
    far = (len(i) - np.searchsorted(i, t, side="left")) / len(i)
    frr = np.searchsorted(g, t, side="left") / len(g)
    return t, far, frr


def equal_error_rate(genuine, impostor):
    """Rate at which FAR and FRR cross, interpolated linearly between adjacent thresholds."""
    _, far, frr = roc_curve(genuine, impostor)
    d = far - frr
    k = int(np.argmax(d <= 0))
    if d[k] == 0:
        return float(far[k])
    s = d[k - 1] / (d[k - 1] - d[k])
    return float(far[k - 1] + s * (far[k] - far[k - 1]))


def roc_points(genuine, impostor):
    """(FAR, GAR) pairs from the strictest to the loosest threshold, (0, 0) to (1, 1)."""
    _, far, frr = roc_curve(genuine, impostor)
    return [(float(a), float(1.0 - r)) for a, r in zip(far[::-1], frr[::-1])]


def pair_scores(features, labels):
    """Cosine scores of all unordered pairs, split into genuine and impostor lists."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    f = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    sim = f @ f.T
    labels = np.asarray(labels)
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    scores = sim[iu, ju]
    return scores[same], scores[~same]


@dataclass
class VerificationReport:
    accuracy: float
    eer: float
    roc_points: list
    genuine_scores: np.ndarray = field(repr=False)
    impostor_scores: np.ndarray = field(repr=False)

    def to_dict(self, config_hash=None):
        return {"accuracy": self.accuracy, "eer": self.eer,
                "roc": [[a, b] for a, b in self.roc_points], "config_hash": config_hash}

    def to_json(self, path, config_hash=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(config_hash), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def evaluate(classifier, split, score="cosine"):
    """Rank-1 accuracy on the test session, and EER/ROC from all test pairs.

    ``score="cosine"`` matches encoder embeddings; ``score="posterior"``
    matches softmax posterior vectors instead.
    """
    X = check_images(split.X_test, "split.X_test")
    y = check_labels(split.y_test, len(X), "split.y_test")
    return verification_report(classifier, X, y, score)


def verification_report(classifier, X, y, score="cosine"):
    proba = classifier.predict_proba(X)
    accuracy = float(np.mean(proba.argmax(axis=1) == y))
    if score == "cosine":
        feats = encode(classifier.encoder, X)
    elif score == "posterior":
        feats = proba
    else:
        raise ContractViolation(f"unknown score {score!r}")
    classes, counts = np.unique(y, return_counts=True)
    lonely = classes[counts < 2]
    if len(lonely):
        warnings.warn(f"test classes {lonely.tolist()} have a single image and form no genuine pairs",
                      RuntimeWarning, stacklevel=2)
    genuine, impostor = pair_scores(feats, y)
    if len(genuine) == 0 or len(impostor) == 0:
        raise ContractViolation("the test set yields no genuine or no impostor pairs")
    return VerificationReport(accuracy, equal_error_rate(genuine, impostor), roc_points(genuine, impostor),
                              genuine, impostor)


class VeinClassifier(BaseEstimator, ClassifierMixin):
    """Encoder plus softmax head, fine-tuned end to end.

    ``pretrained`` may be an :class:`~amcl.encoders.Encoder` whose weights
    initialise the network; otherwise a fresh ``encoder`` is built from the
    registry with the same init seed a pretraining run would use.
    """

    def __init__(self, encoder="resnet-small", pretrained=None, epochs=30, learning_rate=1e-3, batch_size=32,
                 weight_decay=0.0, augmentation=None, init_seed=0, seed=0):
        self.encoder = encoder
        self.pretrained = pretrained
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.augmentation = augmentation
        self.init_seed = init_seed
        self.seed = seed

    def _build(self, num_classes):
        if isinstance(self.pretrained, Encoder):
            enc = copy.deepcopy(self.pretrained)
        elif self.pretrained is None:
            enc = build_encoder(self.encoder, seed=subseed(self.init_seed, "encoder-init"))
        else:
            raise ContractViolation("pretrained must be an Encoder or None")
        torch.manual_seed(subseed(self.seed, "head-init"))
        return Classifier(enc, num_classes)

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        if not np.array_equal(self.classes_, np.arange(len(self.classes_))):
            raise ContractViolation("class ids must be contiguous from 0")
        split = DatasetSplit(X, y, X[:0], y[:0], len(self.classes_))
        self.model_ = self._build(len(self.classes_))
        cfg = FinetuneConfig(self.epochs, self.learning_rate, self.batch_size, self.weight_decay,
                             self.augmentation, self.seed)
        self.model_, self.loss_trace_ = finetune(self.model_, split, cfg)
        return self

    def predict_proba(self, X):
        return self.model_.predict_proba(X)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def embed(self, X):
        return encode(self.model_.encoder, check_images(X))

    def verification_report(self, X, y, score="cosine"):
        X = check_images(X)
        return verification_report(self.model_, X, check_labels(y, len(X)), score)


# -- pretraining comparison ------------------------------------------------

PRETRAIN_MODES = ("scratch", "simclr", "amcl")


@dataclass
class ComparisonRow:
    mode: str
    accuracy: float
    eer: float
    per_seed: list = field(default_factory=list)


def run_mode(split, generator, mode, pretrain_config, finetune_config, seed):
    """Pretrain (unless ``mode == "scratch"``), fine-tune and evaluate one mode at one seed.

    Returns ``(report, classifier, pretrain_state)``.
    """
    pre_cfg = pretrain_config.replace(seed=seed)
    ft_cfg = FinetuneConfig(**{**asdict(finetune_config), "seed": seed,
                               "augmentation": finetune_config.augmentation})
    state = None
    if mode == "scratch":
        encoder = build_encoder(pre_cfg.encoder, seed=subseed(seed, "encoder-init"))
    elif mode in ("simclr", "amcl", "masked-simclr"):
        encoder, state = run_amcl(split, generator, pre_cfg, mode=mode)
    else:
        raise ContractViolation(f"unknown pretraining mode {mode!r}")
    torch.manual_seed(subseed(seed, "head-init"))
    clf = Classifier(encoder, split.num_classes)
    clf, _ = finetune(clf, split, ft_cfg)
    return evaluate(clf, split), clf, state


def compare_pretraining(split, generator, pretrain_config=None, finetune_config=None, modes=PRETRAIN_MODES,
                        seeds=(0,)):
    """Run each mode under identical seeds and budgets; rows hold medians over ``seeds``."""
    pretrain_config = pretrain_config or ContrastiveConfig()
    finetune_config = finetune_config or FinetuneConfig()
    rows = []
    for mode in modes:
        per_seed = []
        for seed in seeds:
            report, _, _ = run_mode(split, generator, mode, pretrain_config, finetune_config, seed)
            per_seed.append((seed, report.accuracy, report.eer))
            logger.info("mode %s seed %d acc %.4f eer %.4f", mode, seed, report.accuracy, report.eer)
        accs = [a for _, a, _ in per_seed]
        eers = [e for _, _, e in per_seed]
        rows.append(ComparisonRow(mode, float(np.median(accs)), float(np.median(eers)), per_seed))
    return rows


def write_comparison_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "ACC", "EER"])
        for r in rows:
            w.writerow([r.mode, f"{100 * r.accuracy:.2f}", f"{100 * r.eer:.2f}"])
    return path


def format_comparison(rows):
    lines = [f"{'mode':<10}{'ACC':>8}{'EER':>8}"]
    lines += [f"{r.mode:<10}{100 * r.accuracy:>8.2f}{100 * r.eer:>8.2f}" for r in rows]
    return "\n".join(lines)
