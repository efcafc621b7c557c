"""Grayscale 64x64 vein-image corpora.

Two sources are supported: a procedural generator that draws vessel-like
strokes per identity (for desk-scale experiments) and a directory loader for
real ROI images laid out as ``class_<id>/session_<s>/<name>.png``.
"""
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from ._rng import substream
from ._validation import IMAGE_SIZE
from .exceptions import ContractViolation, DatasetError

TRAIN_SESSION = 1
TEST_SESSION = 2
IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray
    class_id: int
    session_id: int


@dataclass
class DatasetSplit:
    """Session-based split; images are float32 arrays of shape (n, 64, 64)."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    train_session: int = TRAIN_SESSION
    test_session: int = TEST_SESSION
    class_names: list = field(default_factory=list)
    train_info: list = field(default_factory=list)
    test_info: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("X_train", "X_test"):
            X = getattr(self, name)
            if X.ndim != 3 or X.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
                raise ContractViolation(f"{name} must have shape (n, 64, 64), got {X.shape}")
            if X.size and (X.min() < 0.0 or X.max() > 1.0):
                raise ContractViolation(f"{name} intensities must lie in [0, 1]")
        if len(self.X_train) != len(self.y_train) or len(self.X_test) != len(self.y_test):
            raise ContractViolation("images and labels differ in length")
        missing = set(np.unique(self.y_test).tolist()) - set(np.unique(self.y_train).tolist())
        if missing:
            raise DatasetError(f"classes {sorted(missing)} appear in the test session only")
        if not self.class_names:
            self.class_names = [str(c) for c in range(self.num_classes)]

    @property
    def train(self):
        return [Image(x, int(c), self.train_session) for x, c in zip(self.X_train, self.y_train)]

    @property
    def test(self):
        return [Image(x, int(c), self.test_session) for x, c in zip(self.X_test, self.y_test)]


@dataclass(frozen=True)
class SyntheticVeinConfig:
    num_classes: int = 20
    images_per_class_per_session: int = 5
    vessel_count_range: tuple = (4, 7)
    vessel_width_range: tuple = (1.5, 3.5)
    noise_level: float = 0.03
    seed: int = 42
    max_shift: float = 2.5
    max_rotation_deg: float = 6.0
    max_scale_jitter: float = 0.04
    brightness_jitter: float = 0.04
    session_brightness: float = 0.12
    session_contrast: float = 0.25

    def validate(self):
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be at least 2 for verification metrics")
        if self.images_per_class_per_session < 1:
            raise ContractViolation("images_per_class_per_session must be positive")
        lo, hi = self.vessel_count_range
        if not 1 <= lo <= hi:
            raise ContractViolation(f"vessel_count_range must be a non-empty positive interval, got {self.vessel_count_range}")
        lo, hi = self.vessel_width_range
        if not 0 < lo <= hi:
            raise ContractViolation(f"vessel_width_range must be a non-empty positive interval, got {self.vessel_width_range}")
        for name in ("noise_level", "max_shift", "max_rotation_deg", "max_scale_jitter",
                     "brightness_jitter", "session_brightness", "session_contrast"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        return self

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        types = {f.name: f.default for f in dataclasses.fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ContractViolation(f"unknown synthetic config key {key!r}")
            kwargs[key] = _coerce_like(types[key], value)
        return cls(**kwargs).validate()


def _coerce_like(default, value):
    if isinstance(default, tuple):
        return tuple(_coerce_like(d, v.strip()) for d, v in zip(default, value.split(",")))
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


# -- rendering ---------------------------------------------------------------

_GRID_Y, _GRID_X = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
_CENTER = IMAGE_SIZE / 2.0
_BACKGROUND = 0.78 - 0.18 * (((_GRID_X - _CENTER) ** 2 + (_GRID_Y - _CENTER) ** 2) / (2 * _CENTER ** 2))


def _random_template(rng, config):
    """Vessel strokes for one identity: control points, width and darkness per stroke."""
    n = int(rng.integers(config.vessel_count_range[0], config.vessel_count_range[1] + 1))
    strokes = []
    for _ in range(n):
        # endpoints on two different borders so strokes cross the frame
        sides = rng.choice(4, size=2, replace=False)
        ends = [_border_point(rng, s) for s in sides]
        mid = (ends[0] + ends[1]) / 2 + rng.normal(0, 12, size=2)
        width = rng.uniform(*config.vessel_width_range)
        darkness = rng.uniform(0.25, 0.5)
        strokes.append((np.stack([ends[0], mid, ends[1]]), width, darkness))
    return strokes


def _border_point(rng, side):
    t = rng.uniform(4, IMAGE_SIZE - 4)
    return np.array([(0.0, t), (IMAGE_SIZE, t), (t, 0.0), (t, IMAGE_SIZE)][side])


_SUPERSAMPLE = 4
_BEZIER_T = np.linspace(0.0, 1.0, 1024)[:, None]


def _stroke_distance(ctrl):
    """Approximate distance from each pixel centre to a quadratic Bezier curve.

    The curve is rasterised on a 4x supersampled grid and an exact Euclidean
    distance transform is taken there (error below a quarter pixel).
    """
    t = _BEZIER_T
    pts = (1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1] + t ** 2 * ctrl[2]
    n = IMAGE_SIZE * _SUPERSAMPLE
    idx = np.floor(pts * _SUPERSAMPLE).astype(np.int64)
    idx = idx[((idx >= 0) & (idx < n)).all(axis=1)]
    if len(idx) == 0:
        return np.full((IMAGE_SIZE, IMAGE_SIZE), np.inf)
    free = np.ones((n, n), dtype=bool)
    free[idx[:, 1], idx[:, 0]] = False
    dist = ndimage.distance_transform_edt(free)
    half = _SUPERSAMPLE // 2
    return dist[half::_SUPERSAMPLE, half::_SUPERSAMPLE] / _SUPERSAMPLE


def render_vein_image(template, jitter, noise=None):
    """Render one image of ``template`` under the affine/photometric ``jitter``.

    ``jitter`` keys: rotation (radians), shift (dx, dy), scale, brightness,
    gain, offset.  ``noise`` is an optional additive (64, 64) field.
    """
    c, s = np.cos(jitter["rotation"]), np.sin(jitter["rotation"])
    A = jitter["scale"] * np.array([[c, -s], [s, c]])
    shift = np.asarray(jitter["shift"], dtype=np.float64)
    occupancy = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for ctrl, width, darkness in template:
        moved = (ctrl - _CENTER) @ A.T + _CENTER + shift
        d = _stroke_distance(moved)
        # soft cross-section, anti-aliased by construction
        profile = np.exp(-0.5 * (d / (0.5 * width * jitter["scale"])) ** 2)
        occupancy = np.maximum(occupancy, darkness * profile)
    img = _BACKGROUND - occupancy
    img = jitter["gain"] * (img - 0.5) + 0.5 + jitter["offset"] + jitter["brightness"]
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(config=None):
    """Procedural vein corpus, a pure function of ``config`` (including its seed).

    Returns a :class:`DatasetSplit` with session 1 as train and session 2 as
    test.  Per-image jitter parameters are recorded in ``train_info`` /
    ``test_info`` so images can be re-rendered without noise.
    """
    config = (config or SyntheticVeinConfig()).validate()
    images = {TRAIN_SESSION: [], TEST_SESSION: []}
    labels = {TRAIN_SESSION: [], TEST_SESSION: []}
    infos = {TRAIN_SESSION: [], TEST_SESSION: []}
    for cls in range(config.num_classes):
        rng = substream(config.seed, f"synthetic/class{cls}")
        template = _random_template(rng, config)
        for session in (TRAIN_SESSION, TEST_SESSION):
            if session == TRAIN_SESSION:
                gain, offset = 1.0, 0.0
            else:
                gain = 1.0 + rng.uniform(-config.session_contrast, config.session_contrast)
                offset = rng.uniform(-config.session_brightness, config.session_brightness)
            for _ in range(config.images_per_class_per_session):
                jitter = {
                    "rotation": float(np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))),
                    "shift": tuple(float(v) for v in rng.uniform(-config.max_shift, config.max_shift, size=2)),
                    "scale": float(1.0 + rng.uniform(-config.max_scale_jitter, config.max_scale_jitter)),
                    "brightness": float(rng.uniform(-config.brightness_jitter, config.brightness_jitter)),
                    "gain": float(gain),
                    "offset": float(offset),
                }
                noise = rng.normal(0.0, config.noise_level, size=(IMAGE_SIZE, IMAGE_SIZE)) if config.noise_level > 0 else None
                images[session].append(render_vein_image(template, jitter, noise))
                labels[session].append(cls)
                infos[session].append({"class_id": cls, "session_id": session, "jitter": jitter})
    return DatasetSplit(
        X_train=np.stack(images[TRAIN_SESSION]),
        y_train=np.asarray(labels[TRAIN_SESSION], dtype=np.int64),
        X_test=np.stack(images[TEST_SESSION]),
        y_test=np.asarray(labels[TEST_SESSION], dtype=np.int64),
        num_classes=config.num_classes,
        train_info=infos[TRAIN_SESSION],
        test_info=infos[TEST_SESSION],
    )


def class_templates(config):
    """The per-class stroke templates used by :func:`generate_synthetic_dataset`."""
    config = config.validate()
    return [_random_template(substream(config.seed, f"synthetic/class{c}"), config)
            for c in range(config.num_classes)]


# -- directory I/O -----------------------------------------------------------

_CLASS_RE = re.compile(r"^class_(\d+)$")
_SESSION_RE = re.compile(r"^session_(\d+)$")


def read_grayscale(path):
    """Decode one image file to a float32 64x64 array in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("RGB", "RGBA", "P", "LA"):
                im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float32).mean(axis=-1)
            else:
                arr = np.asarray(im, dtype=np.float32)
                if im.mode in ("I;16", "I;16B", "I"):
                    arr = arr / 257.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DatasetError(f"{path} is not a single-channel image")
    return resize_image(arr / 255.0)


def _area_weights(n_in, n_out):
    """(n_out, n_in) matrix whose row i averages input cells over [i, i + 1) * n_in / n_out."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(1, n_in + 1)[None, :])
    return np.clip(hi - lo, 0.0, None) / (n_in / n_out)


def resize_image(arr):
    """Area-average resize to 64x64 (exact pixel-overlap weights); values are clipped to [0, 1]."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE):
        arr = _area_weights(arr.shape[0], IMAGE_SIZE) @ arr @ _area_weights(arr.shape[1], IMAGE_SIZE).T
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def load_image_directory(root, train_session=TRAIN_SESSION, test_session=TEST_SESSION):
    """Load ``root/class_<id>/session_<s>/*.png|*.pgm`` into a session split."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(
        (int(m.group(1)), p) for p in root.iterdir() if p.is_dir() and (m := _CLASS_RE.match(p.name))
    )
    if not class_dirs:
        raise DatasetError(f"no classes found in {root}")
    out = {train_session: ([], []), test_session: ([], [])}
    names = []
    for label, (class_id, cdir) in enumerate(class_dirs):
        sessions = {int(m.group(1)): p for p in cdir.iterdir() if p.is_dir() and (m := _SESSION_RE.match(p.name))}
        if train_session not in sessions:
            if test_session in sessions:
                raise DatasetError(f"class present only in session {test_session}: {cdir}")
            raise DatasetError(f"missing session_{train_session} in {cdir}")
        if test_session not in sessions:
            raise DatasetError(f"missing session_{test_session} in {cdir}")
        for session in (train_session, test_session):
            files = sorted(p for p in sessions[session].iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise DatasetError(f"no images found in {sessions[session]}")
            for path in files:
                out[session][0].append(read_grayscale(path))
                out[session][1].append(label)
        names.append(str(class_id))
    return DatasetSplit(
        X_train=np.stack(out[train_session][0]),
        y_train=np.asarray(out[train_session][1], dtype=np.int64),
        X_test=np.stack(out[test_session][0]),
        y_test=np.asarray(out[test_session][1], dtype=np.int64),
        num_classes=len(class_dirs),
        train_session=train_session,
        test_session=test_session,
        class_names=names,
    )


def save_image_directory(split, root):
    """Write ``split`` as 8-bit PNGs in the layout read by :func:`load_image_directory`."""
    root = Path(root)
    written = []
    for session, X, y in ((split.train_session, split.X_train, split.y_train),
                          (split.test_session, split.X_test, split.y_test)):
        counters = {}
        for x, label in zip(X, y):
            name = split.class_names[int(label)]
            d = root / f"class_{name}" / f"session_{session}"
            d.mkdir(parents=True, exist_ok=True)
            idx = counters.get(name, 0)
            counters[name] = idx + 1
            path = d / f"{idx:03d}.png"
            PILImage.fromarray(np.round(x * 255.0).astype(np.uint8), mode="L").save(path)
            written.append(path)
    return written
