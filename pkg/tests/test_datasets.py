import itertools

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image as PILImage

from amcl.datasets import (DatasetSplit, SyntheticVeinConfig, class_templates, generate_synthetic_dataset,
                           load_image_directory, render_vein_image, resize_image, save_image_directory)
from amcl.exceptions import ContractViolation, DatasetError


def test_reference_counts(reference_split):
    s = reference_split
    assert s.X_train.shape == (100, 64, 64)
    assert s.X_test.shape == (100, 64, 64)
    assert s.num_classes == 20
    assert len(s.train) == 100 and len(s.test) == 100
    assert {img.session_id for img in s.train} == {1}
    assert {img.session_id for img in s.test} == {2}
    assert set(s.y_train) == set(s.y_test) == set(range(20))
    assert 0.0 <= s.X_train.min() and s.X_train.max() <= 1.0


def test_deterministic():
    cfg = SyntheticVeinConfig(num_classes=3, images_per_class_per_session=2, seed=3)
    a, b = generate_synthetic_dataset(cfg), generate_synthetic_dataset(cfg)
    assert np.array_equal(a.X_train, b.X_train)
    assert np.array_equal(a.X_test, b.X_test)
    c = generate_synthetic_dataset(SyntheticVeinConfig(num_classes=3, images_per_class_per_session=2, seed=4))
    assert not np.array_equal(a.X_train, c.X_train)


def test_rejects_single_class():
    with pytest.raises(ContractViolation):
        generate_synthetic_dataset(SyntheticVeinConfig(num_classes=1))


def test_noise_free_images_follow_the_jitter_model():
    cfg = SyntheticVeinConfig(num_classes=3, images_per_class_per_session=4, noise_level=0.0, seed=5)
    split = generate_synthetic_dataset(cfg)
    templates = class_templates(cfg)
    for X, info in ((split.X_train, split.train_info), (split.X_test, split.test_info)):
        for x, rec in zip(X, info):
            again = render_vein_image(templates[rec["class_id"]], rec["jitter"])
            assert np.array_equal(x, again)
    # two same-class images: their mean absolute difference is that of the two re-rendered jitters
    i, j = 0, 1
    mad = np.abs(split.X_train[i] - split.X_train[j]).mean()
    t = templates[split.train_info[i]["class_id"]]
    oracle = np.abs(render_vein_image(t, split.train_info[i]["jitter"])
                    - render_vein_image(t, split.train_info[j]["jitter"])).mean()
    assert mad == pytest.approx(oracle, abs=1e-7)


def test_pure_brightness_jitter_shifts_every_pixel():
    cfg = SyntheticVeinConfig(num_classes=2, seed=1)
    t = class_templates(cfg)[0]
    base = {"rotation": 0.0, "shift": (0.0, 0.0), "scale": 1.0, "brightness": 0.0, "gain": 1.0, "offset": 0.0}
    a = render_vein_image(t, base)
    b = render_vein_image(t, {**base, "brightness": 0.02})
    inside = (a > 0.01) & (a < 0.97)
    assert np.allclose((b - a)[inside], 0.02, atol=1e-6)


def test_intra_class_closer_than_inter_class():
    split = generate_synthetic_dataset(SyntheticVeinConfig(num_classes=5, seed=42))
    X = np.concatenate([split.X_train, split.X_test]).reshape(-1, 4096).astype(np.float64)
    y = np.concatenate([split.y_train, split.y_test])
    intra, inter = [], []
    for i, j in itertools.combinations(range(len(X)), 2):
        d = np.sqrt(((X[i] - X[j]) ** 2).sum())
        (intra if y[i] == y[j] else inter).append(d)
    assert np.mean(intra) < np.mean(inter)


def test_config_text_round_trip():
    cfg = SyntheticVeinConfig(num_classes=7, vessel_width_range=(1.0, 2.0), noise_level=0.1, seed=9)
    assert SyntheticVeinConfig.from_text(cfg.to_text()) == cfg


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 4), st.integers(1, 2), st.integers(0, 1000))
def test_split_invariants(n_classes, per, seed):
    s = generate_synthetic_dataset(SyntheticVeinConfig(num_classes=n_classes, images_per_class_per_session=per,
                                                       seed=seed))
    assert len(s.X_train) == len(s.X_test) == n_classes * per
    assert set(s.y_train) == set(s.y_test)
    assert s.X_train.dtype == np.float32
    assert (s.X_train >= 0).all() and (s.X_test <= 1).all()


def _write_tree(root, classes=2, sessions=(1, 2), per=3, size=64):
    rng = np.random.default_rng(0)
    for c in range(classes):
        for s in sessions:
            d = root / f"class_{c + 10}" / f"session_{s}"
            d.mkdir(parents=True)
            for k in range(per):
                arr = rng.integers(0, 256, (size, size), dtype=np.uint8)
                PILImage.fromarray(arr, mode="L").save(d / f"{k}.png")


def test_directory_counts(tmp_path):
    _write_tree(tmp_path)
    s = load_image_directory(tmp_path)
    assert len(s.X_train) == 6 and len(s.X_test) == 6
    assert s.num_classes == 2
    assert s.class_names == ["10", "11"]


def test_directory_session_override(tmp_path):
    _write_tree(tmp_path, sessions=(1, 2, 3))
    s = load_image_directory(tmp_path, train_session=2, test_session=3)
    assert (s.train_session, s.test_session) == (2, 3)
    assert len(s.X_test) == 6


def test_empty_directory(tmp_path):
    with pytest.raises(DatasetError, match="no classes found"):
        load_image_directory(tmp_path)


def test_class_only_in_session_two(tmp_path):
    _write_tree(tmp_path)
    bad = tmp_path / "class_99" / "session_2"
    bad.mkdir(parents=True)
    PILImage.fromarray(np.zeros((64, 64), np.uint8)).save(bad / "0.png")
    with pytest.raises(DatasetError, match="class_99"):
        load_image_directory(tmp_path)


def test_missing_session(tmp_path):
    _write_tree(tmp_path, sessions=(1,))
    with pytest.raises(DatasetError, match="session_2"):
        load_image_directory(tmp_path)


def test_unreadable_file(tmp_path):
    _write_tree(tmp_path)
    broken = tmp_path / "class_10" / "session_1" / "9.png"
    broken.write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="9.png"):
        load_image_directory(tmp_path)


def test_large_file_resized_like_area_interpolation(tmp_path):
    yy, xx = np.mgrid[0:200, 0:200]
    board = (((yy // 7) + (xx // 7)) % 2 * 255).astype(np.uint8)
    d = tmp_path / "class_0" / "session_1"
    d.mkdir(parents=True)
    PILImage.fromarray(board, mode="L").save(d / "big.png")
    e = tmp_path / "class_0" / "session_2"
    e.mkdir(parents=True)
    PILImage.fromarray(board, mode="L").save(e / "big.png")
    s = load_image_directory(tmp_path)
    img = s.X_train[0]
    assert img.shape == (64, 64)
    assert img.min() >= 0 and img.max() <= 1
    ref = cv2.resize(cv2.imread(str(d / "big.png"), cv2.IMREAD_GRAYSCALE).astype(np.float32), (64, 64),
                     interpolation=cv2.INTER_AREA) / 255.0
    assert np.abs(img - ref).max() < 1e-4


def test_rgb_converted_by_channel_average(tmp_path):
    rgb = np.zeros((64, 64, 3), np.uint8)
    rgb[..., 0] = 30
    rgb[..., 1] = 60
    rgb[..., 2] = 90
    for s in (1, 2):
        d = tmp_path / "class_0" / f"session_{s}"
        d.mkdir(parents=True)
        PILImage.fromarray(rgb, mode="RGB").save(d / "a.png")
    split = load_image_directory(tmp_path)
    assert np.allclose(split.X_train[0], 60 / 255)


def test_save_and_reload(tmp_path, small_split):
    save_image_directory(small_split, tmp_path)
    back = load_image_directory(tmp_path)
    assert np.abs(back.X_train - small_split.X_train).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(back.y_test, small_split.y_test)


def test_resize_identity_on_64():
    x = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    assert np.array_equal(resize_image(x), x)


def test_split_rejects_test_only_class():
    X = np.zeros((2, 64, 64), np.float32)
    with pytest.raises(DatasetError):
        DatasetSplit(X, np.array([0, 0]), X, np.array([0, 1]), 2)
