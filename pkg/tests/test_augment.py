import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_png
from ctkidney.augment import (
    AugmentationConfig,
    AugmentParams,
    BatchStream,
    apply_transform,
    augment,
    dump_augmented,
    load_and_resize,
    resize_bilinear,
    sample_params,
)
from ctkidney.errors import ConfigError, DecodeError, ShapeMismatch
from ctkidney.manifest import assign_splits, scan_dataset


def bilinear_oracle(src, out_h, out_w):
    """Half-pixel-centred bilinear upsampling written out per output pixel."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            u = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            v = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            i0, j0 = int(np.floor(u)), int(np.floor(v))
            i1, j1 = min(i0 + 1, h - 1), min(j0 + 1, w - 1)
            a, b = u - i0, v - j0
            out[i, j] = ((1 - a) * (1 - b) * src[i0, j0] + (1 - a) * b * src[i0, j1]
                         + a * (1 - b) * src[i1, j0] + a * b * src[i1, j1])
    return out


class TestConfig:
    def test_defaults(self):
        cfg = AugmentationConfig()
        assert cfg.target_size == (224, 224)
        assert cfg.rotation_range_deg == 20 and cfg.zoom_range == 0.15
        assert cfg.width_shift == cfg.height_shift == 0.1
        assert cfg.horizontal_flip and cfg.vertical_flip
        assert cfg.rescale == pytest.approx(1 / 255)
        assert AugmentationConfig.preset("128").target_size == (128, 128)

    @pytest.mark.parametrize("kw", [{"target_size": (16, 64)}, {"rotation_range_deg": 200},
                                    {"zoom_range": 0.6}, {"width_shift": -0.1}])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            AugmentationConfig(**kw)

    def test_dict_round_trip_rejects_unknown(self):
        cfg = AugmentationConfig(target_size=(64, 64))
        assert AugmentationConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            AugmentationConfig.from_dict({"shear": 0.2})


class TestLoadAndResize:
    def test_ct_slice_to_224(self, tmp_path):
        p = write_png(tmp_path / "slice.png", np.random.default_rng(0).integers(0, 256, (512, 512)))
        img = load_and_resize(p, (224, 224))
        assert img.shape == (224, 224, 3) and img.dtype == np.float32
        assert np.array_equal(img[..., 0], img[..., 1]) and np.array_equal(img[..., 1], img[..., 2])
        assert 0.0 <= img.min() and img.max() <= 1.0

    def test_identity_resize(self, tmp_path):
        arr = np.random.default_rng(1).integers(0, 256, (224, 224, 3)).astype(np.uint8)
        img = load_and_resize(write_png(tmp_path / "x.png", arr), (224, 224))
        np.testing.assert_array_equal(img, (arr / 255.0).astype(np.float32))

    def test_checkerboard_upscale(self):
        src = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = resize_bilinear(src[..., None], (4, 4))[..., 0]
        np.testing.assert_allclose(out, bilinear_oracle(src, 4, 4), atol=1e-12)
        assert out[0, 0] == 1 and out[0, 3] == 0 and out[3, 0] == 0 and out[3, 3] == 1

    def test_random_upscale_matches_oracle(self):
        src = np.random.default_rng(2).random((5, 7))
        out = resize_bilinear(src[..., None], (11, 13))[..., 0]
        np.testing.assert_allclose(out, bilinear_oracle(src, 11, 13), atol=1e-12)

    def test_decode_error(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"garbage")
        with pytest.raises(DecodeError, match="bad.png"):
            load_and_resize(bad, (64, 64))


def hot(h=9, w=9, at=(0, 0)):
    img = np.zeros((h, w, 3), dtype=np.float32)
    img[at] = 1.0
    return img


class TestAugment:
    def test_identity_config(self):
        img = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        out = augment(img, AugmentationConfig.identity((64, 64)), rng_seed=123)
        np.testing.assert_array_equal(out, img)

    def test_horizontal_flip_moves_hot_pixel(self):
        cfg = AugmentationConfig((32, 32), 0, 0, 0, 0, horizontal_flip=True, vertical_flip=False)
        seed = next(s for s in range(100) if sample_params(cfg, np.random.default_rng(s)).flip_h)
        out = augment(hot(32, 32), cfg, seed)
        assert out[0, 31, 0] == 1.0 and out.sum() == 3.0

    @pytest.mark.parametrize("col", [0, 2, 6, 8])
    def test_rotation_90_oracle(self, col):
        h = w = 9
        out = apply_transform(hot(h, w, (0, col)), AugmentParams(angle_deg=90.0))
        cr, cc = (h - 1) / 2, (w - 1) / 2
        th = np.pi / 2
        r, c = 0 - cr, col - cc
        expect = (round(cr + np.cos(th) * r - np.sin(th) * c), round(cc + np.sin(th) * r + np.cos(th) * c))
        got = np.unravel_index(np.argmax(out[..., 0]), (h, w))
        assert got == expect
        assert out[expect][0] == pytest.approx(1.0, abs=1e-6)
        assert out.sum() == pytest.approx(3.0, abs=1e-5)

    def test_flip_involution(self):
        img = np.random.default_rng(3).random((40, 40, 3)).astype(np.float32)
        p = AugmentParams(flip_h=True)
        np.testing.assert_array_equal(apply_transform(apply_transform(img, p), p), img)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            augment(np.zeros((10, 10, 3), np.float32), AugmentationConfig((32, 32)), 0)

    def test_same_seed_same_output(self):
        img = np.random.default_rng(4).random((48, 48, 3)).astype(np.float32)
        cfg = AugmentationConfig((48, 48))
        np.testing.assert_array_equal(augment(img, cfg, 9), augment(img, cfg, 9))
        assert not np.array_equal(augment(img, cfg, 9), augment(img, cfg, 10))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_shape_and_range_preserved(self, seed):
        img = np.random.default_rng(seed % 1000).random((40, 40, 3)).astype(np.float32)
        out = augment(img, AugmentationConfig((40, 40), 45, 0.3, 0.2, 0.2, True, True), seed)
        assert out.shape == img.shape
        assert np.isfinite(out).all() and out.min() >= 0.0 and out.max() <= 1.0


def checksum(stream, epoch):
    h = hashlib.sha256()
    for x, y in stream.iter_epoch(epoch):
        h.update(x.tobytes())
        h.update(y.tobytes())
    return h.hexdigest()


@pytest.fixture
def watermarked(tmp_path):
    # uniform images whose intensity encodes the class index
    for ci, name in enumerate("ABCD"):
        for i in range(3 if ci % 2 else 2):
            write_png(tmp_path / name / f"{i}.png", np.full((40, 40), (ci + 1) * 50))
    return scan_dataset(tmp_path)


class TestBatchStream:
    def test_partition_sizes(self, watermarked):
        stream = BatchStream(watermarked, AugmentationConfig.identity((32, 32)), batch_size=4)
        assert len(watermarked) == 10 and len(stream) == 3
        assert [len(x) for x, _ in stream.iter_epoch(0)] == [4, 4, 2]

    def test_eval_stream_unaltered(self, watermarked):
        stream = BatchStream(watermarked, AugmentationConfig((32, 32)), 4, shuffle=False, seed=5, augment=False)
        assert checksum(stream, 0) == checksum(stream, 3)

    def test_train_stream_reproducible(self, watermarked):
        cfg = AugmentationConfig((32, 32))
        a = BatchStream(watermarked, cfg, 4, shuffle=True, seed=3, augment=True)
        b = BatchStream(watermarked, cfg, 4, shuffle=True, seed=3, augment=True, cache=False, workers=2)
        assert checksum(a, 1) == checksum(b, 1)
        assert checksum(a, 1) != checksum(a, 2)

    def test_label_alignment(self, watermarked):
        stream = BatchStream(watermarked, AugmentationConfig((32, 32)), 3, shuffle=True, seed=11, augment=True)
        for epoch in range(3):
            for x, y in stream.iter_epoch(epoch):
                for img, label in zip(x, y):
                    assert round(float(img.max()) * 255 / 50) - 1 == int(np.argmax(label))

    def test_dump_augmented(self, watermarked, tmp_path):
        files = dump_augmented(watermarked, AugmentationConfig((32, 32)), 4, tmp_path / "dump", seed=0)
        assert len(files) == 4 and all(f.exists() for f in files)
