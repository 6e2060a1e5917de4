import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from afa.align import knn_accuracy, knn_predict
from afa.data import (AugmentPipeline, Dataset, InfeasibleSpecError, SyntheticSpec, VIEW_SETS, VectorJitter,
                      augment, build_multiview, first_n_per_class, gaussian_mixture, gen_synthetic, load_cifar_binary,
                      load_dataset, load_idx, save_dataset)
from afa.data import formats
from afa.data.augment import augment_batch, hflip

GOLDEN = Path(__file__).parent / "golden"


def _idx_fixture(tmp_path, n=4, compress=False):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = np.arange(n, dtype=np.uint8) % 10
    suffix = ".gz" if compress else ""
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    formats.write_idx(ip, imgs)
    formats.write_idx(lp, labels)
    return ip, lp, imgs, labels


class TestIDX:
    def test_fixture_shapes(self, tmp_path):
        ip, lp, imgs, labels = _idx_fixture(tmp_path)
        ds = load_idx(ip, lp)
        assert ds.x.shape == (4, 28, 28, 1)
        assert 0.0 <= ds.x.min() and ds.x.max() <= 1.0
        np.testing.assert_array_equal(ds.y, labels)
        np.testing.assert_allclose(ds.x[..., 0] * 255, imgs, atol=1e-4)

    def test_gzip(self, tmp_path):
        ip, lp, _, _ = _idx_fixture(tmp_path, compress=True)
        assert gzip.decompress(ip.read_bytes())[:4] == struct.pack(">I", 0x0803)
        assert load_idx(ip, lp).x.shape == (4, 28, 28, 1)

    def test_truncated(self, tmp_path):
        ip, lp, _, _ = _idx_fixture(tmp_path)
        ip.write_bytes(ip.read_bytes()[:-5])
        with pytest.raises(formats.TruncatedError):
            load_idx(ip, lp)

    def test_bad_magic(self, tmp_path):
        ip, lp, _, _ = _idx_fixture(tmp_path)
        raw = bytearray(ip.read_bytes())
        raw[:4] = struct.pack(">I", 0x0802)
        ip.write_bytes(bytes(raw))
        with pytest.raises(formats.MagicError):
            load_idx(ip, lp)

    def test_label_range(self, tmp_path):
        ip, lp, _, _ = _idx_fixture(tmp_path)
        with pytest.raises(formats.LabelRangeError):
            load_idx(ip, lp, num_classes=3)

    def test_errors_are_distinct(self):
        kinds = {formats.TruncatedError, formats.MagicError, formats.LabelRangeError}
        assert len(kinds) == 3


class TestCIFAR:
    def test_all_white_row(self, tmp_path):
        path = tmp_path / "batch.bin"
        formats.write_cifar_binary(path, np.full((1, 32, 32, 3), 255, np.uint8), [3])
        ds = load_cifar_binary(path)
        assert ds.x.shape == (1, 32, 32, 3)
        assert np.all(ds.x == 1.0) and ds.y[0] == 3

    def test_planar_layout(self, tmp_path):
        img = np.zeros((1, 32, 32, 3), np.uint8)
        img[0, 0, 1, 2] = 200
        path = tmp_path / "b.bin"
        formats.write_cifar_binary(path, img, [0])
        raw = path.read_bytes()
        assert raw[1 + 2 * 1024 + 1] == 200
        assert load_cifar_binary(path).x[0, 0, 1, 2] == pytest.approx(200 / 255)

    def test_truncated(self, tmp_path):
        path = tmp_path / "b.bin"
        formats.write_cifar_binary(path, np.zeros((2, 32, 32, 3), np.uint8), [0, 1])
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(formats.TruncatedError):
            load_cifar_binary(path)

    def test_label_range(self, tmp_path):
        path = tmp_path / "b.bin"
        formats.write_cifar_binary(path, np.zeros((1, 32, 32, 3), np.uint8), [12])
        with pytest.raises(formats.LabelRangeError):
            load_cifar_binary(path)


class TestDataset:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), [0, 1])
        with pytest.raises(ValueError):
            Dataset(np.full((1, 2), 1.5), [0], image=True)

    def test_first_n_per_class(self):
        ds = Dataset(np.arange(10.0)[:, None], [0, 1, 0, 1, 0, 1, 0, 1, 1, 0])
        sub = first_n_per_class(ds, 2)
        np.testing.assert_array_equal(sub.x[:, 0], [0, 1, 2, 3])
        with pytest.raises(ValueError):
            first_n_per_class(ds, 6)

    def test_save_load(self, tmp_path):
        ds = Dataset(np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32), [0, 1, 2, 0, 1],
                     "test", 3, False, {"k": 1})
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)
        assert (back.split, back.num_classes, back.meta) == ("test", 3, {"k": 1})


class TestSynthetic:
    def test_aligned_small(self):
        train, test, cert = gen_synthetic(SyntheticSpec(num_classes=2, dim=2, radius=0.5, separation=1.0))
        assert cert.min_separation >= 2.0 and cert.aligned
        assert knn_accuracy(test.x, test.y, train.x, train.y, 1, "l2") == 1.0

    @pytest.mark.parametrize("metric", ["l1", "l2", "linf"])
    def test_theorem_mode_radii(self, metric):
        spec = SyntheticSpec(num_classes=3, dim=5, radius=0.6, train_radius=0.2, separation=0.3,
                             metric=metric, mode="theorem", seed=2)
        train, test, cert = gen_synthetic(spec)
        assert cert.train_max_radius <= 0.2 + 1e-9 and cert.test_max_radius <= 0.6 + 1e-9
        assert knn_accuracy(test.x, test.y, train.x, train.y, 1, metric) == 1.0

    def test_misaligned_witness(self):
        spec = SyntheticSpec(num_classes=2, dim=2, radius=0.5, train_radius=0.3, separation=0.25,
                             mode="misaligned", seed=0)
        train, test, cert = gen_synthetic(spec)
        pred, _ = knn_predict(test.x[cert.witness:cert.witness + 1], train.x, train.y, 1, "l2")
        assert pred[0] != test.y[cert.witness]
        assert knn_accuracy(test.x, test.y, train.x, train.y, 1, "l2") < 1.0

    def test_infeasible(self):
        with pytest.raises(InfeasibleSpecError, match="center_spacing"):
            gen_synthetic(SyntheticSpec(separation=2.0, center_spacing=1.0))
        with pytest.raises(InfeasibleSpecError, match="r > R"):
            gen_synthetic(SyntheticSpec(radius=1.0, separation=0.5))

    def test_deterministic(self):
        a = gen_synthetic(SyntheticSpec(seed=4))[0].x
        b = gen_synthetic(SyntheticSpec(seed=4))[0].x
        assert np.array_equal(a, b)

    def test_gaussian_mixture(self):
        ds = gaussian_mixture(10, num_classes=3, dim=2, seed=1)
        assert ds.x.shape == (30, 2) and np.bincount(ds.y).tolist() == [10, 10, 10]


class TestAugment:
    def test_identity_is_bitwise(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        assert np.array_equal(augment(img, AugmentPipeline.identity(), 0, 5), img)

    def test_flip_involution(self, rng):
        img = rng.random((5, 7, 3))
        forced = AugmentPipeline(crop=False, flip_p=1.0, jitter_p=0.0, grayscale_p=0.0)
        once = augment(img, forced, 1)
        np.testing.assert_array_equal(once, hflip(img))
        np.testing.assert_array_equal(augment(once, forced, 2), img)

    def test_golden(self):
        g = np.load(GOLDEN / "augment.npz")
        for key, out in (("rgb", "out_rgb"), ("gray", "out_gray")):
            got = np.stack([augment(g[key], AugmentPipeline(), seed=3, index=i) for i in range(4)])
            np.testing.assert_array_equal(got, g[out])

    def test_deterministic_per_index(self, rng):
        img = rng.random((10, 10, 3))
        a = augment_batch(np.stack([img, img]), AugmentPipeline(), 9, [0, 1])
        assert np.array_equal(a[0], augment(img, AugmentPipeline(), 9, 0))
        assert not np.array_equal(a[0], a[1])

    def test_range_and_shape(self, rng):
        img = rng.random((9, 11, 3))
        out = augment(img, AugmentPipeline(brightness=0.9), 0)
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_grayscale_image_skips_colour(self, rng):
        img = rng.random((6, 6, 1))
        no_geo = AugmentPipeline(crop=False, flip_p=0.0, jitter_p=1.0, grayscale_p=1.0)
        np.testing.assert_array_equal(augment(img, no_geo, 0), img)

    def test_channel_count(self):
        with pytest.raises(ValueError):
            augment(np.zeros((4, 4, 2)), AugmentPipeline(), 0)

    def test_from_dict(self):
        p = AugmentPipeline.from_dict({"crop_scale": [0.6, 1.0], "flip_p": 0.0})
        assert p.crop_scale == (0.6, 1.0) and p.flip_p == 0.0


class TestMultiview:
    def test_afa_mask(self, rng):
        mv = build_multiview(rng.random((2, 6, 6, 1)), [3, 5], mode="afa")
        assert len(mv) == 6
        np.testing.assert_array_equal(mv.adv_mask.astype(int), [1, 1, 0, 1, 1, 0])
        np.testing.assert_array_equal(mv.labels, [3, 3, 3, 5, 5, 5])
        assert list(mv.view_kind[:3]) == ["original", "transformed", "transformed"]

    def test_afa_original_slot_is_untouched(self, rng):
        x = rng.random((2, 6, 6, 1))
        mv = build_multiview(x, [0, 1], mode="afa")
        np.testing.assert_array_equal(mv.views[0], x[0])
        np.testing.assert_array_equal(mv.views[3], x[1])

    def test_plain(self, rng):
        mv = build_multiview(rng.random((4, 3)), [0, 1, 2, 3], k=2)
        assert len(mv) == 8
        np.testing.assert_array_equal(mv.labels, [0, 0, 1, 1, 2, 2, 3, 3])
        assert not mv.adv_mask.any()

    def test_k_too_small(self, rng):
        with pytest.raises(ValueError):
            build_multiview(rng.random((2, 3)), [0, 1], k=1)

    @pytest.mark.parametrize("name", sorted(VIEW_SETS))
    def test_ablation_view_sets(self, name, rng):
        x = rng.random((3, 6, 6, 3))
        y = np.array([0, 1, 1])
        mv = build_multiview(x, y, mode="afa", views=name)
        k = len(VIEW_SETS[name])
        assert mv.k == k and len(mv) == 3 * k
        # every row carries its source's label
        np.testing.assert_array_equal(mv.labels, y[mv.source_index])
        cb = mv.contrastive()
        np.testing.assert_array_equal(cb.source_index, mv.source_index)

    def test_unknown_tokens(self, rng):
        with pytest.raises(ValueError):
            build_multiview(rng.random((2, 3)), [0, 1], mode="afa", views=("x", "y"))

    def test_vector_jitter_default(self, rng):
        x = rng.random((2, 3))
        mv = build_multiview(x, [0, 1], mode="afa", transform=VectorJitter(0.5), seed=1)
        assert not np.array_equal(mv.views[1], x[0])

    def test_source_ids_fix_the_views(self, rng):
        x = rng.random((3, 6, 6, 3))
        full = build_multiview(x, [0, 1, 2], mode="afa", seed=4, source_ids=[10, 11, 12])
        part = build_multiview(x[1:], [1, 2], mode="afa", seed=4, source_ids=[11, 12])
        np.testing.assert_array_equal(full.views[3:], part.views)
