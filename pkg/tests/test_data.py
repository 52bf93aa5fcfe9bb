import numpy as np
import pytest

from convtr.data import (
    ChannelStats,
    Scene,
    SynthConfig,
    compute_channel_stats,
    crop_positions,
    extract_crop,
    generate_synthetic_scene,
    has_valid_window,
    make_sample,
    normalize,
    scene_load,
    scene_save,
)
from convtr.errors import (
    ConfigError,
    FormatError,
    IntegrityError,
    SceneSkipped,
    ShapeError,
    StatisticsError,
)
from convtr.rng import make_rng


def window_classes_bruteforce(labels, row, col, p):
    """Oracle: direct unique() on the window."""
    return set(np.unique(labels[row : row + p, col : col + p]).tolist())


class TestGenerator:
    def test_deterministic(self):
        cfg = SynthConfig(height=64, width=64, smoothness=8.0, seed=5)
        a = generate_synthetic_scene(cfg)
        b = generate_synthetic_scene(cfg)
        assert np.array_equal(a.hh, b.hh)
        assert np.array_equal(a.hv, b.hv)
        assert np.array_equal(a.labels, b.labels)
        assert a.id == b.id

    def test_large_looks_kills_speckle_variance(self):
        base = dict(height=96, width=96, smoothness=12.0, seed=0)
        noisy = generate_synthetic_scene(SynthConfig(looks=4.0, **base))
        clean = generate_synthetic_scene(SynthConfig(looks=200000.0, **base))
        sea = noisy.labels == 0
        # residual relative spread within one class collapses with looks
        cv_noisy = noisy.hh[sea].std() / noisy.hh[sea].mean()
        cv_clean = clean.hh[sea].std() / clean.hh[sea].mean()
        assert cv_clean < 0.6 * cv_noisy

    def test_default_scene_has_all_classes(self):
        scene = generate_synthetic_scene(SynthConfig(seed=1))
        assert scene.shape == (1100, 1100)
        fractions = scene.class_fractions()
        assert fractions.shape == (3,)
        assert np.all(fractions >= 0.05)

    def test_class_mean_separation_at_least_3db(self):
        scene = generate_synthetic_scene(SynthConfig(height=256, width=256,
                                                      smoothness=24.0, seed=2))
        means = [scene.hh[scene.labels == c].mean() for c in range(3)]
        assert means[1] / means[0] >= 10 ** 0.3
        assert means[2] / means[1] >= 10 ** 0.3

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            SynthConfig(looks=0.5).validate()
        with pytest.raises(ConfigError):
            SynthConfig(land_fraction=0.6, ice_fraction=0.5).validate()
        with pytest.raises(ConfigError):
            SynthConfig(hh_std_db=(1.0, -1.0, 1.0)).validate()

    def test_scene_raster_shape_consistency_enforced(self):
        with pytest.raises(ShapeError):
            Scene(hh=np.ones((4, 4)), hv=np.ones((4, 5)),
                  labels=np.zeros((4, 4), dtype=np.uint8), id="x")


class TestCropSampler:
    def test_uniform_scene_skipped(self):
        scene = Scene(hh=np.ones((32, 32)), hv=np.ones((32, 32)),
                      labels=np.zeros((32, 32), dtype=np.uint8), id="flat")
        stream = crop_positions(scene, 8, make_rng(0, "t"))
        with pytest.raises(SceneSkipped):
            next(stream)
        assert not has_valid_window(scene, 8)

    def test_half_and_half_full_scene_window(self):
        labels = np.zeros((16, 16), dtype=np.uint8)
        labels[8:] = 1
        scene = Scene(hh=np.ones((16, 16)), hv=np.ones((16, 16)), labels=labels, id="h")
        stream = crop_positions(scene, 16, make_rng(0, "t"))
        assert next(stream) == (0, 0)
        assert has_valid_window(scene, 16)

    def test_scene_smaller_than_crop(self):
        scene = Scene(hh=np.ones((8, 8)), hv=np.ones((8, 8)),
                      labels=np.zeros((8, 8), dtype=np.uint8), id="small")
        with pytest.raises(ShapeError):
            next(crop_positions(scene, 16, make_rng(0, "t")))

    def test_every_draw_has_multiple_classes(self):
        scene = generate_synthetic_scene(
            SynthConfig(height=96, width=96, smoothness=10.0, seed=3)
        )
        stream = crop_positions(scene, 24, make_rng(0, "draws"))
        for _ in range(500):
            row, col = next(stream)
            assert len(window_classes_bruteforce(scene.labels, row, col, 24)) >= 2

    def test_rejection_fallback_finds_rare_windows(self):
        # only one valid window in the entire scene: force the exhaustive scan
        labels = np.zeros((64, 64), dtype=np.uint8)
        labels[0, 0] = 1
        scene = Scene(hh=np.ones((64, 64)), hv=np.ones((64, 64)), labels=labels, id="r")
        stream = crop_positions(scene, 4, make_rng(0, "t"))
        for _ in range(5):
            row, col = next(stream)
            assert (row, col) == (0, 0)


class TestChannelStats:
    def _const_scene(self, value, size=8, ident="c"):
        return Scene(hh=np.full((size, size), float(value)),
                     hv=np.full((size, size), float(value) * 2.0),
                     labels=np.zeros((size, size), dtype=np.uint8), id=ident)

    def test_two_scene_hand_average(self):
        # equal-size scenes of all 1.0 and all 3.0 average to 2.0
        stats = compute_channel_stats([self._const_scene(1.0), self._const_scene(3.0)])
        assert stats.mean[0] == pytest.approx(2.0, rel=1e-12)
        assert stats.mean[1] == pytest.approx(4.0, rel=1e-12)

    def test_order_invariance(self):
        scenes = [
            generate_synthetic_scene(SynthConfig(height=48, width=48, smoothness=6.0, seed=s))
            for s in range(4)
        ]
        a = compute_channel_stats(scenes)
        b = compute_channel_stats(scenes[::-1])
        assert np.allclose(a.mean, b.mean, rtol=1e-12)
        assert np.allclose(a.std, b.std, rtol=1e-12)

    def test_constant_channel_rejected(self):
        with pytest.raises(StatisticsError):
            compute_channel_stats([self._const_scene(5.0)])

    def test_no_scenes_rejected(self):
        with pytest.raises(StatisticsError):
            compute_channel_stats([])

    def test_matches_flat_computation(self):
        scenes = [
            generate_synthetic_scene(SynthConfig(height=32, width=32, smoothness=4.0, seed=s))
            for s in range(3)
        ]
        stats = compute_channel_stats(scenes)
        all_hh = np.concatenate([s.hh.reshape(-1) for s in scenes])
        all_hv = np.concatenate([s.hv.reshape(-1) for s in scenes])
        assert stats.mean[0] == pytest.approx(all_hh.mean(), rel=1e-10)
        assert stats.std[0] == pytest.approx(all_hh.std(), rel=1e-10)
        assert stats.std[1] == pytest.approx(all_hv.std(), rel=1e-10)


class TestNormalize:
    def _stats(self):
        return ChannelStats(mean=np.array([2.0, 4.0]), std=np.array([0.5, 2.0]))

    def test_mean_maps_to_zero(self):
        x = np.stack([np.full((3, 3), 2.0), np.full((3, 3), 4.0)])
        assert np.array_equal(normalize(x, self._stats()), np.zeros((2, 3, 3)))

    def test_one_sigma_maps_to_one(self):
        x = np.stack([np.full((2, 2), 2.5), np.full((2, 2), 6.0)])
        assert np.array_equal(normalize(x, self._stats()), np.ones((2, 2, 2)))

    def test_outlier_clamped_to_ten(self):
        x = np.stack([np.full((1, 1), 2.0 + 100 * 0.5), np.full((1, 1), 4.0)])
        z = normalize(x, self._stats())
        assert z[0, 0, 0] == 10.0

    def test_zero_std_rejected(self):
        with pytest.raises(StatisticsError):
            ChannelStats(mean=np.zeros(2), std=np.array([1.0, 0.0]))


class TestSample:
    def test_make_sample_contract(self):
        scene = generate_synthetic_scene(
            SynthConfig(height=64, width=64, smoothness=8.0, seed=9)
        )
        stats = compute_channel_stats([scene])
        row, col = next(crop_positions(scene, 16, make_rng(1, "s")))
        sample = make_sample(scene, row, col, 16, stats, np.float32)
        assert sample.x.shape == (2, 16, 16)
        assert sample.x.dtype == np.float32
        assert sample.y.shape == (16, 16)
        assert len(np.unique(sample.y)) >= 2
        assert sample.provenance == (scene.id, row, col)
        raw = extract_crop(scene, row, col, 16)
        assert np.allclose(sample.x.data, normalize(raw, stats).astype(np.float32))


class TestSceneFile:
    def _scene(self):
        return generate_synthetic_scene(
            SynthConfig(height=32, width=24, smoothness=4.0, seed=11)
        )

    def test_round_trip_bit_exact(self, tmp_path):
        scene = self._scene()
        path = tmp_path / "s.scne"
        scene_save(scene, path)
        loaded = scene_load(path)
        assert np.array_equal(loaded.hh, scene.hh)
        assert np.array_equal(loaded.hv, scene.hv)
        assert np.array_equal(loaded.labels, scene.labels)
        assert loaded.id == scene.id

    def test_unknown_class_id_named_in_error(self, tmp_path):
        scene = self._scene()
        scene.labels = scene.labels.copy()
        scene.labels[0, 0] = 7
        path = tmp_path / "bad.scne"
        # bypass the Scene validator by writing the raw container directly
        import struct

        from convtr.fileio import digest64, format_text_header

        header = format_text_header(
            {"id": "bad", "height": "32", "width": "24", "precision": "float64"}
        )
        body = b"".join([
            b"SCNE", struct.pack("<I", 1), struct.pack("<Q", len(header)), header,
            np.ascontiguousarray(scene.hh, dtype="<f8").tobytes(),
            np.ascontiguousarray(scene.hv, dtype="<f8").tobytes(),
            np.ascontiguousarray(scene.labels, dtype="u1").tobytes(),
        ])
        path.write_bytes(body + digest64(body))
        with pytest.raises(FormatError, match="7"):
            scene_load(path)

    def test_payload_length_mismatch(self, tmp_path):
        scene = self._scene()
        path = tmp_path / "s.scne"
        scene_save(scene, path)
        blob = path.read_bytes()
        # drop 16 payload bytes but keep a valid checksum over the truncated body
        from convtr.fileio import digest64

        body = blob[:-8][:-16]
        path.write_bytes(body + digest64(body))
        with pytest.raises(IntegrityError):
            scene_load(path)

    def test_corrupted_byte_fails_checksum(self, tmp_path):
        scene = self._scene()
        path = tmp_path / "s.scne"
        scene_save(scene, path)
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            scene_load(path)
