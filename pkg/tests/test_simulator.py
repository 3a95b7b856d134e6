"""Scene generation, blur formation, event emission, and dataset writing."""

import numpy as np
import pytest

from evdeblur.errors import ConfigError, ShapeError
from evdeblur.events import read_events_binary
from evdeblur.imageio import read_image
from evdeblur.simulate import (
    LOG_EPS,
    DatasetConfig,
    SceneConfig,
    blur_average,
    emit_events,
    generate_scene,
    make_dataset,
    read_manifest,
    sample_scene_config,
    simulate_scene,
    to_luma,
)


class TestGenerateScene:
    def test_zero_velocity_gives_identical_frames(self):
        cfg = SceneConfig(motion=("translate", 0.0, 0.0), seed=3)
        frames = generate_scene(cfg)
        assert len(frames) == 11
        for f in frames[1:]:
            assert np.array_equal(f, frames[0])

    def test_integer_translation_is_index_shift(self):
        cfg = SceneConfig(
            width=32, height=32, n_frames=5, motion=("translate", 1.0, 0.0),
            texture=("checker", 4), seed=7,
        )
        frames = generate_scene(cfg)
        # oracle: frame k equals frame 0 shifted k pixels right on the interior
        for k in range(1, 5):
            assert np.allclose(frames[k][:, k:], frames[0][:, :-k], atol=1e-12)

    def test_deterministic_given_seed(self):
        cfg = SceneConfig(seed=11)
        a = generate_scene(cfg)
        b = generate_scene(cfg)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa, fb)

    def test_intensities_in_unit_range(self):
        for texture in (("blobs", 10), ("checker", 8)):
            frames = generate_scene(SceneConfig(texture=texture, seed=5))
            for f in frames:
                assert f.min() >= 0.0 and f.max() <= 1.0

    def test_even_frame_count_rejected(self):
        with pytest.raises(ConfigError):
            SceneConfig(n_frames=10)

    def test_unknown_motion_rejected(self):
        with pytest.raises(ConfigError):
            SceneConfig(motion=("warp", 1.0))

    def test_uniform_flow_field_matches_translation(self):
        field = np.zeros((2, 24, 24))
        field[0] = -0.4  # vy
        field[1] = 0.7   # vx
        flow_cfg = SceneConfig(width=24, height=24, n_frames=5,
                               motion=("flow", field), texture=("blobs", 6), seed=13)
        trans_cfg = SceneConfig(width=24, height=24, n_frames=5,
                                motion=("translate", 0.7, -0.4),
                                texture=("blobs", 6), seed=13)
        flow_frames = generate_scene(flow_cfg)
        trans_frames = generate_scene(trans_cfg)
        for a, b in zip(flow_frames, trans_frames):
            assert np.allclose(a, b, atol=1e-12)

    def test_flow_field_shape_enforced(self):
        with pytest.raises(ConfigError):
            generate_scene(SceneConfig(width=16, height=16,
                                       motion=("flow", np.zeros((2, 8, 8)))))

    def test_rotation_moves_periphery_not_center(self):
        # odd dims put the rotation axis exactly on a pixel
        cfg = SceneConfig(
            width=33, height=33, motion=("rotate", 0.02), texture=("blobs", 12), seed=2
        )
        frames = generate_scene(cfg)
        assert abs(frames[-1][16, 16] - frames[0][16, 16]) < 1e-9
        assert np.abs(frames[-1] - frames[0]).max() > 1e-3


class TestBlurAverage:
    def test_single_frame_identity(self, rng):
        f = rng.uniform(0, 1, size=(6, 6))
        assert np.array_equal(blur_average([f]), f)

    def test_two_constant_frames(self):
        a = np.full((4, 4), 0.2)
        b = np.full((4, 4), 0.4)
        assert np.allclose(blur_average([a, b]), 0.3, atol=1e-15)

    def test_matches_summation_oracle(self, rng):
        frames = [rng.uniform(0, 1, size=(8, 9)) for _ in range(11)]
        # oracle: explicit per-pixel running sum then divide
        expected = np.zeros((8, 9))
        for f in frames:
            expected = expected + f
        expected = expected / 11.0
        assert np.max(np.abs(blur_average(frames) - expected)) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            blur_average([np.zeros((4, 4)), np.zeros((4, 5))])


class TestEmitEvents:
    def test_static_frames_give_empty_stream(self):
        frames = [np.full((4, 4), 0.5)] * 5
        assert len(emit_events(frames, c=0.2)) == 0

    def test_exact_triple_threshold_step(self):
        # one pixel's log intensity rises by exactly 3c in one interval:
        # crossings at interpolated fractions 1/3, 2/3, 1 of the interval
        c = 0.2
        i0 = 0.3
        l0 = np.log(i0 + LOG_EPS)
        i1 = np.exp(l0 + 3 * c) - LOG_EPS
        f0 = np.full((3, 3), i0)
        f1 = f0.copy()
        f1[1, 2] = i1
        stream = emit_events([f0, f1], c=c, t0=0.0, t1=1.0)
        assert len(stream) == 3
        assert np.all(stream.p == 1)
        assert np.all(stream.x == 2)
        assert np.all(stream.y == 1)
        assert np.allclose(stream.t, [1 / 3, 2 / 3, 1.0], atol=1e-9)

    def test_brighten_then_darken_balances_counts(self, rng):
        base = rng.uniform(0.2, 0.6, size=(8, 8))
        bright = base * 1.8
        frames = [base, bright, base]
        stream = emit_events(frames, c=0.1)
        pos = np.zeros((8, 8))
        neg = np.zeros((8, 8))
        np.add.at(pos, (stream.y[stream.p > 0], stream.x[stream.p > 0]), 1)
        np.add.at(neg, (stream.y[stream.p < 0], stream.x[stream.p < 0]), 1)
        assert np.array_equal(pos, neg)

    def test_log_bookkeeping_residual_below_threshold(self, rng):
        cfg = SceneConfig(motion=("translate", 0.5, -0.3), texture=("blobs", 9), seed=21)
        frames = generate_scene(cfg)
        c = 0.08
        stream = emit_events(frames, c=c)
        net = np.zeros((cfg.height, cfg.width))
        np.add.at(net, (stream.y, stream.x), stream.p.astype(float))
        total_change = np.log(to_luma(frames[-1]) + LOG_EPS) - np.log(to_luma(frames[0]) + LOG_EPS)
        assert np.max(np.abs(total_change - c * net)) < c + 1e-9

    def test_events_sorted_and_in_bounds(self, rng):
        cfg = SceneConfig(motion=("translate", -0.7, 0.4), seed=33)
        stream = emit_events(generate_scene(cfg), c=0.05)
        assert len(stream) > 0
        assert np.all(np.diff(stream.t) >= 0)

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ConfigError):
            emit_events([np.zeros((2, 2))] * 3, c=0.0)


class TestReblurConsistency:
    def test_forward_model_reproduces_blur_on_exact_scene(self):
        # scene built so every log-intensity step is an exact multiple of c:
        # quantized texture levels plus integer per-frame translation
        c = 0.25
        rng = np.random.default_rng(12)
        h = w = 32
        margin = 12
        levels = np.exp(np.log(0.05 + LOG_EPS) + c * rng.integers(0, 12, size=(h + 2 * margin, w + 2 * margin))) - LOG_EPS
        cfg = SceneConfig(
            width=w, height=h, n_frames=11, motion=("translate", 1.0, 0.0),
            texture=("image", levels), contrast_c=c, seed=0,
        )
        frames = generate_scene(cfg)
        blur = blur_average(frames)
        stream = emit_events(frames, c=c)
        # forward model: start frame times the mean exponentiated integral
        # over frame times (integral inclusive on the right)
        from evdeblur.edi import event_integral_at

        times = np.linspace(0.0, 1.0, cfg.n_frames)
        integrals = event_integral_at(stream, times)
        gain = np.mean(np.exp(c * integrals), axis=0)
        reblur = frames[0] * gain
        from evdeblur.metrics import psnr

        assert psnr(reblur, blur) > 40.0


class TestDataset:
    def test_manifest_lists_existing_files(self, tmp_path):
        cfg = DatasetConfig(n_scenes=3, train_fraction=2 / 3, width=24, height=24, seed=4)
        manifests = make_dataset(cfg, tmp_path)
        train = read_manifest(manifests["train"])
        test = read_manifest(manifests["test"])
        assert len(train) == 2 and len(test) == 1
        for blur_p, events_p, gt_p in train + test:
            blur = read_image(blur_p)
            gt = read_image(gt_p)
            stream = read_events_binary(events_p)
            assert blur.shape == gt.shape == (24, 24)
            assert (stream.width, stream.height) == (24, 24)

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = DatasetConfig(n_scenes=2, train_fraction=0.5, width=16, height=16, seed=9)
        make_dataset(cfg, tmp_path / "a")
        make_dataset(cfg, tmp_path / "b")
        rel_files = sorted(
            p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()
        )
        assert rel_files
        for rel in rel_files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_split_arithmetic(self, tmp_path):
        cfg = DatasetConfig(n_scenes=10, train_fraction=0.8, width=16, height=16, seed=1)
        manifests = make_dataset(cfg, tmp_path)
        assert len(read_manifest(manifests["train"])) == 8
        assert len(read_manifest(manifests["test"])) == 2

    def test_scene_pack_consistency(self):
        pack = simulate_scene(sample_scene_config(DatasetConfig(seed=0, width=32, height=32), 0))
        assert np.allclose(pack.blur, blur_average(pack.latent_frames), atol=1e-12)
        assert np.array_equal(pack.gt_mid, pack.latent_frames[pack.mid_index])
