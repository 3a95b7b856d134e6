"""Trainer behavior on tiny datasets: determinism, resume, ablation table."""

import numpy as np
import pytest

from evdeblur.errors import ConfigError, NonFiniteLossError
from evdeblur.model import ModelConfig, init_weights
from evdeblur.simulate import DatasetConfig, make_dataset
from evdeblur.train import (
    Adam,
    TrainConfig,
    ablate,
    ablation_table,
    blur_baseline,
    evaluate_scenes,
    load_model,
    load_scenes,
    save_model,
    train_toy,
)
from evdeblur.tensorkit import Tensor

TINY_CFG = ModelConfig(n_scales=2, base_channels=8, n_chunks=2, seed=0)
TINY_TRAIN = TrainConfig(epochs=2, batch_size=2, lr=1e-3)


@pytest.fixture(scope="module")
def tiny_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyset")
    cfg = DatasetConfig(n_scenes=6, train_fraction=2 / 3, width=16, height=16, seed=5)
    return make_dataset(cfg, out)


class TestAdam:
    def test_zero_lr_leaves_weights_unchanged(self, tiny_set):
        w, log = train_toy(tiny_set["train"], TINY_CFG, TrainConfig(epochs=1, lr=0.0))
        fresh = init_weights(TINY_CFG)
        for name in fresh:
            assert np.array_equal(w[name].data, fresh[name].data)

    def test_update_direction_descends(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, ["p"], TrainConfig())
        p.grad = np.array([2.0])
        opt.step(0.1)
        assert p.data[0] < 1.0


class TestTrainToy:
    def test_loss_decreases_over_first_epochs(self, tiny_set):
        _, log = train_toy(
            tiny_set["train"], TINY_CFG, TrainConfig(epochs=5, batch_size=2, lr=1e-3)
        )
        losses = [e["loss"] for e in log]
        assert losses[-1] < losses[0]

    def test_deterministic_given_seed(self, tiny_set):
        w1, log1 = train_toy(tiny_set["train"], TINY_CFG, TINY_TRAIN)
        w2, log2 = train_toy(tiny_set["train"], TINY_CFG, TINY_TRAIN)
        assert [e["loss"] for e in log1] == [e["loss"] for e in log2]
        for n in w1:
            assert np.array_equal(w1[n].data, w2[n].data)

    def test_resume_matches_uninterrupted(self, tiny_set, tmp_path):
        full_dir = tmp_path / "full"
        w_full, log_full = train_toy(
            tiny_set["train"], TINY_CFG,
            TrainConfig(epochs=4, batch_size=2, lr=1e-3),
            out_dir=full_dir, val_manifest=tiny_set["test"],
        )
        half_dir = tmp_path / "half"
        train_toy(
            tiny_set["train"], TINY_CFG,
            TrainConfig(epochs=2, batch_size=2, lr=1e-3),
            out_dir=half_dir, val_manifest=tiny_set["test"],
        )
        resumed_dir = tmp_path / "resumed"
        w_res, log_res = train_toy(
            tiny_set["train"], TINY_CFG,
            TrainConfig(epochs=4, batch_size=2, lr=1e-3),
            out_dir=resumed_dir, val_manifest=tiny_set["test"],
            resume=half_dir / "state.edkp",
        )
        assert [e["loss"] for e in log_res] == [e["loss"] for e in log_full[2:]]
        for n in w_full:
            assert np.array_equal(w_full[n].data, w_res[n].data)

    def test_resume_rejects_other_config(self, tiny_set, tmp_path):
        train_toy(tiny_set["train"], TINY_CFG, TrainConfig(epochs=1), out_dir=tmp_path)
        other = ModelConfig(n_scales=2, base_channels=8, n_chunks=3, seed=0)
        with pytest.raises(ConfigError):
            train_toy(tiny_set["train"], other, TrainConfig(epochs=2),
                      resume=tmp_path / "state.edkp")

    def test_nonfinite_loss_aborts(self, tiny_set):
        import warnings

        with pytest.raises(NonFiniteLossError), warnings.catch_warnings():
            warnings.simplefilter("ignore")  # overflow warnings on the way to NaN
            train_toy(
                tiny_set["train"], TINY_CFG,
                TrainConfig(epochs=2, batch_size=2, lr=1e12),
            )

    def test_empty_manifest_rejected(self, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        with pytest.raises(ConfigError):
            train_toy(empty, TINY_CFG, TINY_TRAIN)

    def test_checkpoint_round_trip(self, tiny_set, tmp_path):
        w, _ = train_toy(tiny_set["train"], TINY_CFG, TINY_TRAIN)
        path = tmp_path / "model.edkp"
        save_model(path, w, TINY_CFG)
        w2, cfg2 = load_model(path)
        assert cfg2 == TINY_CFG
        for n in w:
            assert np.array_equal(w[n].data, w2[n].data)


class TestEvaluate:
    def test_zero_weight_model_scores_like_blur(self, tiny_set):
        w = init_weights(TINY_CFG)
        for t in w.values():
            t.data[:] = 0.0
        scenes = load_scenes(tiny_set["test"], TINY_CFG)
        model_report = evaluate_scenes(w, TINY_CFG, scenes)
        base_report = blur_baseline(scenes)
        assert model_report.psnr_values == pytest.approx(base_report.psnr_values, abs=1e-9)


class TestAblate:
    def test_single_row_table(self, tiny_set, tmp_path):
        rows = ablate(
            tiny_set["train"], tiny_set["test"], TINY_CFG,
            TrainConfig(epochs=1, batch_size=2), rows=["im"], out_dir=tmp_path,
        )
        assert len(rows) == 1
        assert rows[0]["row"] == "im"
        assert np.isfinite(rows[0]["psnr"])
        text = ablation_table(rows)
        assert "im" in text and "psnr" in text

    def test_rerun_identical(self, tiny_set):
        kwargs = dict(hyper=TrainConfig(epochs=1, batch_size=2), rows=["im", "im+c2f"])
        a = ablate(tiny_set["train"], tiny_set["test"], TINY_CFG, **kwargs)
        b = ablate(tiny_set["train"], tiny_set["test"], TINY_CFG, **kwargs)

        def strip_timing(rows):
            return [{k: v for k, v in r.items() if k != "train_seconds"} for r in rows]

        assert strip_timing(a) == strip_timing(b)

    def test_unknown_row_rejected(self, tiny_set):
        with pytest.raises(ConfigError):
            ablate(tiny_set["train"], tiny_set["test"], TINY_CFG, rows=["nope"])
