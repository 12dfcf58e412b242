"""Optimizer, training loop, checkpoints, gradcheck."""

import numpy as np
import pytest

from fpmine.dataset import generate_synthetic_dataset, identity_split
from fpmine.encoders import EncoderConfig
from fpmine.errors import ConfigError, DataError
from fpmine.model import Model, ModelFlags
from fpmine.sampling import balanced_batches
from fpmine.training import (AdamState, Checkpoint, TrainConfig, adam_step, gradcheck,
                             learnable_boundary_variant, load_checkpoint,
                             model_from_checkpoint, save_checkpoint, train)

CFG = EncoderConfig(feature_dim=12, shared_dim=6, projection_dim=5, region_count=3,
                    max_words=8, image_raw_dim=7, text_raw_dim=7)


def toy_dataset(seed=0, identities=6, per_id=4):
    return generate_synthetic_dataset(seed, identities, per_id, CFG,
                                      attribute_count=4, detail_count=1, flip_count=1,
                                      hard_negative_fraction=0.3, min_hamming=1)


def toy_config(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 8)
    kw.setdefault("seed", 0)
    kw.setdefault("val_fraction", 0.2)
    return TrainConfig(**kw)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.zeros_like(params)
        out = adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(out["w"], params["w"])

    def test_first_step_moves_against_gradient_sign(self):
        params = {"w": np.array([1.0, -1.0, 0.5])}
        grads = {"w": np.array([0.3, -0.7, 2.0])}
        state = AdamState.zeros_like(params)
        out = adam_step(params, grads, state, lr=0.01)
        moved = out["w"] - params["w"]
        assert np.all(np.sign(moved) == -np.sign(grads["w"]))

    def test_two_steps_match_decimal_oracle(self):
        # f(x) = x^2 from x0 = 1 with lr 0.1; trajectory computed once with
        # 50-digit Decimal arithmetic and frozen here
        params = {"x": np.array(1.0)}
        state = AdamState.zeros_like(params)
        for _ in range(2):
            grads = {"x": 2.0 * params["x"]}
            params = adam_step(params, grads, state, lr=0.1)
        assert float(params["x"]) == pytest.approx(0.80041222869179214523740594408, rel=1e-12)

    def test_intermediate_step_matches_oracle(self):
        params = {"x": np.array(1.0)}
        state = AdamState.zeros_like(params)
        params = adam_step(params, {"x": 2.0 * params["x"]}, state, lr=0.1)
        assert float(params["x"]) == pytest.approx(0.9000000004999999975, rel=1e-12)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=7)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)

    def test_json_roundtrip(self):
        tc = toy_config(flags=ModelFlags(use_mining=False), learning_rate=0.01)
        back = TrainConfig.from_json(tc.to_json())
        assert back == tc

    def test_learnable_boundary_variant(self):
        tc = toy_config()
        on = learnable_boundary_variant(tc)
        assert on.flags.learnable_boundary and not tc.flags.learnable_boundary
        assert learnable_boundary_variant(on, False).flags.learnable_boundary is False


class TestTrain:
    def test_loss_decreases(self):
        ds = toy_dataset()
        result = train(ds, toy_config(epochs=6))
        steps = [r["total"] for r in result.log if r["type"] == "step"]
        assert steps[-1] < steps[0]

    def test_epochs_zero_returns_initialization(self):
        ds = toy_dataset()
        result = train(ds, toy_config(epochs=0))
        fresh = Model(ds.config, seed=0)
        assert result.checkpoint.step == 0
        for name, arr in fresh.params.items():
            assert np.array_equal(result.checkpoint.params[name], arr)

    def test_full_run_determinism_bit_identical(self):
        ds = toy_dataset()
        a = train(ds, toy_config(epochs=3))
        b = train(ds, toy_config(epochs=3))
        assert a.checkpoint.params.keys() == b.checkpoint.params.keys()
        for name in a.checkpoint.params:
            assert np.array_equal(a.checkpoint.params[name], b.checkpoint.params[name]), name
        assert [r for r in a.log] == [r for r in b.log]

    def test_different_seed_differs(self):
        ds = toy_dataset()
        a = train(ds, toy_config(seed=0))
        b = train(ds, toy_config(seed=1))
        assert any(not np.array_equal(a.checkpoint.params[n], b.checkpoint.params[n])
                   for n in a.checkpoint.params)

    def test_mining_disabled_never_produces_word_terms(self):
        ds = toy_dataset()
        result = train(ds, toy_config(flags=ModelFlags(use_mining=False)))
        for rec in result.log:
            if rec["type"] == "step":
                assert rec["matched"] == 0.0
                assert rec["mismatched"] == 0.0
                assert rec["rank_local_neg"] == 0.0

    def test_validation_records_emitted(self):
        ds = toy_dataset()
        result = train(ds, toy_config(epochs=2, val_every=1))
        vals = [r for r in result.log if r["type"] == "val"]
        assert len(vals) == 2
        assert set(vals[0]["r_at"]) == {1, 5, 10}

    def test_boundary_logged_when_learnable(self):
        ds = toy_dataset()
        result = train(ds, toy_config(flags=ModelFlags(learnable_boundary=True)))
        epochs = [r for r in result.log if r["type"] == "epoch"]
        assert all("boundary_tau" in r for r in epochs)

    def test_unbalanced_mode_trains(self):
        ds = toy_dataset()
        result = train(ds, toy_config(balanced_sampling=False))
        assert result.checkpoint.step > 0

    def test_grad_clip_runs(self):
        ds = toy_dataset()
        result = train(ds, toy_config(grad_clip_norm=1.0))
        assert result.checkpoint.step > 0


class TestCheckpoint:
    def test_roundtrip_bytes_and_values(self, tmp_path):
        ds = toy_dataset()
        result = train(ds, toy_config(epochs=2))
        path = tmp_path / "ckpt.bin"
        save_checkpoint(result.checkpoint, path)
        back = load_checkpoint(path)
        assert back.version == result.checkpoint.version
        assert back.encoder_config == result.checkpoint.encoder_config
        assert back.train_config == result.checkpoint.train_config
        assert back.step == result.checkpoint.step
        assert back.epoch == result.checkpoint.epoch
        assert back.adam_t == result.checkpoint.adam_t
        assert back.rng_state == result.checkpoint.rng_state
        for group in ("params", "adam_m", "adam_v"):
            a, b = getattr(result.checkpoint, group), getattr(back, group)
            assert a.keys() == b.keys()
            for name in a:
                assert np.array_equal(a[name], b[name]), (group, name)

    def test_save_is_deterministic(self, tmp_path):
        ds = toy_dataset()
        result = train(ds, toy_config(epochs=1))
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(result.checkpoint, p1)
        save_checkpoint(result.checkpoint, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_equals_uninterrupted(self, tmp_path):
        ds = toy_dataset()
        straight = train(ds, toy_config(epochs=4))

        half = train(ds, toy_config(epochs=2))
        path = tmp_path / "half.bin"
        save_checkpoint(half.checkpoint, path)
        resumed = train(ds, toy_config(epochs=4), start=load_checkpoint(path))

        assert resumed.checkpoint.step == straight.checkpoint.step
        for name in straight.checkpoint.params:
            assert np.array_equal(resumed.checkpoint.params[name],
                                  straight.checkpoint.params[name]), name
        # step logs for the second half coincide too
        tail_a = [r for r in straight.log if r["type"] == "step"][half.checkpoint.step:]
        tail_b = [r for r in resumed.log if r["type"] == "step"]
        assert tail_a == tail_b

    def test_wrong_config_rejected_on_resume(self, tmp_path):
        ds = toy_dataset()
        other = generate_synthetic_dataset(
            1, 4, 2, EncoderConfig(feature_dim=10, shared_dim=4, projection_dim=3,
                                   region_count=3, max_words=8, image_raw_dim=5,
                                   text_raw_dim=5),
            attribute_count=4, detail_count=1, flip_count=1,
                                   min_hamming=1)
        result = train(ds, toy_config(epochs=1))
        with pytest.raises(ConfigError):
            train(other, toy_config(epochs=2), start=result.checkpoint)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"garbage")
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_model_from_checkpoint_scores_like_result_model(self):
        ds = toy_dataset()
        result = train(ds, toy_config(epochs=1))
        rebuilt = model_from_checkpoint(result.checkpoint)
        s1 = result.model.score_matrix([ds.samples[0]], [ds.samples[1]], "full")
        s2 = rebuilt.score_matrix([ds.samples[0]], [ds.samples[1]], "full")
        assert np.array_equal(s1, s2)


class TestBranchIsolation:
    def test_disabled_mining_keeps_mining_params_frozen(self):
        ds = toy_dataset()
        result = train(ds, toy_config(flags=ModelFlags(use_mining=False)))
        fresh = Model(ds.config, ModelFlags(use_mining=False), seed=0)
        for name in ("mining_region_proj", "mining_word_proj"):
            assert np.array_equal(result.checkpoint.params[name], fresh.params[name])

    def test_disabled_global_keeps_global_branch_frozen(self):
        ds = toy_dataset()
        flags = ModelFlags(use_global=False)
        result = train(ds, toy_config(flags=flags))
        fresh = Model(ds.config, flags, seed=0)
        assert np.array_equal(result.checkpoint.params["img_global_w"],
                              fresh.params["img_global_w"])
        # but local branch trained
        assert not np.array_equal(result.checkpoint.params["img_local_w"],
                                  fresh.params["img_local_w"])


class TestGradCheck:
    def test_passes_on_toy_config(self):
        ds = toy_dataset()
        report = gradcheck(ds, toy_config(), tolerance=1e-5, coords_per_param=3)
        assert report.passed, report.to_json()
        assert report.max_rel_error <= 1e-5
        assert report.coords_checked > 0

    def test_covers_every_parameter_group(self):
        ds = toy_dataset()
        report = gradcheck(ds, toy_config(), coords_per_param=2)
        model = Model(ds.config, seed=0)
        assert set(report.per_param) == set(model.params)

    def test_learnable_boundary_included(self):
        ds = toy_dataset()
        report = gradcheck(ds, toy_config(flags=ModelFlags(learnable_boundary=True)),
                           coords_per_param=2)
        assert "boundary_tau" in report.per_param
        assert report.passed, report.to_json()
