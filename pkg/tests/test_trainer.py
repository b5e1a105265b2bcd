"""Adam optimizer, back-to-back training loop, and checkpoint container."""

import numpy as np
import pytest

from claad.csp import LabeledEpoch, csp_fit
from claad.dataset import WindowedExample
from claad.sigproc import MultiChannelRecording
from claad.errors import ConfigError, CorruptFileError, NumericalError
from claad.model import ModelConfig, compute_gradients, init_parameters
from claad.trainer import (
    Checkpoint,
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate_accuracy,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_step,
)

MINI = ModelConfig(d_model=8, n_heads=2, n_blocks=2, d_repr=5, probe_hidden=4,
                   clf_dims=(6, 4, 2), window_len=4, in_channels=3)


def make_examples(rng, n, cfg=MINI, subjects=("s1",)):
    examples = []
    for i in range(n):
        examples.append(WindowedExample(
            features=rng.standard_normal((cfg.in_channels, cfg.window_len)),
            env_a=rng.standard_normal(cfg.window_len),
            env_b=rng.standard_normal(cfg.window_len),
            label=i % 2,
            subject_id=subjects[i % len(subjects)],
            trial_id=f"t{i:03d}",
            window_index=0,
        ))
    return examples


def f32_grid(array):
    return np.asarray(array, dtype=np.float64).astype(np.float32).astype(np.float64)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 0.001 and cfg.beta1 == 0.9 and cfg.beta2 == 0.99
        assert cfg.epochs == 40 and cfg.batch_size == 32

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(noise_sigma=-1.0)


class TestAdamStep:
    def test_zero_gradients_leave_parameters(self):
        params = {"w": np.array([1.0, -2.0]), "b": np.array([[0.5]])}
        grads = {"w": np.zeros(2), "b": np.zeros((1, 1))}
        state = OptimizerState.initial(params)
        new_params, new_state = adam_step(params, grads, state, TrainConfig())
        assert new_state.t == 1
        for key in params:
            np.testing.assert_array_equal(new_params[key], params[key])

    def test_first_step_cancels_bias_correction(self):
        params = {"w": np.array([2.0])}
        grads = {"w": np.array([1.0])}
        state = OptimizerState.initial(params)
        new_params, _ = adam_step(params, grads, state, TrainConfig())
        assert abs(new_params["w"][0] - (2.0 - 0.001)) < 1e-9

    def test_matches_scalar_reference(self):
        cfg = TrainConfig(lr=0.01, beta1=0.8, beta2=0.95, eps_adam=1e-8)
        rng = np.random.default_rng(0)
        params = {"w": rng.standard_normal(4)}
        state = OptimizerState.initial(params)
        ref_p = [float(x) for x in params["w"]]
        ref_m = [0.0] * 4
        ref_v = [0.0] * 4
        for t in range(1, 6):
            g = rng.standard_normal(4)
            for j in range(4):
                ref_m[j] = cfg.beta1 * ref_m[j] + (1 - cfg.beta1) * g[j]
                ref_v[j] = cfg.beta2 * ref_v[j] + (1 - cfg.beta2) * g[j] ** 2
                mhat = ref_m[j] / (1 - cfg.beta1 ** t)
                vhat = ref_v[j] / (1 - cfg.beta2 ** t)
                ref_p[j] -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps_adam)
            params, state = adam_step(params, {"w": g}, state, cfg)
            np.testing.assert_allclose(params["w"], ref_p, rtol=0, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        params = {"w": rng.standard_normal((3, 2))}
        grads = {"w": rng.standard_normal((3, 2))}
        state = OptimizerState(m={"w": rng.standard_normal((3, 2))},
                               v={"w": rng.standard_normal((3, 2)) ** 2}, t=7)
        out_a = adam_step(params, grads, state, TrainConfig())
        out_b = adam_step(params, grads, state, TrainConfig())
        np.testing.assert_array_equal(out_a[0]["w"], out_b[0]["w"])
        np.testing.assert_array_equal(out_a[1].m["w"], out_b[1].m["w"])

    def test_nonfinite_gradient_names_tensor(self):
        params = {"w": np.zeros(2), "u": np.zeros(2)}
        grads = {"w": np.zeros(2), "u": np.array([1.0, np.inf])}
        with pytest.raises(NumericalError) as info:
            adam_step(params, grads, OptimizerState.initial(params), TrainConfig())
        assert info.value.tensor_name == "u"

    def test_misaligned_keys_rejected(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(ValueError):
            adam_step(params, {"x": np.zeros(2)}, OptimizerState.initial(params),
                      TrainConfig())

    def test_zero_lr_is_identity_on_parameters(self):
        rng = np.random.default_rng(2)
        params = {"w": rng.standard_normal(5)}
        grads = {"w": rng.standard_normal(5)}
        new_params, new_state = adam_step(
            params, grads, OptimizerState.initial(params), TrainConfig(lr=0.0))
        np.testing.assert_array_equal(new_params["w"], params["w"])
        assert new_state.t == 1

    def test_global_norm_clip_rescales(self):
        params = {"w": np.zeros(2)}
        grads = {"w": np.array([3.0, 4.0])}
        cfg = TrainConfig(grad_clip=1.0)
        _, state = adam_step(params, grads, OptimizerState.initial(params), cfg)
        # after clipping to unit norm, m = (1-beta1) * g/5
        np.testing.assert_allclose(state.m["w"], 0.1 * np.array([0.6, 0.8]), rtol=1e-12)


def tiny_batch(rng, examples, indices):
    from claad.dataset import AugmentConfig
    from claad.trainer import _two_view_batch
    return _two_view_batch(examples, indices, AugmentConfig(noise_sigma=0.5), 11, 12)


class TestTrainStep:
    def test_metrics_recorded_and_finite(self):
        rng = np.random.default_rng(3)
        examples = make_examples(rng, 4)
        batch = tiny_batch(rng, examples, [0, 1, 2, 3])
        params = init_parameters(MINI, seed=4)
        state = OptimizerState.initial(params)
        _, new_state, metrics = train_step(batch, params, state, TrainConfig(), MINI)
        assert new_state.t == 2
        assert np.isfinite(metrics["claad_loss"])
        assert np.isfinite(metrics["classification_loss"])
        assert 0.0 <= metrics["batch_accuracy"] <= 1.0

    def test_zero_lr_leaves_parameters_bit_identical(self):
        rng = np.random.default_rng(5)
        examples = make_examples(rng, 4)
        batch = tiny_batch(rng, examples, [0, 1, 2, 3])
        params = init_parameters(MINI, seed=6)
        new_params, _, _ = train_step(batch, params, OptimizerState.initial(params),
                                      TrainConfig(lr=0.0), MINI)
        for key in params:
            np.testing.assert_array_equal(new_params[key], params[key])

    def test_classification_phase_updates_encoder(self):
        # reproduce the first (contrastive) update, then confirm the full
        # step moved encoder tensors further: the encoder is not frozen.
        rng = np.random.default_rng(7)
        examples = make_examples(rng, 4)
        batch = tiny_batch(rng, examples, [0, 1, 2, 3])
        params = init_parameters(MINI, seed=8)
        state = OptimizerState.initial(params)
        cfg = TrainConfig()
        _, _, grads = compute_gradients(batch, params, MINI, "claad")
        after_claad, _ = adam_step(params, grads, state, cfg)
        final, _, _ = train_step(batch, params, state, cfg, MINI)
        assert any(np.any(final[k] != after_claad[k]) for k in params
                   if k.startswith(("block", "eeg_proj", "audio_proj", "fusion")))
        # and the snapshot feeding the classification forward differs from
        # the one feeding the contrastive forward
        assert any(np.any(after_claad[k] != params[k]) for k in params)


class TestFit:
    def test_empty_training_set_rejected(self):
        with pytest.raises(ConfigError):
            fit([], [], TrainConfig(epochs=1), MINI)

    def test_history_shape_and_keys(self):
        rng = np.random.default_rng(9)
        examples = make_examples(rng, 8)
        cfg = TrainConfig(epochs=3, batch_size=4, seed=1)
        checkpoint, history = fit(examples[:6], examples[6:], cfg, MINI)
        assert len(history) == 3
        for entry in history:
            assert set(entry) == {"claad_loss", "classification_loss",
                                  "batch_accuracy", "val_accuracy"}
            assert 0.0 <= entry["val_accuracy"] <= 1.0
        assert checkpoint.epoch == 3
        assert checkpoint.stats is not None
        assert checkpoint.history == tuple(history)

    def test_seed_reproducibility(self):
        rng = np.random.default_rng(10)
        examples = make_examples(rng, 8)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
        ckpt_a, hist_a = fit(examples[:6], examples[6:], cfg, MINI)
        ckpt_b, hist_b = fit(examples[:6], examples[6:], cfg, MINI)
        assert hist_a == hist_b
        for key in ckpt_a.params:
            np.testing.assert_array_equal(ckpt_a.params[key], ckpt_b.params[key])

    def test_fewer_examples_than_batch_size_still_trains(self):
        rng = np.random.default_rng(11)
        examples = make_examples(rng, 4)
        _, history = fit(examples, [], TrainConfig(epochs=1, batch_size=32), MINI)
        assert np.isfinite(history[0]["claad_loss"])
        assert np.isnan(history[0]["val_accuracy"])

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        examples = make_examples(rng, 4)
        wrong = ModelConfig(d_model=8, n_heads=2, n_blocks=1, d_repr=5, probe_hidden=4,
                            clf_dims=(4, 2), window_len=4, in_channels=7)
        with pytest.raises(ConfigError):
            fit(examples, [], TrainConfig(epochs=1), wrong)


class TestEvaluateAccuracy:
    def test_random_model_near_chance_on_balanced_labels(self):
        rng = np.random.default_rng(13)
        examples = make_examples(rng, 240)
        checkpoint = Checkpoint(params=init_parameters(MINI, seed=14),
                                opt_state=OptimizerState.initial(init_parameters(MINI, seed=14)),
                                model_cfg=MINI)
        table = evaluate_accuracy(examples, checkpoint)
        assert set(table) == {("s1", MINI.window_len)}
        entry = table[("s1", MINI.window_len)]
        assert entry["n_examples"] == 240
        assert 0.35 <= entry["accuracy"] <= 0.65

    def test_groups_by_subject(self):
        rng = np.random.default_rng(15)
        examples = make_examples(rng, 12, subjects=("a", "b", "c"))
        params = init_parameters(MINI, seed=16)
        checkpoint = Checkpoint(params=params, opt_state=OptimizerState.initial(params),
                                model_cfg=MINI)
        table = evaluate_accuracy(examples, checkpoint)
        assert set(table) == {(s, MINI.window_len) for s in ("a", "b", "c")}
        assert all(entry["n_examples"] == 4 for entry in table.values())

    def test_logit_ties_break_toward_class_zero(self):
        rng = np.random.default_rng(17)
        examples = [ex for ex in make_examples(rng, 6) if True]
        params = init_parameters(MINI, seed=18)
        for key in params:
            if key.startswith("clf."):
                params[key][:] = 0.0
        checkpoint = Checkpoint(params=params, opt_state=OptimizerState.initial(params),
                                model_cfg=MINI)
        table = evaluate_accuracy(examples, checkpoint)
        # zero classifier -> logits [0, 0] for every example -> predict 0
        acc = table[("s1", MINI.window_len)]["accuracy"]
        labels = np.array([ex.label for ex in examples])
        assert acc == np.mean(labels == 0)


class TestCheckpointIO:
    def build(self, rng, with_csp=True):
        params = {k: f32_grid(v) for k, v in init_parameters(MINI, seed=19).items()}
        state = OptimizerState(
            m={k: f32_grid(rng.standard_normal(v.shape) * 0.01) for k, v in params.items()},
            v={k: f32_grid(rng.standard_normal(v.shape) ** 2) for k, v in params.items()},
            t=17)
        csp = None
        if with_csp:
            epochs = [LabeledEpoch(MultiChannelRecording(
                rng.standard_normal((3, 40)) * (1.0 + label), fs=64.0), label)
                for label in (0, 1) for _ in range(6)]
            csp = csp_fit(epochs, n_components=3)
            csp = type(csp)(filters=f32_grid(csp.filters),
                            eigenvalues=f32_grid(csp.eigenvalues),
                            class_covariances=(f32_grid(csp.class_covariances[0]),
                                               f32_grid(csp.class_covariances[1])),
                            shrinkage=0.05)
        from claad.dataset import StandardizeStats
        stats = StandardizeStats(feature_mean=f32_grid(rng.standard_normal(3)),
                                 feature_std=f32_grid(np.abs(rng.standard_normal(3)) + 1),
                                 env_mean=0.5, env_std=2.0)
        history = ({"claad_loss": 1.5, "classification_loss": 0.7,
                    "batch_accuracy": 0.5, "val_accuracy": 0.625},
                   {"claad_loss": 1.25, "classification_loss": 0.5,
                    "batch_accuracy": 0.75, "val_accuracy": 0.75})
        return Checkpoint(params=params, opt_state=state, csp=csp, stats=stats,
                          model_cfg=MINI, train_cfg=TrainConfig(epochs=2, seed=3),
                          epoch=2, history=history)

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(20)
        checkpoint = self.build(rng)
        path = tmp_path / "run.ckpt"
        save_checkpoint(checkpoint, path)
        loaded = load_checkpoint(path)
        assert loaded.params.keys() == checkpoint.params.keys()
        for key in checkpoint.params:
            np.testing.assert_array_equal(loaded.params[key], checkpoint.params[key])
            np.testing.assert_array_equal(loaded.opt_state.m[key], checkpoint.opt_state.m[key])
            np.testing.assert_array_equal(loaded.opt_state.v[key], checkpoint.opt_state.v[key])
        assert loaded.opt_state.t == 17
        np.testing.assert_array_equal(loaded.csp.filters, checkpoint.csp.filters)
        np.testing.assert_array_equal(loaded.stats.feature_std, checkpoint.stats.feature_std)
        assert loaded.stats.env_mean == 0.5 and loaded.stats.env_std == 2.0
        assert loaded.model_cfg == checkpoint.model_cfg
        assert loaded.train_cfg == checkpoint.train_cfg
        assert loaded.epoch == 2
        assert loaded.history == checkpoint.history

    def test_save_load_save_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(21)
        checkpoint = self.build(rng)
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(checkpoint, first)
        save_checkpoint(load_checkpoint(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_optional_parts_absent(self, tmp_path):
        rng = np.random.default_rng(22)
        checkpoint = self.build(rng, with_csp=False)
        checkpoint.stats = None
        path = tmp_path / "bare.ckpt"
        save_checkpoint(checkpoint, path)
        loaded = load_checkpoint(path)
        assert loaded.csp is None and loaded.stats is None

    def test_truncated_file_rejected(self, tmp_path):
        rng = np.random.default_rng(23)
        path = tmp_path / "t.ckpt"
        save_checkpoint(self.build(rng), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptFileError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CorruptFileError):
            load_checkpoint(path)
