"""LSTM encoder-decoder, mixture-density head, windows, and sequence eval."""

import numpy as np
import pytest

from latentscope.artifacts import Encodings
from latentscope.autodiff import Tensor
from latentscope.direct_eval import average_precision
from latentscope.errors import (
    ArtifactError,
    ConfigError,
    DataError,
    NonFiniteError,
    ShapeError,
)
from latentscope.future import (
    FpConfig,
    MixtureStep,
    build_sequences,
    decode_future,
    encode_sequence,
    encode_sequences,
    evaluate_fp,
    fit_fp,
    init_fp_params,
    load_fp_checkpoint,
    lstm_step,
    mdn_nll,
    save_fp_checkpoint,
)
from latentscope.future import _roll_encoder, _training_loss

from .gradcheck import assert_grads_close

HALF_LOG_2PI = 0.9189385332046727


def tiny_config(**kw):
    base = dict(past_length=3, future_length=3, hidden_size=8, components=4,
                learning_rate=0.01, epochs=4, batch_size=10, seed=1,
                latent_dim=4)
    base.update(kw)
    return FpConfig(**base)


def make_encodings(z, indices=None):
    z = np.asarray(z)
    if indices is None:
        indices = np.arange(len(z))
    return Encodings(indices=np.asarray(indices), means=z,
                     log_variances=np.zeros_like(z),
                     samples=z.astype(np.float32))


def sine_encodings(n=80, d=4, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    z = np.stack([np.sin(0.3 * t + k) for k in range(d)], axis=1)
    return make_encodings(z + 0.01 * rng.normal(size=(n, d)))


class TestConfig:
    def test_defaults(self):
        cfg = FpConfig()
        assert (cfg.past_length, cfg.future_length) == (5, 5)
        assert cfg.hidden_size == 64
        assert cfg.components == 16
        assert cfg.learning_rate == 0.005
        assert cfg.batch_size == 50

    @pytest.mark.parametrize("kw", [
        dict(past_length=0), dict(future_length=0), dict(components=0),
        dict(hidden_size=0), dict(epochs=0), dict(batch_size=0),
        dict(max_gap=0),
    ])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ConfigError):
            tiny_config(**kw).validate()


class TestLstmStep:
    def test_zero_weights_zero_state_give_zero_outputs(self):
        rng = np.random.default_rng(0)
        w = Tensor(np.zeros((3 + 4, 16)))
        b = Tensor(np.zeros(16))
        h, c = lstm_step(w, b, Tensor(rng.normal(size=(2, 3))),
                         Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
        assert np.all(h.data == 0)
        assert np.all(c.data == 0)

    def test_saturated_forget_gate_preserves_cell(self):
        # forget gate ~1, input gate ~0: the cell should pass through
        rng = np.random.default_rng(1)
        b = np.zeros(16)
        b[0:4] = -40.0   # input gate
        b[4:8] = 40.0    # forget gate
        cell = rng.normal(size=(2, 4))
        _, c2 = lstm_step(Tensor(np.zeros((7, 16))), Tensor(b),
                          Tensor(rng.normal(size=(2, 3))),
                          Tensor(np.zeros((2, 4))), Tensor(cell))
        np.testing.assert_allclose(c2.data, cell, rtol=0, atol=1e-10)

    def test_rejects_inconsistent_shapes(self):
        with pytest.raises(ShapeError):
            lstm_step(Tensor(np.zeros((7, 12))), Tensor(np.zeros(12)),
                      Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                      Tensor(np.zeros((2, 4))))


class TestInit:
    def test_shapes_and_forget_bias(self):
        cfg = FpConfig()
        params = init_fp_params(cfg, np.random.default_rng(0))
        h, d, m = cfg.hidden_size, cfg.latent_dim, cfg.components
        assert params["enc_w"].shape == (d + h, 4 * h)
        assert params["head_w"].shape == (h, m * (1 + 2 * d))
        assert params["head_w"].shape[1] == 656
        for name in ("enc_b", "dec_b"):
            bias = params[name].data
            assert np.all(bias[h:2 * h] == 1.0)
            assert np.all(bias[:h] == 0.0)
            assert np.all(bias[2 * h:] == np.concatenate([
                np.zeros(h), np.zeros(h)]))

    def test_deterministic_for_seeded_rng(self):
        cfg = tiny_config()
        a = init_fp_params(cfg, np.random.default_rng(5))
        b = init_fp_params(cfg, np.random.default_rng(5))
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)


class TestEncode:
    def test_encoding_has_hidden_width_and_is_deterministic(self):
        cfg = tiny_config()
        params = init_fp_params(cfg, np.random.default_rng(2))
        past = np.random.default_rng(3).normal(size=(3, 4)).astype(np.float32)
        s1 = encode_sequence(params, past)
        s2 = encode_sequence(params, past)
        assert s1.shape == (cfg.hidden_size,)
        assert np.array_equal(s1, s2)

    def test_order_sensitivity(self):
        cfg = tiny_config()
        params = init_fp_params(cfg, np.random.default_rng(2))
        past = np.random.default_rng(3).normal(size=(3, 4))
        flipped = past[::-1].copy()
        assert not np.allclose(encode_sequence(params, past),
                               encode_sequence(params, flipped))

    def test_batch_matches_single(self):
        cfg = tiny_config()
        params = init_fp_params(cfg, np.random.default_rng(2), dtype=np.float64)
        batch = np.random.default_rng(4).normal(size=(6, 3, 4))
        stacked = encode_sequences(params, batch)
        singles = np.stack([encode_sequence(params, w) for w in batch])
        np.testing.assert_allclose(stacked, singles, rtol=0, atol=1e-12)

    def test_rejects_wrong_rank(self):
        cfg = tiny_config()
        params = init_fp_params(cfg, np.random.default_rng(2))
        with pytest.raises(ShapeError):
            encode_sequence(params, np.zeros((2, 3, 4)))


class TestDecode:
    def test_per_step_mixture_contract(self):
        cfg = FpConfig()
        params = init_fp_params(cfg, np.random.default_rng(6))
        enc = np.random.default_rng(7).normal(size=cfg.hidden_size) \
            .astype(np.float32)
        steps = decode_future(params, enc, steps=cfg.future_length)
        assert len(steps) == cfg.future_length
        d, m = cfg.latent_dim, cfg.components
        for step in steps:
            assert step.logits.shape == (1, m)
            assert step.means.shape == (1, m, d)
            assert step.log_stds.shape == (1, m, d)
            # m weights + m*d means + m*d stds scalars per step
            assert m + 2 * m * d == 656
            np.testing.assert_allclose(step.weights.sum(axis=-1), 1.0,
                                       rtol=0, atol=1e-6)
            assert (step.weights >= 0).all()
            assert (step.stds > 0).all()

    def test_log_std_clamp_bounds_stds(self):
        cfg = tiny_config()
        params = init_fp_params(cfg, np.random.default_rng(6),
                                dtype=np.float64)
        m, d = cfg.components, cfg.latent_dim
        # force the raw log-std outputs far outside the clamp window
        params["head_b"].data[m + m * d:] = 1e4
        steps = decode_future(params, np.zeros(cfg.hidden_size), steps=1)
        np.testing.assert_allclose(steps[0].stds, np.exp(7.0), rtol=1e-12)
        params["head_b"].data[m + m * d:] = -1e4
        steps = decode_future(params, np.zeros(cfg.hidden_size), steps=1)
        np.testing.assert_allclose(steps[0].stds, np.exp(-7.0), rtol=1e-12)


class TestMdnNll:
    def test_single_unit_gaussian_at_its_mean(self):
        step = MixtureStep(logits=Tensor(np.zeros((1, 1))),
                           means=Tensor(np.full((1, 1, 1), 0.7)),
                           log_stds=Tensor(np.zeros((1, 1, 1))))
        nll = mdn_nll([step], np.full((1, 1, 1), 0.7))
        assert abs(float(nll.data) - HALF_LOG_2PI) < 1e-9

    def test_dimensions_factorize(self):
        # diagonal model: d-dim NLL at the mean is d times the 1-D value
        d = 5
        step = MixtureStep(logits=Tensor(np.zeros((1, 1))),
                           means=Tensor(np.zeros((1, 1, d))),
                           log_stds=Tensor(np.zeros((1, 1, d))))
        nll = mdn_nll([step], np.zeros((1, 1, d)))
        assert abs(float(nll.data) - d * HALF_LOG_2PI) < 1e-9

    def test_steps_sum_batch_averages(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(3, 2))
        means = rng.normal(size=(3, 2, 4))
        log_stds = 0.2 * rng.normal(size=(3, 2, 4))
        step = MixtureStep(logits=Tensor(logits), means=Tensor(means),
                           log_stds=Tensor(log_stds))
        target = rng.normal(size=(3, 1, 4))
        one = float(mdn_nll([step], target).data)
        two = float(mdn_nll([step, step],
                            np.concatenate([target, target], axis=1)).data)
        assert abs(two - 2 * one) < 1e-12

    def test_zero_weight_component_is_inert(self):
        base = MixtureStep(logits=Tensor(np.zeros((2, 1))),
                           means=Tensor(np.full((2, 1, 3), 0.4)),
                           log_stds=Tensor(np.zeros((2, 1, 3))))
        target = np.random.default_rng(9).normal(size=(2, 1, 3))
        plain = float(mdn_nll([base], target).data)
        padded = MixtureStep(
            logits=Tensor(np.concatenate(
                [np.zeros((2, 1)), np.full((2, 1), -1e3)], axis=1)),
            means=Tensor(np.concatenate(
                [np.full((2, 1, 3), 0.4), np.full((2, 1, 3), 99.0)], axis=1)),
            log_stds=Tensor(np.zeros((2, 2, 3))))
        assert abs(float(mdn_nll([padded], target).data) - plain) <= 1e-9

    def test_extreme_logits_stay_finite(self):
        step = MixtureStep(
            logits=Tensor(np.array([[800.0, -800.0]])),
            means=Tensor(np.zeros((1, 2, 2))),
            log_stds=Tensor(np.zeros((1, 2, 2))))
        value = float(mdn_nll([step], np.zeros((1, 1, 2))).data)
        assert np.isfinite(value)
        assert abs(value - 2 * HALF_LOG_2PI) < 1e-9

    def test_rejects_mismatched_targets(self):
        step = MixtureStep(logits=Tensor(np.zeros((1, 1))),
                           means=Tensor(np.zeros((1, 1, 2))),
                           log_stds=Tensor(np.zeros((1, 1, 2))))
        with pytest.raises(ShapeError):
            mdn_nll([step], np.zeros((1, 3, 2)))


class TestGradients:
    def test_mdn_nll_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        target = rng.normal(size=(4, 1, 3))

        def loss(logits, means, log_stds):
            return mdn_nll([MixtureStep(logits=logits, means=means,
                                        log_stds=log_stds)], target)

        tensors = [
            Tensor(rng.normal(size=(4, 3)), requires_grad=True,
                   dtype=np.float64),
            Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True,
                   dtype=np.float64),
            Tensor(0.3 * rng.normal(size=(4, 3, 3)), requires_grad=True,
                   dtype=np.float64),
        ]
        assert_grads_close(loss, tensors, rel_tol=1e-5, h=1e-6)

    def test_encoder_unroll_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        cfg = tiny_config(past_length=3, hidden_size=5, latent_dim=3)
        params = init_fp_params(cfg, rng, dtype=np.float64)
        past = rng.normal(size=(2, 3, 3))
        proj = rng.normal(size=(2, 5))

        def loss(w, b):
            h, c = _roll_encoder({"enc_w": w, "enc_b": b}, Tensor(past))
            return (h * h).sum() + (c * Tensor(proj)).sum()

        assert_grads_close(loss, [params["enc_w"], params["enc_b"]],
                           rel_tol=1e-5, h=1e-6)

    def test_full_model_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        cfg = tiny_config(past_length=2, future_length=2, hidden_size=5,
                          components=3, latent_dim=3)
        params = init_fp_params(cfg, rng, dtype=np.float64)
        past = rng.normal(size=(2, 2, 3))
        future = rng.normal(size=(2, 2, 3))
        names = list(params)
        tensors = [params[n] for n in names]

        def loss(*ts):
            return _training_loss(dict(zip(names, ts)), past, future, cfg)

        assert_grads_close(loss, tensors, rel_tol=1e-4, coords_per_tensor=8,
                           h=1e-6)


class TestBuildSequences:
    def test_twenty_consecutive_frames_give_eleven_windows(self):
        z = np.random.default_rng(13).normal(size=(20, 4))
        windows = build_sequences(z, past=5, future=5, max_gap=1)
        assert len(windows) == 11
        assert windows.past.shape == (11, 5, 4)
        assert windows.future.shape == (11, 5, 4)
        np.testing.assert_array_equal(windows.indices[0], np.arange(10))
        np.testing.assert_array_equal(windows.indices[-1], np.arange(10, 20))

    def test_windows_never_cross_an_index_gap(self):
        z = np.random.default_rng(14).normal(size=(20, 3))
        indices = np.arange(20)
        indices[9:] += 1  # raw frames 0..8 then 10..20
        windows = build_sequences(make_encodings(z, indices), max_gap=1)
        assert len(windows) == 2
        for row in windows.indices:
            assert np.all(np.diff(row) == 1)

    def test_max_gap_two_bridges_single_missing_frames(self):
        z = np.random.default_rng(15).normal(size=(20, 3))
        indices = np.arange(20)
        indices[9:] += 1
        windows = build_sequences(make_encodings(z, indices), max_gap=2)
        assert len(windows) == 11
        assert any(np.any(np.diff(row) == 2) for row in windows.indices)

    def test_future_frame_tiling(self):
        # interior frames serve as a future frame in exactly future_length
        # windows; edges in as many as exist
        n, past, future = 30, 5, 5
        z = np.random.default_rng(16).normal(size=(n, 2))
        windows = build_sequences(z, past=past, future=future, max_gap=1)
        future_ids = windows.indices[:, past:].reshape(-1)
        counts = np.bincount(future_ids, minlength=n)
        for f in range(n):
            starts = [s for s in range(n - past - future + 1)
                      if s + past <= f < s + past + future]
            assert counts[f] == len(starts)
            if past + future - 1 <= f <= n - future:
                assert counts[f] == future

    def test_rejects_too_few_frames(self):
        with pytest.raises(DataError):
            build_sequences(np.zeros((9, 2)), past=5, future=5)

    def test_rejects_when_gaps_leave_no_window(self):
        z = np.random.default_rng(17).normal(size=(20, 2))
        with pytest.raises(DataError):
            build_sequences(make_encodings(z, np.arange(20) * 3), max_gap=1)


class TestFit:
    def test_loss_decreases_on_predictable_sequences(self):
        params, history = fit_fp(sine_encodings(), tiny_config(epochs=8))
        assert len(history) == 8
        assert history[-1] < history[0]
        assert all(np.isfinite(v) for v in history)

    def test_same_seed_reproduces_parameters_exactly(self):
        enc = sine_encodings()
        cfg = tiny_config(epochs=2)
        p1, h1 = fit_fp(enc, cfg)
        p2, h2 = fit_fp(enc, cfg)
        assert h1 == h2
        for name in p1:
            assert np.array_equal(p1[name].data, p2[name].data)

    def test_seed_changes_parameters(self):
        enc = sine_encodings()
        p1, _ = fit_fp(enc, tiny_config(epochs=1, seed=1))
        p2, _ = fit_fp(enc, tiny_config(epochs=1, seed=2))
        assert any(not np.array_equal(p1[n].data, p2[n].data) for n in p1)

    def test_rejects_wrong_latent_dim(self):
        with pytest.raises(ConfigError):
            fit_fp(sine_encodings(d=3), tiny_config())

    def test_rejects_too_few_windows_for_a_batch(self):
        with pytest.raises(ConfigError):
            fit_fp(sine_encodings(n=8), tiny_config(batch_size=10))

    def test_non_finite_forward_names_epoch_and_batch(self):
        enc = sine_encodings(n=40)
        enc.samples[17, 2] = np.nan
        with pytest.raises(NonFiniteError, match=r"epoch \d+ batch \d+"):
            fit_fp(enc, tiny_config())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        params = init_fp_params(cfg, np.random.default_rng(20))
        path = str(tmp_path / "fp.bin")
        save_fp_checkpoint(params, cfg, path, config_hash="cafe")
        loaded, cfg2, h = load_fp_checkpoint(path)
        assert cfg2 == cfg
        assert h == "cafe"
        for name in params:
            assert np.array_equal(loaded[name].data, params[name].data)

    def test_rejects_other_model_kinds(self, tmp_path):
        from latentscope.artifacts import save_model
        path = str(tmp_path / "other.bin")
        save_model(path, "frame_vae", {}, {})
        with pytest.raises(ArtifactError):
            load_fp_checkpoint(path)

    def test_rejects_shape_mismatch_by_name(self, tmp_path):
        from latentscope.artifacts import save_model
        from latentscope.future import MODEL_KIND, _architecture
        cfg = tiny_config()
        tensors = {name: np.zeros(shape, dtype=np.float32)
                   for name, shape in _architecture(cfg).items()}
        tensors["head_w"] = np.zeros((2, 2), dtype=np.float32)
        path = str(tmp_path / "bad.bin")
        save_model(path, MODEL_KIND, cfg.__dict__, tensors)
        with pytest.raises(ArtifactError, match="head_w"):
            load_fp_checkpoint(path)


def eval_setup(n=40, seed=21, label_seed=22, min_run=6):
    enc = sine_encodings(n=n, seed=seed)
    rng = np.random.default_rng(label_seed)
    labels = np.zeros(n, dtype=bool)
    start = 0
    while start < n:  # alternating runs so several windows are tool-majority
        run = int(rng.integers(min_run, min_run + 4))
        labels[start:start + run] = True
        start += 2 * run
    cfg = tiny_config()
    params, _ = fit_fp(enc, tiny_config(epochs=1))
    return params, enc, labels, cfg


class TestEvaluate:
    def test_matches_per_frame_max_oracle(self):
        params, enc, labels, cfg = eval_setup()
        result = evaluate_fp(params, enc, labels, cfg)

        windows = build_sequences(enc, past=cfg.past_length,
                                  future=cfg.future_length,
                                  max_gap=cfg.max_gap)
        vecs = np.stack([encode_sequence(params, w.astype(np.float32))
                         for w in windows.past])
        unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        past_idx = windows.indices[:, :cfg.past_length]
        frame_ids = np.unique(past_idx)
        queries = [w for w in range(len(windows))
                   if labels[past_idx[w]].sum() * 2 > cfg.past_length]
        assert list(result.query_windows) == queries

        aps = []
        for q in queries:
            scores, keep = [], []
            for f in frame_ids:
                others = [w for w in range(len(windows))
                          if w != q and f in past_idx[w]]
                if others:
                    scores.append(max(float(unit[q] @ unit[w])
                                      for w in others))
                    keep.append(bool(labels[f]))
            aps.append(average_precision(np.array(scores), np.array(keep)))
        np.testing.assert_allclose(result.query_aps, aps, rtol=0, atol=1e-12)
        assert abs(result.mean_ap - np.mean(aps)) < 1e-12

    def test_queries_are_tool_majority_windows(self):
        params, enc, labels, cfg = eval_setup()
        result = evaluate_fp(params, enc, labels, cfg)
        windows = build_sequences(enc, past=cfg.past_length,
                                  future=cfg.future_length,
                                  max_gap=cfg.max_gap)
        past_idx = windows.indices[:, :cfg.past_length]
        for w in range(len(windows)):
            majority = labels[past_idx[w]].sum() * 2 > cfg.past_length
            assert (w in set(result.query_windows.tolist())) == majority

    def test_sequence_artifact_covers_all_windows(self):
        params, enc, labels, cfg = eval_setup()
        result = evaluate_fp(params, enc, labels, cfg, config_hash="beef")
        windows = build_sequences(enc, past=cfg.past_length,
                                  future=cfg.future_length,
                                  max_gap=cfg.max_gap)
        assert result.sequences.vectors.shape == (len(windows),
                                                  cfg.hidden_size)
        np.testing.assert_array_equal(
            result.sequences.windows,
            windows.indices[:, :cfg.past_length])
        assert result.sequences.config_hash == "beef"

    def test_deterministic(self):
        params, enc, labels, cfg = eval_setup()
        r1 = evaluate_fp(params, enc, labels, cfg)
        r2 = evaluate_fp(params, enc, labels, cfg)
        assert np.array_equal(r1.query_aps, r2.query_aps)
        assert r1.mean_ap == r2.mean_ap

    def test_all_aps_are_probabilities(self):
        params, enc, labels, cfg = eval_setup()
        result = evaluate_fp(params, enc, labels, cfg)
        assert np.all(result.query_aps >= 0.0)
        assert np.all(result.query_aps <= 1.0)

    def test_rejects_without_tool_majority_window(self):
        params, enc, labels, cfg = eval_setup()
        with pytest.raises(DataError):
            evaluate_fp(params, enc, np.zeros(len(enc), dtype=bool), cfg)

    def test_rejects_label_length_mismatch(self):
        params, enc, labels, cfg = eval_setup()
        with pytest.raises(DataError):
            evaluate_fp(params, enc, labels[:-1], cfg)

    def test_learned_encodings_separate_synthetic_regimes(self):
        # two latent regimes with different dynamics: sequence queries should
        # rank same-regime frames above the rest far better than chance
        rng = np.random.default_rng(30)
        n = 120
        labels = np.zeros(n, dtype=bool)
        for s in range(0, n, 30):
            labels[s:s + 15] = True
        z = np.zeros((n, 4))
        t = np.arange(n)
        z[labels] = np.stack([np.sin(1.1 * t[labels] + k) + 2.0
                              for k in range(4)], axis=1)
        z[~labels] = np.stack([np.cos(0.2 * t[~labels] + k) - 2.0
                               for k in range(4)], axis=1)
        z += 0.05 * rng.normal(size=z.shape)
        enc = make_encodings(z)
        cfg = tiny_config(epochs=30, batch_size=20)
        params, _ = fit_fp(enc, cfg)
        result = evaluate_fp(params, enc, labels, cfg)
        prevalence = labels.mean()
        assert result.mean_ap > prevalence + 0.2
