import json
import math

import numpy as np
import pytest

from eclip.batching import compose_batch_uniform
from eclip.encoders import EncoderSpec
from eclip.errors import CapacityError, NumericError, ParameterError
from eclip.oracles import max_relative_discrepancy
from eclip.synth import SynthSpec, generate
from eclip.tensor import ParamSet, finite_diff_check
from eclip.training import (
    Batch,
    OptimizerState,
    TrainConfig,
    adamw_update,
    batch_loss,
    init_model,
    multistream_step,
    naive_step,
    train,
)

from conftest import make_batch, make_model


def _small_data(seed=0):
    spec = SynthSpec(n_classes=8, n_catalogs_per_class=8, n_duplicates_per_catalog=3, seed=seed)
    return generate(spec).pair_dataset()


def _small_config(data, **kw):
    base = dict(
        text_spec=EncoderSpec(data.text.shape[1], (32,), 16),
        image_spec=EncoderSpec(data.image.shape[1], (32,), 16),
        B0=16,
        Bmax=64,
        total_steps=20,
        micro_batch=8,
        lr=1e-3,
        eval_interval=5,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestNaiveStep:
    @pytest.mark.parametrize("activation,seq", [("tanh", 0), ("relu", 0), ("tanh", 3)])
    def test_finite_differences(self, rng, activation, seq):
        model = make_model(seed=2, activation=activation)
        batch = make_batch(rng, model, 4, seq=seq)
        grads = naive_step(model, batch).grads
        assert finite_diff_check(lambda _: batch_loss(model, batch), model.params, grads) < 1e-5

    def test_deterministic(self, rng):
        model = make_model()
        batch = make_batch(rng, model, 6)
        a, b = naive_step(model, batch), naive_step(model, batch)
        assert a.loss == b.loss
        for name in a.grads:
            np.testing.assert_array_equal(a.grads[name], b.grads[name])

    def test_degenerate_batch(self):
        model = make_model()
        n = 2
        batch = Batch(np.ones((n, 5)), np.ones((n, 7)), ["c", "c"])
        res = naive_step(model, batch)
        # identical rows make every logit equal; uniform targets then give ln N
        assert abs(res.loss - math.log(n)) < 1e-12
        assert np.all(np.isfinite(res.grads["log_tau"]))

    def test_hard_label_mode(self, rng):
        model = make_model()
        batch = make_batch(rng, model, 6, n_catalogs=2)
        assert naive_step(model, batch, "hard").loss != naive_step(model, batch, "soft").loss
        with pytest.raises(ParameterError):
            naive_step(model, batch, "fuzzy")

    def test_frozen_tower_has_no_grads(self, rng):
        model = make_model()
        model.freeze = {"text": False, "image": True}
        batch = make_batch(rng, model, 5)
        for grads in (naive_step(model, batch).grads, multistream_step(model, batch, 2).grads):
            assert not any(n.startswith("image.") for n in grads)
            assert any(n.startswith("text.") for n in grads) and "log_tau" in grads


class TestMultistream:
    def test_single_stream_is_exact(self, rng):
        model = make_model()
        batch = make_batch(rng, model, 9)
        ref, got = naive_step(model, batch), multistream_step(model, batch, 9)
        assert got.loss == ref.loss
        for name in ref.grads:
            np.testing.assert_array_equal(got.grads[name], ref.grads[name])

    def test_micro_batches_match_naive(self, rng):
        model = make_model(seed=4)
        batch = make_batch(rng, model, 8)
        ref, got = naive_step(model, batch), multistream_step(model, batch, 2)
        assert max_relative_discrepancy(got.grads, ref.grads) < 1e-9
        assert abs(got.loss - ref.loss) < 1e-12

    @pytest.mark.parametrize("m", [1, 3, 4, 7])
    def test_incomplete_last_micro_batch(self, rng, m):
        model = make_model(seed=5, activation="relu")
        batch = make_batch(rng, model, 10, seq=2)
        ref, got = naive_step(model, batch), multistream_step(model, batch, m)
        assert got.stats["micro_batches"] == math.ceil(10 / m)
        assert max_relative_discrepancy(got.grads, ref.grads) < 1e-9

    def test_micro_batch_out_of_range(self, rng):
        model = make_model()
        batch = make_batch(rng, model, 4)
        with pytest.raises(ParameterError):
            multistream_step(model, batch, 5)
        with pytest.raises(ParameterError):
            multistream_step(model, batch, 0)

    def test_order_independent_with_compensation(self, rng):
        model = make_model(seed=6)
        batch = make_batch(rng, model, 12)
        base = multistream_step(model, batch, 2, compensated=True)
        for _ in range(5):
            order = rng.permutation(6).tolist()
            got = multistream_step(model, batch, 2, compensated=True, order=order)
            for name in base.grads:
                np.testing.assert_allclose(got.grads[name], base.grads[name], rtol=0, atol=1e-12)

    def test_workers_do_not_change_result(self, rng):
        model = make_model(seed=7)
        batch = make_batch(rng, model, 16)
        serial = multistream_step(model, batch, 4)
        threaded = multistream_step(model, batch, 4, workers=4)
        assert serial.loss == threaded.loss
        for name in serial.grads:
            np.testing.assert_array_equal(serial.grads[name], threaded.grads[name])

    @pytest.mark.parametrize("n", [4, 16, 32])
    def test_memory_proxy(self, rng, n):
        model = make_model()
        batch = make_batch(rng, model, n)
        stats = multistream_step(model, batch, 2).stats
        # stream 1 never holds more than one working activation
        assert stats["stream1_peak_mats"] == 1
        # stream 2 holds one tower's layer inputs for one micro-batch at a time
        assert stats["stream2_peak_mats"] == len(model.text_spec.layer_dims)
        assert stats["stream2_peak_rows"] == 2 * len(model.text_spec.layer_dims)
        assert naive_step(model, batch).stats["peak_rows"] == 2 * n * len(model.text_spec.layer_dims)


class TestAdamW:
    def _one(self, g, wd):
        p = ParamSet({"w": np.array([1.0])})
        adamw_update(p, {"w": np.array([g])}, OptimizerState(), 0.1, wd, (0.9, 0.999), 1e-8)
        return p["w"][0]

    def test_plain_step(self):
        assert abs(self._one(1.0, 0.0) - 0.9) < 1e-8

    def test_decoupled_decay(self):
        assert abs(self._one(1.0, 0.1) - 0.89) < 1e-8

    def test_null_step(self):
        assert self._one(0.0, 0.0) == 1.0

    def test_non_finite_gradient_named(self):
        p = ParamSet({"w": np.ones(2), "v": np.ones(2)})
        with pytest.raises(NumericError, match="'v'"):
            adamw_update(p, {"w": np.ones(2), "v": np.array([1.0, np.nan])}, OptimizerState(), 0.1)
        np.testing.assert_array_equal(p["w"], 1.0)

    def test_log_tau_not_decayed(self):
        model = make_model()
        before = model.params["log_tau"].copy()
        grads = {n: np.zeros_like(model.params[n]) for n in model.params.names()}
        adamw_update(model.params, grads, OptimizerState(), 0.1, weight_decay=0.5)
        np.testing.assert_array_equal(model.params["log_tau"], before)
        assert not np.array_equal(model.params["text.W0"], make_model().params["text.W0"])

    def test_bias_correction_over_steps(self):
        # constant gradient: every bias-corrected step has size lr
        p = ParamSet({"w": np.array([0.0])})
        state = OptimizerState()
        for _ in range(5):
            adamw_update(p, {"w": np.array([2.0])}, state, 0.01)
        assert abs(p["w"][0] + 0.05) < 1e-9


class TestTrain:
    def test_zero_lr_keeps_init(self):
        data = _small_data()
        cfg = _small_config(data, total_steps=1, lr=0.0)
        model, _ = train(cfg, data)
        assert model.params.equals(init_model(cfg).params)

    def test_metrics_log_length(self, tmp_path):
        data = _small_data()
        cfg = _small_config(data, total_steps=23, eval_interval=5)
        _, metrics = train(cfg, data, log_path=tmp_path / "m.jsonl")
        assert len(metrics) == math.ceil(23 / 5)
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [0, 5, 10, 15, 20]
        assert set(json.loads(lines[0])) == {"step", "loss", "batch_size", "tau", "sampling", "eval"}

    def test_deterministic_logs(self, tmp_path):
        data = _small_data()
        cfg = _small_config(data, sampling="category", warmup_fraction=0.2)
        train(cfg, data, log_path=tmp_path / "a.jsonl")
        train(cfg, data, log_path=tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_dataset_smaller_than_bmax(self):
        data = _small_data()
        with pytest.raises(CapacityError):
            train(_small_config(data, Bmax=1000), data)

    def test_constant_schedule_matches_manual_loop(self):
        data = _small_data()
        cfg = _small_config(data, B0=16, Bmax=16, total_steps=6)
        trained, metrics = train(cfg, data)
        assert {m["batch_size"] for m in metrics} == {16}
        model = init_model(cfg)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0].generate_state(1)[0])
        state = OptimizerState()
        for _ in range(cfg.total_steps):
            ids = compose_batch_uniform(data.product_ids, 16, rng)
            res = multistream_step(model, data.batch(ids), cfg.micro_batch)
            adamw_update(model.params, res.grads, state, cfg.lr)
        assert model.params.equals(trained.params)

    def test_checkpoints(self, tmp_path):
        data = _small_data()
        cfg = _small_config(data, total_steps=10, checkpoint_every=4)
        train(cfg, data, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000004.json", "step_000008.json"]

    def test_probe_loss_decreases(self):
        drops = []
        for seed in range(5):
            data = _small_data(seed)
            cfg = _small_config(data, total_steps=200, eval_interval=199, seed=seed)
            probe = data.batch(data.product_ids[:32])
            _, metrics = train(cfg, data, probe=probe)
            drops.append(metrics[0]["eval"]["probe_loss"] - metrics[-1]["eval"]["probe_loss"])
        assert np.median(drops) > 0
