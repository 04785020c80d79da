import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xar.datakit import DataError, synth_generate
from xar.encoders import Model, init_params
from xar.experiments import SMALL_MODEL, run_overfit
from xar.numkit import NumericalError
from xar.trainer import (
    ConfigError,
    IncompatibleCheckpoint,
    LookaheadRAdam,
    OptimizerState,
    TrainConfig,
    check_compatible,
    evaluate,
    load_checkpoint,
    lookahead_sync,
    model_config_for,
    prepare_splits,
    radam_step,
    run_experiment,
    save_checkpoint,
    select_checkpoint,
    subsample_train,
    train_epoch,
    train_single,
)

# Frozen from an independent scalar evaluation of the RAdam recurrence
# (beta 0.9/0.999, eps 1e-8, lr 0.01); rectification first applies at t=5.
RADAM_GRADS = [1, -0.5, 2, 0.3, 1.5, -1, 0.7, 0.2, -0.4, 1.1]
RADAM_TRACE = [0.99, 0.9878947368421053, 0.9791862497572345, 0.9721376891291449, 0.9720113889296029,
               0.9719048467450614, 0.9717515402806512, 0.9715792324276358, 0.9714349704861669, 0.9712196538863006]
RADAM_WD_TRACE = [0.497995, 0.4959900105526316, 0.49398503200831223, 0.49198006471551925, 0.49180695005209446,
                  0.49154873960824913, 0.4912213524639475, 0.4908339710145199]

TINY_MODEL = dict(SMALL_MODEL, embed_dim=16, text_clusters=2, expert_clusters=2)


@pytest.fixture(scope="module")
def tiny_ds():
    return synth_generate(24, 4, [("a", 6), ("b", 5)], 0.05, seed=3, word_dim=6,
                          splits={"train": 12, "val": 6, "test": 6}).dataset


def tiny_train_config(**kw):
    return TrainConfig(**{"batch_size": 8, "max_epochs": 2, "seeds": 2, **kw})


class TestRAdam:
    def test_first_step(self):
        theta = {"w": np.array([1.0])}
        radam_step(theta, {"w": np.array([1.0])}, OptimizerState(), lr=0.01)
        assert theta["w"][0] == pytest.approx(0.99, abs=1e-12)

    def test_reference_trace(self):
        theta = {"w": np.array([1.0])}
        state = OptimizerState()
        for g, want in zip(RADAM_GRADS, RADAM_TRACE):
            radam_step(theta, {"w": np.array([float(g)])}, state, lr=0.01)
            assert theta["w"][0] == pytest.approx(want, abs=1e-12)
        assert state.step == 10

    def test_coupled_weight_decay_trace(self):
        theta = {"w": np.array([0.5])}
        state = OptimizerState()
        for want in RADAM_WD_TRACE:
            radam_step(theta, {"w": np.array([0.2])}, state, lr=0.01, weight_decay=0.001)
            assert theta["w"][0] == pytest.approx(want, abs=1e-12)

    def test_zero_gradient_leaves_params(self, rng):
        w = rng.normal(size=(3, 2))
        theta = {"w": w.copy()}
        state = OptimizerState()
        for _ in range(8):
            radam_step(theta, {"w": np.zeros((3, 2))}, state, lr=0.1)
        np.testing.assert_array_equal(theta["w"], w)

    def test_identical_inputs_identical_updates(self, rng):
        g = [rng.normal(size=4) for _ in range(7)]
        out = []
        for _ in range(2):
            theta, state = {"w": np.ones(4)}, OptimizerState()
            for gi in g:
                radam_step(theta, {"w": gi}, state, lr=0.01)
            out.append(theta["w"].tobytes())
        assert out[0] == out[1]

    def test_nan_gradient_aborts(self):
        with pytest.raises(NumericalError, match="w"):
            radam_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, OptimizerState(), lr=0.01)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            radam_step({"w": np.ones(2)}, {"w": np.ones(3)}, OptimizerState(), lr=0.01)


class TestLookahead:
    def test_interpolation(self):
        fast, slow = {"w": np.array([1.0])}, {"w": np.array([0.0])}
        assert lookahead_sync(fast, slow, 0.5, step=5, k=5)
        assert fast["w"][0] == slow["w"][0] == 0.5

    def test_alpha_one(self):
        fast, slow = {"w": np.array([3.0])}, {"w": np.array([0.0])}
        lookahead_sync(fast, slow, 1.0, step=10, k=5)
        assert fast["w"][0] == 3.0 and slow["w"][0] == 3.0

    def test_off_step_noop(self):
        fast, slow = {"w": np.array([1.0])}, {"w": np.array([0.0])}
        assert not lookahead_sync(fast, slow, 0.5, step=4, k=5)
        assert (fast["w"][0], slow["w"][0]) == (1.0, 0.0)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.margin, c.lr, c.weight_decay, c.lr_decay, c.max_epochs, c.seeds) == (
            128, 0.2, 0.01, 0.001, 0.95, 20, 3)
        assert (c.lookahead_k, c.lookahead_alpha) == (5, 0.5)

    @given(st.integers(0, 60))
    def test_lr_schedule(self, e):
        c = TrainConfig()
        assert c.lr_at(e + 1) == 0.01 * 0.95**e

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"train_fraction": 0}, {"train_fraction": 1.5},
                                    {"margin": -1}, {"lookahead_alpha": 0}])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_model_config_for(self, tiny_ds):
        mc = model_config_for(tiny_ds, {"experts": ["b"], "expert_clusters": 3, "embed_dim": 4})
        assert mc.expert_names == ["b"] and mc.experts[0].clusters == 3 and mc.word_dim == 6
        with pytest.raises(ConfigError, match="zzz"):
            model_config_for(tiny_ds, {"experts": ["zzz"]})
        with pytest.raises(ConfigError):
            model_config_for(tiny_ds, {"dropout": 0.1})


class TestSelection:
    def test_argmax(self):
        assert select_checkpoint([10, 30, 20]) == 2

    def test_tie(self):
        assert select_checkpoint([30, 30]) == 1

    def test_single(self):
        assert select_checkpoint([7.0]) == 1

    def test_mapping_with_epoch_zero(self):
        assert select_checkpoint({0: 5.0, 1: 5.0, 2: 4.0}) == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            select_checkpoint([])


class TestSubsample:
    @given(st.integers(1, 500), st.floats(0.01, 1.0), st.integers(0, 100))
    @settings(max_examples=50)
    def test_size_and_determinism(self, n, f, seed):
        a = subsample_train(n, f, seed)
        assert len(a) == max(1, math.floor(f * n + 1e-9))
        assert len(set(a.tolist())) == len(a) and a.max() < n
        assert np.array_equal(a, subsample_train(n, f, seed))

    def test_half(self):
        assert len(subsample_train(13, 0.5, 0)) == 6


class TestTraining:
    def test_batch_count_keeps_short_batch(self, tiny_ds):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        tc = tiny_train_config(batch_size=5)
        train = prepare_splits(tiny_ds, tc, mc.expert_names)["train"]
        params = init_params(mc, 0)
        stats = train_epoch(Model(params), train, tc, np.random.default_rng(0), LookaheadRAdam(params, tc))
        assert stats.n_batches == 3  # 12 samples: 5 + 5 + 2

    def test_two_batches(self):
        ds = synth_generate(256, 4, [("a", 3)], 0.1, seed=0, word_dim=4).dataset
        mc = model_config_for(ds, dict(TINY_MODEL, embed_dim=4))
        tc = TrainConfig(max_epochs=1, seeds=1)
        train = prepare_splits(ds, tc, mc.expert_names)["train"]
        params = init_params(mc, 0)
        assert train_epoch(Model(params), train, tc, np.random.default_rng(0), LookaheadRAdam(params, tc)).n_batches == 2

    def test_epoch_is_deterministic(self, tiny_ds):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        tc = tiny_train_config()
        train = prepare_splits(tiny_ds, tc, mc.expert_names)["train"]
        out = []
        for _ in range(2):
            params = init_params(mc, 1)
            s = train_epoch(Model(params), train, tc, np.random.default_rng([1, 1]), LookaheadRAdam(params, tc))
            out.append((s.mean_loss, params["gate.out_W"].data.tobytes()))
        assert out[0] == out[1]

    def test_overfit_loss_drops(self):
        trace = run_overfit(max_epochs=5, stop_when_reached=False)
        assert trace.losses[4] < trace.losses[0]

    def test_run_experiment_reports(self, tiny_ds):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        result = run_experiment(mc, tiny_train_config(), tiny_ds, label="tiny")
        t2a = result.reports["t2a"]
        assert t2a.seeds == [0, 1] and t2a.std is not None and t2a.label == "tiny"
        assert t2a.extra["train_size"] == 12
        assert set(result.reports) == {"t2a", "a2t"}
        for run in result.runs:
            assert set(run.val_scores) == {0, 1, 2}
            assert run.checkpoint.val_score == max(run.val_scores.values())

    def test_fraction_halves_train_split(self, tiny_ds):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        result = run_experiment(mc, tiny_train_config(train_fraction=0.5, seeds=1), tiny_ds)
        assert result.reports["t2a"].extra == {"train_fraction": 0.5, "train_size": 6, "arch": "ce",
                                                "experts": ["a", "b"]}

    def test_missing_splits(self, tiny_ds):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        with pytest.raises(DataError):
            run_experiment(mc, tiny_train_config(test_split="nope"), tiny_ds)
        with pytest.raises(DataError):
            run_experiment(mc, tiny_train_config(train_split="nope"), tiny_ds)

    def test_init_starts_at_checkpoint_score(self, tiny_ds):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        tc = tiny_train_config(seeds=1)
        first = train_single(mc, tc, tiny_ds, seed=0)
        arrays = prepare_splits(tiny_ds, tc, mc.expert_names)
        zero_shot = evaluate(Model(first.checkpoint.params), arrays["val"])["t2a"].geom_mean
        tuned = train_single(mc, tc, tiny_ds, seed=0, init=first.checkpoint)
        assert tuned.val_scores[0] == zero_shot
        assert tuned.checkpoint.val_score >= zero_shot


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_ds, tmp_path):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        run = train_single(mc, tiny_train_config(seeds=1), tiny_ds, seed=0)
        save_checkpoint(run.checkpoint, tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert back.params.names() == run.checkpoint.params.names()
        for n in back.params.names():
            assert back.params[n].data.tobytes() == run.checkpoint.params[n].data.tobytes()
        assert (back.epoch, back.val_score, back.seed) == (run.checkpoint.epoch, run.checkpoint.val_score, 0)
        assert back.model_config == mc and back.padding == run.checkpoint.padding
        arrays = prepare_splits(tiny_ds, tiny_train_config(), mc.expert_names)
        a = evaluate(Model(back.params), arrays["test"])
        b = evaluate(Model(run.checkpoint.params), arrays["test"])
        assert a["t2a"].to_dict() == b["t2a"].to_dict() and a["a2t"].to_dict() == b["a2t"].to_dict()
        save_checkpoint(back, tmp_path / "again")
        for f in ("params.json", "params.bin"):
            assert (tmp_path / "ck" / f).read_bytes() == (tmp_path / "again" / f).read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path)

    def test_incompatible(self, tiny_ds):
        mc = model_config_for(tiny_ds, TINY_MODEL)
        params = init_params(mc, 0)
        with pytest.raises(IncompatibleCheckpoint, match="'b'"):
            check_compatible(params, model_config_for(tiny_ds, dict(TINY_MODEL, experts=["a"])))
        with pytest.raises(IncompatibleCheckpoint, match="text.netvlad"):
            check_compatible(params, model_config_for(tiny_ds, dict(TINY_MODEL, text_clusters=3)))
        check_compatible(params, replace(mc))
