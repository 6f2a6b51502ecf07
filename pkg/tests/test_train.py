"""Loss, optimizer, phase control, checkpointing."""
import dataclasses
import json
import math

import numpy as np
import pytest

from partpool import train
from partpool.config import RunConfig, Schedule, SynthConfig
from partpool.data import generate_synthetic
from partpool.errors import ConfigError, NumericAbortError
from partpool.model import Model
from partpool.train import Phase, TrainState


def tiny_run_config(**sched_kw):
    sched = dict(base_lr=0.05, decay_epoch=2, total_epochs=3, rpp_epochs=2,
                 rpp_lr=0.005, batch_size=8, early_stop=False)
    sched.update(sched_kw)
    return RunConfig(
        backbone=dataclasses.replace(RunConfig().backbone,
                                     stages=((8, 2), (8, 2)),
                                     halve_last_downsample=False,
                                     input_size=(16, 8)),
        head=dataclasses.replace(RunConfig().head, p=2, r=6),
        schedule=Schedule(**sched),
        synth=SynthConfig(num_ids=6, imgs_per_id=4, bands=2, image_size=(16, 8)),
    )


@pytest.fixture(scope="module")
def tiny_manifest():
    return generate_synthetic(num_ids=6, imgs_per_id=4, bands=2, seed=0,
                              image_size=(16, 8))


class TestLoss:
    def test_uniform_probabilities_hand_value(self):
        probs = np.full((3, 2, 4), 0.25)
        labels = np.array([0, 1, 3])
        assert train.pcb_loss(probs, labels) == pytest.approx(2 * math.log(4),
                                                              abs=1e-12)

    def test_perfect_prediction_is_zero(self):
        probs = np.zeros((2, 3, 4))
        probs[:, :, 1] = 1.0
        labels = np.array([1, 1])
        assert train.pcb_loss(probs, labels) == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range_raises(self):
        probs = np.full((2, 2, 4), 0.25)
        with pytest.raises(ValueError):
            train.pcb_loss(probs, np.array([0, 4]))
        with pytest.raises(ValueError):
            train.pcb_loss(probs, np.array([-1, 0]))

    def test_zero_probability_is_clipped_not_inf(self):
        probs = np.zeros((1, 1, 3))
        probs[0, 0, 0] = 1.0
        loss = train.pcb_loss(probs, np.array([2]))
        assert np.isfinite(loss) and loss > 100.0


class TestSgd:
    def test_closed_form_two_steps(self):
        p0, g, lr, mom, wd = 2.0, 0.5, 0.1, 0.9, 0.01
        params = {"w": np.array([p0])}
        vel = {"w": np.zeros(1)}
        grads = {"w": np.array([g])}
        train.sgd_update(params, grads, vel, frozenset(), lr, mom, wd)
        v1 = g + wd * p0
        p1 = p0 - lr * v1
        assert params["w"][0] == pytest.approx(p1, rel=1e-15)
        train.sgd_update(params, grads, vel, frozenset(), lr, mom, wd)
        v2 = mom * v1 + (g + wd * p1)
        assert params["w"][0] == pytest.approx(p1 - lr * v2, rel=1e-15)

    def test_frozen_names_do_not_move(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        vel = {k: np.zeros(2) for k in params}
        grads = {k: np.ones(2) for k in params}
        train.sgd_update(params, grads, vel, frozenset({"a"}), 0.1, 0.9, 0.0)
        np.testing.assert_array_equal(params["a"], np.ones(2))
        np.testing.assert_array_equal(vel["a"], np.zeros(2))
        assert not np.array_equal(params["b"], np.ones(2))

    def test_pretrained_names_use_scaled_lr(self):
        params = {"old": np.ones(1), "new": np.ones(1)}
        vel = {k: np.zeros(1) for k in params}
        grads = {k: np.ones(1) for k in params}
        train.sgd_update(params, grads, vel, frozenset(), 0.1, 0.0, 0.0,
                         scaled_names=frozenset({"old"}), lr_scale=0.1)
        assert params["new"][0] == pytest.approx(0.9)
        assert params["old"][0] == pytest.approx(0.99)


class TestPhases:
    def test_batch_stats_off_only_in_classifier_phase(self):
        assert train.batch_stats_enabled(Phase.PCB_UNIFORM)
        assert not train.batch_stats_enabled(Phase.RPP_CLASSIFIER_ONLY)
        assert train.batch_stats_enabled(Phase.RPP_FINETUNE)

    def test_freeze_mask_covers_everything_but_assigner(self):
        cfg = tiny_run_config().model_config(num_classes=3)
        cfg = dataclasses.replace(cfg, pooling="rpp")
        model = Model(cfg, seed=0)
        mask = train.freeze_mask_for(model, Phase.RPP_CLASSIFIER_ONLY)
        assert all(not n.startswith("rpp.") for n in mask)
        assert set(model.params) - mask == {n for n in model.params
                                            if n.startswith("rpp.")}
        assert train.freeze_mask_for(model, Phase.PCB_UNIFORM) == frozenset()
        assert train.freeze_mask_for(model, Phase.RPP_FINETUNE) == frozenset()

    def test_classifier_phase_is_bit_exact_on_frozen_state(self, tiny_manifest):
        cfg = tiny_run_config()
        pcb, _ = train.fit(tiny_manifest, cfg, mode="pcb")
        state = TrainState.fresh(pcb.clone(), cfg.schedule, seed=9)
        from partpool.rpp import build_rpp_head
        state.model = build_rpp_head(pcb)
        state.enter_phase(Phase.RPP_CLASSIFIER_ONLY)
        before_params = {k: v.copy() for k, v in state.model.params.items()
                         if not k.startswith("rpp.")}
        before_buffers = {k: v.copy() for k, v in state.model.buffers.items()}
        pixels, labels = tiny_manifest.train_arrays()
        for _ in range(3):
            train.train_phase(state, pixels, labels, 1, lambda e: 0.005,
                              early_stop=False)
        for k, v in before_params.items():
            assert np.array_equal(state.model.params[k], v), k
        for k, v in before_buffers.items():
            assert np.array_equal(state.model.buffers[k], v), k
        # the assigner itself did move
        assert not np.array_equal(state.model.params["rpp.wc"],
                                  np.zeros_like(state.model.params["rpp.wc"]))

    def test_velocity_reset_between_phases(self):
        cfg = tiny_run_config().model_config(num_classes=3)
        model = Model(cfg, seed=0)
        state = TrainState.fresh(model, tiny_run_config().schedule, seed=0)
        state.velocity = {k: np.ones_like(v) for k, v in model.params.items()}
        state.enter_phase(Phase.RPP_FINETUNE)
        # the empty dict means fresh zero velocity on the next step
        assert state.velocity == {}


class TestNumericGuards:
    def test_nan_loss_aborts_with_snapshot(self, tmp_path, tiny_manifest):
        cfg = tiny_run_config()
        mc = cfg.model_config(num_classes=tiny_manifest.num_identities)
        model = Model(mc, seed=0)
        model.params["backbone.s0.conv.w"][:] = np.nan
        state = TrainState.fresh(model, cfg.schedule, seed=0)
        state.snapshot_dir = str(tmp_path)
        pixels, labels = tiny_manifest.train_arrays()
        with pytest.raises(NumericAbortError) as exc:
            train.run_step(state, (pixels[:4], labels[:4]))
        assert (tmp_path / "abort_snapshot.npz").exists()
        assert exc.value.diagnostics


class TestFit:
    def test_loss_decreases_and_log_structure(self, tiny_manifest):
        cfg = tiny_run_config()
        model, records = train.fit(tiny_manifest, cfg, mode="pcb")
        assert len(records) == 3
        assert all(r["phase"] == "PCB_UNIFORM" for r in records)
        assert records[-1]["mean_loss"] < records[0]["mean_loss"]
        assert set(records[0]) >= {"phase", "epoch", "lr", "mean_loss",
                                   "empty_part_count"}

    def test_decay_epoch_drops_lr_tenfold(self, tiny_manifest):
        cfg = tiny_run_config(total_epochs=3, decay_epoch=2)
        _, records = train.fit(tiny_manifest, cfg, mode="pcb")
        assert records[0]["lr"] == pytest.approx(0.05)
        assert records[2]["lr"] == pytest.approx(0.005)

    def test_same_seed_reproduces_exactly(self, tiny_manifest):
        cfg = tiny_run_config()
        m1, r1 = train.fit(tiny_manifest, cfg, mode="pcb", seed=5)
        m2, r2 = train.fit(tiny_manifest, cfg, mode="pcb", seed=5)
        assert [r["mean_loss"] for r in r1] == [r["mean_loss"] for r in r2]
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k], m2.params[k])

    def test_rejects_refined_mode(self, tiny_manifest):
        with pytest.raises(ConfigError):
            train.fit(tiny_manifest, tiny_run_config(), mode="rpp")

    def test_early_stop_on_plateau(self, tiny_manifest):
        cfg = tiny_run_config(total_epochs=30, early_stop=True, min_delta=10.0,
                              patience=2)
        _, records = train.fit(tiny_manifest, cfg, mode="pcb")
        # every delta is below a huge min_delta, so the streak trips after
        # patience epochs beyond the first
        assert len(records) == 3


class TestInduced:
    def test_full_procedure_phase_order(self, tiny_manifest):
        cfg = tiny_run_config()
        model, records = train.induced_training(tiny_manifest, cfg)
        phases = [r["phase"] for r in records]
        assert phases == ["PCB_UNIFORM"] * 3 + ["RPP_CLASSIFIER_ONLY"] + ["RPP_FINETUNE"]
        assert model.cfg.pooling == "rpp"
        assert model.meta.get("induced") is True

    def test_accepts_pretrained_uniform_model(self, tiny_manifest):
        cfg = tiny_run_config()
        pcb, _ = train.fit(tiny_manifest, cfg, mode="pcb")
        model, records = train.induced_training(tiny_manifest, cfg, pcb=pcb)
        phases = {r["phase"] for r in records}
        assert phases == {"RPP_CLASSIFIER_ONLY", "RPP_FINETUNE"}

    def test_rejects_untrained_supplied_model(self, tiny_manifest):
        cfg = tiny_run_config()
        mc = cfg.model_config(num_classes=tiny_manifest.num_identities)
        with pytest.raises(ConfigError):
            train.induced_training(tiny_manifest, cfg, pcb=Model(mc, seed=0))

    def test_no_induction_trains_jointly_from_scratch(self, tiny_manifest):
        cfg = tiny_run_config()
        model, records = train.induced_training(tiny_manifest, cfg,
                                                no_induction=True)
        assert model.cfg.pooling == "rpp"
        assert model.meta.get("induced") is False
        # one joint phase under the phase-one schedule: every parameter
        # trains, including the assigner, from random initialization
        assert all(r["phase"] == "RPP_FINETUNE" for r in records)
        assert len(records) == 3

    def test_refinement_loss_not_catastrophic(self, tiny_manifest):
        cfg = tiny_run_config()
        model, records = train.induced_training(tiny_manifest, cfg)
        fine = [r for r in records if r["phase"] == "RPP_FINETUNE"]
        uniform_final = [r for r in records if r["phase"] == "PCB_UNIFORM"][-1]
        assert fine[-1]["mean_loss"] < uniform_final["mean_loss"] + 1.0


class TestCheckpoint:
    def test_round_trip_preserves_state(self, tmp_path, tiny_manifest):
        cfg = tiny_run_config()
        mc = cfg.model_config(num_classes=tiny_manifest.num_identities)
        model = Model(mc, seed=0)
        state = TrainState.fresh(model, cfg.schedule, seed=3)
        pixels, labels = tiny_manifest.train_arrays()
        train.train_phase(state, pixels, labels, 1, lambda e: 0.05,
                          early_stop=False)
        path = tmp_path / "ck.npz"
        train.checkpoint(state, path)
        back = train.restore(path)
        assert back.epoch == state.epoch
        assert back.phase == state.phase
        assert back.log == state.log
        for k in state.model.params:
            np.testing.assert_array_equal(back.model.params[k],
                                          state.model.params[k])
        for k in state.velocity:
            np.testing.assert_array_equal(back.velocity[k], state.velocity[k])

    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_manifest):
        cfg = tiny_run_config()
        mc = cfg.model_config(num_classes=tiny_manifest.num_identities)
        pixels, labels = tiny_manifest.train_arrays()

        straight = TrainState.fresh(Model(mc, seed=0), cfg.schedule, seed=3)
        train.train_phase(straight, pixels, labels, 3, lambda e: 0.05,
                          early_stop=False)

        first = TrainState.fresh(Model(mc, seed=0), cfg.schedule, seed=3)
        train.train_phase(first, pixels, labels, 1, lambda e: 0.05,
                          early_stop=False)
        train.checkpoint(first, tmp_path / "ck.npz")
        resumed = train.restore(tmp_path / "ck.npz")
        train.train_phase(resumed, pixels, labels, 2, lambda e: 0.05,
                          early_stop=False)

        assert [r["mean_loss"] for r in resumed.log] == \
               [r["mean_loss"] for r in straight.log]
        for k in straight.model.params:
            np.testing.assert_array_equal(resumed.model.params[k],
                                          straight.model.params[k])

    def test_write_log_is_json_lines(self, tmp_path):
        records = [{"phase": "PCB_UNIFORM", "epoch": 1, "lr": 0.05,
                    "mean_loss": 2.5, "empty_part_count": 0}]
        path = tmp_path / "log.jsonl"
        train.write_log(records, path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 1
        assert json.loads(lines[0])["mean_loss"] == 2.5
