import csv

import numpy as np
import pytest

from geoflow.data import make_grf_dataset
from geoflow.errors import ConfigError, ContractError, DimensionError, FormatError, ParameterError
from geoflow.geofae import GeoFaeModel, fae_config
from geoflow.latent_flow import FlowModel, flow_config
from geoflow.layers import Parameter
from geoflow.selfcheck import randomize_parameters
from geoflow.training import (
    OptimizerState,
    adamw_step,
    adamw_update,
    assemble_flow_batch,
    checkpoint_load,
    checkpoint_save,
    clip_grad_norm,
    lr_at,
    param_hash,
    read_arrays,
    train_config,
    train_stage1,
    train_stage2,
    write_arrays,
    write_loss_csv,
)


@pytest.fixture(scope="module")
def small_data():
    return make_grf_dataset("annulus", 48, 12, seed=3).samples


def small_fae(seed=0):
    return GeoFaeModel(fae_config("tiny"), seed=seed)


def tiny_cfg(**kw):
    base = dict(iterations=6, batch_size=4, queries=16, warmup_steps=2, decay_every=2, log_every=1)
    base.update(kw)
    return train_config("desk", **base)


class TestSchedule:
    def setup_method(self):
        self.cfg = train_config("full")

    @pytest.mark.parametrize("step,want", [(0, 0.0), (2500, 5e-4), (5000, 1e-3), (9999, 1e-3), (10000, 9e-4), (15000, 8.1e-4)])
    def test_full_preset_values(self, step, want):
        assert lr_at(step, self.cfg) == pytest.approx(want, rel=1e-12, abs=1e-18)

    def test_piecewise_monotone(self):
        w = self.cfg.warmup_steps
        up = [lr_at(s, self.cfg) for s in range(0, w + 1, 50)]
        down = [lr_at(s, self.cfg) for s in range(w, 100_000, 333)]
        assert all(a <= b for a, b in zip(up, up[1:]))
        assert all(a >= b for a, b in zip(down, down[1:]))

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            train_config("desk", warmup_steps=0)
        with pytest.raises(ParameterError):
            train_config("desk", decay_factor=1.5)
        with pytest.raises(ParameterError):
            train_config("nope")

    def test_stage_presets(self):
        assert train_config("desk", 2).base_lr == 1e-3
        assert train_config("desk", 2).iterations == train_config("desk").iterations
        assert train_config("full", 2) == train_config("full")
        with pytest.raises(ParameterError):
            train_config("desk", 3)


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p, m, v = adamw_update(np.array([1.5, -2.0]), np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1, 0.0)
        np.testing.assert_array_equal(p, [1.5, -2.0])

    def test_unit_step(self):
        p, m, v = adamw_update(np.array(1.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 0.1, 0.0)
        # m_hat = v_hat = 1 after bias correction
        assert float(p) == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
        assert float(m) == pytest.approx(0.1, abs=1e-15)
        assert float(v) == pytest.approx(0.001, abs=1e-15)

    def test_second_step(self):
        p, m, v = adamw_update(np.array(1.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 0.1, 0.0)
        p, m, v = adamw_update(p, np.array(1.0), m, v, 2, 0.1, 0.0)
        assert float(p) == pytest.approx(1.0 - 2 * 0.1 / (1.0 + 1e-8), abs=1e-12)

    def test_decay_only(self):
        p, _, _ = adamw_update(np.array(2.0), np.array(0.0), np.array(0.0), np.array(0.0), 1, 1e-3, 1e-5)
        assert float(p) == pytest.approx(2.0 * (1 - 1e-8), abs=1e-12)

    def test_no_decay_flag(self):
        p, _, _ = adamw_update(np.array(2.0), np.array(0.0), np.array(0.0), np.array(0.0), 1, 1e-3, 1e-5, decay=False)
        assert float(p) == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adamw_update(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 0.1, 0.0)

    def test_step_over_named_params(self):
        w = Parameter(np.array([1.0, 1.0]))
        b = Parameter(np.array([1.0]), decay=False)
        w.grad, b.grad = np.array([1.0, 0.0]), np.array([0.0])
        state = OptimizerState()
        adamw_step([("w", w), ("b", b)], state, lr=0.1, wd=0.5)
        assert state.step == 1
        assert w.data[0] == pytest.approx(0.95 - 0.1 / (1 + 1e-8), abs=1e-12)
        assert w.data[1] == pytest.approx(0.95, abs=1e-12)
        assert b.data[0] == 1.0

    def test_clip(self):
        a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        total = np.sqrt(np.sum(a.grad**2) + np.sum(b.grad**2))
        assert total == pytest.approx(1.0, abs=1e-10)


class TestStage1:
    def test_deterministic(self, small_data):
        a, _, _ = train_stage1(small_fae(), small_data, tiny_cfg(iterations=2))
        b, _, _ = train_stage1(small_fae(), small_data, tiny_cfg(iterations=2))
        assert param_hash(a) == param_hash(b)

    def test_history_length(self, small_data):
        _, hist, state = train_stage1(small_fae(), small_data, tiny_cfg(iterations=20, log_every=5))
        assert len(hist) == 20 // 5
        assert [r.step for r in hist] == [0, 5, 10, 15]
        assert state.step == 20

    def test_resume_matches_uninterrupted(self, small_data, tmp_path):
        cfg = tiny_cfg(iterations=6)
        whole, _, _ = train_stage1(small_fae(), small_data, cfg)
        part, _, state = train_stage1(small_fae(), small_data, cfg, stop_at=3)
        checkpoint_save(tmp_path / "mid.gfck", part, state)
        resumed, state2, _ = checkpoint_load(tmp_path / "mid.gfck")
        assert state2.step == 3
        resumed, _, _ = train_stage1(resumed, small_data, cfg, state=state2)
        assert param_hash(resumed) == param_hash(whole)

    def test_frozen_rejected(self, small_data):
        fae = small_fae()
        fae.freeze()
        with pytest.raises(ContractError):
            train_stage1(fae, small_data, tiny_cfg())

    def test_loss_csv(self, small_data, tmp_path):
        _, hist, _ = train_stage1(small_fae(), small_data, tiny_cfg(iterations=3))
        write_loss_csv(hist, tmp_path / "loss.csv")
        rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
        assert list(rows[0]) == ["step", "lr", "loss"]
        assert [float(r["loss"]) for r in rows] == [r.loss for r in hist]


@pytest.mark.slow
def test_overfit_four_samples():
    samples = make_grf_dataset("annulus", 64, 4, seed=1).samples
    cfg = train_config("desk", iterations=2000, batch_size=4, fraction_set=(1.0,), noise_level=0.0,
                       queries=64, warmup_steps=50, decay_every=500)
    fae, _, _ = train_stage1(GeoFaeModel(fae_config("desk"), seed=0), samples, cfg)
    from geoflow.studies import evaluate

    rows = evaluate(fae, None, samples, 1.0, 0.0)
    assert np.mean([r["fae_relative_l2"] for r in rows]) < 0.05


class TestStage2:
    def setup_method(self):
        self.fae = randomize_parameters(small_fae(), 2, std=0.3)
        self.fae.set_value_stats([0.0], [1.0])
        self.fae.freeze()

    def test_requires_frozen(self, small_data):
        fae = small_fae()
        flow = FlowModel(flow_config("tiny", fae))
        with pytest.raises(ContractError):
            train_stage2(flow, fae, small_data, tiny_cfg())

    def test_encoder_untouched(self, small_data):
        before = param_hash(self.fae)
        flow = FlowModel(flow_config("tiny", self.fae))
        train_stage2(flow, self.fae, small_data, tiny_cfg(iterations=4))
        assert param_hash(self.fae) == before

    def test_straight_teacher_zero_loss(self, small_data):
        cfg = tiny_cfg(iterations=5)

        flow = FlowModel(flow_config("tiny", self.fae))

        class Teacher:
            step = 0

            def __call__(inner, z_t, t, z_c):
                z1, _, z0, _ = assemble_flow_batch(small_data, cfg, inner.step, self.fae, {})
                inner.step += 1
                return flow.standardize(z1) - z0

        _, hist, _ = train_stage2(flow, self.fae, small_data, cfg, velocity=Teacher())
        assert len(hist) == 5
        assert max(r.loss for r in hist) < 1e-20

    def test_loss_decreases(self):
        samples = make_grf_dataset("annulus", 32, 64, seed=5).samples
        # full noiseless conditioning, so z_c carries the target and the loss can fall well below 1;
        # unit cond_scale, since a dominant condition hides the noisy state and floors the loss near 1
        flow = FlowModel(flow_config("tiny", self.fae, cond_scale=1.0), seed=0)
        cfg = train_config("desk", iterations=300, batch_size=16, queries=16, warmup_steps=20,
                           decay_every=100, log_every=1, base_lr=3e-3, fraction_set=(1.0,), noise_level=0.0)
        _, hist, _ = train_stage2(flow, self.fae, samples, cfg)
        start = np.mean([r.loss for r in hist[:10]])
        end = np.mean([r.loss for r in hist[-10:]])
        assert end < 0.5 * start

    def test_resume_matches_uninterrupted(self, small_data, tmp_path):
        cfg = tiny_cfg(iterations=4)
        whole, _, _ = train_stage2(FlowModel(flow_config("tiny", self.fae)), self.fae, small_data, cfg)
        part, _, state = train_stage2(FlowModel(flow_config("tiny", self.fae)), self.fae, small_data, cfg, stop_at=2)
        checkpoint_save(tmp_path / "f.gfck", part, state)
        resumed, state2, _ = checkpoint_load(tmp_path / "f.gfck")
        resumed, _, _ = train_stage2(resumed, self.fae, small_data, cfg, state=state2)
        assert param_hash(resumed) == param_hash(whole)


class TestCheckpoint:
    def trained(self, small_data):
        fae, _, state = train_stage1(small_fae(), small_data, tiny_cfg(iterations=2))
        return fae, state

    def test_save_load_save(self, small_data, tmp_path):
        fae, state = self.trained(small_data)
        checkpoint_save(tmp_path / "a.gfck", fae, state, {"seed": 3})
        model, st, meta = checkpoint_load(tmp_path / "a.gfck")
        checkpoint_save(tmp_path / "b.gfck", model, st, {"seed": float(meta["seed"])})
        assert (tmp_path / "a.gfck").read_bytes() == (tmp_path / "b.gfck").read_bytes()
        assert param_hash(model) == param_hash(fae)
        for k in state.m:
            assert st.m[k].tobytes() == state.m[k].tobytes()
            assert st.v[k].tobytes() == state.v[k].tobytes()

    def test_flow_round_trip(self, tmp_path):
        flow = randomize_parameters(FlowModel(flow_config("tiny")), 0)
        rng = np.random.default_rng(0)
        flow.set_latent_stats(rng.normal(size=(4, 8)), rng.uniform(0.1, 1, size=(4, 8)))
        checkpoint_save(tmp_path / "f.gfck", flow)
        back, state, _ = checkpoint_load(tmp_path / "f.gfck")
        assert isinstance(back, FlowModel) and state is None
        assert param_hash(back) == param_hash(flow)

    def test_layout(self, tmp_path):
        from collections import OrderedDict

        write_arrays(tmp_path / "x.gfck", OrderedDict([("ab", np.arange(6.0).reshape(2, 3)), ("s", np.array(1.5))]))
        raw = (tmp_path / "x.gfck").read_bytes()
        # header 12, entry one 4+2+4+8+48, entry two 4+1+4+0+8
        assert len(raw) == 12 + (4 + 2 + 4 + 8 + 48) + (4 + 1 + 4 + 8)
        assert raw[:4] == b"GFCK"
        back = read_arrays(tmp_path / "x.gfck")
        assert back["ab"].tobytes() == np.arange(6.0).reshape(2, 3).tobytes()
        assert back["s"].shape == ()

    @pytest.mark.parametrize("cut", [2, 11, 14, 40, -3])
    def test_truncated(self, small_data, tmp_path, cut):
        fae, state = self.trained(small_data)
        p = tmp_path / "a.gfck"
        checkpoint_save(p, fae, state)
        raw = p.read_bytes()
        p.write_bytes(raw[:cut] if cut > 0 else raw[:cut])
        with pytest.raises(FormatError) as exc:
            checkpoint_load(p)
        assert 0 <= exc.value.offset <= len(raw)

    def test_bad_magic(self, small_data, tmp_path):
        fae, state = self.trained(small_data)
        p = tmp_path / "a.gfck"
        checkpoint_save(p, fae, state)
        p.write_bytes(b"NOPE" + p.read_bytes()[4:])
        with pytest.raises(FormatError):
            checkpoint_load(p)

    def test_config_mismatch(self, small_data, tmp_path):
        fae, state = self.trained(small_data)
        checkpoint_save(tmp_path / "a.gfck", fae, state)
        with pytest.raises(ConfigError):
            checkpoint_load(tmp_path / "a.gfck", GeoFaeModel(fae_config("desk")))
        with pytest.raises(ConfigError):
            checkpoint_load(tmp_path / "a.gfck", FlowModel(flow_config("tiny")))
