import math

import numpy as np
import pytest

from geoflow.errors import ContractError, DimensionError, ParameterError
from geoflow.geofae import GeoFaeModel, encoder_forward, fae_config
from geoflow.geometry import ConditioningInstance, full_instance, PointCloud
from geoflow.latent_flow import (
    FlowModel,
    FlowState,
    PosteriorEnsemble,
    crf_loss,
    crf_loss_arrays,
    dit_forward,
    euler_integrate,
    euler_sample,
    flow_config,
    interpolate_zt,
    posterior_ensemble,
    timestep_embedding,
)
from geoflow.metrics import relative_l2
from geoflow.selfcheck import param_grad_check, randomize_parameters, tiny_instance
from geoflow.tensor import layer_norm, Tensor


@pytest.fixture(scope="module")
def tiny_pair():
    fae = randomize_parameters(GeoFaeModel(fae_config("tiny"), seed=0), 0, std=0.2)
    fae.freeze()
    flow = randomize_parameters(FlowModel(flow_config("tiny", fae)), 1, std=0.2)
    return fae, flow


def latents(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


class TestInterpolation:
    def test_endpoints(self):
        z0, z1 = latents((4, 8), 0), latents((4, 8), 1)
        assert interpolate_zt(z0, z1, 0.0).tobytes() == z0.tobytes()
        assert interpolate_zt(z0, z1, 1.0).tobytes() == z1.tobytes()

    def test_midpoint(self):
        np.testing.assert_array_equal(interpolate_zt(np.zeros(3), 2 * np.ones(3), 0.5), np.ones(3))

    @pytest.mark.parametrize("t", [-0.1, 1.5])
    def test_range(self, t):
        with pytest.raises(ParameterError):
            interpolate_zt(np.zeros(3), np.ones(3), t)
        with pytest.raises(ParameterError):
            FlowState(np.zeros((2, 2)), t)


class TestVelocityNetwork:
    def test_gate_zero_reduction(self):
        flow = FlowModel(flow_config("tiny"), seed=3)
        c = flow.config
        z_t, z_c = latents((c.latents, c.dim), 0), latents((c.latents, c.dim), 1)
        want = flow.head(layer_norm(Tensor(z_t + z_c))).data
        for t in (0.0, 0.3, 1.0):
            np.testing.assert_allclose(dit_forward(flow, z_t, t, z_c), want, atol=1e-13)

    def test_condition_matters(self, tiny_pair):
        _, flow = tiny_pair
        c = flow.config
        z_t = latents((c.latents, c.dim), 0)
        a = dit_forward(flow, z_t, 0.4, latents((c.latents, c.dim), 1))
        b = dit_forward(flow, z_t, 0.4, latents((c.latents, c.dim), 2))
        assert np.abs(a - b).max() > 0

    def test_shape(self, tiny_pair):
        _, flow = tiny_pair
        c = flow.config
        assert dit_forward(flow, latents((3, c.latents, c.dim), 0), np.full(3, 0.2), latents((3, c.latents, c.dim), 1)).shape == (3, c.latents, c.dim)

    def test_dimension_mismatch(self, tiny_pair):
        _, flow = tiny_pair
        c = flow.config
        with pytest.raises(DimensionError):
            dit_forward(flow, latents((c.latents, c.dim + 1), 0), 0.5, latents((c.latents, c.dim + 1), 1))

    def test_timestep_embedding(self):
        e = timestep_embedding(np.array([0.0]), 8)
        np.testing.assert_array_equal(e, [[1, 1, 1, 1, 0, 0, 0, 0]])

    def test_dim_follows_autoencoder(self):
        fae = GeoFaeModel(fae_config("desk", dim=16, latents=6, heads=2), seed=0)
        cfg = flow_config("desk", fae)
        assert (cfg.dim, cfg.latents) == (16, 6)


class TestCrfLoss:
    def setup_method(self):
        self.z1, self.z0 = latents((2, 4, 8), 0), latents((2, 4, 8), 1)
        self.zc = latents((2, 4, 8), 2)
        self.t = np.array([0.2, 0.9])

    def test_oracle_stub(self):
        loss = crf_loss_arrays(lambda z, t, c: self.z1 - self.z0, self.z1, self.zc, self.z0, self.t)
        assert loss.item() == 0.0

    def test_zero_stub(self):
        loss = crf_loss_arrays(lambda z, t, c: np.zeros_like(z), self.z1, self.zc, self.z0, self.t)
        assert loss.item() == pytest.approx(np.mean((self.z1 - self.z0) ** 2), rel=1e-14)

    def test_gradient(self):
        flow = randomize_parameters(FlowModel(flow_config("tiny")), 5)
        err = param_grad_check(lambda: crf_loss_arrays(flow, self.z1, self.zc, self.z0, self.t), flow, per_param=4)
        assert err < 1e-4

    def test_needs_frozen_encoder(self):
        fae = GeoFaeModel(fae_config("tiny"), seed=0)
        flow = FlowModel(flow_config("tiny", fae))
        inst = tiny_instance(8, 0)
        ref = full_instance(PointCloud(inst.coords), np.ones((8, 1)))
        with pytest.raises(ContractError):
            crf_loss(flow, fae, inst, ref, 0)
        fae.freeze()
        a = crf_loss(flow, fae, inst, ref, 7).item()
        b = crf_loss(flow, fae, inst, ref, 7).item()
        assert a == b

    def test_no_encoder_gradient(self, tiny_pair):
        fae, flow = tiny_pair
        inst = tiny_instance(8, 0)
        ref = full_instance(PointCloud(inst.coords), np.ones((8, 1)))
        from geoflow.tensor import backward

        before = {n: p.data.copy() for n, p in fae.named_parameters()}
        backward(crf_loss(flow, fae, inst, ref, 0))
        for n, p in fae.named_parameters():
            assert p.grad is None
            assert p.data.tobytes() == before[n].tobytes()
        flow.zero_grad()


class TestEuler:
    def test_constant_velocity(self):
        z0 = latents((3, 4), 0)
        c = latents((3, 4), 1)
        for steps in (1, 3, 17):
            np.testing.assert_allclose(euler_integrate(lambda z, t, zc: c, z0, None, steps), z0 + c, atol=1e-14)

    def test_linear_ode(self):
        z0 = latents((3, 4), 0)
        z = euler_integrate(lambda z, t, zc: z, z0, None, 1000)
        np.testing.assert_allclose(z, math.e * z0, rtol=2e-3)

    def test_straight_teacher_one_step(self):
        z0, z1 = latents((3, 4), 0), latents((3, 4), 1)
        np.testing.assert_allclose(euler_integrate(lambda z, t, zc: z1 - z0, z0, None, 1), z1, atol=1e-15)

    def test_deterministic(self, tiny_pair):
        _, flow = tiny_pair
        zc = latents((flow.config.latents, flow.config.dim), 0)
        assert euler_sample(flow, zc, 5, seed=3).tobytes() == euler_sample(flow, zc, 5, seed=3).tobytes()
        assert euler_sample(flow, zc, 5, seed=3).tobytes() != euler_sample(flow, zc, 5, seed=4).tobytes()

    def test_bad_steps(self, tiny_pair):
        _, flow = tiny_pair
        with pytest.raises(ParameterError):
            euler_sample(flow, np.zeros((flow.config.latents, flow.config.dim)), 0, 0)


class TestEnsemble:
    def setup_method(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(-1, 1, (12, 2))
        self.inst = ConditioningInstance(coords, np.ones(12), rng.normal(size=(12, 1)))

    def test_identical_seeds_zero_std(self, tiny_pair):
        fae, flow = tiny_pair
        ens = posterior_ensemble(flow, fae, self.inst, 2, steps=3, member_seeds=[5, 5])
        np.testing.assert_array_equal(ens.std, 0.0)

    def test_shapes(self, tiny_pair):
        fae, flow = tiny_pair
        q = np.zeros((7, 2))
        ens = posterior_ensemble(flow, fae, self.inst, 4, queries=q, steps=2, seed=1)
        assert ens.mean.shape == (7, 1) and ens.std.shape == (7, 1)
        assert len(ens) == 4

    def test_std_unbiased(self):
        members = np.random.default_rng(0).normal(size=(5, 3, 1))
        ens = PosteriorEnsemble(members, np.zeros((3, 2)))
        np.testing.assert_allclose(ens.std, members.std(axis=0, ddof=1))

    def test_mean_beats_worst_member(self, tiny_pair):
        fae, flow = tiny_pair
        ens = posterior_ensemble(flow, fae, self.inst, 6, steps=4, seed=2)
        truth = self.inst.obs
        worst = max(relative_l2(m, truth) for m in ens.members)
        assert relative_l2(ens.mean, truth) <= worst

    def test_bad_count(self, tiny_pair):
        fae, flow = tiny_pair
        with pytest.raises(ParameterError):
            posterior_ensemble(flow, fae, self.inst, 0)


class TestStandardization:
    def test_round_trip(self, tiny_pair):
        _, flow = tiny_pair
        c = flow.config
        rng = np.random.default_rng(0)
        flow.set_latent_stats(rng.normal(size=(c.latents, c.dim)), rng.uniform(0.1, 2.0, (c.latents, c.dim)))
        z = latents((3, c.latents, c.dim), 4)
        np.testing.assert_allclose(flow.unstandardize(flow.standardize(z)), z, atol=1e-13)
        flow.set_latent_stats(np.zeros((c.latents, c.dim)), np.ones((c.latents, c.dim)))

    def test_bad_stats(self, tiny_pair):
        _, flow = tiny_pair
        c = flow.config
        with pytest.raises(DimensionError):
            flow.set_latent_stats(np.zeros(3), np.ones(3))
        with pytest.raises(ParameterError):
            flow.set_latent_stats(np.zeros((c.latents, c.dim)), np.zeros((c.latents, c.dim)))

    def test_fit_matches_codes(self, tiny_pair):
        from geoflow.data import make_grf_dataset
        from geoflow.geofae import encode_batch
        from geoflow.training import fit_latent_stats

        fae, _ = tiny_pair
        flow = FlowModel(flow_config("tiny", fae))
        samples = make_grf_dataset("annulus", 24, 10, seed=1).samples
        fit_latent_stats(flow, fae, samples)
        codes = encode_batch(fae, [full_instance(s.cloud, s.values) for s in samples])
        np.testing.assert_allclose(flow.latent_mean, codes.mean(0), atol=1e-12)
        assert np.all(flow.latent_std >= 1e-4)

    def test_sampler_returns_raw_codes(self):
        # zero velocity leaves the standardized noise untouched, so the output is mean + std * z0
        flow = FlowModel(flow_config("tiny"), seed=0)
        flow.head.weight.data[:] = 0
        flow.head.bias.data[:] = 0
        c = flow.config
        mean, std = np.full((c.latents, c.dim), 5.0), np.full((c.latents, c.dim), 0.1)
        flow.set_latent_stats(mean, std)
        z = euler_sample(flow, np.zeros((c.latents, c.dim)), 3, seed=2)
        from geoflow.geometry import as_stream

        z0 = as_stream(2, "euler").normal((c.latents, c.dim))
        np.testing.assert_allclose(z, mean + std * z0, atol=1e-13)

    def test_condition_scale(self, tiny_pair):
        _, flow = tiny_pair
        c = flow.config
        z = latents((2, c.latents, c.dim), 6)
        np.testing.assert_allclose(flow.condition(z), c.cond_scale * flow.standardize(z), atol=1e-12)
        with pytest.raises(ParameterError):
            flow_config("tiny", cond_scale=0.0)
