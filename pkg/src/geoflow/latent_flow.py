"""Conditional rectified flow over autoencoder latents.

Convention: noise at t = 0, data at t = 1.  The interpolant is
``z_t = (1 - t) z0 + t z1``, the regression target is ``z1 - z0`` and
sampling integrates forward from Gaussian noise with explicit Euler steps.
The observation latent ``z_c`` is added to the noisy tokens before the
transformer; time enters through adaptive LayerNorm with zero-initialized
modulation.

The flow works on latents standardized entry-wise with training-set
statistics (buffers ``latent_mean``/``latent_std``).  Autoencoder codes share
a large common component, so raw per-sample variation is tiny next to the unit
noise scale.  The standardized condition is further multiplied by
``cond_scale`` before the sum, so the network can tell condition and noisy
state apart; at unit scale the two are near-indistinguishable.  :func:`crf_loss` and the samplers take and return raw codes;
:func:`crf_loss_arrays` and :func:`euler_integrate` work in whatever space
they are given.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .geofae import GeoFaeModel, decoder_forward, encode_batch
from .geometry import ConditioningInstance, as_stream
from .layers import MLP, Linear, Module, MultiHeadAttention, Parameter
from .rng import Stream
from .tensor import Tensor, layer_norm, no_grad, silu


@dataclass(frozen=True)
class FlowConfig:
    dim: int = 32
    latents: int = 16
    blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    time_embed_dim: int = 64
    default_steps: int = 10
    cond_scale: float = 100.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ParameterError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.time_embed_dim % 2:
            raise ParameterError("time_embed_dim must be even")
        if self.blocks < 1 or self.default_steps < 1:
            raise ParameterError("blocks and default_steps must be >= 1")
        if not self.cond_scale > 0:
            raise ParameterError("cond_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


FLOW_PRESETS = {
    "desk": FlowConfig(),
    "full": FlowConfig(dim=256, latents=256, blocks=8, heads=8, mlp_ratio=2, time_embed_dim=256),
    "tiny": FlowConfig(dim=8, latents=4, blocks=1, heads=2, mlp_ratio=2, time_embed_dim=8),
}


def flow_config(preset: str = "desk", fae: GeoFaeModel | None = None, **overrides) -> FlowConfig:
    if preset not in FLOW_PRESETS:
        raise ParameterError(f"unknown preset {preset!r}; choose from {sorted(FLOW_PRESETS)}")
    if fae is not None:
        overrides.setdefault("dim", fae.config.dim)
        overrides.setdefault("latents", fae.config.latents)
    return replace(FLOW_PRESETS[preset], **overrides)


@dataclass
class FlowState:
    z: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ParameterError(f"flow time must lie in [0, 1], got {self.t}")


@dataclass
class PosteriorEnsemble:
    members: np.ndarray  # (n, q, p)
    queries: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        if len(self.members) < 2:
            return np.zeros(self.members.shape[1:])
        return self.members.std(axis=0, ddof=1)

    def __len__(self) -> int:
        return len(self.members)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of 1000 * t, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


class DiTBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, stream: Stream):
        self.dim = dim
        self.ada = Linear(dim, 6 * dim, stream.child("ada"), zero=True)
        self.attn = MultiHeadAttention(dim, heads, stream.child("attn"), zero_out=False)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, stream.child("mlp"))

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        d = self.dim
        mod = self.ada(cond)
        mod = mod.reshape(mod.shape[0], 1, 6 * d)
        shift1, scale1, gate1 = mod[:, :, 0:d], mod[:, :, d : 2 * d], mod[:, :, 2 * d : 3 * d]
        shift2, scale2, gate2 = mod[:, :, 3 * d : 4 * d], mod[:, :, 4 * d : 5 * d], mod[:, :, 5 * d :]
        h = modulate(layer_norm(x), shift1, scale1)
        x = x + gate1 * self.attn(h, h)
        h = modulate(layer_norm(x), shift2, scale2)
        return x + gate2 * self.mlp(h)


class FlowModel(Module):
    """DiT-style velocity network g(z_t, t, z_c)."""

    def __init__(self, config: FlowConfig, seed: int = 0):
        self.config = config
        c = config
        s = Stream(seed, "flow")
        self.time_mlp = MLP(c.time_embed_dim, c.dim, c.dim, s.child("time"))
        # token identity; zero start keeps the initial output a function of z_t + z_c only
        self.pos = Parameter(np.zeros((c.latents, c.dim)), decay=False)
        self.blocks = [DiTBlock(c.dim, c.heads, c.mlp_ratio, s.child("block", i)) for i in range(c.blocks)]
        self.final_ada = Linear(c.dim, 2 * c.dim, s.child("final_ada"), zero=True)
        self.head = Linear(c.dim, c.dim, s.child("head"))
        self.latent_mean = np.zeros((c.latents, c.dim))
        self.latent_std = np.ones((c.latents, c.dim))

    def buffers(self) -> dict[str, np.ndarray]:
        return {"latent_mean": self.latent_mean, "latent_std": self.latent_std}

    def set_latent_stats(self, mean, std) -> None:
        shape = (self.config.latents, self.config.dim)
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != shape or std.shape != shape:
            raise DimensionError(f"latent statistics must have shape {shape}")
        if np.any(std <= 0):
            raise ParameterError("latent std must be positive")
        self.latent_mean, self.latent_std = mean.copy(), std.copy()

    def standardize(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) - self.latent_mean) / self.latent_std

    def condition(self, z_c) -> np.ndarray:
        """Standardized observation code, scaled so it stands out against the unit noise."""
        return self.config.cond_scale * self.standardize(z_c)

    def unstandardize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.latent_std + self.latent_mean

    def velocity(self, z_t, t, z_c) -> Tensor:
        c = self.config
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        z_c = np.asarray(z_c.data if isinstance(z_c, Tensor) else z_c, dtype=np.float64)
        if z_t.ndim == 2:
            z_t = z_t.reshape(1, *z_t.shape)
        if z_c.ndim == 2:
            z_c = z_c[None]
        b = z_t.shape[0]
        if z_t.shape[1:] != (c.latents, c.dim) or z_c.shape[1:] != (c.latents, c.dim):
            raise DimensionError(
                f"latents must be {(c.latents, c.dim)}, got z_t {z_t.shape} and z_c {z_c.shape}"
            )
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        cond = silu(self.time_mlp(Tensor(timestep_embedding(t, c.time_embed_dim))))
        x = z_t + Tensor(z_c) + self.pos
        for block in self.blocks:
            x = block(x, cond)
        mod = self.final_ada(cond).reshape(b, 1, 2 * c.dim)
        x = modulate(layer_norm(x), mod[:, :, : c.dim], mod[:, :, c.dim :])
        return self.head(x)

    def __call__(self, z_t, t, z_c) -> Tensor:
        return self.velocity(z_t, t, z_c)


def interpolate_zt(z0, z1, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t must lie in [0, 1], got {t}")
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return z1.copy()
    return (1.0 - t) * z0 + t * z1


def dit_forward(model: FlowModel, z_t, t, z_c) -> np.ndarray:
    """Velocity (same shape as ``z_t``) without recording."""
    z_t = np.asarray(z_t, dtype=np.float64)
    with no_grad():
        v = model.velocity(z_t, t, z_c).data
    return v[0] if z_t.ndim == 2 else v


VelocityFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _as_velocity(flow) -> VelocityFn:
    if isinstance(flow, FlowModel):
        def fn(z, t, zc):
            with no_grad():
                return flow.velocity(z, t, zc).data.reshape(z.shape)
        return fn
    if callable(flow):
        def stub(z, t, zc):
            v = flow(z, t, zc)
            return np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        return stub
    raise ParameterError("flow must be a FlowModel or a callable (z, t, z_c) -> velocity")


def crf_loss_arrays(flow, z1, z_c, z0, t) -> Tensor:
    """mean over entries of ((z1 - z0) - g(z_t, t, z_c))^2 for batched latents."""
    z1 = np.asarray(z1, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    tb = t.reshape((-1,) + (1,) * (z1.ndim - 1)) if z1.ndim == 3 else t.reshape(())
    z_t = (1.0 - tb) * z0 + tb * z1
    target = Tensor(z1 - z0)
    if isinstance(flow, FlowModel):
        v = flow.velocity(z_t, t, z_c)
        if z1.ndim == 2:
            v = v.reshape(*z1.shape)
    else:
        out = flow(z_t, t, z_c)
        v = out if isinstance(out, Tensor) else Tensor(out)
    diff = target - v
    return (diff * diff).mean()


def crf_loss(flow, encoder: GeoFaeModel, inst: ConditioningInstance, ref: ConditioningInstance, seed) -> Tensor:
    """Conditional flow-matching loss for one instance; the encoder must be frozen."""
    if not getattr(encoder, "frozen", False):
        raise ContractError("the autoencoder must be frozen before flow training (call .freeze())")
    z1 = encode_batch(encoder, [ref])[0]
    z_c = encode_batch(encoder, [inst])[0]
    if isinstance(flow, FlowModel):
        z1, z_c = flow.standardize(z1), flow.condition(z_c)
    stream = as_stream(seed, "crf")
    z0 = stream.normal(z1.shape)
    t = float(stream.uniform())
    return crf_loss_arrays(flow, z1, z_c, z0, t)


def euler_integrate(flow, z0: np.ndarray, z_c: np.ndarray, steps: int) -> np.ndarray:
    """z <- z + (1/steps) g(z, k/steps, z_c) for k = 0 .. steps - 1."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    velocity = _as_velocity(flow)
    z = np.array(z0, dtype=np.float64)
    dt = 1.0 / steps
    lead = z.shape[0] if z.ndim == 3 else 1
    for k in range(steps):
        t = np.full(lead, k * dt)
        z = z + dt * velocity(z, t, z_c)
    return z


def euler_sample(flow, z_c, steps: int, seed) -> np.ndarray:
    z_c = np.asarray(z_c.tokens if hasattr(z_c, "tokens") else z_c, dtype=np.float64)
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    z0 = as_stream(seed, "euler").normal(z_c.shape)
    if isinstance(flow, FlowModel):
        return flow.unstandardize(euler_integrate(flow, z0, flow.condition(z_c), steps))
    return euler_integrate(flow, z0, z_c, steps)


def member_noise(seed, k: int, shape) -> np.ndarray:
    return as_stream(seed, "member", k).normal(shape)


def sample_latents(flow, z_c: np.ndarray, n_samples: int, steps: int, seeds: Sequence) -> np.ndarray:
    """(B, n, P, D) latents for a batch of conditions (B, P, D); member k of item b uses seeds[b]."""
    z_c = np.asarray(z_c, dtype=np.float64)
    b, p, d = z_c.shape
    z0 = np.stack([member_noise(seeds[i], k, (p, d)) for i in range(b) for k in range(n_samples)])
    cond = np.repeat(z_c, n_samples, axis=0)
    if isinstance(flow, FlowModel):
        z1 = flow.unstandardize(euler_integrate(flow, z0, flow.condition(cond), steps))
    else:
        z1 = euler_integrate(flow, z0, cond, steps)
    return z1.reshape(b, n_samples, p, d)


def posterior_ensemble(
    flow,
    fae: GeoFaeModel,
    inst: ConditioningInstance,
    n_samples: int,
    queries: np.ndarray | None = None,
    steps: int = 10,
    seed=0,
    member_seeds: Sequence | None = None,
) -> PosteriorEnsemble:
    """Decode ``n_samples`` independent flow draws at ``queries``."""
    if n_samples < 1:
        raise ParameterError(f"n_samples must be >= 1, got {n_samples}")
    queries = inst.coords if queries is None else np.asarray(queries, dtype=np.float64)
    z_c = encode_batch(fae, [inst])[0]
    if member_seeds is None:
        z = sample_latents(flow, z_c[None], n_samples, steps, [seed])[0]
    else:
        if len(member_seeds) != n_samples:
            raise ParameterError("member_seeds must have one entry per sample")
        z0 = np.stack([as_stream(s, "euler").normal(z_c.shape) for s in member_seeds])
        cond = np.repeat(z_c[None], n_samples, axis=0)
        if isinstance(flow, FlowModel):
            z = flow.unstandardize(euler_integrate(flow, z0, flow.condition(cond), steps))
        else:
            z = euler_integrate(flow, z0, cond, steps)
    q = np.broadcast_to(queries, (n_samples, *queries.shape))
    members = decoder_forward(fae, z, q)
    return PosteriorEnsemble(members=members, queries=queries)


def posterior_ensembles(
    flow,
    fae: GeoFaeModel,
    instances: Sequence[ConditioningInstance],
    n_samples: int,
    steps: int,
    seeds: Sequence,
) -> list[PosteriorEnsemble]:
    """Vectorized :func:`posterior_ensemble` over equally sized instances, queried at their nodes."""
    z_c = encode_batch(fae, instances)
    z = sample_latents(flow, z_c, n_samples, steps, seeds)
    out = []
    for i, inst in enumerate(instances):
        q = np.broadcast_to(inst.coords, (n_samples, *inst.coords.shape))
        out.append(PosteriorEnsemble(decoder_forward(fae, z[i], q), inst.coords))
    return out
