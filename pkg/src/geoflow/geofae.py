"""Geometric function autoencoder.

The encoder lifts a conditioning instance (coordinates, mask, masked
observations) to a fixed set of latent tokens through a Perceiver
cross-attention block followed by pre-norm self-attention.  The decoder
cross-attends Fourier-embedded query coordinates to those tokens, so a field
can be evaluated anywhere in the domain.

Field values are normalized inside the model with per-channel statistics held
as buffers (``value_mean``/``value_std``); :meth:`GeoFaeModel.decode` returns
normalized predictions, :func:`decoder_forward` returns physical units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import DimensionError, DomainError, ParameterError
from .geometry import ConditioningInstance
from .layers import (
    MLP,
    CrossAttentionBlock,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    SelfAttentionBlock,
    fourier_features,
)
from .rng import Stream
from .tensor import Tensor, concat, layer_norm, no_grad


@dataclass(frozen=True)
class GeoFaeConfig:
    dim: int = 32
    latents: int = 16
    enc_blocks: int = 2
    dec_blocks: int = 1
    heads: int = 4
    mlp_ratio: int = 2
    fourier_bands: int = 16
    fourier_std: float = 1.0
    channels: int = 1
    coord_dim: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ParameterError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.dim % 2:
            raise ParameterError("dim must be even (mask and value embeddings take dim/2 each)")
        if self.latents < 1 or self.enc_blocks < 1 or self.dec_blocks < 1:
            raise ParameterError("latents, enc_blocks and dec_blocks must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


FAE_PRESETS = {
    "desk": GeoFaeConfig(),
    "full": GeoFaeConfig(
        dim=256, latents=256, enc_blocks=8, dec_blocks=4, heads=8, mlp_ratio=2,
        fourier_bands=64, fourier_std=10.0,
    ),
    "tiny": GeoFaeConfig(
        dim=8, latents=4, enc_blocks=1, dec_blocks=1, heads=2, mlp_ratio=2,
        fourier_bands=4, fourier_std=1.0,
    ),
}


def fae_config(preset: str = "desk", **overrides) -> GeoFaeConfig:
    if preset not in FAE_PRESETS:
        raise ParameterError(f"unknown preset {preset!r}; choose from {sorted(FAE_PRESETS)}")
    return replace(FAE_PRESETS[preset], **overrides)


@dataclass
class LatentCode:
    tokens: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tokens.shape


def fourier_embed(coords: np.ndarray, bands: np.ndarray) -> np.ndarray:
    """Random Fourier features gamma(x) = [sin(2 pi B x), cos(2 pi B x)]."""
    return fourier_features(coords, bands)


class GeoFaeModel(Module):
    def __init__(self, config: GeoFaeConfig, seed: int = 0):
        self.config = config
        c = config
        s = Stream(seed, "geofae")
        half = c.dim // 2
        # frozen buffer, not a Parameter
        self.fourier_B = s.child("fourier").normal((c.fourier_bands, c.coord_dim)) * c.fourier_std
        self.value_mean = np.zeros(c.channels)
        self.value_std = np.ones(c.channels)
        self.frozen = False

        self.coord_proj = Linear(2 * c.fourier_bands, c.dim, s.child("coord_proj"))
        self.mask_mlp = MLP(1, c.dim, half, s.child("mask_mlp"))
        self.obs_mlp = MLP(c.channels, c.dim, half, s.child("obs_mlp"))
        self.fuse = Linear(2 * c.dim, c.dim, s.child("fuse"))
        self.latents = Parameter(s.child("latents").truncated_normal((c.latents, c.dim), 0.02), decay=False)
        self.perceiver = CrossAttentionBlock(c.dim, c.heads, c.mlp_ratio, s.child("perceiver"))
        self.enc_ln0 = LayerNorm(c.dim)
        self.enc_blocks = [
            SelfAttentionBlock(c.dim, c.heads, c.mlp_ratio, s.child("enc", i)) for i in range(c.enc_blocks)
        ]
        self.query_proj = Linear(2 * c.fourier_bands, c.dim, s.child("query_proj"))
        self.dec_blocks = [
            CrossAttentionBlock(c.dim, c.heads, c.mlp_ratio, s.child("dec", i)) for i in range(c.dec_blocks)
        ]
        self.head_ln = LayerNorm(c.dim)
        self.head = Linear(c.dim, c.channels, s.child("head"))

    def buffers(self) -> dict[str, np.ndarray]:
        return {"fourier_B": self.fourier_B, "value_mean": self.value_mean, "value_std": self.value_std}

    def set_value_stats(self, mean, std) -> None:
        self.value_mean = np.asarray(mean, dtype=np.float64).reshape(self.config.channels)
        self.value_std = np.asarray(std, dtype=np.float64).reshape(self.config.channels)

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        self.frozen = False
        for p in self.parameters():
            p.requires_grad = True

    # -- encoder ---------------------------------------------------------------
    def embed_inputs(self, coords: np.ndarray, mask: np.ndarray, obs: np.ndarray) -> Tensor:
        """Per-node embedding z (B, m, D) from coords (B, m, d), mask (B, m), obs (B, m, p)."""
        c = self.config
        if coords.shape[-1] != c.coord_dim:
            raise DimensionError(f"coords have dimension {coords.shape[-1]}, model expects {c.coord_dim}")
        if obs.shape[-1] != c.channels:
            raise DimensionError(f"observations have {obs.shape[-1]} channels, model expects {c.channels}")
        if coords.shape[1] == 0:
            raise DomainError("cannot encode an empty point cloud")
        m3 = mask[..., None]
        scaled = (obs - self.value_mean) / self.value_std * m3
        coord_emb = self.coord_proj(Tensor(fourier_embed(coords, self.fourier_B)))
        mask_emb = self.mask_mlp(Tensor(m3))
        obs_emb = self.obs_mlp(Tensor(scaled))
        return self.fuse(concat([coord_emb, mask_emb, obs_emb], axis=-1))

    def perceive(self, z: Tensor) -> Tensor:
        b = z.shape[0]
        queries = self.latents.reshape(1, *self.latents.shape).broadcast_to((b, *self.latents.shape))
        return self.perceiver(queries, z)

    def encode(self, coords, mask, obs) -> Tensor:
        """Latent tokens z_L of shape (B, P, D)."""
        coords = np.asarray(coords, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        obs = np.asarray(obs, dtype=np.float64)
        if coords.ndim == 2:
            coords, mask, obs = coords[None], mask[None], obs[None]
        z = self.perceive(self.embed_inputs(coords, mask, obs))
        z = self.enc_ln0(z)
        for block in self.enc_blocks:
            z = block(z)
        return z

    # -- decoder ---------------------------------------------------------------
    def decode(self, code: Tensor, queries) -> Tensor:
        """Normalized field predictions (B, q, p) at query coords (B, q, d)."""
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim == 2:
            queries = queries[None]
        if not isinstance(code, Tensor):
            code = Tensor(code)
        if code.ndim == 2:
            code = code.reshape(1, *code.shape)
        x = self.query_proj(Tensor(fourier_embed(queries, self.fourier_B)))
        if code.shape[0] != x.shape[0]:
            code = code.broadcast_to((x.shape[0], *code.shape[1:]))
        for block in self.dec_blocks:
            x = block(x, code)
        return self.head(self.head_ln(x))

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.value_std + self.value_mean


def perceiver_block(block: CrossAttentionBlock, z_q: Tensor, z: Tensor) -> Tensor:
    """z' = z_q + MHA(LN(z_q), LN(z), LN(z));  z_agg = z' + MLP(LN(z'))."""
    if z.shape[-2] == 0:
        raise DomainError("perceiver block needs at least one input token")
    return block(z_q, z)


def encoder_forward(model: GeoFaeModel, inst: ConditioningInstance) -> LatentCode:
    with no_grad():
        z = model.encode(inst.coords, inst.mask, inst.obs)
    return LatentCode(z.data[0].copy())


def encode_batch(model: GeoFaeModel, instances) -> np.ndarray:
    """Latents (B, P, D) for equally sized instances, without recording."""
    coords = np.stack([i.coords for i in instances])
    mask = np.stack([i.mask for i in instances])
    obs = np.stack([i.obs for i in instances])
    with no_grad():
        return model.encode(coords, mask, obs).data


def decoder_forward(model: GeoFaeModel, code, queries: np.ndarray) -> np.ndarray:
    """Field values in physical units at ``queries``; (q, p) or (B, q, p) for batched codes."""
    tokens = code.tokens if isinstance(code, LatentCode) else np.asarray(code)
    with no_grad():
        out = model.decode(Tensor(tokens), queries).data
    out = model.denormalize(out)
    return out[0] if tokens.ndim == 2 and np.asarray(queries).ndim == 2 else out


def reconstruct(model: GeoFaeModel, inst: ConditioningInstance, queries: np.ndarray | None = None) -> np.ndarray:
    """Deterministic autoencoder reconstruction at ``queries`` (defaults to the instance's nodes)."""
    code = encoder_forward(model, inst)
    return decoder_forward(model, code, inst.coords if queries is None else queries)


def fae_loss_arrays(model: GeoFaeModel, coords, mask, obs, query_coords, query_values) -> Tensor:
    """Mean squared error in normalized units over all batch items, queries and channels."""
    query_values = np.asarray(query_values, dtype=np.float64)
    if query_values.shape[-2] == 0:
        raise ParameterError("query set is empty")
    code = model.encode(coords, mask, obs)
    pred = model.decode(code, query_coords)
    target = (query_values - model.value_mean) / model.value_std
    if target.ndim == 2:
        target = target[None]
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def fae_loss(model: GeoFaeModel, inst: ConditioningInstance, target, query_idx) -> Tensor:
    """Reconstruction loss of ``inst`` against the clean ``target`` field at ``query_idx``."""
    query_idx = np.asarray(query_idx, dtype=np.int64)
    if query_idx.size == 0:
        raise ParameterError("query set is empty")
    coords = target.cloud.coords[query_idx]
    values = target.values[query_idx]
    return fae_loss_arrays(model, inst.coords, inst.mask, inst.obs, coords, values)
