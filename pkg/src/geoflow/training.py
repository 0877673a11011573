"""Two-stage optimization, learning-rate schedule and GFCK checkpoints.

GFCK layout (little-endian)::

    b"GFCK" | version u32 (=1) | count u32
    count x ( name_len u32 | utf-8 name | rank u32 | dims u32 * rank | f64 payload )

Every random draw in a training step comes from a stream keyed by
``(seed, stage, step)``, so a run resumed from a checkpoint replays the
remaining steps bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import FieldSample, corrupt_one, value_stats
from .errors import ConfigError, ContractError, DimensionError, FormatError, ParameterError, TrainingError
from .geofae import GeoFaeConfig, GeoFaeModel, encode_batch, fae_loss_arrays
from .geometry import ConditioningInstance, full_instance
from .latent_flow import FlowConfig, FlowModel, crf_loss_arrays
from .layers import Module
from .rng import Stream
from .tensor import backward


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 32
    base_lr: float = 3e-3
    warmup_steps: int = 100
    decay_factor: float = 0.9
    decay_every: int = 400
    weight_decay: float = 1e-5
    noise_level: float = 0.01
    fraction_set: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    seed: int = 0
    queries: int = 128
    log_every: int = 10
    grad_clip: float | None = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ParameterError("warmup_steps must be >= 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ParameterError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1 or self.iterations < 0 or self.batch_size < 1:
            raise ParameterError("decay_every and batch_size must be >= 1, iterations >= 0")
        if not self.fraction_set:
            raise ParameterError("fraction_set must be nonempty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fraction_set"] = list(self.fraction_set)
        return d


TRAIN_PRESETS = {
    "desk": TrainConfig(),
    "full": TrainConfig(
        iterations=100_000, batch_size=32, base_lr=1e-3, warmup_steps=5000,
        decay_factor=0.9, decay_every=5000, weight_decay=1e-5,
    ),
}

# stage 2 schedules; the desk flow is more stable at a lower peak rate
FLOW_TRAIN_PRESETS = {
    "desk": replace(TRAIN_PRESETS["desk"], base_lr=1e-3),
    "full": TRAIN_PRESETS["full"],
}


def train_config(preset: str = "desk", stage: int = 1, **overrides) -> TrainConfig:
    presets = {1: TRAIN_PRESETS, 2: FLOW_TRAIN_PRESETS}.get(stage)
    if presets is None:
        raise ParameterError(f"stage must be 1 or 2, got {stage}")
    if preset not in presets:
        raise ParameterError(f"unknown preset {preset!r}; choose from {sorted(presets)}")
    if "fraction_set" in overrides:
        overrides["fraction_set"] = tuple(overrides["fraction_set"])
    return replace(presets[preset], **overrides)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to base_lr, then stepwise exponential decay."""
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    return cfg.base_lr * cfg.decay_factor ** ((step - cfg.warmup_steps) // cfg.decay_every)


# -- AdamW -------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(param, grad, m, v, step, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8, decay=True):
    """One decoupled-decay Adam update; ``step`` is the 1-based count after increment.

    Returns (param, m, v) as new arrays.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise DimensionError(f"shape mismatch: param {param.shape}, grad {grad.shape}")
    if decay and wd:
        param = param * (1.0 - lr * wd)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def adamw_step(named_params, state: OptimizerState, lr: float, wd: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one AdamW step to every parameter using its accumulated ``.grad``."""
    state.step += 1
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != param shape {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        p.data, state.m[name], state.v[name] = adamw_update(
            p.data, g, m, v, state.step, lr, wd, beta1, beta2, eps, decay=getattr(p, "decay", True)
        )


def clip_grad_norm(params, max_norm: float | None) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def param_hash(model: Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for name, arr in getattr(model, "buffers", lambda: {})().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- batch assembly ----------------------------------------------------------


@dataclass
class LossRecord:
    step: int
    lr: float
    loss: float


def _subsample(sample: FieldSample, size: int, stream: Stream) -> FieldSample:
    if sample.cloud.size == size:
        return sample
    from .geometry import PointCloud

    idx = np.sort(stream.choice(sample.cloud.size, size))
    return FieldSample(PointCloud(sample.cloud.coords[idx], sample.cloud.domain_id), sample.values[idx])


def _batch_indices(n: int, batch: int, stream: Stream) -> np.ndarray:
    return stream.choice(n, batch, replace=n < batch)


def assemble_fae_batch(samples: Sequence[FieldSample], cfg: TrainConfig, step: int, channel_std):
    stream = Stream(cfg.seed, "stage1", step)
    size = min(s.cloud.size for s in samples)
    idx = _batch_indices(len(samples), cfg.batch_size, stream.child("batch"))
    coords, mask, obs, qc, qv = [], [], [], [], []
    for j, i in enumerate(idx):
        target = samples[i]
        sub = _subsample(target, size, stream.child("subsample", j))
        inst = corrupt_one(sub, cfg.noise_level, cfg.fraction_set, stream.child("corrupt", j), channel_std)
        m = target.cloud.size
        q = stream.child("query", j).choice(m, cfg.queries, replace=m < cfg.queries)
        coords.append(inst.coords)
        mask.append(inst.mask)
        obs.append(inst.obs)
        qc.append(target.cloud.coords[q])
        qv.append(target.values[q])
    return tuple(np.stack(a) for a in (coords, mask, obs, qc, qv))


def _check_finite(loss: float, step: int, lr: float, model: Module) -> None:
    if not math.isfinite(loss):
        norms = {n: float(np.linalg.norm(p.data)) for n, p in model.named_parameters()}
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -np.inf)[:5]
        raise TrainingError(f"non-finite loss {loss} at step {step} (lr={lr:.3g}); largest param norms: {worst}")


def train_stage1(
    fae: GeoFaeModel,
    samples: Sequence[FieldSample],
    cfg: TrainConfig,
    state: OptimizerState | None = None,
    stop_at: int | None = None,
    progress: Callable[[LossRecord], None] | None = None,
) -> tuple[GeoFaeModel, list[LossRecord], OptimizerState]:
    """Fit the autoencoder by minimizing the reconstruction loss on corrupted inputs.

    Pass ``state`` from a checkpoint to resume; ``stop_at`` ends early (for
    split runs) without changing the schedule.
    """
    if fae.frozen:
        raise ContractError("cannot train a frozen autoencoder")
    if state is None:
        state = OptimizerState()
        mean, std = value_stats(samples)
        fae.set_value_stats(mean, std)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    named = list(fae.named_parameters())
    params = [p for _, p in named]
    history: list[LossRecord] = []
    while state.step < end:
        step = state.step
        batch = assemble_fae_batch(samples, cfg, step, fae.value_std)
        fae.zero_grad()
        loss = fae_loss_arrays(fae, *batch)
        value = loss.item()
        lr = lr_at(step, cfg)
        _check_finite(value, step, lr, fae)
        backward(loss)
        clip_grad_norm(params, cfg.grad_clip)
        adamw_step(named, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        if step % cfg.log_every == 0:
            rec = LossRecord(step, lr, value)
            history.append(rec)
            if progress:
                progress(rec)
    fae.zero_grad()
    return fae, history, state


def assemble_flow_batch(samples, cfg: TrainConfig, step: int, fae: GeoFaeModel, cache: dict):
    stream = Stream(cfg.seed, "stage2", step)
    size = min(s.cloud.size for s in samples)
    idx = _batch_indices(len(samples), cfg.batch_size, stream.child("batch"))
    insts: list[ConditioningInstance] = []
    z1 = []
    for j, i in enumerate(idx):
        sub = _subsample(samples[i], size, stream.child("subsample", j))
        insts.append(corrupt_one(sub, cfg.noise_level, cfg.fraction_set, stream.child("corrupt", j), fae.value_std))
        if sub is samples[i]:
            if i not in cache:
                cache[i] = encode_batch(fae, [full_instance(sub.cloud, sub.values)])[0]
            z1.append(cache[i])
        else:
            z1.append(encode_batch(fae, [full_instance(sub.cloud, sub.values)])[0])
    z_c = encode_batch(fae, insts)
    z1 = np.stack(z1)
    z0 = stream.child("noise").normal(z1.shape)
    t = stream.child("time").uniform(len(idx))
    return z1, z_c, z0, t


def fit_latent_stats(flow: FlowModel, fae: GeoFaeModel, samples: Sequence[FieldSample], floor: float = 1e-4):
    """Entry-wise mean and std of full-observation codes over ``samples``, stored on the flow."""
    groups: dict[int, list] = {}
    for s in samples:
        groups.setdefault(s.cloud.size, []).append(full_instance(s.cloud, s.values))
    codes = np.concatenate(
        [encode_batch(fae, insts[i : i + 64]) for insts in groups.values() for i in range(0, len(insts), 64)]
    )
    flow.set_latent_stats(codes.mean(axis=0), np.maximum(codes.std(axis=0), floor))


def train_stage2(
    flow: FlowModel,
    fae: GeoFaeModel,
    samples: Sequence[FieldSample],
    cfg: TrainConfig,
    state: OptimizerState | None = None,
    stop_at: int | None = None,
    progress: Callable[[LossRecord], None] | None = None,
    velocity=None,
) -> tuple[FlowModel, list[LossRecord], OptimizerState]:
    """Fit the velocity network on frozen-encoder latents.

    ``velocity`` substitutes a callable for the network when computing the
    reported loss (used to sanity-check the pipeline with a teacher); no
    parameters are updated in that case.
    """
    if not fae.frozen:
        raise ContractError("freeze the autoencoder before stage-2 training")
    state = state or OptimizerState()
    if state.step == 0:
        fit_latent_stats(flow, fae, samples)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    named = list(flow.named_parameters())
    params = [p for _, p in named]
    cache: dict = {}
    history: list[LossRecord] = []
    while state.step < end:
        step = state.step
        z1, z_c, z0, t = assemble_flow_batch(samples, cfg, step, fae, cache)
        z1, z_c = flow.standardize(z1), flow.condition(z_c)
        lr = lr_at(step, cfg)
        if velocity is not None:
            value = crf_loss_arrays(velocity, z1, z_c, z0, t).item()
            state.step += 1
        else:
            flow.zero_grad()
            loss = crf_loss_arrays(flow, z1, z_c, z0, t)
            value = loss.item()
            _check_finite(value, step, lr, flow)
            backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            adamw_step(named, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        if step % cfg.log_every == 0:
            rec = LossRecord(step, lr, value)
            history.append(rec)
            if progress:
                progress(rec)
    flow.zero_grad()
    return flow, history, state


def write_loss_csv(history: Sequence[LossRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for r in history:
            w.writerow([r.step, repr(r.lr), repr(r.loss)])


# -- GFCK checkpoints --------------------------------------------------------

CK_MAGIC = b"GFCK"
CK_VERSION = 1
KIND_FAE = 1.0
KIND_FLOW = 2.0


def write_arrays(path, entries: "OrderedDict[str, np.ndarray]") -> None:
    out = bytearray()
    out += CK_MAGIC + struct.pack("<II", CK_VERSION, len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(out))


def read_arrays(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("file shorter than the GFCK header", len(buf))
    if buf[:4] != CK_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CK_MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CK_VERSION:
        raise FormatError(f"unsupported GFCK version {version}", 4)
    off = 12
    entries: OrderedDict[str, np.ndarray] = OrderedDict()

    def need(n: int, what: str):
        if off + n > len(buf):
            raise FormatError(f"truncated {what}", off)

    for _ in range(count):
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(nlen, "name")
        try:
            name = buf[off : off + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8", off) from exc
        off += nlen
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        need(8 * n, f"payload of {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
        entries[name] = arr
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return entries


def _config_entries(config) -> list[tuple[str, np.ndarray]]:
    return [(f"config/{f.name}", np.array(float(getattr(config, f.name)))) for f in fields(config)]


def _config_from(entries, cls):
    kwargs = {}
    for f in fields(cls):
        key = f"config/{f.name}"
        if key not in entries:
            raise ConfigError(f"checkpoint lacks {key}")
        val = float(entries[key])
        kwargs[f.name] = int(val) if f.type in ("int", int) else val
    return cls(**kwargs)


def checkpoint_entries(model: Module, state: OptimizerState | None = None, meta: dict | None = None):
    kind = KIND_FAE if isinstance(model, GeoFaeModel) else KIND_FLOW
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    entries["meta/kind"] = np.array(kind)
    for k, v in (meta or {}).items():
        entries[f"meta/{k}"] = np.asarray(v, dtype=np.float64)
    for k, v in _config_entries(model.config):
        entries[k] = v
    for k, v in model.buffers().items():
        entries[f"buffer/{k}"] = v
    for name, p in model.named_parameters():
        entries[f"param/{name}"] = p.data
    if state is not None:
        entries["optim/step"] = np.array(float(state.step))
        for name, _ in model.named_parameters():
            if name in state.m:
                entries[f"adam_m/{name}"] = state.m[name]
                entries[f"adam_v/{name}"] = state.v[name]
    return entries


def checkpoint_save(path, model: Module, state: OptimizerState | None = None, meta: dict | None = None) -> None:
    write_arrays(path, checkpoint_entries(model, state, meta))


def _restore(model: Module, entries) -> OptimizerState | None:
    params = OrderedDict((k[len("param/"):], v) for k, v in entries.items() if k.startswith("param/"))
    model.load_state_dict(params)
    for k in model.buffers():
        key = f"buffer/{k}"
        if key not in entries:
            raise ConfigError(f"checkpoint lacks {key}")
        if entries[key].shape != getattr(model, k).shape:
            raise ConfigError(f"{key}: shape {entries[key].shape} != {getattr(model, k).shape}")
        setattr(model, k, entries[key].copy())
    if "optim/step" not in entries:
        return None
    state = OptimizerState(step=int(entries["optim/step"]))
    for k, v in entries.items():
        if k.startswith("adam_m/"):
            state.m[k[len("adam_m/"):]] = v.copy()
        elif k.startswith("adam_v/"):
            state.v[k[len("adam_v/"):]] = v.copy()
    return state


def checkpoint_load(path, model: Module | None = None):
    """Load a checkpoint.

    With ``model=None`` the model is rebuilt from the stored config; otherwise
    the entries are loaded into ``model`` and a mismatch raises ConfigError.
    Returns ``(model, optimizer_state_or_None, meta)``.
    """
    entries = read_arrays(path)
    kind = float(entries.get("meta/kind", np.nan))
    if model is None:
        if kind == KIND_FAE:
            model = GeoFaeModel(_config_from(entries, GeoFaeConfig))
        elif kind == KIND_FLOW:
            model = FlowModel(_config_from(entries, FlowConfig))
        else:
            raise ConfigError(f"unknown checkpoint kind {kind}")
    else:
        want = KIND_FAE if isinstance(model, GeoFaeModel) else KIND_FLOW
        if kind != want:
            raise ConfigError("checkpoint holds a different model kind")
    state = _restore(model, entries)
    meta = {k[len("meta/"):]: v for k, v in entries.items() if k.startswith("meta/")}
    return model, state, meta
