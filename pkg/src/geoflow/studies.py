"""Evaluation loops and empirical studies built on trained models.

A *predictor* is any callable mapping a list of conditioning instances to a
list of predicted fields at each instance's nodes; the studies are agnostic
to whether it is the autoencoder, the flow ensemble mean or an interpolation
baseline.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RBFInterpolator
from scipy.spatial import cKDTree

from .data import FieldSample
from .errors import ParameterError, ReportError
from .geofae import GeoFaeModel, decoder_forward, encode_batch
from .geometry import (
    ConditioningInstance,
    as_stream,
    build_conditioning,
    farthest_point_indices,
    fill_distance,
    sample_sensors,
    SensorSet,
    uniform_grid,
)
from .latent_flow import posterior_ensembles
from .metrics import relative_l2_channels

Predictor = Callable[[Sequence[ConditioningInstance]], list]


def _grouped(instances: Sequence[ConditioningInstance], fn) -> list:
    """Apply a batched ``fn`` to groups of equally sized instances, preserving order."""
    groups: dict[int, list[int]] = defaultdict(list)
    for i, inst in enumerate(instances):
        groups[inst.size].append(i)
    out: list = [None] * len(instances)
    for idx in groups.values():
        for i, r in zip(idx, fn([instances[i] for i in idx], idx)):
            out[i] = r
    return out


def fae_predictor(fae: GeoFaeModel, chunk: int = 64) -> Predictor:
    def run(batch, _idx):
        res = []
        for s in range(0, len(batch), chunk):
            part = batch[s : s + chunk]
            z = encode_batch(fae, part)
            q = np.stack([inst.coords for inst in part])
            res.extend(decoder_forward(fae, z, q))
        return res

    return lambda instances: _grouped(instances, run)


def flow_predictor(fae, flow, n_samples: int = 8, steps: int = 10, seed: int = 0, chunk: int = 16) -> Predictor:
    """Ensemble-mean predictor; instance i draws its members from ``(seed, i)``."""

    def run(batch, idx):
        res = []
        for s in range(0, len(batch), chunk):
            part = batch[s : s + chunk]
            seeds = [as_stream(seed, "instance", int(i)) for i in idx[s : s + chunk]]
            res.extend(e.mean for e in posterior_ensembles(flow, fae, part, n_samples, steps, seeds))
        return res

    return lambda instances: _grouped(instances, run)


def nearest_sensor_predictor() -> Predictor:
    """Piecewise-constant interpolation from the nearest observed node."""

    def predict(instances):
        out = []
        for inst in instances:
            obs_idx = np.flatnonzero(inst.mask > 0)
            _, j = cKDTree(inst.coords[obs_idx]).query(inst.coords, k=1)
            out.append(inst.obs[obs_idx][j])
        return out

    return predict


def rbf_predictor(kernel: str = "thin_plate_spline", smoothing: float = 0.0) -> Predictor:
    """Scattered-data RBF interpolation of the observed nodes."""

    def predict(instances):
        out = []
        for inst in instances:
            obs_idx = np.flatnonzero(inst.mask > 0)
            f = RBFInterpolator(inst.coords[obs_idx], inst.obs[obs_idx], kernel=kernel, smoothing=smoothing)
            out.append(f(inst.coords))
        return out

    return predict


def make_instances(
    samples: Sequence[FieldSample],
    fraction: float,
    noise_level: float,
    seed,
    channel_std=None,
) -> list[ConditioningInstance]:
    out = []
    for i, s in enumerate(samples):
        stream = as_stream(seed, "eval", i)
        sensors = sample_sensors(s.cloud, fraction, stream.child("mask"))
        out.append(build_conditioning(s.cloud, sensors, s.values, noise_level, stream.child("obs"), channel_std))
    return out


def errors_for(predict: Predictor, instances, samples) -> np.ndarray:
    preds = predict(instances)
    return np.array([relative_l2_channels(p, s.values) for p, s in zip(preds, samples)])


# -- evaluation ----------------------------------------------------------------


def evaluate(
    fae: GeoFaeModel,
    flow,
    samples: Sequence[FieldSample],
    fraction: float,
    noise_level: float,
    steps: int = 10,
    n_samples: int = 8,
    seed: int = 0,
) -> list[dict]:
    """One row per sample: autoencoder error, ensemble-mean error and mean ensemble std."""
    instances = make_instances(samples, fraction, noise_level, seed, fae.value_std)
    fae_err = errors_for(fae_predictor(fae), instances, samples)
    rows = []
    if flow is None:
        for i, e in enumerate(fae_err):
            rows.append({"index": i, "fae_relative_l2": float(e)})
        return rows
    ens = _grouped(
        instances,
        lambda batch, idx: posterior_ensembles(
            flow, fae, batch, n_samples, steps, [as_stream(seed, "instance", int(i)) for i in idx]
        ),
    )
    for i, (e, s) in enumerate(zip(ens, samples)):
        std = e.std
        rows.append(
            {
                "index": i,
                "relative_l2": relative_l2_channels(e.mean, s.values),
                "mean_std": float(std.mean()),
                "fae_relative_l2": float(fae_err[i]),
            }
        )
    return rows


# -- sensor scaling ------------------------------------------------------------


@dataclass
class ScalingReport:
    counts: list[int]
    errors: list[float]
    slope: float
    sobolev_order: float | None = None
    per_seed: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"m": m, "error": e, "slope": self.slope} for m, e in zip(self.counts, self.errors)]


def loglog_slope(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = (x > 0) & (y > 0) & np.isfinite(y)
    if len(np.unique(x[ok])) < 2:
        raise ReportError("slope needs at least two distinct valid points")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def sensor_scaling_study(
    predict: Predictor,
    samples: Sequence[FieldSample],
    counts: Sequence[int],
    seeds: Sequence[int],
    noise_level: float = 0.0,
    channel_std=None,
    sobolev_order: float | None = None,
) -> ScalingReport:
    """Mean relative error with m quasi-uniform sensors, for each m in ``counts``."""
    counts = [int(math.ceil(m)) for m in counts]
    if len(counts) < 3:
        raise ParameterError("a scaling study needs at least three sensor counts")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ReportError(f"sensor counts must be strictly increasing, got {counts}")
    errors, per_seed = [], {}
    for m in counts:
        errs = []
        for seed in seeds:
            instances = []
            for i, s in enumerate(samples):
                k = min(m, s.cloud.size)
                stream = as_stream(seed, "scaling", m, i)
                start = int(stream.integers(0, s.cloud.size))
                sensors = SensorSet.from_indices(farthest_point_indices(s.cloud.coords, k, start), s.cloud.size)
                instances.append(
                    build_conditioning(s.cloud, sensors, s.values, noise_level, stream.child("obs"), channel_std)
                )
            e = float(errors_for(predict, instances, samples).mean())
            per_seed[(m, seed)] = e
            errs.append(e)
        errors.append(float(np.mean(errs)))
    return ScalingReport(counts, errors, loglog_slope(counts, errors), sobolev_order, per_seed)


def fraction_study(
    predict: Predictor,
    samples: Sequence[FieldSample],
    fractions: Sequence[float],
    seeds: Sequence[int],
    noise_level: float,
    channel_std=None,
) -> list[dict]:
    rows = []
    for f in fractions:
        errs = [
            errors_for(predict, make_instances(samples, f, noise_level, seed, channel_std), samples).mean()
            for seed in seeds
        ]
        rows.append({"fraction": f, "error": float(np.mean(errs))})
    return rows


def step_study(
    fae: GeoFaeModel,
    flow,
    samples: Sequence[FieldSample],
    steps_list: Sequence[int],
    fraction: float,
    noise_level: float,
    n_samples: int = 8,
    seed: int = 0,
) -> list[dict]:
    """Ensemble-mean error versus Euler step count, same noise draws at every count."""
    instances = make_instances(samples, fraction, noise_level, seed, fae.value_std)
    rows = []
    for steps in steps_list:
        pred = flow_predictor(fae, flow, n_samples, steps, seed)
        rows.append({"steps": int(steps), "error": float(errors_for(pred, instances, samples).mean())})
    return rows


def count_inversions(errors: Sequence[float], tol: float = 0.0) -> list[float]:
    """Relative size of every increase in a sequence that should be nonincreasing."""
    out = []
    for a, b in zip(errors, errors[1:]):
        if b > a * (1.0 + tol):
            out.append((b - a) / a)
    return out


def grid_fill_distances(dim: int, sides: Sequence[int], eval_side: int | None = None) -> tuple[list[int], list[float]]:
    """Fill distance of uniform grids on [0, 1]^dim against a dense evaluation grid."""
    counts, hs = [], []
    for n in sides:
        X = uniform_grid(n, dim)
        dense = eval_side or max(8 * n, 64 if dim < 3 else 48)
        # odd multiples of the grid cell include the cell centres
        k = max(2, dense // max(n - 1, 1))
        dense = (n - 1) * (k + k % 2) + 1
        E = uniform_grid(dense, dim)
        counts.append(X.shape[0])
        hs.append(fill_distance(X, E))
    return counts, hs
