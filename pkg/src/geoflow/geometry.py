"""Point-cloud domains, sensor subsets and conditioning instances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, DomainError, ParameterError
from .rng import Stream


def as_stream(seed, *labels) -> Stream:
    if isinstance(seed, Stream):
        return seed.child(*labels) if labels else seed
    return Stream(int(seed), *labels)


@dataclass
class PointCloud:
    coords: np.ndarray
    domain_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2:
            raise DimensionError(f"coords must be m x d, got shape {self.coords.shape}")
        if self.coords.shape[1] not in (1, 2, 3):
            raise DimensionError(f"coordinate dimension must be 1, 2 or 3, got {self.dim}")
        if self.coords.shape[0] < 1:
            raise DimensionError("a point cloud needs at least one point")

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


@dataclass
class SensorSet:
    indices: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_indices(cls, indices, m: int) -> SensorSet:
        indices = np.asarray(indices, dtype=np.int64)
        mask = np.zeros(m)
        mask[indices] = 1.0
        return cls(indices=indices, mask=mask)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class ConditioningInstance:
    """Coordinates, 0/1 sensor mask and masked noisy observations for one geometry."""

    coords: np.ndarray
    mask: np.ndarray
    obs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64).reshape(-1)
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.obs.ndim == 1:
            self.obs = self.obs[:, None]
        m = self.coords.shape[0]
        if self.mask.shape[0] != m or self.obs.shape[0] != m:
            raise DimensionError(
                f"inconsistent instance: coords {self.coords.shape}, "
                f"mask {self.mask.shape}, obs {self.obs.shape}"
            )

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.obs.shape[1]

    def permuted(self, perm: np.ndarray) -> ConditioningInstance:
        return ConditioningInstance(self.coords[perm], self.mask[perm], self.obs[perm], dict(self.meta))


def sample_sensors(cloud: PointCloud, fraction: float, seed) -> SensorSet:
    """Seeded uniform shuffle, keep the first ceil(fraction * m) indices."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"sensor fraction must lie in (0, 1], got {fraction}")
    m = cloud.size
    k = math.ceil(fraction * m)
    perm = as_stream(seed, "sensors").permutation(m)
    return SensorSet.from_indices(np.sort(perm[:k]), m)


def quasi_uniform_sensors(cloud: PointCloud, k: int, start: int = 0) -> SensorSet:
    """Greedy farthest-point selection of ``k`` nodes, which keeps h_X / q_X bounded."""
    m = cloud.size
    if not 1 <= k <= m:
        raise ParameterError(f"need 1 <= k <= {m}, got {k}")
    return SensorSet.from_indices(np.sort(farthest_point_indices(cloud.coords, k, start)), m)


def farthest_point_indices(coords: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((coords - coords[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((coords - coords[nxt]) ** 2, axis=1))
    return chosen


def fill_distance(sensors: np.ndarray, evaluation: np.ndarray) -> float:
    """max over evaluation points of the distance to the nearest sensor.

    ``evaluation`` is a dense stand-in for the supremum over the domain.
    """
    sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
    evaluation = np.atleast_2d(np.asarray(evaluation, dtype=np.float64))
    if sensors.shape[0] == 0 or sensors.size == 0:
        raise DomainError("fill distance is undefined for an empty sensor set")
    if sensors.shape[1] != evaluation.shape[1]:
        raise DimensionError("sensor and evaluation coordinates differ in dimension")
    d, _ = cKDTree(sensors).query(evaluation, k=1)
    return float(np.max(d))


def separation_radius(sensors: np.ndarray) -> float:
    """Half the smallest pairwise distance."""
    sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
    if sensors.shape[0] < 2:
        raise DomainError("separation radius needs at least two points")
    d, _ = cKDTree(sensors).query(sensors, k=2)
    return 0.5 * float(np.min(d[:, 1]))


def uniform_grid(n_per_axis: int, dim: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    axes = [np.linspace(lo, hi, n_per_axis)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def build_conditioning(
    cloud: PointCloud,
    sensors: SensorSet,
    values: np.ndarray,
    noise_level: float,
    seed,
    channel_std: np.ndarray | None = None,
) -> ConditioningInstance:
    """obs_i = (u_i + eps_i) * mask_i with eps_i ~ N(0, (noise_level * channel_std)^2)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != cloud.size:
        raise DimensionError(f"field has {values.shape[0]} rows, cloud has {cloud.size} points")
    if sensors.mask.shape[0] != cloud.size:
        raise DimensionError("sensor mask does not match the cloud")
    if noise_level < 0:
        raise ParameterError(f"noise level must be nonnegative, got {noise_level}")
    p = values.shape[1]
    scale = np.ones(p) if channel_std is None else np.asarray(channel_std, dtype=np.float64).reshape(p)
    mask = sensors.mask
    if noise_level > 0:
        eps = as_stream(seed, "noise").normal(values.shape) * (noise_level * scale)
        noisy = values + eps
    else:
        noisy = values
    obs = noisy * mask[:, None]
    return ConditioningInstance(cloud.coords, mask.copy(), obs)


def remask(inst: ConditioningInstance, sensors: SensorSet) -> ConditioningInstance:
    return ConditioningInstance(inst.coords, sensors.mask.copy(), inst.obs * sensors.mask[:, None])


def full_instance(cloud: PointCloud, values: np.ndarray) -> ConditioningInstance:
    """Clean, fully observed instance (the reference embedding input)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    return ConditioningInstance(cloud.coords, np.ones(cloud.size), values.copy())


def coord_bounds(clouds) -> tuple[np.ndarray, np.ndarray]:
    lo = np.min([c.coords.min(axis=0) for c in clouds], axis=0)
    hi = np.max([c.coords.max(axis=0) for c in clouds], axis=0)
    return lo, hi


def normalize_coords(coords: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Affine map of the bounding box [lo, hi] onto [-1, 1]^d."""
    span = np.where(hi > lo, hi - lo, 1.0)
    return 2.0 * (coords - lo) / span - 1.0
