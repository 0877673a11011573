"""Synthetic field datasets on irregular 2-D domains and the GFFD file format.

GFFD layout (little-endian)::

    b"GFFD" | version u32 (=1) | d u32 | p u32 | count u32
    count x ( m u32 | coords m*d f32 | values m*p f32 )

Values are float32 on disk and float64 in memory; generators round their
output through float32 so a write/read round-trip is exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError, FormatError, ParameterError
from .geometry import (
    ConditioningInstance,
    PointCloud,
    as_stream,
    build_conditioning,
    farthest_point_indices,
    sample_sensors,
)

MAGIC = b"GFFD"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
DOMAIN_KINDS = ("notch_triangle", "annulus", "perturbed_disk")
GRF_JITTER = 1e-8

ANNULUS_RADII = (0.5, 1.0)
# Triangle (-1,-1), (1,-1), (0,1) with a rectangular slot cut up from the base.
TRIANGLE = np.array([[-1.0, -1.0], [1.0, -1.0], [0.0, 1.0]])
NOTCH = (-0.15, 0.15, -1.0, -0.2)  # x0, x1, y0, y1
DISK_RADIUS = 0.75
DISK_MODES = (2, 3, 4, 5)
DISK_AMPLITUDE = 0.04  # keeps the boundary inside the unit box


@dataclass
class FieldSample:
    cloud: PointCloud
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.cloud.size:
            raise ParameterError("values and cloud disagree in point count")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field values must be finite")


@dataclass
class FieldDataset:
    samples: list[FieldSample]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples:
            d, p = self.samples[0].cloud.dim, self.samples[0].values.shape[1]
            for s in self.samples:
                if s.cloud.dim != d or s.values.shape[1] != p:
                    raise ParameterError("all samples must share d and p")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples[0].cloud.dim if self.samples else int(self.meta.get("d", 0))

    @property
    def channels(self) -> int:
        return self.samples[0].values.shape[1] if self.samples else int(self.meta.get("p", 0))

    def split(self, test_fraction: float = 0.125) -> tuple[list[FieldSample], list[FieldSample]]:
        """Leading samples train, the trailing ceil(test_fraction * n) test."""
        n = len(self.samples)
        n_test = min(n - 1, max(1, math.ceil(test_fraction * n))) if n > 1 else 0
        return self.samples[: n - n_test], self.samples[n - n_test :]


# -- domains -----------------------------------------------------------------


def _inside(kind: str, pts: np.ndarray, params: dict) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    if kind == "annulus":
        r = np.hypot(x, y)
        return (r >= ANNULUS_RADII[0]) & (r <= ANNULUS_RADII[1])
    if kind == "notch_triangle":
        a, b, c = TRIANGLE
        def side(p, q):
            return (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])
        tri = (side(a, b) >= 0) & (side(b, c) >= 0) & (side(c, a) >= 0)
        x0, x1, y0, y1 = NOTCH
        notch = (x > x0) & (x < x1) & (y > y0) & (y < y1)
        return tri & ~notch
    if kind == "perturbed_disk":
        theta = np.arctan2(y, x)
        radius = DISK_RADIUS * np.ones_like(theta)
        for k, a, b in zip(DISK_MODES, params["a"], params["b"]):
            radius = radius + DISK_RADIUS * (a * np.cos(k * theta) + b * np.sin(k * theta))
        return np.hypot(x, y) <= radius
    raise ParameterError(f"unknown domain kind {kind!r}; expected one of {DOMAIN_KINDS}")


def gen_domain(kind: str, n_points: int, seed, oversample: int = 16) -> PointCloud:
    """Quasi-uniform points inside ``kind``.

    A dense rejection-sampled candidate set is thinned by farthest-point
    selection, so the spacing stays even (bounded h_X / q_X).
    """
    if kind not in DOMAIN_KINDS:
        raise ParameterError(f"unknown domain kind {kind!r}; expected one of {DOMAIN_KINDS}")
    if n_points < 8:
        raise ParameterError(f"need at least 8 points, got {n_points}")
    stream = as_stream(seed, "domain", kind)
    params = {}
    if kind == "perturbed_disk":
        amp = DISK_AMPLITUDE
        params = {
            "a": stream.uniform(len(DISK_MODES)) * 2 * amp - amp,
            "b": stream.uniform(len(DISK_MODES)) * 2 * amp - amp,
        }
    want = oversample * n_points
    pool: list[np.ndarray] = []
    have = 0
    while have < want:
        pts = stream.uniform((2 * want, 2)) * 2.0 - 1.0
        pts = pts[_inside(kind, pts, params)]
        pool.append(pts)
        have += len(pts)
    candidates = np.concatenate(pool)[:want]
    start = int(stream.integers(0, want))
    idx = farthest_point_indices(candidates, n_points, start)
    coords = candidates[idx].astype(np.float32).astype(np.float64)
    return PointCloud(coords, domain_id=kind)


# -- fields ------------------------------------------------------------------


def rbf_kernel(coords: np.ndarray, lengthscale: float) -> np.ndarray:
    sq = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    return np.exp(-sq / (2.0 * lengthscale**2))


def grf_sample(cloud: PointCloud, lengthscale: float, amplitude: float, seed, channels: int = 1) -> FieldSample:
    """u = amplitude * L xi with L L^T = exp(-|x - x'|^2 / (2 l^2)) + jitter I."""
    if lengthscale <= 0:
        raise ParameterError(f"lengthscale must be positive, got {lengthscale}")
    K = rbf_kernel(cloud.coords, lengthscale) + GRF_JITTER * np.eye(cloud.size)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise DomainError(
            f"Cholesky of the RBF kernel failed (lengthscale={lengthscale}, m={cloud.size}); "
            "the cloud likely has near-duplicate points or the lengthscale is too long "
            "for the fixed 1e-8 jitter; thin the cloud or shorten the lengthscale"
        ) from exc
    xi = as_stream(seed, "grf").normal((cloud.size, channels))
    return FieldSample(cloud, amplitude * (L @ xi))


def harmonic_field(cloud: PointCloud, coeffs_a: Sequence[float], coeffs_b: Sequence[float] = ()) -> FieldSample:
    """u(x, y) = sum_k a_k Re((x + iy)^k) + b_k Im((x + iy)^k), k starting at 0."""
    z = cloud.coords[:, 0] + 1j * cloud.coords[:, 1]
    u = np.zeros(cloud.size)
    for k, a in enumerate(coeffs_a):
        if a:
            u += a * np.real(z**k)
    for k, b in enumerate(coeffs_b):
        if b:
            u += b * np.imag(z**k)
    return FieldSample(cloud, u[:, None])


def make_grf_dataset(
    kind: str,
    n_points: int,
    n_samples: int,
    seed: int,
    lengthscale: float = 0.5,
    amplitude: float = 1.0,
    vary_geometry: bool = False,
) -> FieldDataset:
    """GRF fields on one shared domain (or a fresh domain per sample)."""
    shared = None if vary_geometry else gen_domain(kind, n_points, as_stream(seed, "geometry"))
    samples = []
    for i in range(n_samples):
        cloud = shared if shared is not None else gen_domain(kind, n_points, as_stream(seed, "geometry", i))
        s = grf_sample(cloud, lengthscale, amplitude, as_stream(seed, "sample", i))
        samples.append(FieldSample(cloud, s.values.astype(np.float32).astype(np.float64)))
    meta = {
        "d": 2,
        "p": 1,
        "generator": f"grf:{kind}:l={lengthscale}:s={amplitude}",
        "root_seed": seed,
    }
    return FieldDataset(samples, meta)


# -- normalization -----------------------------------------------------------


def value_stats(samples: Sequence[FieldSample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all nodes of the given (training) samples."""
    allv = np.concatenate([s.values for s in samples], axis=0)
    mean = allv.mean(axis=0)
    std = allv.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def normalize_values(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (values - mean) / std


def denormalize_values(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * std + mean


# -- corruption stream -------------------------------------------------------


def corrupt_one(
    sample: FieldSample,
    noise_level: float,
    fraction_set: Sequence[float],
    stream,
    channel_std: np.ndarray | None = None,
) -> ConditioningInstance:
    fractions = list(fraction_set)
    fraction = fractions[int(stream.integers(0, len(fractions)))]
    sensors = sample_sensors(sample.cloud, fraction, stream.child("mask"))
    inst = build_conditioning(sample.cloud, sensors, sample.values, noise_level, stream.child("obs"), channel_std)
    inst.meta["fraction"] = fraction
    return inst


def corrupt(
    samples: Sequence[FieldSample],
    noise_level: float,
    fraction_set: Sequence[float],
    seed,
    epochs: int = 1,
    channel_std: np.ndarray | None = None,
) -> Iterator[tuple[ConditioningInstance, FieldSample]]:
    """Yield (corrupted instance, clean sample) pairs, one fresh corruption per sample per epoch."""
    fractions = list(fraction_set)
    if not fractions:
        raise ParameterError("fraction_set must be nonempty")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ParameterError(f"fractions must lie in (0, 1], got {f}")
    for epoch in range(epochs):
        for i, sample in enumerate(samples):
            stream = as_stream(seed, "corrupt", epoch, i)
            yield corrupt_one(sample, noise_level, fractions, stream, channel_std), sample


# -- GFFD I/O ----------------------------------------------------------------


def gffd_size(counts: Sequence[int], d: int, p: int) -> int:
    """Exact byte size of a GFFD file holding clouds of the given sizes."""
    return HEADER.size + sum(4 + 4 * m * (d + p) for m in counts)


def dataset_write(dataset: FieldDataset, path) -> None:
    d, p = dataset.dim, dataset.channels
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, d, p, len(dataset.samples)))
        for s in dataset.samples:
            fh.write(struct.pack("<I", s.cloud.size))
            fh.write(np.ascontiguousarray(s.cloud.coords, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())


def dataset_read(path) -> FieldDataset:
    buf = Path(path).read_bytes()
    if len(buf) < HEADER.size:
        raise FormatError("file shorter than the GFFD header", len(buf))
    magic, version, d, p, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported GFFD version {version}", 4)
    if d not in (1, 2, 3):
        raise FormatError(f"coordinate dimension {d} not in 1..3", 8)
    off = HEADER.size
    samples = []
    shared: dict[bytes, PointCloud] = {}
    for _ in range(count):
        if off + 4 > len(buf):
            raise FormatError("truncated record header", off)
        (m,) = struct.unpack_from("<I", buf, off)
        off += 4
        need = 4 * m * (d + p)
        if off + need > len(buf):
            raise FormatError(f"truncated record: need {need} bytes", off)
        cbytes = buf[off : off + 4 * m * d]
        coords = np.frombuffer(cbytes, dtype="<f4").reshape(m, d).astype(np.float64)
        off += 4 * m * d
        values = np.frombuffer(buf, dtype="<f4", count=m * p, offset=off).reshape(m, p).astype(np.float64)
        off += 4 * m * p
        cloud = shared.get(cbytes)
        if cloud is None:
            cloud = shared[cbytes] = PointCloud(coords)
        samples.append(FieldSample(cloud, values))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after the last record", off)
    return FieldDataset(samples, {"d": d, "p": p, "source": str(path)})
