"""Error metrics, Wasserstein-2 machinery and the linear-decoder bound harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, DimensionError, DomainError, ParameterError, TheoremViolation
from .rng import Stream

ASSIGNMENT_MAX_N = 512


def relative_l2(pred, target) -> float:
    """||pred - target||_2 / ||target||_2 over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    denom = np.linalg.norm(target)
    if denom == 0:
        raise DomainError("relative error is undefined for an all-zero target")
    return float(np.linalg.norm(pred - target) / denom)


def relative_l2_channels(pred, target) -> float:
    """Relative L2 per channel (last axis), averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 1:
        return relative_l2(pred, target)
    p = pred.shape[-1]
    return float(np.mean([relative_l2(pred[..., c], target[..., c]) for c in range(p)]))


# -- Wasserstein-2 -------------------------------------------------------------


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x.reshape(x.shape[0], -1)


def assignment_w2(a, b) -> float:
    """Exact W2 between equal-size empirical measures by optimal assignment."""
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[0] != b.shape[0]:
        raise ParameterError(f"sample counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError("samples live in different dimensions")
    n = a.shape[0]
    if n > ASSIGNMENT_MAX_N:
        raise CapacityError(f"assignment solver is capped at n={ASSIGNMENT_MAX_N}, got {n}")
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def sorted_w2(a, b) -> float:
    """Exact 1-D W2 by pairing order statistics."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size != b.size:
        raise ParameterError(f"sample counts differ: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def empirical_w2(a, b) -> float:
    """W2 between two equal-size sample sets (sorting in 1-D, assignment otherwise)."""
    a_arr, b_arr = _as_samples(a), _as_samples(b)
    if a_arr.shape[0] != b_arr.shape[0]:
        raise ParameterError(f"sample counts differ: {a_arr.shape[0]} vs {b_arr.shape[0]}")
    if a_arr.shape[1] == 1 and b_arr.shape[1] == 1:
        return sorted_w2(a_arr, b_arr)
    return assignment_w2(a_arr, b_arr)


@dataclass
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionError(f"covariance must be {d}x{d}, got {self.cov.shape}")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-12 * max(1.0, np.abs(self.cov).max()):
            raise DomainError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min(initial=0.0) < -1e-10:
            raise DomainError("covariance is not positive semidefinite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def pushforward(self, A: np.ndarray, offset=None) -> GaussianSpec:
        """Law of A z + offset for z from this Gaussian."""
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        mean = A @ self.mean + (0.0 if offset is None else np.asarray(offset, dtype=np.float64))
        cov = A @ self.cov @ A.T
        return GaussianSpec(mean, 0.5 * (cov + cov.T))


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric square root with eigenvalues clamped at zero."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2(a: GaussianSpec, b: GaussianSpec) -> float:
    """Closed-form W2 between Gaussians (Bures metric on the covariances)."""
    if a.dim != b.dim:
        raise DimensionError(f"dimensions differ: {a.dim} vs {b.dim}")
    root_b = psd_sqrt(b.cov)
    cross = psd_sqrt(root_b @ a.cov @ root_b)
    bures = np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    w2sq = float(np.sum((a.mean - b.mean) ** 2) + bures)
    return float(np.sqrt(max(w2sq, 0.0)))


# -- bound harness ---------------------------------------------------------------


@dataclass
class TheoremReport:
    lhs: float
    L_D: float
    eps_flow: float
    eps_rec: float
    rhs: float
    slack: float

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in ("lhs", "L_D", "eps_flow", "eps_rec", "rhs", "slack")}


def theorem_harness(
    A,
    true_latent: GaussianSpec,
    model_latent: GaussianSpec,
    recon_offset=None,
    tol: float = 1e-9,
) -> TheoremReport:
    """Check W2(A#Q, A#P + b) <= sigma_max(A) W2(Q, P) + |b| exactly for a linear decoder.

    The true field posterior is the decoded true latent posterior shifted by
    ``recon_offset`` (so the reconstruction error is exactly ``|b|``); the
    learned posterior is the decoded model latent.  Raises TheoremViolation
    when the slack is below ``-tol``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    out_dim = A.shape[0]
    offset = np.zeros(out_dim) if recon_offset is None else np.asarray(recon_offset, dtype=np.float64).reshape(out_dim)
    L_D = float(np.linalg.svd(A, compute_uv=False)[0])
    eps_flow = gaussian_w2(model_latent, true_latent)
    eps_rec = float(np.linalg.norm(offset))
    lhs = gaussian_w2(model_latent.pushforward(A), true_latent.pushforward(A, offset))
    rhs = L_D * eps_flow + eps_rec
    report = TheoremReport(lhs, L_D, eps_flow, eps_rec, rhs, rhs - lhs)
    if report.slack < -tol:
        raise TheoremViolation(report)
    return report


def random_psd(stream: Stream, d: int, rank: int | None = None) -> np.ndarray:
    rank = d if rank is None else rank
    G = stream.normal((d, rank))
    return G @ G.T / rank


def random_trials(n_trials: int, seed: int, latent_dim: int = 2, out_dim: int = 2, tol: float = 1e-9):
    """Randomized harness runs: random A, random Gaussian pair, random offset (zero in a third of trials)."""
    reports = []
    for i in range(n_trials):
        s = Stream(seed, "trial", i)
        A = s.normal((out_dim, latent_dim))
        P = GaussianSpec(s.normal(latent_dim), random_psd(s.child("P"), latent_dim))
        Q = GaussianSpec(s.normal(latent_dim) * 0.5, random_psd(s.child("Q"), latent_dim))
        offset = np.zeros(out_dim) if i % 3 == 0 else s.normal(out_dim) * 0.3
        reports.append(theorem_harness(A, P, Q, offset, tol=tol))
    return reports


def lipschitz_pushforward_gap(A, P: GaussianSpec, Q: GaussianSpec) -> tuple[float, float]:
    """(W2(A#P, A#Q), sigma_max(A) * W2(P, Q))."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    return gaussian_w2(P.pushforward(A), Q.pushforward(A)), float(np.linalg.svd(A, compute_uv=False)[0]) * gaussian_w2(P, Q)


# -- uncertainty -----------------------------------------------------------------


def ensemble_uncertainty(ensemble) -> tuple[np.ndarray, dict]:
    """Unbiased per-query, per-channel std of the ensemble members, plus a summary."""
    members = np.asarray(getattr(ensemble, "members", ensemble), dtype=np.float64)
    if members.shape[0] < 2:
        raise ParameterError("uncertainty needs at least two ensemble members")
    std = members.std(axis=0, ddof=1)
    return std, {"mean_std": float(std.mean()), "max_std": float(std.max()), "n": int(members.shape[0])}
