"""Numerical self-checks: gradients, invariances, W2 oracles and the posterior bound.

Each suite returns a list of :class:`Check` results; ``run_all`` is what the
``selfcheck`` command executes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geofae import GeoFaeModel, fae_config, fae_loss_arrays
from .geometry import ConditioningInstance
from .latent_flow import FlowModel, crf_loss_arrays, flow_config
from .layers import Module
from .metrics import (
    GaussianSpec,
    assignment_w2,
    empirical_w2,
    gaussian_w2,
    lipschitz_pushforward_gap,
    random_psd,
    random_trials,
    sorted_w2,
)
from .rng import Stream
from .tensor import Tensor, backward, concat, finite_diff_check, gelu, layer_norm, matmul, no_grad, silu, softmax

GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: value={self.value:.3e} threshold={self.threshold:.1e}{extra}"


def randomize_parameters(model: Module, seed: int, std: float = 0.3) -> Module:
    """Overwrite every parameter (including zero-initialized branches) with N(0, std)."""
    s = Stream(seed, "randomize")
    for name, p in model.named_parameters():
        p.data = s.child(name).normal(p.data.shape) * std
    return model


def param_grad_check(
    loss_fn: Callable[[], Tensor],
    model: Module,
    h: float = FD_STEP,
    per_param: int = 6,
    seed: int = 0,
) -> float:
    """Max relative gradient error over a random subset of coordinates of every parameter."""
    model.zero_grad()
    backward(loss_fn())
    worst = 0.0
    s = Stream(seed, "coords")
    with no_grad():
        for name, p in model.named_parameters():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            flat = p.data.reshape(-1)
            idx = s.child(name).choice(flat.size, min(per_param, flat.size))
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp = loss_fn().item()
                flat[i] = old - h
                fm = loss_fn().item()
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                g = analytic.reshape(-1)[i]
                worst = max(worst, abs(fd - g) / max(1.0, abs(g)))
    model.zero_grad()
    return worst


def _op_cases(seed: int):
    s = Stream(seed, "ops")

    def u(*shape):
        return s.uniform(shape) * 4.0 - 2.0

    w = Tensor(u(4, 3))
    other = Tensor(u(3, 4))
    gamma, beta = Tensor(u(5)), Tensor(u(5))
    bw, bm = Tensor(u(2, 4, 3)), Tensor(u(2, 3, 3))
    k35, k43, k3, k243 = Tensor(u(3, 5)), Tensor(u(4, 3)), Tensor(u(3)), Tensor(u(2, 4, 3))
    return {
        "matmul": (lambda x: (matmul(x, w) ** 2).sum(), u(3, 4)),
        "batched_matmul": (lambda x: (matmul(x, bw) * bm).sum(), u(2, 3, 4)),
        "softmax": (lambda x: (softmax(x, axis=-1) * k35).sum(), u(3, 5)),
        "layer_norm": (lambda x: (layer_norm(x, gamma, beta) * k35).sum(), u(3, 5)),
        "gelu": (lambda x: (gelu(x) * k43).sum(), u(4, 3)),
        "silu": (lambda x: (silu(x) * k43).sum(), u(4, 3)),
        "broadcast_mul_add": (lambda x: ((x * other.T[0:4, 0:1] + k3) ** 2).mean(), u(4, 3)),
        "concat_transpose": (lambda x: (concat([x, x * 2.0], axis=-1).transpose(0, 2, 1) * k243).sum(), u(2, 3, 2)),
        "reshape_slice": (lambda x: (x.reshape(3, 4)[:, 1:3] ** 3).sum(), u(2, 6)),
        "sin_cos_exp": (lambda x: (x.sin() * x.cos() + (x * 0.3).exp()).sum(), u(5)),
        "division_pow": (lambda x: (x / (x * x + 1.0)).sum(), u(5)),
    }


def tiny_instance(m: int, seed: int, p: int = 1, d: int = 2) -> ConditioningInstance:
    s = Stream(seed, "tiny_instance", m)
    coords = s.uniform((m, d)) * 2.0 - 1.0
    mask = (s.uniform(m) < 0.6).astype(float)
    mask[0] = 1.0
    obs = s.normal((m, p)) * mask[:, None]
    return ConditioningInstance(coords, mask, obs)


def gradient_suite(seed: int = 0) -> list[Check]:
    out = []
    for name, (f, x) in _op_cases(seed).items():
        err = finite_diff_check(f, x, FD_STEP)
        out.append(Check(f"grad/{name}", err, GRAD_TOL, err < GRAD_TOL))

    fae = randomize_parameters(GeoFaeModel(fae_config("tiny"), seed=seed), seed)
    inst = tiny_instance(8, seed)
    s = Stream(seed, "fae_queries")
    q_idx = s.choice(8, 4)
    target = s.normal((8, 1))

    def fae_loss_fn():
        return fae_loss_arrays(fae, inst.coords, inst.mask, inst.obs, inst.coords[q_idx], target[q_idx])

    err = param_grad_check(fae_loss_fn, fae, seed=seed)
    out.append(Check("grad/fae_loss", err, GRAD_TOL, err < GRAD_TOL, "tiny model, m=8, M=4"))

    flow = randomize_parameters(FlowModel(flow_config("tiny")), seed + 1)
    c = flow.config
    z1 = s.normal((2, c.latents, c.dim))
    zc = s.normal((2, c.latents, c.dim))
    z0 = s.normal((2, c.latents, c.dim))
    t = s.uniform(2)
    err = param_grad_check(lambda: crf_loss_arrays(flow, z1, zc, z0, t), flow, seed=seed)
    out.append(Check("grad/crf_loss", err, GRAD_TOL, err < GRAD_TOL, "tiny flow"))
    return out


def permutation_suite(seed: int = 0, sizes=(8, 64, 333), n_perm: int = 10, tol: float = 1e-8) -> list[Check]:
    fae = randomize_parameters(GeoFaeModel(fae_config("desk"), seed=seed), seed, std=0.1)
    out = []
    for m in sizes:
        inst = tiny_instance(m, seed)
        with no_grad():
            base = fae.encode(inst.coords, inst.mask, inst.obs).data
            worst = 0.0
            for k in range(n_perm):
                perm = Stream(seed, "perm", m, k).permutation(m)
                p = inst.permuted(perm)
                worst = max(worst, float(np.abs(fae.encode(p.coords, p.mask, p.obs).data - base).max()))
        out.append(Check(f"permutation/m={m}", worst, tol, worst < tol))
    return out


def discretization_suite(seed: int = 0, sizes=(8, 64, 333), tol: float = 1e-12) -> list[Check]:
    fae = randomize_parameters(GeoFaeModel(fae_config("desk"), seed=seed), seed, std=0.1)
    shape = (fae.config.latents, fae.config.dim)
    out = []
    with no_grad():
        shapes_ok = all(
            fae.encode(i.coords, i.mask, i.obs).data.shape[1:] == shape
            for i in (tiny_instance(m, seed) for m in sizes)
        )
        out.append(Check("discretization/latent_shape", 0.0 if shapes_ok else 1.0, 0.0, shapes_ok, f"P x D = {shape}"))
        inst = tiny_instance(64, seed)
        code = fae.encode(inst.coords, inst.mask, inst.obs)
        q = Stream(seed, "queries").uniform((50, 2)) * 2 - 1
        whole = fae.decode(code, q).data[0]
        worst = 0.0
        for split in (1, 7, 25, 49):
            parts = np.concatenate([fae.decode(code, q[:split]).data[0], fae.decode(code, q[split:]).data[0]])
            worst = max(worst, float(np.abs(parts - whole).max()))
    out.append(Check("discretization/query_batching", worst, tol, worst <= tol))
    return out


def w2_suite(seed: int = 0) -> list[Check]:
    out = []
    s = Stream(seed, "w2")
    worst = 0.0
    for n in (5, 64, 300):
        a, b = s.normal(n), s.normal(n) * 1.7 + 0.4
        worst = max(worst, abs(sorted_w2(a, b) - assignment_w2(a, b)))
    out.append(Check("w2/sorted_vs_assignment", worst, 1e-10, worst <= 1e-10))
    a = s.child("n0").normal(4096)
    b = s.child("n1").normal(4096) + 1.0
    val = empirical_w2(a, b)
    rel = abs(val - 1.0)
    out.append(Check("w2/gaussian_shift_n4096", rel, 0.05, rel <= 0.05, f"W2={val:.4f}"))
    cases = [
        (GaussianSpec([0.0], [[1.0]]), GaussianSpec([0.0], [[4.0]]), 1.0),
        (GaussianSpec([1.0], [[2.25]]), GaussianSpec([-2.0], [[0.25]]), np.hypot(3.0, 1.0)),
        (GaussianSpec([0.0, 0.0], np.eye(2)), GaussianSpec([3.0, 4.0], np.eye(2)), 5.0),
    ]
    worst = max(abs(gaussian_w2(p, q) - v) for p, q, v in cases)
    out.append(Check("w2/bures_closed_forms", worst, 1e-9, worst <= 1e-9))
    return out


def theorem_suite(seed: int = 0, n_trials: int = 1000) -> list[Check]:
    reports = random_trials(n_trials, seed, tol=np.inf)
    worst = min(r.slack for r in reports)
    out = [Check("bound/random_trials", -worst, 1e-9, worst >= -1e-9, f"{n_trials} trials, min slack {worst:.3e}")]
    s = Stream(seed, "orthogonal")
    gap = 0.0
    for k in range(50):
        Qm, _ = np.linalg.qr(s.child(k).normal((3, 3)))
        A = (0.5 + 2.0 * s.child(k, "c").uniform()) * Qm
        P = GaussianSpec(s.child(k, "mp").normal(3), random_psd(s.child(k, "P"), 3))
        Q = GaussianSpec(s.child(k, "mq").normal(3), random_psd(s.child(k, "Q"), 3))
        lhs, rhs = lipschitz_pushforward_gap(A, P, Q)
        gap = max(gap, abs(lhs - rhs))
    out.append(Check("bound/lipschitz_equality", gap, 1e-9, gap <= 1e-9, "scaled orthogonal A"))
    return out


SUITES = {
    "gradient": gradient_suite,
    "permutation": permutation_suite,
    "discretization": discretization_suite,
    "w2": w2_suite,
    "theorem": theorem_suite,
}


def run_all(seed: int = 0, suites=None, echo=print) -> list[Check]:
    results = []
    for name in suites or SUITES:
        t0 = time.perf_counter()
        checks = SUITES[name](seed)
        for c in checks:
            if echo:
                echo(c.line())
        if echo:
            echo(f"suite {name}: {time.perf_counter() - t0:.1f}s")
        results.extend(checks)
    return results
