"""Curvature diagnostics and channel-distribution alignment.

Hessian-vector products are formed from first-order gradients by central
finite differences, so any loss that exposes (loss, gradient) as a function
of a flat parameter vector can be probed. lambda_max extracts the largest
(signed) eigenvalue by Lanczos iteration with full reorthogonalization:
one Hessian-vector product per step, top Ritz values non-decreasing, and
exact once the Krylov space exhausts the (masked) dimension. Plain power
iteration on H stalls whenever the extreme negative eigenvalue rivals the
extreme positive one in magnitude, and a shifted rerun loses the small
top eigenvalue to cancellation, so neither meets the eigensolve-oracle
tolerance this module is tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError

EPS_BASE = 1e-4
RAYLEIGH_TOL = 1e-6
MAX_POWER_ITERS = 100


@dataclass
class HvpContext:
    """A loss surface probed at a fixed point theta0.

    loss_and_grad maps a flat parameter vector to (loss, gradient); segments
    name slices of the vector (for per-component curvature).
    """

    theta0: np.ndarray
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]]
    segments: dict[str, slice] = field(default_factory=dict)
    eps_base: float = EPS_BASE

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=np.float64).ravel()

    @property
    def n(self) -> int:
        return self.theta0.size


def hvp(ctx: HvpContext, v: np.ndarray) -> np.ndarray:
    """H @ v by central differences of the gradient along v."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape != ctx.theta0.shape:
        raise DimensionError(f"direction of {v.shape} for {ctx.theta0.shape} parameters")
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(v)
    vhat = v / nv
    eps = ctx.eps_base * max(1.0, float(np.linalg.norm(ctx.theta0)))
    _, gp = ctx.loss_and_grad(ctx.theta0 + eps * vhat)
    _, gm = ctx.loss_and_grad(ctx.theta0 - eps * vhat)
    return (gp - gm) * (nv / (2.0 * eps))


@dataclass
class SharpnessResult:
    value: float
    iterations: int
    converged: bool


def _random_unit(n: int, rng: np.random.Generator, mask: np.ndarray | None) -> np.ndarray:
    v = rng.standard_normal(n)
    if mask is not None:
        v = v * mask
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        raise ContractError("empty component segment")
    return v / nv


def _segment_mask(ctx: HvpContext, segment) -> np.ndarray | None:
    if segment is None:
        return None
    if isinstance(segment, str):
        if segment not in ctx.segments:
            raise ContractError(f"unknown segment {segment!r}; have {sorted(ctx.segments)}")
        segment = ctx.segments[segment]
    mask = np.zeros(ctx.n)
    mask[segment] = 1.0
    return mask


def lambda_max(
    ctx: HvpContext,
    seed: int = 0,
    max_iters: int = MAX_POWER_ITERS,
    tol: float = RAYLEIGH_TOL,
    segment=None,
    trace: list | None = None,
) -> SharpnessResult:
    """Largest (algebraic) eigenvalue of the (segment-restricted) Hessian.

    Lanczos with full reorthogonalization, one Hessian-vector product per
    step. The running estimate is the top eigenvalue of the growing
    tridiagonal matrix; interlacing makes it non-decreasing step to step,
    and trace, if given, collects it. Converged means the Ritz residual
    beta*|s_k| (which bounds the distance from the estimate to a true
    eigenvalue) fell below tol relative to the estimate, or the Krylov
    space exhausted the masked dimension, in which case the value is exact
    up to the finite-difference error of the Hessian-vector products.
    """
    rng = np.random.default_rng(seed)
    mask = _segment_mask(ctx, segment)

    def matvec(v):
        hv = hvp(ctx, v)
        return hv * mask if mask is not None else hv

    dim = ctx.n if mask is None else int(round(float(mask.sum())))
    steps = min(max_iters, dim)
    q = _random_unit(ctx.n, rng, mask)
    basis = [q]
    alphas: list[float] = []
    betas: list[float] = []
    theta = 0.0
    for it in range(1, steps + 1):
        w = matvec(q)
        alphas.append(float(q @ w))
        for b in basis:  # full reorthogonalization, twice to kill roundoff drift
            w = w - (b @ w) * b
        for b in basis:
            w = w - (b @ w) * b
        beta = float(np.linalg.norm(w))
        tri = np.diag(alphas)
        if betas:
            tri += np.diag(betas, 1) + np.diag(betas, -1)
        vals, vecs = np.linalg.eigh(tri)
        theta = float(vals[-1])
        if trace is not None:
            trace.append(theta)
        scale = max(abs(theta), 1e-12)
        if beta * abs(float(vecs[-1, -1])) <= tol * scale:
            return SharpnessResult(theta, it, True)
        if beta <= 1e-12 * max(1.0, scale):
            return SharpnessResult(theta, it, True)  # invariant subspace, exactly
        q = w / beta
        basis.append(q)
        betas.append(beta)
    return SharpnessResult(theta, steps, steps == dim)


def component_sharpness(ctx: HvpContext, segment) -> SharpnessResult:
    """lambda_max of the principal submatrix for one named parameter block."""
    return lambda_max(ctx, segment=segment)


# ---------------------------------------------------------------------------
# channel alignment


MASS_FLOOR = 1e-10


@dataclass
class ChannelHistogram:
    """One channel's probability masses over shared uniform bin edges."""

    edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.edges.ndim != 1 or self.masses.ndim != 1 or len(self.edges) != len(self.masses) + 1:
            raise DimensionError(
                f"histogram needs n+1 edges for n masses, got {self.edges.shape}/{self.masses.shape}"
            )
        if abs(float(self.masses.sum()) - 1.0) > 1e-9:
            raise ContractError(f"histogram masses sum to {self.masses.sum()}, expected 1")


def channel_histograms(channels: list[np.ndarray], bins: int = 64) -> list[ChannelHistogram]:
    """Histograms over uniform bins spanning the pooled min/max of all inputs."""
    if not channels:
        raise DimensionError("no channels to histogram")
    flat = [np.asarray(c, dtype=np.float64).ravel() for c in channels]
    for c in flat:
        if c.size == 0:
            raise DimensionError("empty channel")
        if not np.isfinite(c).all():
            raise ContractError("non-finite channel values")
    lo = min(float(c.min()) for c in flat)
    hi = max(float(c.max()) for c in flat)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    out = []
    for c in flat:
        counts, _ = np.histogram(c, bins=edges)
        out.append(ChannelHistogram(edges, counts / c.size))
    return out


def kl_alignment(a: ChannelHistogram, b: ChannelHistogram) -> float:
    """Symmetrized KL divergence 0.5*(KL(a||b) + KL(b||a)) with floored masses."""
    if a.edges.shape != b.edges.shape or not np.allclose(a.edges, b.edges, rtol=0, atol=0):
        raise ContractError("histograms must share identical bin edges")
    p = np.maximum(a.masses, MASS_FLOOR)
    p = p / p.sum()
    q = np.maximum(b.masses, MASS_FLOOR)
    q = q / q.sum()
    kl_pq = float(np.sum(p * np.log(p / q)))
    kl_qp = float(np.sum(q * np.log(q / p)))
    return 0.5 * (kl_pq + kl_qp)
