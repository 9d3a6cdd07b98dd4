"""Stratified and inverse-CDF importance sampling along rays.

Everything is batched: ``ts`` has shape (..., K) with one row per ray.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensorio import Rng

log = logging.getLogger(__name__)

PDF_FLOOR = 1e-5


@dataclass
class RaySamples:
    ts: np.ndarray  # (..., K), sorted along the last axis
    near: np.ndarray | float
    far: np.ndarray | float

    @property
    def deltas(self) -> np.ndarray:
        far = np.asarray(self.far, dtype=self.ts.dtype)[..., None]
        if self.ts.shape[-1] == 0:
            return self.ts.copy()
        nxt = np.concatenate([self.ts[..., 1:], np.broadcast_to(far, self.ts[..., :1].shape)], axis=-1)
        return nxt - self.ts

    @property
    def K(self) -> int:
        return self.ts.shape[-1]


def _draws(rng, shape, u):
    if u is not None:
        return np.asarray(u, dtype=np.float64).reshape(shape)
    if rng is None:
        return None
    return rng.uniform(int(np.prod(shape))).reshape(shape)


def stratified(near, far, K: int, rng: Rng | None = None, *, shape=(), u=None) -> RaySamples:
    """One sample per equal-width bin of [near, far].

    Jitter comes from ``u`` (shape (*shape, K), values in [0, 1)) or ``rng``;
    with neither, samples sit at bin midpoints.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    near_a = np.asarray(near, dtype=np.float64)
    far_a = np.asarray(far, dtype=np.float64)
    shape = tuple(np.broadcast_shapes(near_a.shape, far_a.shape, tuple(shape)))
    jit = _draws(rng, shape + (K,), u)
    if jit is None:
        jit = np.full(shape + (K,), 0.5)
    edges = np.arange(K, dtype=np.float64)
    span = (far_a - near_a)[..., None]
    ts = near_a[..., None] + span * (edges + jit) / K
    ts = np.minimum(ts, np.nextafter(far_a, near_a)[..., None]) if np.any(jit >= 1) else ts
    return RaySamples(ts, near_a, far_a)


def bin_edges(bins: RaySamples) -> np.ndarray:
    """Interval edges [near, midpoints..., far] with shape (..., K + 1)."""
    ts = bins.ts
    near = np.broadcast_to(np.asarray(bins.near, dtype=ts.dtype)[..., None], ts[..., :1].shape)
    far = np.broadcast_to(np.asarray(bins.far, dtype=ts.dtype)[..., None], ts[..., :1].shape)
    mids = 0.5 * (ts[..., 1:] + ts[..., :-1])
    return np.concatenate([near, mids, far], axis=-1)


def importance(bins: RaySamples, weights, M: int, rng: Rng | None = None, *, u=None) -> RaySamples:
    """Draw M sorted samples from the piecewise-constant PDF given by ``weights``.

    Bin j spans the interval between neighbouring sample midpoints (the first
    and last bins extend to near/far). Rays whose weights are all zero fall
    back to stratified sampling.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    batch = w.shape[:-1]
    draws = _draws(rng, batch + (M,), u)
    if draws is None:
        raise ValueError("importance sampling needs rng or u")
    draws = np.sort(draws, axis=-1)

    edges = bin_edges(bins)
    pdf = w + PDF_FLOOR
    pdf = pdf / pdf.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros(batch + (1,)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[..., -1] = 1.0

    K = w.shape[-1]
    flat_cdf = cdf.reshape(-1, K + 1)
    flat_u = draws.reshape(-1, M)
    # searchsorted per ray via offsetting each row into its own band
    offs = np.arange(flat_cdf.shape[0])[:, None] * 2.0
    j = np.searchsorted((flat_cdf + offs).ravel(), (flat_u + offs).ravel(), side="right").reshape(flat_u.shape)
    j = j - np.arange(flat_cdf.shape[0])[:, None] * (K + 1) - 1
    j = np.clip(j, 0, K - 1).reshape(draws.shape)

    c0 = np.take_along_axis(cdf, j, axis=-1)
    c1 = np.take_along_axis(cdf, j + 1, axis=-1)
    e0 = np.take_along_axis(edges, j, axis=-1)
    e1 = np.take_along_axis(edges, j + 1, axis=-1)
    frac = np.where(c1 > c0, (draws - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.0)
    ts = e0 + np.clip(frac, 0.0, 1.0) * (e1 - e0)

    dead = w.sum(axis=-1) <= 0
    if np.any(dead):
        log.info("importance(): %d ray(s) with all-zero weights, falling back to stratified", int(dead.sum()))
        near = np.broadcast_to(np.asarray(bins.near, dtype=np.float64), batch)
        far = np.broadcast_to(np.asarray(bins.far, dtype=np.float64), batch)
        strat = stratified(near, far, M, u=draws)
        ts = np.where(dead[..., None], strat.ts, ts)
    ts = np.sort(ts, axis=-1)
    return RaySamples(ts, bins.near, bins.far)


def merge(a: RaySamples, b: RaySamples) -> RaySamples:
    if a.K == 0:
        return RaySamples(b.ts.copy(), b.near, b.far)
    if b.K == 0:
        return RaySamples(a.ts.copy(), a.near, a.far)
    ts = np.sort(np.concatenate([a.ts, b.ts], axis=-1), axis=-1)
    return RaySamples(ts, a.near, a.far)
