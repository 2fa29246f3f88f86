"""Conditional density estimation from generated samples.

Sample clouds live in (gap, mark) space. Every sample carries one scalar
bandwidth shared by all coordinates; coordinates are divided by a
per-dimension scale first, and the density is Jacobian-corrected, so the
effective kernel width in dimension ``d`` is ``scales[d] * bandwidths[j]``.
The time coordinate is reflected at 0; marks use plain Gaussians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad

__all__ = [
    "BANDWIDTH_FLOOR", "PDF_FLOOR", "SampleCloud", "default_k", "knn_bandwidths", "knn_distances_batch",
    "self_tuned_bandwidths", "cond_pdf_kde", "cdf_time_kde", "log_density_nodes",
]

BANDWIDTH_FLOOR = 1e-4
PDF_FLOOR = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_k(L: int) -> int:
    return max(1, math.ceil(math.sqrt(L)))


def _as_points(samples) -> np.ndarray:
    a = np.asarray(samples, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _kth_1d(X: np.ndarray, k: int) -> np.ndarray:
    # exact: the k nearest others of a point lie within k positions of it in sorted order
    n, L = X.shape
    order = np.argsort(X, axis=1, kind="stable")
    xs = np.take_along_axis(X, order, axis=1)
    idx = np.arange(L)[:, None] + np.arange(-k, k + 1)[None, :]
    valid = (idx >= 0) & (idx < L)
    d = np.abs(xs[:, np.clip(idx, 0, L - 1)] - xs[:, :, None])
    d[:, ~valid] = np.inf
    kth = np.partition(d, k, axis=2)[:, :, k]
    out = np.empty((n, L))
    np.put_along_axis(out, order, kth, axis=1)
    return out


def knn_distances_batch(points: np.ndarray, k: int, chunk_bytes: int = 32 << 20) -> np.ndarray:
    """k-th nearest-other-sample Euclidean distance for clouds of shape (n, L, D)."""
    n, L, D = points.shape
    if k >= L:
        raise ValueError(f"k={k} must be smaller than the number of samples L={L}")
    if D == 1:
        return _kth_1d(points[:, :, 0], k)
    out = np.empty((n, L))
    step = max(1, chunk_bytes // (8 * L * L * D))
    for s in range(0, n, step):
        P = points[s:s + step]
        d2 = np.zeros((P.shape[0], L, L))
        for dim in range(D):
            diff = P[:, :, None, dim] - P[:, None, :, dim]
            d2 += diff * diff
        out[s:s + step] = np.sqrt(np.partition(d2, k, axis=2)[:, :, k])
    return out


def knn_bandwidths(samples, k: int, floor: float = BANDWIDTH_FLOOR) -> np.ndarray:
    """Per-sample distance to the k-th nearest *other* sample, floored.

    ``samples`` is (L,) for time-only clouds or (L, D) jointly over (gap, marks).
    """
    pts = _as_points(samples)
    if k < 1 or k >= pts.shape[0]:
        raise ValueError(f"k={k} must satisfy 1 <= k < L={pts.shape[0]}")
    return np.maximum(knn_distances_batch(pts[None], k)[0], floor)


def _pilot(L: int, D: int) -> float:
    # normal-reference (Silverman) bandwidth for unit-scale data in D dims
    return (4.0 / (D + 2.0)) ** (1.0 / (D + 4.0)) * L ** (-1.0 / (D + 4.0))


def self_tuned_bandwidths(rho: np.ndarray, D: int, floor: float = BANDWIDTH_FLOOR) -> np.ndarray:
    """Square-root-law bandwidths from kNN distances ``rho`` (last axis = samples).

    ``sigma_j = h * sqrt(rho_j / geomean(rho))`` with the normal-reference
    pilot ``h``: small for samples in dense regions, large for isolated ones.
    """
    rho = np.maximum(rho, floor)
    L = rho.shape[-1]
    geo = np.exp(np.mean(np.log(rho), axis=-1, keepdims=True))
    return np.maximum(_pilot(L, D) * np.sqrt(rho / geo), floor)


def cloud_scales(points: np.ndarray) -> np.ndarray:
    """Per-dimension std of clouds (n, L, D) -> (n, D); degenerate dims get 1."""
    if points.shape[1] < 2:
        return np.ones((points.shape[0], points.shape[2]))
    s = points.std(axis=1)
    return np.where(s > 0, s, 1.0)


def batch_bandwidths(points: np.ndarray, k: int | None = None, rule: str = "adaptive",
                     standardize: bool = True, floor: float = BANDWIDTH_FLOOR):
    """Bandwidths and scales for a batch of clouds of shape (n, L, D).

    Returns ``(bandwidths (n, L), scales (n, D))``.
    """
    n, L, D = points.shape
    k = default_k(L) if k is None else k
    scales = cloud_scales(points) if standardize else np.ones((n, D))
    if L < 2:
        return np.ones((n, L)), scales
    k = min(k, L - 1)
    rho = np.maximum(knn_distances_batch(points / scales[:, None, :], k), floor)
    if rule == "knn":
        return rho, scales
    if rule == "adaptive":
        return self_tuned_bandwidths(rho, D, floor), scales
    raise ValueError(f"unknown bandwidth rule {rule!r}")


@dataclass(frozen=True)
class SampleCloud:
    """L generated (gap, mark) samples with per-sample bandwidths."""

    dts: np.ndarray
    marks: np.ndarray
    bandwidths: np.ndarray
    scales: np.ndarray
    k: int

    @classmethod
    def from_samples(cls, dts, marks=None, k: int | None = None, rule: str = "adaptive",
                     standardize: bool = True, bandwidths=None):
        dts = np.asarray(dts, float).reshape(-1)
        L = dts.size
        marks = np.zeros((L, 0)) if marks is None else np.asarray(marks, float).reshape(L, -1)
        pts = np.concatenate([dts[:, None], marks], axis=1)
        k = default_k(L) if k is None else k
        if bandwidths is not None:
            bw = np.broadcast_to(np.asarray(bandwidths, float), (L,)).copy()
            scales = np.ones(pts.shape[1])
        else:
            bw, scales = batch_bandwidths(pts[None], k, rule, standardize)
            bw, scales = bw[0], scales[0]
        return cls(dts, marks, bw, scales, k)

    @property
    def size(self) -> int:
        return self.dts.size

    @property
    def mark_dim(self) -> int:
        return self.marks.shape[1]

    def scaled(self, factor: float) -> "SampleCloud":
        return SampleCloud(self.dts, self.marks, self.bandwidths * factor, self.scales, self.k)


def cond_pdf_kde(dt, cloud: SampleCloud, mark=None, reflect: bool = True):
    """Reflected-in-time Gaussian product KDE at query gap(s) ``dt``.

    ``dt`` may be a scalar or shape (Q,); ``mark`` is (d,) or (Q, d).
    """
    scalar = np.ndim(dt) == 0
    q = np.atleast_1d(np.asarray(dt, float))
    if np.any(q < 0):
        raise ValueError("cond_pdf_kde: query gap must be nonnegative")
    d = cloud.mark_dim
    qm = np.zeros((q.size, 0)) if d == 0 else np.broadcast_to(np.asarray(mark, float).reshape(-1, d), (q.size, d))
    w0 = cloud.scales[0] * cloud.bandwidths
    u = (q[:, None] - cloud.dts[None, :]) / w0
    k = np.exp(-0.5 * u * u)
    if reflect:
        v = (q[:, None] + cloud.dts[None, :]) / w0
        k = k + np.exp(-0.5 * v * v)
    k = k * (_INV_SQRT_2PI / w0)
    for j in range(d):
        wj = cloud.scales[1 + j] * cloud.bandwidths
        u = (qm[:, j:j + 1] - cloud.marks[None, :, j]) / wj
        k = k * (np.exp(-0.5 * u * u) * (_INV_SQRT_2PI / wj))
    out = k.mean(axis=1)
    return float(out[0]) if scalar else out


def cdf_time_kde(t, cloud: SampleCloud):
    """Closed-form time-marginal CDF of the reflected mixture at gap(s) ``t``."""
    scalar = np.ndim(t) == 0
    q = np.atleast_1d(np.asarray(t, float))
    if np.any(q < 0):
        raise ValueError("cdf_time_kde: query gap must be nonnegative")
    w = cloud.scales[0] * cloud.bandwidths
    mu = cloud.dts[None, :]
    F = (ndtr((q[:, None] - mu) / w) - ndtr(-mu / w) + ndtr((q[:, None] + mu) / w) - ndtr(mu / w)).mean(axis=1)
    F = np.clip(F, 0.0, 1.0)
    return float(F[0]) if scalar else F


def log_density_nodes(obs: np.ndarray, sample_cols, widths: np.ndarray, reflect: bool = True,
                      pdf_floor: float = PDF_FLOOR):
    """Differentiable log KDE density of observations under their clouds.

    ``obs`` is (n, D); ``sample_cols`` is a list of D nodes of shape (n, L)
    holding the generated coordinates; ``widths`` is a constant (n, L, D)
    array of effective kernel widths. Returns a node of shape (n,) holding
    ``log(max(f, pdf_floor))``.
    """
    n, L, D = widths.shape
    dens = None
    for d in range(D):
        w = widths[:, :, d]
        inv = 1.0 / w
        o = np.broadcast_to(obs[:, d:d + 1], (n, L))
        u = ad.mul(ad.sub(o, sample_cols[d]), inv)
        k = ad.exp(ad.scale(ad.square(u), -0.5))
        if d == 0 and reflect:
            v = ad.mul(ad.add(o, sample_cols[d]), inv)
            k = ad.add(k, ad.exp(ad.scale(ad.square(v), -0.5)))
        k = ad.mul(k, inv * _INV_SQRT_2PI)
        dens = k if dens is None else ad.mul(dens, k)
    return ad.log(ad.clamp_min(ad.mean(dens, axis=1), pdf_floor))
