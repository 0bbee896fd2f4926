"""Gaussian densities, sampling, weighted moments and log-space reductions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ParticleDegeneracyError(ValueError):
    """All particle weights vanished."""


@dataclass(frozen=True)
class GaussianDiag:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if mean.shape != var.shape:
            raise ValueError(f"mean shape {mean.shape} != var shape {var.shape}")
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianFull:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"cov shape {cov.shape} incompatible with mean dim {d}")
        scale = max(np.abs(cov).max(), 1e-300)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10 * max(np.trace(cov), 1e-300):
            raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def cholesky_jitter(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor of ``cov`` with a single jitter retry.

    Returns the factor and whether jitter (``1e-9 * trace / dim`` on the
    diagonal) was needed.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return np.linalg.cholesky(cov), False
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    jitter = 1e-9 * max(np.trace(cov), 0.0) / d
    if jitter <= 0.0:
        raise ValueError("covariance is not positive definite")
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(d)), True
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive semi-definite") from exc


def log_pdf(x, g: GaussianFull, with_flag: bool = False):
    """Exact log density of ``x`` under ``g``.

    With ``with_flag=True`` a ``(value, jittered)`` pair is returned.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != g.mean.shape:
        raise ValueError(f"x dim {x.shape} != mean dim {g.mean.shape}")
    chol, jittered = cholesky_jitter(g.cov)
    r = np.linalg.solve(chol, x - g.mean)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    value = -0.5 * (g.dim * LOG_2PI + logdet + r @ r)
    if with_flag:
        return float(value), jittered
    return float(value)


def weighted_moments(samples, weights):
    """Weighted mean and population variance along the first axis.

    ``samples`` may be scalars or arrays stacked on axis 0.
    """
    x = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ValueError("need one weight per sample")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ParticleDegeneracyError("all weights are zero")
    w = w.reshape((-1,) + (1,) * (x.ndim - 1))
    mean = (w * x).sum(axis=0) / total
    var = (w * (x - mean) ** 2).sum(axis=0) / total
    return mean, var


def sample_gaussian(g, rng: np.random.Generator) -> np.ndarray:
    """One draw ``mean + scale @ u`` with ``u`` standard normal."""
    u = rng.standard_normal(g.dim)
    if isinstance(g, GaussianDiag):
        return g.mean + np.sqrt(g.var) * u
    chol, _ = cholesky_jitter(g.cov) if np.any(g.cov) else (np.zeros_like(g.cov), False)
    return g.mean + chol @ u


def log_sum_exp(values, axis=None):
    """``log(sum(exp(values)))`` with the maximum shifted out."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    vmax = np.max(v, axis=axis, keepdims=True)
    # all -inf along a slice: keep -inf instead of nan
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True)) + vmax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_mean_exp(values, axis=None):
    v = np.asarray(values, dtype=float)
    n = v.size if axis is None else v.shape[axis]
    return log_sum_exp(v, axis=axis) - math.log(n)


def normalized_weights(log_weights) -> np.ndarray:
    """Exponentiate log weights after a max shift and normalise to sum 1."""
    lw = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(lw)):
        raise ParticleDegeneracyError("no finite log weight")
    return np.exp(lw - log_sum_exp(lw))


def effective_sample_size(log_weights) -> float:
    w = normalized_weights(log_weights)
    return float(1.0 / np.sum(w**2))
