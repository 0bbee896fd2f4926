"""Trajectory log-likelihood estimates, histogram KL and horizon summaries."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .brnn import sample_loglik
from .data import Dataset
from .math_core import log_mean_exp


@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 50
    expand: float = 0.01  # fraction of the pooled range added on each side
    epsilon: float = 1e-9  # mass added to every bin before normalising

    def __post_init__(self):
        if self.bins < 2 or not self.epsilon > 0:
            raise ValueError("need bins >= 2 and epsilon > 0")

    def edges(self, *sample_sets) -> np.ndarray:
        pooled = np.concatenate([np.ravel(s) for s in sample_sets])
        lo, hi = float(pooled.min()), float(pooled.max())
        pad = self.expand * (hi - lo) if hi > lo else max(abs(lo), 1.0) * self.expand
        return np.linspace(lo - pad, hi + pad, self.bins + 1)


def normalized_histogram(samples, edges, epsilon: float = 0.0) -> np.ndarray:
    """Bin masses summing to one after adding ``epsilon`` to every bin."""
    counts, _ = np.histogram(np.ravel(samples), bins=edges)
    mass = counts / max(counts.sum(), 1) + epsilon
    return mass / mass.sum()


def histogram_density(samples, edges) -> np.ndarray:
    """Density per bin (mass divided by bin width), for plotting."""
    counts, _ = np.histogram(np.ravel(samples), bins=edges)
    return counts / max(counts.sum(), 1) / np.diff(edges)


def kl_from_histograms(actual, predicted, spec: HistogramSpec = HistogramSpec()) -> float:
    """``KL(actual || predicted)`` between smoothed histograms on shared bins."""
    actual, predicted = np.ravel(actual), np.ravel(predicted)
    if actual.size == 0 or predicted.size == 0:
        raise ValueError("both sample sets must be non-empty")
    edges = spec.edges(actual, predicted)
    p = normalized_histogram(actual, edges, spec.epsilon)
    q = normalized_histogram(predicted, edges, spec.epsilon)
    return float(np.sum(p * np.log(p / q)))


def per_step_kl(actual, predicted, spec: HistogramSpec = HistogramSpec()) -> np.ndarray:
    """KL per time step; inputs are ``(n, h)`` arrays of a scalar state component."""
    actual, predicted = np.asarray(actual), np.asarray(predicted)
    return np.array([kl_from_histograms(actual[:, i], predicted[:, i], spec) for i in range(actual.shape[1])])


def aggregate_loglik(per_sample_step) -> tuple[np.ndarray, float]:
    """Log of the sample-averaged trajectory density, per step and in total.

    ``per_sample_step`` is ``(S, h)`` for one record. The per-step series is
    the log-mean over samples of the cumulative likelihood, differenced, so
    that it sums to the total.
    """
    ll = np.asarray(per_sample_step, dtype=float)
    cum = np.cumsum(ll, axis=1)
    cum_est = log_mean_exp(cum, axis=0)
    per_step = np.diff(np.concatenate([[0.0], cum_est]))
    return per_step, float(cum_est[-1])


def estimate_log_likelihood(q, data: Dataset, dyn, S: int = 100, rng=None,
                            teacher_forcing: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Sampled-trajectory likelihood of every record (plain density averaging).

    Returns ``(per_step (N, h), total (N,))``.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    ll = sample_loglik(q, data, dyn, S, rng, teacher_forcing=teacher_forcing)
    per_step = np.empty((len(data), data.h))
    total = np.empty(len(data))
    for n in range(len(data)):
        per_step[n], total[n] = aggregate_loglik(ll[:, n])
    return per_step, total


def split_horizon_summary(per_step_loglik, split: int = 15):
    """Mean and std across trajectories of the per-step average log-likelihood
    over the first ``split`` steps and over the remaining steps.

    Returns ``((mean1, std1), (mean2, std2))``; the second pair is ``nan`` when
    the horizon equals ``split``.
    """
    ll = np.atleast_2d(np.asarray(per_step_loglik, dtype=float))
    if ll.shape[1] < split:
        raise ValueError(f"horizon {ll.shape[1]} shorter than split {split}")
    first = ll[:, :split].mean(axis=1)
    out = [(float(first.mean()), float(first.std()))]
    if ll.shape[1] > split:
        second = ll[:, split:].mean(axis=1)
        out.append((float(second.mean()), float(second.std())))
    else:
        out.append((math.nan, math.nan))
    return tuple(out)


def format_summary(summary) -> tuple[str, str]:
    return tuple(f"{m:.2f}±{s:.2f}" for m, s in summary)


def write_loglik_csv(path, rows) -> None:
    """``rows``: iterable of ``(model, trajectory_id, step, loglik)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "trajectory_id", "step", "loglik"])
        for model, tid, step, ll in rows:
            w.writerow([model, int(tid), int(step), repr(float(ll))])


def write_histogram_csv(path, edges, density) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "density"])
        for lo, hi, d in zip(edges[:-1], edges[1:], density):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(d))])


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def bimodality_dip(masses, min_peak_fraction: float = 0.2) -> float:
    """Largest relative dip between two local maxima of a histogram.

    Only local maxima holding at least ``min_peak_fraction`` of the largest
    bin count as modes, so isolated tail bins are ignored. For every pair of
    modes the minimum between them is compared with the smaller mode; the
    result is ``1 - min / smaller_mode`` for the deepest pair, or 0 when the
    histogram has a single mode.
    """
    h = np.asarray(masses, dtype=float)
    n = len(h)
    floor = min_peak_fraction * h.max() if n else 0.0
    peaks = [
        i for i in range(n)
        if (i == 0 or h[i] > h[i - 1]) and (i == n - 1 or h[i] >= h[i + 1]) and h[i] >= floor and h[i] > 0
    ]
    best = 0.0
    for a in range(len(peaks)):
        for b in range(a + 1, len(peaks)):
            i, j = peaks[a], peaks[b]
            best = max(best, 1.0 - h[i : j + 1].min() / min(h[i], h[j]))
    return best
