"""Online adaptation of the policy posterior by particle weighting.

Every ``u`` steps particles ``(W_s, z_s)`` are drawn from the current
posterior, weighted by the likelihood of the last ``u`` observed transitions
(one-step prior updates conditioned on the observed states, with extra
measurement noise ``sigma_v``), and a factorised Gaussian is refitted to the
weighted particles.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .brnn import propagate
from .dynamics import DynamicsSpec
from .math_core import (
    ParticleDegeneracyError,
    effective_sample_size,
    log_mean_exp,
    normalized_weights,
    weighted_moments,
)
from .policy import VariationalPosterior, WeightSample, sample_posterior

log = logging.getLogger(__name__)


class ModelDataMismatch(ParticleDegeneracyError):
    """Every particle assigns zero likelihood to the observations."""


@dataclass
class AdaptConfig:
    u: int = 30
    M: int = 1000
    sigma_v: np.ndarray | None = None  # defaults to the dynamics' process noise
    variance_floor: float = 1e-8

    def __post_init__(self):
        if self.u < 1 or self.M < 2 or not self.variance_floor > 0:
            raise ValueError("need u >= 1, M >= 2 and a positive variance floor")
        if self.sigma_v is not None:
            sv = np.atleast_2d(np.asarray(self.sigma_v, dtype=float))
            if np.linalg.eigvalsh(sv).min() < -1e-12:
                raise ValueError("sigma_v must be positive semi-definite")
            self.sigma_v = sv

    def measurement_cov(self, dyn: DynamicsSpec) -> np.ndarray:
        return dyn.sigma_omega if self.sigma_v is None else self.sigma_v


@dataclass
class ParticleSet:
    particles: WeightSample  # batched, leading axis M
    log_weights: np.ndarray

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if len(self.particles) != self.log_weights.shape[0]:
            raise ValueError("one log weight per particle required")
        if not np.any(np.isfinite(self.log_weights)):
            raise ModelDataMismatch("no particle has a finite log weight")

    @property
    def ess(self) -> float:
        return effective_sample_size(self.log_weights)


def window_loglik(particles: WeightSample, states, ego, m: int, dyn: DynamicsSpec, sigma_eps,
                  norm, sigma_v) -> np.ndarray:
    """Sum over the window of per-step log-likelihoods, one value per particle.

    ``states`` holds ``m + u + 1`` observed states and ``ego`` the ``u``
    leader actions between the last ``u + 1`` of them.
    """
    states = np.asarray(states, dtype=float)
    ego = np.asarray(ego, dtype=float).reshape(states.shape[0] - m - 1, -1)
    u = states.shape[0] - m - 1
    if u < 1:
        raise ValueError("window must contain at least m + 2 states")
    with torch.no_grad():
        p = propagate(particles, states[None, : m + 1], ego[None], dyn, sigma_eps, norm,
                      future=states[None, m + 1 :], teacher_forcing=True, extra_cov=sigma_v)
    return p.loglik[:, 0].sum(dim=1).numpy()


def weigh_particles(q_prev: VariationalPosterior, states, ego, dyn: DynamicsSpec, cfg: AdaptConfig,
                    rng: np.random.Generator, m: int | None = None) -> ParticleSet:
    """Draw ``cfg.M`` particles from ``q_prev`` and weight them on an observed window."""
    m = q_prev.normalizer.history_len - 1 if m is None else m
    with torch.no_grad():
        particles = sample_posterior(q_prev, rng, cfg.M)
    lw = window_loglik(particles, states, ego, m, dyn, q_prev.sigma_eps, q_prev.normalizer,
                       cfg.measurement_cov(dyn))
    lw = np.where(np.isnan(lw), -np.inf, lw)
    return ParticleSet(particles, lw)


def refit(ps: ParticleSet, q_template: VariationalPosterior, variance_floor: float = 1e-8) -> VariationalPosterior:
    """Weighted Gaussian moments of the particles, variances floored.

    Everything other than the weight/``z`` moments (priors, action noise,
    normaliser, ``n_train``) is copied from ``q_template``. When the
    effective sample size is below 2 the result carries
    ``meta["degenerate"] = True``.
    """
    w = normalized_weights(ps.log_weights)
    flat = ps.particles.flat().detach().numpy()
    mean, var = weighted_moments(flat, w)
    var = np.maximum(var, variance_floor)
    q = q_template.with_flat_moments(mean, var)
    ess = float(1.0 / np.sum(w**2))
    q.meta.update({"ess": ess, "degenerate": ess < 2.0})
    if ess < 2.0:
        log.warning("particle degeneracy: effective sample size %.3f", ess)
    return q


@dataclass
class AdaptationStep:
    update_index: int
    time_index: int
    ess: float
    mean_log_weight: float
    predictive_loglik_before: float
    predictive_loglik_after: float


@dataclass
class AdaptationSession:
    posteriors: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["update_index", "effective_sample_size", "mean_log_weight",
                        "predictive_loglik_before", "predictive_loglik_after"])
            for s in self.steps:
                w.writerow([s.update_index, repr(s.ess), repr(s.mean_log_weight),
                            repr(s.predictive_loglik_before), repr(s.predictive_loglik_after)])


def adapt_once(q: VariationalPosterior, states, ego, dyn: DynamicsSpec, cfg: AdaptConfig,
               rng: np.random.Generator, m: int | None = None):
    """One weigh-and-refit update; returns ``(q_new, ParticleSet, diagnostics)``."""
    m = q.normalizer.history_len - 1 if m is None else m
    ps = weigh_particles(q, states, ego, dyn, cfg, rng, m)
    q_new = refit(ps, q, cfg.variance_floor)
    finite = ps.log_weights[np.isfinite(ps.log_weights)]
    with torch.no_grad():
        after = sample_posterior(q_new, rng, cfg.M)
    lw_after = window_loglik(after, states, ego, m, dyn, q_new.sigma_eps, q_new.normalizer,
                             cfg.measurement_cov(dyn))
    diag = {
        "ess": ps.ess,
        "mean_log_weight": float(finite.mean()),
        "before": float(log_mean_exp(ps.log_weights)),
        "after": float(log_mean_exp(lw_after)),
    }
    return q_new, ps, diag


def adapt_stream(q0: VariationalPosterior, states, ego, dyn: DynamicsSpec, cfg: AdaptConfig,
                 rng: np.random.Generator) -> AdaptationSession:
    """Run updates every ``cfg.u`` steps along one observed stream.

    ``states`` is ``(T, dx)``; ``ego[t]`` is the leader action between
    frames ``t`` and ``t + 1``. The first update happens once ``m + u + 1``
    states are available.
    """
    states = np.asarray(states, dtype=float)
    ego = np.asarray(ego, dtype=float).reshape(states.shape[0], -1) if np.size(ego) else \
        np.zeros((states.shape[0], 0))
    m = q0.normalizer.history_len - 1
    if states.shape[0] < m + cfg.u + 1:
        raise ValueError("stream too short for a single update window")
    session = AdaptationSession([q0])
    q = q0
    for idx, k in enumerate(range(m + cfg.u, states.shape[0], cfg.u)):
        win = states[k - m - cfg.u : k + 1]
        q, _, d = adapt_once(q, win, ego[k - cfg.u : k], dyn, cfg, rng, m)
        session.posteriors.append(q)
        session.steps.append(AdaptationStep(idx, k, d["ess"], d["mean_log_weight"], d["before"], d["after"]))
    return session
