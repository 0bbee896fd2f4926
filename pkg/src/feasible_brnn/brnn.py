"""Recurrent composition of the policy network with a known dynamics model.

Every step maps the current history window to a mean action, pushes a
Gaussian belief through the dynamics (Kalman prior update, exact for the
linear models here) and advances a sampled state path that conditions the
next step. One weight sample drives a whole trajectory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import Dataset, TrajectoryRecord
from .dynamics import DynamicsSpec
from .policy import (
    DTYPE,
    FeatureNormalizer,
    VariationalPosterior,
    WeightSample,
    as_tensor,
    forward,
    sample_posterior,
)

LOG_2PI = math.log(2.0 * math.pi)


class BeliefCovarianceError(ValueError):
    """A propagated belief covariance is not positive definite."""


@dataclass
class PredictionRequest:
    history: np.ndarray
    ego_actions: np.ndarray
    horizon: int

    def __post_init__(self):
        self.history = np.atleast_2d(np.asarray(self.history, dtype=float))
        ego = np.asarray(self.ego_actions, dtype=float)
        self.ego_actions = ego.reshape(self.horizon, -1) if ego.size else np.zeros((self.horizon, 0))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @classmethod
    def from_record(cls, record: TrajectoryRecord) -> "PredictionRequest":
        return cls(record.history, record.ego, record.h)


@dataclass
class PerStepBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class SampledTrajectory:
    states: np.ndarray
    weights: WeightSample
    eps: np.ndarray
    omega: np.ndarray
    actions: np.ndarray


@dataclass
class Propagation:
    """Tensors from one batched pass; axes are ``(M, B, step, ...)``."""

    loglik: torch.Tensor | None
    states: torch.Tensor
    actions: torch.Tensor
    means: torch.Tensor
    cov: torch.Tensor


def belief_cov(dyn: DynamicsSpec, sigma_eps, sigma_omega=None, extra_cov=None, jac_ap=None):
    """``J_ap sigma_eps J_ap^T + sigma_omega (+ extra_cov)``."""
    J = as_tensor(dyn.jac_ap() if jac_ap is None else jac_ap)
    s_omega = as_tensor(dyn.sigma_omega if sigma_omega is None else sigma_omega)
    cov = J @ as_tensor(sigma_eps) @ J.transpose(-1, -2) + s_omega
    if extra_cov is not None:
        cov = cov + as_tensor(extra_cov)
    return cov


def gaussian_logpdf(x, mean, cov) -> torch.Tensor:
    """Batched multivariate normal log density; ``cov`` broadcasts over leading axes."""
    chol, info = torch.linalg.cholesky_ex(cov)
    if torch.any(info != 0):
        raise BeliefCovarianceError("belief covariance is not positive definite")
    r = x - mean
    if chol.dim() == 2:
        # shared covariance: whiten with one triangular inverse
        eye = torch.eye(chol.shape[0], dtype=chol.dtype)
        y = r @ torch.linalg.solve_triangular(chol, eye, upper=False).T
    else:
        y = torch.linalg.solve_triangular(chol, r.unsqueeze(-1), upper=False).squeeze(-1)
    logdet = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
    d = x.shape[-1]
    return -0.5 * (d * LOG_2PI + logdet + (y**2).sum(-1))


def _noise_factor(cov) -> torch.Tensor:
    cov = as_tensor(cov)
    if not torch.any(cov != 0):
        return torch.zeros_like(cov)
    return torch.linalg.cholesky(cov)


def propagate(
    ws: WeightSample,
    history,
    ego,
    dyn: DynamicsSpec,
    sigma_eps,
    norm: FeatureNormalizer | None,
    eps_u=None,
    omega_u=None,
    future=None,
    teacher_forcing: bool = False,
    extra_cov=None,
    sigma_omega=None,
    on_step=None,
) -> Propagation:
    """Unroll the policy/dynamics recurrence for a batch of records.

    Parameters
    ----------
    ws : batched weight sample, leading axis ``M``
    history : ``(B, m + 1, dx)`` conditioning windows
    ego : ``(B, h, dq)`` leader actions
    sigma_eps : ``(da, da)`` action-noise covariance (may require grad)
    eps_u, omega_u : standard-normal draws ``(M, B, h, da)``, ``(M, B, h, dx)``;
        ``None`` means zero noise
    future : ``(B, h, dx)`` observed states; when given, per-step
        log-likelihoods of the observations under the propagated beliefs are
        returned
    teacher_forcing : condition each step on the observed instead of the
        sampled path
    extra_cov : added to every belief covariance (adaptation noise)
    on_step : optional callback ``on_step(i, ws)`` for instrumentation
    """
    M = len(ws)
    hist = as_tensor(history)
    ego = as_tensor(ego)
    B, W1, dx = hist.shape
    h = ego.shape[1]
    if future is not None:
        future = as_tensor(future)
        if future.shape[:2] != (B, h):
            raise ValueError("future states do not match ego actions")
    if teacher_forcing and future is None:
        raise ValueError("teacher forcing needs observed future states")
    sigma_eps = as_tensor(sigma_eps)
    s_omega = as_tensor(dyn.sigma_omega if sigma_omega is None else sigma_omega)
    # sigma_eps is diagonal by construction
    eps_scale = torch.sqrt(torch.diagonal(sigma_eps))
    omega_chol = _noise_factor(s_omega)
    window = hist.unsqueeze(0).expand(M, B, W1, dx)
    cov = belief_cov(dyn, sigma_eps, s_omega, extra_cov) if dyn.linear else None
    lls, xs, acts, means = [], [], [], []
    for i in range(h):
        if on_step is not None:
            on_step(i, ws)
        x = window[:, :, -1]
        a_bar = forward(ws, window.reshape(M, B, W1 * dx), norm)
        a_q = ego[:, i].unsqueeze(0).expand(M, B, ego.shape[-1])
        mean = dyn.h(x, a_bar, a_q)
        step_cov = cov
        if step_cov is None:
            J = as_tensor(dyn.jac_ap(x, a_bar, a_q))
            step_cov = belief_cov(dyn, sigma_eps, s_omega, extra_cov, jac_ap=J)
        if future is not None:
            lls.append(gaussian_logpdf(future[:, i], mean, step_cov))
        a_p = a_bar if eps_u is None else a_bar + eps_scale * as_tensor(eps_u[:, :, i])
        if teacher_forcing:
            x_next = future[:, i].unsqueeze(0).expand(M, B, dx)
        else:
            x_next = dyn.h(x, a_p, a_q)
            if omega_u is not None:
                x_next = x_next + as_tensor(omega_u[:, :, i]) @ omega_chol.T
        window = torch.cat([window[:, :, 1:], x_next.unsqueeze(2)], dim=2)
        xs.append(x_next)
        acts.append(a_p)
        means.append(mean)
    return Propagation(
        torch.stack(lls, dim=2) if lls else None,
        torch.stack(xs, dim=2),
        torch.stack(acts, dim=2),
        torch.stack(means, dim=2),
        step_cov,
    )


def draw_step_noise(rng: np.random.Generator, M: int, B: int, h: int, da: int, dx: int):
    """Standard-normal action and process noise, ``(M, B, h, da)`` and ``(M, B, h, dx)``."""
    eps = torch.from_numpy(rng.standard_normal((M, B, h, da)))
    omega = torch.from_numpy(rng.standard_normal((M, B, h, dx)))
    return eps, omega


def rollout_sample(ws: WeightSample, req: PredictionRequest, dyn: DynamicsSpec, sigma_eps,
                   rng: np.random.Generator, norm: FeatureNormalizer | None = None,
                   on_step=None) -> SampledTrajectory:
    """One Monte Carlo trajectory under a single weight sample."""
    single = ws if not ws.batched else ws[0]
    batched = WeightSample([w.unsqueeze(0) for w in single.W], single.z.reshape(1))
    eps, omega = draw_step_noise(rng, 1, 1, req.horizon, dyn.action_dim, dyn.state_dim)
    with torch.no_grad():
        p = propagate(batched, req.history[None], req.ego_actions[None], dyn, sigma_eps, norm,
                      eps, omega, on_step=on_step)
    return SampledTrajectory(
        p.states[0, 0].numpy(), single, eps[0, 0].numpy(), omega[0, 0].numpy(), p.actions[0, 0].numpy()
    )


def trajectory_likelihood(ws: WeightSample, record: TrajectoryRecord, dyn: DynamicsSpec, sigma_eps,
                          rng: np.random.Generator, norm: FeatureNormalizer | None = None,
                          teacher_forcing: bool = False, extra_cov=None):
    """Log-likelihood of an observed future under one weight sample.

    Returns ``(loglik, beliefs)`` where ``beliefs`` lists the per-step
    Gaussian prior-update beliefs.
    """
    single = ws if not ws.batched else ws[0]
    batched = WeightSample([w.unsqueeze(0) for w in single.W], single.z.reshape(1))
    eps, omega = draw_step_noise(rng, 1, 1, record.h, dyn.action_dim, dyn.state_dim)
    with torch.no_grad():
        p = propagate(batched, record.history[None], record.ego[None], dyn, sigma_eps, norm, eps, omega,
                      future=record.future[None], teacher_forcing=teacher_forcing, extra_cov=extra_cov)
    cov = p.cov.numpy()
    beliefs = [PerStepBelief(p.means[0, 0, i].numpy(), cov.copy()) for i in range(record.h)]
    return float(p.loglik.sum()), beliefs


def predict_states(q: VariationalPosterior, history, ego, dyn: DynamicsSpec, S: int,
                   rng: np.random.Generator, return_samples: bool = False):
    """``S`` sampled futures for each of ``B`` histories, shape ``(S, B, h, dx)``."""
    history = np.asarray(history, dtype=float)
    ego = np.asarray(ego, dtype=float)
    with torch.no_grad():
        ws = sample_posterior(q, rng, S)
        eps, omega = draw_step_noise(rng, S, history.shape[0], ego.shape[1], dyn.action_dim, dyn.state_dim)
        p = propagate(ws, history, ego, dyn, q.sigma_eps, q.normalizer, eps, omega)
    if return_samples:
        return p, ws, eps, omega
    return p.states.numpy()


def predict_distribution(q: VariationalPosterior, req: PredictionRequest, dyn: DynamicsSpec, S: int,
                         rng: np.random.Generator) -> list:
    """``S`` trajectories, each from its own ``(W_s, z_s)`` draw."""
    if S < 1:
        raise ValueError("S must be >= 1")
    p, ws, eps, omega = predict_states(q, req.history[None], req.ego_actions[None], dyn, S, rng,
                                       return_samples=True)
    return [
        SampledTrajectory(p.states[s, 0].numpy(), ws[s], eps[s, 0].numpy(), omega[s, 0].numpy(),
                          p.actions[s, 0].numpy())
        for s in range(S)
    ]


def sample_loglik(q: VariationalPosterior, data: Dataset, dyn: DynamicsSpec, S: int,
                  rng: np.random.Generator, teacher_forcing: bool = False, extra_cov=None,
                  chunk: int = 256) -> np.ndarray:
    """Per-sample, per-record, per-step log-likelihoods ``(S, N, h)``.

    Weight samples are shared by all records; step noise is drawn per record.
    """
    out = []
    with torch.no_grad():
        ws = sample_posterior(q, rng, S)
        for lo in range(0, len(data), chunk):
            part = data.subset(np.arange(lo, min(lo + chunk, len(data))))
            eps, omega = draw_step_noise(rng, S, len(part), part.h, dyn.action_dim, dyn.state_dim)
            p = propagate(ws, part.history, part.ego, dyn, q.sigma_eps, q.normalizer, eps, omega,
                          future=part.future, teacher_forcing=teacher_forcing, extra_cov=extra_cov)
            out.append(p.loglik.numpy())
    return np.concatenate(out, axis=1)


def write_trajectories_csv(path, trajectories, state_names=None) -> None:
    """Columns ``sample_id, step, <state components>``; ``trajectories`` is ``(S, h, dx)``."""
    traj = np.asarray(
        [t.states for t in trajectories] if isinstance(trajectories, list) else trajectories, dtype=float
    )
    dx = traj.shape[-1]
    names = list(state_names) if state_names else [f"x{j}" for j in range(dx)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", *names])
        for s in range(traj.shape[0]):
            for i in range(traj.shape[1]):
                w.writerow([s, i + 1, *(repr(float(v)) for v in traj[s, i])])
