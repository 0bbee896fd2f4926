"""Black-box alpha-divergence training of the recurrent model.

The energy is evaluated with reparameterised Monte Carlo samples of the
weights, ``z`` and the per-step noises; its gradient is obtained by reverse
mode differentiation through the unrolled recurrence.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .brnn import belief_cov, draw_step_noise, gaussian_logpdf, propagate
from .data import Dataset
from .dynamics import DynamicsSpec
from .policy import (
    BaseNoise,
    VariationalPosterior,
    as_tensor,
    forward,
    log_factors,
    log_z_q,
    reparameterize,
)

log = logging.getLogger(__name__)


class NonFiniteEnergyError(FloatingPointError):
    """A term of the energy estimate is NaN or infinite."""


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 50
    mc_samples: int = 100
    epochs: int = 200
    horizon: int = 15
    seed: int = 0
    clip_norm: float = 10.0
    teacher_forcing: bool = False
    max_iters: int | None = None  # optional cap on total gradient steps
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0 (use 1e-6 for the VI limit)")
        if self.mc_samples < 1 or self.horizon < 1 or self.batch_size < 1:
            raise ValueError("mc_samples, horizon and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        self.adam_betas = tuple(self.adam_betas)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnergyNoise:
    """Frozen standard-normal draws for one energy evaluation."""

    base: BaseNoise
    eps: torch.Tensor | None
    omega: torch.Tensor | None

    @classmethod
    def draw(cls, q: VariationalPosterior, dyn: DynamicsSpec, B: int, h: int, M: int,
             rng: np.random.Generator, step_noise: bool = True) -> "EnergyNoise":
        base = BaseNoise.draw(q.shape, M, rng)
        if not step_noise:
            return cls(base, None, None)
        eps, omega = draw_step_noise(rng, M, B, h, dyn.action_dim, dyn.state_dim)
        return cls(base, eps, omega)


def _check_finite(ll: torch.Tensor, log_fw, log_fz) -> None:
    terms = ll.detach() - log_fw.detach()[:, None] - log_fz.detach()[:, None]
    bad = ~torch.isfinite(terms)
    if torch.any(bad):
        s, n = (int(i) for i in torch.nonzero(bad)[0])
        raise NonFiniteEnergyError(f"non-finite likelihood term for record {n}, sample {s}")


def energy_terms(q: VariationalPosterior, batch: Dataset, dyn: DynamicsSpec, alpha: float,
                 noise: EnergyNoise, teacher_forcing: bool = False, single_step: bool = False):
    """``(energy, log_Z_q, per-record L_alpha)`` for a mini-batch under frozen noise."""
    ws = reparameterize(q, noise.base)
    M = len(ws)
    if single_step:
        ll = single_step_loglik(ws, batch, dyn, q)
    else:
        p = propagate(ws, batch.history, batch.ego, dyn, q.sigma_eps, q.normalizer, noise.eps,
                      noise.omega, future=batch.future, teacher_forcing=teacher_forcing)
        ll = p.loglik.sum(dim=2)
    log_fw, log_fz = log_factors(ws, q)
    _check_finite(ll, log_fw, log_fz)
    a = alpha * (ll - log_fw[:, None] - log_fz[:, None])
    l_alpha = torch.logsumexp(a, dim=0) - math.log(M)
    lz = log_z_q(q)
    energy = -lz - q.n_train / (alpha * len(batch)) * l_alpha.sum()
    if not torch.isfinite(energy):
        raise NonFiniteEnergyError("energy is not finite")
    return energy, lz, l_alpha


def single_step_loglik(ws, batch: Dataset, dyn: DynamicsSpec, q: VariationalPosterior) -> torch.Tensor:
    """Dedicated ``h = 1`` path: one prior update from the observed history, ``(M, B)``."""
    if batch.h != 1:
        raise ValueError("single-step path needs h = 1 records")
    M = len(ws)
    hist = as_tensor(batch.history)
    B, W1, dx = hist.shape
    a_bar = forward(ws, hist.reshape(B, W1 * dx), q.normalizer)
    x = hist[:, -1].unsqueeze(0).expand(M, B, dx)
    a_q = as_tensor(batch.ego[:, 0]).unsqueeze(0).expand(M, B, batch.ego.shape[-1])
    mean = dyn.h(x, a_bar, a_q)
    cov = belief_cov(dyn, q.sigma_eps)
    return gaussian_logpdf(as_tensor(batch.future[:, 0]), mean, cov)


def energy(q: VariationalPosterior, batch: Dataset, config: TrainConfig, rng: np.random.Generator,
           dyn: DynamicsSpec, noise: EnergyNoise | None = None, single_step: bool = False) -> float:
    """Noisy BB-alpha energy estimate on ``batch`` (uses the first ``config.horizon`` steps)."""
    batch = _truncate(batch, config.horizon)
    if noise is None:
        noise = EnergyNoise.draw(q, dyn, len(batch), batch.h, config.mc_samples, rng, not single_step)
    with torch.no_grad():
        e, _, _ = energy_terms(q, batch, dyn, config.alpha, noise, config.teacher_forcing, single_step)
    return float(e)


def energy_gradient(q: VariationalPosterior, batch: Dataset, config: TrainConfig,
                    rng: np.random.Generator, dyn: DynamicsSpec, noise: EnergyNoise | None = None,
                    single_step: bool = False):
    """Energy and its exact gradient w.r.t. every variational parameter.

    Returns ``(energy, grads)`` where ``grads`` maps parameter names
    (``m_w[l]``, ``log_v_w[l]``, ``m_z``, ``log_v_z``, ``log_sigma_eps``) to
    arrays with the parameter's shape.
    """
    batch = _truncate(batch, config.horizon)
    if noise is None:
        noise = EnergyNoise.draw(q, dyn, len(batch), batch.h, config.mc_samples, rng, not single_step)
    qg = q.clone(requires_grad=True)
    e, _, _ = energy_terms(qg, batch, dyn, config.alpha, noise, config.teacher_forcing, single_step)
    grads = torch.autograd.grad(e, qg.parameters())
    return float(e.detach()), {n: g.numpy() for n, g in zip(qg.parameter_names(), grads)}


def _truncate(batch: Dataset, horizon: int) -> Dataset:
    if batch.h < horizon:
        raise ValueError(f"records have horizon {batch.h} < training horizon {horizon}")
    if batch.h == horizon:
        return batch
    return Dataset(batch.history, batch.ego[:, :horizon], batch.future[:, :horizon], batch.traj_id,
                   batch.scenario, batch.info)


@dataclass
class TrainResult:
    posterior: VariationalPosterior
    trace: list = field(default_factory=list)  # (epoch, train_energy, val_energy)
    best_epoch: int | None = None


def train(q0: VariationalPosterior, dataset: Dataset, config: TrainConfig, rng: np.random.Generator,
          dyn: DynamicsSpec, val: Dataset | None = None, single_step: bool | None = None,
          log_every: int = 10) -> TrainResult:
    """Adam on the BB-alpha energy with uniform mini-batches drawn without replacement.

    ``q0.n_train`` is set to ``len(dataset)``. With a validation set the
    posterior with the lowest validation energy is returned.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    data = _truncate(dataset, config.horizon)
    val = _truncate(val, config.horizon) if val is not None and len(val) else None
    if single_step is None:
        single_step = config.horizon == 1
    q = q0.clone(requires_grad=True)
    q.n_train = len(data)
    params = q.parameters()
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)
    trace, best, best_epoch, best_val = [], None, None, math.inf
    iters = 0
    val_rng = np.random.default_rng([config.seed, 7919])
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        energies = []
        for lo in range(0, len(order), config.batch_size):
            batch = data.subset(order[lo : lo + config.batch_size])
            noise = EnergyNoise.draw(q, dyn, len(batch), batch.h, config.mc_samples, rng, not single_step)
            e, _, _ = energy_terms(q, batch, dyn, config.alpha, noise, config.teacher_forcing, single_step)
            if not torch.isfinite(e):
                raise TrainingDiverged(f"energy diverged at epoch {epoch}", trace)
            energies.append(float(e.detach()))
            if config.learning_rate > 0:
                opt.zero_grad()
                e.backward()
                if config.clip_norm:
                    torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
                opt.step()
            iters += 1
            if config.max_iters is not None and iters >= config.max_iters:
                break
        train_e = float(np.mean(energies))
        val_e = math.nan
        if val is not None:
            val_e = energy(q, val, config, val_rng, dyn, single_step=single_step)
            if val_e < best_val:
                best_val, best, best_epoch = val_e, q.clone(), epoch
        trace.append((epoch, train_e, val_e))
        if not math.isfinite(train_e):
            raise TrainingDiverged(f"energy diverged at epoch {epoch}", trace)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d energy %.4f val %.4f", epoch, train_e, val_e)
        if config.max_iters is not None and iters >= config.max_iters:
            break
    out = best if best is not None else q.clone()
    out.meta.update({"alpha": config.alpha, "horizon": config.horizon, "epochs_run": len(trace)})
    return TrainResult(out, trace, best_epoch)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_energy", "val_energy"])
        for epoch, tr, va in trace:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))
