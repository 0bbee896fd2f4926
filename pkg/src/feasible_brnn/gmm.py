"""Conditional Gaussian mixture baseline policy.

A full-covariance mixture is fitted by EM on joint ``(features, action)``
vectors and conditioned analytically on the features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DynamicsSpec
from .math_core import log_sum_exp

LOG_2PI = math.log(2.0 * math.pi)
EIG_FLOOR = 1e-6


class ComponentCollapseError(RuntimeError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covs: np.ndarray  # (K, D, D)
    log_likelihood_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covs = np.asarray(self.covs, dtype=float).reshape(len(self.weights), self.dim, self.dim)
        if abs(self.weights.sum() - 1.0) > 1e-10 or np.any(self.weights < 0):
            raise ValueError("mixture weights must lie on the simplex")

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, x) -> np.ndarray:
        """``log N(x | mu_k, Sigma_k)`` for every row of ``x``, shape ``(n, K)``."""
        return _component_logpdf(np.atleast_2d(x), self.means, self.covs)

    def logpdf(self, x) -> np.ndarray:
        return log_sum_exp(self.component_logpdf(x) + np.log(self.weights), axis=1)

    def sample(self, n: int, rng) -> np.ndarray:
        ks = rng.choice(self.K, size=n, p=self.weights)
        u = rng.standard_normal((n, self.dim))
        chols = np.linalg.cholesky(self.covs)
        return self.means[ks] + np.einsum("nij,nj->ni", chols[ks], u)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covariances": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GmmModel":
        return cls(d["weights"], d["means"], d["covariances"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GmmModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _component_logpdf(x, means, covs) -> np.ndarray:
    n, d = x.shape
    out = np.empty((n, len(means)))
    for k, (mu, cov) in enumerate(zip(means, covs)):
        chol = np.linalg.cholesky(cov)
        r = np.linalg.solve(chol, (x - mu).T)
        out[:, k] = -0.5 * (d * LOG_2PI + 2.0 * np.log(np.diag(chol)).sum() + (r**2).sum(axis=0))
    return out


def _floor_eigs(cov: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    # clipping the spectrum is the exact maximiser of the Gaussian likelihood
    # under an eigenvalue lower bound, so EM stays monotone
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def _kmeanspp(x, K, rng) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(len(x), 1.0 / len(x))
        centers.append(x[rng.choice(len(x), p=p)])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(1))
    return np.asarray(centers)


def fit_em(data, K: int, max_iter: int = 200, tol: float = 1e-6, rng=None, reg: float = 1e-6) -> GmmModel:
    """EM for a full-covariance mixture with k-means++ seeding.

    Covariances are regularised by flooring their eigenvalues at
    ``max(reg, 1e-6)`` in each M-step. Iteration stops when the average
    log-likelihood gain falls below ``tol``. A component whose
    responsibility mass vanishes is re-seeded once; a second collapse raises
    :class:`ComponentCollapseError`. The per-iteration average training
    log-likelihood is kept in ``log_likelihood_trace``.
    """
    x = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = x.shape
    if n < K:
        raise ValueError(f"need at least K={K} samples, got {n}")
    if reg < 0:
        raise ValueError("reg must be non-negative")
    floor = max(reg, EIG_FLOOR)
    rng = rng if rng is not None else np.random.default_rng(0)
    means = _kmeanspp(x, K, rng)
    # hard assignment to seeds for the first covariances
    assign = ((x[:, None, :] - means[None]) ** 2).sum(-1).argmin(1)
    resp = np.eye(K)[assign]
    reseeded = set()
    weights, covs = None, None
    trace = []
    for it in range(max_iter + 1):
        # M-step
        nk = resp.sum(0)
        dead = np.flatnonzero(nk < 1e-8 * n)
        if dead.size:
            k = int(dead[0])
            if k in reseeded:
                raise ComponentCollapseError(f"component {k} collapsed twice")
            reseeded.add(k)
            far = int(np.argmin(log_sum_exp(_component_logpdf(x, means, covs) + np.log(weights), axis=1))) \
                if covs is not None else int(rng.integers(n))
            resp[:, k] = 0.0
            resp[far] = 0.0
            resp[far, k] = 1.0
            nk = resp.sum(0)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((K, d, d))
        for k in range(K):
            r = x - means[k]
            covs[k] = _floor_eigs((resp[:, k, None] * r).T @ r / nk[k], floor)
        # E-step
        logp = _component_logpdf(x, means, covs) + np.log(weights)
        norm = log_sum_exp(logp, axis=1)
        ll = float(norm.mean())
        trace.append(ll)
        resp = np.exp(logp - norm[:, None])
        if it > 0 and ll - trace[-2] < tol:
            break
    weights = weights / weights.sum()
    return GmmModel(weights, means, covs, trace)


@dataclass
class ConditionalMixture:
    """Mixture over the action given fixed features."""

    weights: np.ndarray  # (..., K)
    means: np.ndarray  # (..., K, da)
    covs: np.ndarray  # (K, da, da), shared across feature rows

    def logpdf(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        out = []
        for k in range(self.covs.shape[0]):
            chol = np.linalg.cholesky(self.covs[k])
            r = np.linalg.solve(chol, (a - self.means[..., k, :])[..., None])[..., 0]
            da = a.shape[-1]
            out.append(-0.5 * (da * LOG_2PI + 2 * np.log(np.diag(chol)).sum() + (r**2).sum(-1)))
        comp = np.stack(out, axis=-1)
        return log_sum_exp(comp + np.log(np.maximum(self.weights, 1e-300)), axis=-1)

    def mean(self) -> np.ndarray:
        return (self.weights[..., None] * self.means).sum(-2)

    def sample(self, rng) -> np.ndarray:
        """One action per feature row."""
        w = np.atleast_2d(self.weights)
        mu = self.means.reshape(w.shape[0], w.shape[1], -1)
        c = np.cumsum(w, axis=1)
        ks = (rng.random((w.shape[0], 1)) > c).sum(1)
        ks = np.minimum(ks, w.shape[1] - 1)
        chols = np.linalg.cholesky(self.covs)
        u = rng.standard_normal((w.shape[0], mu.shape[-1]))
        a = mu[np.arange(w.shape[0]), ks] + np.einsum("nij,nj->ni", chols[ks], u)
        return a.reshape(self.weights.shape[:-1] + (mu.shape[-1],))


def condition(model: GmmModel, features) -> ConditionalMixture:
    """Condition every component on the leading feature block.

    The action block is the trailing ``dim - n_features`` coordinates.
    Mixture weights are re-weighted by each component's marginal feature
    likelihood.
    """
    f = np.asarray(features, dtype=float)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    df = f.shape[1]
    if df >= model.dim:
        raise ValueError("feature dim must be smaller than the joint dim")
    K = model.K
    cond_means = np.empty((f.shape[0], K, model.dim - df))
    cond_covs = np.empty((K, model.dim - df, model.dim - df))
    log_w = np.empty((f.shape[0], K))
    for k in range(K):
        mu_f, mu_a = model.means[k, :df], model.means[k, df:]
        S = model.covs[k]
        Sff, Sfa, Saa = S[:df, :df], S[:df, df:], S[df:, df:]
        gain = np.linalg.solve(Sff, Sfa).T  # Saf Sff^-1
        cond_means[:, k] = mu_a + (f - mu_f) @ gain.T
        c = Saa - gain @ Sfa
        cond_covs[k] = 0.5 * (c + c.T)
        log_w[:, k] = np.log(model.weights[k]) + _component_logpdf(f, mu_f[None], Sff[None])[:, 0]
    w = np.exp(log_w - log_sum_exp(log_w, axis=1)[:, None])
    if single:
        return ConditionalMixture(w[0], cond_means[0], cond_covs)
    return ConditionalMixture(w, cond_means, cond_covs)


@dataclass
class GmmPolicy:
    """A fitted joint mixture used as a stochastic policy on normalised features."""

    model: GmmModel
    normalizer: object  # FeatureNormalizer

    def action_distribution(self, windows_flat) -> ConditionalMixture:
        f = self.normalizer.normalize(np.asarray(windows_flat, dtype=float))
        cm = condition(self.model, f)
        s = self.normalizer.action_scale
        # mixture lives in scaled action units
        return ConditionalMixture(cm.weights, cm.means * s, cm.covs * np.outer(s, s))


def joint_training_data(dataset, dyn: DynamicsSpec, normalizer) -> np.ndarray:
    """Rows ``(normalised window features, scaled action)`` for every step of every record."""
    W1 = dataset.m + 1
    path = np.concatenate([dataset.history, dataset.future], axis=1)
    acts = dataset.actions(dyn)
    rows = []
    for i in range(dataset.h):
        win = path[:, i : i + W1].reshape(len(dataset), -1)
        rows.append(np.concatenate([normalizer.normalize(win), acts[:, i] / normalizer.action_scale], axis=1))
    return np.concatenate(rows, axis=0)


def fit_gmm_policy(dataset, dyn: DynamicsSpec, normalizer, K: int, rng, max_iter: int = 200,
                   tol: float = 1e-6) -> GmmPolicy:
    return GmmPolicy(fit_em(joint_training_data(dataset, dyn, normalizer), K, max_iter, tol, rng), normalizer)


def gmm_rollout(policy: GmmPolicy, history, ego, dyn: DynamicsSpec, S: int, rng,
                future=None):
    """Sample ``S`` trajectories per history with the mixture as policy.

    Returns ``(states (S, B, h, dx), loglik (S, B, h) or None)``. Like the
    network rollouts, the per-step likelihood is the Gaussian prior update
    around the sampled path: the mixture action density pushed through the
    linear dynamics plus process noise.
    """
    history = np.asarray(history, dtype=float)
    ego = np.asarray(ego, dtype=float)
    B, W1, dx = history.shape
    h = ego.shape[1]
    window = np.broadcast_to(history, (S, B, W1, dx)).copy()
    J = dyn.jac_ap()
    omega_chol = np.linalg.cholesky(dyn.sigma_omega) if np.any(dyn.sigma_omega) else np.zeros((dx, dx))
    states = np.empty((S, B, h, dx))
    lls = np.empty((S, B, h)) if future is not None else None
    for i in range(h):
        flat = window.reshape(S * B, W1 * dx)
        cm = policy.action_distribution(flat)
        x = window[:, :, -1].reshape(S * B, dx)
        a_q = np.broadcast_to(ego[:, i], (S, B, ego.shape[-1])).reshape(S * B, -1)
        if future is not None:
            obs = np.broadcast_to(future[:, i], (S, B, dx)).reshape(S * B, dx)
            comp = []
            for k in range(policy.model.K):
                mean = dyn.h(x, cm.means[:, k], a_q)
                cov = J @ cm.covs[k] @ J.T + dyn.sigma_omega
                chol = np.linalg.cholesky(cov)
                r = np.linalg.solve(chol, (obs - mean).T)
                comp.append(-0.5 * (dx * LOG_2PI + 2 * np.log(np.diag(chol)).sum() + (r**2).sum(0)))
            comp = np.stack(comp, axis=1) + np.log(np.maximum(cm.weights, 1e-300))
            lls[:, :, i] = log_sum_exp(comp, axis=1).reshape(S, B)
        a = cm.sample(rng)
        x_next = dyn.h(x, a, a_q) + rng.standard_normal((S * B, dx)) @ omega_chol.T
        states[:, :, i] = x_next.reshape(S, B, dx)
        window = np.concatenate([window[:, :, 1:], x_next.reshape(S, B, 1, dx)], axis=2)
    return states, lls
