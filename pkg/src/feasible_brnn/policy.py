"""Bayesian neural network policy with one shared stochastic input ``z``.

The variational posterior is a fully factorised Gaussian over every weight
(bias column included) and over ``z``. Variances are stored as log-variances
so they can be optimised without constraints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=dtype)


def _shaped(x, shape) -> torch.Tensor:
    # reshaping a leaf that already has the right shape would detach it from the optimiser
    t = as_tensor(x)
    target = t.reshape(shape).shape
    return t if t.shape == target else t.reshape(shape)


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths ``[input, hidden..., output]``; the input includes ``z``."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def for_policy(cls, history_len: int, state_dim: int, hidden, action_dim: int):
        return cls((history_len * state_dim + 1, *hidden, action_dim))

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[0] - 1

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def weight_shapes(self) -> list:
        s = self.layer_sizes
        return [(s[l + 1], s[l] + 1) for l in range(self.n_layers)]

    @property
    def n_weights(self) -> int:
        return sum(a * b for a, b in self.weight_shapes)


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-state-dimension standardisation of history windows.

    Actions are only rescaled (never shifted) so a zero network output maps to
    a zero action.
    """

    state_mean: np.ndarray
    state_scale: np.ndarray
    action_scale: np.ndarray
    history_len: int = 1

    def __post_init__(self):
        for name in ("state_mean", "state_scale", "action_scale"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.state_scale <= 0) or np.any(self.action_scale <= 0):
            raise ValueError("normalizer scales must be positive")

    @classmethod
    def identity(cls, state_dim: int, action_dim: int, history_len: int = 1):
        return cls(np.zeros(state_dim), np.ones(state_dim), np.ones(action_dim), history_len)

    @classmethod
    def fit(cls, states: np.ndarray, actions: np.ndarray, history_len: int):
        """Statistics over all states (``(..., state_dim)``) and actions seen in training."""
        states = np.asarray(states, dtype=float).reshape(-1, np.shape(states)[-1])
        actions = np.asarray(actions, dtype=float).reshape(-1, np.shape(actions)[-1])
        scale = states.std(axis=0)
        scale[~(scale > 1e-12)] = 1.0
        a_scale = np.sqrt((actions**2).mean(axis=0)) if actions.size else np.ones(actions.shape[-1])
        a_scale[~(a_scale > 1e-12)] = 1.0
        return cls(states.mean(axis=0), scale, a_scale, history_len)

    def normalize(self, features):
        """Standardise a flattened window ``(..., history_len * state_dim)``."""
        mean = np.tile(self.state_mean, self.history_len)
        scale = np.tile(self.state_scale, self.history_len)
        if isinstance(features, torch.Tensor):
            return (features - as_tensor(mean)) / as_tensor(scale)
        return (np.asarray(features, dtype=float) - mean) / scale

    def to_dict(self) -> dict:
        return {
            "state_mean": self.state_mean.tolist(),
            "state_scale": self.state_scale.tolist(),
            "action_scale": self.action_scale.tolist(),
            "history_len": self.history_len,
        }

    @classmethod
    def from_dict(cls, d: dict):
        return cls(d["state_mean"], d["state_scale"], d["action_scale"], int(d["history_len"]))


@dataclass
class WeightSample:
    """Network weights and ``z``; tensors may carry a leading sample axis.

    ``W[l]`` has shape ``(..., V_l, V_{l-1} + 1)`` with the bias in the last
    column; ``z`` has shape ``(...)``.
    """

    W: list
    z: torch.Tensor

    @property
    def batched(self) -> bool:
        return self.z.dim() == 1

    def __len__(self) -> int:
        return self.z.shape[0] if self.batched else 1

    def __getitem__(self, s) -> "WeightSample":
        if not self.batched:
            raise IndexError("single weight sample is not indexable")
        return WeightSample([w[s] for w in self.W], self.z[s])

    def detach(self) -> "WeightSample":
        return WeightSample([w.detach() for w in self.W], self.z.detach())

    def flat(self) -> torch.Tensor:
        """All weights then ``z`` on the last axis, ``(..., n_weights + 1)``."""
        lead = self.z.shape
        parts = [w.reshape(*lead, -1) for w in self.W] + [self.z.reshape(*lead, 1)]
        return torch.cat(parts, dim=-1)

    @classmethod
    def from_flat(cls, flat, shape: NetworkShape) -> "WeightSample":
        flat = as_tensor(flat)
        lead = flat.shape[:-1]
        W, i = [], 0
        for rows, cols in shape.weight_shapes:
            W.append(flat[..., i : i + rows * cols].reshape(*lead, rows, cols))
            i += rows * cols
        return cls(W, flat[..., i])

    @classmethod
    def stack(cls, samples) -> "WeightSample":
        samples = list(samples)
        W = [torch.stack([s.W[l] for s in samples]) for l in range(len(samples[0].W))]
        return cls(W, torch.stack([s.z for s in samples]))


@dataclass
class VariationalPosterior:
    """Factorised Gaussian ``q(W, z)`` plus prior scales and policy noise.

    ``log_sigma_eps`` is the log of the diagonal of the action-noise covariance
    (in physical action units). ``n_train`` is the dataset size used to tie
    the per-datapoint factors.
    """

    shape: NetworkShape
    m_w: list
    log_v_w: list
    m_z: torch.Tensor
    log_v_z: torch.Tensor
    log_sigma_eps: torch.Tensor
    normalizer: FeatureNormalizer
    prior_var_w: float = 1.0
    prior_var_z: float = 1.0
    n_train: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.m_w = [as_tensor(m) for m in self.m_w]
        self.log_v_w = [as_tensor(v) for v in self.log_v_w]
        self.m_z = _shaped(self.m_z, ())
        self.log_v_z = _shaped(self.log_v_z, ())
        self.log_sigma_eps = _shaped(self.log_sigma_eps, (-1,))
        for (rows, cols), m, v in zip(self.shape.weight_shapes, self.m_w, self.log_v_w):
            if tuple(m.shape) != (rows, cols) or tuple(v.shape) != (rows, cols):
                raise ValueError(f"weight arrays do not match layer shape {(rows, cols)}")
        if len(self.m_w) != self.shape.n_layers:
            raise ValueError("one mean/variance array per layer required")
        if self.log_sigma_eps.shape[0] != self.shape.output_dim:
            raise ValueError("sigma_eps must have one entry per action dimension")
        if self.prior_var_w <= 0 or self.prior_var_z <= 0 or self.n_train < 1:
            raise ValueError("prior variances and n_train must be positive")

    @property
    def v_w(self) -> list:
        return [torch.exp(v) for v in self.log_v_w]

    @property
    def v_z(self) -> torch.Tensor:
        return torch.exp(self.log_v_z)

    @property
    def sigma_eps(self) -> torch.Tensor:
        """Diagonal action-noise covariance as a matrix."""
        return torch.diag(torch.exp(self.log_sigma_eps))

    def parameters(self) -> list:
        return [*self.m_w, *self.log_v_w, self.m_z, self.log_v_z, self.log_sigma_eps]

    def parameter_names(self) -> list:
        L = self.shape.n_layers
        return ([f"m_w[{l}]" for l in range(L)] + [f"log_v_w[{l}]" for l in range(L)]
                + ["m_z", "log_v_z", "log_sigma_eps"])

    def replace(self, params) -> "VariationalPosterior":
        """Copy with the tensors of ``parameters()`` swapped for ``params``."""
        L = self.shape.n_layers
        params = list(params)
        return VariationalPosterior(
            self.shape, params[:L], params[L : 2 * L], params[2 * L], params[2 * L + 1],
            params[2 * L + 2], self.normalizer, self.prior_var_w, self.prior_var_z,
            self.n_train, dict(self.meta),
        )

    def clone(self, requires_grad: bool = False) -> "VariationalPosterior":
        return self.replace(p.detach().clone().requires_grad_(requires_grad) for p in self.parameters())

    def mean_sample(self) -> WeightSample:
        return WeightSample([m.detach() for m in self.m_w], self.m_z.detach())

    def flat_mean(self) -> np.ndarray:
        return self.mean_sample().flat().numpy().copy()

    def flat_var(self) -> np.ndarray:
        parts = [v.detach().reshape(-1) for v in self.v_w] + [self.v_z.detach().reshape(1)]
        return torch.cat(parts).numpy().copy()

    def with_flat_moments(self, mean, var) -> "VariationalPosterior":
        """Copy with weight/``z`` means and variances replaced from flat vectors."""
        ws_m = WeightSample.from_flat(np.asarray(mean, dtype=float), self.shape)
        ws_v = WeightSample.from_flat(np.asarray(var, dtype=float), self.shape)
        out = self.clone()
        out.m_w = [w.clone() for w in ws_m.W]
        out.log_v_w = [torch.log(v) for v in ws_v.W]
        out.m_z = ws_m.z.clone()
        out.log_v_z = torch.log(ws_v.z)
        return out

    def to_dict(self) -> dict:
        def arr(t):
            return t.detach().tolist()

        return {
            "shape": list(self.shape.layer_sizes),
            "m_w": [arr(m) for m in self.m_w],
            "log_v_w": [arr(v) for v in self.log_v_w],
            "m_z": float(self.m_z),
            "log_v_z": float(self.log_v_z),
            "lambda": self.prior_var_w,
            "gamma": self.prior_var_z,
            "log_sigma_eps": arr(self.log_sigma_eps),
            "n_train": self.n_train,
            "normalizer": self.normalizer.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalPosterior":
        return cls(
            NetworkShape(tuple(d["shape"])), d["m_w"], d["log_v_w"], d["m_z"], d["log_v_z"],
            d["log_sigma_eps"], FeatureNormalizer.from_dict(d["normalizer"]),
            float(d["lambda"]), float(d["gamma"]), int(d["n_train"]), dict(d.get("meta", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "VariationalPosterior":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_posterior(
    shape: NetworkShape,
    normalizer: FeatureNormalizer,
    n_train: int,
    rng: np.random.Generator,
    prior_var_w: float = 1.0,
    prior_var_z: float = 1.0,
    init_log_v_w: float = -10.0,
    sigma_eps=None,
) -> VariationalPosterior:
    """Near-deterministic start: means ``N(0, 1/fan_in)``, tiny weight variances.

    ``sigma_eps`` defaults to a tenth of the squared action scale.
    """
    m_w, log_v_w = [], []
    for rows, cols in shape.weight_shapes:
        m_w.append(rng.standard_normal((rows, cols)) / math.sqrt(cols - 1))
        log_v_w.append(np.full((rows, cols), init_log_v_w))
    if sigma_eps is None:
        sigma_eps = 0.1 * normalizer.action_scale**2
    return VariationalPosterior(
        shape, m_w, log_v_w, 0.0, math.log(prior_var_z), np.log(np.asarray(sigma_eps, dtype=float)),
        normalizer, prior_var_w, prior_var_z, n_train,
    )


def forward(ws: WeightSample, features, norm: FeatureNormalizer | None = None):
    """Mean action of the policy network for flattened history windows.

    Features are standardised by ``norm`` before ``z`` is appended; hidden
    layers are rectified linear and the output layer is affine. For a batched
    ``ws`` (leading sample axis ``M``) features of shape ``(B, d)`` are
    broadcast to ``(M, B, d)``. Policy noise is not added here.
    """
    x = as_tensor(features)
    single_vec = x.dim() == 1
    if single_vec:
        x = x.unsqueeze(0)
    if ws.batched and x.dim() == 2:
        x = x.unsqueeze(0).expand(len(ws), *x.shape)
    if norm is not None:
        x = norm.normalize(x)
    d_in = ws.W[0].shape[-1] - 2
    if x.shape[-1] != d_in:
        raise ValueError(f"feature dim {x.shape[-1]} != network input {d_in}")
    z = ws.z.reshape(*ws.z.shape, *([1] * (x.dim() - ws.z.dim())))
    h = torch.cat([x, z.expand(*x.shape[:-1], 1)], dim=-1)
    n = len(ws.W)
    for l, W in enumerate(ws.W):
        h = h @ W[..., :-1].transpose(-1, -2) + W[..., -1].unsqueeze(-2)
        if l < n - 1:
            h = torch.relu(h)
    if norm is not None:
        h = h * as_tensor(norm.action_scale)
    return h[0] if single_vec and not ws.batched else (h[:, 0] if single_vec else h)


@dataclass
class BaseNoise:
    """Standard-normal draws behind reparameterised weight samples."""

    W: list
    z: torch.Tensor

    @classmethod
    def draw(cls, shape: NetworkShape, M: int, rng: np.random.Generator) -> "BaseNoise":
        W = [torch.from_numpy(rng.standard_normal((M, rows, cols))) for rows, cols in shape.weight_shapes]
        return cls(W, torch.from_numpy(rng.standard_normal(M)))


def reparameterize(q: VariationalPosterior, u: BaseNoise) -> WeightSample:
    """``m + sqrt(v) * u`` for every weight and ``z``; differentiable in ``q``."""
    W = [m + torch.exp(0.5 * lv) * uw for m, lv, uw in zip(q.m_w, q.log_v_w, u.W)]
    z = q.m_z + torch.exp(0.5 * q.log_v_z) * u.z
    return WeightSample(W, z)


def sample_posterior(q: VariationalPosterior, rng: np.random.Generator, M: int) -> WeightSample:
    """``M`` independent draws of ``(W, z)`` stacked on a leading axis."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return reparameterize(q, BaseNoise.draw(q.shape, M, rng))


def log_factors(ws: WeightSample, q: VariationalPosterior):
    """Log of the tied site factors ``(log f(W), log f(z))`` at ``ws``.

    ``f(W)`` is the N-th root of ``q(W)/p(W)`` (up to a constant); ``f(z)``
    is the full ratio ``q(z)/p(z)`` because the posterior over ``z`` enters
    with power ``N``.
    """
    lam, gam, N = q.prior_var_w, q.prior_var_z, q.n_train
    log_fw = 0.0
    for w, m, lv in zip(ws.W, q.m_w, q.log_v_w):
        v = torch.exp(lv)
        term = (v - lam) / (2.0 * lam * v) * w**2 + (m / v) * w
        log_fw = log_fw + term.sum(dim=(-1, -2))
    log_fw = log_fw / N
    v_z = torch.exp(q.log_v_z)
    log_fz = (v_z - gam) / (2.0 * gam * v_z) * ws.z**2 + (q.m_z / v_z) * ws.z
    return log_fw, log_fz


def log_z_q(q: VariationalPosterior) -> torch.Tensor:
    """Log-normaliser of ``q`` in natural-parameter form (prior constant dropped)."""
    total = 0.0
    for m, lv in zip(q.m_w, q.log_v_w):
        total = total + (0.5 * (LOG_2PI + lv) + m**2 / (2.0 * torch.exp(lv))).sum()
    z_term = 0.5 * (LOG_2PI + q.log_v_z) + q.m_z**2 / (2.0 * torch.exp(q.log_v_z))
    return total + q.n_train * z_term
