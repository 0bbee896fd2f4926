"""Known transition models: car following and the stochastic-gain toy system.

Transition functions accept numpy arrays or torch tensors with the state on
the last axis, so the same code path is used for data generation, rollouts
and differentiable training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

DT = 0.2  # s, car-following sampling period

# state = (gap d_pq, follower speed v_p, leader speed v_q)
# follower action = (dd_p, dv_p), leader action = (dd_q, dv_q)
CAR_STATE_DIM = 3
CAR_ACTION_DIM = 2

_CAR_J_X = np.eye(3)
_CAR_J_AP = np.array([[-1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
_CAR_J_AQ = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])


def _stack(parts, like):
    if isinstance(like, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def _car_h(x, a_p, a_q):
    return _stack(
        [
            x[..., 0] - a_p[..., 0] + a_q[..., 0],
            x[..., 1] + a_p[..., 1],
            x[..., 2] + a_q[..., 1],
        ],
        x,
    )


def _car_inverse(x, x_next, a_q):
    """Follower action that moves ``x`` to ``x_next`` under leader action ``a_q``."""
    return _stack([x[..., 0] - x_next[..., 0] + a_q[..., 0], x_next[..., 1] - x[..., 1]], x)


def _toy_h(x, a_p, a_q):
    return x + a_p


def _toy_inverse(x, x_next, a_q):
    return x_next - x


@dataclass(frozen=True)
class DynamicsSpec:
    """Transition ``x' = h(x, a_p, a_q) + w`` with ``w ~ N(0, sigma_omega)``.

    ``jac_x`` and ``jac_ap`` return the Jacobians at a point. For linear
    models they ignore their arguments; ``linear`` lets callers hoist them.
    """

    name: str
    state_dim: int
    action_dim: int
    ego_dim: int
    h: Callable
    inverse: Callable
    jac_x: Callable
    jac_ap: Callable
    sigma_omega: np.ndarray
    linear: bool = True
    state_names: tuple = field(default=())

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.sigma_omega, dtype=float))
        if cov.shape != (self.state_dim, self.state_dim):
            raise ValueError("sigma_omega must be state_dim x state_dim")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("sigma_omega must be positive semi-definite")
        object.__setattr__(self, "sigma_omega", cov)

    def step(self, x, a_p, a_q, omega=None):
        x_next = self.h(x, a_p, a_q)
        return x_next if omega is None else x_next + omega

    def with_sigma_omega(self, sigma_omega) -> "DynamicsSpec":
        return DynamicsSpec(
            self.name, self.state_dim, self.action_dim, self.ego_dim, self.h,
            self.inverse, self.jac_x, self.jac_ap, sigma_omega, self.linear,
            self.state_names,
        )


CAR_SIGMA_OMEGA = np.diag([0.05**2, 0.02**2, 0.02**2])
TOY_SIGMA_OMEGA = np.array([[1e-4]])


def car_following_dynamics(sigma_omega=None) -> DynamicsSpec:
    return DynamicsSpec(
        name="car_following",
        state_dim=CAR_STATE_DIM,
        action_dim=CAR_ACTION_DIM,
        ego_dim=CAR_ACTION_DIM,
        h=_car_h,
        inverse=_car_inverse,
        jac_x=lambda *args: _CAR_J_X.copy(),
        jac_ap=lambda *args: _CAR_J_AP.copy(),
        sigma_omega=CAR_SIGMA_OMEGA if sigma_omega is None else sigma_omega,
        state_names=("d_pq", "v_p", "v_q"),
    )


def toy_brnn_dynamics(sigma_omega=None) -> DynamicsSpec:
    """Scalar toy system split into policy and dynamics: ``x' = x + a_p``.

    The policy predicts the displacement ``a_p = -gamma * S(kappa) * x``; its
    ratio to ``-x`` is the realised feedback gain.
    """
    return DynamicsSpec(
        name="toy",
        state_dim=1,
        action_dim=1,
        ego_dim=0,
        h=_toy_h,
        inverse=_toy_inverse,
        jac_x=lambda *args: np.ones((1, 1)),
        jac_ap=lambda *args: np.ones((1, 1)),
        sigma_omega=TOY_SIGMA_OMEGA if sigma_omega is None else sigma_omega,
        state_names=("x",),
    )


def dynamics_by_name(name: str, sigma_omega=None) -> DynamicsSpec:
    if name == "toy":
        return toy_brnn_dynamics(sigma_omega)
    if name == "car_following":
        return car_following_dynamics(sigma_omega)
    raise ValueError(f"unknown dynamics {name!r}")


def step_car_following(x, a_p, a_q, omega=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = _car_h(x, np.asarray(a_p, dtype=float), np.asarray(a_q, dtype=float))
    if omega is not None:
        out = out + np.asarray(omega, dtype=float)
    return out


def jacobians_car_following() -> tuple[np.ndarray, np.ndarray]:
    """``(dh/dx, dh/da_p)``; constant because the model is linear."""
    return _CAR_J_X.copy(), _CAR_J_AP.copy()


@dataclass(frozen=True)
class ToyParams:
    x0: float = 200.0
    gamma_toy: float = 0.2
    mu1: float = -1.0
    mu2: float = 1.0
    var1: float = 0.36
    var2: float = 0.36
    p1: float = 0.5
    p2: float = 0.5
    var_zeta: float = 0.04
    horizon: int = 15

    def __post_init__(self):
        if abs(self.p1 + self.p2 - 1.0) > 1e-12 or min(self.p1, self.p2) < 0:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if min(self.var1, self.var2) <= 0 or self.var_zeta < 0:
            raise ValueError("variances must be positive")
        if not 0.0 < self.gamma_toy <= 2.0:
            raise ValueError("gamma_toy must lie in (0, 2]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def sigmoid(k):
    k = np.asarray(k, dtype=float)
    # split branches keep exp from overflowing for large |k|
    e = np.exp(-np.abs(k))
    return np.where(k >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def step_toy_generator(x, kappa, zeta, params: ToyParams):
    """One step of the stochastic-feedback-gain system; returns ``(x', kappa')``."""
    x = np.asarray(x, dtype=float)
    return x - params.gamma_toy * sigmoid(kappa) * x, np.asarray(kappa, dtype=float) + zeta
