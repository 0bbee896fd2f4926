"""Synthetic trajectory generation, CSV ingestion and window extraction.

A *segment* is one contiguous trajectory: ``states`` of shape ``(T, dx)``
and leader (ego) actions ``ego`` of shape ``(T, dq)`` where row ``t`` is the
action applied between frames ``t`` and ``t + 1`` (the last row is unused).
Records are windows cut from segments: ``m + 1`` history states, ``h`` ego
actions and ``h`` future states.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import CAR_SIGMA_OMEGA, DT, ToyParams, sigmoid

log = logging.getLogger(__name__)

CAR_CSV_HEADER = ("vehicle_id", "frame", "d_pq", "v_p", "v_q", "dd_q", "dv_q")
TOY_CSV_HEADER = ("trajectory_id", "step", "x")
MAX_SPEED = 60.0


@dataclass(frozen=True)
class TrajectoryRecord:
    history: np.ndarray
    ego: np.ndarray
    future: np.ndarray

    @property
    def m(self) -> int:
        return self.history.shape[0] - 1

    @property
    def h(self) -> int:
        return self.future.shape[0]


@dataclass
class Segment:
    states: np.ndarray
    ego: np.ndarray
    segment_id: int = 0

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass
class Dataset:
    """Stacked records; ``traj_id`` names the source segment of each window."""

    history: np.ndarray
    ego: np.ndarray
    future: np.ndarray
    traj_id: np.ndarray
    scenario: str = "toy"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.history.shape[0]
        if not (self.ego.shape[0] == self.future.shape[0] == self.traj_id.shape[0] == n):
            raise ValueError("record arrays disagree on record count")
        if self.ego.shape[1] != self.future.shape[1]:
            raise ValueError("ego action and future lengths differ")

    def __len__(self) -> int:
        return self.history.shape[0]

    def __getitem__(self, i) -> TrajectoryRecord:
        return TrajectoryRecord(self.history[i], self.ego[i], self.future[i])

    @property
    def m(self) -> int:
        return self.history.shape[1] - 1

    @property
    def h(self) -> int:
        return self.future.shape[1]

    @property
    def state_dim(self) -> int:
        return self.history.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.history[idx], self.ego[idx], self.future[idx], self.traj_id[idx],
                       self.scenario, dict(self.info))

    def all_states(self) -> np.ndarray:
        return np.concatenate([self.history, self.future], axis=1).reshape(-1, self.state_dim)

    def actions(self, dyn) -> np.ndarray:
        """Follower actions implied by consecutive states, ``(N, h, da)``."""
        path = np.concatenate([self.history[:, -1:], self.future], axis=1)
        return dyn.inverse(path[:, :-1], path[:, 1:], self.ego)


def empty_dataset(m: int, h: int, state_dim: int, ego_dim: int, scenario: str) -> Dataset:
    return Dataset(np.zeros((0, m + 1, state_dim)), np.zeros((0, h, ego_dim)),
                   np.zeros((0, h, state_dim)), np.zeros(0, dtype=int), scenario)


def windows(segments, m: int, h: int, stride: int = 1, scenario: str = "toy") -> Dataset:
    """Cut every segment into records of ``m + 1`` history and ``h`` future states."""
    hist, ego, fut, ids = [], [], [], []
    dx = dq = None
    for seg in segments:
        T = len(seg)
        dx, dq = seg.states.shape[1], seg.ego.shape[1]
        for k in range(m, T - h, stride):
            hist.append(seg.states[k - m : k + 1])
            ego.append(seg.ego[k : k + h])
            fut.append(seg.states[k + 1 : k + h + 1])
            ids.append(seg.segment_id)
    if not hist:
        return empty_dataset(m, h, dx or 1, dq or 0, scenario)
    return Dataset(np.stack(hist), np.stack(ego), np.stack(fut), np.asarray(ids), scenario)


def split_segments(segments, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Shuffle whole segments into train/validation/test lists."""
    segments = list(segments)
    order = np.random.default_rng(seed).permutation(len(segments))
    n_train = int(round(fractions[0] * len(segments)))
    n_val = int(round(fractions[1] * len(segments)))
    pick = lambda idx: [segments[i] for i in sorted(idx)]
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


# --------------------------------------------------------------------- toy


def toy_segments(params: ToyParams, n: int, seed: int, unimodal: int | None = None) -> list:
    """Simulate ``n`` trajectories ``x_{0:horizon}`` of the stochastic-gain system.

    ``unimodal`` = 1 or 2 draws every initial gain from that mixture component
    only (used for adaptation streams).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    kappa = sample_toy_kappa0(params, n, rng, unimodal)
    T = params.horizon
    x = np.empty((n, T + 1))
    x[:, 0] = params.x0
    zeta = rng.standard_normal((n, T)) * math.sqrt(params.var_zeta)
    for i in range(T):
        x[:, i + 1] = x[:, i] - params.gamma_toy * sigmoid(kappa) * x[:, i]
        kappa = kappa + zeta[:, i]
    return [Segment(x[j, :, None].copy(), np.zeros((T + 1, 0)), j) for j in range(n)]


def sample_toy_kappa0(params: ToyParams, n: int, rng, unimodal: int | None = None) -> np.ndarray:
    if unimodal is None:
        first = rng.random(n) < params.p1
    else:
        first = np.full(n, unimodal == 1)
    u = rng.standard_normal(n)
    return np.where(first, params.mu1 + math.sqrt(params.var1) * u, params.mu2 + math.sqrt(params.var2) * u)


def gen_toy_dataset(params: ToyParams, n: int, seed: int, h: int | None = None) -> Dataset:
    """Toy records with ``m = 0``; ``h`` defaults to the full horizon (one record each)."""
    h = params.horizon if h is None else h
    ds = windows(toy_segments(params, n, seed), m=0, h=h, stride=1 if h < params.horizon else h)
    ds.info.update({"generator": "toy", "n_trajectories": n, "seed": seed})
    return ds


# ----------------------------------------------------------- car following


@dataclass(frozen=True)
class DriverParams:
    """Intelligent-driver-model parameters of one follower."""

    v0: float = 30.0  # desired speed, m/s
    T: float = 1.5  # time headway, s
    a: float = 1.2  # max acceleration, m/s^2
    b: float = 1.5  # comfortable deceleration, m/s^2
    s0: float = 2.0  # jam distance, m
    delta: float = 4.0

    def equilibrium_gap(self, v: float) -> float:
        """Gap at which a follower at speed ``v`` behind an equal-speed leader has zero acceleration."""
        frac = 1.0 - (v / self.v0) ** self.delta
        return (self.s0 + v * self.T) / math.sqrt(max(frac, 1e-6))


AGGRESSIVE = DriverParams(v0=33.0, T=0.9, a=2.0, b=2.5, s0=1.5)
TIMID = DriverParams(v0=27.0, T=2.2, a=0.8, b=1.2, s0=4.0)


@dataclass(frozen=True)
class CarFollowingConfig:
    segment_len: int = 120
    p_aggressive: float = 0.5
    param_jitter: float = 0.08  # relative sd of per-driver parameters
    action_noise: float = 0.05  # sd of follower speed change per step, m/s
    leader_accel_sd: float = 0.6  # m/s^2, piecewise-constant leader acceleration
    leader_hold: tuple = (5, 20)  # steps a leader acceleration is held
    leader_speed: tuple = (8.0, 28.0)
    sigma_omega: tuple = tuple(np.diag(CAR_SIGMA_OMEGA))


def idm_accel(d: DriverParams, gap, v, v_lead):
    gap = np.maximum(gap, 0.1)
    dv = v - v_lead
    s_star = d.s0 + np.maximum(0.0, v * d.T + v * dv / (2.0 * math.sqrt(d.a * d.b)))
    return d.a * (1.0 - (np.maximum(v, 0.0) / d.v0) ** d.delta - (s_star / gap) ** 2)


def sample_driver(cfg: CarFollowingConfig, rng) -> tuple[DriverParams, str]:
    style = "aggressive" if rng.random() < cfg.p_aggressive else "timid"
    base = AGGRESSIVE if style == "aggressive" else TIMID
    j = np.exp(cfg.param_jitter * rng.standard_normal(5))
    return DriverParams(base.v0 * j[0], base.T * j[1], base.a * j[2], base.b * j[3], base.s0 * j[4]), style


def leader_profile(cfg: CarFollowingConfig, n_steps: int, v_start: float, rng) -> np.ndarray:
    """Leader speeds from piecewise-constant accelerations, smoothed and clipped."""
    acc = np.empty(n_steps)
    t = 0
    while t < n_steps:
        hold = int(rng.integers(cfg.leader_hold[0], cfg.leader_hold[1] + 1))
        acc[t : t + hold] = rng.normal(0.0, cfg.leader_accel_sd)
        t += hold
    kernel = np.ones(5) / 5.0
    acc = np.convolve(acc, kernel, mode="same")
    v = np.empty(n_steps + 1)
    v[0] = v_start
    for i in range(n_steps):
        v[i + 1] = np.clip(v[i] + acc[i] * DT, *cfg.leader_speed)
    return v


def simulate_car_following(driver: DriverParams, leader_speeds, x0, rng,
                           action_noise: float = 0.0, sigma_omega=(0.0, 0.0, 0.0)) -> Segment:
    """Roll an IDM follower behind a leader with prescribed speeds.

    Follower displacement uses the trapezoid of its speeds; the leader's
    displacement likewise. Process noise is added to the recorded state.
    """
    leader_speeds = np.array(leader_speeds, dtype=float)
    n = len(leader_speeds) - 1
    states = np.empty((n + 1, 3))
    ego = np.zeros((n + 1, 2))
    states[0] = x0
    w_sd = np.sqrt(np.asarray(sigma_omega, dtype=float))
    for i in range(n):
        d, vp, vq = states[i]
        dv_q = leader_speeds[i + 1] - leader_speeds[i]
        dd_q = (2.0 * vq + dv_q) * 0.5 * DT
        acc = float(idm_accel(driver, d, vp, vq))
        dv_p = acc * DT + action_noise * rng.standard_normal()
        dv_p = max(dv_p, -vp)  # no reversing
        dd_p = (2.0 * vp + dv_p) * 0.5 * DT
        ego[i] = (dd_q, dv_q)
        omega = w_sd * rng.standard_normal(3)
        states[i + 1] = (d - dd_p + dd_q + omega[0], vp + dv_p + omega[1], vq + dv_q + omega[2])
        leader_speeds[i + 1] = states[i + 1, 2]
    return Segment(states, ego)


def car_following_segments(n: int, seed: int, cfg: CarFollowingConfig | None = None) -> list:
    """``n`` independent car-following segments from a two-style driver population."""
    cfg = cfg or CarFollowingConfig()
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for j in range(n):
        # per-trajectory seed keeps segments independent of generation order
        rng = np.random.default_rng([seed, j])
        while True:
            driver, style = sample_driver(cfg, rng)
            vq0 = rng.uniform(cfg.leader_speed[0] + 2.0, cfg.leader_speed[1] - 2.0)
            vp0 = max(vq0 + rng.normal(0.0, 1.0), 0.5)
            gap0 = driver.equilibrium_gap(vp0) * rng.uniform(0.8, 1.2)
            lead = leader_profile(cfg, cfg.segment_len - 1, vq0, rng)
            seg = simulate_car_following(driver, lead, (gap0, vp0, vq0), rng,
                                         cfg.action_noise, cfg.sigma_omega)
            if np.all(seg.states[:, 0] > 0):
                break
        seg.segment_id = j
        out.append(seg)
    return out


def gen_car_following_dataset(n: int, seed: int, cfg: CarFollowingConfig | None = None,
                              m: int = 9, h: int = 30, stride: int = 10) -> Dataset:
    ds = windows(car_following_segments(n, seed, cfg), m, h, stride, scenario="car_following")
    ds.info.update({"generator": "car_following", "n_trajectories": n, "seed": seed})
    return ds


# --------------------------------------------------------------------- CSV


def _fmt(v: float) -> str:
    return repr(float(v))


def save_segments_csv(segments, path, scenario: str = "car_following") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if scenario == "toy":
            w.writerow(TOY_CSV_HEADER)
            for seg in segments:
                for t, x in enumerate(seg.states[:, 0]):
                    w.writerow((seg.segment_id, t, _fmt(x)))
            return
        w.writerow(CAR_CSV_HEADER)
        for seg in segments:
            for t in range(len(seg)):
                row = (*seg.states[t], *seg.ego[t])
                w.writerow((seg.segment_id, t, *map(_fmt, row)))


def load_segments_csv(path, scenario: str = "car_following") -> tuple[list, int]:
    """Read segments; returns ``(segments, rejected_row_count)``.

    Consecutive frames of one id form a segment; a jump in frame numbering
    starts a new one. Car-following rows with speeds outside ``[0, 60]`` m/s
    are rejected (which also splits the segment).
    """
    header = TOY_CSV_HEADER if scenario == "toy" else CAR_CSV_HEADER
    segments, rejected = [], 0
    cur_states, cur_ego, cur_key = [], [], None

    def flush():
        if cur_states:
            segments.append(Segment(np.asarray(cur_states, dtype=float),
                                    np.asarray(cur_ego, dtype=float).reshape(len(cur_states), -1),
                                    len(segments)))
        cur_states.clear()
        cur_ego.clear()

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return [], 0
        if tuple(c.strip() for c in first) != header:
            raise ValueError(f"{path}: line 1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vid, frame = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}: line {lineno}: non-finite value")
            if scenario != "toy" and not all(0.0 <= v <= MAX_SPEED for v in vals[1:3]):
                rejected += 1
                flush()
                cur_key = None
                continue
            if cur_key is None or vid != cur_key[0] or frame != cur_key[1] + 1:
                flush()
            cur_key = (vid, frame)
            if scenario == "toy":
                cur_states.append(vals)
                cur_ego.append([])
            else:
                cur_states.append(vals[:3])
                cur_ego.append(vals[3:])
    flush()
    if rejected:
        log.warning("%s: rejected %d rows failing speed bounds", path, rejected)
    return segments, rejected


def load_trajectories_csv(path, m: int = 9, h: int = 30, stride: int = 1,
                          scenario: str = "car_following") -> Dataset:
    segments, rejected = load_segments_csv(path, scenario)
    ds = windows(segments, m, h, stride, scenario)
    if not segments:
        ds = empty_dataset(m, h, 1 if scenario == "toy" else 3, 0 if scenario == "toy" else 2, scenario)
    ds.info.update({"source": str(path), "rows_rejected": rejected, "n_segments": len(segments)})
    return ds


def write_manifest(path, **fields) -> None:
    with open(path, "w") as fh:
        json.dump(fields, fh, indent=1, sort_keys=True)


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
