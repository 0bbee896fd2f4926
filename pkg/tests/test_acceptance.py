"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line (also collected in the terminal summary).
The trained models are cached in the pytest cache directory; run with
``--cache-clear`` to retrain from scratch.
"""

import filecmp
import time

import numpy as np
import pytest
import torch

import protocols
from protocols import CAR_DYN, TOY, TOY_DYN
from feasible_brnn.adaptation import AdaptConfig, ParticleSet, adapt_stream, refit, weigh_particles
from feasible_brnn.brnn import predict_states, trajectory_likelihood
from feasible_brnn.data import Segment, TrajectoryRecord, gen_car_following_dataset, gen_toy_dataset, toy_segments, windows
from feasible_brnn.dynamics import ToyParams
from feasible_brnn.evaluation import estimate_log_likelihood, per_step_kl, split_horizon_summary
from feasible_brnn.gmm import fit_em, joint_training_data
from feasible_brnn.policy import FeatureNormalizer, forward, sample_posterior
from feasible_brnn.training import EnergyNoise, TrainConfig, energy, energy_gradient

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
ADAPT_SIGMA_V = 1e4  # picked on validation streams from {3e2, 1e3, 3e3, 1e4}


def test_gradient_gate(verdict):
    from test_training import tiny_problem

    t0 = time.perf_counter()
    q, data, rng = tiny_problem(seed=11)
    cfg = TrainConfig(alpha=0.5, mc_samples=3, horizon=2)
    noise = EnergyNoise.draw(q, TOY_DYN, len(data), 2, 3, rng)
    _, grads = energy_gradient(q, data, cfg, rng, TOY_DYN, noise=noise)
    step, worst, count = 1e-4, 0.0, 0
    for name, p in zip(q.parameter_names(), q.parameters()):
        for idx in np.ndindex(*p.shape):
            vals = []
            for sign in (1, -1):
                qq = q.clone()
                target = dict(zip(qq.parameter_names(), qq.parameters()))[name]
                with torch.no_grad():
                    target[idx] += sign * step
                vals.append(energy(qq, data, cfg, rng, TOY_DYN, noise=noise))
            fd = (vals[0] - vals[1]) / (2 * step)
            g = float(grads[name][idx])
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-3))
            count += 1
    took = time.perf_counter() - t0
    ok = worst < 1e-4 and took < 60
    assert verdict("gradient gate", ok, f"{count} parameters, worst relative error {worst:.2e}, {took:.1f}s")


def test_toy_multimodality(models, verdict):
    truth = np.stack([s.states[1:, 0] for s in toy_segments(TOY, 5000, 10_000)])[:, 14]
    dips = {}
    for alpha in (1.0, 1e-6):
        q = models.get(f"toy-ss-0-{alpha}", lambda a=alpha: protocols.toy_single_step(0, a))
        x15 = predict_states(q, np.array([[[TOY.x0]]]), np.zeros((1, 15, 0)), TOY_DYN, 5000,
                             np.random.default_rng(1))[:, 0, 14, 0]
        dip_truth, dips[alpha], _, _ = protocols.log_histogram_dip(truth, x15)
    ok = dips[1.0] >= 0.3 and dips[1e-6] < 0.3
    assert verdict("toy multi-modality", ok,
                   f"log-x15 histogram dip alpha=1: {dips[1.0]:.2f}, alpha=1e-6: {dips[1e-6]:.2f} "
                   f"(generator {dip_truth:.2f}, threshold 0.30)")


def test_recurrent_beats_single_step(models, verdict):
    wins, rows = 0, []
    for seed in SEEDS:
        single = models.get(f"toy-ss-{seed}-1.0", lambda s=seed: protocols.toy_single_step(s, 1.0))
        rec = models.get(f"toy-rec-{seed}", lambda s=seed, b=single: protocols.toy_recurrent(b, s))
        truth = np.stack([s.states[1:, 0] for s in toy_segments(TOY, 5000, 20_000 + seed)])
        kls = []
        for q in (single, rec):
            x = predict_states(q, np.array([[[TOY.x0]]]), np.zeros((1, 15, 0)), TOY_DYN, 5000,
                               np.random.default_rng(100 + seed))[:, 0, :, 0]
            kls.append(per_step_kl(truth, x)[11:15])
        won = bool(np.all(kls[1] < kls[0]))
        wins += won
        rows.append(f"seed {seed}: {kls[0].mean():.3f}->{kls[1].mean():.3f}{'' if won else '*'}")
    assert verdict("recurrent vs single-step KL (steps 12-15)", wins >= 4, f"{wins}/5 seeds; " + ", ".join(rows))


def _adaptation_series(q0, reps, tag, n_eval=20, S=1000):
    """Average per-step log likelihood of held-out unimodal trajectories after
    0..9 sequential adaptation iterations, one row per repetition."""
    p30 = ToyParams(horizon=30)
    cfg = AdaptConfig(u=30, M=1000, sigma_v=np.array([[ADAPT_SIGMA_V]]))
    series, seen = np.zeros((reps, 10)), np.zeros((reps, 9, 2))
    for r in range(reps):
        rng = np.random.default_rng([tag, r])
        held_out = windows(toy_segments(TOY, n_eval, int(rng.integers(2**31)), unimodal=1), 0, 15, 15, "toy")
        eval_seed = int(rng.integers(2**31))
        q = q0
        for i in range(10):
            if i:
                seg = toy_segments(p30, 1, int(rng.integers(2**31)), unimodal=1)[0]
                q = adapt_stream(q, seg.states, seg.ego, TOY_DYN, cfg, rng).posteriors[-1]
                own = windows([Segment(seg.states[:16], seg.ego[:16])], 0, 15, 15, "toy")
                for j, model in enumerate((q, q0)):
                    seen[r, i - 1, j] = estimate_log_likelihood(model, own, TOY_DYN, S,
                                                                np.random.default_rng(eval_seed))[1][0] / 15
            series[r, i] = estimate_log_likelihood(q, held_out, TOY_DYN, S,
                                                   np.random.default_rng(eval_seed))[1].mean() / 15
    return series, seen


def test_adaptation_gain(models, verdict):
    single = models.get("toy-ss-0-1.0", lambda: protocols.toy_single_step(0, 1.0))
    q0 = models.get("toy-rec-0", lambda: protocols.toy_recurrent(single, 0))
    series, seen = _adaptation_series(q0, reps=50, tag=11)
    mean = series.mean(axis=0)
    gain = series[:, 9] - series[:, 0]
    slope = np.polyfit(np.arange(10), mean, 1)[0]
    ok = mean[9] > mean[0] and slope > 0
    own_gain = seen[:, 8, 0] - seen[:, 8, 1]
    assert verdict("adaptation gain", ok,
                   f"held-out loglik/step unadapted {mean[0]:.3f}, iteration 9 {mean[9]:.3f} "
                   f"(gain {gain.mean():.3f} +- {gain.std() / np.sqrt(len(gain)):.3f}), slope {slope:.4f}; "
                   f"adapted-trajectory gain at iteration 9 {own_gain.mean():.3f}")


def test_car_following_horizon_ordering(models, verdict):
    seed = 0
    base = models.get(f"car-pre-{seed}", lambda: protocols.car_pretrained(seed))
    _, _, te = protocols.car_splits(seed)
    test = protocols.car_windows(te, 30)
    test = test.subset(np.arange(0, len(test), max(1, len(test) // 60)))
    stats = {}
    for h in (1, 10, 30):
        q = models.get(f"car-h{h}-{seed}", lambda hh=h: protocols.car_horizon(base, seed, hh))
        per_step, _ = estimate_log_likelihood(q, test, CAR_DYN, 100, np.random.default_rng(3))
        stats[h] = split_horizon_summary(per_step)[1]
    n = len(test)

    def se(a, b):
        return float(np.sqrt((stats[a][1] ** 2 + stats[b][1] ** 2) / n))

    ok = (stats[30][0] >= stats[1][0]
          and stats[30][0] >= stats[10][0] - se(30, 10)
          and stats[10][0] >= stats[1][0] - se(10, 1))
    table = ", ".join(f"h={h} {m:.2f}+-{s:.2f}" for h, (m, s) in stats.items())
    assert verdict("car-following horizon ordering", ok,
                   f"second-15-step loglik {table}; n={n}, SE(30,10)={se(30, 10):.2f}, SE(10,1)={se(10, 1):.2f}")


def test_kalman_belief_exactness(verdict):
    from test_brnn import car_posterior, car_request, random_weights

    rng = np.random.default_rng(2024)
    q, dyn = car_posterior(rng)
    req = car_request(rng, h=1)
    ws = random_weights(q.shape, rng)
    x0 = req.history[-1]
    _, beliefs = trajectory_likelihood(ws, TrajectoryRecord(req.history, req.ego_actions, x0[None]), dyn,
                                       q.sigma_eps, rng, q.normalizer)
    a_bar = forward(ws, req.history.ravel(), q.normalizer).numpy()
    n = 1_000_000
    eps = rng.multivariate_normal(np.zeros(2), q.sigma_eps.detach().numpy(), size=n)
    omega = rng.multivariate_normal(np.zeros(3), dyn.sigma_omega, size=n)
    x1 = dyn.h(np.broadcast_to(x0, (n, 3)), a_bar + eps, np.broadcast_to(req.ego_actions[0], (n, 2))) + omega
    mean, cov = beliefs[0].mean, beliefs[0].cov
    sd = np.sqrt(np.diag(cov))
    mean_err = np.max(np.abs(x1.mean(0) - mean) / sd)
    cov_err = np.max(np.abs(np.cov(x1.T) - cov) / np.outer(sd, sd))
    ok = mean_err < 0.02 and cov_err < 0.02
    assert verdict("KF exactness", ok, f"max mean error {mean_err:.4f} sd, max covariance error {cov_err:.4f} "
                                       f"(relative to sd products), 1e6 samples")


def _clipped(cov, floor=1e-6):
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def test_em_monotonicity(verdict):
    rng = np.random.default_rng(5)
    toy = gen_toy_dataset(TOY, 400, 3, h=1)
    car = gen_car_following_dataset(40, 4, m=9, h=1, stride=5)
    results = []
    ok = True
    for name, ds, dyn, K in (("toy", toy, TOY_DYN, 3), ("car", car, CAR_DYN, 4)):
        norm = FeatureNormalizer.fit(ds.all_states(), ds.actions(dyn), ds.m + 1)
        x = joint_training_data(ds, dyn, norm)
        model = fit_em(x, K, max_iter=100, tol=0.0, rng=rng)
        worst = float(np.min(np.diff(model.log_likelihood_trace)))
        single = fit_em(x, 1, rng=rng)
        sample_cov = np.cov(x.T, bias=True)
        # the car features are rank deficient, so the 1e-6 eigenvalue floor binds there
        moment_err = max(np.max(np.abs(single.means[0] - x.mean(0))),
                         np.max(np.abs(single.covs[0] - _clipped(sample_cov))))
        floor_shift = np.max(np.abs(single.covs[0] - sample_cov))
        ok &= worst >= -1e-9 and moment_err < 1e-12
        results.append(f"{name}: {len(model.log_likelihood_trace)} iterations, min step {worst:.1e}, "
                       f"K=1 moment error {moment_err:.1e} (floor shift {floor_shift:.1e})")
    assert verdict("EM monotonicity", ok, "; ".join(results))


def test_particle_identities(verdict):
    from test_adaptation import posterior

    rng = np.random.default_rng(9)
    q = posterior(rng)
    ps = ParticleSet(sample_posterior(q, rng, 300), np.full(300, -3.7))
    flat = ps.particles.flat().numpy()
    r = refit(ps, q)
    uniform_err = max(np.max(np.abs(r.flat_mean() - flat.mean(0))), np.max(np.abs(r.flat_var() - flat.var(0))))
    ps2 = ParticleSet(ps.particles, rng.standard_normal(300) * 4)
    a, b = refit(ps2, q), refit(ParticleSet(ps2.particles, ps2.log_weights + 987.6), q)
    shift_err = max(np.max(np.abs(a.flat_mean() - b.flat_mean())), np.max(np.abs(a.flat_var() - b.flat_var())))
    states = np.array([[120.0], [100.0], [85.0], [70.0]])
    scale = float(states.var()) + float(states.mean()) ** 2
    cfg = AdaptConfig(u=3, M=500, sigma_v=np.array([[1e6 * scale]]))
    flat_ps = weigh_particles(q, states, np.zeros((3, 0)), TOY_DYN, cfg, rng)
    w = np.exp(flat_ps.log_weights - np.logaddexp.reduce(flat_ps.log_weights))
    dev = float(np.max(np.abs(w * cfg.M - 1)))
    ok = uniform_err <= 1e-12 and shift_err <= 1e-12 and dev < 1e-3
    assert verdict("particle identities", ok,
                   f"uniform refit {uniform_err:.1e}, shift invariance {shift_err:.1e}, "
                   f"large-noise weight deviation {dev:.1e}")


def test_reproducibility(tmp_path, verdict):
    from test_cli import run

    def pipeline(out):
        toy = ("--scenario", "toy", "--seed", 21, "--output-dir", out / "toy")
        car = ("--scenario", "car_following", "--seed", 22, "--output-dir", out / "car")
        codes = [run("gen-data", *toy, "--n", 40), run("train", *toy, "--epochs", 2, "--mc-samples", 4),
                 run("predict", *toy, "--samples", 10), run("eval", *toy, "--samples", 5),
                 run("adapt", *toy), run("plot-data", *toy, "--samples", 5, "--steps", "1,5,10,15"),
                 run("gen-data", *car, "--n", 12),
                 run("train", *car, "--epochs", 1, "--mc-samples", 2, "--horizon", 5),
                 run("eval", *car, "--samples", 3, "--horizon", 30, "--gmm", 2)]
        assert codes == [0] * len(codes)

    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    differing, compared = [], 0
    for sub in ("toy", "car", "toy/plot_data"):
        left = tmp_path / "a" / sub
        files = sorted(p.name for p in left.iterdir() if p.is_file())
        match, mismatch, errors = filecmp.cmpfiles(left, tmp_path / "b" / sub, files, shallow=False)
        compared += len(files)
        differing += [f"{sub}/{f}" for f in mismatch + errors]
    ok = not differing and compared > 0
    assert verdict("reproducibility", ok, f"{compared} output files compared, differing: {differing or 'none'}")
