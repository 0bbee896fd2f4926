"""Command-line front end: gen-data, train, predict, adapt, eval, plot-data.

All subcommands share one JSON experiment config (``--config``) whose values
can be overridden by flags. Outputs go to ``output_dir`` only.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import data as data_io
from .adaptation import AdaptConfig, adapt_stream
from .brnn import BeliefCovarianceError, PredictionRequest, predict_states, write_trajectories_csv
from .dynamics import ToyParams, dynamics_by_name
from .evaluation import (
    HistogramSpec,
    aggregate_loglik,
    estimate_log_likelihood,
    histogram_density,
    per_step_kl,
    split_horizon_summary,
    write_histogram_csv,
    write_json,
    write_loglik_csv,
)
from .gmm import ComponentCollapseError, fit_gmm_policy, gmm_rollout
from .math_core import ParticleDegeneracyError
from .policy import FeatureNormalizer, NetworkShape, VariationalPosterior, init_posterior
from .training import NonFiniteEnergyError, TrainConfig, TrainingDiverged, train, write_trace_csv

log = logging.getLogger("feasible_brnn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

NUMERICAL_ERRORS = (
    NonFiniteEnergyError,
    TrainingDiverged,
    FloatingPointError,
    np.linalg.LinAlgError,
    torch.linalg.LinAlgError,
    BeliefCovarianceError,
    ParticleDegeneracyError,
    ComponentCollapseError,
)

DEFAULTS = {
    "toy": {
        "data": {"n": 5000, "split": [0.8, 0.1, 0.1]},
        "model": {"hidden": [50, 50], "m": 0, "prior_var_w": 1.0, "prior_var_z": 1.0},
        "train": {"alpha": 1.0, "learning_rate": 1e-4, "batch_size": 50, "mc_samples": 100,
                  "epochs": 200, "horizon": 15},
        "adapt": {"u": 30, "M": 1000, "variance_floor": 1e-8},
        "eval": {"samples": 100, "bins": 50, "n_test": 100, "kl_samples": 5000},
    },
    "car_following": {
        "data": {"n": 400, "split": [0.8, 0.1, 0.1], "stride": 10},
        "model": {"hidden": [50, 50, 50], "m": 9, "prior_var_w": 1.0, "prior_var_z": 1.0},
        "train": {"alpha": 0.5, "learning_rate": 1e-4, "batch_size": 250, "mc_samples": 1000,
                  "epochs": 100, "horizon": 30},
        "adapt": {"u": 30, "M": 1000, "variance_floor": 1e-8},
        "eval": {"samples": 100, "bins": 50, "n_test": 100, "split": 15},
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_experiment(args) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        cfg = json.loads(path.read_text())
    scenario = getattr(args, "scenario", None) or cfg.get("scenario", "toy")
    csv_path = None
    if scenario not in DEFAULTS:
        csv_path = Path(scenario)
        if not csv_path.exists():
            raise ConfigError(f"scenario must be toy, car_following or an existing CSV path: {scenario}")
        scenario = "car_following"
    cfg = _merge(copy.deepcopy(DEFAULTS[scenario]), cfg)
    cfg["scenario"] = scenario
    if csv_path is not None:
        cfg["csv"] = str(csv_path)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None and os.environ.get("BRNN_SEED"):
        seed = int(os.environ["BRNN_SEED"])
    if seed is None:
        raise ConfigError("no seed given (use --seed, the config file or BRNN_SEED)")
    cfg["seed"] = int(seed)
    out = args.output_dir or cfg.get("output_dir")
    if not out:
        raise ConfigError("no output directory given")
    cfg["output_dir"] = str(out)
    if args.alpha is not None:
        cfg["train"]["alpha"] = args.alpha
    if args.horizon is not None:
        cfg["train"]["horizon"] = args.horizon
    if args.samples is not None:
        cfg["eval"]["samples"] = args.samples
    for key in ("n", "epochs", "mc_samples", "max_iters"):
        val = getattr(args, key, None)
        if val is not None:
            (cfg["data"] if key == "n" else cfg["train"])[key] = val
    if "toy" in cfg:
        cfg["toy"] = dict(cfg["toy"])
    return cfg


def _toy_params(cfg) -> ToyParams:
    return ToyParams(**cfg.get("toy", {}))


def _segments(cfg):
    if cfg.get("csv"):
        segs, rejected = data_io.load_segments_csv(cfg["csv"], "car_following")
        log.info("loaded %d segments (%d rows rejected)", len(segs), rejected)
        return segs
    seed, n = cfg["seed"], int(cfg["data"]["n"])
    if cfg["scenario"] == "toy":
        return data_io.toy_segments(_toy_params(cfg), n, seed)
    ccfg = data_io.CarFollowingConfig(**cfg["data"].get("generator", {}))
    return data_io.car_following_segments(n, seed, ccfg)


def _dataset_path(cfg) -> Path:
    return Path(cfg["output_dir"]) / "dataset.csv"


def _load_splits(cfg, h=None):
    """Train/val/test record sets cut from the stored (or regenerated) segments."""
    path = _dataset_path(cfg)
    if path.exists():
        segs, _ = data_io.load_segments_csv(path, "toy" if cfg["scenario"] == "toy" else "car_following")
    else:
        segs = _segments(cfg)
    train_s, val_s, test_s = data_io.split_segments(segs, cfg["seed"], cfg["data"]["split"])
    m = int(cfg["model"]["m"])
    h = int(cfg["train"]["horizon"]) if h is None else h
    stride = int(cfg["data"].get("stride", 1))
    if cfg["scenario"] == "toy":
        mk = lambda s: data_io.windows(s, m, h, 1 if h < len(s[0]) - 1 else h, "toy") if s else None
    else:
        mk = lambda s: data_io.windows(s, m, h, stride, "car_following") if s else None
    return mk(train_s), mk(val_s), mk(test_s), (train_s, val_s, test_s)


def _model_path(cfg, name="model") -> Path:
    return Path(cfg["output_dir"]) / f"{name}.json"


def _load_model(cfg, args) -> VariationalPosterior:
    path = Path(getattr(args, "model", None) or _model_path(cfg))
    if not path.exists():
        raise ConfigError(f"model checkpoint {path} not found (run train first)")
    return VariationalPosterior.load(path)


# ----------------------------------------------------------------- commands


def cmd_gen_data(cfg, args):
    out = Path(cfg["output_dir"])
    segs = _segments(cfg)
    data_io.save_segments_csv(segs, _dataset_path(cfg), "toy" if cfg["scenario"] == "toy" else "car_following")
    dyn = dynamics_by_name(cfg["scenario"])
    train_ds, val_ds, test_ds, parts = _load_splits(cfg)
    norm = FeatureNormalizer.fit(train_ds.all_states(), train_ds.actions(dyn), int(cfg["model"]["m"]) + 1)
    data_io.write_manifest(
        out / "manifest.json",
        scenario=cfg["scenario"],
        seed=cfg["seed"],
        split_seed=cfg["seed"],
        n_segments=len(segs),
        segments={"train": len(parts[0]), "val": len(parts[1]), "test": len(parts[2])},
        records={"train": len(train_ds), "val": len(val_ds) if val_ds else 0, "test": len(test_ds) if test_ds else 0},
        normalizer=norm.to_dict(),
        toy=dataclasses.asdict(_toy_params(cfg)) if cfg["scenario"] == "toy" else None,
    )
    return EXIT_OK


def cmd_train(cfg, args):
    dyn = dynamics_by_name(cfg["scenario"])
    tcfg = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    train_ds, val_ds, _, _ = _load_splits(cfg, h=tcfg.horizon)
    m = int(cfg["model"]["m"])
    norm = FeatureNormalizer.fit(train_ds.all_states(), train_ds.actions(dyn), m + 1)
    shape = NetworkShape.for_policy(m + 1, dyn.state_dim, cfg["model"]["hidden"], dyn.action_dim)
    rng = np.random.default_rng(cfg["seed"])
    init = getattr(args, "init", None)
    if init:
        q0 = VariationalPosterior.load(init)
    else:
        q0 = init_posterior(shape, norm, len(train_ds), rng, cfg["model"]["prior_var_w"],
                            cfg["model"]["prior_var_z"])
    res = train(q0, train_ds, tcfg, rng, dyn, val=val_ds)
    name = getattr(args, "name", None) or "model"
    res.posterior.meta["scenario"] = cfg["scenario"]
    res.posterior.save(_model_path(cfg, name))
    write_trace_csv(Path(cfg["output_dir"]) / f"{name}_energy.csv", res.trace)
    return EXIT_OK


def _test_records(cfg, h):
    _, _, test_ds, _ = _load_splits(cfg, h=h)
    if test_ds is None or not len(test_ds):
        raise ConfigError("test split is empty")
    n = min(int(cfg["eval"].get("n_test", 100)), len(test_ds))
    pick = np.random.default_rng([cfg["seed"], 11]).choice(len(test_ds), size=n, replace=False)
    return test_ds.subset(np.sort(pick))


def cmd_predict(cfg, args):
    dyn = dynamics_by_name(cfg["scenario"])
    q = _load_model(cfg, args)
    h = int(cfg["train"]["horizon"]) if args.horizon is None else args.horizon
    if cfg["scenario"] == "toy":
        req = PredictionRequest(np.array([[_toy_params(cfg).x0]]), np.zeros((h, 0)), h)
    else:
        test = _test_records(cfg, h)
        rec = test[int(args.record)]
        req = PredictionRequest.from_record(rec)
    S = int(cfg["eval"]["samples"])
    states = predict_states(q, req.history[None], req.ego_actions[None], dyn, S,
                            np.random.default_rng([cfg["seed"], 1]))[:, 0]
    write_trajectories_csv(Path(cfg["output_dir"]) / "predictions.csv", states, dyn.state_names)
    return EXIT_OK


def cmd_adapt(cfg, args):
    dyn = dynamics_by_name(cfg["scenario"])
    q = _load_model(cfg, args)
    acfg = AdaptConfig(**{k: v for k, v in cfg["adapt"].items() if k != "updates"})
    rng = np.random.default_rng([cfg["seed"], 2])
    if cfg["scenario"] == "toy":
        p = dataclasses.replace(_toy_params(cfg), horizon=acfg.u * int(cfg["adapt"].get("updates", 1)))
        seg = data_io.toy_segments(p, 1, cfg["seed"] + 1, unimodal=1)[0]
    else:
        _, _, _, (_, _, test_s) = _load_splits(cfg)
        if not test_s:
            raise ConfigError("no test segments to adapt on")
        seg = test_s[int(args.record) % len(test_s)]
    session = adapt_stream(q, seg.states, seg.ego, dyn, acfg, rng)
    out = Path(cfg["output_dir"])
    session.write_csv(out / "adapt_session.csv")
    with open(out / "adapt_posteriors.json", "w") as fh:
        json.dump([p.to_dict() for p in session.posteriors], fh)
    return EXIT_OK


def _eval_models(cfg, args):
    names = args.models.split(",") if getattr(args, "models", None) else ["model"]
    models = {}
    for n in names:
        path = _model_path(cfg, n)
        if not path.exists():
            raise ConfigError(f"model checkpoint {path} not found")
        models[n] = VariationalPosterior.load(path)
    return models


def cmd_eval(cfg, args):
    dyn = dynamics_by_name(cfg["scenario"])
    h_eval = int(args.horizon or cfg["eval"].get("horizon") or
                 (30 if cfg["scenario"] == "car_following" else _toy_params(cfg).horizon))
    test = _test_records(cfg, h_eval)
    S = int(cfg["eval"]["samples"])
    rows, summary = [], {}
    split = int(cfg["eval"].get("split", 15))
    for name, q in _eval_models(cfg, args).items():
        per_step, total = estimate_log_likelihood(q, test, dyn, S, np.random.default_rng([cfg["seed"], 3]))
        for n in range(len(test)):
            rows += [(name, n, i + 1, per_step[n, i]) for i in range(h_eval)]
        first, second = split_horizon_summary(per_step, min(split, h_eval))
        summary[name] = {"first": {"mean": first[0], "std": first[1]},
                         "second": {"mean": second[0], "std": second[1]} if h_eval > split else None,
                         "total_mean": float(total.mean())}
    if getattr(args, "gmm", 0):
        train_ds, _, _, _ = _load_splits(cfg, h=1)
        q_any = next(iter(_eval_models(cfg, args).values()))
        pol = fit_gmm_policy(train_ds, dyn, q_any.normalizer, int(args.gmm), np.random.default_rng(cfg["seed"]))
        _, ll = gmm_rollout(pol, test.history, test.ego, dyn, S, np.random.default_rng([cfg["seed"], 4]),
                            future=test.future)
        per_step = np.array([aggregate_loglik(ll[:, n])[0] for n in range(len(test))])
        for n in range(len(test)):
            rows += [("gmm", n, i + 1, per_step[n, i]) for i in range(h_eval)]
        first, second = split_horizon_summary(per_step, min(split, h_eval))
        summary["gmm"] = {"first": {"mean": first[0], "std": first[1]},
                          "second": {"mean": second[0], "std": second[1]} if h_eval > split else None}
    out = Path(cfg["output_dir"])
    write_loglik_csv(out / "metrics_loglik.csv", rows)
    write_json(out / "metrics_summary.json", summary)
    return EXIT_OK


def cmd_plot_data(cfg, args):
    if cfg["scenario"] != "toy":
        raise ConfigError("plot-data histograms need the toy scenario (actual distribution known)")
    dyn = dynamics_by_name("toy")
    params = _toy_params(cfg)
    steps = [int(s) for s in args.steps.split(",")]
    n = int(cfg["eval"].get("kl_samples", 5000))
    actual = np.stack([s.states[1:, 0] for s in data_io.toy_segments(params, n, cfg["seed"] + 1000)])
    spec = HistogramSpec(bins=int(cfg["eval"]["bins"]))
    out = Path(cfg["output_dir"]) / "plot_data"
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    for name, q in _eval_models(cfg, args).items():
        pred = predict_states(q, np.array([[[params.x0]]]), np.zeros((1, params.horizon, 0)), dyn, n,
                              np.random.default_rng([cfg["seed"], 5]))[:, 0, :, 0]
        for k in steps:
            edges = spec.edges(actual[:, k - 1], pred[:, k - 1])
            write_histogram_csv(out / f"hist_{name}_step{k}.csv", edges, histogram_density(pred[:, k - 1], edges))
            write_histogram_csv(out / f"hist_actual_{name}_step{k}.csv", edges,
                                histogram_density(actual[:, k - 1], edges))
        kl = per_step_kl(actual, pred, spec)
        test = data_io.windows(data_io.toy_segments(params, int(cfg["eval"]["n_test"]), cfg["seed"] + 2000),
                               0, params.horizon, params.horizon)
        per_step, _ = estimate_log_likelihood(q, test, dyn, int(cfg["eval"]["samples"]),
                                              np.random.default_rng([cfg["seed"], 6]))
        series[name] = (kl, per_step.mean(axis=0))
    with open(out / "per_step_series.csv", "w") as fh:
        fh.write("model,step,kl,loglik\n")
        for name, (kl, ll) in series.items():
            for i in range(len(kl)):
                fh.write(f"{name},{i + 1},{float(kl[i])!r},{float(ll[i])!r}\n")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "plot-data": cmd_plot_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feasible-brnn", description=__doc__, allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--scenario", help="toy, car_following or a trajectory CSV path")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--horizon", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-data":
            p.add_argument("--n", type=int)
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--mc-samples", dest="mc_samples", type=int)
            p.add_argument("--max-iters", dest="max_iters", type=int)
            p.add_argument("--name", help="checkpoint name (default: model)")
            p.add_argument("--init", help="warm-start from this checkpoint")
        if name in ("predict", "adapt"):
            p.add_argument("--model")
            p.add_argument("--record", type=int, default=0)
        if name in ("eval", "plot-data"):
            p.add_argument("--models", help="comma-separated checkpoint names")
        if name == "eval":
            p.add_argument("--gmm", type=int, default=0, help="also evaluate a K-component GMM policy")
        if name == "plot-data":
            p.add_argument("--steps", default="1,5,10,15")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    cfg = None
    try:
        cfg = load_experiment(args)
        Path(cfg["output_dir"]).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except NUMERICAL_ERRORS as exc:
        msg = f"numerical failure: {exc}"
        if cfg is not None:
            diag = Path(cfg["output_dir"]) / "numerical_failure.txt"
            diag.write_text(traceback.format_exc())
            msg += f" (details in {diag})"
        print(msg, file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        # ConfigError and invalid config values
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
