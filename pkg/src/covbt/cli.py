"""Command-line entry points: simulate, estimate, marginal-bt.

Each command reads a JSON config (unknown keys are rejected), writes its
outputs atomically and exits with 0 on success, 2 on configuration errors,
3 on data errors and 4 on numerical failures. Errors are reported as a JSON
object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from .battlelog import format_row, parse_battle_log, parse_unlabeled
from .core import (ComparisonDataset, DataError, NumericalError, PairwiseScheme,
                   pair_order, winvec_from_free)
from .estimators import (cond_bt_eif_phi, cond_bt_if_phi, cond_bt_psi, one_step_phi,
                         one_step_phi_fusion, one_step_psi, one_step_psi_fusion, wald_ci)
from .graph import build_gamma
from .nuisance import LearnerSpec, NuisanceBundle, estimate_nuisances
from .projection import SolverOptions, jac_U_theta, solve_projection
from .simulation import SettingSpec, run_replications

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


SIMULATE_DEFAULTS = {
    "setting": "I", "n": 2000, "m": 2000, "R": 10, "seed": 0, "nuisance": "flexible",
    "regimes": None, "estimands": ["phi", "psi"], "folds": 5, "level": 0.95,
    "workers": 1, "output_json": None, "output_csv": None,
}

ESTIMATE_DEFAULTS = {
    "log": None, "unlabeled": None, "reference": None, "players": None, "covariates": {},
    "estimand": "phi", "regime": "no_shift", "pairs": None, "rho": "uniform",
    "learners": None, "folds": 5, "seed": 0, "level": 0.95, "clip_eps": 0.01,
    "c_max": 20.0, "tol": 1e-10, "max_iter": 100, "output": None, "table": None,
}

MARGINAL_DEFAULTS = {
    "log": None, "reference": None, "players": None, "level": 0.95, "output": None,
    "table": None,
}

REGIMES = ("no_shift", "fusion", "cond_bt_if", "cond_bt_eif")


def _resolve(config: dict, defaults: dict, required=()) -> dict:
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    out = {**defaults, **config}
    missing = [k for k in required if out.get(k) is None]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")
    return out


def atomic_write(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_simulate(config: dict) -> dict:
    cfg = _resolve(config, SIMULATE_DEFAULTS, ["output_json"])
    regimes = cfg["regimes"] or (["fusion"] if str(cfg["setting"]).upper() == "I"
                                 else ["cond_if", "cond_eif"])
    cfg["regimes"] = list(regimes)
    try:
        spec = SettingSpec(setting=cfg["setting"], n=int(cfg["n"]), m=int(cfg["m"]),
                           seed=int(cfg["seed"]), nuisance=cfg["nuisance"],
                           regimes=tuple(regimes), estimands=tuple(cfg["estimands"]),
                           folds=int(cfg["folds"]), level=float(cfg["level"]))
        R = int(cfg["R"])
        if R < 1:
            raise ValueError("R must be at least 1")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    res = run_replications(spec, R, workers=int(cfg["workers"]))
    atomic_write(cfg["output_json"], res.to_json())
    if cfg["output_csv"]:
        atomic_write(cfg["output_csv"], res.to_csv())
    return cfg


def _rho_scheme(spec, players) -> PairwiseScheme:
    K = len(players)
    if spec == "uniform":
        return PairwiseScheme.uniform(K)
    if not isinstance(spec, dict):
        raise ConfigError("rho must be 'uniform' or an object mapping 'a|b' to weights")
    index = {p: i + 1 for i, p in enumerate(players)}
    weights = {}
    for key, w in spec.items():
        try:
            a, b = key.split("|")
            weights[(index[a], index[b])] = float(w)
        except (ValueError, KeyError):
            raise ConfigError(f"bad rho entry {key!r}") from None
    return PairwiseScheme.from_pairs(K, weights)


def _default_learners(covariates: dict) -> dict:
    if all(k == "categorical" for k in covariates.values()):
        spec = {"kind": "cell_mean"}
    else:
        spec = {"kind": "logistic_basis", "degree": 2, "interactions": True}
    return {"outcome": spec, "propensity": spec, "ratio": spec}


def _learner(d) -> LearnerSpec:
    try:
        return LearnerSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad learner spec {d!r}: {exc}") from None


def _load_log(cfg) -> tuple:
    log = parse_battle_log(cfg["log"], cfg["covariates"], cfg["reference"], cfg["players"])
    ds = log.dataset
    if cfg.get("unlabeled"):
        Xt = parse_unlabeled(cfg["unlabeled"], log.encoder)
        ds = ComparisonDataset(ds.K, ds.X, ds.pairs, ds.y, Xt, ds.feature_names)
    return log, ds


def _report_json(rep, players, cfg, extra_diag) -> dict:
    rows = [{"name": players[0], "estimate": 0.0, "std": 0.0, "ci": [0.0, 0.0]}]
    for i, p in enumerate(players[1:]):
        rows.append({"name": p, "estimate": float(rep.point[i]), "std": float(rep.std[i]),
                     "ci": [float(rep.wald[i, 0]), float(rep.wald[i, 1])]})
    diag = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in rep.diagnostics.items()}
    diag.update(extra_diag)
    diag["plugin"] = [float(v) for v in rep.plugin]
    return {"players": rows, "regime": rep.regime, "estimand": rep.estimand,
            "level": rep.level, "diagnostics": diag, "config": cfg}


def ranking_table(report: dict) -> str:
    """Players sorted by estimate with rounded estimate, std and CI columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "name", "estimate", "std", "ci"])
    order = sorted(report["players"], key=lambda r: -r["estimate"])
    for rank, r in enumerate(order, 1):
        est, sd, ci = format_row(r["estimate"], r["std"], *r["ci"])
        w.writerow([rank, r["name"], est, sd, ci])
    return buf.getvalue()


def run_estimate(cfg: dict):
    """Resolve config, run the estimator and return (report dict, EstimateReport)."""
    if cfg["estimand"] not in ("phi", "psi"):
        raise ConfigError("estimand must be 'phi' or 'psi'")
    if cfg["regime"] not in REGIMES:
        raise ConfigError(f"regime must be one of {list(REGIMES)}")
    if cfg["regime"] == "fusion" and not cfg["unlabeled"]:
        raise ConfigError("the fusion regime needs an 'unlabeled' covariate file")
    if cfg["learners"] is None:
        cfg["learners"] = _default_learners(cfg["covariates"])
    unknown = set(cfg["learners"]) - {"outcome", "propensity", "ratio"}
    if unknown:
        raise ConfigError(f"unknown learner roles {sorted(unknown)}")
    defaults = _default_learners(cfg["covariates"])
    specs = {role: _learner(cfg["learners"].get(role, defaults[role]))
             for role in ("outcome", "propensity", "ratio")}
    cfg["learners"] = {role: s.to_dict() for role, s in specs.items()}
    log, ds = _load_log(cfg)
    players = log.players
    if cfg["players"] is None:
        cfg["players"] = list(players)
    rho = _rho_scheme(cfg["rho"], players)
    opts = SolverOptions(tol=float(cfg["tol"]), max_iter=int(cfg["max_iter"]))
    fusion = ds.fusion
    bundle = estimate_nuisances(ds, specs["outcome"], specs["propensity"],
                                specs["ratio"] if fusion else None, V=int(cfg["folds"]),
                                seed=int(cfg["seed"]), clip_eps=float(cfg["clip_eps"]),
                                c_max=float(cfg["c_max"]))
    regime, est, level = cfg["regime"], cfg["estimand"], float(cfg["level"])
    if regime in ("no_shift", "fusion"):
        use_fusion = regime == "fusion"
        f = {("phi", False): one_step_phi, ("phi", True): one_step_phi_fusion,
             ("psi", False): one_step_psi, ("psi", True): one_step_psi_fusion}[(est, use_fusion)]
        if not use_fusion and fusion:
            bundle = _labeled_only(bundle, ds.n)
            ds = ComparisonDataset(ds.K, ds.X, ds.pairs, ds.y, None, ds.feature_names)
        rep = f(ds, bundle, rho, opts, level)
    elif regime == "cond_bt_if":
        index = {p: i + 1 for i, p in enumerate(players)}
        if cfg["pairs"] is None:
            obs = ds.observed_pairs()
            cfg["pairs"] = [[players[k - 1], players[l - 1]]
                            for (k, l), o in zip(pair_order(ds.K), obs) if o]
        try:
            raw = [tuple(sorted((index[a], index[b]))) for a, b in cfg["pairs"]]
        except (KeyError, ValueError, TypeError):
            raise ConfigError("pairs must be a list of [player, player] entries") from None
        gamma = build_gamma(raw, ds.K)
        rep = cond_bt_if_phi(ds, bundle, gamma, opts, fusion, level) if est == "phi" else \
            cond_bt_psi(ds, bundle, rho, gamma, opts, fusion, False, level)
    else:
        rep = cond_bt_eif_phi(ds, bundle, opts, fusion, level) if est == "phi" else \
            cond_bt_psi(ds, bundle, rho, None, opts, fusion, True, level)
    counts = np.bincount(ds.pairs, minlength=len(pair_order(ds.K)))
    extra = {
        "n": ds.n, "m": ds.m, "players": list(players),
        "categories": log.encoder.categories,
        "pair_counts": {f"{players[k - 1]}|{players[l - 1]}": int(c)
                        for (k, l), c in zip(pair_order(ds.K), counts) if c},
        "rho": rho.rho.tolist(),
        "mean_propensity": [float(v) for v in bundle.propensity[: ds.n].mean(axis=0)],
    }
    return _report_json(rep, players, cfg, extra), rep


def _labeled_only(bundle, n):
    folds = None if bundle.folds is None else bundle.folds[:n]
    return NuisanceBundle(bundle.outcome[:n], bundle.propensity[:n], None, folds,
                          bundle.clip_eps, bundle.diagnostics)


def cmd_estimate(config: dict) -> dict:
    cfg = _resolve(config, ESTIMATE_DEFAULTS, ["log", "reference", "output"])
    report, _ = run_estimate(cfg)
    atomic_write(cfg["output"], _dumps(report))
    if cfg["table"]:
        atomic_write(cfg["table"], ranking_table(report))
    return report


def marginal_bt(dataset: ComparisonDataset, level: float = 0.95):
    """Covariate-free BT maximum likelihood with observed-information covariance."""
    K, n = dataset.K, dataset.n
    J = len(pair_order(K))
    counts = np.bincount(dataset.pairs, minlength=J)
    sums = np.bincount(dataset.pairs, weights=dataset.y, minlength=J)
    mbar = np.where(counts > 0, sums / np.maximum(counts, 1), 0.5)
    freq = counts / n
    rho = np.zeros((K, K))
    for (k, l), f in zip(pair_order(K), freq):
        rho[k - 1, l - 1] = rho[l - 1, k - 1] = f
    scheme = PairwiseScheme(K, rho)
    theta = solve_projection(winvec_from_free(mbar, K), scheme)
    cov = np.linalg.inv(n * jac_U_theta(theta, scheme))
    return theta, cov, wald_ci(theta, cov, level)


def cmd_marginal(config: dict) -> dict:
    cfg = _resolve(config, MARGINAL_DEFAULTS, ["log", "reference", "output"])
    log = parse_battle_log(cfg["log"], {}, cfg["reference"], cfg["players"])
    theta, cov, ci = marginal_bt(log.dataset, float(cfg["level"]))
    if cfg["players"] is None:
        cfg["players"] = list(log.players)
    players = log.players
    rows = [{"name": players[0], "estimate": 0.0, "std": 0.0, "ci": [0.0, 0.0]}]
    sd = np.sqrt(np.diag(cov))
    for i, p in enumerate(players[1:]):
        rows.append({"name": p, "estimate": float(theta[i]), "std": float(sd[i]),
                     "ci": [float(ci[i, 0]), float(ci[i, 1])]})
    report = {"players": rows, "regime": "marginal_bt", "estimand": "marginal_bt",
              "level": float(cfg["level"]), "diagnostics": {"n": log.dataset.n},
              "config": cfg}
    atomic_write(cfg["output"], _dumps(report))
    if cfg["table"]:
        atomic_write(cfg["table"], ranking_table(report))
    return report


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "marginal-bt": cmd_marginal}


def _fail(code, exc) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="covbt", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON config file")
    args = parser.parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_CONFIG, exc)
    try:
        COMMANDS[args.command](config)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
