"""Experiment drivers behind the ``eqloss`` command.

Six subcommands emit data files, never rendered figures: boundary
(decision-boundary comparison between uncertainty sampling and full-batch
descent on the original and equivalent empirical risks),
active_vs_passive (paired pool runs against uniform sampling),
regression_curves (kernel regression with loss-proportional querying),
eqloss_table and psi_table (closed form vs numerical-oracle tables), and
variant_checks (frozen-state expectation checks for the pool variants).

Every command writes a manifest recording the resolved config, its hash,
the per-trial seeds, and package versions; a rerun with the same manifest
inputs produces byte-identical data files. Exit status is 0 iff every
internal assertion passed, otherwise a machine-readable failure report is
written next to the outputs. EQLOSS_THREADS caps trial concurrency.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .data_io import (
    CsvSchema,
    load_csv,
    reference_mixture,
    sample_mixture,
    save_dataset_metadata,
)
from .equivalent_loss import (
    PairSpec,
    closed_curve,
    equivalent_loss_closed,
    equivalent_loss_numeric_grid,
    make_pair,
)
from .link_functions import (
    affine_tail_onset,
    closed_link,
    numeric_link,
    threshold_z0,
)
from .models_losses import LossSpec, ParamVector, sigmoid
from .oracles import LossCalibrator, RegressionOracle, posterior
from .sampler import (
    AlgorithmSpec,
    FrozenState,
    conditional_loss_vec,
    expected_update_check,
    grad_coef,
    margin_scores,
    minimize_risk,
    mixture_weights,
    phi_divergence,
    run_pool,
    run_stream,
    theta_init,
    uncertainty_vec,
)
from .uncertainty import UncertaintySpec

COMMANDS = (
    "boundary",
    "active_vs_passive",
    "regression_curves",
    "eqloss_table",
    "psi_table",
    "variant_checks",
)

SIX_PAIRS = (
    ("cross_entropy", "entropy", {}),
    ("cross_entropy", "least_confidence", {}),
    ("squared_margin", "margin_based", {"mu": 1.0}),
    ("logistic", "threshold", {"gamma": 1.5}),
    ("margin", "margin_based", {"mu": 1.0}),
    ("exponential", "exponential", {"mu": 0.5}),
)


def thread_count() -> int:
    raw = os.environ.get("EQLOSS_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def trial_seed(seed: int, trial: int) -> int:
    """Per-trial seed rule, recorded in the manifest for reproducibility."""
    return seed * 1_000_003 + trial


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _deep_update(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], val)
        else:
            out[key] = val
    return out


def write_csv(path: Path, header: list, rows: list) -> None:
    def cell(v):
        if isinstance(v, float):
            return repr(v)
        return v

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([cell(v) for v in row])


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir: Path, command: str, cfg: dict, seeds: list, outputs: list) -> None:
    payload = {
        "command": command,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed_rule": "trial_seed = seed * 1000003 + trial",
        "seeds": seeds,
        "versions": {
            "eqloss": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "outputs": {name: file_sha256(outdir / name) for name in outputs},
    }
    write_json(outdir / "manifest.json", payload)


def _run_trials(fn: Callable[[int], object], trials: int) -> list:
    workers = thread_count()
    if workers <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(trials)))


# ---------------------------------------------------------------------------
# boundary experiment


def unit_boundary(theta: np.ndarray) -> np.ndarray:
    """Unit-norm representative with positive first nonzero coordinate."""
    v = np.asarray(theta, dtype=float)
    nrm = float(np.linalg.norm(v))
    if nrm == 0.0:
        return v.copy()
    v = v / nrm
    for coord in v:
        if coord != 0.0:
            if coord < 0.0:
                v = -v
            break
    return v


def angle_degrees(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between the separating lines, in [0, 90] degrees."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return float("nan")
    c = abs(float(np.dot(u, v)) / (nu * nv))
    return math.degrees(math.acos(min(c, 1.0)))


def _labeled_values(pair: PairSpec, yh: np.ndarray, y: np.ndarray, equivalent: bool) -> np.ndarray:
    if not equivalent:
        return conditional_loss_vec(pair.loss, yh, (y + 1.0) / 2.0)
    if pair.arg_kind == "q":
        from .equivalent_loss import Q_DOMAIN

        q = np.clip(sigmoid(yh), Q_DOMAIN[0], Q_DOMAIN[1])
        pos = closed_curve(pair, +1)(q)
        neg = closed_curve(pair, -1)(q)
        return np.where(y > 0.0, pos, neg)
    return closed_curve(pair, +1)(y * yh)


def _empirical_objective(pair: PairSpec, X: np.ndarray, y: np.ndarray, equivalent: bool):
    """Gradient and value callables for full-batch descent on the sample."""

    def grad(theta):
        yh = margin_scores(theta, X)
        coef = grad_coef(pair.loss, yh, y)
        if equivalent:
            coef = coef * uncertainty_vec(pair.unc, pair.loss, yh)
        return (coef[:, None] * X).mean(axis=0)

    def value(theta):
        yh = margin_scores(theta, X)
        return float(np.mean(_labeled_values(pair, yh, y, equivalent)))

    return grad, value


BOUNDARY_DEFAULTS = {
    "experiment": "boundary",
    "pair": {"loss": "squared_margin", "uncertainty": "margin_based", "mu": 1.0, "gamma": 1.5},
    "algorithm": {"T": 1_000_000, "eta": 1e-3, "backend": "auto"},
    "data": {"n": 2000},
    "gd": {"steps": 3000, "step_size": 0.5},
    "m_theta": 5.0,
    "trials": 10,
    "seed": 0,
    "assert_angle_ordering": False,
}


def cmd_boundary(cfg: dict, outdir: Path):
    cfg = _deep_update(BOUNDARY_DEFAULTS, cfg)
    pair = make_pair(
        cfg["pair"]["loss"],
        cfg["pair"]["uncertainty"],
        mu=cfg["pair"].get("mu", 1.0),
        gamma=cfg["pair"].get("gamma", 1.5),
    )
    dist = reference_mixture()
    trials = int(cfg["trials"])
    m_theta = float(cfg["m_theta"])
    T = int(cfg["algorithm"]["T"])
    eta = float(cfg["algorithm"]["eta"])
    n = int(cfg["data"]["n"])

    def one_trial(trial: int):
        ts = trial_seed(int(cfg["seed"]), trial)
        ds = sample_mixture(dist, n, seed=ts)
        rng_init = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((ts, 17)))
        )
        theta1 = theta_init(ds.dim, m_theta, rng_init)
        X, y = ds.features, ds.labels

        g_orig, v_orig = _empirical_objective(pair, X, y, equivalent=False)
        g_eq, v_eq = _empirical_objective(pair, X, y, equivalent=True)
        gd = cfg["gd"]
        th_orig = minimize_risk(g_orig, v_orig, theta1, m_theta,
                                steps=int(gd["steps"]), step_size=float(gd["step_size"]))
        th_eq = minimize_risk(g_eq, v_eq, theta1, m_theta,
                              steps=int(gd["steps"]), step_size=float(gd["step_size"]))
        if T == 0:
            th_us = np.array(theta1, dtype=float)
        else:
            alg = AlgorithmSpec("stream", T=T, eta=eta, seed=ts,
                                backend=cfg["algorithm"].get("backend", "auto"))
            rec = run_stream(alg, pair.loss, pair.unc, dist, ParamVector(theta1, m_theta))
            th_us = rec.theta_bar_final
        return th_orig, th_eq, th_us

    results = _run_trials(one_trial, trials)

    brows, arows = [], []
    us_eq, us_orig = [], []
    for trial, (th_orig, th_eq, th_us) in enumerate(results):
        for method, th in (("orig_gd", th_orig), ("eq_gd", th_eq), ("us", th_us)):
            u = unit_boundary(th)
            brows.append([trial, method] + [float(c) for c in u])
        a_ue = angle_degrees(th_us, th_eq)
        a_uo = angle_degrees(th_us, th_orig)
        a_eo = angle_degrees(th_eq, th_orig)
        us_eq.append(a_ue)
        us_orig.append(a_uo)
        arows.append([trial, "us_vs_eq_gd", a_ue])
        arows.append([trial, "us_vs_orig_gd", a_uo])
        arows.append([trial, "eq_gd_vs_orig_gd", a_eo])
    mean_ue = float(np.mean(us_eq))
    mean_uo = float(np.mean(us_orig))
    arows.append(["mean", "us_vs_eq_gd", mean_ue])
    arows.append(["mean", "us_vs_orig_gd", mean_uo])

    dim = len(results[0][0])
    write_csv(outdir / "boundaries.csv",
              ["trial", "method"] + [f"theta{i}" for i in range(dim)], brows)
    write_csv(outdir / "angles.csv", ["trial", "pair", "angle_deg"], arows)

    failures = []
    if not all(np.isfinite(r).all() for triple in results for r in triple):
        failures.append("non-finite boundary produced")
    if cfg["assert_angle_ordering"] and not mean_ue < mean_uo:
        failures.append(
            f"mean angle ordering violated: us_vs_eq_gd {mean_ue:.4f} "
            f">= us_vs_orig_gd {mean_uo:.4f}"
        )
    report = {
        "mean_angle_us_vs_eq_gd": mean_ue,
        "mean_angle_us_vs_orig_gd": mean_uo,
        "trials": trials,
        "failures": failures,
    }
    seeds = [trial_seed(int(cfg["seed"]), t) for t in range(trials)]
    outputs = ["boundaries.csv", "angles.csv"]
    return cfg, seeds, outputs, report


# ---------------------------------------------------------------------------
# active vs passive pools


AVP_DEFAULTS = {
    "experiment": "active_vs_passive",
    "loss": {"kind": "logistic"},
    "uncertainty": {"kind": "oracle_loss"},
    "algorithm": {"T": 2000, "eta": 0.05, "stride": 20, "pool_step_scaling": "with_St_over_n"},
    "data": {"pool": 400, "test": 2000, "csv": None, "schema": None, "subsample": None, "split": 0.8},
    "m_theta": 5.0,
    "trials": 30,
    "seed": 0,
    "assert_paired_gain": False,
    "gain_slack": 0.01,
}


def _passive_spec() -> UncertaintySpec:
    # constant-one uncertainty: every point equally eligible, S = n, so the
    # with_St_over_n scaling degenerates to the plain step shared with the
    # active arm
    return UncertaintySpec("threshold", gamma=1e12)


def cmd_active_vs_passive(cfg: dict, outdir: Path):
    cfg = _deep_update(AVP_DEFAULTS, cfg)
    loss = LossSpec(cfg["loss"]["kind"])
    unc = UncertaintySpec(
        cfg["uncertainty"]["kind"],
        mu=cfg["uncertainty"].get("mu", 1.0),
        gamma=cfg["uncertainty"].get("gamma", 1.0),
    )
    trials = int(cfg["trials"])
    m_theta = float(cfg["m_theta"])
    alg_cfg = cfg["algorithm"]
    csv_path = cfg["data"].get("csv")
    synthetic = csv_path is None
    dist = reference_mixture() if synthetic else None
    outputs = ["curves.csv", "summary.csv"]

    if not synthetic and not Path(csv_path).exists():
        raise FileNotFoundError(f"dataset not found: {csv_path}")

    def one_trial(trial: int):
        ts = trial_seed(int(cfg["seed"]), trial)
        if synthetic:
            pool = sample_mixture(dist, int(cfg["data"]["pool"]), seed=ts)
            test = sample_mixture(dist, int(cfg["data"]["test"]), seed=ts + 499979)
            X_pool, p_pool = pool.features, np.atleast_1d(posterior(dist, pool.features))
            X_test, y_test = test.features, test.labels
            fresh = True
        else:
            schema_cfg = cfg["data"]["schema"] or {}
            schema = CsvSchema(
                label_column=schema_cfg.get("label_column", "label"),
                label_kind=schema_cfg.get("label_kind", "binary"),
                feature_columns=tuple(schema_cfg["feature_columns"])
                if schema_cfg.get("feature_columns")
                else None,
            )
            train, test = load_csv(
                csv_path, schema,
                split=float(cfg["data"].get("split", 0.8)),
                seed=ts,
                subsample=cfg["data"].get("subsample"),
            )
            if trial == 0:
                save_dataset_metadata(outdir / "dataset_meta.json", train, test)
            X_pool = train.features
            p_pool = (train.labels + 1.0) / 2.0
            X_test, y_test = test.features, test.labels
            fresh = False

        rng_init = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((ts, 17)))
        )
        theta1 = ParamVector(theta_init(X_pool.shape[1], m_theta, rng_init), m_theta)
        alg = AlgorithmSpec(
            "pool", T=int(alg_cfg["T"]), eta=float(alg_cfg["eta"]), seed=ts,
            stride=int(alg_cfg["stride"]),
            pool_step_scaling=alg_cfg["pool_step_scaling"],
        )
        runs = {}
        for method, spec in (("active", unc), ("passive", _passive_spec())):
            calib = LossCalibrator(loss) if spec.kind == "estimated_loss" else None
            rec = run_pool(alg, loss, spec, X_pool, p_pool, theta1,
                           calibrator=calib, labels_fresh=fresh)
            from .sampler import attach_metrics

            attach_metrics(rec, loss, test=(X_test, y_test))
            runs[method] = rec
        return runs

    results = _run_trials(one_trial, trials)

    crows = []
    per_method: dict = {"active": [], "passive": []}
    for trial, runs in enumerate(results):
        for method, rec in runs.items():
            per_method[method].append(rec.test_metric)
            for k, step in enumerate(rec.snapshot_step):
                crows.append([int(step), trial, method, float(rec.test_metric[k])])
    write_csv(outdir / "curves.csv", ["step", "trial", "method", "test_metric"], crows)

    steps = results[0]["active"].snapshot_step
    srows = []
    finals = {}
    for method in ("active", "passive"):
        stack = np.vstack(per_method[method])
        mean = stack.mean(axis=0)
        se = stack.std(axis=0, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros(len(steps))
        finals[method] = float(mean[-1])
        for k, step in enumerate(steps):
            srows.append([int(step), method, float(mean[k]), float(se[k])])
    write_csv(outdir / "summary.csv", ["step", "method", "mean_metric", "se"], srows)

    if not synthetic:
        outputs = outputs + ["dataset_meta.json"]

    failures = []
    slack = float(cfg["gain_slack"])
    if cfg["assert_paired_gain"] and not finals["active"] >= finals["passive"] - slack:
        failures.append(
            f"final active metric {finals['active']:.4f} fell more than "
            f"{slack} below passive {finals['passive']:.4f}"
        )
    report = {"final_mean": finals, "trials": trials, "failures": failures}
    seeds = [trial_seed(int(cfg["seed"]), t) for t in range(trials)]
    return cfg, seeds, outputs, report


# ---------------------------------------------------------------------------
# kernel regression curves


REGRESSION_DEFAULTS = {
    "experiment": "regression_curves",
    "algorithm": {"T": 1500, "eta": 0.05, "stride": 15},
    "data": {"pool": 300, "test": 500, "anchors": 25, "noise_std": 0.1, "bandwidth": 0.5},
    "m_theta": 10.0,
    "trials": 5,
    "seed": 0,
}


def _rbf_features(X: np.ndarray, anchors: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = ((X[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * bandwidth * bandwidth))


def cmd_regression_curves(cfg: dict, outdir: Path):
    """Loss-proportional querying for kernel ridge-style regression.

    Pool algorithm with U_i = (prediction - f*(x_i))^2 + noise variance,
    the closed-form conditional squared error, against uniform passive
    sampling; the model is linear in RBF features so the pool machinery
    reduces to least-mean-squares steps.
    """
    cfg = _deep_update(REGRESSION_DEFAULTS, cfg)
    trials = int(cfg["trials"])
    m_theta = float(cfg["m_theta"])
    alg_cfg = cfg["algorithm"]
    data_cfg = cfg["data"]

    def f_star(X):
        return np.sin(math.pi * X[:, 0]) * np.cos(0.5 * math.pi * X[:, 1])

    noise = float(data_cfg["noise_std"])
    oracle = RegressionOracle(lambda x: f_star(np.atleast_2d(x))[0], noise)

    def one_trial(trial: int):
        ts = trial_seed(int(cfg["seed"]), trial)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(ts)))
        n_pool = int(data_cfg["pool"])
        X_pool = rng.uniform(-1.0, 1.0, size=(n_pool, 2))
        X_test = rng.uniform(-1.0, 1.0, size=(int(data_cfg["test"]), 2))
        anchors = X_pool[rng.choice(n_pool, size=int(data_cfg["anchors"]), replace=False)]
        bw = float(data_cfg["bandwidth"])
        Phi_pool = _rbf_features(X_pool, anchors, bw)
        Phi_test = _rbf_features(X_test, anchors, bw)
        y_true_pool = f_star(X_pool)
        y_true_test = f_star(X_test)

        rng_init = np.random.Generator(np.random.Philox(np.random.SeedSequence((ts, 17))))
        theta1 = theta_init(Phi_pool.shape[1], m_theta, rng_init)
        T = int(alg_cfg["T"])
        eta = float(alg_cfg["eta"])
        stride = int(alg_cfg["stride"])
        steps_rec = list(range(stride, T + 1, stride))
        if not steps_rec or steps_rec[-1] != T:
            steps_rec.append(T)

        curves = {}
        for method in ("active", "passive"):
            r_sel = np.random.Generator(np.random.Philox(np.random.SeedSequence((ts, 23))))
            r_lab = np.random.Generator(np.random.Philox(np.random.SeedSequence((ts, 29))))
            theta = theta1.copy()
            mse = []
            sel_u = r_sel.random(T)
            noise_draws = r_lab.standard_normal(T)
            k = 0
            for t in range(1, T + 1):
                pred = Phi_pool @ theta
                if method == "active":
                    u = (pred - y_true_pool) ** 2 + noise * noise
                else:
                    u = np.ones(len(pred))
                cum = np.cumsum(u)
                idx = min(int(np.searchsorted(cum, sel_u[t - 1] * cum[-1], side="right")),
                          len(u) - 1)
                y_obs = y_true_pool[idx] + noise * noise_draws[t - 1]
                resid = float(pred[idx] - y_obs)
                scale = float(np.sum(u)) / len(u)
                theta = theta - eta * scale * 2.0 * resid * Phi_pool[idx]
                nrm = float(np.linalg.norm(theta))
                if nrm > m_theta:
                    theta = theta * (m_theta / nrm)
                if k < len(steps_rec) and t == steps_rec[k]:
                    err = Phi_test @ theta - y_true_test
                    mse.append(float(np.mean(err * err)))
                    k += 1
            curves[method] = (steps_rec, mse)
        return curves

    results = _run_trials(one_trial, trials)
    crows = []
    for trial, curves in enumerate(results):
        for method, (steps_rec, mse) in curves.items():
            for step, val in zip(steps_rec, mse):
                crows.append([int(step), trial, method, float(val)])
    write_csv(outdir / "curves.csv", ["step", "trial", "method", "test_mse"], crows)

    steps_rec = results[0]["active"][0]
    srows = []
    for method in ("active", "passive"):
        stack = np.array([r[method][1] for r in results])
        mean = stack.mean(axis=0)
        for k, step in enumerate(steps_rec):
            srows.append([int(step), method, float(mean[k])])
    write_csv(outdir / "summary.csv", ["step", "method", "mean_test_mse"], srows)

    failures = []
    if not all(np.isfinite(row[3]) for row in crows):
        failures.append("non-finite regression curve value")
    report = {"trials": trials, "failures": failures}
    seeds = [trial_seed(int(cfg["seed"]), t) for t in range(trials)]
    return cfg, seeds, ["curves.csv", "summary.csv"], report


# ---------------------------------------------------------------------------
# derivation tables


TABLE_DEFAULTS = {
    "experiment": "eqloss_table",
    "points": 2001,
    "tolerance": 1e-8,
    "seed": 0,
}


def _pair_grid(pair: PairSpec, points: int) -> np.ndarray:
    if pair.arg_kind == "q":
        from .equivalent_loss import Q_DOMAIN

        return np.linspace(Q_DOMAIN[0], Q_DOMAIN[1], points)
    return np.linspace(-6.0, 6.0, points)


def _pair_anchor(pair: PairSpec, y: int) -> float:
    if pair.arg_kind == "q":
        from .equivalent_loss import Q_DOMAIN

        return Q_DOMAIN[1] if y > 0 else Q_DOMAIN[0]
    if pair.name in ("squared_margin", "hinge"):
        return 1.0
    if pair.name == "threshold":
        return pair.unc.gamma
    return 0.0


def _pair_label(pair: PairSpec) -> str:
    return f"{pair.loss.kind}+{pair.unc.kind}"


def cmd_eqloss_table(cfg: dict, outdir: Path):
    cfg = _deep_update(TABLE_DEFAULTS, cfg)
    points = int(cfg["points"])
    tol = float(cfg["tolerance"])
    rows = []
    worst = {}
    for loss_kind, unc_kind, kw in SIX_PAIRS:
        pair = make_pair(loss_kind, unc_kind, **kw)
        grid = _pair_grid(pair, points)
        for y in (+1, -1):
            closed = np.asarray(equivalent_loss_closed(pair, y, grid), dtype=float)
            numeric = equivalent_loss_numeric_grid(
                pair.loss, pair.unc, y, grid, _pair_anchor(pair, y)
            )
            diff = np.abs(closed - numeric)
            label = _pair_label(pair)
            worst[label] = max(worst.get(label, 0.0), float(diff.max()))
            for g, c, nmb, d in zip(grid, closed, numeric, diff):
                rows.append([label, y, float(g), float(c), float(nmb), float(d)])
    write_csv(outdir / "eqloss_table.csv",
              ["pair", "y", "arg", "closed", "numeric", "abs_diff"], rows)
    failures = [
        f"pair {label}: max |closed - numeric| = {gap:.3e} exceeds {tol:.1e}"
        for label, gap in sorted(worst.items())
        if gap > tol
    ]
    report = {"max_abs_diff": worst, "tolerance": tol, "failures": failures}
    return cfg, [int(cfg["seed"])], ["eqloss_table.csv"], report


PSI_DEFAULTS = {
    "experiment": "psi_table",
    "z_points": 199,
    "grid": 4097,
    "tolerance": 1e-4,
    "seed": 0,
}


def cmd_psi_table(cfg: dict, outdir: Path):
    cfg = _deep_update(PSI_DEFAULTS, cfg)
    zs = np.linspace(0.0, 0.99, int(cfg["z_points"]))
    tol = float(cfg["tolerance"])
    rows = []
    worst = {}
    kink_info = {}
    for loss_kind, unc_kind, kw in SIX_PAIRS:
        pair = make_pair(loss_kind, unc_kind, **kw)
        label = _pair_label(pair)
        link_c = closed_link(pair)
        link_n = numeric_link(pair, grid=int(cfg["grid"]))
        cvals = np.array([link_c(z) for z in zs])
        nvals = np.array([link_n(z) for z in zs])
        diff = np.abs(cvals - nvals)
        worst[label] = float(diff.max())
        for z, c, nv, d in zip(zs, cvals, nvals, diff):
            rows.append([label, float(z), float(c), float(nv), float(d)])
        if pair.name == "threshold":
            onset = affine_tail_onset(link_n)
            kink_info = {
                "printed_z0": threshold_z0(pair.unc.gamma),
                "numeric_affine_onset": onset,
                "gap": abs(onset - threshold_z0(pair.unc.gamma)),
            }
    write_csv(outdir / "psi_table.csv",
              ["pair", "z", "psi_closed", "psi_numeric", "abs_diff"], rows)
    failures = [
        f"pair {label}: sup |psi_closed - psi_numeric| = {gap:.3e} exceeds {tol:.1e}"
        for label, gap in sorted(worst.items())
        if gap > tol
    ]
    if kink_info and kink_info["gap"] > 3e-4:
        failures.append(
            "threshold pair: numeric affine-tail onset "
            f"{kink_info['numeric_affine_onset']:.6f} is "
            f"{kink_info['gap']:.4f} from the printed z0 "
            f"{kink_info['printed_z0']:.6f}"
        )
    report = {
        "sup_abs_diff": worst,
        "tolerance": tol,
        "threshold_kink": kink_info,
        "failures": failures,
    }
    return cfg, [int(cfg["seed"])], ["psi_table.csv"], report


# ---------------------------------------------------------------------------
# variant expectation checks


VARIANT_DEFAULTS = {
    "experiment": "variant_checks",
    "n_draws": 100_000,
    "pool": 40,
    "theta": [0.4, -0.9],
    "m": 4,
    "gamma_mix": 0.5,
    "m_theta": 5.0,
    "eta": 1e-3,
    "loss": {"kind": "squared_margin"},
    "seed": 0,
    "z_limit": 4.0,
    "divergence_tolerance": 1e-12,
}


def cmd_variant_checks(cfg: dict, outdir: Path):
    cfg = _deep_update(VARIANT_DEFAULTS, cfg)
    dist = reference_mixture()
    loss = LossSpec(cfg["loss"]["kind"])
    seed = int(cfg["seed"])
    theta = np.asarray(cfg["theta"], dtype=float)
    n_draws = int(cfg["n_draws"])
    pool = sample_mixture(dist, int(cfg["pool"]), seed=trial_seed(seed, 7))
    Xp = pool.features
    pp = np.atleast_1d(posterior(dist, Xp))
    m = int(cfg["m"])
    gamma = float(cfg["gamma_mix"])
    eta = float(cfg["eta"])
    m_theta = float(cfg["m_theta"])

    def base(kind, unc_kind, **kw):
        return FrozenState(
            kind, loss, UncertaintySpec(unc_kind), theta, eta, m_theta,
            dist=dist if kind == "stream" else None,
            pool=None if kind == "stream" else Xp,
            pool_posterior=None if kind == "stream" else pp,
            m=m, gamma_mix=gamma, seed=trial_seed(seed, 11), **kw,
        )

    checks = {
        "stream_plain": base("stream", "margin_based"),
        "stream_loss_as_uncertainty": base("stream", "oracle_loss"),
        "pool_scaled": base("pool", "oracle_loss"),
        "pool_exponentiated": base("pool", "exp_oracle_loss", pool_step_scaling="none"),
        "topk": base("topk", "oracle_loss"),
        "mixture_dro": base("mixture", "oracle_loss"),
    }
    z_limit = float(cfg["z_limit"])
    div_tol = float(cfg["divergence_tolerance"])
    report: dict = {"checks": {}, "failures": []}
    for name, state in checks.items():
        res = expected_update_check(state, n_draws)
        entry = {
            "z_scores": [float(z) for z in res.z_scores],
            "max_abs_z": res.max_abs_z,
            "empirical": [float(v) for v in res.empirical],
            "target": [float(v) for v in res.target],
        }
        if res.max_abs_z > z_limit:
            report["failures"].append(
                f"{name}: max |z| = {res.max_abs_z:.2f} exceeds {z_limit}"
            )
        if name == "mixture_dro":
            entry["divergence"] = res.extras["divergence"]
            entry["divergence_target"] = res.extras["divergence_target"]
            entry["divergence_residual"] = res.extras["divergence_residual"]
            entry["max_weight"] = res.extras["max_weight"]
            entry["max_weight_target"] = res.extras["max_weight_target"]
            if res.extras["divergence_residual"] > div_tol:
                report["failures"].append(
                    f"mixture divergence residual {res.extras['divergence_residual']:.2e} "
                    f"exceeds {div_tol:.1e}"
                )
        report["checks"][name] = entry

    # degenerate m = n: the selection law is exactly uniform
    n = len(Xp)
    law_uniform = mixture_weights(n, n, gamma, np.arange(n))
    report["m_equals_n_divergence"] = phi_divergence(law_uniform)
    if abs(report["m_equals_n_divergence"]) > div_tol:
        report["failures"].append("m = n mixture law is not uniform")

    write_json(outdir / "variant_checks.json",
               {k: v for k, v in report.items() if k != "failures"}
               | {"failures": report["failures"]})
    return cfg, [seed], ["variant_checks.json"], report


# ---------------------------------------------------------------------------
# entry point


_HANDLERS = {
    "boundary": cmd_boundary,
    "active_vs_passive": cmd_active_vs_passive,
    "regression_curves": cmd_regression_curves,
    "eqloss_table": cmd_eqloss_table,
    "psi_table": cmd_psi_table,
    "variant_checks": cmd_variant_checks,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eqloss",
        description="Uncertainty-sampling experiment drivers and derivation tables.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--trials", type=int, default=None)
    args = parser.parse_args(argv)

    cfg: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.trials is not None:
        cfg["trials"] = args.trials
    outdir = Path(args.out if args.out else cfg.get("out", "eqloss_out"))
    outdir.mkdir(parents=True, exist_ok=True)

    try:
        resolved, seeds, outputs, report = _HANDLERS[args.command](cfg, outdir)
    except Exception as exc:  # noqa: BLE001 - surfaced as a machine-readable report
        write_json(outdir / "failure_report.json",
                   {"status": "error", "command": args.command,
                    "error": f"{type(exc).__name__}: {exc}"})
        print(f"eqloss {args.command}: error: {exc}", file=sys.stderr)
        return 2

    write_manifest(outdir, args.command, resolved, seeds, outputs)
    failures = report.get("failures", [])
    if failures:
        write_json(outdir / "failure_report.json",
                   {"status": "fail", "command": args.command, "failures": failures})
        for line in failures:
            print(f"eqloss {args.command}: FAIL: {line}", file=sys.stderr)
        return 1
    print(f"eqloss {args.command}: ok ({', '.join(outputs)} in {outdir})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
