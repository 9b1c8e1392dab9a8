"""Monte-Carlo driver and statistical evaluation (NEES, conservativeness,
RMSE, deflation traces).

Runs execute in a thread pool sized by the HETDDF_WORKERS environment
variable; results are folded in run order, so outputs are identical for any
worker count.  Per-run arrays are reduced online to keep memory flat.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.stats

from .errors import ConfigError
from .scenarios import (
    CLRunData,
    CLScenario,
    ScenarioConfig,
    TrackingRunData,
    TrackingScenario,
    make_scenario,
)

WORKERS_ENV = "HETDDF_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


# ---------------------------------------------------------------------------
# statistics


def nees_point(err: np.ndarray, cov: np.ndarray) -> float:
    """e' Sigma^-1 e for one estimate."""
    return float(err @ np.linalg.solve(cov, err))


def nees_bounds(n_runs: int, dim: int, alpha: float = 0.05) -> tuple[float, float]:
    """Chi-square bounds for the run-averaged NEES of a consistent estimator."""
    df = n_runs * dim
    lo = scipy.stats.chi2.ppf(alpha / 2.0, df) / n_runs
    hi = scipy.stats.chi2.ppf(1.0 - alpha / 2.0, df) / n_runs
    return float(lo), float(hi)


def conservativeness(sigma_local: np.ndarray, sigma_cent: np.ndarray) -> float:
    """Min eigenvalue of (Sigma_local - Sigma_cent); >= 0 means conservative."""
    if sigma_local.shape != sigma_cent.shape:
        raise ConfigError("covariance shapes differ")
    diff = sigma_local - sigma_cent
    return float(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0])


def rmse_series(sq_err_sum: np.ndarray, n_runs: int) -> np.ndarray:
    return np.sqrt(sq_err_sum / n_runs)


def position_indices(task_keys) -> np.ndarray:
    """Indices of position components, by variable-name convention:
    x* targets use [n, e] = components 0 and 2; s* biases and p* poses use
    their leading two components."""
    idx = []
    o = 0
    for k in task_keys:
        if k.name.startswith("x"):
            idx += [o, o + 2]
        else:
            idx += [o, o + 1]
        o += k.dim
    return np.asarray(idx, dtype=np.int64)


# ---------------------------------------------------------------------------
# Monte-Carlo aggregation: tracking


@dataclass
class TrackingMCResult:
    cfg: ScenarioConfig
    robots: tuple[int, ...]
    task_dims: dict[int, int]
    nees: dict[int, np.ndarray]  # (T,) run-averaged
    nees_bounds: dict[int, tuple[float, float]]
    cons_min_eig: dict[int, np.ndarray]  # (T,) run-averaged
    lambda_mean: dict[int, np.ndarray]  # (T,)
    psd_min_eig: dict[int, np.ndarray]  # (T,) run-minimum, nan if unchecked
    rmse_pos: dict[int, np.ndarray]  # (T,)
    sigma_mean: dict[int, np.ndarray]  # (T,) mean sqrt-trace of task covariance
    sent_bytes: dict[int, int]  # per robot, run 0
    max_graph_dim: dict[int, int]
    delivered: int
    sent: int
    run0: Optional[TrackingRunData]


class _TrackingAccumulator:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.count = 0
        self.first: Optional[TrackingRunData] = None
        self.data: dict = {}

    def add(self, run: TrackingRunData) -> None:
        T = self.cfg.horizon
        if self.count == 0:
            self.first = run
            for i in run.robots:
                self.data[i] = {
                    "nees": np.zeros(T),
                    "cons": np.zeros(T),
                    "lam": np.zeros(T),
                    "psd": np.full(T, np.inf),
                    "sqerr_pos": np.zeros(T),
                    "sigma": np.zeros(T),
                    "dim": sum(k.dim for k in run.task_keys[i]),
                    "pos_idx": position_indices(run.task_keys[i]),
                }
            self.delivered = 0
            self.sent = 0
        for i in run.robots:
            d = self.data[i]
            err = run.est_mean[i] - run.truth[i]
            for k in range(T):
                d["nees"][k] += nees_point(err[k], run.est_cov[i][k])
                d["cons"][k] += conservativeness(run.est_cov[i][k], run.cent_cov[i][k])
            d["lam"] += run.lambda_star[i]
            d["psd"] = np.fmin(d["psd"], run.psd_min_eig[i])
            pe = err[:, d["pos_idx"]]
            d["sqerr_pos"] += np.sum(pe * pe, axis=1) / pe.shape[1]
            tr = np.trace(run.est_cov[i], axis1=1, axis2=2)
            d["sigma"] += np.sqrt(tr / d["dim"])
        for rec in run.delivery:
            self.sent += 1
            self.delivered += rec.delivered
        self.count += 1

    def result(self) -> TrackingMCResult:
        M = self.count
        robots = self.first.robots
        sent_bytes = {i: 0 for i in robots}
        for rec in self.first.delivery:
            sent_bytes[rec.sender] += rec.nbytes
        return TrackingMCResult(
            cfg=self.cfg,
            robots=robots,
            task_dims={i: self.data[i]["dim"] for i in robots},
            nees={i: self.data[i]["nees"] / M for i in robots},
            nees_bounds={
                i: nees_bounds(M, self.data[i]["dim"]) for i in robots
            },
            cons_min_eig={i: self.data[i]["cons"] / M for i in robots},
            lambda_mean={i: self.data[i]["lam"] / M for i in robots},
            psd_min_eig={
                i: np.where(
                    np.isfinite(self.data[i]["psd"]), self.data[i]["psd"], np.nan
                )
                for i in robots
            },
            rmse_pos={i: np.sqrt(self.data[i]["sqerr_pos"] / M) for i in robots},
            sigma_mean={i: self.data[i]["sigma"] / M for i in robots},
            sent_bytes=sent_bytes,
            max_graph_dim={i: self.first.max_graph_dim[i] for i in robots},
            delivered=self.delivered,
            sent=self.sent,
            run0=self.first,
        )


def run_tracking_mc(cfg: ScenarioConfig, progress=None) -> TrackingMCResult:
    scenario = TrackingScenario(cfg)
    acc = _TrackingAccumulator(cfg)
    _pooled_runs(scenario, cfg.runs, acc.add, progress)
    return acc.result()


# ---------------------------------------------------------------------------
# Monte-Carlo aggregation: cooperative localization


@dataclass
class CLMCResult:
    cfg: ScenarioConfig
    robots: tuple[int, ...]
    rmse_fg: np.ndarray  # (n,) time-and-run averaged position RMSE per robot
    rmse_cicl: np.ndarray
    rmse_cent: np.ndarray
    sigma_fg: np.ndarray  # (n,) average 1-sigma position bound
    sigma_cicl: np.ndarray
    sigma_cent: np.ndarray
    rmse_series_fg: np.ndarray  # (T,) across robots
    rmse_series_cicl: np.ndarray
    rmse_series_cent: np.ndarray


class _CLAccumulator:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.count = 0
        self.sq: dict[str, np.ndarray] = {}
        self.sig: dict[str, np.ndarray] = {}
        self.robots = None

    def add(self, run: CLRunData) -> None:
        if self.count == 0:
            self.robots = run.robots
            T, n, _ = run.fg_mean.shape
            for lbl in ("fg", "cicl", "cent"):
                self.sq[lbl] = np.zeros((T, n))
                self.sig[lbl] = np.zeros((T, n))
        for lbl, mean, cov in (
            ("fg", run.fg_mean, run.fg_cov),
            ("cicl", run.cicl_mean, run.cicl_cov),
            ("cent", run.cent_mean, run.cent_cov),
        ):
            err = mean[:, :, :2] - run.truth[:, :, :2]
            self.sq[lbl] += np.sum(err * err, axis=2)
            self.sig[lbl] += np.sqrt(
                0.5 * (cov[:, :, 0, 0] + cov[:, :, 1, 1])
            )
        self.count += 1

    def result(self) -> CLMCResult:
        M = self.count
        out = {}
        for lbl in ("fg", "cicl", "cent"):
            per_step_robot = np.sqrt(self.sq[lbl] / M)  # (T, n)
            out[f"rmse_{lbl}"] = np.mean(per_step_robot, axis=0)
            out[f"sigma_{lbl}"] = np.mean(self.sig[lbl] / M, axis=0)
            out[f"series_{lbl}"] = np.mean(per_step_robot, axis=1)
        return CLMCResult(
            cfg=self.cfg,
            robots=self.robots,
            rmse_fg=out["rmse_fg"],
            rmse_cicl=out["rmse_cicl"],
            rmse_cent=out["rmse_cent"],
            sigma_fg=out["sigma_fg"],
            sigma_cicl=out["sigma_cicl"],
            sigma_cent=out["sigma_cent"],
            rmse_series_fg=out["series_fg"],
            rmse_series_cicl=out["series_cicl"],
            rmse_series_cent=out["series_cent"],
        )


def run_cl_mc(cfg: ScenarioConfig, progress=None) -> CLMCResult:
    scenario = CLScenario(cfg)
    acc = _CLAccumulator(cfg)
    _pooled_runs(scenario, cfg.runs, acc.add, progress)
    return acc.result()


def run_monte_carlo(cfg: ScenarioConfig, progress=None):
    if cfg.kind == "tracking":
        return run_tracking_mc(cfg, progress)
    return run_cl_mc(cfg, progress)


def _pooled_runs(scenario, runs: int, fold, progress=None) -> None:
    """Execute runs in a pool, folding results in submission (seed) order."""
    workers = worker_count()
    if workers == 1:
        for r in range(runs):
            fold(scenario.run(r))
            if progress:
                progress(r + 1, runs)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(scenario.run, r) for r in range(runs)]
        for r, fut in enumerate(futures):
            fold(fut.result())
            if progress:
                progress(r + 1, runs)
