"""Experiment scenarios: heterogeneous multi-robot tracking and cooperative
localization, with a centralized oracle and an ego-only CI baseline.

Both scenarios are driven by a ScenarioConfig (TOML file, see configs/).
Each Monte-Carlo run first samples the complete world (trajectories and
measurement realizations), then feeds the identical data to the estimators
under comparison, so baseline and decentralized results are matched per seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .canonical import CanonicalFactor, VariableKey, canonical_order
from .errors import ConfigError, HetddfError, NumericalFailure
from .filtering import (
    LinearDynamics,
    LinearMeasurement,
    add_linearized_measurement,
    add_measurement,
    conservative_filter,
    wrap_angle,
)
from .fusion import HSCF, HSCI, FusionAgent
from .network import DeliveryRecord, DropoutModel, Topology, run_round

log = logging.getLogger(__name__)

TARGET_DIM = 4  # [n, ndot, e, edot]
BIAS_DIM = 2
POSE_DIM = 3  # [x, y, theta]


# ---------------------------------------------------------------------------
# dynamic / measurement models


def ncv_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearly-constant-velocity transition and control matrices."""
    F = np.array(
        [
            [1.0, dt, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, dt],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    G = np.array(
        [
            [0.5 * dt * dt, 0.0],
            [dt, 0.0],
            [0.0, 0.5 * dt * dt],
            [0.0, dt],
        ]
    )
    return F, G


def step_ncv(
    x: np.ndarray, dt: float, rng: Optional[np.random.Generator], q: float = 0.08
) -> np.ndarray:
    """One truth step of the NCV target model, x' = Fx + w, w ~ N(0, q I)."""
    F, _ = ncv_matrices(dt)
    x = F @ np.asarray(x, dtype=np.float64)
    if rng is not None:
        x = x + rng.normal(0.0, math.sqrt(q), 4)
    return x


def step_dubins(
    pose: np.ndarray,
    v: float,
    phi: float,
    L: float,
    dt: float,
    rng: Optional[np.random.Generator],
    sigma: Sequence[float] = (0.0, 0.0, 0.0),
) -> np.ndarray:
    """Euler step of the Dubins car rate equations plus AWGN; heading wrapped."""
    if abs(phi) >= 0.5 * np.pi:
        raise ConfigError(f"steering angle {phi} out of range")
    x, y, th = pose
    out = np.array(
        [
            x + dt * v * math.cos(th),
            y + dt * v * math.sin(th),
            th + dt * (v / L) * math.tan(phi),
        ]
    )
    if rng is not None:
        out = out + rng.normal(0.0, 1.0, 3) * np.asarray(sigma, dtype=np.float64)
    out[2] = wrap_angle(out[2])
    return out


def dubins_jacobian(pose: np.ndarray, v: float, dt: float) -> np.ndarray:
    """Jacobian of the Euler-discretized Dubins step w.r.t. the pose."""
    th = pose[2]
    return np.array(
        [
            [1.0, 0.0, -dt * v * math.sin(th)],
            [0.0, 1.0, dt * v * math.cos(th)],
            [0.0, 0.0, 1.0],
        ]
    )


def measure_relative(
    x_t: np.ndarray, s_i: np.ndarray, R: np.ndarray, rng: Optional[np.random.Generator]
) -> np.ndarray:
    """Biased robot-to-target relative position measurement."""
    y = np.array([x_t[0], x_t[2]]) + np.asarray(s_i, dtype=np.float64)
    if rng is not None:
        y = y + rng.multivariate_normal(np.zeros(2), R)
    return y


def measure_landmark(
    s_i: np.ndarray, R: np.ndarray, rng: Optional[np.random.Generator]
) -> np.ndarray:
    """Known-landmark measurement whose residual isolates the bias."""
    m = np.asarray(s_i, dtype=np.float64).copy()
    if rng is not None:
        m = m + rng.multivariate_normal(np.zeros(2), R)
    return m


def measure_bearing_range(
    pose: np.ndarray,
    point: np.ndarray,
    sigma_theta: float,
    sigma_r: float,
    rng: Optional[np.random.Generator],
) -> Optional[tuple[float, float]]:
    """Bearing (relative to heading) and range to a point; None if coincident."""
    dx = point[0] - pose[0]
    dy = point[1] - pose[1]
    r = math.hypot(dx, dy)
    if r < 1e-9:
        log.warning("bearing/range measurement skipped: coincident point")
        return None
    th = wrap_angle(math.atan2(dy, dx) - pose[2])
    if rng is not None:
        th = wrap_angle(th + rng.normal(0.0, sigma_theta))
        r = r + rng.normal(0.0, sigma_r)
    return float(th), float(r)


def bearing_range_landmark_obs(point: np.ndarray):
    """(h, jac) for bearing/range from a 3-dim pose to a fixed point."""
    px, py = float(point[0]), float(point[1])

    def h(x):
        dx, dy = px - x[0], py - x[1]
        return np.array([wrap_angle(math.atan2(dy, dx) - x[2]), math.hypot(dx, dy)])

    def jac(x):
        dx, dy = px - x[0], py - x[1]
        d2 = dx * dx + dy * dy
        d = math.sqrt(d2)
        return np.array(
            [[dy / d2, -dx / d2, -1.0], [-dx / d, -dy / d, 0.0]]
        )

    return h, jac


def bearing_range_relative_obs(own_off: int, tgt_off: int, n: int):
    """(h, jac) for bearing/range from an observer pose block to a target
    pose block inside an n-dim stacked state."""

    def h(x):
        dx = x[tgt_off] - x[own_off]
        dy = x[tgt_off + 1] - x[own_off + 1]
        return np.array(
            [wrap_angle(math.atan2(dy, dx) - x[own_off + 2]), math.hypot(dx, dy)]
        )

    def jac(x):
        dx = x[tgt_off] - x[own_off]
        dy = x[tgt_off + 1] - x[own_off + 1]
        d2 = dx * dx + dy * dy
        d = math.sqrt(d2)
        J = np.zeros((2, n))
        J[0, own_off] = dy / d2
        J[0, own_off + 1] = -dx / d2
        J[0, own_off + 2] = -1.0
        J[0, tgt_off] = -dy / d2
        J[0, tgt_off + 1] = dx / d2
        J[1, own_off] = -dx / d
        J[1, own_off + 1] = -dy / d
        J[1, tgt_off] = dx / d
        J[1, tgt_off + 1] = dy / d
        return J

    return h, jac


# ---------------------------------------------------------------------------
# centralized oracle: a plain information filter over the full state


class InformationFilter:
    """Directly-coded information filter over named blocks.

    Deliberately independent of the factor-graph machinery; serves as the
    centralized reference estimator and as a cross-check oracle in tests.
    """

    def __init__(self, blocks: Sequence[tuple[str, int]], mean0, cov0):
        self.names = tuple(n for n, _ in blocks)
        self.dims = {n: d for n, d in blocks}
        self.offsets = {}
        o = 0
        for n, d in blocks:
            self.offsets[n] = o
            o += d
        self.n = o
        cov0 = np.asarray(cov0, dtype=np.float64)
        self.lam = np.linalg.inv(cov0)
        self.lam = 0.5 * (self.lam + self.lam.T)
        self.zeta = self.lam @ np.asarray(mean0, dtype=np.float64)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        cov = np.linalg.inv(self.lam)
        cov = 0.5 * (cov + cov.T)
        return cov @ self.zeta, cov

    def predict(self, per_block: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]):
        """Moment-form prediction; per_block maps name -> (F, shift, Q).

        Blocks not listed are static (identity transition, no noise).
        """
        mean, cov = self.moments()
        Ffull = np.eye(self.n)
        Qfull = np.zeros((self.n, self.n))
        shift = np.zeros(self.n)
        for name, (F, sh, Q) in per_block.items():
            o = self.offsets[name]
            d = self.dims[name]
            Ffull[o : o + d, o : o + d] = F
            Qfull[o : o + d, o : o + d] = Q
            shift[o : o + d] = sh
        mean = Ffull @ mean + shift
        cov = Ffull @ cov @ Ffull.T + Qfull
        self.lam = np.linalg.inv(cov)
        self.lam = 0.5 * (self.lam + self.lam.T)
        self.zeta = self.lam @ mean

    def update(self, H: np.ndarray, R: np.ndarray, y: np.ndarray) -> None:
        Rinv = np.linalg.inv(R)
        self.lam += H.T @ Rinv @ H
        self.zeta += H.T @ Rinv @ y

    def update_linearized(self, h, jac_at, R, y, angle_rows=()) -> None:
        mean, _ = self.moments()
        J = jac_at(mean)
        resid = np.asarray(y, dtype=np.float64) - np.asarray(h(mean), dtype=np.float64)
        for r in angle_rows:
            resid[r] = wrap_angle(resid[r])
        self.update(J, R, resid + J @ mean)

    def marginal(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        mean, cov = self.moments()
        idx = np.concatenate(
            [np.arange(self.offsets[n], self.offsets[n] + self.dims[n]) for n in names]
        )
        return mean[idx], cov[np.ix_(idx, idx)]


# ---------------------------------------------------------------------------
# configuration


DEFAULT_TASKS = {1: (1, 2, 3), 2: (2, 3), 3: (2, 3, 4, 5), 4: (4, 5, 6)}
DEFAULT_REL_NOISE = {1: (1.0, 5.0), 2: (3.0, 3.0), 3: (4.0, 4.0), 4: (5.0, 1.0)}


@dataclass
class ScenarioConfig:
    kind: str = "tracking"
    algo: str = HSCF
    conservative: bool = True
    runs: int = 250
    seed: int = 1
    dropout: float = 0.0  # probability a message is lost (p_success = 1 - dropout)
    dt: float = 0.1
    horizon: int = 500
    rounds_per_step: int = 1
    omega_cost: str = "trace"
    cf_acknowledged: bool = False
    check_psd: bool = False

    # tracking scenario
    homogeneous: bool = False
    tasks: dict = field(default_factory=lambda: dict(DEFAULT_TASKS))
    edges: tuple = ((1, 2), (2, 3), (3, 4))
    rel_noise: dict = field(default_factory=lambda: dict(DEFAULT_REL_NOISE))
    lmk_noise: dict = field(default_factory=lambda: dict(DEFAULT_REL_NOISE))
    process_noise: float = 0.08
    target_prior_var: float = 10.0
    bias_prior_var: float = 5.0

    # cooperative localization scenario
    n_groups: int = 4
    group_size: int = 5
    speed: float = 1.0
    wheelbase: float = 1.0
    sigma_theta_deg: float = 1.0
    sigma_r_choices: tuple = (2.0, 4.0, 6.0)
    cl_process_sigma: tuple = (0.03, 0.03, 0.01)
    landmark_spacing: float = 12.0
    landmarks_per_robot: int = 4
    prior_pos_var: float = 1.0
    prior_heading_var: float = 0.05
    cl_edges: tuple = ()

    def __post_init__(self):
        if self.kind not in ("tracking", "cl"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.algo not in (HSCF, HSCI):
            raise ConfigError(f"unknown fusion algorithm {self.algo!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.runs < 1 or self.horizon < 1:
            raise ConfigError("runs and horizon must be positive")
        if self.omega_cost not in ("trace", "logdet"):
            raise ConfigError(f"unknown omega cost {self.omega_cost!r}")

    @property
    def p_success(self) -> float:
        return 1.0 - self.dropout


def _noise_matrix(value, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.size == 2:
        return np.diag(arr)
    if arr.size == 4:
        return arr.reshape(2, 2)
    raise ConfigError(f"{where}: expected 2 (diagonal) or 4 (row-major) entries")


def load_config(path, **overrides) -> ScenarioConfig:
    """Parse a TOML scenario file; keyword overrides replace file values."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid TOML: {exc}") from exc

    kw = {}
    for key in (
        "kind",
        "algo",
        "conservative",
        "runs",
        "seed",
        "dropout",
        "dt",
        "horizon",
        "rounds_per_step",
        "omega_cost",
        "cf_acknowledged",
        "check_psd",
    ):
        if key in raw:
            kw[key] = raw[key]

    tr = raw.get("tracking", {})
    for key in (
        "homogeneous",
        "process_noise",
        "target_prior_var",
        "bias_prior_var",
    ):
        if key in tr:
            kw[key] = tr[key]
    if "edges" in tr:
        kw["edges"] = tuple(tuple(int(x) for x in e) for e in tr["edges"])
    if "tasks" in tr:
        kw["tasks"] = {int(k): tuple(int(t) for t in v) for k, v in tr["tasks"].items()}
    if "noise" in tr:
        kw["rel_noise"] = {}
        kw["lmk_noise"] = {}
        for k, v in tr["noise"].items():
            rid = int(k.lstrip("r"))
            if isinstance(v, dict):
                kw["rel_noise"][rid] = _noise_matrix(v["relative"], f"noise.{k}.relative")
                kw["lmk_noise"][rid] = _noise_matrix(v["landmark"], f"noise.{k}.landmark")
            else:
                mat = _noise_matrix(v, f"noise.{k}")
                kw["rel_noise"][rid] = mat
                kw["lmk_noise"][rid] = mat

    cl = raw.get("cl", {})
    for src, dst in (
        ("n_groups", "n_groups"),
        ("group_size", "group_size"),
        ("speed", "speed"),
        ("wheelbase", "wheelbase"),
        ("sigma_theta_deg", "sigma_theta_deg"),
        ("landmark_spacing", "landmark_spacing"),
        ("landmarks_per_robot", "landmarks_per_robot"),
        ("prior_pos_var", "prior_pos_var"),
        ("prior_heading_var", "prior_heading_var"),
    ):
        if src in cl:
            kw[dst] = cl[src]
    if "sigma_r_choices" in cl:
        kw["sigma_r_choices"] = tuple(float(x) for x in cl["sigma_r_choices"])
    if "process_sigma" in cl:
        kw["cl_process_sigma"] = tuple(float(x) for x in cl["process_sigma"])
    if "edges" in cl:
        kw["cl_edges"] = tuple(tuple(int(x) for x in e) for e in cl["edges"])

    kw.update(overrides)
    try:
        return ScenarioConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad config key: {exc}") from exc


# ---------------------------------------------------------------------------
# tracking scenario


def _target_name(t: int) -> str:
    return f"x{t}"


def _bias_name(i: int) -> str:
    return f"s{i}"


_POS_SELECT = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])


class TrackingScenario:
    """4-robot / 6-target heterogeneous tracking with measurement biases."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.robots = tuple(sorted(cfg.tasks))
        self.all_targets = tuple(sorted({t for ts in cfg.tasks.values() for t in ts}))
        if cfg.homogeneous:
            full = tuple(self.all_targets)
            self.tasks = {i: full for i in self.robots}
            self.bias_names = {i: tuple(_bias_name(j) for j in self.robots) for i in self.robots}
        else:
            self.tasks = {i: tuple(sorted(cfg.tasks[i])) for i in self.robots}
            self.bias_names = {i: (_bias_name(i),) for i in self.robots}
        self.topology = Topology(cfg.edges)
        self.rel_noise = {i: _noise_matrix(cfg.rel_noise[i], "rel") for i in self.robots}
        self.lmk_noise = {i: _noise_matrix(cfg.lmk_noise[i], "lmk") for i in self.robots}
        F, G = ncv_matrices(cfg.dt)
        self.dyn = LinearDynamics(F, G, np.zeros(2), cfg.process_noise * np.eye(4))

    def task_names(self, i: int) -> tuple[str, ...]:
        return tuple(_target_name(t) for t in self.tasks[i]) + self.bias_names[i]

    def common_names(self, i: int, j: int) -> frozenset[str]:
        return frozenset(self.task_names(i)) & frozenset(self.task_names(j))

    def initial_targets(self) -> np.ndarray:
        """Fixed truth initialization: targets spread on a circle, slow drift."""
        out = np.zeros((len(self.all_targets), 4))
        for idx, _t in enumerate(self.all_targets):
            ang = 2.0 * np.pi * idx / max(len(self.all_targets), 1)
            out[idx] = [
                20.0 * math.cos(ang),
                0.5 * math.cos(ang + 0.5 * np.pi),
                20.0 * math.sin(ang),
                0.5 * math.sin(ang + 0.5 * np.pi),
            ]
        return out

    # -- world ---------------------------------------------------------------

    def simulate_world(self, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        T = cfg.horizon
        tgt_index = {t: k for k, t in enumerate(self.all_targets)}
        biases = {i: rng.multivariate_normal(np.zeros(2), cfg.bias_prior_var * np.eye(2))
                  for i in self.robots}
        prior_target_means = {}
        x0 = self.initial_targets()
        for t in self.all_targets:
            prior_target_means[t] = x0[tgt_index[t]] + rng.normal(
                0.0, math.sqrt(cfg.target_prior_var), 4
            )
        traj = np.zeros((T + 1, len(self.all_targets), 4))
        traj[0] = x0
        for k in range(1, T + 1):
            for t in self.all_targets:
                traj[k, tgt_index[t]] = step_ncv(
                    traj[k - 1, tgt_index[t]], cfg.dt, rng, cfg.process_noise
                )
        rel = {}
        lmk = {}
        for k in range(1, T + 1):
            for i in self.robots:
                for t in self.tasks[i]:
                    rel[(k, i, t)] = measure_relative(
                        traj[k, tgt_index[t]], biases[i], self.rel_noise[i], rng
                    )
                lmk[(k, i)] = measure_landmark(biases[i], self.lmk_noise[i], rng)
        return {
            "tgt_index": tgt_index,
            "biases": biases,
            "prior_target_means": prior_target_means,
            "traj": traj,
            "rel": rel,
            "lmk": lmk,
        }

    # -- estimators -----------------------------------------------------------

    def build_agents(self, world) -> dict[int, FusionAgent]:
        cfg = self.cfg
        agents = {}
        target_prior = {}
        for t in self.all_targets:
            key = VariableKey(_target_name(t), 0, TARGET_DIM)
            lam = np.eye(4) / cfg.target_prior_var
            target_prior[t] = CanonicalFactor(
                (key,), lam @ world["prior_target_means"][t], lam
            )
        bias_prior = {}
        for i in self.robots:
            key = VariableKey(_bias_name(i), 0, BIAS_DIM)
            lam = np.eye(2) / cfg.bias_prior_var
            bias_prior[i] = CanonicalFactor((key,), np.zeros(2), lam)

        for i in self.robots:
            names = self.task_names(i)
            task = [
                VariableKey(n, 0, TARGET_DIM if n.startswith("x") else BIAS_DIM)
                for n in names
            ]
            common = {
                j: self.common_names(i, j) for j in self.topology.neighbors(i)
            }
            agent = FusionAgent(
                i,
                task,
                dynamic_names=[n for n in names if n.startswith("x")],
                common_sets=common,
                algo=cfg.algo,
                conservative=cfg.conservative,
                omega_cost=cfg.omega_cost,
                cf_update_on_send=not cfg.cf_acknowledged,
                dynamics_provider=lambda name, k: self.dyn,
            )
            for t in self.tasks[i]:
                agent.set_prior(target_prior[t])
            for bn in self.bias_names[i]:
                agent.set_prior(bias_prior[int(bn[1:])])
            if cfg.algo == HSCF:
                for j, names_c in agent.common_names.items():
                    seeds = []
                    for n in sorted(names_c):
                        if n.startswith("x"):
                            seeds.append(target_prior[int(n[1:])])
                        else:
                            seeds.append(bias_prior[int(n[1:])])
                    agent.init_cf(j, seeds)
            agents[i] = agent
        return agents

    def build_centralized(self, world) -> InformationFilter:
        cfg = self.cfg
        blocks = [(_bias_name(i), BIAS_DIM) for i in self.robots]
        blocks += [(_target_name(t), TARGET_DIM) for t in self.all_targets]
        blocksrt = sorted(blocks)
        n = sum(d for _, d in blocksrt)
        mean0 = np.zeros(n)
        cov0 = np.zeros((n, n))
        o = 0
        for name, d in blocksrt:
            if name.startswith("x"):
                mean0[o : o + d] = world["prior_target_means"][int(name[1:])]
                cov0[o : o + d, o : o + d] = cfg.target_prior_var * np.eye(d)
            else:
                cov0[o : o + d, o : o + d] = cfg.bias_prior_var * np.eye(d)
            o += d
        return InformationFilter(blocksrt, mean0, cov0)

    def _rel_H(self, agent: FusionAgent, i: int, t: int) -> tuple[tuple, np.ndarray]:
        svar = agent.key(_bias_name(i))
        xvar = agent.key(_target_name(t))
        scope = canonical_order((svar, xvar))
        H = np.zeros((2, 6))
        o = 0
        for k in scope:
            if k.name.startswith("s"):
                H[:, o : o + 2] = np.eye(2)
            else:
                H[:, o : o + 4] = _POS_SELECT
            o += k.dim
        return scope, H

    def truth_vector(self, world, i: int, agent: FusionAgent, k: int) -> np.ndarray:
        parts = []
        for key in agent.task_keys():
            if key.name.startswith("x"):
                parts.append(world["traj"][k, world["tgt_index"][int(key.name[1:])]])
            else:
                parts.append(world["biases"][int(key.name[1:])])
        return np.concatenate(parts)

    def run(self, run_index: int) -> "TrackingRunData":
        cfg = self.cfg
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(0, run_index))
        )
        world = self.simulate_world(rng)
        agents = self.build_agents(world)
        cent = self.build_centralized(world)
        dropout = DropoutModel(cfg.p_success)
        T = cfg.horizon
        data = TrackingRunData.allocate(self, agents, T)

        step = 0
        try:
            for k in range(1, T + 1):
                step = k
                for i in self.robots:
                    agents[i].predict()
                for i in self.robots:
                    res = conservative_filter(agents[i], check_psd=cfg.check_psd)
                    data.lambda_star[i][k - 1] = res.lambda_star
                    if res.psd_min_eig is not None:
                        data.psd_min_eig[i][k - 1] = res.psd_min_eig
                cent.predict(
                    {
                        _target_name(t): (self.dyn.F, np.zeros(4), self.dyn.Q)
                        for t in self.all_targets
                    }
                )
                for i in self.robots:
                    agent = agents[i]
                    for t in self.tasks[i]:
                        scope, H = self._rel_H(agent, i, t)
                        y = world["rel"][(k, i, t)]
                        add_measurement(
                            agent.graph, scope, LinearMeasurement(H, self.rel_noise[i], y)
                        )
                        Hc = np.zeros((2, cent.n))
                        so = cent.offsets[_bias_name(i)]
                        xo = cent.offsets[_target_name(t)]
                        Hc[:, so : so + 2] = np.eye(2)
                        Hc[:, xo : xo + 4] = _POS_SELECT
                        cent.update(Hc, self.rel_noise[i], y)
                    m = world["lmk"][(k, i)]
                    svar = agent.key(_bias_name(i))
                    add_measurement(
                        agent.graph,
                        (svar,),
                        LinearMeasurement(np.eye(2), self.lmk_noise[i], m),
                    )
                    Hc = np.zeros((2, cent.n))
                    so = cent.offsets[_bias_name(i)]
                    Hc[:, so : so + 2] = np.eye(2)
                    cent.update(Hc, self.lmk_noise[i], m)
                for _ in range(cfg.rounds_per_step):
                    data.delivery.extend(
                        run_round(agents, self.topology, dropout, rng, timestep=k)
                    )
                for i in self.robots:
                    est = agents[i].estimate()
                    data.est_mean[i][k - 1] = est.mean
                    data.est_cov[i][k - 1] = est.covariance
                    data.truth[i][k - 1] = self.truth_vector(world, i, agents[i], k)
                    names = [v.name for v in agents[i].task_keys()]
                    cm, cc = cent.marginal(names)
                    data.cent_mean[i][k - 1] = cm
                    data.cent_cov[i][k - 1] = cc
                    dim = agents[i].graph.joint_factor().dim
                    data.max_graph_dim[i] = max(data.max_graph_dim[i], dim)
        except HetddfError as exc:
            if isinstance(exc, NumericalFailure):
                raise
            raise NumericalFailure(run_index, step, "n/a", exc) from exc
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(run_index, step, "n/a", exc) from exc
        return data


@dataclass
class TrackingRunData:
    robots: tuple[int, ...]
    task_keys: dict[int, tuple[VariableKey, ...]]
    est_mean: dict[int, np.ndarray]
    est_cov: dict[int, np.ndarray]
    truth: dict[int, np.ndarray]
    cent_mean: dict[int, np.ndarray]
    cent_cov: dict[int, np.ndarray]
    lambda_star: dict[int, np.ndarray]
    psd_min_eig: dict[int, np.ndarray]
    max_graph_dim: dict[int, int]
    delivery: list[DeliveryRecord]

    @classmethod
    def allocate(cls, scenario: TrackingScenario, agents, T: int) -> "TrackingRunData":
        robots = scenario.robots
        keys = {i: agents[i].task_keys() for i in robots}
        dims = {i: sum(k.dim for k in keys[i]) for i in robots}
        return cls(
            robots=robots,
            task_keys=keys,
            est_mean={i: np.zeros((T, dims[i])) for i in robots},
            est_cov={i: np.zeros((T, dims[i], dims[i])) for i in robots},
            truth={i: np.zeros((T, dims[i])) for i in robots},
            cent_mean={i: np.zeros((T, dims[i])) for i in robots},
            cent_cov={i: np.zeros((T, dims[i], dims[i])) for i in robots},
            lambda_star={i: np.ones(T) for i in robots},
            psd_min_eig={i: np.full(T, np.nan) for i in robots},
            max_graph_dim={i: 0 for i in robots},
            delivery=[],
        )


def run_centralized(scenario: TrackingScenario, run_index: int) -> TrackingRunData:
    """Centralized-only pass (the oracle columns of a normal run)."""
    return scenario.run(run_index)


# ---------------------------------------------------------------------------
# cooperative localization scenario


def _pose_name(i: int) -> str:
    return f"p{i:02d}"


def build_cl_topology(n_groups: int, group_size: int) -> Topology:
    """Ring of group-rings: cyclic, split into n_groups groups."""
    edges = []
    for g in range(n_groups):
        base = g * group_size
        for m in range(group_size):
            a = base + m + 1
            b = base + (m + 1) % group_size + 1
            edges.append((a, b))
        nxt = ((g + 1) % n_groups) * group_size
        edges.append((base + group_size, nxt + 1))
    return Topology(edges)


def steering_angle(robot: int, step: int, dt: float) -> float:
    """Scripted periodic steering; deterministic and known to every robot."""
    period = 8.0 + 2.0 * (robot % 5)
    phase = 2.0 * np.pi * robot / 20.0
    return 0.3 * math.sin(2.0 * np.pi * (step * dt) / period + phase)


class CLScenario:
    """20-robot cyclic cooperative localization with Dubins dynamics."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        if cfg.cl_edges:
            self.topology = Topology(cfg.cl_edges)
        else:
            self.topology = build_cl_topology(cfg.n_groups, cfg.group_size)
        self.robots = self.topology.agents()
        self.sigma_theta = math.radians(cfg.sigma_theta_deg)
        scen_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
        choices = np.asarray(cfg.sigma_r_choices, dtype=np.float64)
        self.sigma_r = {i: float(scen_rng.choice(choices)) for i in self.robots}
        self.landmarks = self._landmark_grid()
        self.start_poses = self._initial_poses()
        self.robot_landmarks = {
            i: self._nearest_landmarks(self.start_poses[idx][:2], cfg.landmarks_per_robot)
            for idx, i in enumerate(self.robots)
        }

    def _landmark_grid(self) -> np.ndarray:
        s = self.cfg.landmark_spacing
        coords = np.arange(-2 * s, 2 * s + 0.5 * s, s)
        return np.array([(x, y) for x in coords for y in coords])

    def _nearest_landmarks(self, pos: np.ndarray, count: int) -> np.ndarray:
        d = np.linalg.norm(self.landmarks - pos, axis=1)
        return np.sort(np.argsort(d, kind="stable")[:count])

    def _initial_poses(self) -> np.ndarray:
        cfg = self.cfg
        centers = [(-12.0, -12.0), (12.0, -12.0), (12.0, 12.0), (-12.0, 12.0)]
        out = np.zeros((len(self.robots), 3))
        for idx, _i in enumerate(self.robots):
            g = idx // cfg.group_size
            m = idx % cfg.group_size
            cx, cy = centers[g % len(centers)]
            ang = 2.0 * np.pi * m / cfg.group_size
            out[idx] = [cx + 4.0 * math.cos(ang), cy + 4.0 * math.sin(ang), wrap_angle(ang + 0.5 * np.pi)]
        return out

    def task_names(self, i: int) -> tuple[str, ...]:
        return tuple(sorted([_pose_name(i)] + [_pose_name(j) for j in self.topology.neighbors(i)]))

    def common_names(self, i: int, j: int) -> frozenset[str]:
        return frozenset(self.task_names(i)) & frozenset(self.task_names(j))

    # -- world -----------------------------------------------------------------

    def simulate_world(self, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        T = cfg.horizon
        n = len(self.robots)
        idx = {i: k for k, i in enumerate(self.robots)}
        poses = np.zeros((T + 1, n, 3))
        poses[0] = self.start_poses
        for k in range(1, T + 1):
            for i in self.robots:
                poses[k, idx[i]] = step_dubins(
                    poses[k - 1, idx[i]],
                    cfg.speed,
                    steering_angle(i, k - 1, cfg.dt),
                    cfg.wheelbase,
                    cfg.dt,
                    rng,
                    cfg.cl_process_sigma,
                )
        prior_means = np.zeros((n, 3))
        for i in self.robots:
            noise = rng.normal(0.0, 1.0, 3) * np.array(
                [
                    math.sqrt(cfg.prior_pos_var),
                    math.sqrt(cfg.prior_pos_var),
                    math.sqrt(cfg.prior_heading_var),
                ]
            )
            prior_means[idx[i]] = poses[0, idx[i]] + noise
            prior_means[idx[i], 2] = wrap_angle(prior_means[idx[i], 2])
        lmk_meas = {}
        rel_meas = {}
        for k in range(1, T + 1):
            for i in self.robots:
                for l in self.robot_landmarks[i]:
                    z = measure_bearing_range(
                        poses[k, idx[i]], self.landmarks[l], self.sigma_theta,
                        self.sigma_r[i], rng,
                    )
                    lmk_meas[(k, i, int(l))] = z
                for j in self.topology.neighbors(i):
                    z = measure_bearing_range(
                        poses[k, idx[i]], poses[k, idx[j]][:2], self.sigma_theta,
                        self.sigma_r[i], rng,
                    )
                    rel_meas[(k, i, j)] = z
        return {"idx": idx, "poses": poses, "prior_means": prior_means,
                "lmk": lmk_meas, "rel": rel_meas}

    # -- FG-DDF agents ------------------------------------------------------------

    def build_agents(self, world) -> dict[int, FusionAgent]:
        cfg = self.cfg
        q = np.diag(np.asarray(cfg.cl_process_sigma, dtype=np.float64) ** 2)
        agents = {}
        for i in self.robots:
            names = self.task_names(i)
            task = [VariableKey(n, 0, POSE_DIM) for n in names]
            common = {j: self.common_names(i, j) for j in self.topology.neighbors(i)}
            agent = FusionAgent(
                i,
                task,
                dynamic_names=names,
                common_sets=common,
                algo=cfg.algo,
                conservative=cfg.conservative,
                omega_cost=cfg.omega_cost,
            )
            agent._lin_means = {}

            def provider(name, k, agent=agent):
                m = agent._lin_means[name]
                rid = int(name[1:])
                v = cfg.speed
                F = dubins_jacobian(m, v, cfg.dt)
                nxt = step_dubins(m, v, steering_angle(rid, k, cfg.dt), cfg.wheelbase,
                                  cfg.dt, None)
                return LinearDynamics(F, np.eye(3), nxt - F @ m, q)

            agent.dynamics_provider = provider
            pvar = np.array([cfg.prior_pos_var, cfg.prior_pos_var, cfg.prior_heading_var])
            for n in names:
                key = VariableKey(n, 0, POSE_DIM)
                lam = np.diag(1.0 / pvar)
                mean = world["prior_means"][world["idx"][int(n[1:])]]
                agent.set_prior(CanonicalFactor((key,), lam @ mean, lam))
            agents[i] = agent
        return agents

    def build_centralized(self, world) -> InformationFilter:
        cfg = self.cfg
        blocks = sorted((_pose_name(i), POSE_DIM) for i in self.robots)
        n = POSE_DIM * len(self.robots)
        mean0 = np.zeros(n)
        cov0 = np.zeros((n, n))
        pvar = np.array([cfg.prior_pos_var, cfg.prior_pos_var, cfg.prior_heading_var])
        o = 0
        for name, d in blocks:
            ridx = world["idx"][int(name[1:])]
            mean0[o : o + d] = world["prior_means"][ridx]
            cov0[o : o + d, o : o + d] = np.diag(pvar)
            o += d
        return InformationFilter(blocks, mean0, cov0)

    def run(self, run_index: int) -> "CLRunData":
        cfg = self.cfg
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(0, run_index))
        )
        world = self.simulate_world(rng)
        agents = self.build_agents(world)
        cent = self.build_centralized(world)
        cicl = CIClBaseline(self, world)
        dropout = DropoutModel(cfg.p_success)
        T = cfg.horizon
        n = len(self.robots)
        data = CLRunData(
            robots=self.robots,
            truth=world["poses"][1:].copy(),
            fg_mean=np.zeros((T, n, 3)),
            fg_cov=np.zeros((T, n, 3, 3)),
            cicl_mean=np.zeros((T, n, 3)),
            cicl_cov=np.zeros((T, n, 3, 3)),
            cent_mean=np.zeros((T, n, 3)),
            cent_cov=np.zeros((T, n, 3, 3)),
        )
        q = np.diag(np.asarray(cfg.cl_process_sigma, dtype=np.float64) ** 2)
        step = 0
        try:
            for k in range(1, T + 1):
                step = k
                # FG-DDF: predict about current estimates, roll up, measure, fuse
                for i in self.robots:
                    agents[i]._lin_means = {
                        key.name: m for key, m in agents[i].marginal_means().items()
                    }
                for i in self.robots:
                    agents[i].predict()
                for i in self.robots:
                    conservative_filter(agents[i])
                # centralized prediction about its own means
                cmean, _ = cent.moments()
                per_block = {}
                for i in self.robots:
                    o = cent.offsets[_pose_name(i)]
                    m = cmean[o : o + 3]
                    F = dubins_jacobian(m, cfg.speed, cfg.dt)
                    nxt = step_dubins(m, cfg.speed, steering_angle(i, k - 1, cfg.dt),
                                      cfg.wheelbase, cfg.dt, None)
                    per_block[_pose_name(i)] = (F, nxt - F @ m, q)
                cent.predict(per_block)
                cicl.predict(k - 1)

                for i in self.robots:
                    agent = agents[i]
                    means = {key.name: m for key, m in agent.marginal_means().items()}
                    own = _pose_name(i)
                    R_l = np.diag([self.sigma_theta ** 2, self.sigma_r[i] ** 2])
                    for l in self.robot_landmarks[i]:
                        z = world["lmk"][(k, i, int(l))]
                        if z is None:
                            continue
                        h, jac = bearing_range_landmark_obs(self.landmarks[l])
                        add_linearized_measurement(
                            agent.graph, (agent.key(own),), h, jac(means[own]), R_l,
                            np.array(z), means[own], angle_rows=(0,),
                        )
                        cent.update_linearized(
                            *self._cent_landmark_obs(cent, i, l), R_l, np.array(z),
                            angle_rows=(0,),
                        )
                        cicl.update_landmark(i, l, np.array(z), R_l)
                    for j in self.topology.neighbors(i):
                        z = world["rel"][(k, i, j)]
                        if z is None:
                            continue
                        scope = canonical_order((agent.key(own), agent.key(_pose_name(j))))
                        off = {}
                        o = 0
                        for key in scope:
                            off[key.name] = o
                            o += key.dim
                        h, jac = bearing_range_relative_obs(off[own], off[_pose_name(j)], 6)
                        xh = np.concatenate([means[key.name] for key in scope])
                        add_linearized_measurement(
                            agent.graph, scope, h, jac(xh), R_l, np.array(z), xh,
                            angle_rows=(0,),
                        )
                        cent.update_linearized(
                            *self._cent_relative_obs(cent, i, j), R_l, np.array(z),
                            angle_rows=(0,),
                        )
                        cicl.handle_relative(i, j, np.array(z), R_l)
                for _ in range(cfg.rounds_per_step):
                    run_round(agents, self.topology, dropout, rng, timestep=k)
                for i in self.robots:
                    ridx = world["idx"][i]
                    est = agents[i].estimate()
                    o = 0
                    for key in est.scope:
                        if key.name == _pose_name(i):
                            data.fg_mean[k - 1, ridx] = est.mean[o : o + 3]
                            data.fg_cov[k - 1, ridx] = est.covariance[o : o + 3, o : o + 3]
                        o += key.dim
                    cm, cc = cent.marginal([_pose_name(i)])
                    data.cent_mean[k - 1, ridx] = cm
                    data.cent_cov[k - 1, ridx] = cc
                    data.cicl_mean[k - 1, ridx] = cicl.mean[i]
                    data.cicl_cov[k - 1, ridx] = cicl.cov[i]
        except HetddfError as exc:
            if isinstance(exc, NumericalFailure):
                raise
            raise NumericalFailure(run_index, step, "n/a", exc) from exc
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(run_index, step, "n/a", exc) from exc
        return data

    def _cent_landmark_obs(self, cent: InformationFilter, i: int, l: int):
        o = cent.offsets[_pose_name(i)]
        h0, jac0 = bearing_range_landmark_obs(self.landmarks[l])

        def h(x):
            return h0(x[o : o + 3])

        def jac(x):
            J = np.zeros((2, cent.n))
            J[:, o : o + 3] = jac0(x[o : o + 3])
            return J

        return h, jac

    def _cent_relative_obs(self, cent: InformationFilter, i: int, j: int):
        oi = cent.offsets[_pose_name(i)]
        oj = cent.offsets[_pose_name(j)]

        def h(x):
            dx = x[oj] - x[oi]
            dy = x[oj + 1] - x[oi + 1]
            return np.array(
                [wrap_angle(math.atan2(dy, dx) - x[oi + 2]), math.hypot(dx, dy)]
            )

        def jac(x):
            _, jrel = bearing_range_relative_obs(0, 3, 6)
            xx = np.concatenate([x[oi : oi + 3], x[oj : oj + 3]])
            Jsmall = jrel(xx)
            J = np.zeros((2, cent.n))
            J[:, oi : oi + 3] = Jsmall[:, 0:3]
            J[:, oj : oj + 3] = Jsmall[:, 3:6]
            return J

        return h, jac


class CIClBaseline:
    """Ego-only EKFs fused with covariance intersection on relative sightings.

    Memoryless on the communication side: the observing robot converts its
    relative measurement into an ad-hoc position estimate of the observed
    robot, which the latter fuses with a CI weight over its position states.
    """

    def __init__(self, scenario: CLScenario, world):
        from . import kernels

        self._kernels = kernels
        cfg = scenario.cfg
        self.scenario = scenario
        self.cfg = cfg
        self.mean = {}
        self.cov = {}
        pvar = np.diag([cfg.prior_pos_var, cfg.prior_pos_var, cfg.prior_heading_var])
        for i in scenario.robots:
            self.mean[i] = world["prior_means"][world["idx"][i]].copy()
            self.cov[i] = pvar.copy()
        self.q = np.diag(np.asarray(cfg.cl_process_sigma, dtype=np.float64) ** 2)

    def predict(self, step: int) -> None:
        cfg = self.cfg
        for i in self.scenario.robots:
            m = self.mean[i]
            F = dubins_jacobian(m, cfg.speed, cfg.dt)
            self.mean[i] = step_dubins(
                m, cfg.speed, steering_angle(i, step, cfg.dt), cfg.wheelbase, cfg.dt, None
            )
            self.cov[i] = F @ self.cov[i] @ F.T + self.q

    def _ekf_update(self, i: int, h, jac, R, z, angle_rows=(0,)) -> None:
        m = self.mean[i]
        J = jac(m)
        resid = z - h(m)
        for r in angle_rows:
            resid[r] = wrap_angle(resid[r])
        S = J @ self.cov[i] @ J.T + R
        K = self.cov[i] @ J.T @ np.linalg.inv(S)
        self.mean[i] = m + K @ resid
        self.mean[i][2] = wrap_angle(self.mean[i][2])
        P = (np.eye(3) - K @ J) @ self.cov[i]
        self.cov[i] = 0.5 * (P + P.T)

    def update_landmark(self, i: int, l: int, z: np.ndarray, R: np.ndarray) -> None:
        h, jac = bearing_range_landmark_obs(self.scenario.landmarks[l])
        self._ekf_update(i, h, jac, R, z)

    def handle_relative(self, i: int, j: int, z: np.ndarray, R: np.ndarray) -> None:
        """Robot i observed robot j: send j an ad-hoc position estimate, fused
        at j with covariance intersection over its position block."""
        m = self.mean[i]
        a = m[2] + z[0]
        r = z[1]
        pos = np.array([m[0] + r * math.cos(a), m[1] + r * math.sin(a)])
        Jp = np.array([[1.0, 0.0, -r * math.sin(a)], [0.0, 1.0, r * math.cos(a)]])
        Jm = np.array([[-r * math.sin(a), math.cos(a)], [r * math.cos(a), math.sin(a)]])
        Sig = Jp @ self.cov[i] @ Jp.T + Jm @ R @ Jm.T
        lam_msg = np.linalg.inv(Sig)
        H = np.zeros((2, 3))
        H[0, 0] = 1.0
        H[1, 1] = 1.0
        lam_j = np.linalg.inv(self.cov[j])
        lam_partial = H.T @ lam_msg @ H
        omega = float(
            self._kernels.golden_omega(
                np.ascontiguousarray(lam_j), np.ascontiguousarray(lam_partial),
                1e-3, 1.0, False,
            )
        )
        lam_f = omega * lam_j + (1.0 - omega) * lam_partial
        zeta_f = omega * (lam_j @ self.mean[j]) + (1.0 - omega) * (
            H.T @ lam_msg @ pos
        )
        cov_f = np.linalg.inv(lam_f)
        self.cov[j] = 0.5 * (cov_f + cov_f.T)
        self.mean[j] = cov_f @ zeta_f
        self.mean[j][2] = wrap_angle(self.mean[j][2])


@dataclass
class CLRunData:
    robots: tuple[int, ...]
    truth: np.ndarray  # (T, n, 3)
    fg_mean: np.ndarray
    fg_cov: np.ndarray
    cicl_mean: np.ndarray
    cicl_cov: np.ndarray
    cent_mean: np.ndarray
    cent_cov: np.ndarray


def run_cicl_baseline(scenario: CLScenario, run_index: int) -> CLRunData:
    """Baseline columns of a normal CL run (kept for API symmetry)."""
    return scenario.run(run_index)


def make_scenario(cfg: ScenarioConfig):
    if cfg.kind == "tracking":
        return TrackingScenario(cfg)
    return CLScenario(cfg)
