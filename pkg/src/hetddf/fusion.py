"""Peer-to-peer heterogeneous fusion agents.

Each agent owns a local factor graph over its task variables and talks to
neighbors about the variables they share.  Two common-data rules are
implemented: the heterogeneous channel filter (per-link ledger graph whose
joint is subtracted from outgoing marginals) and heterogeneous covariance
intersection (weighted-average approximation of the common pdf, weight
optimized at the receiving end).
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .canonical import (
    CanonicalDensity,
    CanonicalFactor,
    MomentGaussian,
    VariableKey,
    as_density,
    canonical_order,
    factor_diff,
    factor_from_bytes,
    factor_to_bytes,
    to_moments,
)
from .errors import DensityError, FusionError
from .filtering import LinearDynamics, SparsityPattern, add_prediction
from .graph import FactorGraph

HSCF = "hscf"
HSCI = "hsci"
_ALGO_CODE = {HSCF: 0, HSCI: 1}
_ALGO_NAME = {v: k for k, v in _ALGO_CODE.items()}

_HEADER = struct.Struct("<IIIBH")


class FusionMessage:
    """Factors over a common variable set, sent peer to peer."""

    __slots__ = ("sender", "recipient", "timestep", "algo", "factors", "_raw")

    def __init__(self, sender, recipient, timestep, algo, factors):
        self.sender = int(sender)
        self.recipient = int(recipient)
        self.timestep = int(timestep)
        self.algo = algo
        self.factors = tuple(factors)
        self._raw = None

    def to_bytes(self) -> bytes:
        if self._raw is None:
            parts = [
                _HEADER.pack(
                    self.sender,
                    self.recipient,
                    self.timestep,
                    _ALGO_CODE[self.algo],
                    len(self.factors),
                )
            ]
            parts += [factor_to_bytes(f) for f in self.factors]
            self._raw = b"".join(parts)
        return self._raw

    @property
    def nbytes(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FusionMessage":
        sender, recipient, timestep, algo, count = _HEADER.unpack_from(buf, 0)
        offset = _HEADER.size
        factors = []
        for _ in range(count):
            f, offset = factor_from_bytes(buf, offset)
            factors.append(f)
        return cls(sender, recipient, timestep, _ALGO_NAME[algo], factors)


def optimize_omega(
    local: CanonicalDensity, remote: CanonicalDensity, cost: str = "trace"
) -> float:
    """CI weight minimizing the chosen cost of the fused covariance.

    Deterministic golden-section search on [0, 1] (tolerance 1e-6); a flat
    objective ties to 0.5.
    """
    if canonical_order(local.scope) != canonical_order(remote.scope):
        raise FusionError("optimize_omega: scopes differ")
    if cost == "trace":
        use_logdet = False
    elif cost == "logdet":
        use_logdet = True
    else:
        raise FusionError(f"unknown omega cost {cost!r}")
    a = np.ascontiguousarray(local.lam)
    b = np.ascontiguousarray(remote.lam)
    return float(kernels.golden_omega(a, b, 0.0, 1.0, use_logdet))


class FusionAgent:
    """One robot: task, local graph, per-neighbor channel-filter graphs."""

    def __init__(
        self,
        agent_id: int,
        task: Sequence[VariableKey],
        dynamic_names: Sequence[str],
        common_sets: dict[int, Sequence[str]],
        algo: str = HSCF,
        conservative: bool = True,
        omega_cost: str = "trace",
        cf_update_on_send: bool = True,
        dynamics_provider: Optional[Callable[[str, int], LinearDynamics]] = None,
    ):
        if algo not in (HSCF, HSCI):
            raise FusionError(f"unknown fusion algorithm {algo!r}")
        self.id = int(agent_id)
        self.task = tuple(task)
        self.dims = {k.name: k.dim for k in self.task}
        self.dynamic_names = frozenset(dynamic_names) & set(self.dims)
        self.common_names = {int(j): frozenset(v) for j, v in common_sets.items()}
        self.neighbors = tuple(sorted(self.common_names))
        covered = set().union(*self.common_names.values()) if self.common_names else set()
        self.local_names = frozenset(self.dims) - covered
        self.algo = algo
        self.conservative = bool(conservative)
        self.omega_cost = omega_cost
        self.cf_update_on_send = bool(cf_update_on_send)
        self.dynamics_provider = dynamics_provider
        self.current_step = 0

        self.graph = FactorGraph()
        for k in self.task:
            self.graph.add_variable(self.key(k.name))
        self.cf_graphs: dict[int, FactorGraph] = {}
        if algo == HSCF:
            for j in self.neighbors:
                self.init_cf(j)

    # -- variable bookkeeping -------------------------------------------------

    def key(self, name: str) -> VariableKey:
        t = self.current_step if name in self.dynamic_names else 0
        return VariableKey(name, t, self.dims[name])

    def task_keys(self) -> tuple[VariableKey, ...]:
        return canonical_order(self.key(k.name) for k in self.task)

    def past_variable_keys(self) -> tuple[VariableKey, ...]:
        return canonical_order(
            k
            for k in self.graph.variables.values()
            if k.name in self.dynamic_names and k.timestep < self.current_step
        )

    def local_variable_keys(self) -> tuple[VariableKey, ...]:
        return canonical_order(
            k for k in self.graph.variables.values() if k.name in self.local_names
        )

    def common_past_keys(self) -> tuple[VariableKey, ...]:
        return canonical_order(
            k
            for k in self.graph.variables.values()
            if k.name not in self.local_names and k.timestep < self.current_step
        )

    def sparsity_pattern(self) -> SparsityPattern:
        """Local block detached, the all-neighbor shared set as first head,
        each neighbor-exclusive common set conditioned on it."""
        detached = []
        if self.local_names:
            detached.append({self.key(n) for n in self.local_names})
        entries = []
        sets = [self.common_names[j] for j in self.neighbors]
        shared = frozenset.intersection(*sets) if sets else frozenset()
        if shared:
            entries.append(({self.key(n) for n in shared}, set()))
        assigned = set(shared)
        for j in self.neighbors:
            excl = self.common_names[j] - assigned
            if excl:
                given = {self.key(n) for n in shared} if shared else set()
                entries.append(({self.key(n) for n in excl}, given))
                assigned |= excl
        return SparsityPattern(detached, entries)

    # -- priors / channel filters ---------------------------------------------

    def set_prior(self, factor: CanonicalFactor) -> int:
        return self.graph.add_factor(factor)

    def init_cf(self, j: int, factors: Sequence[CanonicalFactor] = ()) -> None:
        """(Re)create the channel-filter graph for link j, optionally seeded
        with the prior factors both ends share."""
        cf = FactorGraph()
        for name in sorted(self.common_names[j]):
            cf.add_variable(self.key(name))
        for f in factors:
            cf.add_factor(f)
        self.cf_graphs[j] = cf

    def advance_cf_graphs(self, lambda_star: float) -> None:
        """Roll each CF graph to the current step, deflated like the local graph."""
        if self.algo != HSCF:
            return
        for j in self.neighbors:
            cf = self.cf_graphs[j]
            past = []
            for name in sorted(self.common_names[j] & self.dynamic_names):
                v_old = VariableKey(name, self.current_step - 1, self.dims[name])
                if (v_old.name, v_old.timestep) in cf.variables:
                    dyn = self.dynamics_provider(name, self.current_step - 1)
                    add_prediction(cf, v_old, dyn)
                    past.append(v_old)
            if past:
                joint = cf.joint_factor()
                current = tuple(k for k in joint.scope if k not in past)
                rolled = marginalize(joint, current)
                if lambda_star != 1.0:
                    rolled = rolled.scaled(lambda_star)
                cf.replace_all_factors([rolled])
                cf.drop_variables(past)
            elif lambda_star != 1.0 and cf.factors:
                cf.replace_all_factors(
                    [cf.factors[i].scaled(lambda_star) for i in sorted(cf.factors)]
                )

    # -- filtering-side hooks ---------------------------------------------------

    def predict(self) -> None:
        """Add prediction factors for every dynamic task variable."""
        if self.dynamics_provider is None:
            raise FusionError("agent has no dynamics provider")
        for name in sorted(self.dynamic_names):
            dyn = self.dynamics_provider(name, self.current_step)
            add_prediction(self.graph, self.key(name), dyn)
        self.current_step += 1

    # -- messaging ---------------------------------------------------------------

    def prepare_message(self, j: int) -> FusionMessage:
        """Marginalize onto the common set with j and package the message.

        HS-CF subtracts the channel-filter joint and (in send-time mode)
        immediately books the message into the CF graph; HS-CI sends the raw
        marginal.
        """
        common = self.common_names.get(j)
        if common is None:
            raise FusionError(f"agent {self.id} has no neighbor {j}")
        joint = self.graph.joint_factor()
        bar = marginalize(joint, [k for k in joint.scope if k.name in common])
        if self.algo == HSCF:
            cf = self.cf_graphs[j]
            payload = factor_diff(bar, cf.joint_factor())
        else:
            payload = bar
        msg = FusionMessage(self.id, j, self.current_step, self.algo, (payload,))
        if self.algo == HSCF and self.cf_update_on_send:
            self.commit_cf(j, msg)
        return msg

    def commit_cf(self, j: int, msg: FusionMessage) -> None:
        """Book an outgoing message into the link's CF graph (deferred in
        acknowledged mode until the network confirms delivery)."""
        cf = self.cf_graphs[j]
        for f in msg.factors:
            cf.add_factor(f)
        cf.consolidate()

    def fuse_message(self, msg: FusionMessage, own_out: FusionMessage) -> None:
        """Integrate a received message (Algorithm-style fuse step)."""
        common = self.common_names.get(msg.sender)
        if common is None:
            raise FusionError(f"message from unknown neighbor {msg.sender}")
        allowed = {self.key(n) for n in common}
        for f in msg.factors:
            if not set(f.scope) <= allowed:
                raise FusionError("message scope exceeds the common variable set")
        if self.algo == HSCF:
            cf = self.cf_graphs[msg.sender]
            for f in msg.factors:
                self.graph.add_factor(f)
                cf.add_factor(f)
            cf.consolidate()
            return
        # HS-CI: weight computed here, at the receiving end
        local = own_out.factors[0]
        remote = msg.factors[0]
        if canonical_order(local.scope) != canonical_order(remote.scope):
            raise FusionError("CI marginals cover different scopes")
        omega = optimize_omega(as_density(local), as_density(remote), self.omega_cost)
        fused_lam = omega * local.lam + (1.0 - omega) * remote.lam
        try:
            np.linalg.cholesky(fused_lam)
        except np.linalg.LinAlgError as exc:
            raise FusionError("fused CI marginal is not positive definite") from exc
        w = 1.0 - omega
        self.graph.add_factor(
            CanonicalFactor(
                local.scope, w * (remote.zeta - local.zeta), w * (remote.lam - local.lam)
            )
        )

    # -- estimates ---------------------------------------------------------------

    def estimate(self) -> MomentGaussian:
        return to_moments(self.graph.joint_density())

    def marginal_means(self) -> dict[VariableKey, np.ndarray]:
        est = self.estimate()
        out = {}
        o = 0
        for k in est.scope:
            out[k] = est.mean[o : o + k.dim]
            o += k.dim
        return out
