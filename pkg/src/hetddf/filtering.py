"""Kalman-filtering-style graph operations and conservative filtering.

Prediction, roll-up and measurement updates translate the usual information
filter steps into factor insertions.  Conservative filtering handles the two
dependency problems heterogeneous fusion creates during roll-up: hidden
dependencies (through other robots' unmodelled states) are cut by splitting
the coupled component into one-sided marginals, and visible dependencies
between common sets are re-sparsified along a target pattern whose
information matrix is then deflated until it understates the dense one.
"""

from __future__ import annotations

from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .canonical import (
    CanonicalFactor,
    VariableKey,
    canonical_order,
    conditional,
    factor_sum,
    marginalize,
)
from .errors import DensityError, ScopeError
from .graph import FactorGraph

DEFLATION_EIG_FLOOR = 1e-12


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


class LinearDynamics(NamedTuple):
    F: np.ndarray
    G: np.ndarray
    u: np.ndarray
    Q: np.ndarray


class LinearMeasurement(NamedTuple):
    H: np.ndarray
    R: np.ndarray
    y: np.ndarray


class SparsityPattern:
    """Target factorization after roll-up.

    ``detached`` blocks keep only their own marginal; ``entries`` is an
    ordered list of (head, given) pairs — the first entries with an empty
    ``given`` become plain marginals, the rest conditionals on ``given``.
    Heads and detached blocks must be disjoint and jointly cover the graph.
    """

    def __init__(
        self,
        detached: Sequence[Iterable[VariableKey]],
        entries: Sequence[tuple[Iterable[VariableKey], Iterable[VariableKey]]],
    ):
        self.detached = tuple(frozenset(b) for b in detached)
        self.entries = tuple(
            (frozenset(h), frozenset(g)) for h, g in entries
        )
        blocks = list(self.detached) + [h for h, _ in self.entries]
        seen: set[VariableKey] = set()
        for b in blocks:
            if b & seen:
                raise ScopeError("sparsity pattern heads/blocks overlap")
            seen |= b

    def covered(self) -> frozenset[VariableKey]:
        out: set[VariableKey] = set()
        for b in self.detached:
            out |= b
        for h, _ in self.entries:
            out |= h
        return frozenset(out)

    def validate_covers(self, variables: Iterable[VariableKey]) -> None:
        missing = set(variables) - self.covered()
        if missing:
            raise ScopeError(f"sparsity pattern does not cover {sorted(missing)}")


# ---------------------------------------------------------------------------
# prediction / measurement factors


_PRED_CACHE: dict = {}


def _prediction_blocks(dyn: LinearDynamics, n: int):
    F = np.ascontiguousarray(dyn.F, dtype=np.float64)
    G = np.ascontiguousarray(dyn.G, dtype=np.float64)
    u = np.ascontiguousarray(dyn.u, dtype=np.float64).reshape(-1)
    Q = np.ascontiguousarray(dyn.Q, dtype=np.float64)
    if F.shape != (n, n) or Q.shape != (n, n) or G.shape[0] != n or G.shape[1] != u.size:
        raise ScopeError("dynamics dimensions do not match the variable dim")
    key = (n, F.tobytes(), G.tobytes(), u.tobytes(), Q.tobytes())
    hit = _PRED_CACHE.get(key)
    if hit is None:
        Qinv = np.linalg.inv(Q)
        Qinv = 0.5 * (Qinv + Qinv.T)
        gu = G @ u
        lam_k = F.T @ Qinv @ F
        cross = np.zeros((2 * n, 2 * n))
        cross[:n, n:] = -F.T @ Qinv
        cross[n:, :n] = cross[:n, n:].T
        hit = (
            -F.T @ (Qinv @ gu),
            0.5 * (lam_k + lam_k.T),
            Qinv @ gu,
            Qinv,
            cross,
        )
        if len(_PRED_CACHE) > 512:
            _PRED_CACHE.clear()
        _PRED_CACHE[key] = hit
    return hit


def add_prediction(g: FactorGraph, v_k: VariableKey, dyn: LinearDynamics) -> VariableKey:
    """Append the three prediction factors for v_k -> v_{k+1}; returns the new key."""
    if (v_k.name, v_k.timestep) not in g.variables:
        raise ScopeError(f"unknown variable {v_k.name}@{v_k.timestep}")
    n = v_k.dim
    zeta_k, lam_k, zeta_n, lam_n, cross = _prediction_blocks(dyn, n)
    v_next = g.add_variable(VariableKey(v_k.name, v_k.timestep + 1, n))
    g.add_factor(CanonicalFactor._wrap((v_k,), zeta_k, lam_k))
    g.add_factor(CanonicalFactor._wrap((v_next,), zeta_n, lam_n))
    g.add_factor(CanonicalFactor._wrap((v_k, v_next), np.zeros(2 * n), cross))
    return v_next


def add_measurement(
    g: FactorGraph, variables: Sequence[VariableKey], m: LinearMeasurement
) -> int:
    """Add {H'R^-1 y, H'R^-1 H} over the measured variables (canonical order)."""
    scope = canonical_order(variables)
    n = sum(k.dim for k in scope)
    H = np.asarray(m.H, dtype=np.float64)
    R = np.asarray(m.R, dtype=np.float64)
    y = np.asarray(m.y, dtype=np.float64).reshape(-1)
    if H.shape != (y.size, n) or R.shape != (y.size, y.size):
        raise ScopeError("measurement dimensions do not match the variables")
    Rinv = np.linalg.inv(R)
    Rinv = 0.5 * (Rinv + Rinv.T)
    HtRi = H.T @ Rinv
    return g.add_factor(CanonicalFactor(scope, HtRi @ y, HtRi @ H))


def add_linearized_measurement(
    g: FactorGraph,
    variables: Sequence[VariableKey],
    h: Callable[[np.ndarray], np.ndarray],
    jac: np.ndarray,
    R: np.ndarray,
    y: np.ndarray,
    x_hat: np.ndarray,
    angle_rows: Sequence[int] = (),
) -> int:
    """EKF-style factor for y = h(x) + v, linearized about x_hat.

    ``jac`` is the Jacobian evaluated at x_hat with columns aligned to the
    canonical order of ``variables``; residual rows listed in ``angle_rows``
    are wrapped to (-pi, pi].
    """
    scope = canonical_order(variables)
    n = sum(k.dim for k in scope)
    J = np.asarray(jac, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    x_hat = np.asarray(x_hat, dtype=np.float64).reshape(-1)
    if J.shape != (y.size, n) or x_hat.size != n:
        raise ScopeError("Jacobian dimensions do not match the variables")
    resid = y - np.asarray(h(x_hat), dtype=np.float64).reshape(-1)
    for r in angle_rows:
        resid[r] = wrap_angle(resid[r])
    pseudo = LinearMeasurement(J, R, resid + J @ x_hat)
    return add_measurement(g, scope, pseudo)


# ---------------------------------------------------------------------------
# conservative filtering


def decouple_hidden(
    g: FactorGraph,
    local_vars: Iterable[VariableKey],
    common_past_vars: Iterable[VariableKey],
) -> None:
    """Cut factors that couple local variables to past common variables.

    Coupling factors are grouped into connected components (shared scope
    variables); each component, together with every factor living entirely
    inside its variable span, is summed and replaced by the product of its
    two one-sided marginals.  Afterwards no factor spans both sets; only the
    local/common cross-correlation is dropped.
    """
    local = frozenset(local_vars)
    common = frozenset(common_past_vars)
    couplers = [
        fid
        for fid in sorted(g.factors)
        if (set(g.factors[fid].scope) & local) and (set(g.factors[fid].scope) & common)
    ]
    if not couplers:
        return

    uf = {fid: fid for fid in couplers}

    def find(x):
        while uf[x] != x:
            uf[x] = uf[uf[x]]
            x = uf[x]
        return x

    touched: dict[VariableKey, int] = {}
    for fid in couplers:
        for k in g.factors[fid].scope:
            if k in touched:
                ra, rb = find(touched[k]), find(fid)
                if ra != rb:
                    uf[max(ra, rb)] = min(ra, rb)
            else:
                touched[k] = fid

    components: dict[int, list[int]] = {}
    for fid in couplers:
        components.setdefault(find(fid), []).append(fid)

    for root in sorted(components):
        comp = components[root]
        span: set[VariableKey] = set()
        for fid in comp:
            span |= set(g.factors[fid].scope)
        absorbed = [
            gid
            for gid in sorted(g.factors)
            if gid not in comp and set(g.factors[gid].scope) <= span
        ]
        joint = factor_sum([g.factors[i] for i in comp + absorbed])
        side_local = tuple(k for k in joint.scope if k in local)
        side_rest = tuple(k for k in joint.scope if k not in local)
        f_local = marginalize(joint, side_local)
        f_rest = marginalize(joint, side_rest)
        for i in comp + absorbed:
            g.remove_factor(i)
        g.add_factor(f_local)
        g.add_factor(f_rest)


def refactor_along_pattern(
    joint: CanonicalFactor, pattern: SparsityPattern
) -> list[CanonicalFactor]:
    """Marginal/conditional factors of ``joint`` following the pattern."""
    out = []
    for block in pattern.detached:
        out.append(marginalize(joint, block))
    for head, given in pattern.entries:
        if not given:
            out.append(marginalize(joint, head))
        else:
            sub = marginalize(joint, head | given)
            out.append(conditional(sub, head))
    return out


def regain_conditional_independence(g: FactorGraph, pattern: SparsityPattern) -> None:
    """Replace the dense rolled-up joint by its pattern factorization."""
    pattern.validate_covers(g.variables.values())
    joint = g.joint_density()
    g.replace_all_factors(refactor_along_pattern(joint, pattern))


def deflation_constant(lam_sp: np.ndarray, lam_de: np.ndarray) -> float:
    """min(1, smallest eigenvalue of lam_sp^{-1/2} lam_de lam_sp^{-1/2}).

    The returned value scales lam_sp so that lam_de - lam*lam_sp stays PSD.
    """
    lam_sp = np.ascontiguousarray(lam_sp, dtype=np.float64)
    lam_de = np.ascontiguousarray(lam_de, dtype=np.float64)
    if lam_sp.shape != lam_de.shape or lam_sp.shape[0] != lam_sp.shape[1]:
        raise ScopeError("deflation matrices must be square and equally sized")
    for name, mat in (("sparse", lam_sp), ("dense", lam_de)):
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError as exc:
            raise DensityError(f"{name} information matrix is not PD") from exc
    raw = float(kernels.deflation_min_eig(lam_sp, lam_de, DEFLATION_EIG_FLOOR))
    lam_star = min(1.0, raw)
    if lam_star <= 0.0:
        raise DensityError(f"deflation constant {lam_star:g} is not positive")
    return lam_star


class FilterStepResult(NamedTuple):
    lambda_star: float
    psd_min_eig: float | None


def conservative_filter(agent, check_psd: bool = False) -> FilterStepResult:
    """One roll-up with conservative sparsification (Algorithm-style flow).

    Expects prediction factors for the new step to be present already.  The
    agent provides the graph, the local/common variable split, the sparsity
    pattern and its channel-filter graphs.  With conservative filtering off
    (or no neighbors) this is a plain roll-up with lambda* = 1.

    Roll-up is performed on the assembled joint (one Schur complement over
    all past variables), which is algebraically identical to eliminating
    them one by one.
    """
    g = agent.graph
    past = agent.past_variable_keys()
    run_sparse = agent.conservative and bool(agent.neighbors)
    lambda_star = 1.0
    psd_min_eig = None

    if past:
        past_set = set(past)
        if run_sparse:
            # dense 'true' joint: the would-be roll-up without approximations
            joint0 = g.joint_factor()
            current = tuple(k for k in joint0.scope if k not in past_set)
            dense = marginalize(joint0, current)
            try:
                np.linalg.cholesky(dense.lam)
            except np.linalg.LinAlgError as exc:
                raise DensityError("rolled-up dense joint is not PD") from exc

            decouple_hidden(g, agent.local_variable_keys(), agent.common_past_keys())
            rolled = marginalize(g.joint_factor(), current)
            pattern = agent.sparsity_pattern()
            pattern.validate_covers(current)
            sparse_factors = refactor_along_pattern(rolled, pattern)
            sp = factor_sum(
                [CanonicalFactor.zero(current)] + sparse_factors
            )
            lambda_star = deflation_constant(sp.lam, dense.lam)
            mu_de = np.linalg.solve(dense.lam, dense.zeta)
            lam_scaled = lambda_star * sp.lam
            target = CanonicalFactor._wrap(sp.scope, lam_scaled @ mu_de, lam_scaled)
            g.replace_all_factors(refactor_along_pattern(target, pattern))
            g.drop_variables(past)
            if check_psd:
                diff = dense.lam - lam_scaled
                psd_min_eig = float(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0])
        else:
            joint0 = g.joint_factor()
            current = tuple(k for k in joint0.scope if k not in past_set)
            g.replace_all_factors([marginalize(joint0, current)])
            g.drop_variables(past)

    agent.advance_cf_graphs(lambda_star)
    return FilterStepResult(lambda_star, psd_min_eig)
