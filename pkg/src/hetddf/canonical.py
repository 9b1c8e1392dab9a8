"""Gaussian potentials in canonical (information) form.

A potential is a pair (zeta, lam) over an ordered scope of variable blocks:
zeta is the information vector, lam the information matrix.  Potentials add
under multiplication of densities, which is what makes the factor-graph
algebra below purely additive.  lam need not be positive definite — cross
factors created by prediction are indefinite by construction.
"""

from __future__ import annotations

import struct
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.linalg

from . import kernels
from .errors import DensityError, EliminationError, ScopeError

# Eliminated blocks with a worse 2-norm condition number than this abort
# marginalization instead of silently corrupting downstream fusion.
COND_LIMIT = 1e12

_SYM_TOL = 1e-9


class VariableKey(NamedTuple):
    """Identity of one variable block: (name, timestep) is unique per graph."""

    name: str
    timestep: int
    dim: int


def canonical_order(keys: Iterable[VariableKey]) -> tuple[VariableKey, ...]:
    """Sort keys by (name, timestep): the scope order used everywhere."""
    return tuple(sorted(keys, key=lambda k: (k.name, k.timestep)))


def check_dims_consistent(keys: Iterable[VariableKey]) -> None:
    seen: dict[tuple[str, int], int] = {}
    for k in keys:
        prev = seen.setdefault((k.name, k.timestep), k.dim)
        if prev != k.dim:
            raise ScopeError(
                f"variable {k.name}@{k.timestep} declared with dims {prev} and {k.dim}"
            )


class CanonicalFactor:
    """Gaussian potential {zeta, lam} over an ordered variable scope."""

    __slots__ = ("scope", "zeta", "lam", "_offsets")

    def __init__(self, scope: Sequence[VariableKey], zeta, lam):
        scope = tuple(scope)
        zeta = np.asarray(zeta, dtype=np.float64).reshape(-1)
        lam = np.asarray(lam, dtype=np.float64)
        if lam.ndim != 2:
            lam = lam.reshape(zeta.size, zeta.size)
        n = sum(k.dim for k in scope)
        if zeta.shape != (n,) or lam.shape != (n, n):
            raise ScopeError(
                f"shape mismatch: scope dim {n}, zeta {zeta.shape}, lam {lam.shape}"
            )
        if n:
            skew = np.max(np.abs(lam - lam.T))
            if skew > _SYM_TOL * (1.0 + np.max(np.abs(lam))):
                raise ScopeError(f"information matrix is not symmetric (skew {skew:g})")
        self.scope = scope
        self.zeta = zeta
        self.lam = 0.5 * (lam + lam.T)
        self._offsets = None

    @classmethod
    def _wrap(cls, scope, zeta, lam):
        # internal fast path: inputs already validated/symmetric
        self = object.__new__(cls)
        self.scope = scope
        self.zeta = zeta
        self.lam = lam
        self._offsets = None
        return self

    @classmethod
    def zero(cls, scope: Sequence[VariableKey]) -> "CanonicalFactor":
        scope = tuple(scope)
        n = sum(k.dim for k in scope)
        return cls._wrap(scope, np.zeros(n), np.zeros((n, n)))

    @property
    def dim(self) -> int:
        return self.zeta.shape[0]

    def offsets(self) -> dict[VariableKey, int]:
        if self._offsets is None:
            off = {}
            o = 0
            for k in self.scope:
                off[k] = o
                o += k.dim
            self._offsets = off
        return self._offsets

    def indices_of(self, keys: Sequence[VariableKey]) -> np.ndarray:
        """Flat row indices of the given scope variables, in the given order."""
        off = self.offsets()
        out = np.empty(sum(k.dim for k in keys), dtype=np.int64)
        o = 0
        for k in keys:
            p = off[k]
            out[o : o + k.dim] = np.arange(p, p + k.dim)
            o += k.dim
        return out

    def scaled(self, alpha: float) -> "CanonicalFactor":
        return CanonicalFactor._wrap(self.scope, alpha * self.zeta, alpha * self.lam)

    def __repr__(self):
        names = ",".join(f"{k.name}@{k.timestep}" for k in self.scope)
        return f"CanonicalFactor([{names}], dim={self.dim})"


class CanonicalDensity(CanonicalFactor):
    """A canonical factor whose information matrix is verified PD."""

    __slots__ = ()

    def __init__(self, scope, zeta, lam):
        super().__init__(scope, zeta, lam)
        _require_pd(self.lam, "CanonicalDensity information matrix")


def _require_pd(mat: np.ndarray, what: str) -> np.ndarray:
    """Cholesky factor of mat, or DensityError."""
    if mat.size == 0:
        raise DensityError(f"{what}: empty matrix")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise DensityError(f"{what} is not positive definite") from exc


def as_density(f: CanonicalFactor) -> CanonicalDensity:
    if isinstance(f, CanonicalDensity):
        return f
    d = object.__new__(CanonicalDensity)
    d.scope = f.scope
    d.zeta = f.zeta
    d.lam = f.lam
    d._offsets = None
    _require_pd(d.lam, "information matrix")
    return d


class MomentGaussian:
    """Mean/covariance parameterization over an ordered scope."""

    __slots__ = ("scope", "mean", "covariance")

    def __init__(self, scope: Sequence[VariableKey], mean, covariance):
        scope = tuple(scope)
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        covariance = np.asarray(covariance, dtype=np.float64)
        n = sum(k.dim for k in scope)
        if mean.shape != (n,) or covariance.shape != (n, n):
            raise ScopeError("moment parameter shapes do not match scope")
        _require_pd(covariance, "covariance")
        self.scope = scope
        self.mean = mean
        self.covariance = 0.5 * (covariance + covariance.T)

    def __repr__(self):
        names = ",".join(f"{k.name}@{k.timestep}" for k in self.scope)
        return f"MomentGaussian([{names}])"


def align_scope(f: CanonicalFactor, target_scope: Sequence[VariableKey]) -> CanonicalFactor:
    """Embed f into a larger/permuted scope, zero elsewhere."""
    target = tuple(target_scope)
    check_dims_consistent(tuple(f.scope) + target)
    pos = {}
    o = 0
    for k in target:
        pos[k] = o
        o += k.dim
    n = o
    idx = np.empty(f.dim, dtype=np.int64)
    o = 0
    for k in f.scope:
        if k not in pos:
            raise ScopeError(f"variable {k.name}@{k.timestep} missing from target scope")
        p = pos[k]
        idx[o : o + k.dim] = np.arange(p, p + k.dim)
        o += k.dim
    zeta = np.zeros(n)
    lam = np.zeros((n, n))
    zeta[idx] = f.zeta
    lam[np.ix_(idx, idx)] = f.lam
    return CanonicalFactor._wrap(target, zeta, lam)


def _scatter_add(zeta, lam, n, f, pos) -> None:
    """Accumulate factor f into (zeta, lam) given target block offsets."""
    idx = np.empty(f.dim, dtype=np.int64)
    q = 0
    for k in f.scope:
        p = pos[k]
        idx[q : q + k.dim] = np.arange(p, p + k.dim)
        q += k.dim
    zeta[idx] += f.zeta
    flat = (idx[:, None] * n + idx[None, :]).ravel()
    lam.ravel()[flat] += f.lam.ravel()


def factor_sum(fs: Sequence[CanonicalFactor]) -> CanonicalFactor:
    """Direct sum of potentials over the union scope (canonical order)."""
    fs = list(fs)
    if not fs:
        raise ScopeError("factor_sum of an empty list")
    if len(fs) == 1:
        return fs[0]
    keys: dict[tuple[str, int], VariableKey] = {}
    for f in fs:
        for k in f.scope:
            prev = keys.setdefault((k.name, k.timestep), k)
            if prev.dim != k.dim:
                raise ScopeError(
                    f"variable {k.name}@{k.timestep} has conflicting dims "
                    f"{prev.dim} vs {k.dim}"
                )
    scope = canonical_order(keys.values())
    pos = {}
    o = 0
    for k in scope:
        pos[k] = o
        o += k.dim
    zeta = np.zeros(o)
    lam = np.zeros((o, o))
    for f in fs:
        if f.scope == scope:
            zeta += f.zeta
            lam += f.lam
        else:
            _scatter_add(zeta, lam, o, f, pos)
    return CanonicalFactor._wrap(scope, zeta, lam)


def factor_diff(a: CanonicalFactor, b: CanonicalFactor) -> CanonicalFactor:
    """a minus b, with b embedded into a's scope."""
    if not set(b.scope) <= set(a.scope):
        raise ScopeError("factor_diff: b.scope is not contained in a.scope")
    zeta = a.zeta.copy()
    lam = a.lam.copy()
    if b.dim:
        idx = a.indices_of(b.scope)
        zeta[idx] -= b.zeta
        lam[np.ix_(idx, idx)] -= b.lam
    return CanonicalFactor._wrap(a.scope, zeta, lam)


def marginalize(d: CanonicalFactor, keep: Iterable[VariableKey]) -> CanonicalFactor:
    """Schur-complement marginal onto ``keep`` (ordered as in d.scope)."""
    keepset = frozenset(keep)
    if not keepset <= set(d.scope):
        raise ScopeError("marginalize: keep variables not all in scope")
    keep_keys = tuple(k for k in d.scope if k in keepset)
    elim_keys = tuple(k for k in d.scope if k not in keepset)
    if not elim_keys:
        return d
    if not keep_keys:
        return CanonicalFactor._wrap((), np.zeros(0), np.zeros((0, 0)))
    keep_idx = d.indices_of(keep_keys)
    elim_idx = d.indices_of(elim_keys)
    try:
        zeta_m, lam_m, cond = kernels.schur_marginal(d.zeta, d.lam, keep_idx, elim_idx)
    except np.linalg.LinAlgError as exc:
        raise EliminationError(
            f"singular block while eliminating {elim_keys}", elim_keys
        ) from exc
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise EliminationError(
            f"ill-conditioned block (cond {cond:.3g}) while eliminating "
            f"{[f'{k.name}@{k.timestep}' for k in elim_keys]}",
            elim_keys,
        )
    return CanonicalFactor._wrap(keep_keys, zeta_m, lam_m)


def conditional(joint: CanonicalFactor, head: Iterable[VariableKey]) -> CanonicalFactor:
    """Potential of p(head | rest) as joint minus the marginal over rest."""
    headset = frozenset(head)
    if not headset <= set(joint.scope):
        raise ScopeError("conditional: head variables not all in scope")
    given = tuple(k for k in joint.scope if k not in headset)
    if not given:
        return joint
    return factor_diff(joint, marginalize(joint, given))


def to_moments(d: CanonicalFactor) -> MomentGaussian:
    """Moment parameters of a PD canonical factor (symmetric factorization)."""
    chol = _require_pd(d.lam, "to_moments")
    mean = scipy.linalg.cho_solve((chol, True), d.zeta)
    cov = scipy.linalg.cho_solve((chol, True), np.eye(d.dim))
    return MomentGaussian(d.scope, mean, 0.5 * (cov + cov.T))


def from_moments(m: MomentGaussian) -> CanonicalDensity:
    chol = _require_pd(m.covariance, "from_moments")
    lam = scipy.linalg.cho_solve((chol, True), np.eye(m.mean.shape[0]))
    zeta = scipy.linalg.cho_solve((chol, True), m.mean)
    return CanonicalDensity(m.scope, zeta, 0.5 * (lam + lam.T))


# ---------------------------------------------------------------------------
# binary serialization (little-endian), bit-exact round trip


def factor_to_bytes(f: CanonicalFactor) -> bytes:
    parts = [struct.pack("<I", len(f.scope))]
    for k in f.scope:
        nb = k.name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<IH", k.timestep, k.dim))
    parts.append(np.ascontiguousarray(f.zeta, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(f.lam, dtype="<f8").tobytes())
    return b"".join(parts)


def factor_from_bytes(buf: bytes, offset: int = 0) -> tuple[CanonicalFactor, int]:
    """Decode one factor; returns (factor, next offset)."""
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    scope = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        timestep, dim = struct.unpack_from("<IH", buf, offset)
        offset += 6
        scope.append(VariableKey(name, timestep, dim))
    n = sum(k.dim for k in scope)
    zeta = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).copy()
    offset += 8 * n
    lam = (
        np.frombuffer(buf, dtype="<f8", count=n * n, offset=offset)
        .reshape(n, n)
        .copy()
    )
    offset += 8 * n * n
    return CanonicalFactor._wrap(tuple(scope), zeta, lam), offset
