"""Hot numeric kernels: Schur-complement marginalization, deflation
eigenvalue computation, and the covariance-intersection weight search.

The simulator spends most of its time in these three routines, on dense
matrices between 2x2 and ~40x40.  They are compiled with numba when it is
available; set ``HETDDF_NO_NUMBA=1`` to force the pure-numpy fallback (same
source, executed uncompiled).  ``benchmarks/bench_kernels.py`` compares the
two paths.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("HETDDF_NO_NUMBA", "").lower() not in ("1", "true", "yes")
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a hard dependency
        USE_NUMBA = False

if not USE_NUMBA:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def schur_marginal(zeta, lam, keep, elim):
    """Marginalize the ``elim`` index block out of (zeta, lam).

    Returns (zeta_keep, lam_keep, cond) where cond is the 2-norm condition
    number of the eliminated block.  When the block is numerically singular
    the marginal outputs are zeros and cond is +inf; the caller decides the
    acceptable conditioning.
    """
    nk = keep.shape[0]
    ne = elim.shape[0]
    A = np.empty((nk, nk))
    B = np.empty((nk, ne))
    C = np.empty((ne, ne))
    for i in range(nk):
        for j in range(nk):
            A[i, j] = lam[keep[i], keep[j]]
        for j in range(ne):
            B[i, j] = lam[keep[i], elim[j]]
    for i in range(ne):
        for j in range(ne):
            C[i, j] = lam[elim[i], elim[j]]

    w = np.linalg.eigh(C)[0]
    amin = np.min(np.abs(w))
    amax = np.max(np.abs(w))
    if amin <= 0.0 or not np.isfinite(amax):
        return np.zeros(nk), np.zeros((nk, nk)), np.inf
    cond = amax / amin

    rhs = np.empty((ne, nk + 1))
    for i in range(ne):
        for j in range(nk):
            rhs[i, j] = B[j, i]
        rhs[i, nk] = zeta[elim[i]]
    sol = np.linalg.solve(C, rhs)

    lam_m = A - B @ np.ascontiguousarray(sol[:, :nk])
    lam_m = 0.5 * (lam_m + lam_m.T)
    zeta_m = np.empty(nk)
    for i in range(nk):
        s = zeta[keep[i]]
        for j in range(ne):
            s -= B[i, j] * sol[j, nk]
        zeta_m[i] = s
    return zeta_m, lam_m, cond


@njit(cache=True)
def deflation_min_eig(lam_sp, lam_de, floor):
    """Smallest eigenvalue of lam_sp^{-1/2} lam_de lam_sp^{-1/2}.

    lam_sp eigenvalues are floored at ``floor`` before inversion.
    """
    w, v = np.linalg.eigh(lam_sp)
    w = np.maximum(w, floor)
    b = (v / np.sqrt(w)) @ v.T
    q = b @ lam_de @ b
    q = 0.5 * (q + q.T)
    return np.linalg.eigh(q)[0][0]


@njit(cache=True)
def _ci_cost(omega, lam_a, lam_b, use_logdet):
    m = omega * lam_a + (1.0 - omega) * lam_b
    if use_logdet:
        sign, logdet = np.linalg.slogdet(m)
        if sign <= 0:
            return np.inf
        return -logdet
    return np.trace(np.linalg.inv(m))


@njit(cache=True)
def golden_omega(lam_a, lam_b, lo, hi, use_logdet):
    """Golden-section minimizer of the fused-covariance cost over omega.

    Cost is trace (use_logdet=False) or log-determinant (True) of
    [omega*lam_a + (1-omega)*lam_b]^{-1}.  Tolerance 1e-6; a flat objective
    ties to 0.5.
    """
    invphi = 0.6180339887498949
    a = lo
    b = hi
    c = b - (b - a) * invphi
    d = a + (b - a) * invphi
    fc = _ci_cost(c, lam_a, lam_b, use_logdet)
    fd = _ci_cost(d, lam_a, lam_b, use_logdet)
    while b - a > 1e-6:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - (b - a) * invphi
            fc = _ci_cost(c, lam_a, lam_b, use_logdet)
        else:
            a, c, fc = c, d, fd
            d = a + (b - a) * invphi
            fd = _ci_cost(d, lam_a, lam_b, use_logdet)
    omega = 0.5 * (a + b)
    fbest = _ci_cost(omega, lam_a, lam_b, use_logdet)
    if lo <= 0.5 <= hi:
        fhalf = _ci_cost(0.5, lam_a, lam_b, use_logdet)
        if fhalf <= fbest + 1e-12 * (1.0 + np.abs(fbest)):
            return 0.5
    return omega


def warmup():
    """Trigger JIT compilation of all kernels (no-op on the numpy path)."""
    z = np.array([1.0, 1.0, 0.5])
    m = np.eye(3) + 0.1
    i0 = np.array([0], dtype=np.int64)
    i12 = np.array([1, 2], dtype=np.int64)
    schur_marginal(z, m, i0, i12)
    deflation_min_eig(np.eye(2), 2.0 * np.eye(2), 1e-12)
    golden_omega(np.eye(2), 2.0 * np.eye(2), 0.0, 1.0, False)
    golden_omega(np.eye(2), 2.0 * np.eye(2), 0.0, 1.0, True)
