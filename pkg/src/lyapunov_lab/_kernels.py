"""Compiled inner loops shared by the public matrix and estimator routines.

Everything here works on plain float64 arrays and never allocates random
numbers; callers draw noise up front so that results depend only on the
stream, not on how the loops are scheduled.
"""

import math

import numpy as np
from numba import njit

# Division guard for Gram-Schmidt; see matrix_core.DEGENERATE_NORM.
TINY_NORM = 1e-300


@njit(cache=True)
def mgs(a, perp, norms):
    """Modified Gram-Schmidt on the columns of ``a``.

    Writes the unnormalised orthogonal columns into ``perp`` and their norms
    into ``norms``.  Returns the index of the first degenerate column, or -1.
    """
    d = a.shape[0]
    q = np.empty((d, d))
    for k in range(d):
        for i in range(d):
            perp[i, k] = a[i, k]
        for j in range(k):
            dot = 0.0
            for i in range(d):
                dot += q[i, j] * perp[i, k]
            for i in range(d):
                perp[i, k] -= dot * q[i, j]
        s = 0.0
        for i in range(d):
            s += perp[i, k] * perp[i, k]
        nrm = math.sqrt(s)
        norms[k] = nrm
        if not nrm >= TINY_NORM:
            return k
        for i in range(d):
            q[i, k] = perp[i, k] / nrm
    return -1


@njit(cache=True)
def mgs_batch(a, perp, norms):
    bad = np.empty(a.shape[0], dtype=np.int64)
    for s in range(a.shape[0]):
        bad[s] = mgs(a[s], perp[s], norms[s])
    return bad


@njit(cache=True)
def _log_norm_near_unit(u, k):
    # log ||e_k + u|| without forming 1 + small
    d = u.shape[0]
    s = 0.0
    for i in range(d):
        s += u[i] * u[i]
    t = 2.0 * u[k] + s
    if t > -0.5:
        return 0.5 * math.log1p(t)
    s = 0.0
    for i in range(d):
        x = u[i] + (1.0 if i == k else 0.0)
        s += x * x
    if s <= 0.0:
        return -np.inf
    return 0.5 * math.log(s)


@njit(cache=True)
def near_identity_lognorms(e, exact, out):
    """log ||c_k^perp(I + E)|| (``exact``) or log ||c_k'(I + E)|| for a stack of E.

    Columns are carried as deviations ``u_k = c_k - e_k`` so the log-norms keep
    full relative accuracy when E is tiny.  Returns a per-sample flag that is
    True when some exact Gram-Schmidt norm fell below the division guard.
    """
    n, d, _ = e.shape
    bad = np.zeros(n, dtype=np.bool_)
    u = np.empty((d, d))  # u[:, k] = c_k^perp - e_k (or c_k' - e_k)
    sq = np.empty(d)  # ||c_k^perp||^2
    for s in range(n):
        x = e[s]
        for k in range(d):
            for i in range(d):
                u[i, k] = x[i, k]
            for j in range(k):
                if exact:
                    # <c_j^perp, c_k> with c_j^perp = e_j + u_j, c_k = e_k + x_k
                    dot = u[k, j] + x[j, k]
                    for i in range(d):
                        dot += u[i, j] * x[i, k]
                    coef = dot / sq[j]
                    for i in range(d):
                        u[i, k] -= coef * u[i, j]
                    u[j, k] -= coef
                else:
                    # <c_j, c_k> on the raw columns
                    dot = x[k, j] + x[j, k]
                    for i in range(d):
                        dot += x[i, j] * x[i, k]
                    for i in range(d):
                        u[i, k] -= dot * x[i, j]
                    u[j, k] -= dot
            val = _log_norm_near_unit(u[:, k], k)
            out[s, k] = val
            if exact:
                sq[k] = math.exp(2.0 * val)
                if not sq[k] >= TINY_NORM * TINY_NORM:
                    bad[s] = True
                    sq[k] = 1.0
    return bad


@njit(cache=True)
def log_svd(v, ell, tol, max_sweeps):
    """One-sided (Hestenes) Jacobi on the matrix with columns exp(ell[j]) * v[:, j].

    ``v`` and ``ell`` are overwritten: on return the columns of ``v`` are
    orthonormal (or zero) and ``ell`` holds the log singular values, unsorted.
    Scales are only ever compared through exp(ell_j - ell_i) <= 1, so column
    weights spanning thousands of nats are handled without overflow.
    Returns the number of sweeps used.
    """
    d = v.shape[0]
    for j in range(d):
        s = 0.0
        for i in range(d):
            s += v[i, j] * v[i, j]
        if s > 0.0:
            nrm = math.sqrt(s)
            ell[j] += math.log(nrm)
            for i in range(d):
                v[i, j] /= nrm
        else:
            ell[j] = -np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        for p in range(d - 1):
            for q in range(p + 1, d):
                if ell[p] == -np.inf or ell[q] == -np.inf:
                    continue
                rho = 0.0
                for i in range(d):
                    rho += v[i, p] * v[i, q]
                if abs(rho) <= tol:
                    continue
                rotated = True
                # a is the heavier column, b the lighter one
                if ell[p] >= ell[q]:
                    a, b = p, q
                else:
                    a, b = q, p
                r = math.exp(ell[b] - ell[a])
                w = (r * r - 1.0) / (2.0 * rho)
                sgn = 1.0 if w >= 0.0 else -1.0
                tau = sgn / (abs(w) + math.sqrt(r * r + w * w))
                t = tau * r
                c = 1.0 / math.sqrt(1.0 + t * t)
                ctr2 = c * tau * r * r
                ct = c * tau
                sa = 0.0
                sb = 0.0
                for i in range(d):
                    va = v[i, a]
                    vb = v[i, b]
                    na = c * va - ctr2 * vb
                    nb = ct * va + c * vb
                    v[i, a] = na
                    v[i, b] = nb
                    sa += na * na
                    sb += nb * nb
                for col, s in ((a, sa), (b, sb)):
                    if s > 0.0:
                        nrm = math.sqrt(s)
                        ell[col] += math.log(nrm)
                        for i in range(d):
                            v[i, col] /= nrm
                    else:
                        ell[col] = -np.inf
        if not rotated:
            break
    return sweeps


@njit(cache=True)
def log_svd_batch(v, ell, tol, max_sweeps):
    for s in range(v.shape[0]):
        log_svd(v[s], ell[s], tol, max_sweeps)


@njit(cache=True)
def sigma_steps(log_diag, noise, eps, tol, max_sweeps, increments):
    """Advance a Sigma-chain through ``noise.shape[0]`` steps.

    ``log_diag`` (sorted, non-increasing) is updated in place and the per-step
    change of each log singular value is written to ``increments``.
    """
    d = log_diag.shape[0]
    v = np.empty((d, d))
    ell = np.empty(d)
    for n in range(noise.shape[0]):
        for i in range(d):
            for j in range(d):
                v[i, j] = eps * noise[n, i, j]
            v[i, i] += 1.0
        for j in range(d):
            ell[j] = log_diag[j]
        log_svd(v, ell, tol, max_sweeps)
        ell_sorted = np.sort(ell)[::-1]
        for j in range(d):
            increments[n, j] = ell_sorted[j] - log_diag[j]
            log_diag[j] = ell_sorted[j]


@njit(cache=True)
def raw_diagonal_steps(log_diag, noise, eps, increments):
    """Negative-control chain: keep the raw diagonal of (I + eps N) Sigma."""
    d = log_diag.shape[0]
    for n in range(noise.shape[0]):
        for j in range(d):
            step = math.log(abs(1.0 + eps * noise[n, j, j]))
            increments[n, j] = step
            log_diag[j] += step


@njit(cache=True)
def propagate_frame(frame, bases, noise, eps, period, phase, logs, collapse_tol):
    """Push an orthonormal frame through A_n = O_n + eps N_n.

    ``bases`` is either a stack matching ``noise`` or a single (1, d, d) slice
    broadcast over all steps.  Every ``period`` steps (counted by ``phase``
    across calls) the frame is re-orthonormalised and the log column norms
    are written to the next row of ``logs``.  Returns (rows written, new phase,
    collapse flag).
    """
    d = frame.shape[0]
    shared = bases.shape[0] == 1
    tmp = np.empty((d, d))
    perp = np.empty((d, d))
    norms = np.empty(d)
    rows = 0
    for n in range(noise.shape[0]):
        b = bases[0] if shared else bases[n]
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for m in range(d):
                    acc += (b[i, m] + eps * noise[n, i, m]) * frame[m, j]
                tmp[i, j] = acc
        for i in range(d):
            for j in range(d):
                frame[i, j] = tmp[i, j]
        phase += 1
        if phase == period:
            phase = 0
            bad = mgs(frame, perp, norms)
            if bad >= 0:
                return rows, phase, True
            for k in range(d):
                if norms[k] < collapse_tol or norms[k] == np.inf:
                    return rows, phase, True
                logs[rows, k] = math.log(norms[k])
                for i in range(d):
                    frame[i, k] = perp[i, k] / norms[k]
            rows += 1
    return rows, phase, False
