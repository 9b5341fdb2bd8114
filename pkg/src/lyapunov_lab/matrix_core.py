"""Dense small-matrix kernels.

Gram-Schmidt (exact and first-order approximant), singular values via
one-sided Jacobi, the column-separation quantity ``theta`` and a few norms.
All routines are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

DEGENERATE_NORM = _kernels.TINY_NORM
JACOBI_MAX_SWEEPS = 100


class DegenerateColumnError(ArithmeticError):
    """A Gram-Schmidt column norm fell below the division guard."""

    def __init__(self, column: int, norm: float):
        super().__init__(f"Gram-Schmidt column {column} has norm {norm:.3g} < {DEGENERATE_NORM:g}")
        self.column = column
        self.norm = norm


class SingularMatrixError(ArithmeticError):
    pass


@dataclass(frozen=True)
class OrthogonalizationResult:
    """Gram-Schmidt output for a square matrix.

    ``perp_columns[k]`` is the component of column ``k`` orthogonal to the
    columns before it, ``perp_norms[k]`` its Euclidean norm.
    """

    perp_columns: np.ndarray  # (d, d); row k is c_k^perp
    perp_norms: np.ndarray

    @property
    def log_norms(self) -> np.ndarray:
        return np.log(self.perp_norms)


@dataclass(frozen=True)
class SingularSpectrum:
    values: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.values) > 0) or np.any(self.values < 0):
            raise ValueError("singular values must be non-negative and non-increasing")

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def partial_products(self) -> np.ndarray:
        """s_1, s_1 s_2, ..., s_1 ... s_d."""
        return np.cumprod(self.values)


def as_matrix(a) -> np.ndarray:
    """Validate and return ``a`` as a finite square float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def _as_stack(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != a.shape[2] or a.shape[1] < 1:
        raise ValueError(f"expected a stack of square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix stack has non-finite entries")
    return np.ascontiguousarray(a)


def gram_schmidt(a) -> OrthogonalizationResult:
    """Orthogonalise the columns of ``a`` with modified Gram-Schmidt.

    Raises
    ------
    DegenerateColumnError
        If some ``||c_k^perp||`` is below ``DEGENERATE_NORM``; whether to
        resample is up to the caller.
    """
    a = np.ascontiguousarray(as_matrix(a))
    d = a.shape[0]
    perp = np.empty((d, d))
    norms = np.empty(d)
    bad = _kernels.mgs(a, perp, norms)
    if bad >= 0:
        raise DegenerateColumnError(int(bad), float(norms[bad]))
    return OrthogonalizationResult(perp_columns=perp.T.copy(), perp_norms=norms)


def gram_schmidt_norms(stack) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``||c_k^perp||`` for a (n, d, d) stack.

    Returns ``(norms, degenerate)`` where ``degenerate[s]`` flags samples that
    tripped the division guard (their norms are not meaningful).
    """
    stack = _as_stack(stack)
    perp = np.empty_like(stack)
    norms = np.empty(stack.shape[:2])
    bad = _kernels.mgs_batch(stack, perp, norms)
    return norms, bad >= 0


def approx_orthogonalize(a) -> np.ndarray:
    """First-order Gram-Schmidt surrogate.

    ``c_k' = c_k - sum_{j<k} <c_j, c_k> c_j`` on the raw (unnormalised)
    columns.  Returned as a (d, d) array whose row ``k`` is ``c_k'``.
    """
    a = as_matrix(a)
    cols = a.T
    out = cols.copy()
    for k in range(1, a.shape[0]):
        for j in range(k):
            out[k] -= (cols[j] @ cols[k]) * cols[j]
    return out


def near_identity_log_norms(perturbation, approx: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """log-norms of the Gram-Schmidt columns of ``I + E`` for a stack of E.

    Works on deviations from the identity, so the result is accurate to a
    few ulps of the log itself even when ``E`` is ~1e-4 and the logs are
    ~1e-4 with differences near 1e-16.  With ``approx=True`` the approximant
    columns ``c_k'`` are used instead.

    Returns ``(log_norms, degenerate)``.
    """
    e = _as_stack(perturbation)
    out = np.empty(e.shape[:2])
    bad = _kernels.near_identity_lognorms(e, not approx, out)
    return out, bad


def log_singular_values(a, log_scales=None) -> np.ndarray:
    """Non-increasing log singular values of ``a @ diag(exp(log_scales))``.

    The column scaling is never materialised, so ``log_scales`` may spread
    over far more than the float64 exponent range.  Zero singular values come
    back as ``-inf``.
    """
    a = as_matrix(a)
    d = a.shape[0]
    ell = np.zeros(d) if log_scales is None else np.array(log_scales, dtype=np.float64)
    if ell.shape != (d,):
        raise ValueError("log_scales must have one entry per column")
    v = a.copy()
    _kernels.log_svd(v, ell, d * np.finfo(float).eps, JACOBI_MAX_SWEEPS)
    return np.sort(ell)[::-1]


def log_singular_values_batch(stack) -> np.ndarray:
    """Row-wise non-increasing log singular values for a (n, d, d) stack."""
    v = _as_stack(stack).copy()
    ell = np.zeros(v.shape[:2])
    _kernels.log_svd_batch(v, ell, v.shape[1] * np.finfo(float).eps, JACOBI_MAX_SWEEPS)
    return -np.sort(-ell, axis=1)


def singular_values(a) -> SingularSpectrum:
    return SingularSpectrum(np.exp(log_singular_values(a)))


def theta(a) -> float:
    """Smallest distance from a column of ``a`` to the span of the other columns.

    Uses the least-squares residual, so rank-deficient input is fine and
    returns 0 when the columns are linearly dependent.
    """
    a = as_matrix(a)
    d = a.shape[0]
    if d == 1:
        return float(abs(a[0, 0]))
    scale = np.abs(a).max()
    if scale == 0.0:
        return 0.0
    best = np.inf
    for j in range(d):
        others = np.delete(a, j, axis=1)
        coef, *_ = np.linalg.lstsq(others, a[:, j], rcond=None)
        best = min(best, float(np.linalg.norm(a[:, j] - others @ coef)))
    if best <= 4 * d * np.finfo(float).eps * scale:
        return 0.0
    return best


def theta_batch(stack) -> np.ndarray:
    """``theta`` for a stack of nonsingular matrices via rows of the inverse.

    For invertible B, the distance from column j to the span of the rest is
    ``1 / ||row_j(B^{-1})||``.  Singular samples give 0.
    """
    stack = _as_stack(stack)
    out = np.zeros(stack.shape[0])
    try:
        inv = np.linalg.inv(stack)
        out = 1.0 / np.linalg.norm(inv, axis=2).max(axis=1)
    except np.linalg.LinAlgError:
        for s, b in enumerate(stack):
            out[s] = theta(b)
    return out


def op_norm(a) -> float:
    return float(np.exp(log_singular_values(a)[0]))


def det_abs(a) -> float:
    return float(abs(np.linalg.det(as_matrix(a))))


def inverse_norm_bound(a) -> float:
    """``sqrt(d) / theta(a)``, an upper bound on ``||a^{-1}||``."""
    a = as_matrix(a)
    th = theta(a)
    if th == 0.0:
        raise SingularMatrixError("theta(A) = 0: matrix is singular")
    return float(np.sqrt(a.shape[0]) / th)


def qr_positive(a) -> tuple[np.ndarray, np.ndarray]:
    """QR factorisation normalised so that R has a non-negative diagonal.

    Accepts a single matrix or a stack.
    """
    q, r = np.linalg.qr(np.asarray(a, dtype=np.float64))
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1)).copy()
    signs[signs == 0] = 1.0
    return q * signs[..., None, :], r * signs[..., :, None]
