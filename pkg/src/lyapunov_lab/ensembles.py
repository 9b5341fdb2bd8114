"""Random samplers and cocycle descriptions.

Every random draw in the package goes through an :class:`RngStream`, which is
a (master seed, stream key) pair.  Streams with different keys are
independent; the same key always reproduces the same numbers.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats

from .matrix_core import as_matrix, op_norm, qr_positive

ORTHOGONALITY_TOL = 1e-12
NORM_BOUND_SLACK = 1e-12


class NormBoundError(ValueError):
    """A base matrix exceeded the operator-norm bound of the cocycle spec."""


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(master_seed, stream_index, *substream)``.

    The underlying generator is created lazily and owned by whoever holds
    this object; hand a stream to exactly one worker at a time.  Use
    :meth:`child` to derive independent sub-streams.
    """

    master_seed: int
    stream_index: int = 0
    substream: tuple[int, ...] = ()
    _gen: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.stream_index < 0 or any(s < 0 for s in self.substream):
            raise ValueError("stream keys must be non-negative")

    @property
    def key(self) -> tuple[int, ...]:
        return (self.stream_index, *self.substream)

    @property
    def generator(self) -> np.random.Generator:
        if not self._gen:
            seq = np.random.SeedSequence(self.master_seed, spawn_key=self.key)
            self._gen.append(np.random.Generator(np.random.PCG64(seq)))
        return self._gen[0]

    def child(self, index: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_index, (*self.substream, int(index)))


def stable_stream_index(*parts) -> int:
    """63-bit stream index derived from ``repr`` of ``parts``.

    Independent of ``PYTHONHASHSEED`` and of the order in which cells are
    enumerated.
    """
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def sample_gaussian_matrix(d: int, rng: RngStream, size: Optional[int] = None) -> np.ndarray:
    """Matrix (or stack of ``size`` matrices) with i.i.d. standard normal entries."""
    if d < 1:
        raise ValueError("d must be >= 1")
    shape = (d, d) if size is None else (size, d, d)
    return rng.generator.standard_normal(shape)


def sample_haar_orthogonal(d: int, rng: RngStream, size: Optional[int] = None) -> np.ndarray:
    """Haar-distributed orthogonal matrix (or stack).

    QR of a Gaussian sample with the signs of R's diagonal moved into Q;
    without that correction the result is not Haar.
    """
    q, _ = qr_positive(sample_gaussian_matrix(d, rng, size))
    return q


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def bad_threshold(epsilon: float) -> float:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"bad-set threshold needs 0 < epsilon < 1, got {epsilon}")
    return abs(math.log(epsilon))


def is_bad(noise, epsilon: float) -> bool:
    """True when some entry of ``noise`` exceeds ``|log epsilon|`` in magnitude."""
    return bool(np.any(np.abs(np.asarray(noise)) > bad_threshold(epsilon)))


def bad_mask(noise_stack, epsilon: float) -> np.ndarray:
    t = bad_threshold(epsilon)
    return np.any(np.abs(noise_stack) > t, axis=(-2, -1))


def bad_probability(d: int, epsilon: float) -> float:
    """P(bad) for a d x d standard Gaussian matrix, from a 1-D tail quadrature.

    The single-entry tail ``P(|N| > |log eps|)`` is integrated numerically and
    combined over the d^2 independent entries.
    """
    t = bad_threshold(epsilon)
    tail, _ = integrate.quad(stats.norm.pdf, t, np.inf, epsabs=1e-14, epsrel=1e-12)
    p = 2.0 * tail
    return -math.expm1(d * d * math.log1p(-p))


class BaseKind(enum.Enum):
    IDENTITY = "identity"
    FIXED = "fixed"
    HAAR = "haar"
    USER = "user"


@dataclass(frozen=True)
class CocycleSpec:
    """Base sequence O_n (or B_n) plus noise level for A_n = O_n + eps N_n.

    Build instances with the ``identity``/``fixed``/``haar``/``user``
    constructors.  A ``USER`` base is either a constant ``matrix`` or a
    ``generator`` called as ``generator(numpy_generator)`` once per step
    (it may be a closure with state).
    ``enforce_norm_bound`` turns on the ``||B_n|| <= base_norm_bound``
    check required by the gap harness.
    """

    dim: int
    epsilon: float
    base: BaseKind = BaseKind.IDENTITY
    matrix: Optional[np.ndarray] = None
    generator: Optional[Callable[[np.random.Generator], np.ndarray]] = None
    base_norm_bound: float = 1.0
    enforce_norm_bound: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be finite and non-negative")
        if self.base is BaseKind.FIXED:
            m = as_matrix(self.matrix)
            if m.shape[0] != self.dim:
                raise ValueError("fixed base has the wrong dimension")
            if np.abs(m.T @ m - np.eye(self.dim)).max() > ORTHOGONALITY_TOL:
                raise ValueError("fixed base must be orthogonal (|Q^T Q - I|_max <= 1e-12)")
        if self.base is BaseKind.USER:
            if (self.generator is None) == (self.matrix is None):
                raise ValueError("user base needs exactly one of a generator or a constant matrix")
            if self.matrix is not None:
                _check_user_matrix(self, self.matrix)

    @classmethod
    def identity(cls, dim: int, epsilon: float) -> "CocycleSpec":
        return cls(dim, epsilon, BaseKind.IDENTITY)

    @classmethod
    def fixed(cls, q, epsilon: float) -> "CocycleSpec":
        q = as_matrix(q)
        return cls(q.shape[0], epsilon, BaseKind.FIXED, matrix=q)

    @classmethod
    def haar(cls, dim: int, epsilon: float) -> "CocycleSpec":
        return cls(dim, epsilon, BaseKind.HAAR)

    @classmethod
    def user(cls, dim, epsilon, generator, *, enforce_norm_bound=False, base_norm_bound=1.0):
        return cls(dim, epsilon, BaseKind.USER, generator=generator,
                   enforce_norm_bound=enforce_norm_bound, base_norm_bound=base_norm_bound)

    @classmethod
    def constant(cls, b, epsilon: float, *, enforce_norm_bound=False) -> "CocycleSpec":
        """User base that repeats the same (not necessarily orthogonal) matrix."""
        b = as_matrix(b)
        return cls(b.shape[0], epsilon, BaseKind.USER, matrix=b, enforce_norm_bound=enforce_norm_bound)

    def with_epsilon(self, epsilon: float) -> "CocycleSpec":
        return CocycleSpec(self.dim, epsilon, self.base, self.matrix, self.generator,
                           self.base_norm_bound, self.enforce_norm_bound)

    @property
    def is_orthogonal(self) -> bool:
        return self.base is not BaseKind.USER


def _check_user_matrix(spec: CocycleSpec, m) -> np.ndarray:
    m = as_matrix(m)
    if m.shape[0] != spec.dim:
        raise ValueError(f"user base produced a {m.shape} matrix, expected dim {spec.dim}")
    if spec.enforce_norm_bound and op_norm(m) > spec.base_norm_bound + NORM_BOUND_SLACK:
        raise NormBoundError(f"base matrix has operator norm {op_norm(m):.6g} > {spec.base_norm_bound:g}")
    return m


def next_base(spec: CocycleSpec, rng: RngStream) -> np.ndarray:
    """Next O_n (or B_n) of the cocycle."""
    if spec.base is BaseKind.IDENTITY:
        return np.eye(spec.dim)
    if spec.base is BaseKind.FIXED:
        return spec.matrix.copy()
    if spec.base is BaseKind.HAAR:
        return sample_haar_orthogonal(spec.dim, rng)
    if spec.generator is None:
        return spec.matrix.copy()
    return _check_user_matrix(spec, spec.generator(rng.generator))


def base_block(spec: CocycleSpec, rng: RngStream, count: int) -> np.ndarray:
    """``count`` consecutive base matrices.

    Constant bases come back as a single (1, d, d) slice meant to be
    broadcast; user generators are validated per call.
    """
    if spec.base is BaseKind.IDENTITY:
        return np.eye(spec.dim)[None]
    if spec.base is BaseKind.HAAR:
        return np.ascontiguousarray(sample_haar_orthogonal(spec.dim, rng, count))
    if spec.generator is None:
        return np.ascontiguousarray(spec.matrix[None])
    return np.stack([_check_user_matrix(spec, spec.generator(rng.generator)) for _ in range(count)])
