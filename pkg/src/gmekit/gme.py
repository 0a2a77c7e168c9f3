"""Gaussian meta-embeddings: pooling, expectations and likelihood ratios.

A GME is the un-normalized Gaussian likelihood ``f(z) = exp(a'z - z'Bz/2)``
of a hidden identity variable ``z`` with standard normal prior. It is stored
by its natural parameters only; any multiplicative constant cancels in every
likelihood ratio, so none is kept.

Precisions come in two flavours. ``DensePrecision`` holds an explicit matrix
and is handled with Cholesky factorizations. ``ScaledPrecision`` holds a
scalar multiple ``b * Bbar`` of a matrix shared by many embeddings; with a
precomputed eigenanalysis of ``Bbar`` every expectation is O(d).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import logging

import numpy as np
import scipy.linalg as la

logger = logging.getLogger(__name__)


class IllConditionedError(np.linalg.LinAlgError):
    """Raised when ``B + I`` cannot be Cholesky factorized."""


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SharedPrecisionBasis:
    """A PSD matrix together with its eigenanalysis ``Bbar = V diag(lam) V'``."""

    Bbar: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @classmethod
    def from_matrix(cls, Bbar, clamp_tol=1e-10) -> "SharedPrecisionBasis":
        Bbar = np.asarray(Bbar, dtype=float)
        if Bbar.ndim != 2 or Bbar.shape[0] != Bbar.shape[1]:
            raise ValueError(f"Bbar must be square, got shape {Bbar.shape}")
        Bbar = 0.5 * (Bbar + Bbar.T)
        lam, V = la.eigh(Bbar)
        scale = max(float(np.max(np.abs(lam), initial=0.0)), 1.0)
        if lam.size and lam.min() < -clamp_tol * scale:
            logger.warning(
                "clamping negative eigenvalue %.3g of shared precision", lam.min()
            )
        lam = np.maximum(lam, 0.0)
        return cls(Bbar, lam, V)

    @property
    def dim(self) -> int:
        return self.Bbar.shape[0]


@dataclass(frozen=True, eq=False)
class DensePrecision:
    M: np.ndarray

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def matrix(self) -> np.ndarray:
        return self.M


@dataclass(frozen=True, eq=False)
class ScaledPrecision:
    b: float
    basis: SharedPrecisionBasis

    def __post_init__(self):
        if not self.b >= 0:
            raise ValueError(f"precision scale must be nonnegative, got {self.b}")

    @property
    def dim(self) -> int:
        return self.basis.dim

    def matrix(self) -> np.ndarray:
        return self.b * self.basis.Bbar


PrecisionRep = Union[DensePrecision, ScaledPrecision]


@dataclass(frozen=True, eq=False)
class GaussianMetaEmbedding:
    """Natural parameters ``(a, B)`` of a Gaussian meta-embedding."""

    a: np.ndarray
    precision: PrecisionRep

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 1:
            raise ValueError("a must be a vector")
        if a.shape[0] != self.precision.dim:
            raise ValueError(
                f"dimension mismatch: a has {a.shape[0]}, "
                f"precision has {self.precision.dim}"
            )
        object.__setattr__(self, "a", a)

    @classmethod
    def dense(cls, a, B) -> "GaussianMetaEmbedding":
        B = np.asarray(B, dtype=float)
        return cls(a, DensePrecision(B))

    @classmethod
    def scaled(cls, a, b, basis: SharedPrecisionBasis) -> "GaussianMetaEmbedding":
        return cls(a, ScaledPrecision(float(b), basis))

    @classmethod
    def unit(cls, d: int) -> "GaussianMetaEmbedding":
        """The constant function 1, identity element of pooling."""
        return cls(np.zeros(d), DensePrecision(np.zeros((d, d))))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def B(self) -> np.ndarray:
        return self.precision.matrix()

    @property
    def is_scaled(self) -> bool:
        return isinstance(self.precision, ScaledPrecision)

    def densify(self) -> "GaussianMetaEmbedding":
        return GaussianMetaEmbedding(self.a, DensePrecision(self.B))


def pool(gmes: Sequence[GaussianMetaEmbedding]) -> GaussianMetaEmbedding:
    """Product of meta-embeddings, i.e. the sum of their natural parameters.

    Scaled embeddings sharing one basis pool to a Scaled embedding. Scaled
    embeddings on different bases must be densified by the caller first.
    """
    gmes = list(gmes)
    if not gmes:
        raise ValueError("cannot pool an empty list")
    d = gmes[0].dim
    for g in gmes[1:]:
        if g.dim != d:
            raise ValueError(f"dimension mismatch in pool: {g.dim} != {d}")
    if len(gmes) == 1:
        return gmes[0]

    a = np.sum([g.a for g in gmes], axis=0)
    if all(g.is_scaled for g in gmes):
        basis = gmes[0].precision.basis
        if any(g.precision.basis is not basis for g in gmes[1:]):
            raise ValueError(
                "cannot pool scaled embeddings over different bases; densify first"
            )
        return GaussianMetaEmbedding(
            a, ScaledPrecision(sum(g.precision.b for g in gmes), basis)
        )
    if any(g.is_scaled for g in gmes):
        raise ValueError("cannot pool mixed dense/scaled embeddings; densify first")
    B = np.sum([g.precision.M for g in gmes], axis=0)
    return GaussianMetaEmbedding(a, DensePrecision(B))


def _log_expectation_dense(a, B):
    d = a.shape[0]
    try:
        L = la.cholesky(B + np.eye(d), lower=True)
    except la.LinAlgError as exc:
        raise IllConditionedError("B + I is not positive definite") from exc
    y = la.solve_triangular(L, a, lower=True)
    return 0.5 * float(y @ y) - float(np.sum(np.log(np.diag(L))))


def _log_expectation_scaled(a, b, basis):
    at = basis.eigvecs.T @ a
    s = b * basis.eigvals + 1.0
    return 0.5 * float(np.sum(at * at / s)) - 0.5 * float(np.sum(np.log(s)))


def log_expectation(f: GaussianMetaEmbedding) -> float:
    """``log <f>`` under the standard normal prior.

    ``0.5 a'(B+I)^{-1}a - 0.5 log|B+I|``; the scaled form uses the shared
    eigenanalysis instead of a Cholesky factorization.
    """
    if f.is_scaled:
        return _log_expectation_scaled(f.a, f.precision.b, f.precision.basis)
    return _log_expectation_dense(f.a, f.precision.M)


def log_inner_product(f: GaussianMetaEmbedding, g: GaussianMetaEmbedding) -> float:
    return log_expectation(pool([f, g]))


def llr_binary(f: GaussianMetaEmbedding, g: GaussianMetaEmbedding) -> float:
    """Log-likelihood ratio of same-speaker vs different-speaker for a pair."""
    return log_inner_product(f, g) - log_expectation(f) - log_expectation(g)


@dataclass(frozen=True)
class Partition:
    """A set partition of ``{0, ..., n-1}`` into disjoint subsets."""

    subsets: tuple = field(default_factory=tuple)

    def __post_init__(self):
        subsets = tuple(tuple(sorted(int(i) for i in s)) for s in self.subsets)
        seen = set()
        for s in subsets:
            if not s:
                raise PartitionError("empty subset in partition")
            for i in s:
                if i < 0:
                    raise PartitionError(f"negative index {i}")
                if i in seen:
                    raise PartitionError(f"index {i} appears in more than one subset")
                seen.add(i)
        n = len(seen)
        if seen != set(range(n)):
            raise PartitionError("partition does not cover 0..n-1")
        object.__setattr__(self, "subsets", subsets)

    @property
    def n(self) -> int:
        return sum(len(s) for s in self.subsets)

    @classmethod
    def of(cls, *subsets: Iterable[int]) -> "Partition":
        return cls(tuple(subsets))


def llr_partition(
    gmes: Sequence[GaussianMetaEmbedding], A: Partition, B: Partition
) -> float:
    """Log-likelihood ratio of partition hypothesis ``A`` against ``B``."""
    n = len(gmes)
    if A.n != n or B.n != n:
        raise PartitionError(
            f"partitions cover {A.n} and {B.n} items but {n} embeddings were given"
        )

    def side(P):
        return sum(log_expectation(pool([gmes[j] for j in s])) for s in P.subsets)

    return side(A) - side(B)
