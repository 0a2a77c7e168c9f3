"""Gaussian PLDA: EM training, closed-form pairwise scoring and GME initialization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .data import LabeledDataset
from .htplda import HtPldaModel

logger = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GPldaModel:
    mean: np.ndarray
    F: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        W = np.asarray(self.W, dtype=float)
        D, d = F.shape
        if W.shape != (D, D):
            raise ValueError(f"W must be {D}x{D}")
        if not d < D:
            raise ValueError(f"need d < D, got d={d}, D={D}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "W", 0.5 * (W + W.T))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(D))

    @property
    def D(self) -> int:
        return self.F.shape[0]

    @property
    def d(self) -> int:
        return self.F.shape[1]


@dataclass(frozen=True, eq=False)
class PldaScoreParams:
    """Coefficients of the quadratic PLDA score ``2 r1'L r2 + r1'G r1 + r2'G r2 + k``."""

    Gamma: np.ndarray
    Lambda: np.ndarray
    k: float
    c: np.ndarray


def length_normalize(r) -> np.ndarray:
    """Project a vector (or each row of a matrix) onto the unit sphere."""
    r = np.asarray(r, dtype=float)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot length-normalize a zero vector")
    return r / norm


def _speaker_stats(X, labels, n_spk):
    counts = np.bincount(labels, minlength=n_spk).astype(float)
    sums = np.zeros((n_spk, X.shape[1]))
    np.add.at(sums, labels, X)
    return counts, sums


def _posteriors(F, W, counts):
    """Posterior covariances ``(I + n Bbar)^{-1}`` for each distinct count."""
    Bbar = F.T @ W @ F
    Bbar = 0.5 * (Bbar + Bbar.T)
    d = Bbar.shape[0]
    covs = {}
    logdets = {}
    for n in np.unique(counts):
        P = np.eye(d) + n * Bbar
        L = la.cholesky(P, lower=True)
        Linv = la.solve_triangular(L, np.eye(d), lower=True)
        covs[n] = Linv.T @ Linv
        logdets[n] = 2.0 * np.sum(np.log(np.diag(L)))
    return covs, logdets


def log_likelihood(F, W, X, labels, n_spk) -> float:
    """Marginal log-likelihood of centered data under Gaussian PLDA.

    Per speaker with ``n`` vectors summing to ``s``, integrating out ``z``
    leaves ``sum_j log N(r_j | 0, W^{-1}) + log E(F'W s, n Bbar)``.
    """
    N, D = X.shape
    counts, sums = _speaker_stats(X, labels, n_spk)
    sign, logdetW = np.linalg.slogdet(W)
    if sign <= 0:
        return -math.inf
    ll = 0.5 * N * logdetW - 0.5 * N * D * math.log(2 * math.pi)
    ll -= 0.5 * float(np.einsum("ij,jk,ik->", X, W, X))
    covs, logdets = _posteriors(F, W, counts)
    A = sums @ W @ F
    for i in range(n_spk):
        a = A[i]
        ll += 0.5 * float(a @ covs[counts[i]] @ a) - 0.5 * logdets[counts[i]]
    return ll


def _init_params(X, labels, counts, sums, d, rng):
    n_spk = counts.shape[0]
    means = sums / counts[:, None]
    within = X - means[labels]
    Sw = within.T @ within / X.shape[0]
    U, s, _ = np.linalg.svd(means.T, full_matrices=False)
    if s.shape[0] >= d and s[d - 1] > 1e-10 * max(s[0], 1e-300):
        F = U[:, :d] * (s[:d] / math.sqrt(n_spk))
    else:
        logger.info("speaker-mean scatter has rank < %d; random F initialization", d)
        F = rng.standard_normal((X.shape[1], d)) * math.sqrt(np.trace(Sw) / X.shape[1])
    try:
        W = la.inv(Sw + 1e-6 * np.trace(Sw) / X.shape[1] * np.eye(X.shape[1]))
    except la.LinAlgError:
        W = np.eye(X.shape[1])
    return F, 0.5 * (W + W.T)


def em_train(
    data: LabeledDataset,
    d: int,
    n_iters: int = 20,
    seed=None,
    min_div: bool = False,
    callback=None,
):
    """Train Gaussian PLDA by EM.

    Data are centered internally; the mean is stored in the returned model.
    Returns ``(model, loglik)`` where ``loglik[k]`` is the marginal
    log-likelihood after ``k`` iterations (``loglik[0]`` at initialization).
    ``callback(iteration, loglik)`` is called after every iteration.
    """
    X0 = np.asarray(data.vectors, dtype=float)
    N, D = X0.shape
    if not 0 < d < D:
        raise ValueError(f"need 0 < d < D, got d={d}, D={D}")
    mean = X0.mean(axis=0)
    X = X0 - mean
    rank = np.linalg.matrix_rank(X) if N > 1 else int(np.any(X != 0))
    if rank < d:
        raise DegenerateDataError(
            f"centered data has rank {rank}, fewer than d={d} dimensions"
        )
    labels, speakers = data.speaker_labels()
    n_spk = len(speakers)
    counts, sums = _speaker_stats(X, labels, n_spk)
    rng = np.random.default_rng(seed)
    F, W = _init_params(X, labels, counts, sums, d, rng)
    S = X.T @ X

    history = [log_likelihood(F, W, X, labels, n_spk)]
    for it in range(1, n_iters + 1):
        # E-step: posterior of z per speaker
        covs, _ = _posteriors(F, W, counts)
        M = np.empty((n_spk, d))
        A = sums @ W @ F
        R = np.zeros((d, d))
        Ezz = np.zeros((d, d))
        for i in range(n_spk):
            C = covs[counts[i]]
            m = C @ A[i]
            M[i] = m
            zz = C + np.outer(m, m)
            R += counts[i] * zz
            Ezz += zz
        T = sums.T @ M

        # M-step
        F = la.solve(R, T.T, assume_a="pos").T
        Sigma = (S - F @ T.T) / N
        Sigma = 0.5 * (Sigma + Sigma.T)
        try:
            W = la.inv(Sigma)
        except la.LinAlgError as exc:
            raise np.linalg.LinAlgError("within-speaker covariance is singular") from exc
        W = 0.5 * (W + W.T)
        if min_div:
            F = F @ la.cholesky(Ezz / n_spk, lower=True)
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(W))):
            raise np.linalg.LinAlgError(f"non-finite parameters at EM iteration {it}")
        history.append(log_likelihood(F, W, X, labels, n_spk))
        logger.debug("EM iteration %d: loglik %.6f", it, history[-1])
        if callback is not None:
            callback(it, history[-1])
    return GPldaModel(mean, F, W), history


def score_params(model: GPldaModel) -> PldaScoreParams:
    F, W = model.F, model.W
    d = model.d
    FtW = F.T @ W
    Bbar = FtW @ F
    Bbar = 0.5 * (Bbar + Bbar.T)
    P1 = np.eye(d) + Bbar
    P2 = np.eye(d) + 2.0 * Bbar
    try:
        c1 = la.cho_factor(P1)
        c2 = la.cho_factor(P2)
    except la.LinAlgError as exc:
        raise np.linalg.LinAlgError("I + Bbar is singular") from exc
    K2 = la.cho_solve(c2, FtW)
    K1 = la.cho_solve(c1, FtW)
    Lambda = 0.5 * FtW.T @ K2
    Gamma = 0.5 * FtW.T @ (K2 - K1)
    logdet1 = 2.0 * np.sum(np.log(np.diag(c1[0])))
    logdet2 = 2.0 * np.sum(np.log(np.diag(c2[0])))
    return PldaScoreParams(
        Gamma=0.5 * (Gamma + Gamma.T),
        Lambda=0.5 * (Lambda + Lambda.T),
        k=float(-0.5 * logdet2 + logdet1),
        c=np.zeros(model.D),
    )


def plda_llr(params: PldaScoreParams, r1, r2) -> float:
    """Closed-form Gaussian PLDA log-likelihood ratio for centered vectors."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    return float(
        2.0 * (r1 @ params.Lambda @ r2)
        + r1 @ params.Gamma @ r1
        + r2 @ params.Gamma @ r2
        + (r1 + r2) @ params.c
        + params.k
    )


def plda_llr_matrix(params: PldaScoreParams, R1, R2) -> np.ndarray:
    """All-vs-all :func:`plda_llr` between rows of ``R1`` and ``R2``."""
    R1 = np.atleast_2d(R1)
    R2 = np.atleast_2d(R2)
    q1 = np.einsum("ij,jk,ik->i", R1, params.Gamma, R1) + R1 @ params.c
    q2 = np.einsum("ij,jk,ik->i", R2, params.Gamma, R2) + R2 @ params.c
    return 2.0 * (R1 @ params.Lambda @ R2.T) + q1[:, None] + q2[None, :] + params.k


def init_gme(model: GPldaModel, nu: float = 2.0) -> HtPldaModel:
    """Heavy-tailed extractor with the PLDA ``(mean, F, W)`` and a plugged-in ``nu``.

    ``nu = inf`` reproduces the PLDA scores exactly.
    """
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    return HtPldaModel(model.F.copy(), model.W.copy(), nu, model.mean.copy())
