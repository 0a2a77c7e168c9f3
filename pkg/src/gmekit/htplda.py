"""Heavy-tailed PLDA as a GME extractor.

Generative model, per speaker ``z ~ N(0, I)`` and per recording::

    r = F z + eta + mean,    eta ~ T(0, W, nu)

Viewed as a function of ``z``, the t-likelihood of ``r`` is again a
t-distribution with ``nu + D - d`` degrees of freedom; its Gaussian
approximation gives the meta-embedding ``a = b F'W r``, ``B = b Bbar`` with a
data-dependent scale ``b = (nu + D - d) / (nu + r'Gr)``.

``nu = inf`` (the Gaussian flag) turns the model into Gaussian PLDA: ``b`` is
pinned to exactly 1 rather than computed from a large float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as la
from scipy.special import gammaln

from .data import LabeledDataset
from .gme import GaussianMetaEmbedding, SharedPrecisionBasis, ScaledPrecision

GAUSSIAN = math.inf


@dataclass(frozen=True, eq=False)
class HtPldaModel:
    F: np.ndarray
    W: np.ndarray
    nu: float
    mean: np.ndarray | None = None

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        W = np.asarray(self.W, dtype=float)
        D, d = F.shape
        if W.shape != (D, D):
            raise ValueError(f"W must be {D}x{D}, got {W.shape}")
        if not d < D:
            raise ValueError(f"need d < D, got d={d}, D={D}")
        nu = float(self.nu)
        if not nu > 0:
            raise ValueError(f"nu must be positive, got {nu}")
        mean = np.zeros(D) if self.mean is None else np.asarray(self.mean, dtype=float)
        if mean.shape != (D,):
            raise ValueError(f"mean must have length {D}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "W", 0.5 * (W + W.T))
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "mean", mean)

    @property
    def D(self) -> int:
        return self.F.shape[0]

    @property
    def d(self) -> int:
        return self.F.shape[1]

    @property
    def gaussian(self) -> bool:
        return math.isinf(self.nu)

    @cached_property
    def derived(self) -> "HtPldaDerived":
        return derive(self)

    def with_nu(self, nu: float) -> "HtPldaModel":
        return HtPldaModel(self.F, self.W, nu, self.mean)


@dataclass(frozen=True, eq=False)
class HtPldaDerived:
    Bbar: np.ndarray
    G: np.ndarray
    FtW: np.ndarray
    basis: SharedPrecisionBasis


def derive(model: HtPldaModel) -> HtPldaDerived:
    """Precompute ``Bbar = F'WF``, ``G = W - WF Bbar^{-1} F'W`` and the eigenanalysis."""
    F, W = model.F, model.W
    FtW = F.T @ W
    Bbar = FtW @ F
    Bbar = 0.5 * (Bbar + Bbar.T)
    try:
        cho = la.cho_factor(Bbar, lower=True)
    except la.LinAlgError as exc:
        raise np.linalg.LinAlgError("F'WF is singular") from exc
    G = W - FtW.T @ la.cho_solve(cho, FtW)
    G = 0.5 * (G + G.T)
    return HtPldaDerived(Bbar, G, FtW, SharedPrecisionBasis.from_matrix(Bbar))


def _derived(model, derived):
    return model.derived if derived is None else derived


def ancillary_stat(model: HtPldaModel, derived: HtPldaDerived | None, r) -> float:
    """``r'Gr`` for a centered vector; blind to the speaker component of ``r``."""
    G = _derived(model, derived).G
    r = np.asarray(r, dtype=float)
    return max(float(r @ G @ r), 0.0)


def precision_scale(model: HtPldaModel, derived: HtPldaDerived | None, r) -> float:
    if model.gaussian:
        return 1.0
    q = ancillary_stat(model, derived, r)
    return (model.nu + model.D - model.d) / (model.nu + q)


def precision_scales(model, derived, R) -> np.ndarray:
    """Vectorized :func:`precision_scale` over the rows of centered ``R``."""
    R = np.atleast_2d(R)
    if model.gaussian:
        return np.ones(R.shape[0])
    G = _derived(model, derived).G
    q = np.maximum(np.einsum("ij,jk,ik->i", R, G, R), 0.0)
    return (model.nu + model.D - model.d) / (model.nu + q)


def extract(
    model: HtPldaModel, derived: HtPldaDerived | None, r, centered: bool = False
) -> GaussianMetaEmbedding:
    """Extract the (scaled) GME of one recording vector.

    ``r`` is centered with ``model.mean`` unless ``centered`` is set.
    """
    dv = _derived(model, derived)
    r = np.asarray(r, dtype=float)
    if r.shape != (model.D,):
        raise ValueError(f"expected a vector of length {model.D}, got shape {r.shape}")
    if not centered:
        r = r - model.mean
    b = precision_scale(model, dv, r)
    return GaussianMetaEmbedding(b * (dv.FtW @ r), ScaledPrecision(b, dv.basis))


def extract_many(model: HtPldaModel, derived, R, centered: bool = False):
    """Batch extraction. Returns ``(A, b)`` with rows ``a_j`` and scales ``b_j``."""
    dv = _derived(model, derived)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[1] != model.D:
        raise ValueError(f"expected vectors of length {model.D}, got {R.shape[1]}")
    if not centered:
        R = R - model.mean
    b = precision_scales(model, dv, R)
    return b[:, None] * (R @ dv.FtW.T), b


def as_gmes(model, derived, A, b) -> list:
    basis = _derived(model, derived).basis
    return [GaussianMetaEmbedding(a, ScaledPrecision(float(s), basis)) for a, s in zip(A, b)]


def exact_t_loglik(model: HtPldaModel, r, z) -> float:
    """Normalized log-density ``log T(r | mean + F z, W, nu)``.

    The additive constant is irrelevant for scoring; it is kept so the value
    is a proper log-density of ``r``. With the Gaussian flag this is
    ``log N(r | mean + F z, W^{-1})``.
    """
    D = model.D
    delta = np.asarray(r, dtype=float) - model.mean - model.F @ np.asarray(z, dtype=float)
    q = float(delta @ model.W @ delta)
    sign, logdetW = np.linalg.slogdet(model.W)
    if sign <= 0:
        logdetW = -np.inf
    if model.gaussian:
        return 0.5 * logdetW - 0.5 * D * math.log(2 * math.pi) - 0.5 * q
    nu = model.nu
    return (
        gammaln(0.5 * (nu + D))
        - gammaln(0.5 * nu)
        - 0.5 * D * math.log(nu * math.pi)
        + 0.5 * logdetW
        - 0.5 * (nu + D) * math.log1p(q / nu)
    )


def random_model(
    D: int,
    d: int,
    nu: float,
    seed=None,
    bbar_eigvals: Sequence[float] | None = None,
    w_range=(0.5, 2.0),
) -> HtPldaModel:
    """A random model whose ``F'WF`` has a prescribed spectrum.

    ``W`` gets a random eigenbasis with eigenvalues uniform in ``w_range``;
    ``F`` is chosen so that ``F'WF = diag(bbar_eigvals)`` (default: evenly
    spaced from 2.0 down to 0.5).
    """
    rng = np.random.default_rng(seed)
    if bbar_eigvals is None:
        bbar_eigvals = np.linspace(2.0, 0.5, d)
    lam = np.asarray(bbar_eigvals, dtype=float)
    if lam.shape != (d,):
        raise ValueError(f"need {d} eigenvalues for Bbar")
    Q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    W = (Q * rng.uniform(*w_range, size=D)) @ Q.T
    W = 0.5 * (W + W.T)
    C = la.cholesky(W, lower=True)
    U, _ = np.linalg.qr(rng.standard_normal((D, d)))
    F = la.solve_triangular(C.T, U * np.sqrt(lam), lower=False)
    return HtPldaModel(F, W, nu)


def sample(
    model: HtPldaModel,
    n_speakers: int,
    utts_per_speaker,
    seed=None,
    prefix: str = "spk",
) -> LabeledDataset:
    """Draw a labeled dataset from the generative model.

    Per speaker ``z ~ N(0, I)``; per utterance ``u ~ Gamma(nu/2, rate nu/2)``
    and ``eta | u ~ N(0, (uW)^{-1})``. Deterministic given ``seed``.
    """
    rng = np.random.default_rng(seed)
    if np.isscalar(utts_per_speaker):
        counts = np.full(n_speakers, int(utts_per_speaker))
    else:
        counts = np.asarray(utts_per_speaker, dtype=int)
        if counts.shape != (n_speakers,):
            raise ValueError("need one utterance count per speaker")
    if np.any(counts < 1):
        raise ValueError("every speaker needs at least one utterance")
    n = int(counts.sum())
    D, d = model.D, model.d

    Z = rng.standard_normal((n_speakers, d))
    if model.gaussian:
        u = np.ones(n)
    else:
        u = rng.gamma(shape=0.5 * model.nu, scale=2.0 / model.nu, size=n)
    E = rng.standard_normal((n, D))
    C = la.cholesky(model.W, lower=True)
    eta = la.solve_triangular(C.T, E.T, lower=False).T / np.sqrt(u)[:, None]

    spk_index = np.repeat(np.arange(n_speakers), counts)
    R = Z[spk_index] @ model.F.T + eta + model.mean

    width = max(5, len(str(n_speakers - 1)))
    uwidth = max(3, len(str(int(counts.max()) - 1)))
    speaker_ids, utt_ids = [], []
    for i, c in enumerate(counts):
        spk = f"{prefix}{i:0{width}d}"
        for j in range(c):
            speaker_ids.append(spk)
            utt_ids.append(f"{spk}-{j:0{uwidth}d}")
    return LabeledDataset(R, tuple(utt_ids), tuple(speaker_ids))
