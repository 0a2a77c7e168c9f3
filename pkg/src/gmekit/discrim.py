"""Discriminative retraining of the GME extractor with pairwise binary cross-entropy.

Minibatches are two with-replacement draws of recordings scored all-vs-all.
The loss is a class-balanced BXE and its gradient with respect to the
extractor parameters is obtained by hand-written reverse-mode differentiation
through the extractor (``b``, ``a``, ``Bbar``, ``G``) and the pairwise LLR.

All pairwise quantities are evaluated in the eigenbasis of ``Bbar``. The
gradient with respect to ``Bbar`` is assembled there and rotated back, so no
eigenvector derivatives (and no eigengap assumptions) are needed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .data import LabeledDataset
from .htplda import HtPldaModel

logger = logging.getLogger(__name__)

_PAIR_BLOCK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class TrainConfig:
    batch_side: int = 5000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    max_epochs: int = 50
    patience: int = 3
    batches_per_epoch: int = 20
    cv_speaker_fraction: float = 0.10
    nu: float | None = None  # None: keep the initial model's nu
    seed: int = 0
    target_weight: float = 0.5
    transform_reparam: bool = False
    diag_penalty: float = 0.0

    def __post_init__(self):
        if self.batch_side < 2:
            raise ValueError("batch_side must be at least 2")
        if not 0 < self.cv_speaker_fraction < 1:
            raise ValueError("cv_speaker_fraction must be in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.nu is not None and not self.nu > 0:
            raise ValueError("nu must be positive")
        if not 0 < self.target_weight < 1:
            raise ValueError("target_weight must be in (0, 1)")
        if self.max_epochs < 0 or self.patience < 1 or self.batches_per_epoch < 1:
            raise ValueError("max_epochs >= 0, patience >= 1, batches_per_epoch >= 1")
        if self.diag_penalty < 0:
            raise ValueError("diag_penalty must be nonnegative")


# ---------------------------------------------------------------------------
# parameterizations


def _chol_from_raw(C_raw):
    return np.tril(C_raw, -1) + np.diag(np.exp(np.diag(C_raw)))


@dataclass(frozen=True, eq=False)
class TrainableParams:
    """``F`` and a Cholesky factor of ``W`` stored with a log diagonal.

    ``C`` is lower triangular; the effective factor has ``exp(diag(C))`` on
    its diagonal, so ``W = C_eff C_eff'`` stays positive definite under
    unconstrained updates.
    """

    F: np.ndarray
    C: np.ndarray

    @classmethod
    def from_model(cls, model: HtPldaModel) -> "TrainableParams":
        L = la.cholesky(model.W, lower=True)
        C = np.tril(L, -1) + np.diag(np.log(np.diag(L)))
        return cls(model.F.copy(), C)

    def effective(self):
        """``(F, W, T)`` where ``T`` transforms inputs (``None`` = identity)."""
        L = _chol_from_raw(self.C)
        return self.F, L @ L.T, None

    def grad_from(self, gF, gW, gT):
        L = _chol_from_raw(self.C)
        gL = np.tril((gW + gW.T) @ L)
        gC = np.tril(gL, -1) + np.diag(np.diag(gL) * np.diag(L))
        return TrainableParams(gF, gC)

    def to_model(self, nu, mean) -> HtPldaModel:
        F, W, _ = self.effective()
        return HtPldaModel(F.copy(), W, nu, mean)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.F.ravel(), self.C[np.tril_indices(self.C.shape[0])]])

    def unflat(self, x) -> "TrainableParams":
        D, d = self.F.shape
        F = x[: D * d].reshape(D, d)
        C = np.zeros((D, D))
        C[np.tril_indices(D)] = x[D * d :]
        return TrainableParams(F, C)


@dataclass(frozen=True, eq=False)
class TransformParams:
    """``W = I`` with a learned linear input transform ``r -> T r``.

    Equivalent to ``TrainableParams`` with ``W = T'T`` and ``F = T^{-1} F``.
    Initialization rotates ``z`` so that ``F'F`` starts diagonal; an optional
    L2 penalty on its off-diagonal keeps it close to diagonal.
    """

    F: np.ndarray
    T: np.ndarray

    @classmethod
    def from_model(cls, model: HtPldaModel) -> "TransformParams":
        L = la.cholesky(model.W, lower=True)
        T = L.T
        F = T @ model.F
        _, V = la.eigh(F.T @ F)
        return cls(F @ V, T)

    def effective(self):
        return self.F, None, self.T

    def grad_from(self, gF, gW, gT):
        return TransformParams(gF, gT)

    def to_model(self, nu, mean) -> HtPldaModel:
        W = self.T.T @ self.T
        F = la.solve(self.T, self.F)
        return HtPldaModel(F, W, nu, mean)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.F.ravel(), self.T.ravel()])

    def unflat(self, x) -> "TransformParams":
        D, d = self.F.shape
        return TransformParams(x[: D * d].reshape(D, d), x[D * d :].reshape(D, D))


# ---------------------------------------------------------------------------
# minibatches


@dataclass(frozen=True, eq=False)
class Minibatch:
    enroll: np.ndarray
    test: np.ndarray
    label_mask: np.ndarray
    valid_mask: np.ndarray
    enroll_index: np.ndarray | None = None
    test_index: np.ndarray | None = None


def make_batch(R1, R2, spk1, spk2, idx1=None, idx2=None) -> Minibatch:
    spk1 = np.asarray(spk1)
    spk2 = np.asarray(spk2)
    labels = spk1[:, None] == spk2[None, :]
    if idx1 is None:
        valid = np.ones(labels.shape, dtype=bool)
    else:
        valid = np.asarray(idx1)[:, None] != np.asarray(idx2)[None, :]
    return Minibatch(np.asarray(R1, float), np.asarray(R2, float), labels, valid, idx1, idx2)


def sample_minibatch(
    data: LabeledDataset, cfg: TrainConfig, rng, centered=None, max_tries: int = 100
) -> Minibatch:
    """Two independent with-replacement draws of ``cfg.batch_side`` recordings.

    Self-pairs (the same recording on both sides) are invalid. Batches without
    a valid target or non-target pair are resampled.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    X = data.vectors if centered is None else centered
    labels, _ = data.speaker_labels()
    for attempt in range(max_tries):
        i1 = rng.integers(0, n, size=cfg.batch_side)
        i2 = rng.integers(0, n, size=cfg.batch_side)
        batch = make_batch(X[i1], X[i2], labels[i1], labels[i2], i1, i2)
        tgt = batch.label_mask & batch.valid_mask
        if tgt.any() and (batch.valid_mask & ~batch.label_mask).any():
            return batch
        logger.info("minibatch without targets or non-targets, resampling (%d)", attempt + 1)
    raise RuntimeError(f"no usable minibatch after {max_tries} draws")


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class _Extractor:
    F: np.ndarray
    P: np.ndarray  # F'W
    lam: np.ndarray
    V: np.ndarray
    K: np.ndarray | None  # Bbar^{-1}
    G: np.ndarray | None
    nu: float
    D: int
    d: int

    @property
    def gaussian(self):
        return math.isinf(self.nu)


def _make_extractor(F, W, nu):
    D, d = F.shape
    P = F.T if W is None else F.T @ W
    Bbar = P @ F
    Bbar = 0.5 * (Bbar + Bbar.T)
    lam, V = la.eigh(Bbar)
    lam = np.maximum(lam, 0.0)
    K = G = None
    if not math.isinf(nu):
        K = la.cho_solve(la.cho_factor(Bbar), np.eye(d))
        K = 0.5 * (K + K.T)
        G = (np.eye(D) if W is None else W) - P.T @ K @ P
        G = 0.5 * (G + G.T)
    return _Extractor(F, P, lam, V, K, G, float(nu), D, d)


def _side_forward(ex: _Extractor, R):
    Abar = R @ ex.P.T
    if ex.gaussian:
        q = None
        b = np.ones(R.shape[0])
    else:
        q = np.maximum(np.einsum("ij,jk,ik->i", R, ex.G, R), 0.0)
        b = (ex.nu + ex.D - ex.d) / (ex.nu + q)
    At = (b[:, None] * Abar) @ ex.V
    m = 1.0 / (1.0 + b[:, None] * ex.lam)
    e = 0.5 * np.sum(At * At * m, axis=1) + 0.5 * np.sum(np.log(m), axis=1)
    return dict(R=R, Abar=Abar, q=q, b=b, At=At, m=m, e=e)


def _row_blocks(n, m, d):
    step = max(1, _PAIR_BLOCK_ELEMENTS // max(1, m * d))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _pair_block(s1, s2, lam, rows):
    beta = s1["b"][rows, None] + s2["b"][None, :]
    M = 1.0 / (1.0 + beta[..., None] * lam)
    Ap = s1["At"][rows, None, :] + s2["At"][None, :, :]
    S = 0.5 * np.sum(Ap * Ap * M, axis=-1) + 0.5 * np.sum(np.log(M), axis=-1)
    S -= s1["e"][rows, None] + s2["e"][None, :]
    return S, beta, M, Ap


def _score_matrix(ex, R1, R2):
    s1 = _side_forward(ex, R1)
    s2 = _side_forward(ex, R2)
    out = np.empty((R1.shape[0], R2.shape[0]))
    for rows in _row_blocks(R1.shape[0], R2.shape[0], ex.d):
        out[rows] = _pair_block(s1, s2, ex.lam, rows)[0]
    return out


def _single_backward(s, w, lam, gAt, gb, X):
    """Accumulate gradients of ``sum_i w_i e_i`` (in place)."""
    At, m, b = s["At"], s["m"], s["b"]
    mA = m * At
    gAt += w[:, None] * mA
    gb += w * (-0.5 * np.sum(At * At * lam * m * m, axis=1) - 0.5 * (m @ lam))
    wb = w * b
    X -= 0.5 * (mA.T * wb) @ mA
    X[np.diag_indices_from(X)] -= 0.5 * (wb @ m)


def _side_backward(ex, s, gAt, gb, gP, gG):
    """From gradients on ``At`` and ``b`` of one side to ``P``, ``G`` and ``R``."""
    gA = gAt @ ex.V.T
    gb = gb + np.sum(gA * s["Abar"], axis=1)
    gAbar = s["b"][:, None] * gA
    R = s["R"]
    gP += gAbar.T @ R
    gR = gAbar @ ex.P
    if not ex.gaussian:
        gq = gb * (-s["b"] / (ex.nu + s["q"]))
        gG += (R.T * gq) @ R
        gR += 2.0 * gq[:, None] * (R @ ex.G)
    return gR


def _loss_and_grad_scores(S, labels, valid, target_weight, n_tgt, n_non):
    tgt = labels & valid
    non = valid & ~labels
    w = target_weight
    loss = (w / n_tgt) * np.sum(np.logaddexp(0.0, -S[tgt])) + ((1 - w) / n_non) * np.sum(
        np.logaddexp(0.0, S[non])
    )
    gS = np.zeros_like(S)
    gS[tgt] = -(w / n_tgt) * _sigmoid(-S[tgt])
    gS[non] = ((1 - w) / n_non) * _sigmoid(S[non])
    return loss, gS


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _bxe_forward_backward(F, W, T, nu, batch: Minibatch, target_weight, need_grad=True):
    R1, R2 = batch.enroll, batch.test
    if T is not None:
        R1 = R1 @ T.T
        R2 = R2 @ T.T
    ex = _make_extractor(F, W, nu)
    s1 = _side_forward(ex, R1)
    s2 = _side_forward(ex, R2)
    labels, valid = batch.label_mask, batch.valid_mask
    n_tgt = int(np.sum(labels & valid))
    n_non = int(np.sum(valid & ~labels))
    if n_tgt == 0 or n_non == 0:
        raise ValueError("batch needs at least one valid target and one non-target")

    n, mcols, d, lam = R1.shape[0], R2.shape[0], ex.d, ex.lam
    loss = 0.0
    gAt1 = np.zeros((n, d))
    gAt2 = np.zeros((mcols, d))
    gb1 = np.zeros(n)
    gb2 = np.zeros(mcols)
    w1 = np.zeros(n)
    w2 = np.zeros(mcols)
    X = np.zeros((d, d))
    for rows in _row_blocks(n, mcols, d):
        S, beta, M, Ap = _pair_block(s1, s2, lam, rows)
        lb, gS = _loss_and_grad_scores(
            S, labels[rows], valid[rows], target_weight, n_tgt, n_non
        )
        loss += lb
        if not need_grad:
            continue
        MA = M * Ap
        gAt1[rows] += np.einsum("ij,ijk->ik", gS, MA)
        gAt2 += np.einsum("ij,ijk->jk", gS, MA)
        gbeta = gS * (
            -0.5 * np.einsum("ijk,k->ij", Ap * Ap * M * M, lam) - 0.5 * (M @ lam)
        )
        gb1[rows] += gbeta.sum(axis=1)
        gb2 += gbeta.sum(axis=0)
        gsb = (gS * beta)[..., None] * MA
        X -= 0.5 * gsb.reshape(-1, d).T @ MA.reshape(-1, d)
        X[np.diag_indices(d)] -= 0.5 * np.einsum("ij,ijk->k", gS * beta, M)
        w1[rows] -= gS.sum(axis=1)
        w2 -= gS.sum(axis=0)
    if not need_grad:
        return loss, None

    _single_backward(s1, w1, lam, gAt1, gb1, X)
    _single_backward(s2, w2, lam, gAt2, gb2, X)

    D = ex.D
    gP = np.zeros((d, D))
    gG = np.zeros((D, D))
    gR1 = _side_backward(ex, s1, gAt1, gb1, gP, gG)
    gR2 = _side_backward(ex, s2, gAt2, gb2, gP, gG)

    gBbar = ex.V @ X @ ex.V.T
    gW = np.zeros((D, D))
    if not ex.gaussian:
        # G = W - P' K P,  K = Bbar^{-1}
        gGs = gG + gG.T
        gW += gG
        gP -= ex.K @ ex.P @ gGs
        gBbar += ex.K @ ex.P @ gG @ ex.P.T @ ex.K
    # Bbar = P F
    gP += gBbar @ F.T
    gF = ex.P.T @ gBbar
    # P = F'W
    if W is None:
        gF += gP.T
    else:
        gF += W @ gP.T
        gW += F @ gP
    gT = None
    if T is not None:
        gT = gR1.T @ batch.enroll + gR2.T @ batch.test
    return loss, (gF, gW, gT)


def _penalty(params, diag_penalty):
    if diag_penalty == 0 or not isinstance(params, TransformParams):
        return 0.0, None
    FtF = params.F.T @ params.F
    O = FtF - np.diag(np.diag(FtF))
    return diag_penalty * float(np.sum(O * O)), 4.0 * diag_penalty * params.F @ O


# ---------------------------------------------------------------------------
# public API


def score_batch(params, nu, batch: Minibatch) -> np.ndarray:
    """All-vs-all LLR matrix of a minibatch; invalid cells are NaN."""
    F, W, T = params.effective()
    R1, R2 = batch.enroll, batch.test
    if T is not None:
        R1, R2 = R1 @ T.T, R2 @ T.T
    S = _score_matrix(_make_extractor(F, W, nu), R1, R2)
    S[~batch.valid_mask] = np.nan
    return S


def bxe(scores, labels, valid_mask, target_weight: float = 0.5) -> float:
    """Class-balanced binary cross-entropy (nats) of LLR scores."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    valid = np.asarray(valid_mask, dtype=bool)
    tgt = scores[labels & valid]
    non = scores[valid & ~labels]
    if tgt.size == 0 or non.size == 0:
        raise ValueError("need at least one valid target and one non-target score")
    w = target_weight
    return float(
        w * np.mean(np.logaddexp(0.0, -tgt)) + (1 - w) * np.mean(np.logaddexp(0.0, non))
    )


def bxe_objective(params, nu, batch, target_weight=0.5, diag_penalty=0.0) -> float:
    F, W, T = params.effective()
    loss, _ = _bxe_forward_backward(F, W, T, nu, batch, target_weight, need_grad=False)
    return float(loss) + _penalty(params, diag_penalty)[0]


def grad_bxe(params, nu, batch, target_weight=0.5, diag_penalty=0.0):
    """BXE of a minibatch and its exact gradient, shaped like ``params``."""
    F, W, T = params.effective()
    loss, (gF, gW, gT) = _bxe_forward_backward(F, W, T, nu, batch, target_weight)
    pen, gpen = _penalty(params, diag_penalty)
    if gpen is not None:
        gF = gF + gpen
    return float(loss) + pen, params.grad_from(gF, gW, gT)


def split_speakers(data: LabeledDataset, fraction: float, rng):
    """Split speakers into disjoint training and cross-validation sets."""
    speakers = data.speakers
    if len(speakers) < 2:
        raise ValueError("need at least two speakers to hold out a CV set")
    order = rng.permutation(len(speakers))
    n_cv = min(len(speakers) - 1, max(1, int(round(fraction * len(speakers)))))
    cv = [speakers[i] for i in sorted(order[:n_cv])]
    train = [speakers[i] for i in sorted(order[n_cv:])]
    return train, cv


def full_batch(data: LabeledDataset, centered=None) -> Minibatch:
    """All-vs-all batch of a dataset with self-pairs excluded."""
    X = data.vectors if centered is None else centered
    labels, _ = data.speaker_labels()
    idx = np.arange(len(data))
    return make_batch(X, X, labels, labels, idx, idx)


def format_history_line(h) -> str:
    return f"epoch {h['epoch']} train_bxe {h['train_bxe']:.6f} cv_bxe {h['cv_bxe']:.6f}"


def sgd_train(init: HtPldaModel, data: LabeledDataset, cfg: TrainConfig, log=None):
    """Minibatch SGD with momentum on the balanced BXE, early-stopped on CV BXE.

    Returns ``(model, history)``; ``model`` is the best-CV model and
    ``history`` a list of ``{"epoch", "train_bxe", "cv_bxe"}`` dicts, epoch 0
    being the initial model. ``nu`` and the centering mean are never changed.
    ``log``, if given, receives one formatted history line per epoch.
    """
    nu = init.nu if cfg.nu is None else float(cfg.nu)
    rng = np.random.default_rng(cfg.seed)
    train_spk, cv_spk = split_speakers(data, cfg.cv_speaker_fraction, rng)
    train = data.select_speakers(train_spk)
    cv = data.select_speakers(cv_spk)
    Xtr = train.vectors - init.mean
    cv_batch = full_batch(cv, cv.vectors - init.mean)
    if not (cv_batch.label_mask & cv_batch.valid_mask).any():
        raise ValueError("cross-validation speakers have no same-speaker pairs")

    Params = TransformParams if cfg.transform_reparam else TrainableParams
    params = Params.from_model(init.with_nu(nu))
    w, pen = cfg.target_weight, cfg.diag_penalty

    def cv_loss(p):
        return bxe_objective(p, nu, cv_batch, w)

    monitor = sample_minibatch(train, cfg, rng, Xtr)
    history = [dict(epoch=0, train_bxe=bxe_objective(params, nu, monitor, w, pen), cv_bxe=cv_loss(params))]
    if log:
        log(format_history_line(history[-1]))
    best = (history[0]["cv_bxe"], 0, params)
    x = params.flat()
    velocity = np.zeros_like(x)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for _ in range(cfg.batches_per_epoch):
            batch = sample_minibatch(train, cfg, rng, Xtr)
            loss, grad = grad_bxe(params, nu, batch, w, pen)
            losses.append(loss)
            velocity = cfg.momentum * velocity - cfg.learning_rate * grad.flat()
            x = x + velocity
            params = params.unflat(x)
        cvl = cv_loss(params)
        if not np.isfinite(cvl):
            raise FloatingPointError(f"non-finite CV BXE at epoch {epoch}")
        history.append(dict(epoch=epoch, train_bxe=float(np.mean(losses)), cv_bxe=cvl))
        if log:
            log(format_history_line(history[-1]))
        if cvl < best[0]:
            best = (cvl, epoch, params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    logger.info("best CV BXE %.6f at epoch %d", best[0], best[1])
    return best[2].to_model(nu, init.mean.copy()), history
