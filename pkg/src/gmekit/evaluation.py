"""Trial scoring with (multi-)enrollment and detection metrics (EER, minDCF)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .gme import Partition, llr_partition
from .htplda import HtPldaModel, as_gmes, extract_many

ENROLL_MODES = ("average_vectors", "pool_gme")
DCF_PRIORS = (0.01, 0.005)


class MissingUtteranceError(KeyError):
    pass


@dataclass
class TrialSet:
    """Enrollment models and (model, test) trials.

    ``models`` maps a model id to its enrollment utterance ids. Each trial is
    ``(model_id, test_utt_id, label)`` with label ``True`` (target),
    ``False`` (non-target) or ``None`` (unknown).
    """

    models: dict
    trials: list = field(default_factory=list)

    def validate(self, data: LabeledDataset):
        known = set(data.utt_ids)
        for model_id, utts in self.models.items():
            if not utts:
                raise ValueError(f"model {model_id!r} has no enrollment utterances")
            for u in utts:
                if u not in known:
                    raise MissingUtteranceError(f"enrollment utterance {u!r} not in data")
        for model_id, test, _ in self.trials:
            if model_id not in self.models:
                raise MissingUtteranceError(f"unknown model {model_id!r}")
            if test not in known:
                raise MissingUtteranceError(f"test utterance {test!r} not in data")

    @property
    def labels(self) -> list:
        return [t[2] for t in self.trials]


@dataclass
class ScoreSet:
    entries: list = field(default_factory=list)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=float)

    def as_dict(self) -> dict:
        return {(m, t): s for m, t, s in self.entries}


def _log_e(At, beta, lam):
    s = 1.0 + beta[:, None] * lam
    return 0.5 * np.sum(At * At / s, axis=1) - 0.5 * np.sum(np.log(s), axis=1)


def score_trials(
    extractor: HtPldaModel,
    data: LabeledDataset,
    trials: TrialSet,
    enroll_mode: str = "average_vectors",
    vectorized: bool = True,
) -> ScoreSet:
    """Score every trial of ``trials`` with GMEs extracted by ``extractor``.

    ``average_vectors`` averages the enrollment vectors and extracts one GME;
    ``pool_gme`` pools the per-utterance GMEs and evaluates the partition LLR
    of one speaker against two. With ``vectorized=False`` each trial goes
    through :func:`gmekit.gme.llr_partition` one at a time.
    """
    if enroll_mode not in ENROLL_MODES:
        raise ValueError(f"enroll_mode must be one of {ENROLL_MODES}")
    trials.validate(data)
    index = data.index_of()
    dv = extractor.derived
    model_ids = list(trials.models)
    midx = {m: i for i, m in enumerate(model_ids)}

    test_utts = sorted({t for _, t, _ in trials.trials}, key=index.__getitem__)
    tidx = {u: i for i, u in enumerate(test_utts)}
    At_, bt_ = extract_many(extractor, dv, data.vectors[[index[u] for u in test_utts]])

    if enroll_mode == "average_vectors":
        means = np.array(
            [data.vectors[[index[u] for u in trials.models[m]]].mean(axis=0) for m in model_ids]
        ).reshape(len(model_ids), extractor.D)
        Ae, be = extract_many(extractor, dv, means)
        enroll_gmes = as_gmes(extractor, dv, Ae, be)
        enroll_groups = [[g] for g in enroll_gmes]
    else:
        enroll_utts = sorted({u for m in model_ids for u in trials.models[m]}, key=index.__getitem__)
        eidx = {u: i for i, u in enumerate(enroll_utts)}
        Au, bu = extract_many(extractor, dv, data.vectors[[index[u] for u in enroll_utts]])
        Ae = np.array([Au[[eidx[u] for u in trials.models[m]]].sum(axis=0) for m in model_ids])
        Ae = Ae.reshape(len(model_ids), extractor.d)
        be = np.array([bu[[eidx[u] for u in trials.models[m]]].sum() for m in model_ids])
        per_utt = as_gmes(extractor, dv, Au, bu)
        enroll_groups = [[per_utt[eidx[u]] for u in trials.models[m]] for m in model_ids]

    mi = np.array([midx[m] for m, _, _ in trials.trials], dtype=int)
    ti = np.array([tidx[t] for _, t, _ in trials.trials], dtype=int)

    if vectorized:
        V, lam = dv.basis.eigvecs, dv.basis.eigvals
        Aet, Att = Ae @ V, At_ @ V
        le = _log_e(Aet, be, lam)
        lt = _log_e(Att, bt_, lam)
        if len(mi):
            lp = _log_e(Aet[mi] + Att[ti], be[mi] + bt_[ti], lam)
            scores = lp - le[mi] - lt[ti]
        else:
            scores = np.zeros(0)
    else:
        test_gmes = as_gmes(extractor, dv, At_, bt_)
        scores = []
        for m, t in zip(mi, ti):
            group = enroll_groups[m]
            k = len(group)
            A = Partition.of(range(k + 1))
            B = Partition.of(range(k), [k])
            scores.append(llr_partition(group + [test_gmes[t]], A, B))
        scores = np.array(scores)

    return ScoreSet(
        [(m, t, float(s)) for (m, t, _), s in zip(trials.trials, scores)]
    )


# ---------------------------------------------------------------------------
# metrics


def split_scores(scores, labels):
    """Target and non-target score arrays from parallel scores/labels."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray([None if l is None else bool(l) for l in labels], dtype=object)
    known = np.array([l is not None for l in labels], dtype=bool)
    lab = np.array([bool(l) for l in labels[known]], dtype=bool)
    return scores[known][lab], scores[known][~lab]


def _check(tar, non):
    tar = np.asarray(tar, dtype=float).ravel()
    non = np.asarray(non, dtype=float).ravel()
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one non-target score")
    return tar, non


def error_rates(tar, non):
    """Miss and false-alarm rates at thresholds ``-inf``, midpoints, ``+inf``.

    A trial is accepted when its score exceeds the threshold. Thresholds lie
    strictly between distinct scores, so ties are never split.
    """
    tar, non = _check(tar, non)
    u = np.unique(np.concatenate([tar, non]))
    tar_s = np.sort(tar)
    non_s = np.sort(non)
    p_miss = np.concatenate([[0.0], np.searchsorted(tar_s, u, side="right") / tar.size])
    p_fa = np.concatenate([[1.0], 1.0 - np.searchsorted(non_s, u, side="right") / non.size])
    return p_miss, p_fa


def eer(tar, non) -> float:
    """Equal error rate in percent.

    Linear interpolation of the empirical miss/false-alarm curves at the
    point where they cross.
    """
    p_miss, p_fa = error_rates(tar, non)
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return 100.0 * float(p_miss[i])
    alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
    return 100.0 * float(p_miss[i - 1] + alpha * (p_miss[i] - p_miss[i - 1]))


def min_dcf(tar, non, p_target: float) -> float:
    """Normalized minimum detection cost with unit miss and false-alarm costs."""
    if not 0 < p_target < 1:
        raise ValueError("p_target must be in (0, 1)")
    p_miss, p_fa = error_rates(tar, non)
    cost = p_target * p_miss + (1 - p_target) * p_fa
    return float(cost.min() / min(p_target, 1 - p_target))


def avg_min_dcf(tar, non, priors=DCF_PRIORS) -> float:
    return float(np.mean([min_dcf(tar, non, p) for p in priors]))


def metrics_report(tar, non) -> dict:
    return {
        "eer": eer(tar, non),
        "avg_min_dcf": avg_min_dcf(tar, non),
        **{f"min_dcf@{p}": min_dcf(tar, non, p) for p in DCF_PRIORS},
    }


def format_condition(name, tar, non) -> str:
    """One table row: ``<name> C_min <avg minDCF> EER <eer %>``."""
    return f"{name} C_min {avg_min_dcf(tar, non):.3f} EER {eer(tar, non):.2f}"


def make_trials(data: LabeledDataset, n_enroll: int = 1) -> TrialSet:
    """Enrollment models from each speaker's first ``n_enroll`` utterances.

    Every remaining utterance is tested against every model. Speakers with no
    utterance left over still get a model (and serve only as non-targets).
    """
    if n_enroll < 1:
        raise ValueError("n_enroll must be at least 1")
    by_spk: dict = {}
    for u, s in zip(data.utt_ids, data.speaker_ids):
        by_spk.setdefault(s, []).append(u)
    models = {f"{s}-enroll": utts[:n_enroll] for s, utts in by_spk.items()}
    owner = {f"{s}-enroll": s for s in by_spk}
    tests = [(u, s) for s, utts in by_spk.items() for u in utts[n_enroll:]]
    trials = [(m, u, owner[m] == s) for m in models for u, s in tests]
    return TrialSet(models, trials)
