"""Text file formats.

Dataset::

    GMEKIT-VEC 1 <n> <D>
    utt_id<TAB>speaker_id<TAB>v1 v2 ... vD

Model::

    GMEKIT-MODEL 1 <gplda|htplda> <D> <d> <nu|inf>
    mean
    <D values>
    F
    <D rows of d values>
    W
    <D rows of D values>

Scores are ``model_id<TAB>test_id<TAB>score``; keys are
``model_id<TAB>test_id<TAB>tgt|non``; enrollment lists are
``model_id<TAB>utt_id`` with one line per enrollment utterance.
Floats are written with 17 significant digits so they read back exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .data import LabeledDataset
from .evaluation import ScoreSet, TrialSet
from .gplda import GPldaModel
from .htplda import HtPldaModel

VEC_MAGIC = "GMEKIT-VEC"
MODEL_MAGIC = "GMEKIT-MODEL"
FORMAT_VERSION = "1"


class FormatError(ValueError):
    pass


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _row(values) -> str:
    return " ".join(fmt(v) for v in values)


def _floats(text, path, lineno):
    try:
        return [float(v) for v in text.split()]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: bad number ({exc})") from None


# -- datasets ---------------------------------------------------------------


def write_dataset(path, data: LabeledDataset):
    n, D = data.vectors.shape
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{VEC_MAGIC} {FORMAT_VERSION} {n} {D}\n")
        for utt, spk, v in zip(data.utt_ids, data.speaker_ids, data.vectors):
            f.write(f"{utt}\t{spk}\t{_row(v)}\n")


def read_dataset(path) -> LabeledDataset:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != VEC_MAGIC or head[1] != FORMAT_VERSION:
        raise FormatError(f"{path}: bad header {lines[0]!r}")
    n, D = int(head[2]), int(head[3])
    body = [l for l in lines[1:] if l.strip()]
    if len(body) != n:
        raise FormatError(f"{path}: header declares {n} vectors, found {len(body)}")
    X = np.empty((n, D))
    utts, spks = [], []
    for i, line in enumerate(body):
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{i + 2}: expected 3 tab-separated fields")
        vals = _floats(parts[2], path, i + 2)
        if len(vals) != D:
            raise FormatError(f"{path}:{i + 2}: expected {D} values, got {len(vals)}")
        X[i] = vals
        utts.append(parts[0])
        spks.append(parts[1])
    try:
        return LabeledDataset(X, tuple(utts), tuple(spks))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# -- models -----------------------------------------------------------------


def write_model(path, model):
    if isinstance(model, GPldaModel):
        kind, nu = "gplda", math.inf
    elif isinstance(model, HtPldaModel):
        kind, nu = "htplda", model.nu
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    D, d = model.F.shape
    nu_s = "inf" if math.isinf(nu) else fmt(nu)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{MODEL_MAGIC} {FORMAT_VERSION} {kind} {D} {d} {nu_s}\n")
        f.write("mean\n")
        f.write(_row(model.mean) + "\n")
        f.write("F\n")
        for row in model.F:
            f.write(_row(row) + "\n")
        f.write("W\n")
        for row in model.W:
            f.write(_row(row) + "\n")


def read_model(path):
    """Read a model file; returns a ``GPldaModel`` or an ``HtPldaModel``."""
    with open(path, encoding="utf-8") as f:
        lines = [l for l in f.read().splitlines() if l.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != MODEL_MAGIC or head[1] != FORMAT_VERSION:
        raise FormatError(f"{path}: bad header {lines[0]!r}")
    kind = head[2]
    if kind not in ("gplda", "htplda"):
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    try:
        D, d = int(head[3]), int(head[4])
        nu = math.inf if head[5] == "inf" else float(head[5])
    except ValueError:
        raise FormatError(f"{path}: bad header {lines[0]!r}") from None

    expected = 1 + (1 + 1) + (1 + D) + (1 + D)
    if len(lines) != expected:
        raise FormatError(f"{path}: expected {expected} non-empty lines, got {len(lines)}")
    pos = 1

    def block(name, rows, cols):
        nonlocal pos
        if lines[pos].strip() != name:
            raise FormatError(f"{path}: expected block {name!r}, got {lines[pos]!r}")
        out = []
        for k in range(rows):
            vals = _floats(lines[pos + 1 + k], path, pos + 2 + k)
            if len(vals) != cols:
                raise FormatError(f"{path}: block {name} row {k} has {len(vals)} values, expected {cols}")
            out.append(vals)
        pos += rows + 1
        return np.array(out, dtype=float).reshape(rows, cols)

    mean = block("mean", 1, D)[0]
    F = block("F", D, d)
    W = block("W", D, D)
    if kind == "gplda":
        return GPldaModel(mean, F, W)
    return HtPldaModel(F, W, nu, mean)


# -- trials, keys, scores ---------------------------------------------------

_LABELS = {"tgt": True, "target": True, "non": False, "nontarget": False}


def read_enroll(path) -> dict:
    models: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: expected model_id<TAB>utt_id")
            models.setdefault(parts[0], []).extend(p for p in parts[1:] if p)
    return models


def write_enroll(path, models: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for m, utts in models.items():
            for u in utts:
                f.write(f"{m}\t{u}\n")


def read_trials(path) -> list:
    """Trial list; an optional third column holds ``tgt``/``non``."""
    trials = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) == 2:
                trials.append((parts[0], parts[1], None))
            elif len(parts) == 3 and parts[2] in _LABELS:
                trials.append((parts[0], parts[1], _LABELS[parts[2]]))
            else:
                raise FormatError(f"{path}:{lineno}: expected model<TAB>test[<TAB>tgt|non]")
    return trials


def write_key(path, trials):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for m, t, lab in trials:
            if lab is None:
                f.write(f"{m}\t{t}\n")
            else:
                f.write(f"{m}\t{t}\t{'tgt' if lab else 'non'}\n")


def read_key(path) -> dict:
    key = {}
    for m, t, lab in read_trials(path):
        if lab is None:
            raise FormatError(f"{path}: key line for ({m}, {t}) has no label")
        key[(m, t)] = lab
    return key


def read_trial_set(enroll_path, trials_path) -> TrialSet:
    return TrialSet(read_enroll(enroll_path), read_trials(trials_path))


def write_scores(path, scores: ScoreSet):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for m, t, s in scores.entries:
            f.write(f"{m}\t{t}\t{fmt(s)}\n")


def read_scores(path) -> ScoreSet:
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected model<TAB>test<TAB>score")
            try:
                entries.append((parts[0], parts[1], float(parts[2])))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad score {parts[2]!r}") from None
    return ScoreSet(entries)
