"""Command-line interface.

Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time

import numpy as np

from . import io as gio
from .config import ConfigError, load_config
from .discrim import sgd_train
from .evaluation import (
    ENROLL_MODES,
    MissingUtteranceError,
    make_trials,
    metrics_report,
    score_trials,
    split_scores,
)
from .gplda import DegenerateDataError, GPldaModel, em_train, init_gme, score_params
from .htplda import HtPldaModel, random_model, sample

logger = logging.getLogger("gmekit")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _nu(text: str) -> float:
    try:
        nu = math.inf if text.strip().lower() == "inf" else float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not nu > 0:
        raise argparse.ArgumentTypeError(f"nu must be positive, got {text}")
    return nu


def _out(msg=""):
    print(msg, flush=True)


# -- commands ---------------------------------------------------------------


def cmd_synth(args):
    model = random_model(args.D, args.d, args.nu, seed=args.seed)
    data = sample(model, args.speakers, args.utts, seed=args.seed + 1, prefix=args.prefix)
    gio.write_model(args.out_model, model)
    gio.write_dataset(args.out_data, data)
    _out(f"wrote {len(data)} vectors (D={args.D}) to {args.out_data}")
    _out(f"wrote generating model (d={args.d}, nu={'inf' if math.isinf(args.nu) else args.nu}) to {args.out_model}")


def cmd_make_trials(args):
    data = gio.read_dataset(args.data)
    ts = make_trials(data, args.n_enroll)
    gio.write_enroll(args.enroll_out, ts.models)
    gio.write_key(args.key_out, ts.trials)
    _out(f"{len(ts.models)} models, {len(ts.trials)} trials")


def cmd_train_gplda(args):
    data = gio.read_dataset(args.data)
    model, ll = em_train(
        data, args.d, args.iters, seed=args.seed, min_div=args.min_div,
        callback=lambda it, v: _out(f"iter {it} loglik {v:.6f}"),
    )
    gio.write_model(args.out, model)
    _out(f"initial loglik {ll[0]:.6f}, final loglik {ll[-1]:.6f}")


def cmd_init_gme(args):
    model = gio.read_model(args.model)
    if not isinstance(model, GPldaModel):
        raise UsageError(f"{args.model} is not a gplda model")
    gio.write_model(args.out, init_gme(model, args.nu))
    _out(f"wrote htplda model with nu={'inf' if math.isinf(args.nu) else args.nu} to {args.out}")


_TRAIN_OVERRIDES = (
    "batch_side", "learning_rate", "momentum", "max_epochs", "patience",
    "batches_per_epoch", "cv_speaker_fraction", "seed", "target_weight",
    "transform_reparam", "diag_penalty",
)


def cmd_train_gme(args):
    overrides = {k: getattr(args, k) for k in _TRAIN_OVERRIDES}
    overrides.update(data=args.data, model=args.model, out=args.out, history=args.history)
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if not (cfg.data and cfg.model and cfg.out):
        raise UsageError("train-gme needs data, model and out (flags or config)")
    init = gio.read_model(cfg.model)
    if isinstance(init, GPldaModel):
        raise UsageError(f"{cfg.model} is a gplda model; run init-gme first")
    data = gio.read_dataset(cfg.data)
    hist_file = open(cfg.history, "w", encoding="utf-8") if cfg.history else None

    def log(line):
        _out(line)
        if hist_file:
            hist_file.write(line + "\n")

    try:
        model, _ = sgd_train(init, data, cfg.train_config(), log=log)
    finally:
        if hist_file:
            hist_file.close()
    gio.write_model(cfg.out, model)
    _out(f"wrote best-CV model to {cfg.out}")


def _extractor(model):
    if isinstance(model, GPldaModel):
        return init_gme(model, math.inf)
    return model


def cmd_score(args):
    model = _extractor(gio.read_model(args.model))
    data = gio.read_dataset(args.data)
    ts = gio.read_trial_set(args.enroll, args.trials)
    scores = score_trials(model, data, ts, args.enroll_mode)
    gio.write_scores(args.out, scores)
    _out(f"scored {len(scores.entries)} trials")


def cmd_eval(args):
    scores = gio.read_scores(args.scores).as_dict()
    key = gio.read_key(args.key)
    if set(scores) != set(key):
        missing = len(set(key) - set(scores))
        extra = len(set(scores) - set(key))
        raise UsageError(f"score/key mismatch: {missing} keyed trials unscored, {extra} scores unkeyed")
    pairs = list(key)
    tar, non = split_scores([scores[p] for p in pairs], [key[p] for p in pairs])
    try:
        rep = metrics_report(tar, non)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _out(
        f"EER {rep['eer']:.4f}  avg_minDCF {rep['avg_min_dcf']:.4f}  "
        f"minDCF@0.01 {rep['min_dcf@0.01']:.4f}  minDCF@0.005 {rep['min_dcf@0.005']:.4f}"
    )


def cmd_bench(args):
    model = _extractor(gio.read_model(args.model))
    data = gio.read_dataset(args.data)
    ts = gio.read_trial_set(args.enroll, args.trials)
    ts.validate(data)
    n = len(ts.trials)

    index = data.index_of()
    model_ids = list(ts.models)
    midx = {m: i for i, m in enumerate(model_ids)}
    E = np.array([data.vectors[[index[u] for u in ts.models[m]]].mean(axis=0) for m in model_ids])
    mi = np.array([midx[m] for m, _, _ in ts.trials], dtype=int)
    ti = np.array([index[t] for _, t, _ in ts.trials], dtype=int)
    ti_unique, ti_pos = np.unique(ti, return_inverse=True)

    def plda():
        p = score_params(GPldaModel(model.mean, model.F, model.W))
        # per-side terms once, then one D-dimensional dot product per trial
        Re = E - model.mean
        Rt = data.vectors[ti_unique] - model.mean
        Le = Re @ p.Lambda
        qe = np.sum((Re @ p.Gamma) * Re, axis=1)
        qt = np.sum((Rt @ p.Gamma) * Rt, axis=1)
        return 2.0 * np.sum(Le[mi] * Rt[ti_pos], axis=1) + qe[mi] + qt[ti_pos] + p.k

    def gme():
        fresh = HtPldaModel(model.F, model.W, model.nu, model.mean)
        return score_trials(fresh, data, ts, "average_vectors").scores

    timings = {}
    for name, fn in (("gplda", plda), ("gme", gme)):
        best = math.inf
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    _out(f"trials {n}")
    _out(f"gplda_seconds {timings['gplda']:.6f}")
    _out(f"gme_seconds {timings['gme']:.6f}")
    _out(f"ratio {timings['gme'] / max(timings['gplda'], 1e-12):.3f}")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmekit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="sample a random heavy-tailed PLDA model and dataset")
    s.add_argument("--D", type=int, required=True, dest="D")
    s.add_argument("--d", type=int, required=True, dest="d")
    s.add_argument("--nu", type=_nu, default=2.0)
    s.add_argument("--speakers", type=int, required=True)
    s.add_argument("--utts", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prefix", default="spk")
    s.add_argument("--out-data", default="synth.vec")
    s.add_argument("--out-model", default="synth.model")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("make-trials", help="build enrollment and key files from a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--n-enroll", type=int, default=1)
    s.add_argument("--enroll-out", required=True)
    s.add_argument("--key-out", required=True)
    s.set_defaults(func=cmd_make_trials)

    s = sub.add_parser("train-gplda", help="EM training of Gaussian PLDA")
    s.add_argument("--data", required=True)
    s.add_argument("--d", type=int, required=True, dest="d")
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-div", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_gplda)

    s = sub.add_parser("init-gme", help="heavy-tailed extractor from a gplda model")
    s.add_argument("--model", required=True)
    s.add_argument("--nu", type=_nu, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_gme)

    s = sub.add_parser("train-gme", help="discriminative BXE training of the extractor")
    s.add_argument("--model")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--history")
    s.add_argument("--batch-side", type=int, dest="batch_side")
    s.add_argument("--learning-rate", type=float, dest="learning_rate")
    s.add_argument("--momentum", type=float)
    s.add_argument("--max-epochs", type=int, dest="max_epochs")
    s.add_argument("--patience", type=int)
    s.add_argument("--batches-per-epoch", type=int, dest="batches_per_epoch")
    s.add_argument("--cv-speaker-fraction", type=float, dest="cv_speaker_fraction")
    s.add_argument("--seed", type=int)
    s.add_argument("--target-weight", type=float, dest="target_weight")
    s.add_argument("--transform-reparam", action="store_const", const=True, dest="transform_reparam")
    s.add_argument("--diag-penalty", type=float, dest="diag_penalty")
    s.set_defaults(func=cmd_train_gme)

    s = sub.add_parser("score", help="score a trial list")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--enroll", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--enroll-mode", choices=ENROLL_MODES, default="average_vectors")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="EER and minDCF of a score file against a key")
    s.add_argument("--scores", required=True)
    s.add_argument("--key", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time GPLDA against GME scoring")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--enroll", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except (UsageError, OSError, gio.FormatError, MissingUtteranceError, ConfigError) as exc:
        print(f"gmekit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, FloatingPointError, DegenerateDataError) as exc:
        print(f"gmekit {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"gmekit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
