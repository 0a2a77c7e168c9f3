"""The nine acceptance criteria, each at its stated tolerance and time budget.

Every test records a single PASS/FAIL line, listed again in the pytest
terminal summary under "acceptance criteria".
"""

import itertools
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from gmekit.data import LabeledDataset
from gmekit.discrim import TrainConfig, TrainableParams, bxe_objective, grad_bxe, sample_minibatch, sgd_train
from gmekit.evaluation import TrialSet, eer, make_trials, min_dcf, score_trials, split_scores
from gmekit.gme import GaussianMetaEmbedding, Partition, llr_binary, llr_partition, log_expectation
from gmekit.gplda import GPldaModel, em_train, init_gme, plda_llr, score_params
from gmekit.htplda import (
    GAUSSIAN,
    HtPldaModel,
    ancillary_stat,
    extract,
    precision_scale,
    random_model,
    sample,
)
from gmekit.quadrature import oracle_llr_partition, oracle_log_expectation

from conftest import random_gme
from metric_oracle import brute_force_dcf, brute_force_eer, quarter_step_scores


def _rel(x, ref):
    return abs(x - ref) / max(1.0, abs(ref))


# 1 -----------------------------------------------------------------------------


def test_plda_gme_equivalence(acceptance):
    t0 = time.perf_counter()
    truth = random_model(50, 10, GAUSSIAN, seed=101)
    rng = np.random.default_rng(102)
    g = GPldaModel(rng.standard_normal(50), truth.F, truth.W)
    params = score_params(g)
    ext = init_gme(g, GAUSSIAN)
    worst = 0.0
    for _ in range(1000):
        r1 = g.mean + sample(truth, 1, 1, seed=int(rng.integers(2**31))).vectors[0]
        r2 = g.mean + rng.standard_normal(50)
        s_plda = plda_llr(params, r1 - g.mean, r2 - g.mean)
        s_gme = llr_binary(extract(ext, None, r1), extract(ext, None, r2))
        worst = max(worst, abs(s_gme - s_plda) / (1 + abs(s_plda)))
    ok = acceptance(1, "PLDA/GME sanity equivalence", worst < 1e-8,
                    f"max scaled diff {worst:.2e} < 1e-8", time.perf_counter() - t0, 5)
    assert ok


# 2 -----------------------------------------------------------------------------

_PARTITIONS_OF_3 = [
    Partition.of([0, 1, 2]),
    Partition.of([0], [1, 2]),
    Partition.of([1], [0, 2]),
    Partition.of([2], [0, 1]),
    Partition.of([0], [1], [2]),
]


def test_quadrature_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(201)
    worst = {}
    for d, tol in ((1, 1e-6), (2, 1e-5)):
        w = 0.0
        for _ in range(100):
            f = random_gme(rng, d)
            w = max(w, _rel(log_expectation(f), oracle_log_expectation(f)) / tol)
        for _ in range(20):
            gmes = [random_gme(rng, d) for _ in range(3)]
            i, j = rng.choice(len(_PARTITIONS_OF_3), size=2, replace=False)
            A, B = _PARTITIONS_OF_3[i], _PARTITIONS_OF_3[j]
            w = max(w, _rel(llr_partition(gmes, A, B), oracle_llr_partition(gmes, A, B)) / tol)
        worst[d] = w
    passed = all(v < 1 for v in worst.values())
    ok = acceptance(2, "closed forms vs quadrature", passed,
                    f"worst error / tolerance: d=1 {worst[1]:.2e}, d=2 {worst[2]:.2e}",
                    time.perf_counter() - t0, 60)
    assert ok


# 3 -----------------------------------------------------------------------------


def _posterior_tv(model, r, grid):
    """Total variation between the exact and the Gaussian posterior of z on a grid."""
    Z = np.stack(np.meshgrid(grid, grid, indexing="ij"), -1).reshape(-1, 2)
    prior = -0.5 * np.sum(Z * Z, axis=1)
    delta = (r - model.mean)[None, :] - Z @ model.F.T
    q = np.einsum("ij,jk,ik->i", delta, model.W, delta)
    exact = prior - 0.5 * (model.nu + model.D) * np.log1p(q / model.nu)
    f = extract(model, None, r)
    approx = prior + Z @ f.a - 0.5 * np.einsum("ij,jk,ik->i", Z, f.B, Z)
    p = np.exp(exact - logsumexp(exact))
    g = np.exp(approx - logsumexp(approx))
    return 0.5 * float(np.sum(np.abs(p - g)))


def test_gaussian_approximation_quality(acceptance):
    t0 = time.perf_counter()
    model = random_model(20, 2, 2.0, seed=3)
    inputs = sample(model, 20, 1, seed=4).vectors
    grid = np.linspace(-12, 12, 801)
    tvs = np.array([_posterior_tv(model, r, grid) for r in inputs])
    passed = bool(np.all(tvs < 0.02))
    ok = acceptance(3, "Gaussian posterior approximation", passed,
                    f"max TV {tvs.max():.4f}, median {np.median(tvs):.4f}, "
                    f"{int(np.sum(tvs >= 0.02))}/20 inputs at or above 0.02",
                    time.perf_counter() - t0, 60)
    assert ok


# 4 -----------------------------------------------------------------------------


def test_structural_identities(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(401)
    gf, z_inv, mono, paths = 0.0, 0.0, True, 0.0
    for seed in range(5):
        m = random_model(30, 6, 2.0, seed=400 + seed)
        dv = m.derived
        gf = max(gf, float(np.max(np.abs(dv.G @ m.F))))
        eta = rng.standard_normal(30)
        base = ancillary_stat(m, dv, eta)
        for _ in range(10):
            z_inv = max(z_inv, abs(ancillary_stat(m, dv, eta + m.F @ rng.standard_normal(6)) - base) / base)
        qs = [precision_scale(m, dv, t * eta) for t in np.linspace(0, 10, 200)]
        mono &= bool(np.all(np.diff(qs) < 0))
        for _ in range(20):
            f = extract(m, dv, rng.standard_normal(30))
            g = extract(m, dv, rng.standard_normal(30))
            paths = max(paths, abs(llr_binary(f, g) - llr_binary(f.densify(), g.densify())))
    passed = gf < 1e-8 and z_inv < 1e-6 and mono and paths < 1e-9
    ok = acceptance(4, "structural identities", passed,
                    f"|GF|max {gf:.1e}, r'Gr z-drift {z_inv:.1e}, b monotone {mono}, "
                    f"dense/scaled {paths:.1e}", time.perf_counter() - t0, 10)
    assert ok


# 5 -----------------------------------------------------------------------------


def test_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    model = random_model(10, 3, 2.0, seed=501)
    data = sample(model, 4, 3, seed=502)
    rng = np.random.default_rng(503)
    worst = 0.0
    for _ in range(5):
        batch = sample_minibatch(data, TrainConfig(batch_side=8), rng)
        base = TrainableParams.from_model(model)
        x0 = base.flat() + 0.1 * rng.standard_normal(base.flat().shape)
        params = base.unflat(x0)
        _, grad = grad_bxe(params, 2.0, batch)
        fd = np.empty_like(x0)
        for i in range(x0.size):
            e = np.zeros_like(x0)
            e[i] = 1e-5
            fd[i] = (bxe_objective(base.unflat(x0 + e), 2.0, batch)
                     - bxe_objective(base.unflat(x0 - e), 2.0, batch)) / 2e-5
        worst = max(worst, float(np.max(np.abs(grad.flat() - fd)) / np.max(np.abs(fd))))
    ok = acceptance(5, "BXE gradient vs finite differences", worst < 1e-4,
                    f"max relative error {worst:.1e} < 1e-4", time.perf_counter() - t0, 30)
    assert ok


# 6 -----------------------------------------------------------------------------


def test_em_sanity(acceptance):
    t0 = time.perf_counter()
    truth = random_model(20, 5, GAUSSIAN, seed=601)
    data = sample(truth, 500, 10, seed=602)
    model, ll = em_train(data, 5, n_iters=20, seed=0)
    ll = np.asarray(ll)
    monotone = bool(np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:])))
    want = np.sort(np.linalg.eigvalsh(truth.F.T @ truth.W @ truth.F))
    got = np.sort(np.linalg.eigvalsh(model.F.T @ model.W @ model.F))
    rel = float(np.max(np.abs(got - want) / want))
    ok = acceptance(6, "EM monotone and recovers the speaker spectrum", monotone and rel < 0.15,
                    f"monotone {monotone}, worst eigenvalue error {100 * rel:.1f}% < 15%",
                    time.perf_counter() - t0, 120)
    assert ok


# 7 -----------------------------------------------------------------------------


def _eer_of(model, data, trials):
    scores = score_trials(model, data, trials).scores
    return eer(*split_scores(scores, trials.labels))


@pytest.mark.slow
def test_directional_benchmark(acceptance):
    t0 = time.perf_counter()
    # high-SNR speaker spectrum, typical of i-vector PLDA backends
    truth = random_model(50, 10, 2.0, seed=0, bbar_eigvals=np.linspace(20, 5, 10))
    train = sample(truth, 1000, 10, seed=1)
    evaluation = sample(truth, 200, 10, seed=2, prefix="eval")
    trials = make_trials(evaluation, 1)
    gplda, _ = em_train(train, 10, n_iters=20, seed=0)
    init = init_gme(gplda, 2.0)
    eer_plda = _eer_of(init_gme(gplda, GAUSSIAN), evaluation, trials)
    eer_init = _eer_of(init, evaluation, trials)
    cfg = TrainConfig(batch_side=500, learning_rate=1e-3, momentum=0.9, max_epochs=50, patience=5, seed=0)
    trained, history = sgd_train(init, train, cfg)
    eer_trained = _eer_of(trained, evaluation, trials)
    cv_init = history[0]["cv_bxe"]
    cv_best = min(h["cv_bxe"] for h in history)
    passed = eer_init < eer_plda and cv_best < cv_init and eer_trained <= eer_init + 0.2
    ok = acceptance(7, "directional synthetic benchmark", passed,
                    f"EER gplda {eer_plda:.2f} > gme {eer_init:.2f}, retrained {eer_trained:.2f}; "
                    f"CV BXE {cv_init:.4f} -> {cv_best:.4f} in {len(history) - 1} epochs",
                    time.perf_counter() - t0, 600)
    assert ok


# 8 -----------------------------------------------------------------------------


def test_metric_correctness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(801)
    worst = 0.0
    invariant = True
    for _ in range(50):
        tar, non = quarter_step_scores(rng)
        worst = max(worst, abs(eer(tar, non) - brute_force_eer(tar, non)) / 100)
        for p in (0.01, 0.005):
            worst = max(worst, abs(min_dcf(tar, non, p) - brute_force_dcf(tar, non, p)))
        for tf in (lambda x: 2.5 * x + 1, lambda x: np.tanh(0.2 * x) * 3 - 1):
            invariant &= abs(eer(tf(tar), tf(non)) - eer(tar, non)) < 1e-9
            invariant &= abs(min_dcf(tf(tar), tf(non), 0.01) - min_dcf(tar, non, 0.01)) < 1e-9
    ok = acceptance(8, "EER and minDCF vs brute force", worst < 1e-9 and invariant,
                    f"max deviation {worst:.1e}, monotone invariance {invariant}",
                    time.perf_counter() - t0, 10)
    assert ok


# 9 -----------------------------------------------------------------------------


def test_multi_enroll(acceptance):
    t0 = time.perf_counter()
    model = random_model(6, 1, 2.0, seed=901)
    data = sample(model, 5, 3, seed=902)
    idx = data.index_of()
    u = data.utt_ids
    worst = 0.0
    for enroll, test in ((u[0:2], u[2]), (u[3:5], u[10]), (u[6:8], u[8])):
        ts = TrialSet({"m": list(enroll)}, [("m", test, None)])
        got = score_trials(model, data, ts, "pool_gme").scores[0]
        gmes = [extract(model, None, data.vectors[idx[x]]) for x in (*enroll, test)]
        want = oracle_llr_partition(gmes, Partition.of([0, 1, 2]), Partition.of([0, 1], [2]))
        worst = max(worst, _rel(got, want))
    single = make_trials(data, 1)
    a = score_trials(model, data, single, "average_vectors").scores
    b = score_trials(model, data, single, "pool_gme").scores
    modes = float(np.max(np.abs(a - b)))
    ok = acceptance(9, "multi-enrollment scoring", worst < 1e-6 and modes < 1e-10,
                    f"pool vs quadrature {worst:.1e} < 1e-6, modes differ by {modes:.1e}",
                    time.perf_counter() - t0, 10)
    assert ok
