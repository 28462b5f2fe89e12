"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``acceptance N: PASS|FAIL ...`` line (visible even
without ``-s``) and then asserts. The ablation runs are cached per module.
"""
import math
import time

import numpy as np
import pytest

from contaqa import numerics as nx
from contaqa.agsg import init_asg
from contaqa.checkpoint import load_checkpoint, save_checkpoint
from contaqa.data import FeatureClip, TaskDataset, stack_clips
from contaqa.fscar import HelperSet, fs_augment, group_bounds, grouping_sample, herding_sample
from contaqa.metrics import (
    PerformanceMatrix,
    average_performance,
    maximum_forgetting,
    negative_backward_transfer,
    pairwise_accuracy,
    srcc,
)
from contaqa.synthbench import VARIANT_ORDER, default_suite, generate_suite, run_ablation, variant_config
from contaqa.training import (
    ContinualTrainer,
    TrainerConfig,
    build_performance_matrix,
    feature_distill_loss,
    naive_distill_loss,
    total_loss,
)

GRAD_TOL = 1e-4
AFFINE_TOL = 1e-9
SRCC_TOL = 1e-12
STEP_TOL = -0.01
MIN_GAP = 0.10
ABLATION_BUDGET_S = 600.0
GRAD_BUDGET_S = 30.0


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


# 1 --------------------------------------------------------------------------


def _tiny_task(task, rng, n=6, T=2, J=2, D=2):
    clips = [FeatureClip(rng.normal(size=(T, D)), rng.normal(size=(T, J, D)), 10.0 * task + 10 * rng.random(),
                         task, index=i) for i in range(n)]
    return TaskDataset(task, clips[:4], clips[4:], (10.0 * task, 10.0 * task + 10))


def _objective(tr, rng):
    """Random inputs for the full continual loss on task 2 with task 1 in memory."""
    cw, cp, _ = stack_clips([FeatureClip(rng.normal(size=(2, 2)), rng.normal(size=(2, 2, 2)), 0.0, 2)
                             for _ in range(2)])
    pw, pp, _ = stack_clips([FeatureClip(rng.normal(size=(2, 2)), rng.normal(size=(2, 2, 2)), 0.0, 1)
                             for _ in range(2)])
    snap_cur = rng.normal(size=(2, 3))
    snap_pre = rng.normal(size=(2, 3))
    snap_own = rng.normal(size=(2, 3))
    helpers = HelperSet(rng.normal(size=(2, 3)), rng.normal(size=2))
    augs = [fs_augment(snap_pre[i], 0.5, helpers, 0.3, rng=rng) for i in range(2)]
    f_aug = np.stack([a[0] for a in augs])
    d = np.array([a[1] - 0.5 for a in augs])
    y_cur, y_pre = rng.normal(size=2), rng.normal(size=2)
    lam_fd, lam_diff = rng.uniform(0.1, 2.0, size=2)

    def fn(inp, p):
        f_cur = tr.extractor(cw, cp, 2)
        f_pre = tr.extractor(pw, pp, 1)
        l_aqa = nx.scale(nx.add(nx.sq_error(tr.rs(f_cur), y_cur), nx.sq_error(tr.rs(f_pre), y_pre)), 0.25)
        l_fd = nx.add(feature_distill_loss([tr.extractor(cw, cp, 1)], [snap_cur]),
                      naive_distill_loss(f_cur, snap_own))
        l_diff = nx.mse(tr.rd(nx.concat([nx.Tensor(f_aug), f_pre], axis=-1)), d)
        return total_loss(l_aqa, l_fd, l_diff, lam_fd, lam_diff, base_step=False)
    return fn


def test_gradient_fidelity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    tr = ContinualTrainer(2, 2, TrainerConfig(feature_dim=3, hidden=3, batch_size=2, memory=4,
                                              n_helpers=2, iterations=0))
    tr.train_task(_tiny_task(1, rng))
    init_asg(tr.graphs, 2, base_step=False)
    base = tr.params.arrays()
    worst, points, rejected = 0.0, 0, 0
    while points < 100:
        for name in tr.params:
            tr.params[name].data = base[name] + 0.5 * rng.normal(size=base[name].shape)
        fn = _objective(tr, rng)
        with nx.relu_margin() as margins:
            _, grads = nx.forward_backward(fn, {}, tr.params)
        if min(margins) < 1e-3:
            rejected += 1
            continue
        fd = nx.finite_diff_gradient(fn, {}, tr.params, h=1e-5)
        worst = max(worst, max(float(rel_err(grads[k], fd[k]).max()) for k in grads))
        points += 1
    elapsed = time.perf_counter() - start
    ok = worst < GRAD_TOL and elapsed < GRAD_BUDGET_S
    report(1, ok, f"max rel err {worst:.2e} over {points} points ({rejected} near kinks redrawn, "
                  f"{tr.params.n_values()} params), {elapsed:.1f}s")
    assert worst < GRAD_TOL
    assert elapsed < GRAD_BUDGET_S


# 2 --------------------------------------------------------------------------


def test_fs_aug_affine_consistency(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        dim, k = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        w, b = rng.normal(size=dim), rng.normal()
        feats = rng.normal(size=(k + 1, dim)) * rng.uniform(0.1, 5.0)
        scores = feats @ w + b
        f, s, _ = fs_augment(feats[0], scores[0], HelperSet(feats[1:], scores[1:]), rng.uniform(0, 1), rng=rng)
        worst = max(worst, abs(s - (f @ w + b)))
    ok = worst < AFFINE_TOL
    report(2, ok, f"max |s - (w.f + b)| = {worst:.2e} over 1000 augmentations")
    assert ok


# 3 --------------------------------------------------------------------------


def _coverage(scores, picks):
    sel = scores[picks]
    return (sel.max() - sel.min()) / (scores.max() - scores.min())


def test_grouping_covers_all_score_levels(report):
    rng = np.random.default_rng(11)
    every_group = always_max = True
    cov_group, cov_herd = [], []
    for _ in range(200):
        n, m = int(rng.integers(40, 201)), int(rng.integers(3, 31))
        scores = rng.uniform(0, 100, n)
        if rng.random() < 0.3:
            scores = np.round(scores / 10.0)  # heavy ties
        direction = rng.normal(size=16)
        feats = np.outer(scores, direction) / 50.0 + rng.normal(size=(n, 16))
        picks = grouping_sample(scores, m)
        rank = np.empty(n, dtype=int)
        rank[np.argsort(scores, kind="stable")] = np.arange(n)
        groups = {next(g for g, (lo, hi) in enumerate(group_bounds(n, m)) if lo <= rank[p] < hi) for p in picks}
        every_group &= groups == set(range(m))
        always_max &= scores[picks].max() == scores.max()
        cov_group.append(_coverage(scores, picks))
        cov_herd.append(_coverage(scores, herding_sample(feats, m)))
    g, h = float(np.mean(cov_group)), float(np.mean(cov_herd))
    ok = every_group and always_max and h < g
    report(3, ok, f"all groups hit: {every_group}, max kept: {always_max}, "
                  f"mean range coverage grouping {g:.3f} vs herding {h:.3f}")
    assert every_group and always_max
    assert h < g


# 4 --------------------------------------------------------------------------


def _avg_ranks(xs):
    return [1 + sum(y < x for y in xs) + (sum(y == x for y in xs) - 1) / 2 for x in xs]


def oracle_srcc(p, t):
    rp, rt = _avg_ranks(list(p)), _avg_ranks(list(t))
    n = len(rp)
    mp, mt = math.fsum(rp) / n, math.fsum(rt) / n
    num = math.fsum((a - mp) * (b - mt) for a, b in zip(rp, rt))
    den = math.sqrt(math.fsum((a - mp) ** 2 for a in rp) * math.fsum((b - mt) ** 2 for b in rt))
    return num / den


def oracle_pairwise(p, t):
    hits, pairs = 0.0, 0
    for i in range(len(p)):
        for j in range(i + 1, len(p)):
            dp, dt = p[i] - p[j], t[i] - t[j]
            if (dp > 0 and dt > 0) or (dp < 0 and dt < 0) or (dp == 0 and dt == 0):
                hits += 1.0
            elif dp == 0 or dt == 0:
                hits += 0.5
            pairs += 1
    return hits / pairs


def oracle_ap(P):
    T = len(P)
    total = 0.0
    for j in range(T):
        total += P[T - 1][j]
    return total / T


def oracle_nbt(P):
    T = len(P)
    total = 0.0
    for t in range(T - 1):
        drop = P[t][t] - P[T - 1][t]
        total += drop if drop > 0 else 0.0
    return total / (T - 1)


def oracle_mf(P):
    T = len(P)
    total = 0.0
    for t in range(T - 1):
        best = P[t][t]
        worst = P[t + 1][t]
        for i in range(t, T):
            best = P[i][t] if P[i][t] > best else best
        for i in range(t + 1, T):
            worst = P[i][t] if P[i][t] < worst else worst
        total += best - worst
    return total / (T - 1)


def test_metrics_match_brute_force(report):
    rng = np.random.default_rng(13)
    srcc_err, exact = 0.0, True
    done = 0
    while done < 1000:
        n = int(rng.integers(2, 25))
        if rng.random() < 0.5:
            p, t = rng.integers(0, 6, n).astype(float), rng.integers(0, 6, n).astype(float)
        else:
            p, t = rng.normal(size=n), rng.normal(size=n)
        T = int(rng.integers(2, 8))
        P = np.tril(rng.uniform(-1, 1, (T, T)))
        M = PerformanceMatrix(T, values=np.where(np.tril(np.ones((T, T))) > 0, P, np.nan))
        rows = P.tolist()
        exact &= pairwise_accuracy(p, t) == oracle_pairwise(p, t)
        exact &= average_performance(M) == oracle_ap(rows)
        exact &= negative_backward_transfer(M) == oracle_nbt(rows)
        exact &= maximum_forgetting(M) == oracle_mf(rows)
        if len(set(p)) > 1 and len(set(t)) > 1:
            srcc_err = max(srcc_err, abs(srcc(p, t) - oracle_srcc(p, t)))
        done += 1
    worked_srcc = abs(srcc([1, 2, 3], [1, 3, 2]) - 0.5)
    nbt_example = PerformanceMatrix(2, values=np.array([[0.9, np.nan], [0.6, 0.8]]))
    worked_nbt = abs(negative_backward_transfer(nbt_example) - 0.3)
    ok = exact and srcc_err <= SRCC_TOL and worked_srcc <= SRCC_TOL and worked_nbt <= 1e-12
    report(4, ok, f"1000 inputs; exact metrics agree: {exact}, max srcc err {srcc_err:.1e}, "
                  f"worked examples off by {worked_srcc:.1e} / {worked_nbt:.1e}")
    assert exact
    assert srcc_err <= SRCC_TOL
    assert worked_srcc <= SRCC_TOL and worked_nbt <= 1e-12


# 5, 6 -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def suite():
    return default_suite()


@pytest.fixture(scope="module")
def sequences(suite):
    return generate_suite(suite)


@pytest.fixture(scope="module")
def ablation(suite, sequences):
    start = time.perf_counter()
    results = {v: run_ablation(suite, v, sequences=sequences) for v in VARIANT_ORDER}
    return results, time.perf_counter() - start


def test_ablation_trend(report, ablation):
    results, elapsed = ablation
    ap = {v: r.summary["AP"] for v, r in results.items()}
    nbt = {v: r.summary["NBT"] for v, r in results.items()}
    steps = [(lo, hi, ap[hi] - ap[lo]) for lo, hi in zip(VARIANT_ORDER, VARIANT_ORDER[1:])]
    ordered = all(d >= STEP_TOL for _, _, d in steps)
    gap = ap["full"] - ap["finetune"]
    ok = ordered and gap >= MIN_GAP and nbt["full"] < nbt["finetune"] and elapsed < ABLATION_BUDGET_S
    table = " ".join(f"{v}={ap[v]:.3f}" for v in VARIANT_ORDER)
    report(5, ok, f"AP {table}; gap {gap:.3f}; NBT full {nbt['full']:.3f} vs finetune "
                  f"{nbt['finetune']:.3f}; {elapsed:.0f}s")
    for lo, hi, d in steps:
        assert d >= STEP_TOL, f"AP({hi}) - AP({lo}) = {d:.4f}"
    assert gap >= MIN_GAP
    assert nbt["full"] < nbt["finetune"]
    assert elapsed < ABLATION_BUDGET_S


def test_memory_size_monotone(report, suite, sequences, ablation):
    results, _ = ablation
    ap = {30: results["full"].summary["AP"]}
    for m in (15, 60):
        ap[m] = run_ablation(suite, "full", TrainerConfig(memory=m), sequences=sequences).summary["AP"]
    ok = ap[60] - ap[30] >= STEP_TOL and ap[30] - ap[15] >= STEP_TOL
    report(6, ok, f"AP M=15 {ap[15]:.4f}, M=30 {ap[30]:.4f}, M=60 {ap[60]:.4f}")
    assert ap[60] - ap[30] >= STEP_TOL
    assert ap[30] - ap[15] >= STEP_TOL


# 7 --------------------------------------------------------------------------


def test_determinism_and_checkpoint_resume(report, suite, sequences, ablation, tmp_path):
    results, _ = ablation
    reference = results["full"].matrices
    same = True
    for seed in (0, 1):
        trainer = ContinualTrainer(suite.n_joints, suite.dim, variant_config("full", order_seed=seed))
        P = build_performance_matrix(trainer, sequences[seed])
        same &= P.values.tobytes() == reference[seed].values.tobytes()

    seq = sequences[2]
    trainer = ContinualTrainer(suite.n_joints, suite.dim, variant_config("full", order_seed=2))
    P = PerformanceMatrix(len(seq), task_ids=[d.task_id for d in seq])
    build_performance_matrix(trainer, seq[:2], matrix=P)
    save_checkpoint(tmp_path / "mid.ckpt", trainer, arrays={"matrix": P.values})
    restored, _, arrays = load_checkpoint(tmp_path / "mid.ckpt")
    P2 = PerformanceMatrix(len(seq), values=arrays["matrix"], task_ids=P.task_ids)
    build_performance_matrix(restored, seq, start_stage=2, matrix=P2)
    resumed = P2.values.tobytes() == reference[2].values.tobytes()
    ok = same and resumed
    report(7, ok, f"rerun bit-identical: {same}, resume after stage 2 bit-identical: {resumed}")
    assert same
    assert resumed


# 8 --------------------------------------------------------------------------


def _trajectory(config, suite, seq):
    trainer = ContinualTrainer(suite.n_joints, suite.dim, config)
    sums = []
    for ds in seq:
        trainer.train_task(ds, on_step=lambda tr: sums.append(tr.params.checksum()))
    return sums


@pytest.mark.parametrize("fd_mode", ["naive", "agsg"])
def test_finetune_reduces_to_plain_trainer(report, suite, sequences, fd_mode):
    seq = sequences[1]
    finetune = _trajectory(variant_config("finetune", order_seed=1), suite, seq)
    plain = _trajectory(TrainerConfig(lambda_fd=0.0, lambda_diff=0.0, use_memory=False, use_diff=False,
                                      use_asg=False, fd_mode=fd_mode, seed=1), suite, seq)
    first_diff = next((i for i, (a, b) in enumerate(zip(finetune, plain)) if a != b), None)
    ok = len(finetune) == len(plain) > 0 and first_diff is None
    report(8, ok, f"fd_mode={fd_mode}: {len(finetune)} steps, "
                  f"{'all parameter checksums equal' if first_diff is None else f'diverges at step {first_diff}'}")
    assert len(finetune) == len(plain) > 0
    assert first_diff is None
