"""One test per acceptance criterion. Each prints a single PASS/FAIL line,
which is also collected into the terminal summary."""
import csv
import io
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit, softmax

from lsic import pipeline as P
from lsic.adversarial import compress, d_hinge, g_sample, normalize_rewards, reinforce_logit_grad, reward_from_compressed
from lsic.cli import main
from lsic.config import RunConfig
from lsic.evaluation import full_ranking, ranked_lists
from lsic.metrics import (METRIC_NAMES, RankedList, build_report, mean_average_precision, mean_reciprocal_rank,
                          ndcg_at_n, precision_at_n)
from lsic.mf import mf_objective
from lsic.mixture import build_scorer
from lsic.nn import ParamTensor, finite_diff_check, zero_grads
from lsic.rnn import bptt_backward, encode_trajectory
from lsic.synthetic import content_world, planted_world

import oracles
from conftest import ACCEPTANCE_LINES, random_inputs, toy_factors
from test_rnn import encoder_params, make_encoder

ML100K = Path(os.environ.get("LSIC_ML100K", Path(__file__).resolve().parents[1] / "data/ml-100k/u.data"))
needs_ml100k = pytest.mark.skipif(not ML100K.is_file(), reason="MovieLens-100K u.data not found")


def verdict(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------------------

def test_criterion_1_metric_oracle_equivalence():
    start = time.perf_counter()
    cases = mismatches = 0
    for flags, total in oracles.all_lists(max_len=6, max_relevant=3):
        movies = list(range(len(flags)))
        relevant = {m for m, f in zip(movies, flags) if f} | {100 + k for k in range(total - sum(flags))}
        rl = RankedList(0, movies, relevant)
        for n in range(1, 11):
            cases += 1
            mismatches += precision_at_n(rl, n) != oracles.precision(flags, n)
            mismatches += ndcg_at_n(rl, n) != oracles.ndcg(flags, n, total)
        mismatches += mean_reciprocal_rank(rl) != oracles.mrr(flags)
        mismatches += mean_average_precision(rl) != oracles.average_precision(flags, total)
    elapsed = time.perf_counter() - start
    verdict(1, mismatches == 0 and elapsed < 10,
            f"{cases} (list, N) cases, {mismatches} mismatches, {elapsed:.2f}s")


# 2 ---------------------------------------------------------------------------------------

def lstm_bptt_error():
    T, U, H = 5, 3, 4
    enc = make_encoder(H=H, D=3, F=3, num_counterparts=5, seed=11)
    inputs = random_inputs(U, 5, T, seed=12)
    rng = np.random.default_rng(13)
    content = rng.normal(size=(U, 3))
    weights = rng.normal(size=(T + 1, H))
    params = encoder_params(enc)

    def f():
        zero_grads(params)
        traj = encode_trajectory(enc, inputs.user, 2, content=content)
        loss = sum(float(weights[t] @ traj.state(t)[0]) for t in range(T + 1))
        bptt_backward(enc, traj, {t: weights[t] for t in range(T + 1)})
        return loss, {k: p.grad.copy() for k, p in params.items()}

    return finite_diff_check(f, params)


def mf_loss_error():
    rng = np.random.default_rng(21)
    users, movies = rng.integers(0, 5, 20), rng.integers(0, 6, 20)
    targets = rng.uniform(0.1, 0.9, 20)
    p = {"user_factors": ParamTensor("user_factors", rng.normal(0, 0.5, (5, 3))),
         "movie_factors": ParamTensor("movie_factors", rng.normal(0, 0.5, (6, 3)))}

    def f():
        return mf_objective(p["user_factors"].values, p["movie_factors"].values, users, movies, targets, 0.05)

    return finite_diff_check(f, p)


def v4_composite_error():
    U, M, T = 3, 4, 5
    sc = build_scorer("v4", toy_factors(U, M, 3, seed=31), seed=32, hidden=4, input_dim=3, attention_hidden=3,
                      content_dim=2, init_range=0.5)
    rng = np.random.default_rng(33)
    content = rng.normal(size=(M, 2))
    inputs = random_inputs(U, M, T, seed=34)
    n = 8
    users, movies, times = rng.integers(0, U, n), rng.integers(0, M, n), rng.integers(0, T + 1, n)
    weights = rng.normal(size=n)

    def f():
        zero_grads(sc.params)
        s, batch = sc.forward_pairs(users, movies, times, inputs, content)
        sc.backward(batch, weights.copy())
        return float(weights @ s), {k: p.grad.copy() for k, p in sc.params.items()}

    return finite_diff_check(f, sc.params)


def test_criterion_2_gradient_fidelity():
    start = time.perf_counter()
    errors = {"lstm_bptt": lstm_bptt_error(), "mf_loss": mf_loss_error(), "v4_composite": v4_composite_error()}
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 30
    verdict(2, ok, ", ".join(f"{k} {v:.2e}" for k, v in errors.items()) + f", {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------------------

def logit_jacobian(sc, u, t, inputs):
    """d logits / d params for one user over every movie, one row per movie."""
    rows = []
    for m in range(sc.num_movies):
        S, batch = sc.forward_matrix([u], [t], np.arange(sc.num_movies), inputs, keep_cache=True)
        zero_grads(sc.params)
        sc.backward(batch, np.eye(sc.num_movies)[m][None, :])
        rows.append(np.concatenate([p.grad.ravel() for p in sc.params.values()]))
    return S[0], np.array(rows)


def param_gradient(sc, u, t, inputs, logit_grad):
    S, batch = sc.forward_matrix([u], [t], np.arange(sc.num_movies), inputs, keep_cache=True)
    zero_grads(sc.params)
    sc.backward(batch, logit_grad[None, :])
    return np.concatenate([p.grad.ravel() for p in sc.params.values()])


def test_criterion_3_reinforce_unbiased():
    start = time.perf_counter()
    M, u, t = 8, 0, 2
    inputs = random_inputs(2, M, 2, seed=41)
    gen = build_scorer("v4", toy_factors(2, M, 3, seed=42, scale=1.0), seed=43, hidden=4, input_dim=3,
                       attention_hidden=3, init_range=0.5)
    disc = build_scorer("v4", toy_factors(2, M, 3, seed=44, scale=1.0), seed=45, hidden=4, input_dim=3,
                        attention_hidden=3, init_range=0.5)
    # frozen rewards: log of the compressed discriminator hinge against one positive
    d = expit(disc.score_matrix([u], t, np.arange(M), inputs)[0])
    rewards = reward_from_compressed(compress(d_hinge(d[0], d)))
    logits, J = logit_jacobian(gen, u, t, inputs)
    p = softmax(logits)

    exact = J.T @ oracles.enumerate_gradient(logits, rewards)
    draws = 100_000
    idx, _ = g_sample(logits, draws, np.random.default_rng(46))
    estimate = param_gradient(gen, u, t, inputs, reinforce_logit_grad(logits, idx, rewards[idx]))
    # every draw's gradient is one of M vectors, so the per-coordinate spread follows from the counts
    per_movie = rewards[:, None] * (J - p @ J)
    freq = np.bincount(idx, minlength=M) / draws
    var = freq @ per_movie ** 2 - (freq @ per_movie) ** 2
    se = np.sqrt(np.maximum(var, 0.0) / draws)
    live = se > 0
    z = np.abs(estimate - exact)[live] / se[live]
    dead_ok = np.allclose(estimate[~live], exact[~live], atol=1e-12)
    elapsed = time.perf_counter() - start
    ok = bool(np.all(z < 3.0)) and dead_ok and elapsed < 60
    verdict(3, ok, f"{live.sum()} coordinates, max |error|/SE {z.max():.2f}, {draws} draws, {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------------------

def test_criterion_4_reward_normalization():
    a = normalize_rewards([1.0, 2.0, 3.0])
    b = normalize_rewards([2.5, 2.5, 2.5, 2.5])
    c = normalize_rewards([7.0])
    ok = (np.allclose(a, [-1.2247, 0.0, 1.2247], atol=1e-4) and not np.any(b) and len(b) == 4
          and c.tolist() == [0.0])
    verdict(4, ok, f"[1,2,3] -> {np.round(a, 4).tolist()}, constant -> {b.tolist()}, single -> {c.tolist()}")


# 5 ---------------------------------------------------------------------------------------

PLANTED_GAN = dict(mf_epochs=30, pretrain_epochs=1, pretrain_learning_rate=0.05, d_pretrain_epochs=60,
                   gan_epochs=50, learning_rate=0.01, g_steps=5)


def slope(values):
    return float(np.polyfit(np.arange(len(values)), values, 1)[0])


def test_criterion_5_synthetic_adversarial_improvement(tmp_path):
    start = time.perf_counter()
    w = planted_world(0)
    path = w.write(tmp_path / "world")[0]
    cfg = RunConfig(data_path=str(path), train_end=str(w.train_end), out_dir=str(tmp_path / "run"), **PLANTED_GAN)
    P.train(cfg)
    rows = list(csv.DictReader(open(tmp_path / "run" / P.CURVE_CSV)))
    elapsed = time.perf_counter() - start
    p5 = np.array([float(r["precision_at_5"]) for r in rows])
    acc = np.array([float(r["d_accuracy"]) for r in rows[1:]])
    early, late = acc[:10].mean(), acc[-10:].mean()
    ok = (len(rows) == 51 and p5[-1] > p5[0] and slope(p5) > 0 and slope(acc) < 0
          and abs(late - 0.5) < abs(early - 0.5) and elapsed < 300)
    verdict(5, ok, f"P@5 {p5[0]:.3f} -> {p5[-1]:.3f} (slope {slope(p5):+.4f}/epoch), "
                   f"D accuracy {early:.3f} -> {late:.3f} (slope {slope(acc):+.4f}/epoch), {elapsed:.0f}s")


# 6 ---------------------------------------------------------------------------------------

@needs_ml100k
def test_criterion_6_movielens_100k_beats_mf(tmp_path):
    gains, detail, slowest = [], [], 0.0
    for seed in (0, 1, 2):
        start = time.perf_counter()
        out = tmp_path / f"seed{seed}"
        assert main(["ingest", "--set", f"data_path={ML100K}", "--seed", str(seed), "--out-dir", str(out)]) == 0
        assert main(["train", "--set", f"data_path={ML100K}", "--seed", str(seed), "--out-dir", str(out)]) == 0
        assert main(["evaluate", "--set", f"data_path={ML100K}", "--seed", str(seed), "--out-dir", str(out)]) == 0
        slowest = max(slowest, time.perf_counter() - start)
        mf, mix = list(csv.DictReader(open(out / "metrics_test.csv")))
        assert mf["user_count"] == mix["user_count"]
        a, b = float(mf["ndcg_at_5"]), float(mix["ndcg_at_5"])
        gains.append(b / a - 1.0)
        detail.append(f"seed {seed} MF {a:.4f} V4 {b:.4f}")
    median = statistics.median(gains)
    verdict(6, median >= 0.03 and slowest < 1800,
            f"median relative NDCG@5 gain {median:+.1%} ({'; '.join(detail)}), slowest run {slowest / 60:.1f} min")


# 7 ---------------------------------------------------------------------------------------

CONTENT_RUN = ["--mixture", "v2", "--set", "mf_epochs=0", "--set", "init_range=0.5", "--set", "l2_lambda=0",
               "--set", "pretrain_learning_rate=0.1", "--set", "pretrain_epochs=40", "--set", "gan_epochs=3",
               "--set", "candidate_n=300"]


def test_criterion_7_content_ablation(tmp_path):
    w = content_world(0)
    ratings, features, _ = w.write(tmp_path / "world")
    args = ["--set", f"data_path={ratings}", "--set", f"content_path={features}",
            "--set", f"train_end={w.train_end}", "--out-dir", str(tmp_path / "run")] + CONTENT_RUN
    assert main(["train"] + args) == 0
    assert main(["evaluate"] + args) == 0
    assert main(["evaluate", "--no-content"] + args) == 0
    _, with_content = list(csv.DictReader(open(tmp_path / "run" / "metrics_test.csv")))
    _, without = list(csv.DictReader(open(tmp_path / "run" / "metrics_test_no_content.csv")))
    a, b = float(with_content["ndcg_at_5"]), float(without["ndcg_at_5"])
    verdict(7, b < a, f"NDCG@5 with content {a:.4f}, --no-content {b:.4f}")


# 8 ---------------------------------------------------------------------------------------

def test_criterion_8_determinism_and_resume(tmp_path):
    w = planted_world(1)
    path = w.write(tmp_path / "world")[0]
    base = ["--set", f"data_path={path}", "--set", f"train_end={w.train_end}", "--set", "gan_epochs=6",
            "--set", "d_pretrain_epochs=5", "--set", "learning_rate=0.01", "--seed", "7"]
    files = ("metrics_test.csv", "metrics_test_per_user.csv", P.CURVE_CSV, P.MODEL_CKPT)

    def run(name, *train_extra):
        out = ["--out-dir", str(tmp_path / name)]
        for extra in train_extra:
            assert main(["train"] + base + out + list(extra)) == 0
        assert main(["evaluate"] + base + out) == 0
        return {f: (tmp_path / name / f).read_bytes() for f in files}

    first = run("a", [])
    second = run("b", [])
    resumed = run("c", ["--stop-after", "3"], ["--resume"])
    same = [f for f in files if first[f] == second[f]]
    same_resume = [f for f in files if first[f] == resumed[f]]
    verdict(8, len(same) == len(files) and len(same_resume) == len(files),
            f"identical reruns {len(same)}/{len(files)} files, resume after epoch 3 {len(same_resume)}/{len(files)}")


# 9 ---------------------------------------------------------------------------------------

@needs_ml100k
def test_criterion_9_candidate_sweep(tmp_path):
    cfg = RunConfig(data_path=str(ML100K), out_dir=str(tmp_path), mf_epochs=10, pretrain_epochs=0, gan_epochs=0)
    prep = P.prepare(cfg)
    M = prep.dataset.num_movies
    sizes = [20, 50, 100, 200, 500, M]
    common = ["--set", f"data_path={ML100K}", "--out-dir", str(tmp_path)]
    assert main(["train"] + common + ["--set", "mf_epochs=10", "--set", "pretrain_epochs=0",
                                      "--set", "gan_epochs=0"]) == 0
    sweep_args = common + ["--set", "mf_epochs=10", "--set", "pretrain_epochs=0", "--set", "gan_epochs=0",
                           "--set", "sweep_candidates=" + ",".join(map(str, sizes))]
    assert main(["sweep-candidates"] + sweep_args) == 0
    text = (tmp_path / "sweep_candidates.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    header = text.splitlines()[0].split(",")
    well_formed = (header == ["candidates", "label", *METRIC_NAMES, "user_count", "config_hash"]
                   and [int(r["candidates"]) for r in rows] == [n for n in sizes for _ in (0, 1)]
                   and [r["label"] for r in rows] == ["mf", "v4"] * len(sizes)
                   and len({r["user_count"] for r in rows}) == 1)
    in_range = all(0.0 <= float(r[k]) <= 1.0 for r in rows for k in METRIC_NAMES)

    fs, scorer, _ = P.load_model(cfg, prep)
    reranked = ranked_lists(fs, scorer, prep.test, M, prep.data.inputs, prep.content_matrix)
    direct = full_ranking(scorer, prep.test, prep.data.inputs, prep.content_matrix)
    same_lists = [a.movies for a in reranked] == [b.movies for b in direct]
    full = build_report("v4", direct).means
    last = rows[-1]
    same_metrics = all(last[k] == f"{full[k]:.10f}" for k in METRIC_NAMES)
    verdict(9, well_formed and in_range and same_lists and same_metrics,
            f"{len(rows)} rows well formed {well_formed}, metrics in [0,1] {in_range}, "
            f"N={M} equals full ranking: lists {same_lists}, metrics {same_metrics}")
