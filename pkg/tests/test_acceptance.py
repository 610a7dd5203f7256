"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section at the end
of the pytest report (see conftest.py). The training criteria (5, 6, 7) are
marked ``slow`` but run by default; ``pytest -m "not slow"`` skips them.
"""
import itertools
import json
import math
import time

import numpy as np
import pytest

from sentorder import analysis as A
from sentorder import cli
from sentorder import data as D
from sentorder import decode as DE
from sentorder import model as M
from sentorder import tensor as T
from sentorder import training as TR

import oracles

BEAM = 16


def randomized(config, seed, precision="float64", scale=0.6):
    """Model with all parameters uniform in [-scale, scale], far from ties."""
    params = M.init_params(config, seed, precision)
    rng = np.random.default_rng([seed, 99])
    for name in params.keys():
        params[name] = rng.uniform(-scale, scale, params[name].shape)
    return params


# ---------------------------------------------------------------- 1. gradients

def test_criterion_1_gradient_check(record_criterion):
    vocab = 12
    rng = np.random.default_rng(0)
    docs = [[list(rng.integers(2, vocab, 4)) for _ in range(3)] for _ in range(3)]
    start = time.perf_counter()
    worst, failed = 0.0, []
    for scorer, enc, k in itertools.product(("mlp", "bilinear"), (True, False), (0, 2)):
        cfg = M.ModelConfig(vocab_size=vocab, d_word=8, d_hidden=12, d_mlp=6, read_cycles=3,
                            scorer=scorer, use_encoder=enc, contrastive_k=k)
        params = M.init_params(cfg, 1, "float64")

        def loss(p, cfg=cfg, k=k):
            # contrastive draws must repeat exactly across perturbations
            return M.batch_log_likelihood(p, docs, cfg, np.random.default_rng(5) if k else None).batch_loss()
        # step 1e-3: at 1e-5 the central difference of the smallest entries is rounding noise
        report = T.grad_check(loss, params, step=1e-3, tolerance=1e-4)
        worst = max(worst, report.worst)
        if not report.passed:
            failed.append((scorer, enc, k, report.worst))
    elapsed = time.perf_counter() - start
    record_criterion(1, "full-model grad_check, 8 configurations, 64-bit",
                     not failed and worst < 1e-4 and elapsed < 120,
                     f"worst rel error {worst:.2e} (< 1e-4), {elapsed:.0f}s (< 120s), failures {failed}")


# ---------------------------------------------------------------- 2. set invariance

def test_criterion_2_encoder_set_invariance(record_criterion):
    start = time.perf_counter()
    worst = {"float32": 0.0, "float64": 0.0}
    for trial in range(100):
        rng = np.random.default_rng([2, trial])
        n = int(rng.integers(1, 9))
        cfg = M.ModelConfig(vocab_size=10, d_word=6, d_hidden=16, d_mlp=8,
                            read_cycles=int(rng.integers(1, 6)), scorer=("mlp", "bilinear")[trial % 2])
        memory = rng.normal(size=(n, 16))
        perm = rng.permutation(n)
        for precision in worst:
            params = randomized(cfg, trial, precision)
            mem = memory.astype(precision)
            a = M.encode_set(params, T.Tensor(mem), cfg).state.h.data.astype(np.float64)
            b = M.encode_set(params, T.Tensor(mem[perm]), cfg).state.h.data.astype(np.float64)
            worst[precision] = max(worst[precision], np.linalg.norm(a - b) / np.linalg.norm(a))
    elapsed = time.perf_counter() - start
    record_criterion(2, "encoder final state invariant to memory order, 100 pairs",
                     worst["float32"] <= 1e-5 and worst["float64"] <= 1e-9 and elapsed < 60,
                     f"worst rel diff 32-bit {worst['float32']:.1e} (<= 1e-5), "
                     f"64-bit {worst['float64']:.1e} (<= 1e-9), {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. beam vs exhaustive

def test_criterion_3_beam_matches_exhaustive_search(record_criterion):
    start = time.perf_counter()
    mismatches, max_gap = [], 0.0
    for trial in range(50):
        rng = np.random.default_rng([3, trial])
        n = int(rng.integers(1, 7))
        cfg = M.ModelConfig(vocab_size=15, d_word=5, d_hidden=8, d_mlp=6, read_cycles=2,
                            scorer=("mlp", "bilinear")[trial % 2], use_encoder=bool(trial % 3))
        params = randomized(cfg, trial)
        sents = [list(rng.integers(2, 15, rng.integers(1, 5))) for _ in range(n)]
        res = DE.beam_order(params, sents, math.factorial(n), cfg)
        best, best_score = oracles.brute_force_order(
            lambda o: M.coherence_score(params, sents, o, cfg), n)
        max_gap = max(max_gap, abs(res.score - best_score))
        if res.order != best or abs(res.score - best_score) > 1e-9:
            mismatches.append(trial)
    elapsed = time.perf_counter() - start
    record_criterion(3, "beam with width n! equals brute-force argmax, 50 models, n <= 6",
                     not mismatches and elapsed < 300,
                     f"mismatches {mismatches}, max score gap {max_gap:.1e}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 4. metric oracles

def test_criterion_4_metric_oracles(record_criterion):
    start = time.perf_counter()
    exact = all(DE.kendall_tau(p, list(range(n))) == oracles.kendall_tau(p, list(range(n)))
                and DE.count_inversions(p) == oracles.inversions(p)
                for n in range(2, 7) for p in itertools.permutations(range(n)))
    ident = (DE.positional_accuracy([0, 1, 2, 3], [0, 1, 2, 3]), DE.kendall_tau([0, 1, 2, 3], [0, 1, 2, 3]))
    rev = (DE.positional_accuracy([3, 2, 1, 0], [0, 1, 2, 3]), DE.kendall_tau([3, 2, 1, 0], [0, 1, 2, 3]))
    corpus = D.generate_synthetic(D.SyntheticSpec(n_train=0, n_validation=0, n_test=500, seed=4))
    rep = DE.evaluate(None, corpus.test, predictor=DE.random_predictor, seed=0)
    expected = float(np.mean([1 / len(d) for d in corpus.test]))
    # per-document mean, so every document weighs as in mean(1/n)
    acc_ok = abs(rep.mean_document_accuracy - expected) <= 0.1 * expected
    elapsed = time.perf_counter() - start
    record_criterion(4, "metric oracles and random-predictor baseline",
                     exact and ident == (1.0, 1.0) and rev == (0.0, -1.0) and abs(rep.mean_tau) <= 0.03
                     and acc_ok and elapsed < 60,
                     f"tau exact for n<=6: {exact}; identity {ident}; reversal {rev}; random over "
                     f"{rep.documents} docs: tau {rep.mean_tau:+.4f}, accuracy {rep.mean_document_accuracy:.4f} "
                     f"vs mean 1/n {expected:.4f} (pooled {rep.accuracy:.4f}); {elapsed:.1f}s")


# ---------------------------------------------------------------- 5 + 7. ordinal task

@pytest.fixture(scope="module")
def ordinal_run():
    corpus = D.generate_synthetic(D.SyntheticSpec(kind="ordinal", seed=0))
    cfg = M.ModelConfig(vocab_size=len(corpus.vocab), d_word=32, d_hidden=64, d_mlp=64)
    start = time.perf_counter()
    result = TR.train(corpus.train, corpus.validation, cfg,
                      TR.TrainConfig(lr=2e-3, max_epochs=30, patience=5, seed=0))
    return corpus, cfg, result, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_5_learns_local_ordering(ordinal_run, record_criterion):
    corpus, cfg, result, train_time = ordinal_run
    rep = DE.evaluate(result.params, corpus.test, cfg, beam_width=BEAM)
    record_criterion(5, "ordinal-marker corpus, test accuracy and tau >= 0.95 (beam 16)",
                     rep.accuracy >= 0.95 and rep.mean_tau >= 0.95 and train_time <= 600,
                     f"accuracy {rep.accuracy:.4f}, tau {rep.mean_tau:.4f}, "
                     f"{len(result.log)} epochs in {train_time:.0f}s (<= 600s)")


@pytest.mark.slow
def test_criterion_7_order_discrimination(ordinal_run, record_criterion):
    corpus, cfg, result, _ = ordinal_run
    trained = DE.discrimination_accuracy(result.params, corpus.test, 20, seed=0, config=cfg)
    # the default float32 init scores every order identically: all ties, half credit each
    untrained = DE.discrimination_accuracy(M.init_params(cfg, 0), corpus.test, 20, seed=0, config=cfg)
    # so also check a 64-bit untrained model per document, which does separate the orders
    wins = ties = pairs = 0
    for i, doc in enumerate(corpus.test):
        r = DE.discrimination_accuracy(M.init_params(cfg, 1000 + i, "float64"), [doc], 20, seed=i, config=cfg)
        wins, ties, pairs = wins + r.wins, ties + r.ties, pairs + r.pairs
    fresh = (wins + 0.5 * ties) / pairs
    passed = (trained.accuracy >= 0.99 and 0.45 <= untrained.accuracy <= 0.55 and untrained.pairs >= 1000
              and 0.45 <= fresh <= 0.55)
    record_criterion(7, "discrimination: trained >= 0.99, untrained in [0.45, 0.55]", passed,
                     f"trained {trained.accuracy:.4f} over {trained.pairs} pairs; untrained float32 "
                     f"{untrained.accuracy:.4f} ({untrained.ties} of {untrained.pairs} tied); untrained "
                     f"float64 per-document models {fresh:.4f} over {pairs} pairs ({ties} tied)")


# ---------------------------------------------------------------- 6. global task + ablation

TOPIC = dict(kind="topic-chain", min_filler=1, max_filler=3)


def _topic_tau(seed, use_encoder):
    corpus = D.generate_synthetic(D.SyntheticSpec(seed=seed, **TOPIC))
    cfg = M.ModelConfig(vocab_size=len(corpus.vocab), d_word=32, d_hidden=64, d_mlp=64,
                        scorer="bilinear", use_encoder=use_encoder)
    result = TR.train(corpus.train, corpus.validation, cfg,
                      TR.TrainConfig(lr=2e-3, max_epochs=80, patience=6, seed=seed))
    return DE.evaluate(result.params, corpus.test, cfg, beam_width=BEAM).mean_tau


@pytest.mark.slow
def test_criterion_6_encoder_helps_on_global_task(record_criterion):
    start = time.perf_counter()
    rows = []
    for seed in range(3):
        full, ablated = _topic_tau(seed, True), _topic_tau(seed, False)
        rows.append((seed, full, ablated, full - ablated >= 0.05))
    elapsed = time.perf_counter() - start
    wins = sum(r[3] for r in rows)
    record_criterion(6, "topic-chain corpus, full tau - no-encoder tau >= 0.05 in most seeds",
                     wins >= 2 and elapsed <= 45 * 60,
                     "; ".join(f"seed {s}: {f:.3f} vs {a:.3f}" for s, f, a, _ in rows)
                     + f"; {wins}/3 seeds; {elapsed / 60:.1f} min")


# ---------------------------------------------------------------- 8. salience

def test_criterion_8_salience_oracle(record_criterion):
    params, cfg = A.passthrough_model(vocab_size=20)
    dominant = 0
    worst_fd = 0.0
    for trial in range(100):
        rng = np.random.default_rng([8, trial])
        sents = [tuple(int(t) for t in rng.integers(2, 20, rng.integers(2, 7)))
                 for _ in range(int(rng.integers(2, 5)))]
        smap = A.word_salience(params, D.Document(f"t{trial}", tuple(sents)), cfg)
        dominant += all(s.norms[-1] > max(s.norms[:-1]) for s in smap.sentences)
        if trial < 20:
            net = M.Net(params, cfg)
            states = A.decoder_states(net, M.encode_sentences(net, sents))
            for t, tokens in enumerate(sents):
                vectors = params["embedding"][list(tokens)].copy()
                for i in range(len(tokens)):
                    fd = np.empty(cfg.d_word)
                    for k in range(cfg.d_word):
                        up, down = vectors.copy(), vectors.copy()
                        up[i, k] += 1e-5
                        down[i, k] -= 1e-5
                        fd[k] = (A.sentence_score(params, cfg, up, states[t])
                                 - A.sentence_score(params, cfg, down, states[t])) / 2e-5
                    norm = smap.sentences[t].norms[i]
                    worst_fd = max(worst_fd, abs(norm - np.linalg.norm(fd)) / max(norm, 1e-12))
    record_criterion(8, "pass-through toy model: last word dominates; norms match finite differences",
                     dominant == 100 and worst_fd <= 1e-3,
                     f"strict maximum in {dominant}/100 trials; worst relative FD gap {worst_fd:.1e} (<= 1e-3)")


# ---------------------------------------------------------------- 9. determinism

def _pipeline(root, precision):
    corp = root / "corp"
    args = ["--set", "model.d_word=8", "--set", "model.d_hidden=12", "--set", "model.d_mlp=8",
            "--epochs", "2", "--lr", "0.01", "--seed", "3", "--precision", precision, "--beam", "4"]
    assert cli.main(["synth", "--out", str(corp), "--n-train", "80", "--n-validation", "20",
                     "--n-test", "20", "--seed", "3"]) == 0
    assert cli.main(["train", "--train", str(corp / "train.jsonl"), "--validation",
                     str(corp / "validation.jsonl"), "--test", str(corp / "test.jsonl"),
                     "--run-dir", str(root / "run"), *args]) == 0
    assert cli.main(["eval", "--checkpoint", str(root / "run" / "best"), "--input", str(corp / "test.jsonl"),
                     "--beam", "4", "--permutations", "5", "--out", str(root / "eval.json")]) == 0
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "train_log.jsonl")
    log = [{k: v for k, v in json.loads(line).items() if k != "wall_time"}
           for line in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    # run_config.yaml records the run's own paths; compare it with the root masked
    prefix = str(root).encode()
    return {str(p.relative_to(root)): p.read_bytes().replace(prefix, b"<root>") for p in files}, log


def test_criterion_9_determinism(tmp_path, record_criterion):
    details, ok = [], True
    for precision in ("float32", "float64"):
        a_files, a_log = _pipeline(tmp_path / precision / "a", precision)
        b_files, b_log = _pipeline(tmp_path / precision / "b", precision)
        differing = sorted(k for k in a_files.keys() | b_files.keys() if a_files.get(k) != b_files.get(k))
        ok &= not differing and a_log == b_log
        ckpt = sum(1 for k in a_files if k.endswith(".bin"))
        details.append(f"{precision}: {len(a_files)} files ({ckpt} checkpoint payloads) "
                       f"identical except {differing or 'none'}, train log equal {a_log == b_log}")
    record_criterion(9, "synth -> train -> eval twice with one seed gives identical artifacts", ok,
                     "; ".join(details) + " (train-log wall_time excluded)")
