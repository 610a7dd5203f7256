import json
import math

import numpy as np
import pytest

from sentorder import data as D
from sentorder import model as M
from sentorder import tensor as T
from sentorder import training as TR
from sentorder.errors import ConfigError, CorruptionError, NumericError

import oracles


def small_corpus(n_train=200, seed=0, kind="ordinal"):
    return D.generate_synthetic(D.SyntheticSpec(kind=kind, n_train=n_train, n_validation=40, n_test=40,
                                                min_sentences=3, max_sentences=5, seed=seed))


def toy_config(vocab_size, **kw):
    return M.ModelConfig(vocab_size=vocab_size, d_word=8, d_hidden=12, d_mlp=8, read_cycles=2, **kw)


# ---------------------------------------------------------------- Adam

def scalar_store(value=0.5):
    return T.ParamStore({"w": np.array([value])}, dtype="float64")


def test_adam_zero_gradient_is_null_update():
    params, state = scalar_store(), TR.AdamState()
    TR.adam_step(params, {"w": np.zeros(1)}, state, 1e-3)
    assert params["w"][0] == 0.5 and state.step == 1


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
def test_adam_first_step_closed_form(g):
    params, state = scalar_store(), TR.AdamState()
    TR.adam_step(params, {"w": np.array([g])}, state, 1e-3)
    assert abs((params["w"][0] - 0.5) - oracles.adam_first_step(g, 1e-3)) < 1e-15
    assert abs((params["w"][0] - 0.5) + 1e-3 * math.copysign(1, g)) < 1e-7


def test_adam_first_step_frozen_values():
    params, state = scalar_store(), TR.AdamState()
    TR.adam_step(params, {"w": np.array([0.3])}, state, 1e-3)
    assert params["w"][0] == 0.5 - 0.0009999999666666678


def test_adam_is_deterministic():
    def run():
        params, state = scalar_store(), TR.AdamState()
        params["v"] = np.linspace(-1, 1, 6).reshape(2, 3)
        rng = np.random.default_rng(3)
        for _ in range(10):
            TR.adam_step(params, {"w": rng.normal(size=1), "v": rng.normal(size=(2, 3))}, state, 1e-2)
        return params
    assert run().equal(run())


def test_adam_nan_aborts_before_any_update(caplog):
    params, state = scalar_store(), TR.AdamState()
    params["a"] = np.ones(2)
    with pytest.raises(NumericError, match="'w'"):
        TR.adam_step(params, {"a": np.ones(2), "w": np.array([np.nan])}, state, 1e-3)
    assert state.step == 0 and params["a"].tolist() == [1.0, 1.0]
    assert "w" in caplog.text


def test_adam_skip_freezes_parameter():
    params, state = scalar_store(), TR.AdamState()
    TR.adam_step(params, {"w": np.array([1.0])}, state, 1e-3, skip=("w",))
    assert params["w"][0] == 0.5


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert TR.clip_by_global_norm(grads, 1.0) == 5.0
    assert abs(TR.global_norm(grads) - 1.0) < 1e-12
    small = {"a": np.array([0.1])}
    TR.clip_by_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


# ---------------------------------------------------------------- losses

def test_batch_loss_is_mean_of_document_losses():
    corpus = small_corpus(40)
    cfg = toy_config(len(corpus.vocab))
    params = M.init_params(cfg, 0, "float64")
    docs = [d for d in corpus.train if len(d) == 4][:5]
    batch = M.batch_log_likelihood(params, docs, cfg).batch_loss().item()
    single = [M.forward_log_likelihood(params, d, cfg)[0].data[0] for d in docs]
    assert abs(batch - np.mean(single)) <= 1e-6 * abs(batch)


def test_small_step_decreases_batch_loss():
    corpus = small_corpus(40)
    cfg = toy_config(len(corpus.vocab))
    docs = [d for d in corpus.train if len(d) == 4][:5]
    failures = 0
    for restart in range(20):
        params = M.init_params(cfg, restart, "float64")
        before, grads, _ = TR.batch_gradients(params, docs, cfg, None)
        TR.adam_step(params, grads, TR.AdamState(), 1e-6)
        after = M.batch_log_likelihood(params, docs, cfg).batch_loss().item()
        failures += not after < before
    assert failures <= 1


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    corpus = small_corpus(40)
    for precision in ("float32", "float64"):
        cfg = toy_config(len(corpus.vocab))
        params = M.init_params(cfg, 1, precision)
        path = TR.save_checkpoint(params, TR.build_manifest(cfg, params, corpus.vocab.itos), tmp_path / precision)
        ck = TR.load_checkpoint(path)
        assert ck.params.equal(params) and ck.vocab == corpus.vocab.itos
        doc = corpus.test[0]
        a = M.forward_log_likelihood(params, doc, cfg)[0].data
        b = M.forward_log_likelihood(ck.params, doc, ck.model_config)[0].data
        assert a.tobytes() == b.tobytes()
        manifest = json.loads((path / "manifest.json").read_text())
        assert manifest["gate_order"] == ["input", "forget", "candidate", "output"]
        assert manifest["precision"] == precision


def _saved(tmp_path):
    cfg = toy_config(20)
    params = M.init_params(cfg, 0)
    return TR.save_checkpoint(params, TR.build_manifest(cfg, params), tmp_path / "ck")


def test_truncated_payload_is_corruption(tmp_path):
    path = _saved(tmp_path)
    f = path / "params" / "embedding.bin"
    f.write_bytes(f.read_bytes()[:-3])
    with pytest.raises(CorruptionError, match="embedding"):
        TR.load_checkpoint(path)


def test_unknown_parameter_is_corruption(tmp_path):
    path = _saved(tmp_path)
    m = json.loads((path / "manifest.json").read_text())
    m["parameters"].append({"name": "mystery.w", "shape": [2], "file": "params/mystery.w.bin"})
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptionError, match="mystery.w"):
        TR.load_checkpoint(path)


def test_shape_mismatch_is_corruption(tmp_path):
    path = _saved(tmp_path)
    m = json.loads((path / "manifest.json").read_text())
    m["parameters"][0]["shape"] = [1, 1]
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptionError):
        TR.load_checkpoint(path)


def test_payload_is_little_endian_in_precision(tmp_path):
    path = _saved(tmp_path)
    ck = TR.load_checkpoint(path)
    raw = (path / "params" / "start.bin").read_bytes() if "start" in ck.params else \
        (path / "params" / "embedding.bin").read_bytes()
    arr = ck.params["start"] if "start" in ck.params else ck.params["embedding"]
    assert raw == arr.astype("<f4").tobytes()


# ---------------------------------------------------------------- training loop

def test_validation_nll_decreases_on_easy_task():
    corpus = small_corpus(200)
    cfg = M.ModelConfig(vocab_size=len(corpus.vocab), d_word=16, d_hidden=16, d_mlp=8, read_cycles=2)
    # the small embedding init leaves a short plateau; this rate leaves it in the first epoch
    tc = TR.TrainConfig(lr=2e-2, max_epochs=3, patience=3)
    result = TR.train(corpus.train, corpus.validation, cfg, tc)
    vals = [r["val_nll"] for r in result.log]
    assert len(vals) == 3 and vals[0] > vals[1] > vals[2]


def test_patience_one_with_constant_metric_stops_after_two_evals():
    corpus = small_corpus(30)
    cfg = toy_config(len(corpus.vocab))
    result = TR.train(corpus.train, corpus.validation, cfg, TR.TrainConfig(lr=0.0, max_epochs=10, patience=1))
    assert len(result.log) == 2 and result.stopped_early and result.best_epoch == 1


def test_empty_validation_is_config_error():
    corpus = small_corpus(30)
    with pytest.raises(ConfigError):
        TR.train(corpus.train, [], toy_config(len(corpus.vocab)), TR.TrainConfig())


def test_best_checkpoint_is_never_worse_than_evaluated(tmp_path):
    corpus = small_corpus(100)
    cfg = toy_config(len(corpus.vocab))
    result = TR.train(corpus.train, corpus.validation, cfg,
                      TR.TrainConfig(lr=2e-2, max_epochs=5, patience=5), run_dir=tmp_path)
    vals = [r["val_nll"] for r in result.log]
    assert result.best_val_nll == min(vals)
    best = TR.load_checkpoint(tmp_path / "best")
    assert abs(TR.mean_sentence_nll(best.params, corpus.validation, cfg) - min(vals)) < 1e-6
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert set(json.loads(lines[0])) >= {"epoch", "step", "train_nll", "val_nll", "wall_time"}


def _strip(log):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in log]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    corpus = small_corpus(60)
    cfg = toy_config(len(corpus.vocab))
    full = TR.train(corpus.train, corpus.validation, cfg,
                    TR.TrainConfig(lr=3e-3, max_epochs=4, patience=4), run_dir=tmp_path / "a")
    TR.train(corpus.train, corpus.validation, cfg,
             TR.TrainConfig(lr=3e-3, max_epochs=2, patience=4), run_dir=tmp_path / "b")
    resumed = TR.train(corpus.train, corpus.validation, cfg,
                       TR.TrainConfig(lr=3e-3, max_epochs=4, patience=4), run_dir=tmp_path / "b", resume=True)
    assert _strip(resumed.log) == _strip(full.log)
    assert resumed.params.equal(full.params)


def test_training_is_deterministic():
    corpus = small_corpus(60)
    cfg = toy_config(len(corpus.vocab))
    tc = TR.TrainConfig(lr=3e-3, max_epochs=2, seed=5)
    a = TR.train(corpus.train, corpus.validation, cfg, tc)
    b = TR.train(corpus.train, corpus.validation, cfg, tc)
    assert _strip(a.log) == _strip(b.log) and a.params.equal(b.params)


def test_frozen_embeddings_stay_put():
    corpus = small_corpus(30)
    cfg = toy_config(len(corpus.vocab), train_embeddings=False)
    init = M.init_params(cfg, 0)
    result = TR.train(corpus.train, corpus.validation, cfg, TR.TrainConfig(lr=1e-2, max_epochs=1), init=init)
    np.testing.assert_array_equal(result.params["embedding"], init["embedding"])
    assert not np.array_equal(result.params["decoder_lstm.w_hh"], init["decoder_lstm.w_hh"])


def test_make_batches_buckets_by_length():
    corpus = small_corpus(80)
    batches = TR.make_batches(corpus.train, 10, np.random.default_rng(0))
    assert sorted(i for b in batches for i in b) == list(range(80))
    for b in batches:
        assert len({len(corpus.train[i]) for i in b}) == 1 and len(b) <= 10
