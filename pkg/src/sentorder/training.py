"""Maximum-likelihood training: batching, Adam, early stopping, checkpoints.

Checkpoint directory layout::

    manifest.json        config, vocabulary, parameter names/shapes/files,
                         gate ordering, precision, metrics, training state
    params/<name>.bin    raw little-endian values in manifest order
    adam/{m,v}.<name>.bin  optimizer moments (resumable checkpoints only)

Writes go to a temporary sibling directory that is renamed into place.
"""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import nn
from . import tensor as T
from .errors import ConfigError, CorruptionError, NumericError
from .tensor import ParamStore

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 10
    max_epochs: int = 50
    patience: int = 5
    eval_interval: int = 1      # epochs between validation passes
    seed: int = 0
    clip_norm: float = 5.0
    precision: str = "float32"
    contrastive: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.eval_interval < 1 or self.max_epochs < 0:
            raise ConfigError("eval_interval must be >= 1 and max_epochs >= 0")
        T.resolve_dtype(self.precision)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for _, g in sorted(grads.items())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return norm


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              skip: Sequence[str] = ()) -> None:
    """Bias-corrected Adam update, in place. Parameters in ``skip`` stay frozen."""
    for name in sorted(grads):
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient shape {grads[name].shape} does not match {name} "
                             f"{params[name].shape}")
        if not np.isfinite(grads[name]).all():
            log.error("non-finite gradient in %s", name)
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        if name in skip:
            continue
        p, g = params[name], grads[name]
        dt = p.dtype.type
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        p -= dt(lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(state.eps))


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    manifest: dict
    params: ParamStore
    adam: AdamState | None = None

    @property
    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig.from_dict(self.manifest["model"])

    @property
    def vocab(self) -> list[str] | None:
        return self.manifest.get("vocab")


def build_manifest(config: M.ModelConfig, params: ParamStore, vocab: Sequence[str] | None = None,
                   metrics: dict | None = None, training_state: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model": config.to_dict(),
        "precision": str(params.dtype),
        "seed": params.seed,
        "gate_order": list(nn.GATE_ORDER),
        "vocab": list(vocab) if vocab is not None else None,
        "parameters": [{"name": k, "shape": list(v.shape), "file": f"params/{k}.bin"}
                       for k, v in params.items()],
        "metrics": metrics or {},
        "training_state": training_state,
    }


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def save_checkpoint(params: ParamStore, manifest: dict, path, adam: AdamState | None = None) -> Path:
    """Write a checkpoint directory atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    le = _le(params.dtype)
    for name, arr in params.items():
        (tmp / "params" / f"{name}.bin").write_bytes(arr.astype(le).tobytes())
    manifest = dict(manifest)
    manifest["parameters"] = [{"name": k, "shape": list(v.shape), "file": f"params/{k}.bin"}
                              for k, v in params.items()]
    manifest["precision"] = str(params.dtype)
    if adam is not None:
        (tmp / "adam").mkdir()
        for name in sorted(adam.m):
            (tmp / "adam" / f"m.{name}.bin").write_bytes(adam.m[name].astype(le).tobytes())
            (tmp / "adam" / f"v.{name}.bin").write_bytes(adam.v[name].astype(le).tobytes())
        manifest["adam"] = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2,
                            "eps": adam.eps, "names": sorted(adam.m)}
    else:
        manifest.pop("adam", None)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    old = path.with_name(path.name + ".old")
    if path.exists():
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)
    return path


def _read_array(path: Path, shape, dtype, what: str) -> np.ndarray:
    le = _le(dtype)
    expected = int(np.prod(shape, dtype=np.int64)) * le.itemsize
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorruptionError(f"missing payload for {what}: {path}") from None
    if len(raw) != expected:
        raise CorruptionError(f"payload for {what} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=le).reshape(shape).astype(dtype)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint; nothing is returned unless all of it is sound."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CorruptionError(f"no manifest in {path}") from None
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unreadable manifest in {path}: {exc}") from None
    try:
        config = M.ModelConfig.from_dict(manifest["model"])
        dtype = T.resolve_dtype(manifest["precision"])
        entries = manifest["parameters"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"malformed manifest in {path}: {exc}") from None
    expected = M.param_shapes(config)
    arrays = {}
    for entry in entries:
        name = entry["name"]
        if name not in expected:
            raise CorruptionError(f"unknown parameter {name!r} in manifest")
        if tuple(entry["shape"]) != expected[name]:
            raise CorruptionError(f"parameter {name!r} has shape {entry['shape']}, "
                                  f"config implies {list(expected[name])}")
        arrays[name] = _read_array(path / entry["file"], expected[name], dtype, name)
    missing = set(expected) - set(arrays)
    if missing:
        raise CorruptionError(f"manifest lacks parameters {sorted(missing)}")
    params = ParamStore(arrays, seed=manifest.get("seed", 0), dtype=dtype)
    adam = None
    if manifest.get("adam"):
        a = manifest["adam"]
        adam = AdamState(step=a["step"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        for name in a["names"]:
            if name not in expected:
                raise CorruptionError(f"unknown optimizer entry {name!r}")
            adam.m[name] = _read_array(path / "adam" / f"m.{name}.bin", expected[name], dtype, name)
            adam.v[name] = _read_array(path / "adam" / f"v.{name}.bin", expected[name], dtype, name)
    return Checkpoint(manifest, params, adam)


# ---------------------------------------------------------------- training loop

def _doc_sentences(doc) -> list:
    return list(doc.sentences) if hasattr(doc, "sentences") else list(doc)


def make_batches(docs: Sequence, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Bucket document indices by sentence count, shuffle, chunk, shuffle chunks."""
    buckets: dict[int, list[int]] = {}
    for i, d in enumerate(docs):
        buckets.setdefault(len(_doc_sentences(d)), []).append(i)
    batches = []
    for n in sorted(buckets):
        idx = np.array(buckets[n])
        rng.shuffle(idx)
        batches.extend(idx[s:s + batch_size].tolist() for s in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def mean_sentence_nll(params: ParamStore, docs: Sequence, config: M.ModelConfig,
                      batch_size: int = 32) -> float:
    """Validation metric: total NLL over all sentences / number of sentences."""
    buckets: dict[int, list] = {}
    for d in docs:
        s = _doc_sentences(d)
        buckets.setdefault(len(s), []).append(s)
    net = M.Net(params, config)
    total, count = 0.0, 0
    for n in sorted(buckets):
        group = buckets[n]
        for s in range(0, len(group), batch_size):
            chunk = group[s:s + batch_size]
            lik = M.batch_log_likelihood(net, chunk)
            total += float(lik.nll.data.astype(np.float64).sum())
            count += n * len(chunk)
    return total / count


def batch_gradients(params: ParamStore, docs: Sequence, config: M.ModelConfig,
                    rng: np.random.Generator | None):
    tape = T.Tape()
    leaves = tape.watch_all({k: v for k, v in params.items()})
    lik = M.batch_log_likelihood(leaves, docs, config, rng)
    loss = lik.batch_loss()
    return loss.item(), tape.backward(loss), lik.contrastive


@dataclass
class TrainResult:
    params: ParamStore
    best_val_nll: float
    best_epoch: int
    log: list = field(default_factory=list)
    stopped_early: bool = False
    checkpoint_dir: Path | None = None


def _append_log(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(train_docs: Sequence, val_docs: Sequence, model_config: M.ModelConfig,
          train_config: TrainConfig, run_dir=None, vocab: Sequence[str] | None = None,
          init: ParamStore | None = None, resume: bool = False,
          on_eval: Callable[[dict], None] | None = None) -> TrainResult:
    """Train with Adam and early stopping on validation NLL per sentence.

    With ``run_dir`` the best checkpoint goes to ``run_dir/best``, a resumable
    one to ``run_dir/latest`` and one JSON record per evaluation to
    ``run_dir/train_log.jsonl``. ``resume=True`` continues from ``latest``.
    """
    if not val_docs:
        raise ConfigError("validation split is empty")
    if not train_docs:
        raise ConfigError("training split is empty")
    tc = train_config
    dtype = T.resolve_dtype(tc.precision)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_path = run_dir / "train_log.jsonl" if run_dir is not None else None
    frozen = () if model_config.train_embeddings else ("embedding",)

    records: list[dict] = []
    start_epoch, step, best_val, best_epoch, bad = 0, 0, math.inf, -1, 0
    if resume:
        if run_dir is None:
            raise ConfigError("resume needs a run directory")
        ck = load_checkpoint(run_dir / "latest")
        params, adam = ck.params, ck.adam or AdamState()
        st = ck.manifest["training_state"]
        start_epoch, step, best_val = st["epoch"], st["step"], st["best_val_nll"]
        best_epoch, bad = st["best_epoch"], st["bad_evals"]
        best_params = load_checkpoint(run_dir / "best").params
        if log_path is not None and log_path.exists():
            records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
        if bad >= tc.patience:
            return TrainResult(best_params, best_val, best_epoch, records, True, run_dir / "best")
    else:
        params = init.astype(dtype).copy() if init is not None else M.init_params(model_config, tc.seed, dtype)
        adam = AdamState()
        best_params = params.copy()
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            if log_path.exists():
                log_path.unlink()

    t0 = time.perf_counter()
    stopped = False
    since_eval: list[float] = []
    reduced = 0
    for epoch in range(start_epoch, tc.max_epochs):
        rng = np.random.default_rng([tc.seed, epoch])
        batches = make_batches(train_docs, tc.batch_size, rng)
        for bi, batch in enumerate(batches):
            docs = [train_docs[i] for i in batch]
            crng = np.random.default_rng([tc.seed, epoch, bi, 1]) if tc.contrastive else None
            loss, grads, k = batch_gradients(params, docs, model_config, crng)
            if crng is not None and k < model_config.contrastive_count(len(_doc_sentences(docs[0]))):
                log.debug("epoch %d batch %d: contrastive entries reduced to %d", epoch, bi, k)
                reduced += 1
            clip_by_global_norm(grads, tc.clip_norm)
            adam_step(params, grads, adam, tc.lr, skip=frozen)
            step += 1
            since_eval.append(loss)
        if (epoch + 1) % tc.eval_interval and epoch + 1 != tc.max_epochs:
            continue
        val = mean_sentence_nll(params, val_docs, model_config)
        improved = val < best_val
        if improved:
            best_val, best_epoch, bad = val, epoch + 1, 0
            best_params = params.copy()
        else:
            bad += 1
        record = {"epoch": epoch + 1, "step": step,
                  "train_nll": float(np.mean(since_eval)) if since_eval else None,
                  "val_nll": val, "best_val_nll": best_val, "contrastive_reduced": reduced,
                  "wall_time": round(time.perf_counter() - t0, 3)}
        since_eval, reduced = [], 0
        records.append(record)
        _append_log(log_path, record)
        log.info("epoch %d step %d train %.4f val %.4f", epoch + 1, step,
                 record["train_nll"] or float("nan"), val)
        if on_eval is not None:
            on_eval(record)
        if run_dir is not None:
            state = {"epoch": epoch + 1, "step": step, "best_val_nll": best_val,
                     "best_epoch": best_epoch, "bad_evals": bad, "seed": tc.seed}
            if improved:
                save_checkpoint(best_params, build_manifest(
                    model_config, best_params, vocab, {"val_nll": best_val, "epoch": best_epoch}),
                    run_dir / "best")
            save_checkpoint(params, build_manifest(model_config, params, vocab, {"val_nll": val},
                                                   state), run_dir / "latest", adam)
        if bad >= tc.patience:
            stopped = True
            break
    ck_dir = run_dir / "best" if run_dir is not None else None
    return TrainResult(best_params, best_val, best_epoch, records, stopped, ck_dir)
