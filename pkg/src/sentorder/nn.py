"""LSTM cell, embedding table, scoring functions and attention.

Parameters live in a :class:`~sentorder.tensor.ParamStore` under
hierarchical names (``decoder_lstm.w_ih`` ...). The classes here are thin
*bound views*: they take the dict of tensors produced for one forward pass
(tracked or constant) and precompute transposes once.

The fused LSTM gate block is ordered (input, forget, candidate, output).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor

GATE_ORDER = ("input", "forget", "candidate", "output")
INIT_RANGE = 0.08
FORGET_BIAS = 1.0
EMBED_STD = 0.01


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def init_lstm(store: T.ParamStore, prefix: str, d_in: int, d_hidden: int,
              rng: np.random.Generator) -> None:
    store[f"{prefix}.w_ih"] = rng.uniform(-INIT_RANGE, INIT_RANGE, (4 * d_hidden, d_in))
    store[f"{prefix}.w_hh"] = rng.uniform(-INIT_RANGE, INIT_RANGE, (4 * d_hidden, d_hidden))
    bias = np.zeros(4 * d_hidden)
    bias[d_hidden:2 * d_hidden] = FORGET_BIAS
    store[f"{prefix}.bias"] = bias


def lstm_shapes(prefix: str, d_in: int, d_hidden: int) -> dict[str, tuple]:
    return {f"{prefix}.bias": (4 * d_hidden,),
            f"{prefix}.w_hh": (4 * d_hidden, d_hidden),
            f"{prefix}.w_ih": (4 * d_hidden, d_in)}


class LstmParams:
    """Input-to-gates (4h x d_in), hidden-to-gates (4h x h) and gate biases (4h)."""

    def __init__(self, w_ih: Tensor, w_hh: Tensor, bias: Tensor):
        hidden4 = w_ih.shape[0]
        if (hidden4 % 4 or w_hh.shape != (hidden4, hidden4 // 4) or bias.shape != (hidden4,)):
            raise DimensionError(
                f"inconsistent LSTM shapes w_ih={w_ih.shape} w_hh={w_hh.shape} bias={bias.shape}")
        self.hidden = hidden4 // 4
        self.d_in = w_ih.shape[1]
        self.bias = bias
        self.w_ih_t = T.transpose(w_ih)
        self.w_hh_t = T.transpose(w_hh)

    @classmethod
    def bind(cls, params: dict[str, Tensor], prefix: str) -> "LstmParams":
        return cls(params[f"{prefix}.w_ih"], params[f"{prefix}.w_hh"], params[f"{prefix}.bias"])

    def zero_state(self, batch: int | None, dtype) -> LstmState:
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return LstmState(T.zeros(shape, dtype), T.zeros(shape, dtype))


def lstm_step(p: LstmParams, state: LstmState, x: Tensor) -> LstmState:
    """One LSTM update; works on single vectors or on (B, d) batches."""
    if x.shape[-1] != p.d_in or state.h.shape[-1] != p.hidden or state.h.shape != state.c.shape:
        raise DimensionError(
            f"lstm_step: input {x.shape}, state {state.h.shape}/{state.c.shape} "
            f"do not fit d_in={p.d_in}, hidden={p.hidden}")
    if x.shape[:-1] != state.h.shape[:-1]:
        raise DimensionError(f"lstm_step: batch mismatch {x.shape} vs {state.h.shape}")
    h = p.hidden
    gates = T.add_bias(T.add(T.matmul(x, p.w_ih_t), T.matmul(state.h, p.w_hh_t)), p.bias)
    i = T.sigmoid(T.cols(gates, 0, h))
    f = T.sigmoid(T.cols(gates, h, 2 * h))
    g = T.tanh(T.cols(gates, 2 * h, 3 * h))
    o = T.sigmoid(T.cols(gates, 3 * h, 4 * h))
    c = T.add(T.mul(f, state.c), T.mul(i, g))
    return LstmState(T.mul(o, T.tanh(c)), c)


def init_embedding(store: T.ParamStore, vocab_size: int, d_word: int,
                   rng: np.random.Generator, name: str = "embedding") -> None:
    store[name] = rng.normal(0.0, EMBED_STD, (vocab_size, d_word))


class MlpScorer:
    """``f(s, h) = w_out . tanh(W [s; h] + b) + b_out`` with one hidden layer."""

    kind = "mlp"

    def __init__(self, w: Tensor, b: Tensor, w_out: Tensor, b_out: Tensor, d_s: int):
        d_mlp = w.shape[0]
        if b.shape != (d_mlp,) or w_out.shape != (1, d_mlp) or b_out.shape != (1,):
            raise DimensionError(
                f"inconsistent MLP scorer shapes W={w.shape} b={b.shape} "
                f"W'={w_out.shape} b'={b_out.shape}")
        if not 0 < d_s < w.shape[1]:
            raise DimensionError(f"sentence size {d_s} does not split W of shape {w.shape}")
        self.d_s, self.d_h = d_s, w.shape[1] - d_s
        self.w_t = T.transpose(w)
        self.ws_t = T.transpose(T.cols(w, 0, d_s))
        self.wh_t = T.transpose(T.cols(w, d_s, w.shape[1]))
        self.b, self.w_out_t, self.b_out = b, T.transpose(w_out), b_out

    @classmethod
    def bind(cls, params: dict[str, Tensor], prefix: str, d_s: int) -> "MlpScorer":
        return cls(params[f"{prefix}.w"], params[f"{prefix}.b"],
                   params[f"{prefix}.w_out"], params[f"{prefix}.b_out"], d_s)

    def __call__(self, s: Tensor, h: Tensor) -> Tensor:
        if s.shape[-1] != self.d_s or h.shape[-1] != self.d_h or s.shape[:-1] != h.shape[:-1]:
            raise DimensionError(f"mlp scorer: s {s.shape}, h {h.shape}, expected "
                                 f"d_s={self.d_s}, d_h={self.d_h}")
        hidden = T.tanh(T.add_bias(T.matmul(T.concat([s, h]), self.w_t), self.b))
        out = T.add_bias(T.matmul(hidden, self.w_out_t), self.b_out)
        return T.reshape(out, out.shape[:-1])

    def prepare(self, memory: Tensor) -> Tensor:
        """Project the memory once; reused for every query."""
        if memory.ndim != 3 or memory.shape[-1] != self.d_s:
            raise DimensionError(f"memory {memory.shape} does not fit d_s={self.d_s}")
        return T.matmul(memory, self.ws_t)

    def over(self, keys: Tensor, h: Tensor) -> Tensor:
        """Scores (B, n) of every memory entry against queries h (B, d_h)."""
        if h.ndim != 2 or h.shape != (keys.shape[0], self.d_h):
            raise DimensionError(f"query {h.shape} does not fit memory keys {keys.shape}")
        q = T.add_bias(T.matmul(h, self.wh_t), self.b)
        z = T.tanh(T.add(keys, T.expand(q, 1, keys.shape[1])))
        out = T.add_bias(T.matmul(z, self.w_out_t), self.b_out)
        return T.reshape(out, out.shape[:-1])


class BilinearScorer:
    """``f(s, h) = s . (W h + b)``: similarity to a regressed next sentence."""

    kind = "bilinear"

    def __init__(self, w: Tensor, b: Tensor):
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionError(f"inconsistent bilinear shapes W={w.shape} b={b.shape}")
        self.d_s, self.d_h = w.shape
        self.w_t, self.b = T.transpose(w), b

    @classmethod
    def bind(cls, params: dict[str, Tensor], prefix: str, d_s: int | None = None) -> "BilinearScorer":
        return cls(params[f"{prefix}.w"], params[f"{prefix}.b"])

    def regress(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.d_h:
            raise DimensionError(f"bilinear scorer: h {h.shape}, expected d_h={self.d_h}")
        return T.add_bias(T.matmul(h, self.w_t), self.b)

    def __call__(self, s: Tensor, h: Tensor) -> Tensor:
        if s.shape[-1] != self.d_s or s.shape[:-1] != h.shape[:-1]:
            raise DimensionError(f"bilinear scorer: s {s.shape}, h {h.shape}")
        r = self.regress(h)
        if s.ndim == 1:
            return T.total(T.mul(s, r))
        return T.reshape(T.batched_matvec(T.reshape(s, (s.shape[0], 1, self.d_s)), r), (s.shape[0],))

    def prepare(self, memory: Tensor) -> Tensor:
        if memory.ndim != 3 or memory.shape[-1] != self.d_s:
            raise DimensionError(f"memory {memory.shape} does not fit d_s={self.d_s}")
        return memory

    def over(self, keys: Tensor, h: Tensor) -> Tensor:
        if h.ndim != 2 or h.shape[0] != keys.shape[0]:
            raise DimensionError(f"query {h.shape} does not fit memory {keys.shape}")
        return T.batched_matvec(keys, self.regress(h))


def init_scorer(store: T.ParamStore, prefix: str, kind: str, d_s: int, d_h: int, d_mlp: int,
                rng: np.random.Generator) -> None:
    if kind == "mlp":
        store[f"{prefix}.w"] = rng.uniform(-INIT_RANGE, INIT_RANGE, (d_mlp, d_s + d_h))
        store[f"{prefix}.b"] = np.zeros(d_mlp)
        store[f"{prefix}.w_out"] = rng.uniform(-INIT_RANGE, INIT_RANGE, (1, d_mlp))
        store[f"{prefix}.b_out"] = np.zeros(1)
    elif kind == "bilinear":
        store[f"{prefix}.w"] = rng.uniform(-INIT_RANGE, INIT_RANGE, (d_s, d_h))
        store[f"{prefix}.b"] = np.zeros(d_s)
    else:
        raise ValueError(f"unknown scorer kind {kind!r}")


def scorer_shapes(prefix: str, kind: str, d_s: int, d_h: int, d_mlp: int) -> dict[str, tuple]:
    if kind == "mlp":
        return {f"{prefix}.b": (d_mlp,), f"{prefix}.b_out": (1,),
                f"{prefix}.w": (d_mlp, d_s + d_h), f"{prefix}.w_out": (1, d_mlp)}
    if kind == "bilinear":
        return {f"{prefix}.b": (d_s,), f"{prefix}.w": (d_s, d_h)}
    raise ValueError(f"unknown scorer kind {kind!r}")


def bind_scorer(params: dict[str, Tensor], prefix: str, kind: str, d_s: int):
    if kind == "mlp":
        return MlpScorer.bind(params, prefix, d_s)
    if kind == "bilinear":
        return BilinearScorer.bind(params, prefix)
    raise ValueError(f"unknown scorer kind {kind!r}")


def score_mlp(p: MlpScorer, s: Tensor, h: Tensor) -> Tensor:
    return p(s, h)


def score_bilinear(p: BilinearScorer, s: Tensor, h: Tensor) -> Tensor:
    return p(s, h)


def attend(memory: Tensor, query: Tensor, scorer, keys: Tensor | None = None):
    """Attention weights over memory entries and the weighted readout.

    ``memory`` is (n, d_s) with a (d_h,) query, or batched (B, n, d_s) with
    (B, d_h) queries. Returns ``(weights, readout)``.
    """
    if memory.size == 0 or memory.shape[-2] == 0:
        raise DomainError("attention over an empty memory")
    single = memory.ndim == 2
    if single:
        memory = T.reshape(memory, (1,) + memory.shape)
        query = T.reshape(query, (1,) + query.shape)
    if keys is None:
        keys = scorer.prepare(memory)
    weights = T.softmax(scorer.over(keys, query))
    readout = T.batched_vecmat(weights, memory)
    if single:
        weights = T.reshape(weights, weights.shape[1:])
        readout = T.reshape(readout, readout.shape[1:])
    return weights, readout
