"""Set-to-sequence ordering model.

Three LSTMs share one hidden size:

* the sentence LSTM reads the words of each sentence and its final hidden
  state is the sentence embedding;
* the set encoder repeatedly attends over the sentence memory and feeds the
  attention readout to its LSTM (``read_cycles`` times); it starts from
  zeros and is indifferent to the memory order;
* the pointer decoder starts from the encoder's final state, consumes the
  previously placed sentence and scores every memory entry, giving a
  distribution over which sentence comes next.

Log-probabilities of placements sum to the coherence score of an ordering;
its negation over the gold order is the training loss.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError, VocabularyError
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)

SCORERS = ("mlp", "bilinear")
SENTENCE_REPRS = ("last", "mean")


@dataclass
class ModelConfig:
    vocab_size: int
    d_word: int = 300
    d_hidden: int = 1000
    d_mlp: int = 500
    read_cycles: int = 10
    scorer: str = "mlp"
    use_encoder: bool = True
    # None picks the default: off with an encoder, on without one.
    use_start_symbol: bool | None = None
    sentence_repr: str = "last"
    # contrastive entries per document: contrastive_k if set, else round(ratio * n),
    # never more than max_ratio * n
    contrastive_ratio: float = 1.0
    contrastive_max_ratio: float = 2.0
    contrastive_k: int | None = None
    train_embeddings: bool = True

    def __post_init__(self):
        if self.use_start_symbol is None:
            self.use_start_symbol = not self.use_encoder
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover at least the pad and unk tokens")
        for name in ("d_word", "d_hidden", "d_mlp"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.read_cycles < 1:
            raise ConfigError("read_cycles must be >= 1")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")
        if self.sentence_repr not in SENTENCE_REPRS:
            raise ConfigError(f"sentence_repr must be one of {SENTENCE_REPRS}")
        if self.contrastive_ratio < 0 or self.contrastive_max_ratio < 0:
            raise ConfigError("contrastive ratios must be non-negative")
        if self.contrastive_k is not None and self.contrastive_k < 0:
            raise ConfigError("contrastive_k must be non-negative")

    def contrastive_count(self, n: int) -> int:
        cap = int(np.floor(self.contrastive_max_ratio * n))
        k = self.contrastive_k if self.contrastive_k is not None else int(round(self.contrastive_ratio * n))
        return max(0, min(k, cap))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    h = config.d_hidden
    shapes = {"embedding": (config.vocab_size, config.d_word)}
    shapes.update(nn.lstm_shapes("sentence_lstm", config.d_word, h))
    if config.use_encoder:
        shapes.update(nn.lstm_shapes("encoder_lstm", h, h))
        shapes.update(nn.scorer_shapes("encoder_scorer", config.scorer, h, h, config.d_mlp))
    shapes.update(nn.lstm_shapes("decoder_lstm", h, h))
    shapes.update(nn.scorer_shapes("decoder_scorer", config.scorer, h, h, config.d_mlp))
    if config.use_start_symbol:
        shapes["start"] = (h,)
    return dict(sorted(shapes.items()))


def init_params(config: ModelConfig, seed: int = 0, precision="float32") -> ParamStore:
    store = ParamStore(seed=seed, dtype=precision)
    rng = np.random.default_rng(seed)
    h = config.d_hidden
    nn.init_embedding(store, config.vocab_size, config.d_word, rng)
    nn.init_lstm(store, "sentence_lstm", config.d_word, h, rng)
    if config.use_encoder:
        nn.init_lstm(store, "encoder_lstm", h, h, rng)
        nn.init_scorer(store, "encoder_scorer", config.scorer, h, h, config.d_mlp, rng)
    nn.init_lstm(store, "decoder_lstm", h, h, rng)
    nn.init_scorer(store, "decoder_scorer", config.scorer, h, h, config.d_mlp, rng)
    if config.use_start_symbol:
        store["start"] = rng.uniform(-nn.INIT_RANGE, nn.INIT_RANGE, h)
    return store


class Net:
    """Model parameters bound for one forward pass (tracked or not)."""

    def __init__(self, params, config: ModelConfig):
        if isinstance(params, ParamStore):
            params = params.as_constants()
        self.params = params
        self.config = config
        self.embedding = params["embedding"]
        self.dtype = self.embedding.dtype
        h = config.d_hidden
        self.sentence_lstm = nn.LstmParams.bind(params, "sentence_lstm")
        if config.use_encoder:
            self.encoder_lstm = nn.LstmParams.bind(params, "encoder_lstm")
            self.encoder_scorer = nn.bind_scorer(params, "encoder_scorer", config.scorer, h)
        self.decoder_lstm = nn.LstmParams.bind(params, "decoder_lstm")
        self.decoder_scorer = nn.bind_scorer(params, "decoder_scorer", config.scorer, h)
        self.start = params.get("start") if config.use_start_symbol else None
        if config.use_start_symbol and self.start is None:
            raise DimensionError("config asks for a start symbol but parameters have none")


def bind(params, config: ModelConfig) -> Net:
    return params if isinstance(params, Net) else Net(params, config)


# ---------------------------------------------------------------- sentence encoder

def pad_sentences(sentences: Sequence[Sequence[int]], vocab_size: int):
    """Token ids padded with 0 to (S, L) plus the (S, L) validity mask."""
    if not sentences:
        raise DomainError("no sentences to encode")
    lengths = np.array([len(s) for s in sentences])
    if (lengths == 0).any():
        raise DomainError("empty token list")
    ids = np.zeros((len(sentences), lengths.max()), dtype=np.intp)
    for row, sent in enumerate(sentences):
        ids[row, :len(sent)] = sent
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise VocabularyError(f"token id out of range for vocabulary of {vocab_size}")
    mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    return ids, mask


def run_sentence_lstm(net: Net, inputs: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """Run the word LSTM over per-step inputs (S, d_word) with padding mask (S, L)."""
    cell = net.sentence_lstm
    n_sent = mask.shape[0]
    state = cell.zero_state(n_sent, net.dtype)
    mean = net.config.sentence_repr == "mean"
    acc = None
    for t, x in enumerate(inputs):
        new = nn.lstm_step(cell, state, x)
        col = mask[:, t]
        if col.all():
            state = new
        else:
            keep = np.broadcast_to(col[:, None], new.h.shape)
            state = nn.LstmState(T.where(keep, new.h, state.h), T.where(keep, new.c, state.c))
        if mean:
            part = state.h if col.all() else T.where(keep, state.h, T.zeros(state.h.shape, net.dtype))
            acc = part if acc is None else T.add(acc, part)
    if not mean:
        return state.h
    inv = 1.0 / mask.sum(axis=1)
    return T.mul(acc, T.constant(np.broadcast_to(inv[:, None], acc.shape), net.dtype))


def encode_sentences(net: Net, sentences: Sequence[Sequence[int]]) -> Tensor:
    """Embeddings (S, d_hidden) for a list of token-id sequences."""
    ids, mask = pad_sentences(sentences, net.config.vocab_size)
    words = T.take(net.embedding, ids)
    inputs = [T.step_slice(words, t) for t in range(ids.shape[1])]
    return run_sentence_lstm(net, inputs, mask)


def encode_sentence(params, tokens: Sequence[int], config: ModelConfig) -> Tensor:
    net = bind(params, config)
    emb = encode_sentences(net, [tokens])
    return T.reshape(emb, (config.d_hidden,))


# ---------------------------------------------------------------- memory

@dataclass
class SentenceMemory:
    """True sentence embeddings plus optional contrastive entries.

    The encoder reads only the true entries; the decoder scores all of them.
    """
    embeddings: Tensor
    contrastive: Tensor | None = None

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def k(self) -> int:
        return 0 if self.contrastive is None else self.contrastive.shape[0]

    @property
    def valid_targets(self) -> range:
        return range(self.n)

    def entries(self) -> Tensor:
        if self.contrastive is None:
            return self.embeddings
        return T.concat([self.embeddings, self.contrastive], axis=0)


def sample_contrastive(pool_size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k > pool_size:
        log.debug("contrastive pool holds %d sentences, fewer than k=%d; using %d",
                    pool_size, k, pool_size)
        k = pool_size
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    return np.sort(rng.choice(pool_size, size=k, replace=False)).astype(np.intp)


def inject_contrastive(memory: SentenceMemory, pool: Tensor, k: int,
                       rng: np.random.Generator) -> SentenceMemory:
    """Append ``k`` rows sampled without replacement from ``pool``."""
    idx = sample_contrastive(pool.shape[0] if pool is not None else 0, k, rng)
    if len(idx) == 0:
        return memory
    extra = T.take(pool, idx)
    if memory.contrastive is not None:
        extra = T.concat([memory.contrastive, extra], axis=0)
    return SentenceMemory(memory.embeddings, extra)


# ---------------------------------------------------------------- encoder / decoder

@dataclass
class EncoderOutput:
    state: nn.LstmState
    attention: list = field(default_factory=list)


def _batched(memory: Tensor) -> tuple[Tensor, bool]:
    if memory.ndim == 2:
        return T.reshape(memory, (1,) + memory.shape), True
    if memory.ndim != 3:
        raise DimensionError(f"memory must be (n, d) or (B, n, d), got {memory.shape}")
    return memory, False


def encode_set(params, memory, config: ModelConfig | None = None) -> EncoderOutput:
    """Read cycles of attention + LSTM over the true memory entries."""
    net = bind(params, config)
    if isinstance(memory, SentenceMemory):
        memory = memory.embeddings
    if memory.size == 0:
        raise DomainError("empty sentence memory")
    memory, single = _batched(memory)
    if not net.config.use_encoder:
        raise ConfigError("model has no set encoder")
    cell, scorer = net.encoder_lstm, net.encoder_scorer
    keys = scorer.prepare(memory)
    state = cell.zero_state(memory.shape[0], net.dtype)
    weights_seen = []
    for _ in range(net.config.read_cycles):
        weights, readout = nn.attend(memory, state.h, scorer, keys)
        weights_seen.append(weights.data)
        state = nn.lstm_step(cell, state, readout)
    if single:
        h = cell.hidden
        state = nn.LstmState(T.reshape(state.h, (h,)), T.reshape(state.c, (h,)))
        weights_seen = [w[0] for w in weights_seen]
    return EncoderOutput(state, weights_seen)


@dataclass
class DecoderStepOutput:
    state: nn.LstmState
    scores: Tensor
    log_probs: Tensor

    @property
    def distribution(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


def decode_step(params, state: nn.LstmState, prev_input: Tensor, memory,
                config: ModelConfig | None = None, keys: Tensor | None = None) -> DecoderStepOutput:
    """Advance the pointer decoder one position and score every memory entry."""
    net = bind(params, config)
    if isinstance(memory, SentenceMemory):
        memory = memory.entries()
    memory, single = _batched(memory)
    if single:
        h = net.decoder_lstm.hidden
        state = nn.LstmState(T.reshape(state.h, (1, h)), T.reshape(state.c, (1, h)))
        prev_input = T.reshape(prev_input, (1,) + prev_input.shape)
    if keys is None:
        keys = net.decoder_scorer.prepare(memory)
    new = nn.lstm_step(net.decoder_lstm, state, prev_input)
    scores = net.decoder_scorer.over(keys, new.h)
    logp = T.log_softmax(scores)
    if single:
        h = net.decoder_lstm.hidden
        new = nn.LstmState(T.reshape(new.h, (h,)), T.reshape(new.c, (h,)))
        scores = T.reshape(scores, scores.shape[1:])
        logp = T.reshape(logp, logp.shape[1:])
    return DecoderStepOutput(new, scores, logp)


def initial_decoder_state(net: Net, true_memory: Tensor) -> nn.LstmState:
    """Encoder final state (h and c) or zeros for the decoder-only variant."""
    if net.config.use_encoder:
        return encode_set(net, true_memory).state
    return net.decoder_lstm.zero_state(true_memory.shape[0], net.dtype)


def initial_input(net: Net, batch: int) -> Tensor:
    if net.start is not None:
        return T.expand(net.start, 0, batch)
    return T.zeros((batch, net.config.d_hidden), net.dtype)


def teacher_forced(net: Net, table: Tensor, mem_idx: np.ndarray, n_true: int,
                   targets: np.ndarray) -> list[Tensor]:
    """Per-step log-probabilities of ``targets`` under teacher forcing.

    ``table`` holds sentence embeddings (S, d). Row ``b`` of ``mem_idx``
    lists the table rows forming that memory, true entries first; ``targets``
    (B, k) are positions within the memory, fed back as the next input.
    """
    mem_idx = np.asarray(mem_idx, dtype=np.intp)
    targets = np.asarray(targets, dtype=np.intp)
    batch = mem_idx.shape[0]
    rows = np.arange(batch)
    memory = T.take(table, mem_idx)
    keys = net.decoder_scorer.prepare(memory)
    true_memory = memory if n_true == mem_idx.shape[1] else T.take(table, mem_idx[:, :n_true])
    state = initial_decoder_state(net, true_memory)
    x = initial_input(net, batch)
    steps = []
    for t in range(targets.shape[1]):
        out = decode_step(net, state, x, memory, keys=keys)
        steps.append(T.pick(out.log_probs, targets[:, t]))
        state = out.state
        if t + 1 < targets.shape[1]:
            x = T.take(table, mem_idx[rows, targets[:, t]])
    return steps


@dataclass
class Likelihood:
    nll: Tensor                 # (B,) negative log-likelihood per document
    step_log_probs: list        # k tensors of shape (B,)
    contrastive: int            # entries added per document

    def batch_loss(self) -> Tensor:
        """Mean per-document NLL as a 1-element tensor."""
        return T.scale(T.total(self.nll), 1.0 / self.nll.shape[0])


def _sentences(doc) -> list:
    return list(doc.sentences) if hasattr(doc, "sentences") else list(doc)


def batch_log_likelihood(params, docs: Sequence, config: ModelConfig | None = None,
                         rng: np.random.Generator | None = None,
                         extra_pool: Sequence[Sequence[int]] = ()) -> Likelihood:
    """Teacher-forced NLL of documents that share a sentence count.

    With ``rng`` given, contrastive entries are drawn for each document from
    the sentences of the other documents plus ``extra_pool``.
    """
    net = bind(params, config)
    docs = [_sentences(d) for d in docs]
    if not docs or any(len(d) == 0 for d in docs):
        raise DomainError("empty document")
    n = len(docs[0])
    if any(len(d) != n for d in docs):
        raise DimensionError("documents in one batch must have the same sentence count")
    batch = len(docs)
    flat = [s for d in docs for s in d] + [list(s) for s in extra_pool]
    table = encode_sentences(net, flat)
    mem_idx = np.arange(batch * n).reshape(batch, n)
    k = 0
    if rng is not None:
        k = net.config.contrastive_count(n)
        pool_size = len(flat) - n
        if k > 0:
            picks = []
            for b in range(batch):
                others = np.array([r for r in range(len(flat)) if not b * n <= r < (b + 1) * n],
                                  dtype=np.intp)
                picks.append(others[sample_contrastive(pool_size, k, rng)])
            k = len(picks[0])
            if k:
                mem_idx = np.concatenate([mem_idx, np.stack(picks)], axis=1)
    targets = np.tile(np.arange(n), (batch, 1))
    steps = teacher_forced(net, table, mem_idx, n, targets)
    total = steps[0]
    for s in steps[1:]:
        total = T.add(total, s)
    return Likelihood(T.scale(total, -1.0), steps, k)


def forward_log_likelihood(params, doc, config: ModelConfig | None = None,
                           rng: np.random.Generator | None = None,
                           pool: Sequence[Sequence[int]] = ()):
    """NLL of one gold-ordered document and its per-step log-probabilities."""
    lik = batch_log_likelihood(params, [doc], config, rng, extra_pool=pool)
    return lik.nll, [s.data[0] for s in lik.step_log_probs]


def _check_order(order: Sequence[int], n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.intp).reshape(-1)
    if len(set(order.tolist())) != len(order):
        raise DomainError(f"repeated index in order {order.tolist()}")
    if len(order) and (order.min() < 0 or order.max() >= n):
        raise DomainError(f"order {order.tolist()} has indices outside 0..{n - 1}")
    return order


def score_orders(net: Net, table: Tensor, orders: Sequence[Sequence[int]]) -> np.ndarray:
    """Coherence scores of several equally long (partial) orders of one memory."""
    n = table.shape[0]
    orders = np.stack([_check_order(o, n) for o in orders])
    if orders.shape[1] == 0:
        return np.zeros(len(orders))
    mem_idx = np.tile(np.arange(n), (len(orders), 1))
    steps = teacher_forced(net, table, mem_idx, n, orders)
    total = steps[0].data.astype(np.float64)
    for s in steps[1:]:
        total = total + s.data
    return total


def coherence_score(params, sentences: Sequence[Sequence[int]], partial_order: Sequence[int],
                    config: ModelConfig | None = None) -> float:
    """Sum of log p(next = chosen | chosen prefix) over a (partial) order.

    Contrastive entries are never used here; the value is <= 0.
    """
    net = bind(params, config)
    sentences = _sentences(sentences)
    order = _check_order(partial_order, len(sentences))
    if len(order) == 0:
        return 0.0
    table = encode_sentences(net, sentences)
    return float(score_orders(net, table, [order])[0])
