"""Word salience and sentence-embedding export.

Salience of word ``w_i`` in sentence ``s`` is the L2 norm of the gradient of
the decoder's score for ``s`` (at the step where ``s`` is the correct next
sentence) with respect to the embedding vector of ``w_i``. Decoder states
are held fixed; only the sentence encoder is differentiated.
"""
from __future__ import annotations

import html
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import nn
from . import tensor as T

log = logging.getLogger(__name__)


@dataclass
class SentenceSalience:
    position: int
    token_ids: list
    norms: list
    normalized: list
    tokens: list | None = None


@dataclass
class SalienceMap:
    doc_id: str
    sentences: list = field(default_factory=list)
    normalization: str = "minmax-per-sentence"

    def to_dict(self) -> dict:
        return asdict(self)


def decoder_states(net: M.Net, table: T.Tensor) -> list[np.ndarray]:
    """Teacher-forced decoder hidden states h_1..h_n for the memory order."""
    n = table.shape[0]
    memory = T.reshape(table, (1, n, table.shape[1]))
    state = M.initial_decoder_state(net, memory)
    x = M.initial_input(net, 1)
    out = []
    for t in range(n):
        state = nn.lstm_step(net.decoder_lstm, state, x)
        out.append(state.h.data.copy())
        x = T.take(table, np.array([t]))
    return out


def _score_words(net: M.Net, words: Sequence[T.Tensor], h: np.ndarray) -> T.Tensor:
    s = M.run_sentence_lstm(net, words, np.ones((1, len(words)), dtype=bool))
    return T.total(net.decoder_scorer(s, T.Tensor(np.asarray(h, dtype=net.dtype).reshape(1, -1))))


def sentence_score(params, config: M.ModelConfig, word_vectors: np.ndarray, h: np.ndarray) -> float:
    """Score ``e`` of a sentence given its word vectors (L, d_word) directly."""
    net = M.Net(params, config)
    words = [T.Tensor(np.asarray(v, dtype=net.dtype)[None, :]) for v in word_vectors]
    return _score_words(net, words, h).item()


def score_gradients(params, config: M.ModelConfig, tokens: Sequence[int], h: np.ndarray,
                    watch_params: bool = False):
    """Score ``f(s, h)`` of one sentence and its gradients.

    Returns ``(score, word_grads, param_grads)`` where ``word_grads`` has one
    row per token and ``param_grads`` is filled only with ``watch_params``.
    """
    tape = T.Tape()
    bound = tape.watch_all(dict(params.items())) if watch_params else params.as_constants()
    table = params["embedding"]
    ids = np.asarray(tokens, dtype=np.intp)
    words = [tape.watch(f"word.{i:04d}", table[ids[i]][None, :].copy()) for i in range(len(ids))]
    score = _score_words(M.Net(bound, config), words, h)
    grads = tape.backward(score)
    word_grads = np.stack([grads[f"word.{i:04d}"][0] for i in range(len(ids))])
    param_grads = {k: v for k, v in grads.items() if not k.startswith("word.")} if watch_params else {}
    return score.item(), word_grads, param_grads


def passthrough_model(vocab_size: int = 20, d_word: int = 4, d_hidden: int = 3, seed: int = 0,
                      precision="float64") -> tuple[T.ParamStore, M.ModelConfig]:
    """Toy model whose score depends (almost) only on the last word of a sentence.

    The word LSTM keeps no recurrent weights and a strongly closed forget
    gate, so its final state is a squashed copy of the last word's first
    coordinate; the decoder scorer is bilinear with ``W = 0`` and
    ``b = e_0``, i.e. it reads coordinate 0 of the sentence vector. Earlier
    words reach the score only through the leaky forget gate, damped by
    ``sigmoid(-2)`` per step.
    """
    config = M.ModelConfig(vocab_size=vocab_size, d_word=d_word, d_hidden=d_hidden, d_mlp=2,
                           read_cycles=1, scorer="bilinear", use_encoder=False)
    params = M.init_params(config, seed, precision)
    rng = np.random.default_rng([seed, 3])
    params["embedding"] = rng.uniform(-1.0, 1.0, (vocab_size, d_word))
    h = d_hidden
    w_ih = np.zeros((4 * h, d_word))
    bias = np.zeros(4 * h)
    bias[0:h] = 6.0                 # input gate open
    bias[h:2 * h] = -2.0            # forget gate mostly shut
    w_ih[2 * h, 0] = 1.5            # candidate copies word coordinate 0 into cell 0
    bias[3 * h:] = 6.0              # output gate open
    params["sentence_lstm.w_ih"] = w_ih
    params["sentence_lstm.w_hh"] = np.zeros((4 * h, h))
    params["sentence_lstm.bias"] = bias
    params["decoder_scorer.w"] = np.zeros((h, h))
    b = np.zeros(h)
    b[0] = 1.0
    params["decoder_scorer.b"] = b
    return params, config


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def word_salience(params, doc, config: M.ModelConfig, vocab=None) -> SalienceMap:
    """Gradient-norm salience for every word of every sentence in gold order."""
    sentences = list(doc.sentences) if hasattr(doc, "sentences") else list(doc)
    doc_id = getattr(doc, "id", "")
    result = SalienceMap(doc_id)
    if len(sentences) < 2:
        log.warning("document %r has a single sentence; no next-sentence decision to explain", doc_id)
        return result
    net = M.Net(params, config)
    table = M.encode_sentences(net, sentences)
    states = decoder_states(net, table)
    for t, tokens in enumerate(sentences):
        _, grads, _ = score_gradients(params, config, tokens, states[t])
        norms = np.sqrt((grads.astype(np.float64) ** 2).sum(axis=1))
        result.sentences.append(SentenceSalience(
            t, [int(i) for i in tokens], norms.tolist(), _minmax(norms).tolist(),
            vocab.decode(tokens) if vocab is not None else None))
    return result


def render_html(smap: SalienceMap) -> str:
    """Shade words by normalized salience (darker = more salient)."""
    lines = [f"<div class='salience' data-doc='{html.escape(smap.doc_id)}'>"]
    for sent in smap.sentences:
        words = sent.tokens or [str(i) for i in sent.token_ids]
        spans = []
        for w, v in zip(words, sent.normalized):
            grey = int(round(255 * 0.8 * (1.0 - v)))
            spans.append(f"<span style='color: rgb({grey},{grey},{grey})'>{html.escape(w)}</span>")
        lines.append("<p>" + " ".join(spans) + "</p>")
    lines.append("</div>")
    return "\n".join(lines) + "\n"


def render_ansi(smap: SalienceMap) -> str:
    out = []
    for sent in smap.sentences:
        words = sent.tokens or [str(i) for i in sent.token_ids]
        # 24-step greyscale ramp, 232 (dark) .. 255 (light); salient words are bright
        out.append(" ".join(f"\x1b[38;5;{232 + int(round(v * 23))}m{w}\x1b[0m"
                            for w, v in zip(words, sent.normalized)))
    return "\n".join(out) + "\n"


def export_sentence_embeddings(params, docs: Sequence, path, config: M.ModelConfig) -> int:
    """Write one JSON line per sentence: doc id, position, n and embedding."""
    net = M.Net(params, config)
    count = 0
    path = Path(path)
    with open(path, "w") as fh:
        for doc in docs:
            sentences = list(doc.sentences)
            emb = M.encode_sentences(net, sentences).data.astype(np.float64)
            for pos in range(len(sentences)):
                rec = {"doc_id": doc.id, "position": pos, "n": len(sentences),
                       "embedding": emb[pos].tolist()}
                fh.write(json.dumps(rec) + "\n")
                count += 1
    return count
