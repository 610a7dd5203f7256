"""Beam-search ordering, order discrimination and evaluation metrics.

Orders are 0-based: ``order[t]`` is the index of the sentence placed at
position ``t``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import nn
from . import tensor as T
from .errors import DomainError

DEFAULT_BEAM = 100


@dataclass
class BeamHypothesis:
    chosen: tuple
    log_prob: float
    h: np.ndarray
    c: np.ndarray


@dataclass
class OrderingResult:
    order: list
    score: float
    beam_width: int
    expansions: int = 0
    max_live: int = 0


def _sentences(doc) -> list:
    return list(doc.sentences) if hasattr(doc, "sentences") else list(doc)


def beam_order(params, sentences, beam_width: int = DEFAULT_BEAM,
               config: M.ModelConfig | None = None) -> OrderingResult:
    """Most coherent permutation found by beam search on the coherence score.

    Each hypothesis is extended by every sentence it has not used yet; the
    ``beam_width`` best by accumulated log-probability survive, ties going
    to the lexicographically smaller index sequence.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    net = M.bind(params, config)
    sentences = _sentences(sentences)
    n = len(sentences)
    if n == 0:
        raise DomainError("nothing to order")
    table = M.encode_sentences(net, sentences)
    memory1 = T.reshape(table, (1, n, table.shape[1]))
    state0 = M.initial_decoder_state(net, memory1)
    beams = [BeamHypothesis((), 0.0, state0.h.data[0], state0.c.data[0])]
    x0 = M.initial_input(net, 1).data[0]
    expansions = max_live = 0
    all_idx = np.arange(n)
    for t in range(n):
        b = len(beams)
        state = nn.LstmState(T.Tensor(np.stack([h.h for h in beams])),
                             T.Tensor(np.stack([h.c for h in beams])))
        prev = np.stack([x0 if not hyp.chosen else table.data[hyp.chosen[-1]] for hyp in beams])
        memory = T.take(table, np.tile(all_idx, (b, 1)))
        out = M.decode_step(net, state, T.Tensor(prev), memory)
        logp = out.log_probs.data.astype(np.float64)
        candidates = []
        for r, hyp in enumerate(beams):
            used = set(hyp.chosen)
            for j in range(n):
                if j not in used:
                    candidates.append((-(hyp.log_prob + logp[r, j]), hyp.chosen + (j,), r))
        expansions += len(candidates)
        candidates.sort(key=lambda item: (item[0], item[1]))
        kept = candidates[:beam_width]
        max_live = max(max_live, len(kept))
        beams = [BeamHypothesis(seq, -neg, out.state.h.data[r], out.state.c.data[r])
                 for neg, seq, r in kept]
    best = beams[0]
    return OrderingResult(list(best.chosen), float(best.log_prob), beam_width, expansions, max_live)


def greedy_order(params, sentences, config: M.ModelConfig | None = None) -> OrderingResult:
    return beam_order(params, sentences, 1, config)


# ---------------------------------------------------------------- metrics

def _check_pair(pred, gold) -> tuple[list, list]:
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise DomainError(f"length mismatch: {len(pred)} vs {len(gold)}")
    if sorted(pred) != sorted(gold) or len(set(gold)) != len(gold):
        raise DomainError("orders must be permutations of the same items")
    return pred, gold


def positional_accuracy(pred: Sequence, gold: Sequence) -> float:
    """Fraction of positions holding the same item in both orders."""
    pred, gold = _check_pair(pred, gold)
    if not gold:
        raise DomainError("empty order")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def count_inversions(seq: Sequence[int]) -> int:
    """Number of pairs i < j with seq[i] > seq[j] (merge sort, O(n log n))."""
    def sort(a):
        if len(a) <= 1:
            return a, 0
        mid = len(a) // 2
        left, x = sort(a[:mid])
        right, y = sort(a[mid:])
        merged, inv, i, j = [], x + y, 0, 0
        while i < len(left) and j < len(right):
            if left[i] <= right[j]:
                merged.append(left[i])
                i += 1
            else:
                merged.append(right[j])
                inv += len(left) - i
                j += 1
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged, inv
    return sort(list(seq))[1]


def discordant_pairs(pred: Sequence, gold: Sequence) -> int:
    pred, gold = _check_pair(pred, gold)
    rank = {item: r for r, item in enumerate(gold)}
    return count_inversions([rank[p] for p in pred])


def kendall_tau(pred: Sequence, gold: Sequence) -> float:
    """1 - 2 N / C(n, 2), with N the pairs ordered differently from gold."""
    pred, gold = _check_pair(pred, gold)
    n = len(gold)
    if n < 2:
        raise DomainError("Kendall's tau needs at least two items")
    return 1.0 - 2.0 * discordant_pairs(pred, gold) / math.comb(n, 2)


# ---------------------------------------------------------------- discrimination

@dataclass
class Discrimination:
    choice: str                 # "original", "permuted" or "tie"
    original_score: float
    permuted_score: float

    @property
    def credit(self) -> float:
        return {"original": 1.0, "tie": 0.5, "permuted": 0.0}[self.choice]


def match_permutation(original: Sequence, permuted: Sequence) -> list[int]:
    """Indices into ``original`` realising ``permuted`` (duplicates matched in order)."""
    original = [tuple(s) for s in original]
    permuted = [tuple(s) for s in permuted]
    if sorted(original) != sorted(permuted):
        raise DomainError("permuted document does not contain the same sentences")
    slots: dict[tuple, list[int]] = {}
    for i, s in enumerate(original):
        slots.setdefault(s, []).append(i)
    return [slots[s].pop(0) for s in permuted]


def discriminate(params, doc, permuted_doc, config: M.ModelConfig | None = None) -> Discrimination:
    """Pick the more coherent of a document and a permutation of it."""
    net = M.bind(params, config)
    sentences = _sentences(doc)
    order = match_permutation(sentences, _sentences(permuted_doc))
    table = M.encode_sentences(net, sentences)
    # one pass per order: identical inputs must give bitwise-identical scores
    orig = M.score_orders(net, table, [list(range(len(sentences)))])[0]
    perm = M.score_orders(net, table, [order])[0]
    if orig > perm:
        choice = "original"
    elif perm > orig:
        choice = "permuted"
    else:
        choice = "tie"
    return Discrimination(choice, float(orig), float(perm))


@dataclass
class DiscriminationReport:
    accuracy: float             # ties count half
    pairs: int
    wins: int
    ties: int
    losses: int

    def to_dict(self) -> dict:
        return asdict(self)


def discrimination_accuracy(params, docs: Sequence, permutations: int = 20, seed: int = 0,
                            config: M.ModelConfig | None = None) -> DiscriminationReport:
    """Score each document against sampled permutations of itself."""
    from .data import sample_permutations

    net = M.bind(params, config)
    wins = ties = losses = 0
    for i, doc in enumerate(docs):
        sentences = _sentences(doc)
        n = len(sentences)
        perms = sample_permutations(n, permutations, np.random.default_rng([seed, i]))
        if not perms:
            continue
        table = M.encode_sentences(net, sentences)
        scores = M.score_orders(net, table, [list(range(n))] + [list(p) for p in perms])
        for s in scores[1:]:
            if scores[0] > s:
                wins += 1
            elif scores[0] < s:
                losses += 1
            else:
                ties += 1
    pairs = wins + ties + losses
    acc = (wins + 0.5 * ties) / pairs if pairs else float("nan")
    return DiscriminationReport(acc, pairs, wins, ties, losses)


# ---------------------------------------------------------------- evaluation

@dataclass
class DocumentRecord:
    id: str
    n: int
    predicted: list             # gold indices in predicted order
    accuracy: float
    tau: float | None
    score: float | None = None


@dataclass
class MetricsReport:
    accuracy: float             # micro-averaged over sentence positions
    mean_document_accuracy: float
    mean_tau: float             # unweighted mean over documents with n >= 2
    documents: int
    tau_documents: int
    single_sentence_documents: int
    records: list = field(default_factory=list)
    discrimination: dict | None = None

    def to_dict(self, records: bool = True) -> dict:
        d = asdict(self)
        if not records:
            d.pop("records")
        return d

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


Predictor = Callable[[list, np.random.Generator], "tuple[list, float | None]"]


class ModelPredictor:
    """Beam-search predictor; picklable so evaluation can fan out to workers."""

    def __init__(self, params, config: M.ModelConfig, beam_width: int = DEFAULT_BEAM):
        self.net = M.bind(params, config)
        self.beam_width = beam_width

    def __call__(self, sentences, rng):
        res = beam_order(self.net, sentences, self.beam_width)
        return res.order, res.score


def model_predictor(params, config: M.ModelConfig, beam_width: int = DEFAULT_BEAM) -> Predictor:
    return ModelPredictor(params, config, beam_width)


def oracle_predictor(sentences, rng):
    """Passthrough: sees documents unshuffled and returns them as given."""
    return list(range(len(sentences))), None


oracle_predictor.shuffle = False


def random_predictor(sentences, rng):
    return [int(i) for i in rng.permutation(len(sentences))], None


def _evaluate_one(args):
    i, doc_id, sentences, predictor, seed, shuffle = args
    rng = np.random.default_rng([seed, i])
    n = len(sentences)
    shown = [int(j) for j in rng.permutation(n)] if shuffle else list(range(n))
    pred, score = predictor([sentences[j] for j in shown], rng)
    predicted = [shown[j] for j in pred]
    gold = list(range(n))
    acc = positional_accuracy(predicted, gold)
    tau = kendall_tau(predicted, gold) if n >= 2 else None
    return DocumentRecord(doc_id, n, predicted, acc, tau, score)


def summarize(records: Sequence[DocumentRecord]) -> MetricsReport:
    if not records:
        raise DomainError("no documents to evaluate")
    correct = sum(r.accuracy * r.n for r in records)
    positions = sum(r.n for r in records)
    taus = [r.tau for r in records if r.tau is not None]
    return MetricsReport(
        accuracy=correct / positions,
        mean_document_accuracy=float(np.mean([r.accuracy for r in records])),
        mean_tau=float(np.mean(taus)) if taus else float("nan"),
        documents=len(records), tau_documents=len(taus),
        single_sentence_documents=len(records) - len(taus),
        records=list(records))


def evaluate(params, docs: Sequence, config: M.ModelConfig | None = None,
             beam_width: int = DEFAULT_BEAM, seed: int = 0, predictor: Predictor | None = None,
             workers: int = 1) -> MetricsReport:
    """Order every document from a seeded shuffle and score against gold.

    The shuffle keeps index tie-breaking from favouring the gold order.
    """
    if predictor is None:
        predictor = model_predictor(params, config, beam_width)
    shuffle = getattr(predictor, "shuffle", True)
    jobs = [(i, getattr(d, "id", str(i)), _sentences(d), predictor, seed, shuffle)
            for i, d in enumerate(docs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_evaluate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        records = [_evaluate_one(j) for j in jobs]
    return summarize(records)
