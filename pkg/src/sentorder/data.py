"""Corpora, tokenization, vocabulary, embeddings, permutations, synthetic data.

Corpus files are UTF-8 JSON lines, one document per line::

    {"id": "doc-17", "sentences": ["First sentence .", "Second one ."]}

with sentences in their gold order.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, VocabularyError

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
MAX_SENTENCES = 40

_TOKEN_RE = re.compile(r"\d+(?:[.,]\d+)+|\w+(?:[-']\w+)*|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and peel punctuation into separate tokens.

    Numbers such as ``3.5`` or ``1,000`` and hyphenated words stay whole.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    sentences: tuple            # tuple of tuples of token ids, gold order
    text: tuple | None = None   # raw sentences, when known

    def __len__(self) -> int:
        return len(self.sentences)

    def permuted(self, order: Sequence[int], suffix: str = "") -> "Document":
        text = tuple(self.text[i] for i in order) if self.text is not None else None
        return Document(self.id + suffix, tuple(self.sentences[i] for i in order), text)


@dataclass
class RawDocument:
    id: str
    sentences: list[str]


class Vocab:
    """Token <-> id map with ``<pad>`` = 0 and ``<unk>`` = 1.

    Built tokens are ranked by descending frequency, ties broken
    lexicographically, so the result does not depend on document order.
    """

    def __init__(self, tokens: Sequence[str], counts: dict[str, int] | None = None):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.counts = dict(counts or {})

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_freq: int = 1,
              max_size: int | None = None) -> "Vocab":
        counts = Counter(tok for sent in sentences for tok in sent)
        ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[:max(0, max_size - 2)]
        return cls([PAD, UNK] + ranked, dict(counts))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.stoi.get(t, UNK_ID) for t in tokens)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]


@dataclass
class Corpus:
    train: list
    validation: list
    test: list
    vocab: Vocab | None = None

    def __post_init__(self):
        seen: dict[str, str] = {}
        for split in ("train", "validation", "test"):
            for doc in getattr(self, split):
                if seen.get(doc.id, split) != split:
                    raise ConfigError(f"document {doc.id!r} appears in {seen[doc.id]} and {split}")
                seen[doc.id] = split

    def splits(self) -> dict[str, list]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


# ---------------------------------------------------------------- corpus files

def read_corpus(path) -> list[RawDocument]:
    path = Path(path)
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = RawDocument(str(rec["id"]), [str(s) for s in rec["sentences"]])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad corpus record ({exc})") from None
            docs.append(doc)
    return docs


def write_corpus(docs: Iterable, path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            sentences = doc.sentences if isinstance(doc, RawDocument) else list(doc.text)
            fh.write(json.dumps({"id": doc.id, "sentences": list(sentences)}, ensure_ascii=False) + "\n")
            count += 1
    return count


def tokenize_documents(raw: Iterable[RawDocument], max_sentences: int = MAX_SENTENCES):
    """Tokenized (id, sentences, text) triples; over-long or empty documents are dropped."""
    out = []
    for doc in raw:
        if not doc.sentences:
            log.warning("document %s has no sentences; skipped", doc.id)
            continue
        if len(doc.sentences) > max_sentences:
            log.warning("document %s has %d sentences (> %d); skipped", doc.id,
                        len(doc.sentences), max_sentences)
            continue
        toks = [tokenize(s) for s in doc.sentences]
        if any(not t for t in toks):
            log.warning("document %s has a sentence with no tokens; skipped", doc.id)
            continue
        out.append((doc.id, toks, tuple(doc.sentences)))
    return out


def encode_documents(tokenized, vocab: Vocab) -> list[Document]:
    return [Document(i, tuple(vocab.encode(s) for s in toks), text) for i, toks, text in tokenized]


def build_corpus(train: Sequence[RawDocument], validation: Sequence[RawDocument],
                 test: Sequence[RawDocument] = (), min_freq: int = 1, max_size: int | None = None,
                 max_sentences: int = MAX_SENTENCES, vocab: Vocab | None = None) -> Corpus:
    """Tokenize all splits and encode them with a vocabulary built on train."""
    tok = {name: tokenize_documents(split, max_sentences)
           for name, split in (("train", train), ("validation", validation), ("test", test))}
    if vocab is None:
        vocab = Vocab.build((s for _, toks, _ in tok["train"] for s in toks), min_freq, max_size)
    return Corpus(*(encode_documents(tok[n], vocab) for n in ("train", "validation", "test")), vocab=vocab)


def load_corpus(train_path, validation_path, test_path=None, **kwargs) -> Corpus:
    test = read_corpus(test_path) if test_path else []
    return build_corpus(read_corpus(train_path), read_corpus(validation_path), test, **kwargs)


def encode_raw(raw: Sequence[RawDocument], vocab: Vocab, max_sentences: int = MAX_SENTENCES) -> list[Document]:
    """Encode with an existing vocabulary; unknown words map to ``<unk>``."""
    tokenized = tokenize_documents(raw, max_sentences)
    unknown = sum(1 for _, toks, _ in tokenized for s in toks for t in s if t not in vocab)
    if unknown:
        log.warning("%d tokens not in the vocabulary were mapped to %s", unknown, UNK)
    return encode_documents(tokenized, vocab)


# ---------------------------------------------------------------- embeddings

@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    trainable: bool = True
    coverage: float = 0.0
    skipped_lines: int = 0


def load_pretrained_embeddings(path, vocab: Vocab, d_word: int, seed: int = 0,
                               trainable: bool = True) -> EmbeddingTable:
    """Initialise an embedding table from a ``token v1 v2 ...`` text file.

    Rows for tokens absent from the file (and the special tokens) are drawn
    from N(0, 0.01^2). A line whose values cannot be parsed is skipped; a
    parsed line of the wrong width is a format error.
    """
    rng = np.random.default_rng([seed, 17])
    matrix = rng.normal(0.0, nn.EMBED_STD, (len(vocab), d_word))
    found = set()
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            token, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values])
            except ValueError:
                skipped += 1
                continue
            if len(vec) != d_word:
                raise FormatError(f"{path}:{lineno}: {len(vec)} values, expected {d_word}")
            if token in vocab.stoi and vocab.stoi[token] not in (PAD_ID, UNK_ID):
                matrix[vocab.stoi[token]] = vec
                found.add(token)
    if skipped:
        log.warning("%d malformed lines skipped in %s", skipped, path)
    real = len(vocab) - 2
    coverage = len(found) / real if real > 0 else 0.0
    return EmbeddingTable(matrix, trainable, coverage, skipped)


# ---------------------------------------------------------------- permutations

def sample_permutations(n: int, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Distinct non-identity permutations of ``range(n)``, uniformly without replacement."""
    if n < 2:
        return []
    total = math.factorial(n) - 1
    if count >= total:
        perms = list(itertools.permutations(range(n)))[1:]
        rng.shuffle(perms)
        return [tuple(p) for p in perms]
    if n <= 8:
        picks = rng.choice(total, size=count, replace=False) + 1
        return [_nth_permutation(n, int(i)) for i in picks]
    seen, out = set(), []
    ident = tuple(range(n))
    while len(out) < count:
        p = tuple(int(x) for x in rng.permutation(n))
        if p != ident and p not in seen:
            seen.add(p)
            out.append(p)
    return out


def _nth_permutation(n: int, index: int) -> tuple[int, ...]:
    items = list(range(n))
    out = []
    for k in range(n, 0, -1):
        f = math.factorial(k - 1)
        q, index = divmod(index, f)
        out.append(items.pop(q))
    return tuple(out)


def generate_permutations(doc: Document, count: int, rng: np.random.Generator) -> list[Document]:
    if len(doc) < 2:
        log.warning("document %s has a single sentence; no permutations", doc.id)
        return []
    perms = sample_permutations(len(doc), count, rng)
    return [doc.permuted(p, f"#perm{j}") for j, p in enumerate(perms)]


# ---------------------------------------------------------------- synthetic corpora

ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
            "ninth", "tenth")


@dataclass
class SyntheticSpec:
    """Desk-scale corpus whose gold order is recoverable by a fixed rule.

    ``ordinal`` documents carry a position word in each sentence (a local
    cue). ``topic-chain`` documents link sentence i to i+1 through a shared
    chain token; the chain direction is only visible jointly (see
    :func:`topic_chain_order`), so reading the whole set helps.
    """
    kind: str = "ordinal"
    n_train: int = 2000
    n_validation: int = 200
    n_test: int = 500
    min_sentences: int = 3
    max_sentences: int = 8
    vocab_size: int = 200
    min_filler: int = 3
    max_filler: int = 6
    distractor_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ordinal", "topic-chain"):
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise ConfigError("need 1 <= min_sentences <= max_sentences")
        if not 0 <= self.min_filler <= self.max_filler:
            raise ConfigError("need 0 <= min_filler <= max_filler")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ConfigError("distractor_rate must lie in [0, 1]")
        if self.kind == "topic-chain" and self.min_sentences < 3:
            raise ConfigError("topic-chain documents need at least 3 sentences")
        self.inventory()

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def inventory(self) -> dict[str, list[str]]:
        """Token classes, totalling exactly ``vocab_size`` tokens."""
        v = self.vocab_size
        if self.kind == "ordinal":
            markers = [ORDINALS[i] if i < len(ORDINALS) else f"ord{i + 1}"
                       for i in range(self.max_sentences)]
            n_fill = v - len(markers)
            if n_fill < 1:
                raise ConfigError(f"vocab_size {v} too small for {len(markers)} ordinal markers")
            return {"markers": markers, "filler": [f"w{i:03d}" for i in range(n_fill)]}
        n_end = max(1, v // 10)
        n_chain = max(0, (4 * v) // 10)
        n_fill = v - 2 - 2 * n_end - n_chain
        if n_chain < self.max_sentences - 1 or n_fill < 1:
            raise ConfigError(f"vocab_size {v} too small for chains of {self.max_sentences} sentences")
        return {"flags": ["fa", "fb"],
                "a": [f"a{i:02d}" for i in range(n_end)],
                "b": [f"b{i:02d}" for i in range(n_end)],
                "chain": [f"c{i:03d}" for i in range(n_chain)],
                "filler": [f"w{i:03d}" for i in range(n_fill)]}


def _fillers(inv, spec: SyntheticSpec, rng) -> list[str]:
    k = int(rng.integers(spec.min_filler, spec.max_filler + 1))
    return [inv["filler"][j] for j in rng.integers(0, len(inv["filler"]), size=k)]


def _ordinal_doc(spec: SyntheticSpec, inv, n: int, rng) -> list[str]:
    sentences = []
    for i in range(n):
        words = _fillers(inv, spec, rng)
        words.insert(int(rng.integers(0, len(words) + 1)), inv["markers"][i])
        sentences.append(" ".join(words))
    return sentences


def topic_chain_order(sentences: Sequence[Sequence[str]]) -> list[list[int]]:
    """All orders allowed by the topic-chain rule (rule-based oracle).

    The flag token (``fa``/``fb``) found in interior sentences names the
    class of the opening chain token; consecutive sentences must share a
    chain token (``c...``). Returns every Hamiltonian path from the opening
    sentence; a well-formed document has exactly one.
    """
    bags = [set(s) for s in sentences]
    flags = {t for b in bags for t in b if t in ("fa", "fb")}
    if len(flags) != 1:
        return []
    cls = "a" if flags.pop() == "fa" else "b"
    starts = [i for i, b in enumerate(bags) if any(t[0] == cls and t[1:].isdigit() for t in b)]
    chains = [{t for t in b if t.startswith("c") and t[1:].isdigit()} for b in bags]
    n = len(bags)
    found: list[list[int]] = []

    def extend(path, used):
        if len(path) == n:
            found.append(list(path))
            return
        for j in range(n):
            if j not in used and chains[path[-1]] & chains[j]:
                path.append(j)
                used.add(j)
                extend(path, used)
                used.discard(j)
                path.pop()

    for s in starts:
        extend([s], {s})
    return found


def _topic_chain_doc(spec: SyntheticSpec, inv, n: int, rng) -> list[str]:
    flag = int(rng.integers(0, 2))
    first_cls, last_cls = ("a", "b") if flag == 0 else ("b", "a")
    c_first = inv[first_cls][int(rng.integers(len(inv[first_cls])))]
    c_last = inv[last_cls][int(rng.integers(len(inv[last_cls])))]
    interior = [inv["chain"][j] for j in rng.choice(len(inv["chain"]), size=n - 1, replace=False)]
    chain = [c_first] + interior + [c_last]
    base = []
    for i in range(n):
        words = [chain[i], chain[i + 1]] + _fillers(inv, spec, rng)
        if 0 < i < n - 1:
            words.append(inv["flags"][flag])
        base.append(words)
    for _ in range(10):
        bags = [list(w) for w in base]
        for i in range(n):
            if rng.random() < spec.distractor_rate:
                options = [chain[m] for m in range(1, n) if m not in (i, i + 1)]
                if options:
                    bags[i].append(options[int(rng.integers(len(options)))])
        if topic_chain_order(bags) == [list(range(n))]:
            break
    else:
        bags = base
    return [" ".join(rng.permutation(b).tolist()) for b in bags]


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """Generate train/validation/test splits encoded with the full token inventory."""
    inv = spec.inventory()
    rng = np.random.default_rng(spec.seed)
    make = _ordinal_doc if spec.kind == "ordinal" else _topic_chain_doc
    raw = {}
    for split, count in (("train", spec.n_train), ("validation", spec.n_validation),
                         ("test", spec.n_test)):
        docs = []
        for j in range(count):
            n = int(rng.integers(spec.min_sentences, spec.max_sentences + 1))
            docs.append(RawDocument(f"{split}-{j:05d}", make(spec, inv, n, rng)))
        raw[split] = docs
    tokens = sorted(t for group in inv.values() for t in group)
    vocab = Vocab([PAD, UNK] + tokens)
    return build_corpus(raw["train"], raw["validation"], raw["test"], vocab=vocab,
                        max_sentences=max(MAX_SENTENCES, spec.max_sentences))


def ordinal_order(sentences: Sequence[Sequence[str]]) -> list[int]:
    """Rule-based oracle for ordinal-marker documents: sort by marker rank."""
    def rank(words):
        for w in words:
            if w in ORDINALS:
                return ORDINALS.index(w)
            if w.startswith("ord") and w[3:].isdigit():
                return int(w[3:]) - 1
        raise ValueError("sentence without an ordinal marker")
    ranks = [rank(s) for s in sentences]
    return sorted(range(len(sentences)), key=ranks.__getitem__)
