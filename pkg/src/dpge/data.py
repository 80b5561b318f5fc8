"""Corpora, vocabulary, MLM/NSP pretraining instances and the synthetic
downstream classification task.

Corpus file format: UTF-8 text, documents separated by blank lines, one
sentence per line, whitespace tokenisation.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)


class DataConfigError(ValueError):
    pass


Sentence = Tuple[str, ...]
Document = Tuple[Sentence, ...]


@dataclass(frozen=True)
class Corpus:
    documents: Tuple[Document, ...]

    def __post_init__(self):
        if any(len(doc) == 0 for doc in self.documents):
            raise DataConfigError("corpus contains an empty document")

    def __len__(self):
        return len(self.documents)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for doc in self.documents for s in doc)

    def sentences(self) -> Iterable[Sentence]:
        for doc in self.documents:
            yield from doc


def parse_corpus(text: str) -> Corpus:
    docs, current = [], []
    for line in text.splitlines():
        tokens = tuple(line.split())
        if tokens:
            current.append(tokens)
        elif current:
            docs.append(tuple(current))
            current = []
    if current:
        docs.append(tuple(current))
    return Corpus(tuple(docs))


def load_corpus(path) -> Corpus:
    """Read a corpus file. Raises OSError on unreadable or non-UTF-8 input."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise OSError(f"{path}: not valid UTF-8 ({exc.reason} at byte {exc.start})") from exc
    return parse_corpus(text)


def write_corpus(corpus: Corpus, path) -> None:
    blocks = ["\n".join(" ".join(s) for s in doc) for doc in corpus.documents]
    Path(path).write_text("\n\n".join(blocks) + ("\n" if blocks else ""), encoding="utf-8")


class Vocab:
    """Dense token <-> id map with the five special tokens at ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataConfigError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataConfigError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(corpus: Corpus, size: int) -> Vocab:
    """Keep the (size - 5) most frequent tokens; ties broken lexicographically."""
    if size < NUM_SPECIAL + 1:
        raise DataConfigError(f"vocab size must be >= {NUM_SPECIAL + 1}, got {size}")
    counts = Counter(t for s in corpus.sentences() for t in s)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: size - NUM_SPECIAL] if t not in SPECIAL_TOKENS]
    return Vocab(list(SPECIAL_TOKENS) + kept)


@dataclass
class PretrainExample:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_targets: np.ndarray
    nsp_label: int


@dataclass
class Batch:
    """Model input. Exactly one of (mlm_targets, class_labels) is set."""
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_targets: Optional[np.ndarray] = None
    nsp_labels: Optional[np.ndarray] = None
    class_labels: Optional[np.ndarray] = None

    def __len__(self):
        return self.token_ids.shape[0]

    def __getitem__(self, idx) -> "Batch":
        def take(a):
            return None if a is None else a[idx]
        if isinstance(idx, (int, np.integer)):
            idx = [int(idx)]
        return Batch(self.token_ids[idx], self.segment_ids[idx], self.attention_mask[idx],
                     take(self.mlm_targets), take(self.nsp_labels), take(self.class_labels))


def collate_pretrain(examples: Sequence[PretrainExample]) -> Batch:
    return Batch(
        token_ids=np.stack([e.token_ids for e in examples]),
        segment_ids=np.stack([e.segment_ids for e in examples]),
        attention_mask=np.stack([e.attention_mask for e in examples]),
        mlm_targets=np.stack([e.mlm_targets for e in examples]),
        nsp_labels=np.array([e.nsp_label for e in examples], dtype=np.int64),
    )


class PretrainData:
    """Stacked pretraining examples; ``batch(idx)`` slices a model Batch."""

    def __init__(self, examples: Sequence[PretrainExample]):
        if not examples:
            raise DataConfigError("no pretraining examples")
        self._batch = collate_pretrain(examples)

    def __len__(self):
        return len(self._batch)

    def batch(self, idx=slice(None)) -> Batch:
        if isinstance(idx, slice):
            idx = np.arange(len(self))[idx]
        return self._batch[np.asarray(idx, dtype=np.int64)]


def _truncate_pair(a: list, b: list, max_tokens: int) -> None:
    while len(a) + len(b) > max_tokens:
        longer = a if len(a) > len(b) else b
        longer.pop()


def _mask_tokens(ids: np.ndarray, eligible: np.ndarray, vocab_size: int,
                 rate: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    targets = np.full(ids.shape, -1, dtype=np.int64)
    positions = np.flatnonzero(eligible)
    if rate <= 0 or positions.size == 0:
        return ids, targets
    n_mask = max(1, int(math.floor(rate * positions.size)))
    chosen = np.sort(rng.choice(positions, size=n_mask, replace=False))
    ids = ids.copy()
    targets[chosen] = ids[chosen]
    for pos in chosen:
        r = rng.random()
        if r < 0.8:
            ids[pos] = MASK
        elif r < 0.9:
            ids[pos] = rng.integers(NUM_SPECIAL, vocab_size)
    return ids, targets


def make_pretrain_examples(corpus: Corpus, vocab: Vocab, seq_len: int, seed: int,
                           mask_rate: float = 0.15, dupe_factor: int = 1
                           ) -> List[PretrainExample]:
    """Sentence-pair MLM/NSP instances, BERT style.

    For each document a chunk of consecutive sentences is filled greedily up to
    ``seq_len - 3`` tokens and split into segments A and B. With probability 0.5
    B is replaced by sentences from a different random document (nsp_label 0).
    The longer segment is truncated first. Of the non-special positions,
    ``mask_rate`` are selected; 80% become [MASK], 10% a random token, 10% stay.
    """
    if seq_len < 8:
        raise DataConfigError(f"seq_len must be >= 8, got {seq_len}")
    if len(corpus) < 2:
        raise DataConfigError("need at least two documents to draw NSP negatives")
    rng = np.random.default_rng(seed)
    max_tokens = seq_len - 3
    docs = [[vocab.encode(s) for s in doc] for doc in corpus.documents]
    out: List[PretrainExample] = []

    for _ in range(dupe_factor):
        for d, doc in enumerate(docs):
            i = 0
            while i < len(doc):
                chunk, length = [], 0
                while i < len(doc) and length < max_tokens:
                    chunk.append(doc[i])
                    length += len(doc[i])
                    i += 1
                is_next = rng.random() < 0.5
                if len(chunk) == 1 and is_next:
                    # borrow the following sentence so a true pair exists
                    if i < len(doc):
                        chunk.append(doc[i])
                        i += 1
                    elif len(doc) > 1:
                        chunk.insert(0, doc[i - 2])
                    else:
                        is_next = False
                if is_next:
                    split = int(rng.integers(1, len(chunk)))
                    seg_a = [t for s in chunk[:split] for t in s]
                    seg_b = [t for s in chunk[split:] for t in s]
                else:
                    split = int(rng.integers(1, len(chunk))) if len(chunk) > 1 else 1
                    seg_a = [t for s in chunk[:split] for t in s]
                    # unused sentences go back to the stream
                    i -= len(chunk) - split
                    other = int(rng.integers(0, len(docs) - 1))
                    other += other >= d
                    odoc = docs[other]
                    j = int(rng.integers(0, len(odoc)))
                    seg_b = []
                    while j < len(odoc) and len(seg_b) < max_tokens - len(seg_a):
                        seg_b.extend(odoc[j])
                        j += 1
                _truncate_pair(seg_a, seg_b, max_tokens)
                if not seg_a or not seg_b:
                    continue

                ids = [CLS] + seg_a + [SEP] + seg_b + [SEP]
                segs = [0] * (len(seg_a) + 2) + [1] * (len(seg_b) + 1)
                n = len(ids)
                token_ids = np.zeros(seq_len, dtype=np.int64)
                token_ids[:n] = ids
                segment_ids = np.zeros(seq_len, dtype=np.int64)
                segment_ids[:n] = segs
                attention = np.zeros(seq_len, dtype=np.int64)
                attention[:n] = 1
                eligible = (attention == 1) & (token_ids >= NUM_SPECIAL)
                eligible &= token_ids != UNK
                token_ids, targets = _mask_tokens(token_ids, eligible, len(vocab),
                                                  mask_rate, rng)
                out.append(PretrainExample(token_ids, segment_ids, attention, targets,
                                           int(is_next)))
    return out


def split_validation(examples: Sequence, fraction: float = 0.05, seed: int = 0):
    """Deterministic disjoint split; |validation| = round(fraction * N)."""
    if not 0 < fraction < 1:
        raise DataConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(examples)
    n_val = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [e for i, e in enumerate(examples) if i not in val_idx]
    val = [e for i, e in enumerate(examples) if i in val_idx]
    return train, val


@dataclass
class ClassificationData:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray
    trigger_ids: Tuple[int, ...]

    def __len__(self):
        return len(self.labels)

    def batch(self, idx=slice(None)) -> Batch:
        ids = self.token_ids[idx]
        return Batch(ids, np.zeros_like(ids), self.attention_mask[idx],
                     class_labels=self.labels[idx])


def trigger_family(vocab: Vocab, size: int = 4) -> Tuple[int, ...]:
    """The last `size` ids of the vocabulary (its least frequent kept tokens)."""
    if len(vocab) - NUM_SPECIAL < size + 2:
        raise DataConfigError("vocabulary too small for a trigger family")
    return tuple(range(len(vocab) - size, len(vocab)))


class _RunIndex:
    """Set of id sequences, queried for any verbatim occurrence inside a longer sequence."""

    def __init__(self, runs: Sequence[Sequence[int]]):
        self.runs = {tuple(int(t) for t in r) for r in runs if len(r) > 0}
        self.lengths = sorted({len(r) for r in self.runs})

    def occurs_in(self, seq: Sequence[int]) -> bool:
        seq = tuple(seq)
        return any(seq[i:i + k] in self.runs
                   for k in self.lengths for i in range(len(seq) - k + 1))


def make_synthetic_classification(vocab: Vocab, n: int, seed: int, seq_len: int = 32,
                                  num_triggers: int = 4,
                                  exclude: Optional[Sequence[Sequence[int]]] = None
                                  ) -> ClassificationData:
    """Balanced binary task: positives carry at least one trigger-family token.

    Sequences are ``[CLS] filler... [SEP]`` with filler drawn uniformly from the
    non-special, non-trigger ids. ``exclude`` lists id sequences (e.g. encoded
    pretraining sentences) that must not appear verbatim; offending draws are
    resampled.
    """
    if n < 2:
        raise DataConfigError(f"need n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    triggers = trigger_family(vocab, num_triggers)
    filler_hi = triggers[0]
    excluded = _RunIndex(exclude or [])
    labels = np.array([0] * (n // 2) + [1] * (n - n // 2), dtype=np.int64)
    rng.shuffle(labels)

    ids = np.zeros((n, seq_len), dtype=np.int64)
    mask = np.zeros((n, seq_len), dtype=np.int64)
    for r in range(n):
        while True:
            length = int(rng.integers(seq_len // 2, seq_len - 1))
            body = rng.integers(NUM_SPECIAL, filler_hi, size=length)
            if labels[r] == 1:
                k = int(rng.integers(1, 3))
                pos = rng.choice(length, size=k, replace=False)
                body[pos] = rng.choice(triggers, size=k)
            if not excluded.occurs_in(body.tolist()):
                break
        row = [CLS] + body.tolist() + [SEP]
        ids[r, :len(row)] = row
        mask[r, :len(row)] = 1
    return ClassificationData(ids, mask, labels, triggers)


def synthetic_corpus(num_tokens: int, seed: int, vocab_words: int = 400,
                     num_topics: int = 8, sentence_len: Tuple[int, int] = (6, 14),
                     doc_sentences: Tuple[int, int] = (4, 12)) -> Corpus:
    """A learnable toy corpus: topic-conditioned first-order Markov text.

    Each topic owns a sparse transition table over a shared word list, so
    masked tokens are predictable from their neighbours and the document topic.
    """
    rng = np.random.default_rng(seed)
    words = [f"w{i:04d}" for i in range(vocab_words)]
    # Zipf-ish unigram prior, sparse per-topic successors
    prior = 1.0 / np.arange(1, vocab_words + 1) ** 1.1
    prior /= prior.sum()
    fanout = 6
    succ = rng.choice(vocab_words, size=(num_topics, vocab_words, fanout), p=prior)
    weights = rng.dirichlet(np.ones(fanout) * 0.5, size=(num_topics, vocab_words))

    docs, total = [], 0
    while total < num_tokens:
        topic = int(rng.integers(num_topics))
        sentences = []
        for _ in range(int(rng.integers(*doc_sentences))):
            n = int(rng.integers(*sentence_len))
            w = int(rng.choice(vocab_words, p=prior))
            sent = [w]
            for _ in range(n - 1):
                w = int(succ[topic, w, rng.choice(fanout, p=weights[topic, w])])
                sent.append(w)
            sentences.append(tuple(words[k] for k in sent))
            total += n
            if total >= num_tokens:
                break
        docs.append(tuple(sentences))
    return Corpus(tuple(docs))
