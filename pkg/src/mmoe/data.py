"""Synthetic two-modality corpora standing in for captioned images.

Text comes from an order-2 Markov chain over the text vocabulary. Each
sequence's latent class is a fixed function of its first text token and
selects an order-1 chain over image tokens. Every sequence is laid out as

    text tokens ++ <boi> ++ image tokens ++ <eoi>

Token ids: text ``[0, Vt)``, image ``[Vt, Vt + Vi)``, ``boi = Vt + Vi``,
``eoi = Vt + Vi + 1``, pad ``Vt + Vi + 2`` (outside both ranges, never fed
to the model).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class CorpusSpec:
    vocab_text: int = 512
    vocab_image: int = 256
    n_classes: int = 8
    text_len: int = 16
    image_len: int = 16
    n_samples: int = 1000
    seed: int = 0
    table_seed: int = 1234
    text_branching: int = 4
    text_skip_weight: float = 0.3
    image_branching: int = 4
    image_class_weight: float = 0.5
    image_text_overlap: float = 0.5

    @property
    def boi(self) -> int:
        return self.vocab_text + self.vocab_image

    @property
    def eoi(self) -> int:
        return self.boi + 1

    @property
    def pad(self) -> int:
        return self.boi + 2

    @property
    def seq_len(self) -> int:
        return self.text_len + self.image_len + 2


@dataclass(frozen=True)
class StagePlan:
    stage: str
    image_len: int
    epochs: int
    n_samples: int


@dataclass
class Corpus:
    spec: CorpusSpec
    sequences: list[np.ndarray]
    labels: np.ndarray  # latent class per sequence; evaluation only

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass
class Batch:
    """Next-token batch. ``inputs``/``targets`` hold 0 at padded slots."""

    inputs: np.ndarray
    targets: np.ndarray
    ignore_mask: np.ndarray
    valid: np.ndarray

    @property
    def n_targets(self) -> int:
        return int((~self.ignore_mask).sum())


def _sparse_rows(rng: np.random.Generator, n_rows: int, n_cols: int, k: int) -> np.ndarray:
    """Row-stochastic table with ``k`` random successors per row."""
    k = min(k, n_cols)
    table = np.zeros((n_rows, n_cols))
    for r in range(n_rows):
        cols = rng.choice(n_cols, size=k, replace=False)
        table[r, cols] = rng.dirichlet(np.ones(k))
    return table


class SyntheticSource:
    """Transition tables shared by every split drawn from one ``table_seed``."""

    def __init__(self, spec: CorpusSpec):
        if spec.vocab_text < 4 or spec.vocab_image < 4:
            raise ValueError("vocabulary sizes must be >= 4")
        if spec.text_len < 1 or spec.image_len < 1:
            raise ValueError("sequence lengths must be >= 1")
        self.spec = spec
        rng = np.random.default_rng(spec.table_seed)
        Vt, Vi = spec.vocab_text, spec.vocab_image
        self.image_shared = _sparse_rows(rng, Vi, Vi, spec.image_branching)
        backbone = _sparse_rows(rng, Vt, Vt, spec.text_branching)
        # A subset of text tokens mirrors the shared image chain: text token
        # anchor[v] -> anchor[w] with the probability of image v -> w.
        n_mirror = min(Vi, Vt)
        self.anchor = rng.choice(Vt, size=n_mirror, replace=False)
        omega = spec.image_text_overlap
        if omega > 0:
            mirrored = np.zeros((n_mirror, Vt))
            mirrored[:, self.anchor] = self.image_shared[:n_mirror, :n_mirror]
            mirrored /= np.maximum(mirrored.sum(axis=1, keepdims=True), 1e-300)
            empty = mirrored.sum(axis=1) == 0
            mirrored[empty] = backbone[self.anchor[empty]]
            backbone[self.anchor] = (1 - omega) * backbone[self.anchor] + omega * mirrored
        self.text_backbone = backbone
        self.text_skip = _sparse_rows(rng, Vt, Vt, spec.text_branching)
        self.class_of_token = rng.integers(0, spec.n_classes, size=Vt)
        self.image_class = np.stack([_sparse_rows(rng, Vi, Vi, spec.image_branching)
                                     for _ in range(spec.n_classes)])
        self.image_start = np.stack([_sparse_rows(rng, 1, Vi, spec.image_branching)[0]
                                     for _ in range(spec.n_classes)])

    def image_transition(self, cls: int) -> np.ndarray:
        mu = self.spec.image_class_weight
        return (1 - mu) * self.image_shared + mu * self.image_class[cls]

    def text_transition(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        lam = self.spec.text_skip_weight
        return (1 - lam) * self.text_backbone[b] + lam * self.text_skip[a]

    def sample_text(self, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
        Vt = self.spec.vocab_text
        out = np.zeros((n, length), dtype=np.int64)
        if n == 0:
            return out
        out[:, 0] = rng.integers(0, Vt, size=n)
        if length > 1:
            out[:, 1] = _draw(self.text_backbone[out[:, 0]], rng)
        for t in range(2, length):
            out[:, t] = _draw(self.text_transition(out[:, t - 2], out[:, t - 1]), rng)
        return out

    def sample_image(self, classes: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
        n = len(classes)
        out = np.zeros((n, length), dtype=np.int64)
        if n == 0:
            return out
        trans = np.stack([self.image_transition(c) for c in range(self.spec.n_classes)])
        out[:, 0] = _draw(self.image_start[classes], rng)
        for t in range(1, length):
            out[:, t] = _draw(trans[classes, out[:, t - 1]], rng)
        return out


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def generate_corpus(spec: CorpusSpec, source: SyntheticSource | None = None) -> Corpus:
    """Sample ``spec.n_samples`` text-image sequences; deterministic in ``spec.seed``."""
    source = source or SyntheticSource(spec)
    rng = np.random.default_rng(spec.seed)
    text = source.sample_text(spec.n_samples, spec.text_len, rng)
    labels = source.class_of_token[text[:, 0]] if spec.n_samples else np.zeros(0, dtype=np.int64)
    image = source.sample_image(labels, spec.image_len, rng) + spec.vocab_text
    n = spec.n_samples
    seqs = np.concatenate([text, np.full((n, 1), spec.boi), image, np.full((n, 1), spec.eoi)], axis=1)
    return Corpus(spec, [s for s in seqs], labels.astype(np.int64))


def generate_text_corpus(spec: CorpusSpec, n: int, length: int, seed: int,
                         source: SyntheticSource | None = None) -> list[np.ndarray]:
    """Text-only sequences from the same chain (used for pretraining and evaluation)."""
    source = source or SyntheticSource(spec)
    return [s for s in source.sample_text(n, length, np.random.default_rng(seed))]


def check_layout(seq: np.ndarray, spec: CorpusSpec) -> bool:
    """True iff ``seq`` is text+ boi image+ eoi."""
    seq = np.asarray(seq)
    hits = np.flatnonzero(seq == spec.boi)
    if len(hits) != 1 or seq[-1] != spec.eoi or (seq == spec.eoi).sum() != 1:
        return False
    b = hits[0]
    text, image = seq[:b], seq[b + 1:-1]
    return (len(text) > 0 and len(image) > 0
            and bool(np.all(text < spec.vocab_text))
            and bool(np.all((image >= spec.vocab_text) & (image < spec.boi))))


def pack_batches(sequences: list[np.ndarray], batch_size: int, max_seq_len: int,
                 pad: int, seed: int | None = 0, loss_from: int | None = None) -> list[Batch]:
    """Group sequences into right-padded next-token batches.

    ``seed`` None keeps corpus order; otherwise the order is a seeded
    shuffle. ``loss_from`` restricts the loss to targets with id >=
    ``loss_from`` (new-modality targets).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for i, s in enumerate(sequences):
        if len(s) > max_seq_len + 1:
            raise ValueError(f"sequence {i} has length {len(s)} > max_seq_len + 1 = {max_seq_len + 1}")
    order = np.arange(len(sequences))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(sequences))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [np.asarray(sequences[j]) for j in order[start:start + batch_size]]
        L = max(len(s) for s in chunk) - 1
        tokens = np.full((len(chunk), L + 1), pad, dtype=np.int64)
        for r, s in enumerate(chunk):
            tokens[r, :len(s)] = s
        inputs, targets = tokens[:, :-1].copy(), tokens[:, 1:].copy()
        valid = inputs != pad
        ignore = targets == pad
        if loss_from is not None:
            ignore |= targets < loss_from
        inputs[~valid] = 0
        targets[ignore & (targets == pad)] = 0
        batches.append(Batch(inputs, targets, ignore, valid))
    return batches


def stage_plan_default() -> tuple[StagePlan, StagePlan]:
    """Low/high stage pair: 16 then 64 image tokens, five epochs each."""
    return (StagePlan("low", image_len=16, epochs=5, n_samples=8000),
            StagePlan("high", image_len=64, epochs=5, n_samples=7000))


def image_bigram_tv(corpus: Corpus, source: SyntheticSource, cls: int) -> float:
    """Total-variation distance between empirical and stationary image bigrams of one class."""
    spec = corpus.spec
    Vi = spec.vocab_image
    counts = np.zeros((Vi, Vi))
    for s, c in zip(corpus.sequences, corpus.labels):
        if c != cls:
            continue
        img = s[spec.text_len + 1:-1] - spec.vocab_text
        np.add.at(counts, (img[:-1], img[1:]), 1.0)
    P = source.image_transition(cls)
    emp_rows = counts.sum(axis=1)
    joint = counts / counts.sum()
    expected = (emp_rows / emp_rows.sum())[:, None] * P
    return 0.5 * float(np.abs(joint - expected).sum())


def learnability_gap(corpus: Corpus, source: SyntheticSource) -> tuple[float, float]:
    """Image-token perplexity of the class-aware chain vs a fitted class-blind bigram.

    The first is the oracle that knows the latent class; the second is the
    best class-blind first-order model on the same tokens (maximum
    likelihood fit on the corpus itself).
    """
    spec = corpus.spec
    Vi = spec.vocab_image
    pairs_prev, pairs_next, pairs_cls = [], [], []
    for s, c in zip(corpus.sequences, corpus.labels):
        img = s[spec.text_len + 1:-1] - spec.vocab_text
        pairs_prev.append(img[:-1])
        pairs_next.append(img[1:])
        pairs_cls.append(np.full(len(img) - 1, c))
    prev = np.concatenate(pairs_prev)
    nxt = np.concatenate(pairs_next)
    cls = np.concatenate(pairs_cls)
    trans = np.stack([source.image_transition(c) for c in range(spec.n_classes)])
    oracle_nll = -np.log(trans[cls, prev, nxt]).mean()
    counts = np.zeros((Vi, Vi))
    np.add.at(counts, (prev, nxt), 1.0)
    fitted = counts / counts.sum(axis=1, keepdims=True).clip(min=1.0)
    blind_nll = -np.log(fitted[prev, nxt]).mean()
    return float(np.exp(oracle_nll)), float(np.exp(blind_nll))


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """One sequence per line plus ``<path>.meta.json`` with the spec and labels."""
    path = Path(path)
    path.write_text("".join(" ".join(str(int(t)) for t in s) + "\n" for s in corpus.sequences))
    meta = {"spec": dataclasses.asdict(corpus.spec), "labels": [int(c) for c in corpus.labels]}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    spec = CorpusSpec(**meta["spec"])
    seqs = [np.array([int(t) for t in line.split()], dtype=np.int64)
            for line in path.read_text().splitlines() if line.strip()]
    return Corpus(spec, seqs, np.array(meta["labels"], dtype=np.int64))
