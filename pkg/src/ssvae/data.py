"""Corpus ingestion, vocabularies, class-balanced splits, batching, synthetic data.

Corpus files hold one document per line as ``label<TAB>text``; label ``-1``
marks an unlabeled document.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import RngStream

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "</s>")
EOS_TOKEN = RESERVED[EOS]


class CorpusError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    """A labeled document."""

    index: int
    tokens: tuple[str, ...]
    label: int


@dataclass(frozen=True)
class UnlabeledDocument:
    """A document with no label attribute at all."""

    index: int
    tokens: tuple[str, ...]


def tokenize(text: str, max_len: int | None = None) -> tuple[str, ...]:
    toks = text.lower().split()
    if max_len is not None:
        toks = toks[: max(max_len - 1, 0)]
    return tuple(toks) + (EOS_TOKEN,)


def parse_corpus(lines: Sequence[str], max_len: int | None = 60, source: str = "<corpus>"):
    docs: list[Document | UnlabeledDocument] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        label_s, sep, text = line.partition("\t")
        if not sep:
            raise CorpusError(f"{source}:{lineno}: expected 'label<TAB>text'")
        try:
            label = int(label_s)
        except ValueError:
            raise CorpusError(f"{source}:{lineno}: label {label_s!r} is not an integer") from None
        if label < -1:
            raise CorpusError(f"{source}:{lineno}: label must be -1 (unlabeled) or a class id >= 0")
        toks = tokenize(text, max_len)
        idx = len(docs)
        docs.append(UnlabeledDocument(idx, toks) if label == -1 else Document(idx, toks, label))
    if not docs:
        raise CorpusError(f"{source}: no documents")
    return docs


def load_corpus(path, max_len: int | None = 60):
    """Read a corpus file; CRLF and LF line endings are equivalent."""
    text = Path(path).read_bytes().decode("utf-8")
    if not text.strip():
        raise CorpusError(f"{path}: empty corpus file")
    return parse_corpus(text.splitlines(), max_len=max_len, source=str(path))


def write_corpus(docs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            label = d.label if isinstance(d, Document) else -1
            toks = [t for t in d.tokens if t != EOS_TOKEN]
            fh.write(f"{label}\t{' '.join(toks)}\n")


class Vocab:
    """token -> id map with reserved ids PAD=0, UNK=1, BOS=2, EOS=3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids, strip_eos: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_eos and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, t in enumerate(self.itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            tok, _, i = line.rpartition("\t")
            rows.append((int(i), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not dense")
        return cls([t for _, t in rows])


def build_vocab(docs, max_size: int | None = 2000, min_freq: int = 1) -> Vocab:
    """Keep the most frequent tokens (ties lexicographic); the rest become UNK."""
    counts = Counter(t for d in docs for t in d.tokens if t not in RESERVED)
    ranked = sorted((tok for tok, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(max_size - len(RESERVED), 0)]
    return Vocab(list(RESERVED) + ranked)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    labeled_per_class: int | None  # None keeps every training label
    valid_fraction: float = 0.20
    test_fraction: float = 0.0
    seed: int = 0


@dataclass
class Split:
    labeled: list[Document]
    unlabeled: list[UnlabeledDocument]
    valid: list[Document]
    test: list[Document]
    seed: int = 0

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "labeled": [d.index for d in self.labeled],
            "unlabeled": [d.index for d in self.unlabeled],
            "valid": [d.index for d in self.valid],
            "test": [d.index for d in self.test],
        }

    def save_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def _per_class(docs: Sequence[Document]) -> dict[int, list[Document]]:
    by: dict[int, list[Document]] = {}
    for d in docs:
        by.setdefault(d.label, []).append(d)
    return dict(sorted(by.items()))


def make_split(docs, spec: SplitSpec) -> Split:
    """Class-balanced semi-supervised split.

    Test and valid sets are drawn per class from the labeled pool first; of
    what remains, exactly ``labeled_per_class`` documents per class keep their
    labels and the rest are stripped into the unlabeled pool (together with
    any input documents already marked unlabeled).
    """
    rng = RngStream(spec.seed, (7,))
    labeled = [d for d in docs if isinstance(d, Document)]
    unlabeled = [d for d in docs if isinstance(d, UnlabeledDocument)]
    by = _per_class(labeled)
    out_l: list[Document] = []
    out_u: list[UnlabeledDocument] = list(unlabeled)
    out_v: list[Document] = []
    out_t: list[Document] = []
    shortfall = {}
    plan = []
    for c, members in by.items():
        order = [members[i] for i in rng.permutation(len(members))]
        n_test = int(round(spec.test_fraction * len(order)))
        n_valid = int(round(spec.valid_fraction * (len(order) - n_test)))
        pool = len(order) - n_test - n_valid
        want = pool if spec.labeled_per_class is None else spec.labeled_per_class
        if want > pool:
            shortfall[c] = want - pool
        plan.append((order, n_test, n_valid, want))
    if shortfall:
        detail = ", ".join(f"class {c}: short by {n}" for c, n in shortfall.items())
        raise SplitError(f"not enough labeled documents for {spec.labeled_per_class} per class ({detail})")
    for order, n_test, n_valid, want in plan:
        out_t.extend(order[:n_test])
        out_v.extend(order[n_test : n_test + n_valid])
        rest = order[n_test + n_valid :]
        out_l.extend(rest[:want])
        out_u.extend(UnlabeledDocument(d.index, d.tokens) for d in rest[want:])
    key = lambda d: d.index  # noqa: E731
    return Split(sorted(out_l, key=key), sorted(out_u, key=key), sorted(out_v, key=key), sorted(out_t, key=key), spec.seed)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: np.ndarray  # (B, T) int64, PAD beyond each length
    mask: np.ndarray  # (B, T) float64
    lengths: np.ndarray  # (B,) int64, >= 1
    labels: np.ndarray | None = None  # (B,) int64 for labeled batches, absent otherwise
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows)
        T = int(self.lengths[rows].max())
        return Batch(
            self.ids[rows, :T],
            self.mask[rows, :T],
            self.lengths[rows],
            None if self.labels is None else self.labels[rows],
            self.index[rows],
        )


def make_batch(docs, vocab: Vocab) -> Batch:
    encoded = [vocab.encode(d.tokens) for d in docs]
    lengths = np.array([len(e) for e in encoded], dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("every document needs at least one token")
    T = int(lengths.max())
    ids = np.full((len(docs), T), PAD, dtype=np.int64)
    for r, e in enumerate(encoded):
        ids[r, : len(e)] = e
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    labels = None
    if docs and all(isinstance(d, Document) for d in docs):
        labels = np.array([d.label for d in docs], dtype=np.int64)
    index = np.array([d.index for d in docs], dtype=np.int64)
    return Batch(ids, mask, lengths, labels, index)


def batch_iter(docs, vocab: Vocab, batch_size: int, seed: int | None = 0, bucketing: bool = False) -> Iterator[Batch]:
    """Yield batches in a seed-determined order; the last batch may be partial.

    With ``bucketing``, shuffled documents are sorted by length inside windows
    of 20 batches before batching, which cuts padding.
    """
    n = len(docs)
    if n == 0:
        return
    order = np.arange(n) if seed is None else RngStream(seed, (11,)).permutation(n)
    if bucketing:
        window = 20 * batch_size
        chunks = []
        for s in range(0, n, window):
            w = order[s : s + window]
            lens = np.array([len(docs[i].tokens) for i in w])
            chunks.append(w[np.argsort(lens, kind="stable")])
        order = np.concatenate(chunks)
    starts = list(range(0, n, batch_size))
    if bucketing and seed is not None:
        starts = [starts[i] for i in RngStream(seed, (12,)).permutation(len(starts))]
    for s in starts:
        yield make_batch([docs[i] for i in order[s : s + batch_size]], vocab)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    """Recipe for a keyword-signal corpus.

    Each class owns ``keywords_per_class`` keywords (disjoint across
    classes).  A document draws a class uniformly, a length uniformly from
    ``length_range`` (inclusive, tokens before EOS) and a style uniformly from
    ``n_styles``; each position is then a keyword of its class with
    probability ``signal`` (uniform over the class keywords), otherwise a
    background word: with probability ``style_strength`` from its style's
    block of background words, else uniform over all background words.
    Styles are independent of the class, so only keywords carry label
    information.
    """

    n_classes: int = 2
    keywords_per_class: int = 40
    n_background: int = 120
    n_styles: int = 4
    style_strength: float = 0.8
    length_range: tuple[int, int] = (8, 16)
    signal: float = 0.15
    size: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError("signal must be in [0, 1]")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError("length_range must satisfy 1 <= lo <= hi")

    def keyword(self, c: int, k: int) -> str:
        return f"k{c}_{k}"

    def background(self, j: int) -> str:
        return f"w{j}"


def synth_corpus(spec: SynthSpec) -> list[Document]:
    rng = RngStream(spec.seed, (21,)).generator
    lo, hi = spec.length_range
    per_style = max(spec.n_background // max(spec.n_styles, 1), 1)
    docs = []
    for i in range(spec.size):
        c = int(rng.integers(spec.n_classes))
        L = int(rng.integers(lo, hi + 1))
        style = int(rng.integers(spec.n_styles))
        is_kw = rng.random(L) < spec.signal
        kw = rng.integers(spec.keywords_per_class, size=L)
        in_style = rng.random(L) < spec.style_strength
        bg_style = style * per_style + rng.integers(per_style, size=L)
        bg_any = rng.integers(spec.n_background, size=L)
        toks = []
        for t in range(L):
            if is_kw[t]:
                toks.append(spec.keyword(c, int(kw[t])))
            elif in_style[t]:
                toks.append(spec.background(int(bg_style[t]) % spec.n_background))
            else:
                toks.append(spec.background(int(bg_any[t])))
        docs.append(Document(i, tuple(toks) + (EOS_TOKEN,), c))
    return docs


def bayes_accuracy(spec: SynthSpec) -> float:
    """Exact Bayes-optimal accuracy of the recipe.

    A keyword identifies its class; a document without keywords is a tie,
    resolved correctly with probability 1/C.
    """
    lo, hi = spec.length_range
    p_none = np.mean([(1.0 - spec.signal) ** L for L in range(lo, hi + 1)])
    return float(1.0 - p_none * (1.0 - 1.0 / spec.n_classes))


def bayes_predict(spec: SynthSpec, doc) -> int:
    """Bayes decision for one document (ties toward the lowest class id)."""
    counts = np.zeros(spec.n_classes)
    for t in doc.tokens:
        if t.startswith("k") and "_" in t:
            counts[int(t[1 : t.index("_")])] += 1
    return int(np.argmax(counts))

