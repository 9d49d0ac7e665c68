"""Corpora: TSV ingestion, whitespace tokenisation and synthetic generation."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .model import CLS, PAD, SEP, UNK

SPECIAL_TOKENS = ("<pad>", "<unk>", "<cls>", "<sep>")
SPLITS = ("train", "dev", "test")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Corpus:
    ids: np.ndarray            # (N, n) int64, CLS ... SEP PAD...
    labels: np.ndarray         # (N,)
    vocab: dict[str, int]
    num_classes: int
    attrs: np.ndarray | None = None
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.ids != PAD

    def content_mask(self) -> np.ndarray:
        return self.ids > SEP

    def subset(self, idx, split: str | None = None) -> "Corpus":
        idx = np.asarray(idx, dtype=np.int64)
        return Corpus(self.ids[idx], self.labels[idx], self.vocab, self.num_classes,
                      None if self.attrs is None else self.attrs[idx], split or self.split)

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(self.ids, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        if self.attrs is not None:
            h.update(np.ascontiguousarray(self.attrs, dtype=np.int64).tobytes())
        h.update(json.dumps(self.vocab, sort_keys=True).encode())
        return h.hexdigest()

    def id_to_token(self) -> list[str]:
        inv = [""] * (max(self.vocab.values()) + 1)
        for tok, i in self.vocab.items():
            inv[i] = tok
        return inv

    def decode(self, row) -> list[str]:
        """Content tokens of one encoded row (CLS/SEP/PAD dropped)."""
        inv = self.id_to_token()
        return [inv[i] for i in row if i not in (PAD, CLS, SEP)]

    def save(self, path) -> None:
        tensors = {"ids": self.ids.astype(np.float32), "labels": self.labels.astype(np.float32)}
        if self.attrs is not None:
            tensors["attrs"] = self.attrs.astype(np.float32)
        checkpoint.save(path, tensors, {"kind": "corpus", "vocab": self.vocab, "split": self.split,
                                        "num_classes": self.num_classes})

    @classmethod
    def load(cls, path) -> "Corpus":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "corpus":
            raise DataError(f"{path} is not a corpus cache")
        attrs = tensors.get("attrs")
        return cls(tensors["ids"].astype(np.int64), tensors["labels"].astype(np.int64), meta["vocab"],
                   meta["num_classes"], None if attrs is None else attrs.astype(np.int64), meta["split"])


def encode_tokens(tokens: list[str], vocab: dict[str, int], seq_len: int) -> np.ndarray:
    body = [vocab.get(t, UNK) for t in tokens][: seq_len - 2]
    row = np.full(seq_len, PAD, dtype=np.int64)
    row[0] = CLS
    row[1:1 + len(body)] = body
    row[1 + len(body)] = SEP
    return row


def build_vocab(texts: list[list[str]], vocab_size: int) -> dict[str, int]:
    counts = Counter(t for toks in texts for t in toks)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: vocab_size - len(SPECIAL_TOKENS)]
    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for tok, _ in ranked:
        vocab[tok] = len(vocab)
    return vocab


def save_vocab(vocab: dict[str, int], path) -> None:
    Path(path).write_text(json.dumps(vocab, indent=0, sort_keys=True))


def load_vocab(path) -> dict[str, int]:
    return {k: int(v) for k, v in json.loads(Path(path).read_text()).items()}


def load_tsv(path, vocab_policy="build", split: str = "train", vocab_size: int = 2000,
             max_seq_len: int = 64, seq_len: int | None = None, num_classes: int | None = None) -> Corpus:
    """Read ``label<TAB>[attribute<TAB>]text`` lines.

    ``vocab_policy`` is ``"build"`` (only valid for the train split) or an
    existing vocabulary (dict or JSON path) for dev/test files.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    labels, attrs, texts = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(parts)}")
            try:
                labels.append(int(parts[0]))
                attrs.append(int(parts[1]) if len(parts) == 3 else None)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label/attribute must be integers") from None
            texts.append(tokenize(parts[-1]))
    if not labels:
        raise DataError(f"{path}: no samples")
    if any(a is None for a in attrs) and any(a is not None for a in attrs):
        raise DataError(f"{path}: attribute column present on some lines only")
    if isinstance(vocab_policy, str) and vocab_policy == "build":
        if split != "train":
            raise DataError(f"vocabulary can only be built from the train split, not {split!r}")
        vocab = build_vocab(texts, vocab_size)
    elif isinstance(vocab_policy, dict):
        vocab = vocab_policy
    else:
        vocab = load_vocab(vocab_policy)
    n = seq_len or min(max_seq_len, max(len(t) for t in texts) + 2)
    ids = np.stack([encode_tokens(t, vocab, n) for t in texts])
    C = num_classes or max(labels) + 1
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0 or y.max() >= C:
        raise DataError(f"labels must lie in [0, {C})")
    a = None if attrs[0] is None else np.asarray(attrs, dtype=np.int64)
    return Corpus(ids, y, vocab, C, a, split)


def split_corpus(corpus: Corpus, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Corpus, ...]:
    """Stratified partition into len(fractions) parts (train/dev/test)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if abs(fr.sum() - 1.0) > 1e-9 or (fr < 0).any():
        raise DataError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    N, K = len(corpus), len(fr)
    totals = _largest_remainder(N * fr)
    classes = np.unique(corpus.labels)
    ideal = np.array([[np.sum(corpus.labels == c) * f for f in fr] for c in classes])
    alloc = np.floor(ideal).astype(np.int64)
    rows = np.array([np.sum(corpus.labels == c) for c in classes]) - alloc.sum(1)
    cols = totals - alloc.sum(0)
    frac = ideal - alloc
    for ci, kj in sorted(np.ndindex(*frac.shape), key=lambda ij: (-frac[ij], ij)):
        if rows[ci] > 0 and cols[kj] > 0:
            alloc[ci, kj] += 1
            rows[ci] -= 1
            cols[kj] -= 1
    while rows.sum() > 0:
        ci, kj = int(np.argmax(rows > 0)), int(np.argmax(cols > 0))
        alloc[ci, kj] += 1
        rows[ci] -= 1
        cols[kj] -= 1
    parts = [[] for _ in range(K)]
    for ci, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(corpus.labels == c))
        start = 0
        for k in range(K):
            parts[k].extend(idx[start:start + alloc[ci, k]])
            start += alloc[ci, k]
    names = SPLITS if K == 3 else tuple(f"part{k}" for k in range(K))
    out = []
    for k in range(K):
        if not parts[k]:
            raise DataError(f"split {names[k]!r} would be empty")
        out.append(corpus.subset(np.sort(np.asarray(parts[k])), names[k]))
    return tuple(out)


def _largest_remainder(x: np.ndarray) -> np.ndarray:
    base = np.floor(x).astype(np.int64)
    short = int(round(x.sum())) - base.sum()
    order = np.argsort(-(x - base), kind="stable")
    base[order[:short]] += 1
    return base


# -- synthetic corpora ------------------------------------------------------

@dataclass
class SynthSpec:
    """Class-conditional synthetic text.

    Background tokens follow a shared Zipf law. Each class owns
    ``planted_per_class`` discriminative tokens: a sample of class c carries one
    of them with probability ``p_hi``, and a planted token of some other class
    with probability ``p_lo``. Optional attribute markers depend only on a
    binary attribute drawn independently of the class.
    """

    num_classes: int = 2
    vocab_size: int = 2000
    sizes: dict = field(default_factory=lambda: {"train": 2000, "dev": 250, "test": 250})
    min_len: int = 18
    max_len: int = 30
    zipf_exponent: float = 2.0
    planted_per_class: int = 4
    p_hi: float = 0.9
    p_lo: float = 0.02
    markers_per_attr: int = 0
    marker_count: int = 2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @property
    def seq_len(self) -> int:
        return self.max_len + 2


@dataclass
class SynthCorpus:
    corpus: Corpus
    planted: dict[int, list[int]]
    markers: dict[int, list[int]]


def synth_generate(spec: SynthSpec) -> SynthCorpus:
    rng = np.random.default_rng(spec.seed)
    V, C = spec.vocab_size, spec.num_classes
    words = rng.permutation(np.arange(4, V))
    cur = 0
    planted = {}
    for c in range(C):
        planted[c] = sorted(int(t) for t in words[cur:cur + spec.planted_per_class])
        cur += spec.planted_per_class
    markers = {}
    if spec.markers_per_attr:
        for a in (0, 1):
            markers[a] = sorted(int(t) for t in words[cur:cur + spec.markers_per_attr])
            cur += spec.markers_per_attr
    background = words[cur:]
    weights = 1.0 / np.arange(1, len(background) + 1) ** spec.zipf_exponent
    weights /= weights.sum()
    N = sum(spec.sizes.values())
    labels = rng.permutation(np.arange(N) % C)
    attrs = rng.integers(0, 2, size=N)
    n = spec.seq_len
    ids = np.full((N, n), PAD, dtype=np.int64)
    for i in range(N):
        y = labels[i]
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        extra = []
        if spec.planted_per_class and rng.random() < spec.p_hi:
            extra.append(planted[y][rng.integers(len(planted[y]))])
        if spec.planted_per_class and C > 1 and rng.random() < spec.p_lo:
            other = (y + 1 + rng.integers(C - 1)) % C
            extra.append(planted[other][rng.integers(len(planted[other]))])
        if markers:
            m = markers[attrs[i]]
            extra.extend(int(m[j]) for j in rng.integers(len(m), size=spec.marker_count))
        body = list(background[rng.choice(len(background), size=max(length - len(extra), 0), p=weights)])
        for tok in extra:
            body.insert(int(rng.integers(len(body) + 1)), tok)
        ids[i, 0] = CLS
        ids[i, 1:1 + len(body)] = body
        ids[i, 1 + len(body)] = SEP
    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for t in range(4, V):
        vocab[f"w{t:04d}"] = t
    corpus = Corpus(ids, labels.astype(np.int64), vocab, C, attrs.astype(np.int64) if markers else None, "all")
    return SynthCorpus(corpus, planted, markers)


def synth_splits(spec: SynthSpec) -> tuple[Corpus, Corpus, Corpus]:
    sc = synth_generate(spec)
    total = sum(spec.sizes.values())
    fr = [spec.sizes.get(k, 0) / total for k in SPLITS]
    return split_corpus(sc.corpus, fr, seed=spec.seed)
