"""Text and image encoders.

Text goes through an embedding lookup followed by an order-free aggregation
(average or componentwise max). Images arrive as precomputed CNN feature
vectors, optionally projected into the text space by an affine map.
"""

import collections
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTextError, ParseError, ShapeError, ValidationError
from .numkit import FLOAT, SeededRng, affine

AGGREGATIONS = ("avg", "max")

FEATURE_MAGIC = b"MMF1"

_WS = re.compile(r"\s+")


def tokenize(text):
    """Default tokenizer: lowercase, split on whitespace."""
    if text is None:
        return None
    return [t for t in _WS.split(text.lower()) if t]


@dataclass
class Vocabulary:
    tokens: list
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __getitem__(self, token):
        return self.index[token]

    def ids(self, tokens):
        """Map tokens to row indices, silently skipping unknown tokens."""
        return np.array([self.index[t] for t in tokens if t in self.index], dtype=np.int64)


def build_vocabulary(corpus, min_count=1):
    """Count tokens over ``corpus`` and keep those seen at least ``min_count`` times.

    Ordering is by descending count, ties broken lexicographically, so the
    same corpus always yields the same index assignment.
    """
    if min_count < 1:
        raise ValidationError("min_count must be >= 1")
    counts = collections.Counter()
    for tokens in corpus:
        if tokens:
            counts.update(tokens)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if not kept:
        raise ValidationError("empty vocabulary")
    return Vocabulary(kept)


def read_embedding_file(path, d=None):
    """Parse a GloVe-style text file into ``{token: vector}``."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            token, raw = parts[0], parts[1:]
            if d is None:
                d = len(raw)
            if len(raw) != d:
                raise ParseError(f"expected {d} floats for {token!r}, found {len(raw)}", line=lineno)
            try:
                vectors[token] = np.array([float(x) for x in raw], dtype=FLOAT)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    return vectors


def load_embeddings(path, vocab, d, rng=None):
    """Build the |V| x d embedding matrix for ``vocab`` from a pretrained file.

    Tokens missing from the file get rows from uniform(-0.05, 0.05), drawn in
    vocabulary order from ``rng`` (a seed or SeededRng).
    """
    if d < 1:
        raise ShapeError("embedding dimension must be >= 1")
    vectors = read_embedding_file(path, d)
    return embedding_table(vectors, vocab, d, rng)


def embedding_table(vectors, vocab, d, rng=None):
    if not isinstance(rng, SeededRng):
        rng = SeededRng(0 if rng is None else rng)
    E = rng.uniform(-0.05, 0.05, size=(len(vocab), d))
    for token, i in vocab.index.items():
        vec = vectors.get(token)
        if vec is not None:
            if vec.shape != (d,):
                raise ShapeError(f"vector for {token!r} has dim {vec.shape[0]}, expected {d}")
            E[i] = vec
    return E


def write_embedding_file(path, vectors):
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in vectors.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


@dataclass
class Dropout:
    """Inverted dropout; ``rng is None`` means evaluation mode."""

    p: float = 0.0
    rng: object = None

    @property
    def active(self):
        return self.rng is not None and self.p > 0.0

    def mask(self, shape):
        if not self.active:
            return None
        gen = self.rng.generator if isinstance(self.rng, SeededRng) else self.rng
        keep = gen.random(shape) >= self.p
        return keep / (1.0 - self.p)


@dataclass
class TextCache:
    ids: np.ndarray
    scale: object  # (T, d) dropout scale or None
    winners: object  # per-coordinate winning position for max, else None
    agg: str


def aggregate(E, ids, agg, dropout=None):
    """Aggregate embedding rows ``E[ids]``; returns ``(vector, TextCache)``."""
    if agg not in AGGREGATIONS:
        raise ValidationError(f"unknown aggregation {agg!r}")
    if len(ids) == 0:
        raise EmptyTextError("no in-vocabulary tokens")
    rows = E[ids]
    scale = dropout.mask(rows.shape) if dropout is not None else None
    if scale is not None:
        rows = rows * scale
    if agg == "avg":
        return rows.mean(axis=0), TextCache(ids, scale, None, agg)
    winners = rows.argmax(axis=0)
    return rows[winners, np.arange(rows.shape[1])], TextCache(ids, scale, winners, agg)


def aggregate_backward(grad, cache, d):
    """Gradient w.r.t. the looked-up rows; returns ``(ids, row_grads)``."""
    T = len(cache.ids)
    if cache.agg == "avg":
        rows = np.broadcast_to(grad / T, (T, d)).copy()
    else:
        rows = np.zeros((T, d))
        rows[cache.winners, np.arange(d)] = grad
    if cache.scale is not None:
        rows *= cache.scale
    return cache.ids, rows


def encode_text(tokens, table, vocab, agg="max", dropout=None):
    """Encode a token list as one d-dimensional vector.

    Out-of-vocabulary tokens are skipped; if nothing is left an
    EmptyTextError is raised and the caller picks a fallback.
    """
    table = np.asarray(table, dtype=FLOAT)
    if table.shape[0] != len(vocab):
        raise ShapeError(f"embedding table has {table.shape[0]} rows for a vocabulary of {len(vocab)}")
    vec, _ = aggregate(table, vocab.ids(tokens), agg, dropout)
    return vec


def project_image(feat, W, b):
    """Affine projection of an image feature vector into the text space."""
    return affine(W, feat, b)


def write_features(path, features):
    """Write an ``MMF1`` feature file (little-endian f32, row-major)."""
    arr = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    if arr.ndim != 2:
        raise ShapeError(f"features must be 2-d, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path):
    """Read an ``MMF1`` feature file, widening to float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FEATURE_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise ParseError(f"{path}: truncated header")
    count, dim = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * count * dim
    if len(data) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {count}x{dim}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(count, dim).astype(FLOAT)
