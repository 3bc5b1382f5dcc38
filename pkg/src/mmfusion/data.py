"""Posts, dataset files, the upvote-ranked split, and a synthetic generator."""

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .encoders import read_features, tokenize, write_embedding_file, write_features
from .errors import ValidationError
from .model import Sample
from .numkit import FLOAT, SeededRng


@dataclass(frozen=True)
class Post:
    id: str
    label: str
    sort_key: int
    text: Optional[str] = None
    feat: Optional[int] = None
    feat_inline: Optional[tuple] = None

    @property
    def has_text(self):
        return self.text is not None and self.text.strip() != ""

    @property
    def has_image(self):
        return self.feat is not None or self.feat_inline is not None

    def tokens(self, tokenizer=tokenize):
        return tokenizer(self.text) if self.has_text else None

    def to_json(self):
        record = {"id": self.id, "label": self.label, "sort_key": self.sort_key}
        if self.text is not None:
            record["text"] = self.text
        if self.feat is not None:
            record["feat"] = self.feat
        if self.feat_inline is not None:
            record["feat_inline"] = list(self.feat_inline)
        return record


@dataclass
class Dataset:
    posts: list
    classes: list
    features: Optional[np.ndarray] = None
    embeddings_path: Optional[str] = None
    manifest_path: Optional[str] = None

    def __post_init__(self):
        self.by_id = {p.id: p for p in self.posts}
        self.class_index = {c: i for i, c in enumerate(self.classes)}

    def image_of(self, post):
        if post.feat is not None:
            return self.features[post.feat]
        if post.feat_inline is not None:
            return np.asarray(post.feat_inline, dtype=FLOAT)
        return None

    @property
    def image_dim(self):
        if self.features is not None:
            return self.features.shape[1]
        for p in self.posts:
            if p.feat_inline is not None:
                return len(p.feat_inline)
        return None

    def subset(self, ids):
        return [self.by_id[i] for i in ids]

    def encode(self, posts, vocab, tokenizer=tokenize):
        """Resolve posts to model samples (token ids, image vector, label index)."""
        out = []
        for p in posts:
            ids = vocab.ids(p.tokens(tokenizer)) if (vocab is not None and p.has_text) else None
            out.append(Sample(ids, self.image_of(p), self.class_index[p.label], p.id))
        return out


def _parse_post(record, lineno):
    if not isinstance(record, dict):
        raise ValidationError(f"line {lineno}: expected a JSON object")
    unknown = set(record) - {"id", "label", "sort_key", "text", "feat", "feat_inline"}
    if unknown:
        raise ValidationError(f"line {lineno}: unknown fields {sorted(unknown)}")
    pid = record.get("id")
    if not isinstance(pid, str) or not pid:
        raise ValidationError(f"line {lineno}: missing or non-string id")
    label = record.get("label")
    if not isinstance(label, str):
        raise ValidationError(f"post {pid}: label must be a string")
    sort_key = record.get("sort_key", 0)
    if isinstance(sort_key, bool) or not isinstance(sort_key, int):
        raise ValidationError(f"post {pid}: sort_key must be an integer")
    text = record.get("text")
    if text is not None and not isinstance(text, str):
        raise ValidationError(f"post {pid}: text must be a string")
    feat = record.get("feat")
    if feat is not None and (isinstance(feat, bool) or not isinstance(feat, int) or feat < 0):
        raise ValidationError(f"post {pid}: feat must be a non-negative integer")
    inline = record.get("feat_inline")
    if inline is not None:
        if feat is not None:
            raise ValidationError(f"post {pid}: both feat and feat_inline given")
        if not isinstance(inline, list) or not inline or not all(isinstance(x, (int, float)) for x in inline):
            raise ValidationError(f"post {pid}: feat_inline must be a non-empty list of numbers")
        inline = tuple(float(x) for x in inline)
        if not all(math.isfinite(x) for x in inline):
            raise ValidationError(f"post {pid}: non-finite feature value")
    post = Post(pid, label, sort_key, text, feat, inline)
    if not (post.has_text or post.has_image):
        raise ValidationError(f"post {pid}: has neither text nor image features")
    return post


def load_posts(posts_path, features_path=None, classes=None):
    """Read and validate a JSON-lines posts file.

    Returns ``(posts, classes, features)``; classes follow first appearance
    unless a declared ``classes`` list is given, in which case every label
    must belong to it.
    """
    posts, seen = [], set()
    with open(posts_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            post = _parse_post(record, lineno)
            if post.id in seen:
                raise ValidationError(f"duplicate post id {post.id!r}")
            seen.add(post.id)
            posts.append(post)
    if not posts:
        raise ValidationError(f"{posts_path}: no posts")

    features = read_features(features_path) if features_path else None
    uses_ref = [p for p in posts if p.feat is not None]
    uses_inline = [p for p in posts if p.feat_inline is not None]
    if uses_ref and uses_inline:
        raise ValidationError(f"posts {uses_ref[0].id} and {uses_inline[0].id} mix feat and feat_inline")
    for p in uses_ref:
        if features is None:
            raise ValidationError(f"post {p.id}: references feature {p.feat} but no feature file given")
        if p.feat >= features.shape[0]:
            raise ValidationError(f"post {p.id}: feature index {p.feat} out of range ({features.shape[0]} records)")
    dims = {len(p.feat_inline) for p in uses_inline}
    if len(dims) > 1:
        raise ValidationError(f"inline features of differing dims {sorted(dims)}")

    if classes is None:
        classes = list(dict.fromkeys(p.label for p in posts))
    else:
        classes = list(classes)
        for p in posts:
            if p.label not in classes:
                raise ValidationError(f"post {p.id}: label {p.label!r} not in declared classes")
    if len(classes) < 2:
        raise ValidationError("need at least two classes")
    return posts, classes, features


def write_posts(path, posts):
    with open(path, "w", encoding="utf-8") as fh:
        for p in posts:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")


def load_dataset(manifest_path):
    """Load a dataset through its JSON manifest (paths relative to it)."""
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(key):
        value = manifest.get(key)
        return os.path.join(base, value) if value else None

    if "posts" not in manifest:
        raise ValidationError(f"{manifest_path}: manifest lacks 'posts'")
    posts, classes, features = load_posts(resolve("posts"), resolve("features"), manifest.get("classes"))
    return Dataset(posts, classes, features, resolve("embeddings"), os.path.abspath(manifest_path))


def file_sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)


def make_splits(posts):
    """Top 10% by sort key -> test, next 10% -> validation, rest -> train.

    Ordering is (sort_key descending, id ascending).
    """
    n = len(posts)
    if n < 10:
        raise ValidationError(f"need at least 10 posts to split, got {n}")
    ranked = sorted(posts, key=lambda p: (-p.sort_key, p.id))
    k = math.ceil(0.1 * n)
    ids = [p.id for p in ranked]
    return DatasetSplit(train=ids[2 * k :], validation=ids[k : 2 * k], test=ids[:k])


# Synthetic data -----------------------------------------------------------

SYNONYMS = 5
FILLERS = 30
SIGNAL = 2.0
NOISE = 0.5
WORD_SCALE = 0.1


@dataclass
class SyntheticData:
    posts: list
    classes: list
    features: np.ndarray
    vectors: dict


def gen_synthetic(rng, per_class, classes=4, d_text=200, n_image=64, xor_fraction=1.0):
    """Four-class posts whose label is a pair of latent bits ``(b_text, b_image)``.

    The text always names ``b_text`` through one of a few synonym tokens,
    among filler words; with probability ``1 - xor_fraction`` it also carries
    a token hinting at ``b_image``. The image vector is ``+-SIGNAL`` along a
    fixed direction for ``b_image`` and, with the same probability, along a
    second direction for ``b_text``, plus N(0, 0.5^2) noise. At
    ``xor_fraction=1`` each modality alone fixes only one bit.
    """
    if classes != 4:
        raise ValidationError("the synthetic generator encodes exactly 4 classes (two bits)")
    if per_class < 25:
        raise ValidationError("per_class must be >= 25")
    if not 0.0 <= xor_fraction <= 1.0:
        raise ValidationError("xor_fraction must lie in [0, 1]")
    if d_text < 1 or n_image < 2:
        raise ValidationError("d_text must be >= 1 and n_image >= 2")
    if not isinstance(rng, SeededRng):
        rng = SeededRng(rng)

    words = {f"txt{b}_{k}": None for b in (0, 1) for k in range(SYNONYMS)}
    words.update({f"hint{b}_{k}": None for b in (0, 1) for k in range(SYNONYMS)})
    words.update({f"w{k}": None for k in range(FILLERS)})
    vec_rng = rng.substream(0)
    vectors = {w: np.round(vec_rng.normal(0.0, WORD_SCALE, d_text), 6) for w in words}

    dir_rng = rng.substream(1)
    directions = dir_rng.normal(0.0, 1.0, (2, n_image))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    image_dir, hint_dir = directions

    post_rng = rng.substream(2)
    labels = [(bt, bv) for bt in (0, 1) for bv in (0, 1) for _ in range(per_class)]
    order = post_rng.permutation(len(labels))
    posts, features = [], []
    for idx, li in enumerate(order):
        bt, bv = labels[li]
        hinted = post_rng.random() >= xor_fraction
        tokens = [f"txt{bt}_{post_rng.integers(SYNONYMS)}"]
        tokens += [f"w{post_rng.integers(FILLERS)}" for _ in range(int(post_rng.integers(3, 7)))]
        if hinted:
            tokens.append(f"hint{bv}_{post_rng.integers(SYNONYMS)}")
        tokens = [tokens[i] for i in post_rng.permutation(len(tokens))]
        feat = (2 * bv - 1) * SIGNAL * image_dir + post_rng.normal(0.0, NOISE, n_image)
        if hinted:
            feat += (2 * bt - 1) * SIGNAL * hint_dir
        features.append(feat)
        posts.append(Post(f"p{idx:05d}", f"t{bt}v{bv}", int(post_rng.integers(0, 100_000)), " ".join(tokens), idx))
    class_list = list(dict.fromkeys(p.label for p in posts))
    return SyntheticData(posts, class_list, np.asarray(features, dtype=np.float32), vectors)


def write_synthetic(out_dir, data, provenance=None):
    """Write posts, features, embeddings and manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    write_posts(os.path.join(out_dir, "posts.jsonl"), data.posts)
    write_features(os.path.join(out_dir, "features.mmf"), data.features)
    write_embedding_file(os.path.join(out_dir, "embeddings.txt"), data.vectors)
    manifest = {
        "posts": "posts.jsonl",
        "features": "features.mmf",
        "embeddings": "embeddings.txt",
        "classes": data.classes,
        "provenance": provenance or {"generator": "synthetic two-bit posts"},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
