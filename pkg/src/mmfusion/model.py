"""Fusion models: layer stacks, forward pass, prediction and checkpoints.

Every mode shares the same classifier tail::

    x -> hidden (W_h, b_h) -> logits (W_out, b_out) -> softmax

and differs only in how the post vector ``x`` is built:

* ``text_only``   x = agg(E[tokens])
* ``image_only``  x = image features
* ``early``       x = [image; text]
* ``joint`` / ``common_space``  x = pool(W_proj @ image + b_proj, text)
* ``late``        two independent unimodal stacks (``text.*`` and
  ``image.*`` parameters) whose probabilities are multiplied.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .encoders import AGGREGATIONS, Dropout, TextCache, Vocabulary, aggregate
from .errors import EmptyTextError, ModalityError, ParseError, ShapeError, ValidationError
from .numkit import FLOAT, SeededRng, affine, first_argmax, log_softmax, stable_softmax

MODES = ("text_only", "image_only", "early", "late", "joint", "common_space")
POOLINGS = ("max", "avg")
SHARED_SPACE_MODES = ("joint", "common_space")

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1


@dataclass
class FusionConfig:
    mode: str = "common_space"
    pooling: str = "max"
    aggregation: str = "max"
    d: int = 200
    h: int = 100
    g: int = 3
    lam: float = 3.0
    dropout_p: float = 0.25
    learning_rate: float = 0.01
    image_dim: int = 2048
    class_count: int = 4
    freeze_embeddings: bool = False
    # encode texts inside the auxiliary pair terms without dropout
    aux_clean_text: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"unknown pooling {self.pooling!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")
        for name in ("d", "h", "image_dim"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        if self.mode == "common_space" and self.g < 1:
            raise ValidationError("common_space needs g >= 1 negative samples")
        if self.g < 0:
            raise ValidationError("g must be >= 0")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        return cls(**data)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def uses_text(self):
        return self.mode != "image_only"

    @property
    def uses_image(self):
        return self.mode != "text_only"

    def post_dim(self):
        if self.mode == "text_only":
            return self.d
        if self.mode == "image_only":
            return self.image_dim
        if self.mode == "early":
            return self.image_dim + self.d
        if self.mode in SHARED_SPACE_MODES:
            return self.d
        raise ValidationError("late fusion has no single post vector")


@dataclass
class Sample:
    """A post with its modalities resolved to arrays.

    ``token_ids`` is None when the post has no text; an empty array means the
    post has text but none of it is in the vocabulary.
    """

    token_ids: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    label: Optional[int] = None
    post_id: str = ""

    @property
    def has_text(self):
        return self.token_ids is not None

    @property
    def has_image(self):
        return self.image is not None

    def without_text(self):
        return dataclasses.replace(self, token_ids=None)

    def without_image(self):
        return dataclasses.replace(self, image=None)


@dataclass
class PostVector:
    vector: np.ndarray
    provenance: str  # both | text_only | image_only


@dataclass
class ForwardCache:
    mode: str
    x: np.ndarray = None
    hidden: np.ndarray = None
    logits: np.ndarray = None
    probs: np.ndarray = None
    provenance: str = ""
    text_vec: Optional[np.ndarray] = None
    text_cache: Optional[TextCache] = None
    image: Optional[np.ndarray] = None
    image_proj: Optional[np.ndarray] = None
    image_wins: Optional[np.ndarray] = None
    train: bool = False
    branches: dict = field(default_factory=dict)


def _prefix_keys(mode):
    if mode == "late":
        return {"text": ("text.", "text_only"), "image": ("image.", "image_only")}
    return {"": ("", mode)}


def param_shapes(config, vocab_size):
    """Name -> shape for every trainable tensor of ``config.mode``."""
    shapes = {}
    for prefix, mode in _prefix_keys(config.mode).values():
        cfg = config.replace(mode=mode)
        if mode != "image_only":
            shapes[prefix + "E"] = (vocab_size, config.d)
        if mode in SHARED_SPACE_MODES:
            shapes[prefix + "W_proj"] = (config.d, config.image_dim)
            shapes[prefix + "b_proj"] = (config.d,)
        shapes[prefix + "W_h"] = (config.h, cfg.post_dim())
        shapes[prefix + "b_h"] = (config.h,)
        shapes[prefix + "W_out"] = (config.class_count, config.h)
        shapes[prefix + "b_out"] = (config.class_count,)
    return shapes


def init_params(config, vocab_size, rng, embeddings=None):
    """Fresh parameters; weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0.

    ``embeddings`` (|V| x d) seeds every embedding table; otherwise rows are
    drawn from U(-0.05, 0.05).
    """
    if not isinstance(rng, SeededRng):
        rng = SeededRng(rng)
    params = {}
    for name, shape in param_shapes(config, vocab_size).items():
        base = name.rsplit(".", 1)[-1]
        if base == "E":
            if embeddings is not None:
                emb = np.array(embeddings, dtype=FLOAT)
                if emb.shape != shape:
                    raise ShapeError(f"embedding table shape {emb.shape} != expected {shape}")
                params[name] = emb
            else:
                params[name] = rng.uniform(-0.05, 0.05, size=shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def fuse(text_vec, image_vec, config):
    """Build the post vector for early, joint or common-space fusion.

    For early fusion ``image_vec`` is the raw feature vector and both inputs
    are required; for the shared-space modes it is the projected vector and a
    single present modality passes through unchanged.
    """
    if text_vec is None and image_vec is None:
        raise ModalityError("post has neither text nor image")
    if config.mode == "early":
        if text_vec is None or image_vec is None:
            raise ModalityError("early fusion needs both text and image")
        if image_vec.shape != (config.image_dim,) or text_vec.shape != (config.d,):
            raise ShapeError(f"early fusion inputs {image_vec.shape} and {text_vec.shape}")
        return PostVector(np.concatenate([image_vec, text_vec]), "both")
    if config.mode not in SHARED_SPACE_MODES:
        raise ValidationError(f"fuse is undefined for mode {config.mode!r}")
    for v in (text_vec, image_vec):
        if v is not None and v.shape != (config.d,):
            raise ShapeError(f"pooling input of shape {v.shape}, expected ({config.d},)")
    if image_vec is None:
        return PostVector(np.array(text_vec, dtype=FLOAT), "text_only")
    if text_vec is None:
        return PostVector(np.array(image_vec, dtype=FLOAT), "image_only")
    if config.pooling == "max":
        return PostVector(np.maximum(image_vec, text_vec), "both")
    return PostVector(0.5 * (image_vec + text_vec), "both")


def encode_sample_text(sample, E, config, dropout=None):
    """Text vector of a sample plus its cache; zero vector if fully OOV."""
    try:
        return aggregate(E, sample.token_ids, config.aggregation, dropout)
    except EmptyTextError:
        return np.zeros(config.d), None


def _forward_stack(sample, params, config, prefix, train, rng):
    mode = config.mode
    cache = ForwardCache(mode=mode, train=train)
    text_vec = image_vec = None
    if mode != "image_only" and sample.has_text:
        dropout = Dropout(config.dropout_p, rng if train else None)
        text_vec, cache.text_cache = encode_sample_text(sample, params[prefix + "E"], config, dropout)
    if mode != "text_only" and sample.has_image:
        cache.image = np.asarray(sample.image, dtype=FLOAT)
        if cache.image.shape != (config.image_dim,):
            raise ShapeError(f"image feature of shape {cache.image.shape}, expected ({config.image_dim},)")
        image_vec = cache.image

    if mode == "text_only":
        if text_vec is None:
            raise ModalityError(f"{mode} model needs text")
        post = PostVector(text_vec, "text_only")
    elif mode == "image_only":
        if image_vec is None:
            raise ModalityError(f"{mode} model needs an image")
        post = PostVector(image_vec, "image_only")
    else:
        if mode in SHARED_SPACE_MODES and image_vec is not None:
            image_vec = affine(params[prefix + "W_proj"], image_vec, params[prefix + "b_proj"])
            cache.image_proj = image_vec
        post = fuse(text_vec, image_vec, config)
        if mode in SHARED_SPACE_MODES and post.provenance == "both" and config.pooling == "max":
            # ties go to the image, the first pooling argument
            cache.image_wins = image_vec >= text_vec

    if post.vector.shape != (config.post_dim(),):
        raise ShapeError(f"post vector of shape {post.vector.shape}, expected ({config.post_dim()},)")
    cache.text_vec = text_vec
    cache.provenance = post.provenance
    cache.x = post.vector
    cache.hidden = affine(params[prefix + "W_h"], cache.x, params[prefix + "b_h"])
    cache.logits = affine(params[prefix + "W_out"], cache.hidden, params[prefix + "b_out"])
    cache.probs = stable_softmax(cache.logits)
    return cache.probs, cache


def forward(sample, params, config, train=False, rng=None):
    """Class probabilities for one sample; returns ``(probs, cache)``.

    In train mode ``rng`` drives the dropout masks. Late fusion returns the
    renormalised product of its two branch distributions.
    """
    if train and config.dropout_p > 0 and rng is None:
        raise ValidationError("train mode with dropout needs an rng")
    if config.mode != "late":
        return _forward_stack(sample, params, config, "", train, rng)

    cache = ForwardCache(mode="late", train=train)
    if not (sample.has_text or sample.has_image):
        raise ModalityError("post has neither text nor image")
    for branch, (prefix, mode) in _prefix_keys("late").items():
        present = sample.has_text if branch == "text" else sample.has_image
        if present:
            _, cache.branches[branch] = _forward_stack(sample, params, config.replace(mode=mode), prefix, train, rng)
    logp = sum(log_softmax(c.logits) for c in cache.branches.values())
    cache.probs = stable_softmax(logp)
    cache.provenance = "both" if len(cache.branches) == 2 else next(iter(cache.branches)) + "_only"
    return cache.probs, cache


def late_fuse(p_image, p_text):
    """Elementwise product of two class distributions and its first argmax."""
    p_image = np.asarray(p_image, dtype=FLOAT)
    p_text = np.asarray(p_text, dtype=FLOAT)
    if p_image.shape != p_text.shape or p_image.ndim != 1:
        raise ShapeError(f"late fusion of shapes {p_image.shape} and {p_text.shape}")
    scores = p_image * p_text
    return scores, first_argmax(scores)


def predict(sample, params, config):
    """Predicted class index; ties go to the smallest index."""
    probs, cache = forward(sample, params, config)
    if config.mode == "late" and len(cache.branches) == 2:
        return late_fuse(cache.branches["image"].probs, cache.branches["text"].probs)[1]
    return first_argmax(probs)


@dataclass
class Checkpoint:
    config: FusionConfig
    params: dict
    classes: list
    vocab: Optional[Vocabulary]


def save_checkpoint(path, config, params, classes, vocab=None):
    """Write a checkpoint.

    Layout: ``MMCK``, u32 version, u32 header length, UTF-8 JSON header
    (config, class names, vocabulary tokens), u32 tensor count, then per
    tensor: u32 name length, name, u32 rows, u32 cols, rows*cols f64 values.
    All integers and floats are little-endian.
    """
    header = json.dumps(
        {"config": config.to_dict(), "classes": list(classes), "vocab": list(vocab.tokens) if vocab else None},
        sort_keys=True,
        ensure_ascii=False,
    ).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=FLOAT)
        rows, cols = (arr.shape[0], 1) if arr.ndim == 1 else arr.shape
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        config = FusionConfig.from_dict(header["config"])
        shapes = param_shapes(config, len(header["vocab"]) if header["vocab"] is not None else 0)
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            n = rows * cols
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(FLOAT)
            pos += 8 * n
            shape = shapes.get(name)
            params[name] = arr.reshape(shape if shape is not None and len(shape) == 1 else (rows, cols))
    except (struct.error, ValueError, KeyError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(data):
        raise ParseError(f"{path}: {len(data) - pos} trailing bytes")
    vocab = Vocabulary(header["vocab"]) if header["vocab"] is not None else None
    return Checkpoint(config, params, header["classes"], vocab)
