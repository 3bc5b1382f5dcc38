"""Per-sample SGD training with validation-based model selection, and metrics."""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import make_splits
from .encoders import build_vocabulary, embedding_table, read_embedding_file
from .errors import CapacityError, EvaluationError, ModalityError, NumericError, ValidationError
from .losses import loss_and_grad, sgd_step
from .model import init_params, predict
from .numkit import SeededRng, sample_distinct

log = logging.getLogger(__name__)

MODALITY_FILTERS = ("both", "text_only", "image_only")

# substream keys under the run seed
_INIT_STREAM = 1
_EMBED_STREAM = 2
_EPOCH_STREAM = 3


def sample_negatives(rng, anchor, posts_by_class, g):
    """Draw ``g`` distinct texted samples from classes other than the anchor's."""
    if g == 0:
        return []
    pool = []
    for label in sorted(posts_by_class):
        if label != anchor.label:
            pool.extend(s for s in posts_by_class[label] if s.has_text)
    if len(pool) < g:
        raise CapacityError(f"only {len(pool)} candidate negatives for g={g}")
    return [pool[i] for i in sample_distinct(rng, len(pool), g)]


def group_by_class(samples):
    groups = {}
    for s in samples:
        if s.has_text:
            groups.setdefault(s.label, []).append(s)
    return groups


def supports(config, sample):
    """Whether a model of ``config.mode`` can classify ``sample``."""
    if config.mode == "text_only":
        return sample.has_text
    if config.mode == "image_only":
        return sample.has_image
    if config.mode == "early":
        return sample.has_text and sample.has_image
    return sample.has_text or sample.has_image


def apply_filter(sample, modality_filter):
    if modality_filter == "both":
        return sample
    if modality_filter == "text_only":
        return sample.without_image() if sample.has_text else None
    if modality_filter == "image_only":
        return sample.without_text() if sample.has_image else None
    raise ValidationError(f"unknown modality filter {modality_filter!r}")


@dataclass
class MetricsReport:
    accuracy: float
    f_macro: float
    f_micro: float
    confusion: list
    precision: list
    recall: list
    f1: list
    total: int
    skipped: int = 0

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "f_macro": self.f_macro,
            "f_micro": self.f_micro,
            "confusion": self.confusion,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "total": self.total,
            "skipped": self.skipped,
        }


def _safe_div(num, den):
    return num / den if den else 0.0


def metrics_from_confusion(confusion, skipped=0):
    """Metrics from a confusion matrix (rows = truth, columns = prediction).

    Per-class F1 is 0 when precision and recall are both undefined or zero;
    F-macro averages over every class, F-micro uses pooled counts.
    """
    C = np.asarray(confusion, dtype=np.int64)
    total = int(C.sum())
    if total == 0:
        raise EvaluationError("nothing to evaluate")
    tp = np.diag(C).astype(float)
    pred = C.sum(axis=0)
    true = C.sum(axis=1)
    precision = [_safe_div(tp[k], pred[k]) for k in range(len(tp))]
    recall = [_safe_div(tp[k], true[k]) for k in range(len(tp))]
    f1 = [_safe_div(2 * p * r, p + r) for p, r in zip(precision, recall)]
    tp_all = tp.sum()
    fp_all = float(pred.sum() - tp_all)
    fn_all = float(true.sum() - tp_all)
    p_micro = _safe_div(tp_all, tp_all + fp_all)
    r_micro = _safe_div(tp_all, tp_all + fn_all)
    return MetricsReport(
        accuracy=float(tp_all / total),
        f_macro=float(np.mean(f1)),
        f_micro=_safe_div(2 * p_micro * r_micro, p_micro + r_micro),
        confusion=C.tolist(),
        precision=precision,
        recall=recall,
        f1=f1,
        total=total,
        skipped=skipped,
    )


def evaluate(samples, params, config, modality_filter="both"):
    """Predict every sample under ``modality_filter`` and score the results.

    Samples that lack the requested modality, or that the model cannot
    classify, are skipped and counted.
    """
    C = np.zeros((config.class_count, config.class_count), dtype=np.int64)
    skipped = 0
    for sample in samples:
        s = apply_filter(sample, modality_filter)
        if s is None or not supports(config, s):
            skipped += 1
            continue
        C[s.label, predict(s, params, config)] += 1
    if C.sum() == 0:
        raise EvaluationError(f"no evaluable samples for a {config.mode} model under filter {modality_filter}")
    return metrics_from_confusion(C, skipped)


@dataclass
class TrainState:
    params: dict
    epoch: int
    rng: SeededRng
    best_validation_accuracy: float = -1.0
    best_params: dict = None
    best_epoch: int = 0
    history: list = field(default_factory=list)
    vocab: object = None


def build_text_vocabulary(dataset, min_count=1):
    corpus = [p.tokens() for p in dataset.posts if p.has_text]
    return build_vocabulary(corpus, min_count) if corpus else None


def check_compatible(dataset, config):
    if config.class_count != len(dataset.classes):
        raise ValidationError(f"config has {config.class_count} classes, dataset {len(dataset.classes)}")
    image_dim = dataset.image_dim
    if config.uses_image and image_dim is not None and image_dim != config.image_dim:
        raise ValidationError(f"config image_dim {config.image_dim} != dataset feature dim {image_dim}")


def initial_params(dataset, config, seed, vocab):
    rng = SeededRng(seed)
    embeddings = None
    if config.uses_text:
        if vocab is None:
            raise ValidationError(f"{config.mode} needs text but the dataset has none")
        vectors = read_embedding_file(dataset.embeddings_path, config.d) if dataset.embeddings_path else {}
        embeddings = embedding_table(vectors, vocab, config.d, rng.substream(_EMBED_STREAM))
    return init_params(config, len(vocab) if vocab else 0, rng.substream(_INIT_STREAM), embeddings)


def train(dataset, config, epochs, seed, split=None, vocab=None):
    """Train one model; returns the TrainState holding the best-on-validation snapshot.

    Each epoch shuffles the training samples with its own RNG substream,
    which also drives dropout and negative sampling.
    """
    check_compatible(dataset, config)
    split = split or make_splits(dataset.posts)
    if vocab is None and config.uses_text:
        vocab = build_text_vocabulary(dataset)
    params = initial_params(dataset, config, seed, vocab)
    state = TrainState(params=params, epoch=0, rng=SeededRng(seed), best_params=copy.deepcopy(params), vocab=vocab)
    if epochs == 0:
        return state

    train_samples = [s for s in dataset.encode(dataset.subset(split.train), vocab) if supports(config, s)]
    val_samples = dataset.encode(dataset.subset(split.validation), vocab)
    if not train_samples:
        raise ValidationError(f"no training posts usable by a {config.mode} model")
    by_class = group_by_class(train_samples)
    lr = config.learning_rate

    for epoch in range(1, epochs + 1):
        erng = state.rng.substream(_EPOCH_STREAM, epoch)
        total = 0.0
        for i in erng.permutation(len(train_samples)):
            sample = train_samples[i]
            negatives = None
            if config.mode == "common_space" and sample.has_text and sample.has_image:
                negatives = sample_negatives(erng, sample, by_class, config.g)
            try:
                value, grads, _ = loss_and_grad(sample, state.params, config, negatives, train=True, rng=erng)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, post {sample.post_id}: {exc}") from None
            sgd_step(state.params, grads, lr)
            total += value
        mean_loss = total / len(train_samples)
        val_acc = evaluate(val_samples, state.params, config).accuracy
        state.epoch = epoch
        state.history.append({"epoch": epoch, "train_loss": mean_loss, "validation_accuracy": val_acc})
        log.info("epoch %d: loss %.5f, validation accuracy %.4f", epoch, mean_loss, val_acc)
        if val_acc > state.best_validation_accuracy:
            state.best_validation_accuracy = val_acc
            state.best_params = copy.deepcopy(state.params)
            state.best_epoch = epoch
    return state


def evaluate_all_filters(samples, params, config):
    """Metrics under every modality filter the model can serve."""
    out = {}
    for f in MODALITY_FILTERS:
        try:
            out[f] = evaluate(samples, params, config, f)
        except (EvaluationError, ModalityError):
            continue
    return out
