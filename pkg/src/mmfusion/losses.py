"""Training objectives, their analytic gradients, and a finite-difference checker.

The per-sample objective depends on the mode:

* unimodal, early and joint fusion: ``-log p(y | x)``
* common space: ``lam * -log p(y | x) + aux`` where ``aux`` is the sum over
  negatives of ``-log sigmoid(d(a, n_j) - d(a, p))`` with ``a`` the projected
  image, ``p`` the post's own text, ``n_j`` texts from other classes and ``d``
  the squared Euclidean distance
* late fusion: the two branch NLLs added (the branches share no parameters,
  so this trains them independently)
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .encoders import Dropout, aggregate_backward
from .errors import CapacityError, ClassIndexError, NumericError, StateError, ValidationError
from .model import SHARED_SPACE_MODES, Sample, _prefix_keys, encode_sample_text, forward
from .numkit import FLOAT, SeededRng, log_softmax, squared_distance


def nll_loss(probabilities, true_class):
    """``-log p[true_class]`` for a probability vector."""
    p = np.asarray(probabilities, dtype=FLOAT)
    if not 0 <= true_class < p.shape[0]:
        raise ClassIndexError(f"class {true_class} out of range for {p.shape[0]} classes")
    with np.errstate(divide="ignore"):
        return float(-np.log(p[true_class]))


def nll_from_logits(logits, true_class):
    logits = np.asarray(logits, dtype=FLOAT)
    if not 0 <= true_class < logits.shape[0]:
        raise ClassIndexError(f"class {true_class} out of range for {logits.shape[0]} classes")
    return float(-log_softmax(logits)[true_class])


@dataclass
class PairBatch:
    anchor: np.ndarray  # projected image vector
    positive: np.ndarray  # text vector of the same post
    negatives: list  # text vectors of posts from other classes


def aux_terms(d_pos, d_negs):
    """Per-negative terms ``log(1 + exp(d_pos - d_neg))``."""
    t = d_pos - np.asarray(d_negs, dtype=FLOAT)
    return np.logaddexp(0.0, t)


def _sigmoid(t):
    return np.exp(-np.logaddexp(0.0, -t))


def aux_loss(batch):
    if len(batch.negatives) == 0:
        raise CapacityError("auxiliary loss needs at least one negative pair")
    d_pos = squared_distance(batch.anchor, batch.positive)
    d_negs = [squared_distance(batch.anchor, n) for n in batch.negatives]
    return float(aux_terms(d_pos, d_negs).sum())


@dataclass
class _AuxState:
    anchor: np.ndarray
    image: np.ndarray
    pos_vec: np.ndarray
    pos_cache: object
    neg: list  # (vec, cache) pairs

    def batch(self):
        return PairBatch(self.anchor, self.pos_vec, [v for v, _ in self.neg])


def _aux_state(sample, cache, params, config, negatives):
    """Vectors entering the auxiliary term, or None when it does not apply."""
    if config.mode != "common_space" or not negatives:
        return None
    if cache.image_proj is None or not sample.has_text:
        return None
    E = params["E"]
    if config.aux_clean_text:
        pos_vec, pos_cache = encode_sample_text(sample, E, config)
    else:
        pos_vec, pos_cache = cache.text_vec, cache.text_cache
    neg = [encode_sample_text(_as_sample(n), E, config) for n in negatives]
    return _AuxState(cache.image_proj, cache.image, pos_vec, pos_cache, neg)


def _as_sample(neg):
    if isinstance(neg, Sample):
        if not neg.has_text:
            raise ValidationError("negative samples must carry text")
        return neg
    return Sample(token_ids=np.asarray(neg, dtype=np.int64))


def _objective(sample, cache, params, config, negatives):
    if sample.label is None:
        raise ValidationError("training sample has no label")
    if config.mode == "late":
        return sum(nll_from_logits(c.logits, sample.label) for c in cache.branches.values()), None
    nll = nll_from_logits(cache.logits, sample.label)
    if config.mode != "common_space":
        return nll, None
    aux = _aux_state(sample, cache, params, config, negatives)
    value = config.lam * nll
    if aux is not None:
        value += aux_loss(aux.batch())
    return value, aux


def sample_loss(sample, params, config, negatives=None, train=False, rng=None):
    """Objective value for one sample; returns ``(loss, cache)``."""
    _, cache = forward(sample, params, config, train=train, rng=rng)
    value, _ = _objective(sample, cache, params, config, negatives)
    return value, cache


def combined_loss(sample, negatives, params, config, train=False, rng=None):
    """``lam * nll + aux`` for a common-space model."""
    if config.mode != "common_space":
        raise ValidationError(f"combined loss is defined for common_space, not {config.mode}")
    return sample_loss(sample, params, config, negatives, train, rng)[0]


class SparseRows:
    """Row-sparse gradient of an embedding table (rows may repeat)."""

    def __init__(self, shape):
        self.shape = shape
        self._ids = []
        self._rows = []

    def add(self, ids, rows):
        self._ids.append(np.asarray(ids, dtype=np.int64))
        self._rows.append(np.asarray(rows, dtype=FLOAT))

    @property
    def ids(self):
        return np.concatenate(self._ids) if self._ids else np.zeros(0, dtype=np.int64)

    @property
    def rows(self):
        return np.concatenate(self._rows) if self._rows else np.zeros((0, self.shape[1]))

    def apply(self, target, scale):
        if self._ids:
            np.add.at(target, self.ids, scale * self.rows)

    def to_dense(self):
        out = np.zeros(self.shape)
        self.apply(out, 1.0)
        return out


def _zero_grads(params):
    grads = {}
    for name, value in params.items():
        grads[name] = SparseRows(value.shape) if name.rsplit(".", 1)[-1] == "E" else np.zeros_like(value)
    return grads


def _text_backward(grads, name, d_text, text_cache, config):
    if text_cache is None or config.freeze_embeddings:
        return
    ids, rows = aggregate_backward(d_text, text_cache, config.d)
    grads[name].add(ids, rows)


def _backward_stack(cache, label, params, config, prefix, weight, grads):
    mode = config.mode
    d_logits = cache.probs.copy()
    d_logits[label] -= 1.0
    d_logits *= weight
    grads[prefix + "W_out"] += np.outer(d_logits, cache.hidden)
    grads[prefix + "b_out"] += d_logits
    d_hidden = params[prefix + "W_out"].T @ d_logits
    grads[prefix + "W_h"] += np.outer(d_hidden, cache.x)
    grads[prefix + "b_h"] += d_hidden
    d_x = params[prefix + "W_h"].T @ d_hidden

    d_text = d_image = None
    if mode == "text_only":
        d_text = d_x
    elif mode == "early":
        d_text = d_x[config.image_dim :]
    elif mode in SHARED_SPACE_MODES:
        if cache.provenance == "text_only":
            d_text = d_x
        elif cache.provenance == "image_only":
            d_image = d_x
        elif config.pooling == "max":
            d_image = np.where(cache.image_wins, d_x, 0.0)
            d_text = np.where(cache.image_wins, 0.0, d_x)
        else:
            d_image = d_text = 0.5 * d_x
    if d_text is not None:
        _text_backward(grads, prefix + "E", d_text, cache.text_cache, config)
    if d_image is not None:
        grads[prefix + "W_proj"] += np.outer(d_image, cache.image)
        grads[prefix + "b_proj"] += d_image


def _aux_backward(aux, config, grads):
    a = aux.anchor
    d_pos = squared_distance(a, aux.pos_vec)
    d_negs = np.array([squared_distance(a, v) for v, _ in aux.neg])
    s = _sigmoid(d_pos - d_negs)
    diff_pos = 2.0 * (a - aux.pos_vec)
    d_anchor = s.sum() * diff_pos
    _text_backward(grads, "E", -s.sum() * diff_pos, aux.pos_cache, config)
    for s_j, (vec, neg_cache) in zip(s, aux.neg):
        diff = 2.0 * (a - vec)
        d_anchor -= s_j * diff
        _text_backward(grads, "E", s_j * diff, neg_cache, config)
    grads["W_proj"] += np.outer(d_anchor, aux.image)
    grads["b_proj"] += d_anchor


def backward(sample, negatives, params, config, cache, aux=None):
    """Analytic gradient of the active objective w.r.t. every parameter.

    Returns a dict keyed like ``params``; embedding tables map to SparseRows.
    ``cache`` must come from ``forward`` on the same sample and config.
    """
    if cache.mode != config.mode:
        raise StateError(f"cache from a {cache.mode} forward used with a {config.mode} config")
    if sample.label is None:
        raise ValidationError("training sample has no label")
    grads = _zero_grads(params)
    if config.mode == "late":
        for branch, c in cache.branches.items():
            prefix, mode = _prefix_keys("late")[branch]
            _backward_stack(c, sample.label, params, config.replace(mode=mode), prefix, 1.0, grads)
        return grads
    weight = config.lam if config.mode == "common_space" else 1.0
    _backward_stack(cache, sample.label, params, config, "", weight, grads)
    if aux is None:
        aux = _aux_state(sample, cache, params, config, negatives)
    if aux is not None:
        _aux_backward(aux, config, grads)
    return grads


def loss_and_grad(sample, params, config, negatives=None, train=True, rng=None):
    """Forward, objective and backward in one go: ``(loss, grads, cache)``."""
    _, cache = forward(sample, params, config, train=train, rng=rng)
    value, aux = _objective(sample, cache, params, config, negatives)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} for post {sample.post_id!r}")
    return value, backward(sample, negatives, params, config, cache, aux=aux), cache


def dense(grad):
    return grad.to_dense() if isinstance(grad, SparseRows) else grad


def sgd_step(params, grads, learning_rate):
    """In-place ``p <- p - lr * grad``."""
    for name, grad in grads.items():
        if isinstance(grad, SparseRows):
            grad.apply(params[name], -learning_rate)
        else:
            params[name] -= learning_rate * grad


def grad_norm_sq(grads):
    total = 0.0
    for g in grads.values():
        g = dense(g)
        total += float((g * g).sum())
    return total


@dataclass
class TensorCheck:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    passed: bool

    def to_dict(self):
        return {
            "tensor": self.name,
            "checked": self.checked,
            "max_rel_error": self.max_rel_error,
            "worst_index": list(self.worst_index),
            "analytic": self.analytic,
            "numeric": self.numeric,
            "pass": self.passed,
        }


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    tensors: list = field(default_factory=list)

    @property
    def passed(self):
        return all(t.passed for t in self.tensors)

    @property
    def worst(self):
        return max(self.tensors, key=lambda t: t.max_rel_error)

    @property
    def max_rel_error(self):
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    def failures(self):
        return [t for t in self.tensors if not t.passed]

    def to_text(self):
        lines = [f"gradient check: step={self.step:g} tolerance={self.tolerance:g}"]
        for t in self.tensors:
            flag = "ok" if t.passed else "FAIL"
            lines.append(
                f"  {flag:4} {t.name:12} coords={t.checked:5d} max_rel={t.max_rel_error:.3e}"
                f" at {list(t.worst_index)} (analytic={t.analytic:.6e}, numeric={t.numeric:.6e})"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)

    def to_jsonl(self):
        return "\n".join(json.dumps(t.to_dict(), sort_keys=True) for t in self.tensors) + "\n"


def relative_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _coords(shape, analytic, max_coords, rng):
    size = int(np.prod(shape))
    if size <= max_coords:
        return [np.unravel_index(i, shape) for i in range(size)]
    flat = np.abs(analytic).ravel()
    nonzero = np.flatnonzero(flat)
    picked = list(rng.permutation(nonzero)[: max_coords // 2]) if nonzero.size else []
    rest = np.setdiff1d(np.arange(size), picked)
    picked += list(rng.permutation(rest)[: max_coords - len(picked)])
    return [np.unravel_index(int(i), shape) for i in sorted(picked)]


def check_gradient(f, params, analytic, step=1e-5, tolerance=1e-4, max_coords=2000, seed=0):
    """Compare ``analytic`` against central differences of ``f(params)``.

    Tensors with more than ``max_coords`` entries are checked on a
    deterministic sample of ``max_coords`` coordinates.
    """
    if step <= 0:
        raise ValidationError("finite-difference step must be positive")
    base = f(params)
    if not np.isfinite(base):
        raise NumericError(f"non-finite loss {base}")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, step=step)
    for name in sorted(params):
        p = params[name]
        a_full = np.asarray(dense(analytic[name]), dtype=FLOAT)
        if a_full.shape != p.shape:
            raise StateError(f"gradient for {name} has shape {a_full.shape}, parameter {p.shape}")
        worst = TensorCheck(name, 0, 0.0, (), 0.0, 0.0, True)
        coords = _coords(p.shape, a_full, max_coords, rng)
        for idx in coords:
            orig = p[idx]
            p[idx] = orig + step
            up = f(params)
            p[idx] = orig - step
            down = f(params)
            p[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}{list(idx)}")
            numeric = (up - down) / (2.0 * step)
            a = float(a_full[idx])
            rel = relative_error(a, numeric)
            if rel > worst.max_rel_error or not worst.worst_index:
                worst = TensorCheck(name, 0, rel, tuple(int(i) for i in idx), a, numeric, True)
        worst.checked = len(coords)
        worst.passed = worst.max_rel_error < tolerance
        report.tensors.append(worst)
    return report


def grad_check(params, sample, negatives, config, step=1e-5, tolerance=1e-4, dropout_seed=0, max_coords=2000):
    """Finite-difference check of ``backward`` for one sample in train mode.

    Dropout masks are replayed from ``dropout_seed`` on every evaluation so
    the objective is a deterministic function of the parameters.
    """

    def rng():
        return SeededRng(dropout_seed)

    def f(ps):
        return sample_loss(sample, ps, config, negatives, train=True, rng=rng())[0]

    _, grads, _ = loss_and_grad(sample, params, config, negatives, train=True, rng=rng())
    return check_gradient(f, params, grads, step, tolerance, max_coords)
