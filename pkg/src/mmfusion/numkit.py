"""Small dense numeric kernel on top of numpy float64 arrays.

Vectors and matrices are plain ``numpy.ndarray`` objects; the helpers here
add the shape checks and numerically careful formulations the rest of the
package relies on.
"""

import numpy as np

from .errors import CapacityError, NumericError, ShapeError

FLOAT = np.float64


def as_vector(values, name="vector"):
    v = np.asarray(values, dtype=FLOAT)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-d array, got shape {v.shape}")
    return v


def as_matrix(values, name="matrix"):
    m = np.asarray(values, dtype=FLOAT)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"{name} must be a non-empty 2-d array, got shape {m.shape}")
    return m


def check_finite(arr, what="value"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")
    return arr


def affine(W, x, b):
    """Return ``W @ x + b``; raises ShapeError naming both shapes on mismatch."""
    W = np.asarray(W, dtype=FLOAT)
    x = np.asarray(x, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot apply matrix of shape {W.shape} to vector of shape {x.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"bias of shape {b.shape} does not match matrix of shape {W.shape}")
    return W @ x + b


def logsumexp(z):
    z = as_vector(z, "logits")
    top = z.max()
    return top + np.log(np.exp(z - top).sum())


def stable_softmax(z):
    """Softmax computed on max-shifted logits."""
    z = as_vector(z, "logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z):
    z = as_vector(z, "logits")
    return z - logsumexp(z)


def squared_distance(a, b):
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"distance between shapes {a.shape} and {b.shape}")
    diff = a - b
    return float(diff @ diff)


def first_argmax(values):
    """Index of the first maximal entry (np.argmax already breaks ties low)."""
    return int(np.argmax(np.asarray(values)))


class SeededRng:
    """Seeded PCG64 stream with named, splittable substreams.

    Substreams are derived through ``numpy.random.SeedSequence`` from the
    root seed plus integer keys, so ``rng.substream(3)`` yields the same
    sequence on every platform and regardless of what the parent stream has
    already produced.
    """

    def __init__(self, seed, *keys):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def substream(self, *keys):
        return SeededRng(self.seed, *self.keys, *keys)

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, keys={self.keys})"


def _generator(rng):
    return rng.generator if isinstance(rng, SeededRng) else rng


def sample_distinct(rng, pool_size, k):
    """Draw ``k`` distinct indices from ``range(pool_size)``."""
    if k < 0:
        raise CapacityError(f"cannot draw {k} items")
    if k > pool_size:
        raise CapacityError(f"cannot draw {k} distinct items from a pool of {pool_size}")
    if k == 0:
        return []
    return [int(i) for i in _generator(rng).choice(pool_size, size=k, replace=False)]
