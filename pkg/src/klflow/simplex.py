"""Exact geometry of the probability simplex in logit coordinates.

Tokens live on the V-simplex. Interpolation between a noise point and a
(smoothed) one-hot follows the KL geodesic, which is plain linear
interpolation of logits; everything here is a pure float64 function of
logits, and probability vectors materialize only at the boundaries
(sampling, decoding, metrics).

Logit vectors are defined modulo an additive constant. ``canonicalize``
pins the representative to exact log-probabilities (logsumexp == 0) so
that equality tests and serialization are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError

# Entries at or below this are treated as "on the boundary": their log is
# meaningless for geodesic math and almost certainly indicates an
# unsmoothed one-hot leaking in from a caller.
INTERIOR_FLOOR = 1e-300


@dataclass(frozen=True)
class SmoothingConfig:
    """Mixing weight beta and vocabulary size for one-hot smoothing."""

    beta: float
    vocab_size: int

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise InputError(f"beta must lie in (0,1), got {self.beta}")
        if self.vocab_size < 2:
            raise InputError(f"vocab_size must be >= 2, got {self.vocab_size}")

    @property
    def log_hit(self) -> float:
        """log probability assigned to the encoded token."""
        return float(np.log1p(-self.beta + self.beta / self.vocab_size))

    @property
    def log_miss(self) -> float:
        """log probability assigned to every other token."""
        return float(np.log(self.beta / self.vocab_size))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def canonicalize(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Return the unique shift of ``logits`` that is an exact log-probability
    vector (its exponentials sum to 1)."""
    return log_softmax(np.asarray(logits, dtype=np.float64), axis=axis)


def require_interior(probs: np.ndarray, what: str = "simplex point") -> np.ndarray:
    """Hard error unless every entry of ``probs`` exceeds the interior floor.

    Clamping silently would hide caller bugs (an unsmoothed one-hot), so a
    boundary point is always an error here.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if np.min(probs) <= INTERIOR_FLOOR:
        raise DomainError(
            f"{what} has an entry <= {INTERIOR_FLOOR}; log is undefined "
            "(did a raw one-hot bypass smoothing?)"
        )
    return probs


def smooth_onehot(token_id: int, cfg: SmoothingConfig) -> np.ndarray:
    """Probability vector (1-beta)*onehot + beta/V * ones.

    The mixture keeps every coordinate strictly positive so logarithms exist.
    """
    v = cfg.vocab_size
    if not (0 <= token_id < v):
        raise InputError(f"token_id {token_id} out of range [0,{v})")
    probs = np.full(v, cfg.beta / v, dtype=np.float64)
    probs[token_id] = 1.0 - cfg.beta + cfg.beta / v
    return probs


def smooth_onehot_logits(token_ids: np.ndarray | int, cfg: SmoothingConfig) -> np.ndarray:
    """Canonical logits of smoothed one-hots, vectorized over token ids.

    Returns shape ``token_ids.shape + (V,)``. Computed directly in log space:
    the two distinct entries are log(1-beta+beta/V) and log(beta/V), both
    already exact log-probabilities.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size):
        raise InputError("token id out of range for smoothing")
    out = np.full(token_ids.shape + (cfg.vocab_size,), cfg.log_miss, dtype=np.float64)
    np.put_along_axis(out, token_ids[..., None], cfg.log_hit, axis=-1)
    return out


def sample_dirichlet_uniform(vocab_size: int, rng: np.random.Generator,
                             size: int | tuple | None = None) -> np.ndarray:
    """Uniform sample(s) from the interior of the V-simplex (Dirichlet(1,..,1)).

    ``size`` follows numpy convention; the vocab axis is appended last.
    """
    if vocab_size < 2:
        raise InputError(f"vocab_size must be >= 2, got {vocab_size}")
    probs = rng.dirichlet(np.ones(vocab_size), size=size)
    # Interior with probability 1; the guard catches astronomically unlikely
    # exact-zero draws rather than letting a log(0) surface later.
    return require_interior(probs, "dirichlet sample")


def sample_noise_logits(vocab_size: int, rng: np.random.Generator,
                        size: int | tuple | None = None) -> np.ndarray:
    """Canonical logits of uniform-simplex noise draws."""
    return canonicalize(np.log(sample_dirichlet_uniform(vocab_size, rng, size)))


def kl_geodesic(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Point at parameter ``t`` on the KL geodesic from x0 to x1.

    The geodesic is the normalized weighted geometric mean
    ``C * x0**(1-t) * x1**t``, i.e. softmax of linearly interpolated logits.
    Both endpoints must be strictly interior.
    """
    if not (0.0 <= t <= 1.0):
        raise InputError(f"t must lie in [0,1], got {t}")
    l0 = np.log(require_interior(x0, "x0"))
    l1 = np.log(require_interior(x1, "x1"))
    return softmax(logit_interp(l0, l1, t))


def logit_interp(l0: np.ndarray, l1: np.ndarray, t: float) -> np.ndarray:
    """Linear logit interpolation (1-t)*l0 + t*l1."""
    l0 = np.asarray(l0, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    return (1.0 - t) * l0 + t * l1


def logit_velocity(l0: np.ndarray, l1: np.ndarray) -> np.ndarray:
    """Time derivative of the interpolated logits: constant l1 - l0."""
    return np.asarray(l1, dtype=np.float64) - np.asarray(l0, dtype=np.float64)


def path_velocity_simplex(x_t: np.ndarray, l0: np.ndarray, l1: np.ndarray) -> np.ndarray:
    """Velocity of the geodesic expressed on the simplex itself.

    Pushes the logit velocity through the softmax Jacobian at x_t:
    ``(diag(x_t) - x_t x_t^T)(l1 - l0)``. The result is tangent to the
    simplex (entries sum to zero).
    """
    x_t = require_interior(x_t, "x_t")
    dl = logit_velocity(l0, l1)
    return x_t * (dl - float(np.dot(x_t, dl)))


@dataclass
class SequenceState:
    """A sequence of S simplex points at a common time, stored as logits.

    ``logits`` has shape (S, V); each row softmaxes to a valid probability
    vector. Rows are kept canonical (exact log-probabilities) so two states
    are equal iff their arrays are equal.
    """

    logits: np.ndarray
    t: float

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise InputError(f"state logits must be S x V, got shape {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise InputError("state logits contain non-finite entries")
        if not (0.0 <= self.t <= 1.0):
            raise InputError(f"state time must lie in [0,1], got {self.t}")

    @property
    def seq_len(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    def probs(self) -> np.ndarray:
        """Row-wise simplex points (S, V)."""
        return softmax(self.logits, axis=-1)

    def decode(self) -> np.ndarray:
        """Per-position argmax tokens; ties break toward the lowest index."""
        return np.argmax(self.logits, axis=-1)
