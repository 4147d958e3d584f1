"""Generation schemes: ODE, one-sample, resampling, and hybrid.

All schemes share the same skeleton: start from uniform-simplex noise at
t=0 and walk a uniform time grid to t=1, asking the denoiser for
clean-token logits at every step.

- ``basic``: Euler step on logits toward the probability-weighted mean of
  the smoothed one-hot logits, l <- l + h/(1-t) * (lbar1 - l).
- ``semi_sampling``: the mean is replaced by one sampled token per
  position (top-k truncated), same Euler step.
- ``sampling``: draws tokens AND fresh noise each step and re-interpolates
  at t+h, so the state is re-randomized rather than integrated.
- ``hybrid``: basic steps while t < t_star, sampling steps afterwards.

Determinism contract: each trajectory owns an RNG stream seeded from
(seed, trajectory index); within one step the draws are position-major
token sampling first, then noise. The time grid is exact: with the default
h=1/N the basic-step factor h/(1-t) at the last step is exactly 1 and the
sampling-step noise coefficient is exactly 0, so no 1/(1-t) singularity is
ever touched and endpoints are reproduced bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .simplex import canonicalize, softmax

SCHEMES = ("basic", "semi_sampling", "sampling", "hybrid")
DEFAULT_T_STAR = 0.28  # best threshold found in the hybrid-scheme sweep


@dataclass(frozen=True)
class InferenceConfig:
    scheme: str = "sampling"
    steps: int = 32
    step_size: float | None = None  # None: 1/steps
    beta: float = 0.01
    top_k: int = 1
    t_star: float = DEFAULT_T_STAR
    seed: int = 0
    smoothing_denominator: str = "vocab"  # "steps" reproduces the literal formula

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.step_size is not None and abs(self.step_size * self.steps - 1.0) > 1e-9:
            raise ConfigError(
                "step_size * steps must equal 1 (trajectories must end at t=1)")
        if not (0.0 < self.beta < 1.0):
            raise ConfigError("beta must lie in (0,1)")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.scheme == "hybrid" and not (0.0 <= self.t_star <= 1.0):
            raise ConfigError("t_star must lie in [0,1]")
        if self.smoothing_denominator not in ("vocab", "steps"):
            raise ConfigError("smoothing_denominator must be 'vocab' or 'steps'")

    def smoothing_logs(self, vocab_size: int) -> tuple[float, float]:
        """(log_hit, log_miss) of the smoothed one-hot used during inference.

        The 'steps' denominator substitutes the iteration count for the
        vocabulary size inside the smoothing formula; it exists only to
        reproduce that literal reading and is not a normalized distribution.
        """
        denom = vocab_size if self.smoothing_denominator == "vocab" else self.steps
        log_hit = float(np.log1p(-self.beta + self.beta / denom))
        log_miss = float(np.log(self.beta / denom))
        return log_hit, log_miss


@dataclass(frozen=True)
class ClampMask:
    """Positions pinned to fixed tokens during generation (infilling)."""

    positions: dict[int, int] = field(default_factory=dict)

    def validate(self, seq_len: int, vocab_size: int) -> None:
        for pos, tok in self.positions.items():
            if not (0 <= pos < seq_len):
                raise InputError(f"clamp position {pos} outside sequence of length {seq_len}")
            if not (0 <= tok < vocab_size):
                raise InputError(f"clamp token {tok} outside vocabulary of size {vocab_size}")

    def __bool__(self) -> bool:
        return bool(self.positions)


@dataclass
class Trajectory:
    """Time-ordered record of one generation run."""

    times: list[float]
    decoded: np.ndarray
    final_logits: np.ndarray
    states: list[np.ndarray] | None = None  # populated when recording is on


def _schedule(cfg: InferenceConfig):
    """Exact (t, t_next, euler_factor) triples for the uniform grid.

    With the default step size, factor = 1/(N-i) and t_next = (i+1)/N are
    computed as single divisions so the final step is exact.
    """
    n = cfg.steps
    out = []
    for i in range(n):
        if cfg.step_size is None:
            t, t_next, factor = i / n, (i + 1) / n, 1.0 / (n - i)
        else:
            h = cfg.step_size
            t = i * h
            t_next = 1.0 if i == n - 1 else (i + 1) * h
            factor = h / (1.0 - t)
        out.append((t, t_next, factor))
    return out


def top_k_sample(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """One token per row of (S, V) logits, restricted to the k most probable.

    Truncation keeps the k largest probabilities (ties resolved toward the
    lower token index), renormalizes, and inverts the CDF in token-index
    order with one uniform draw per position, so consumption is exactly S
    draws, position-major.
    """
    logits = np.asarray(logits, dtype=np.float64)
    s, v = logits.shape
    if not (1 <= k <= v):
        raise InputError(f"top_k {k} outside [1, {v}]")
    p = softmax(logits, axis=-1)
    if k < v:
        keep = np.argsort(-p, axis=-1, kind="stable")[:, :k]
        keep.sort(axis=-1)
        psel = np.take_along_axis(p, keep, axis=-1)
    else:
        keep = None
        psel = p
    psel = psel / psel.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(psel, axis=-1)
    cdf[:, -1] = 1.0
    u = rng.random(s)
    j = np.sum(cdf <= u[:, None], axis=-1)
    if keep is None:
        return j
    return np.take_along_axis(keep, j[:, None], axis=-1)[:, 0]


def _tokens_to_logits(tokens: np.ndarray, vocab_size: int,
                      log_hit: float, log_miss: float) -> np.ndarray:
    out = np.full(tokens.shape + (vocab_size,), log_miss, dtype=np.float64)
    np.put_along_axis(out, tokens[..., None], log_hit, axis=-1)
    return out


def _apply_clamp(states: np.ndarray, clamp_rows: dict[int, np.ndarray] | None) -> None:
    if clamp_rows:
        for pos, row in clamp_rows.items():
            states[:, pos, :] = row


def run_inference(model, cfg: InferenceConfig, seq_len: int, count: int = 1,
                  clamp: ClampMask | None = None,
                  record_states: bool = False) -> list[Trajectory]:
    """Generate ``count`` sequences of length ``seq_len``.

    The model is any object with ``vocab_size`` and
    ``predict_logits_batch(states (M,S,V), t (M,)) -> (M,S,V)``. Trajectory
    batches are vectorized but each trajectory consumes only its own RNG
    stream, so results are independent of the batching.
    """
    v = model.vocab_size
    if cfg.top_k > v:
        raise ConfigError(f"top_k {cfg.top_k} exceeds vocabulary size {v}")
    if count < 1 or seq_len < 1:
        raise InputError("count and seq_len must be >= 1")
    log_hit, log_miss = cfg.smoothing_logs(v)
    clamp_rows = None
    if clamp:
        clamp.validate(seq_len, v)
        clamp_rows = {
            pos: canonicalize(_tokens_to_logits(np.array(tok), v, log_hit, log_miss))
            for pos, tok in clamp.positions.items()
        }

    rngs = [np.random.default_rng([cfg.seed, idx]) for idx in range(count)]
    states = np.stack([
        canonicalize(np.log(rng.dirichlet(np.ones(v), size=seq_len)))
        for rng in rngs
    ])
    _apply_clamp(states, clamp_rows)

    times = [0.0]
    recorded = [states.copy()] if record_states else None

    for t, t_next, factor in _schedule(cfg):
        out = model.predict_logits_batch(states, np.full(count, t))
        if cfg.scheme == "basic" or (cfg.scheme == "hybrid" and t < cfg.t_star):
            w = softmax(out, axis=-1)
            lbar = w * log_hit + (1.0 - w) * log_miss
            states = lbar if factor == 1.0 else states + factor * (lbar - states)
        elif cfg.scheme == "semi_sampling":
            tokens = np.stack([top_k_sample(out[m], cfg.top_k, rngs[m])
                               for m in range(count)])
            l1 = _tokens_to_logits(tokens, v, log_hit, log_miss)
            states = l1 if factor == 1.0 else states + factor * (l1 - states)
        else:  # sampling, or hybrid past the threshold
            tokens = np.stack([top_k_sample(out[m], cfg.top_k, rngs[m])
                               for m in range(count)])
            noise = np.stack([
                canonicalize(np.log(rng.dirichlet(np.ones(v), size=seq_len)))
                for rng in rngs
            ])
            l1 = _tokens_to_logits(tokens, v, log_hit, log_miss)
            coef = 1.0 - t_next
            states = l1 if coef == 0.0 else coef * noise + t_next * l1
        states = canonicalize(states)
        _apply_clamp(states, clamp_rows)
        times.append(t_next)
        if record_states:
            recorded.append(states.copy())

    return [
        Trajectory(
            times=list(times),
            decoded=np.argmax(states[m], axis=-1),
            final_logits=states[m].copy(),
            states=[snap[m].copy() for snap in recorded] if record_states else None,
        )
        for m in range(count)
    ]


def infer_basic(model, cfg: InferenceConfig, seq_len: int, **kw) -> Trajectory:
    if cfg.scheme != "basic":
        raise ConfigError("infer_basic requires scheme='basic'")
    return run_inference(model, cfg, seq_len, count=1, **kw)[0]


def infer_semi_sampling(model, cfg: InferenceConfig, seq_len: int, **kw) -> Trajectory:
    if cfg.scheme != "semi_sampling":
        raise ConfigError("infer_semi_sampling requires scheme='semi_sampling'")
    return run_inference(model, cfg, seq_len, count=1, **kw)[0]


def infer_sampling(model, cfg: InferenceConfig, seq_len: int, **kw) -> Trajectory:
    if cfg.scheme != "sampling":
        raise ConfigError("infer_sampling requires scheme='sampling'")
    return run_inference(model, cfg, seq_len, count=1, **kw)[0]


def infer_hybrid(model, cfg: InferenceConfig, seq_len: int, **kw) -> Trajectory:
    if cfg.scheme != "hybrid":
        raise ConfigError("infer_hybrid requires scheme='hybrid'")
    return run_inference(model, cfg, seq_len, count=1, **kw)[0]


def trajectory_csv_rows(traj: Trajectory):
    """Rows of (step, t, position, argmax_token, argmax_prob) for dumping."""
    if traj.states is None:
        raise InputError("trajectory was generated without state recording")
    rows = []
    for step, (t, state) in enumerate(zip(traj.times, traj.states)):
        probs = softmax(state, axis=-1)
        toks = np.argmax(state, axis=-1)
        for pos in range(state.shape[0]):
            rows.append((step, t, pos, int(toks[pos]), float(probs[pos, toks[pos]])))
    return rows
