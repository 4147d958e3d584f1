"""Denoising training loop.

Each step draws a batch of clean token windows, a per-sequence time
t ~ U[0,1], fresh uniform-simplex noise, builds the interpolated state
along the KL geodesic, and minimizes the per-position cross-entropy of the
clean tokens under the denoiser. Optimization is Adam with linear warmup,
constant learning rate, and global-norm gradient clipping.

The derivation of the objective carries a 1/(1-t) time weight that the
trained loss deliberately drops; ``time_weighting=True`` restores a clamped
version of it for experiments and is off by default.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import CorpusStore
from .errors import ConfigError, NumericError
from .model import TransformerConfig, TransformerDenoiser, init_params, loss_and_grad
from .simplex import SequenceState, SmoothingConfig, smooth_onehot_logits, sample_noise_logits

TIME_WEIGHT_CAP = 10.0


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 1000
    lr: float = 3e-4
    lr_warmup_steps: int = 100
    beta: float = 0.01
    t_distribution: str = "uniform"
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    eval_every: int = 50
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    time_weighting: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not (0.0 < self.beta < 1.0):
            raise ConfigError("beta must lie in (0,1)")
        if self.t_distribution != "uniform":
            raise ConfigError(f"unknown t_distribution {self.t_distribution!r}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def make_training_example(tokens: np.ndarray, smoothing: SmoothingConfig,
                          rng: np.random.Generator, t: float | None = None):
    """One (noisy state, clean targets) pair.

    A single t is shared by the whole sequence; each position gets its own
    noise draw. Draw order (t, then noise) is part of the determinism
    contract.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if t is None:
        t = float(rng.uniform())
    l1 = smooth_onehot_logits(tokens, smoothing)
    l0 = sample_noise_logits(smoothing.vocab_size, rng, size=tokens.shape[0])
    state = SequenceState((1.0 - t) * l0 + t * l1, t=t)
    return state, tokens


def make_training_batch(tokens: np.ndarray, smoothing: SmoothingConfig,
                        rng: np.random.Generator):
    """Vectorized batch construction: returns (states (B,S,V), t (B,), targets)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, s = tokens.shape
    t = rng.uniform(size=b)
    l1 = smooth_onehot_logits(tokens, smoothing)
    l0 = sample_noise_logits(smoothing.vocab_size, rng, size=(b, s))
    states = (1.0 - t)[:, None, None] * l0 + t[:, None, None] * l1
    return states, t, tokens


class Adam:
    """Adaptive-moment optimizer with bias correction; state per tensor."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.95, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class TrainResult:
    model: TransformerDenoiser
    final_loss: float
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None


def train(corpus: CorpusStore, train_cfg: TrainConfig, model_cfg: TransformerConfig,
          out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Run the training loop; returns the trained model and metrics rows.

    With ``out_dir`` set, writes ``metrics.csv`` (step,loss,lr,wall_ms) and
    checkpoints (``model_final.ckpt`` plus periodic ``model_step*.ckpt``).
    A non-finite loss aborts with the step number and the last good
    checkpoint path.
    """
    if corpus.num_sequences == 0:
        raise ConfigError("corpus is empty")
    if corpus.vocab_size != model_cfg.vocab_size:
        raise ConfigError(
            f"corpus vocab {corpus.vocab_size} != model vocab {model_cfg.vocab_size}")
    if corpus.seq_len > model_cfg.max_seq_len:
        raise ConfigError("corpus windows longer than model max_seq_len")

    seed_root = np.random.SeedSequence(train_cfg.seed)
    init_rng, batch_rng = (np.random.default_rng(s) for s in seed_root.spawn(2))
    params = init_params(model_cfg, init_rng, dtype=np.float32)
    smoothing = SmoothingConfig(train_cfg.beta, model_cfg.vocab_size)
    opt = Adam(params, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        with open(metrics_path, "w", newline="") as f:
            csv.writer(f).writerow(["step", "loss", "lr", "wall_ms"])

    def metadata(step):
        return {
            "step": step,
            "seed": train_cfg.seed,
            "train_config": train_cfg.to_dict(),
            "model_config": model_cfg.to_dict(),
        }

    metrics: list[dict] = []
    last_ckpt: str | None = None
    loss = float("nan")
    t_start = time.perf_counter()
    for step in range(1, train_cfg.steps + 1):
        tokens, mask = corpus.sample_batch(train_cfg.batch_size, batch_rng)
        states, t, targets = make_training_batch(tokens, smoothing, batch_rng)
        weights = mask.astype(np.float64)
        if train_cfg.time_weighting:
            w_t = np.minimum(1.0 / np.maximum(1.0 - t, 1e-9), TIME_WEIGHT_CAP)
            weights = weights * w_t[:, None]
        try:
            loss, grads = loss_and_grad(params, model_cfg, states, t, targets, weights)
        except NumericError as e:
            raise NumericError(
                f"training diverged at step {step}: {e}", step=step,
                last_checkpoint=last_ckpt) from e
        if not math.isfinite(loss):
            raise NumericError(
                f"non-finite loss at step {step}", step=step, last_checkpoint=last_ckpt)
        clip_global_norm(grads, train_cfg.grad_clip)
        opt.step(params, grads, warmup_lr(train_cfg.lr, step, train_cfg.lr_warmup_steps))

        if step % train_cfg.eval_every == 0 or step == train_cfg.steps:
            row = {
                "step": step,
                "loss": loss,
                "lr": warmup_lr(train_cfg.lr, step, train_cfg.lr_warmup_steps),
                "wall_ms": (time.perf_counter() - t_start) * 1e3,
            }
            metrics.append(row)
            if metrics_path is not None:
                with open(metrics_path, "a", newline="") as f:
                    csv.writer(f).writerow(
                        [row["step"], f"{row['loss']:.6f}", f"{row['lr']:.2e}",
                         f"{row['wall_ms']:.1f}"])
            if log is not None:
                log(f"step {step}/{train_cfg.steps} loss {loss:.4f}")
        if (out_dir is not None and train_cfg.checkpoint_every
                and step % train_cfg.checkpoint_every == 0 and step < train_cfg.steps):
            path = out_dir / f"model_step{step:06d}.ckpt"
            save_checkpoint(params, metadata(step), path)
            last_ckpt = str(path)

    ckpt_path = None
    if out_dir is not None:
        ckpt_path = out_dir / "model_final.ckpt"
        save_checkpoint(params, metadata(train_cfg.steps), ckpt_path)
        ckpt_path = str(ckpt_path)
    model = TransformerDenoiser(params, model_cfg)
    return TrainResult(model=model, final_loss=loss, metrics=metrics,
                       checkpoint_path=ckpt_path)


def loss_by_time_bucket(model: TransformerDenoiser, corpus: CorpusStore,
                        beta: float, rng: np.random.Generator,
                        buckets=((0.0, 0.2), (0.8, 1.0)),
                        sequences_per_bucket: int = 256) -> list[float]:
    """Held-out denoising loss with t confined to each bucket.

    Used to confirm the trained model finds late times easier (the state
    carries more of the answer as t -> 1).
    """
    from .model import denoising_loss  # local import to avoid cycle at module load

    smoothing = SmoothingConfig(beta, model.cfg.vocab_size)
    out = []
    for lo, hi in buckets:
        tokens, mask = corpus.sample_batch(sequences_per_bucket, rng)
        b, s = tokens.shape
        t = rng.uniform(lo, hi, size=b)
        l1 = smooth_onehot_logits(tokens, smoothing)
        l0 = sample_noise_logits(smoothing.vocab_size, rng, size=(b, s))
        states = (1.0 - t)[:, None, None] * l0 + t[:, None, None] * l1
        preds = model.predict_logits_batch(states, t)
        out.append(denoising_loss(preds, tokens, mask))
    return out
