"""Histogram denoiser for oracle-scale instances.

Discretizes each position's simplex point (first V-1 coordinates on a
uniform grid) together with a time bucket, and stores the empirical
distribution of the clean token per cell. With enough samples the cell
rows converge to the cell-averaged true posterior, which is what the
quadrature oracle computes independently; the pair gives a two-route check
of the optimal-denoiser theory on tiny instances.

Only viable tiny-scale: the table is dense over (grid cells)^S x buckets,
so V <= 4 and S <= 2 are enforced.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .simplex import SequenceState, softmax

PROB_FLOOR = 1e-12  # only used when exporting rows as logits


@dataclass
class TabularDenoiser:
    rows: np.ndarray          # (num_cells, S, V) probability rows
    visited: np.ndarray       # (num_cells,) bool
    vocab_size: int
    seq_len: int
    grid_resolution: int
    time_buckets: int

    @property
    def cells_per_position(self) -> int:
        return self.grid_resolution ** (self.vocab_size - 1)

    def _cell_index(self, probs: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Flat table index for a batch: probs (M,S,V), t (M,)."""
        g = self.grid_resolution
        bins = np.clip((probs[..., : self.vocab_size - 1] * g).astype(np.int64), 0, g - 1)
        pos_cell = np.zeros(bins.shape[:2], dtype=np.int64)  # (M,S)
        for c in range(self.vocab_size - 1):
            pos_cell = pos_cell * g + bins[..., c]
        key = np.zeros(bins.shape[0], dtype=np.int64)
        for k in range(self.seq_len):
            key = key * self.cells_per_position + pos_cell[:, k]
        tb = np.clip((np.asarray(t) * self.time_buckets).astype(np.int64),
                     0, self.time_buckets - 1)
        return key * self.time_buckets + tb

    def predict_probs_batch(self, state_logits: np.ndarray, t: np.ndarray) -> np.ndarray:
        probs = softmax(np.asarray(state_logits, dtype=np.float64), axis=-1)
        idx = self._cell_index(probs, t)
        return self.rows[idx]

    def predict_probs(self, state: SequenceState) -> np.ndarray:
        return self.predict_probs_batch(state.logits[None], np.array([state.t]))[0]

    # denoiser protocol (inference schemes expect logits)
    def predict_logits_batch(self, state_logits: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.log(np.maximum(self.predict_probs_batch(state_logits, t), PROB_FLOOR))

    def predict_logits(self, state: SequenceState) -> np.ndarray:
        return np.log(np.maximum(self.predict_probs(state), PROB_FLOOR))


def fit_tabular_denoiser(state_logits: np.ndarray, t: np.ndarray,
                         targets: np.ndarray, vocab_size: int,
                         grid_resolution: int, time_buckets: int) -> TabularDenoiser:
    """Count clean tokens per (state cell, time bucket); unvisited cells
    fall back to the uniform row."""
    state_logits = np.asarray(state_logits, dtype=np.float64)
    if state_logits.ndim != 3:
        raise InputError("expected (N,S,V) state logits")
    n, s, v = state_logits.shape
    if v != vocab_size:
        raise InputError("vocab_size mismatch")
    if v > 4 or s > 2:
        raise InputError("tabular fitting is tiny-scale only (V<=4, S<=2)")
    targets = np.asarray(targets, dtype=np.int64).reshape(n, s)

    table = TabularDenoiser(
        rows=np.empty(0), visited=np.empty(0), vocab_size=v, seq_len=s,
        grid_resolution=grid_resolution, time_buckets=time_buckets)
    num_cells = table.cells_per_position ** s * time_buckets
    counts = np.zeros((num_cells, s, v), dtype=np.float64)

    probs = softmax(state_logits, axis=-1)
    idx = table._cell_index(probs, np.asarray(t))
    for k in range(s):
        np.add.at(counts, (idx, k, targets[:, k]), 1.0)

    totals = counts.sum(axis=-1, keepdims=True)  # same total for every k
    visited = totals[:, 0, 0] > 0
    rows = np.full_like(counts, 1.0 / v)
    np.divide(counts, totals, out=rows, where=totals > 0)
    table.rows = rows
    table.visited = visited
    return table
