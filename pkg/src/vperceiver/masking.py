"""Query masking schedule and dynamic query selection.

Training-time masking: per batch, draw K uniformly from [1, Q] and use
only the first K rows of the ordered latent-query table. The prefix rule
makes early queries participate in (almost) every batch, so importance
decays with query index.

Inference-time selection (DQS): run cross-attention with all Q queries,
then walk the output tokens in order and drop any token whose cosine
similarity with some earlier token exceeds a threshold t. The survivors
are the only tokens the encoder stack and decoder ever see, so compute
shrinks per example while the cross-attention cost stays at full Q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class MaskSchedule:
    """Uniform draws over [1, q_max], reproducible from the seed.

    Draws are random-access in the step index: the stream for step s is
    derived from (rng_seed, s), so resuming a run re-creates the exact
    sequence.
    """
    q_max: int
    rng_seed: int

    def __post_init__(self):
        if self.q_max < 1:
            raise ValueError("q_max must be >= 1")


def sample_k(schedule: MaskSchedule, step: int) -> int:
    """Number of queries for this batch: uniform in [1, q_max]."""
    rng = np.random.default_rng([schedule.rng_seed, int(step)])
    return int(rng.integers(1, schedule.q_max + 1))


def truncate_queries(queries, k: int):
    """First k rows of the query table, in order, as a contiguous copy."""
    n = queries.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k {k} out of range [1, {n}]")
    if isinstance(queries, Tensor):
        return T.gather_rows(queries, np.arange(k))
    return np.ascontiguousarray(np.asarray(queries)[:k])


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of dynamic query selection for one example.

    `kept` is the 1-based, strictly increasing list of surviving query
    indices; index 1 is always present. `max_similarity` is the largest
    pairwise cosine observed among all ordered token pairs (0.0 when there
    is a single token).
    """
    kept: tuple
    threshold: float
    max_similarity: float

    def __post_init__(self):
        if len(self.kept) < 1 or self.kept[0] != 1:
            raise ValueError("selection must keep query 1")
        if any(b <= a for a, b in zip(self.kept, self.kept[1:])):
            raise ValueError("kept indices must be strictly increasing")

    @property
    def n_kept(self):
        return len(self.kept)

    def zero_based(self):
        return np.asarray(self.kept, dtype=np.int64) - 1


def pairwise_cosine(y) -> np.ndarray:
    """Full pairwise cosine-similarity matrix of the token rows.

    Computed at 64-bit and clamped to [-1, 1]; zero-norm rows compare as
    0 to everything (same convention as tensor.cosine_similarity).
    """
    arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = arr / safe
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    zero = (norms[:, 0] == 0.0)
    sims[zero, :] = 0.0
    sims[:, zero] = 0.0
    return sims


def dqs_select(y, t: float, compare_kept_only: bool = False) -> SelectionResult:
    """Drop tokens too similar to an earlier token.

    Token i survives iff i is first or max_j<i cos(y_i, y_j) <= t; strictly
    greater than t triggers removal. By default the comparison runs against
    ALL predecessors regardless of their own fate, which makes the kept set
    monotone in t. `compare_kept_only` switches to comparing against
    surviving predecessors only (documented variant; monotonicity in t is
    not guaranteed there).
    """
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {t}")
    sims = pairwise_cosine(y)
    n = sims.shape[0]
    kept = [1]
    max_sim = 0.0
    reference = [0]  # row indices compared against, 0-based
    for i in range(1, n):
        prev = reference if compare_kept_only else range(i)
        s = max(sims[i, j] for j in prev)
        max_sim = max(max_sim, s)
        if s <= t:
            kept.append(i + 1)
            reference.append(i)
    if not compare_kept_only and n > 1:
        # report the global max over all ordered pairs, not only the tested ones
        iu = np.triu_indices(n, k=1)
        max_sim = float(sims[iu].max())
    return SelectionResult(kept=tuple(kept), threshold=float(t), max_similarity=float(max_sim))


def dqs_forward(image, t, params, config, compare_kept_only=False, trace=None):
    """Classify one image with per-example query selection.

    Cross-attention runs with the full query table; selection happens on
    its output tokens (after the block's MLP, i.e. the tokens entering the
    encoder). Returns (logits, number of surviving queries).
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError("dqs_forward takes a single [C,H,W] image")
    patches = M.patchify(arr, config.patch_size)
    tokens = M.embed(patches, params)
    x = M.cross_attend(tokens, params["latents"], params, trace)
    selection = dqs_select(x.data, t, compare_kept_only)
    if trace is not None:
        trace["dqs_selection"] = selection
    x = T.gather_rows(x, selection.zero_based())
    for layer in range(config.n_sa_layers):
        x = M.encoder_block(x, params, layer, config, trace)
    logits = M.decode_classify(x, params, config, trace)
    return logits, selection.n_kept
