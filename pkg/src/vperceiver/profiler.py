"""Analytic cost model and wall-clock inference timing.

One FLOP here means one fused multiply-add inside a dense projection or
attention contraction; softmax, norms, activations and bias adds are not
counted. Under that convention the full-model count for the default
config lands at ~394M, and the total is an exact degree-2 polynomial in
the query count: input-side projections are constant, query-side
projections are linear, encoder attention is quadratic.
"""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import masking
from .model import ModelConfig, forward


@dataclass(frozen=True)
class FlopBreakdown:
    """Fused multiply-add counts per component for one query count."""
    k: int
    patch_embed: int
    cross_attn: int
    encoder_per_block: int
    encoder_total: int
    decoder: int
    head: int
    total: int


def flop_model(config: ModelConfig, k: int) -> FlopBreakdown:
    """Closed-form cost at k selected queries.

    With d = dim, h = mlp_ratio*d, P = n_patches, pd = patch_dim,
    C = n_classes, L = n_sa_layers:

      patch embed     P*pd*d
      cross block     2*P*d^2 (keys/values)  +  k*(2*d^2 + 2*P*d + 2*d*h)
      encoder block   k*(4*d^2 + 2*d*h) + 2*k^2*d          , x L
      decoder block   2*k*d^2 + 2*k*d + 2*d^2 + 2*d*h
      head            d*C
    """
    if not 1 <= k <= config.n_queries:
        raise ValueError(f"k {k} out of range [1, {config.n_queries}]")
    d, h = config.dim, config.mlp_hidden
    p, pd = config.n_patches, config.patch_dim
    patch = p * pd * d
    cross = 2 * p * d * d + k * (2 * d * d + 2 * p * d + 2 * d * h)
    per_block = k * (4 * d * d + 2 * d * h) + 2 * k * k * d
    encoder = config.n_sa_layers * per_block
    decoder = 2 * k * d * d + 2 * k * d + 2 * d * d + 2 * d * h
    head = d * config.n_classes
    total = patch + cross + encoder + decoder + head
    return FlopBreakdown(k=k, patch_embed=patch, cross_attn=cross,
                         encoder_per_block=per_block, encoder_total=encoder,
                         decoder=decoder, head=head, total=total)


def dqs_actual_flops(config: ModelConfig, n_kept: int) -> int:
    """Cost of a dynamic-selection pass that kept `n_kept` queries.

    Selection needs every cross-attention output, so the cross block runs
    at full Q; only the encoder stack and decoder shrink to n_kept.
    """
    at_kept = flop_model(config, n_kept)
    at_full = flop_model(config, config.n_queries)
    return at_kept.total - at_kept.cross_attn + at_full.cross_attn


@dataclass
class TimingRecord:
    batch_size: int
    control: str  # "k=<int>" or "t=<float>"
    mean_ms: float
    std_ms: float
    median_ms: float
    relative: float | None  # vs the k=Q row of the same run
    repeats: int
    threads: str


def _thread_config():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get(var):
            return f"{var}={os.environ[var]}"
    return f"cpus={os.cpu_count()}"


def time_forward(params, batch, config: ModelConfig, k=None, threshold=None,
                 repeats=5, warmup=2) -> TimingRecord:
    """Wall-clock time for one batched forward at fixed k, or a per-example
    dynamic-selection pass at a threshold. Warmup iterations are discarded;
    time is the monotonic clock around the full batch.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if (k is None) == (threshold is None):
        raise ValueError("pass exactly one of k or threshold")
    batch = np.asarray(batch, dtype=np.float32)

    if k is not None:
        def run():
            forward(batch, k, params, config)
        control = f"k={k}"
    else:
        def run():
            for image in batch:
                masking.dqs_forward(image, threshold, params, config)
        control = f"t={threshold}"

    for _ in range(warmup):
        run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1000.0)
    return TimingRecord(
        batch_size=batch.shape[0], control=control,
        mean_ms=statistics.fmean(times),
        std_ms=statistics.pstdev(times),
        median_ms=statistics.median(times),
        relative=None, repeats=repeats, threads=_thread_config(),
    )


def profile_run(params, batch, config: ModelConfig, k_list, repeats=5, warmup=2):
    """Timing records for each k, with the relative column normalized to
    the k=Q measurement of this same run (measured even if not requested)."""
    ks = list(k_list)
    measured = {k: time_forward(params, batch, config, k=k, repeats=repeats,
                                warmup=warmup) for k in ks}
    q = config.n_queries
    if q in measured:
        baseline = measured[q]
    else:
        baseline = time_forward(params, batch, config, k=q, repeats=repeats,
                                warmup=warmup)
    for k in ks:
        measured[k].relative = measured[k].mean_ms / baseline.mean_ms
    return [measured[k] for k in ks]


def profile_csv_rows(config: ModelConfig, records):
    """Rows of the profile CSV: flop components joined with timing.

    Schema: k,flops_total,flops_xattn,flops_encoder,flops_other,
    time_ms_mean,time_ms_std,time_rel
    """
    rows = ["k,flops_total,flops_xattn,flops_encoder,flops_other,"
            "time_ms_mean,time_ms_std,time_rel"]
    for rec in records:
        k = int(rec.control.split("=")[1])
        fb = flop_model(config, k)
        other = fb.total - fb.cross_attn - fb.encoder_total
        rows.append(
            f"{k},{fb.total},{fb.cross_attn},{fb.encoder_total},{other},"
            f"{rec.mean_ms!r},{rec.std_ms!r},{rec.relative!r}"
        )
    return rows
