"""Reproduction harness: accuracy sweeps, random-subset baselines,
dynamic-selection sweeps, and averaged cross-attention export.

All evaluations normalize with the dataset's stored constants, process
examples in index order and involve no randomness beyond explicitly
seeded subset draws, so every number here is reproducible bit-exactly.

Sweep results serialize to CSV with repr-formatted floats, which parse
back to the identical values (lossless round trip). Wall-clock timing in
sweep records is optional and off by default so that sweep CSVs stay
deterministic; use the profiler for timing studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import DatasetMeta, Split
from .masking import dqs_forward
from .model import ModelConfig, forward, forward_subset
from .profiler import dqs_actual_flops, flop_model, time_forward

EVAL_BATCH = 256


def normalize_split(split: Split, meta: DatasetMeta):
    """Eval-mode normalization of a whole split at once."""
    return ((split.images - meta.mean[None, :, None, None])
            / meta.std[None, :, None, None]).astype(np.float32)


def _predict(images, params, config, k=None, subset=None):
    preds = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), EVAL_BATCH):
        chunk = images[start:start + EVAL_BATCH]
        if subset is not None:
            logits = forward_subset(chunk, subset, params, config)
        else:
            logits = forward(chunk, k, params, config)
        preds[start:start + EVAL_BATCH] = logits.data.argmax(axis=-1)
    return preds


def eval_fixed_k(params, split: Split, k, config: ModelConfig, meta: DatasetMeta):
    """Top-1 accuracy using the first k queries for every example."""
    images = normalize_split(split, meta)
    preds = _predict(images, params, config, k=k)
    return float((preds == split.labels).mean())


def eval_random_subsets(params, split: Split, k, config: ModelConfig,
                        meta: DatasetMeta, repeats=5, seed=0):
    """Accuracy with k query rows drawn uniformly (not a prefix).

    Each repeat draws its own subset from (seed, repeat); returns
    (mean, std, per-repeat accuracies).
    """
    if not 1 <= k <= config.n_queries:
        raise ValueError(f"k {k} out of range [1, {config.n_queries}]")
    images = normalize_split(split, meta)
    accs = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        subset = np.sort(rng.choice(config.n_queries, size=k, replace=False))
        preds = _predict(images, params, config, subset=subset)
        accs.append(float((preds == split.labels).mean()))
    return float(np.mean(accs)), float(np.std(accs)), accs


@dataclass
class SweepRecord:
    """One sweep row: a control setting and everything measured there."""
    mode: str  # fixed_k | random_subset | dqs
    value: float  # K or threshold t
    accuracy: float
    acc_std: float
    acc_min: float
    acc_max: float
    q_mean: float
    q_std: float
    q_min: int
    q_max: int
    flops_mean: float
    flops_actual_mean: float
    time_ms: float
    repeats: int


def sweep_queries(params, split: Split, k_list, config: ModelConfig,
                  meta: DatasetMeta, modes=("fixed_k", "random_subset"),
                  repeats=5, seed=0, include_timing=False):
    """Accuracy/FLOPs per query count for prefix and random-subset modes."""
    records = []
    for mode in modes:
        for k in k_list:
            fb = flop_model(config, k)
            if mode == "fixed_k":
                acc = eval_fixed_k(params, split, k, config, meta)
                acc_stats = (acc, 0.0, acc, acc)
                n_rep = 1
            elif mode == "random_subset":
                mean, std, accs = eval_random_subsets(
                    params, split, k, config, meta, repeats=repeats, seed=seed)
                acc_stats = (mean, std, min(accs), max(accs))
                n_rep = repeats
            else:
                raise ValueError(f"unknown sweep mode {mode!r}")
            time_ms = 0.0
            if include_timing:
                images = normalize_split(split, meta)[:min(len(split), EVAL_BATCH)]
                time_ms = time_forward(params, images, config, k=k).mean_ms
            records.append(SweepRecord(
                mode=mode, value=float(k),
                accuracy=acc_stats[0], acc_std=acc_stats[1],
                acc_min=acc_stats[2], acc_max=acc_stats[3],
                q_mean=float(k), q_std=0.0, q_min=k, q_max=k,
                flops_mean=float(fb.total), flops_actual_mean=float(fb.total),
                time_ms=time_ms, repeats=n_rep,
            ))
    return records


def sweep_dqs(params, split: Split, t_list, config: ModelConfig,
              meta: DatasetMeta, include_timing=False):
    """Per-threshold dynamic-selection sweep with per-example dispatch.

    flops_mean applies the fixed-K cost model at each example's surviving
    count; flops_actual_mean additionally charges the full-Q cross block
    that selection itself requires.
    """
    images = normalize_split(split, meta)
    records = []
    for t in t_list:
        correct = 0
        counts = np.empty(len(images), dtype=np.int64)
        budget = np.empty(len(images), dtype=np.float64)
        actual = np.empty(len(images), dtype=np.float64)
        for i, image in enumerate(images):
            logits, n_kept = dqs_forward(image, t, params, config)
            counts[i] = n_kept
            budget[i] = flop_model(config, n_kept).total
            actual[i] = dqs_actual_flops(config, n_kept)
            correct += int(logits.data.argmax() == split.labels[i])
        time_ms = 0.0
        if include_timing:
            probe = images[:min(len(images), 64)]
            time_ms = time_forward(params, probe, config, threshold=t).mean_ms
        acc = correct / len(images)
        records.append(SweepRecord(
            mode="dqs", value=float(t),
            accuracy=acc, acc_std=0.0, acc_min=acc, acc_max=acc,
            q_mean=float(counts.mean()), q_std=float(counts.std()),
            q_min=int(counts.min()), q_max=int(counts.max()),
            flops_mean=float(budget.mean()), flops_actual_mean=float(actual.mean()),
            time_ms=time_ms, repeats=1,
        ))
    return records


def records_to_csv(records, path=None):
    names = [f.name for f in fields(SweepRecord)]
    lines = [",".join(names)]
    for rec in records:
        cells = []
        for name in names:
            val = getattr(rec, name)
            cells.append(repr(val) if isinstance(val, float) else str(val))
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def records_from_csv(text_or_path):
    if isinstance(text_or_path, Path) or (
            isinstance(text_or_path, str) and "\n" not in text_or_path
            and text_or_path.endswith(".csv")):
        text = Path(text_or_path).read_text()
    else:
        text = text_or_path
    lines = [ln for ln in text.splitlines() if ln.strip()]
    names = lines[0].split(",")
    types = {f.name: f.type for f in fields(SweepRecord)}
    records = []
    for line in lines[1:]:
        kwargs = {}
        for name, cell in zip(names, line.split(",")):
            t = types[name]
            if t == "str":
                kwargs[name] = cell
            elif t == "int":
                kwargs[name] = int(cell)
            else:
                kwargs[name] = float(cell)
        records.append(SweepRecord(**kwargs))
    return records


@dataclass
class AttentionAtlas:
    """Per-query cross-attention weights over patches, split-averaged.

    maps[q] is a probability vector over the n_patches inputs; the montage
    tiles the per-query maps as sqrt(Q) x sqrt(Q) squares of
    sqrt(n_patches) x sqrt(n_patches) pixels, queries ordered left-to-right
    then top-to-bottom.
    """
    maps: np.ndarray  # [Q, n_patches] float64
    grid_rows: int
    grid_cols: int
    map_side: int
    n_examples: int


def attention_atlas(params, split: Split, config: ModelConfig,
                    meta: DatasetMeta) -> AttentionAtlas:
    """Average the post-softmax cross-attention rows across the split."""
    images = normalize_split(split, meta)
    q = config.n_queries
    acc = np.zeros((q, config.n_patches), dtype=np.float64)
    for start in range(0, len(images), EVAL_BATCH):
        chunk = images[start:start + EVAL_BATCH]
        trace = {}
        forward(chunk, q, params, config, trace=trace)
        acc += trace["cross_weights"].sum(axis=0, dtype=np.float64)
    maps = acc / len(images)
    cols = math.ceil(math.sqrt(q))
    rows = math.ceil(q / cols)
    return AttentionAtlas(
        maps=maps, grid_rows=rows, grid_cols=cols,
        map_side=int(round(math.sqrt(config.n_patches))),
        n_examples=len(images),
    )


def map_entropy(p):
    """Shannon entropy (nats) of one attention map."""
    p = np.asarray(p, dtype=np.float64)
    p = p / p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def atlas_to_pgm(atlas: AttentionAtlas) -> bytes:
    """Binary PGM montage; each per-query map scaled to full range."""
    side = atlas.map_side
    canvas = np.zeros((atlas.grid_rows * side, atlas.grid_cols * side), dtype=np.uint8)
    for qi, row in enumerate(atlas.maps):
        tile = row.reshape(side, side)
        peak = tile.max()
        scaled = np.zeros_like(tile) if peak == 0 else tile / peak
        r, c = divmod(qi, atlas.grid_cols)
        canvas[r * side:(r + 1) * side, c * side:(c + 1) * side] = \
            np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii")
    return header + canvas.tobytes()


def export_attention(params, split: Split, out_prefix, config: ModelConfig,
                     meta: DatasetMeta) -> AttentionAtlas:
    """Write `<prefix>.csv` (rows=queries, cols=patches) and `<prefix>.pgm`."""
    atlas = attention_atlas(params, split, config, meta)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(repr(float(v)) for v in row) for row in atlas.maps]
    Path(f"{out_prefix}.csv").write_text("\n".join(lines) + "\n")
    Path(f"{out_prefix}.pgm").write_bytes(atlas_to_pgm(atlas))
    return atlas
