"""Training loop with query-masked batches, plus checkpoint I/O.

Every source of randomness is derived from (seed, stream tag, step), so
any step's batch, augmentation and query draw can be reproduced in
isolation; resuming from a checkpoint replays the exact uninterrupted
run. The optimizer is AdamW with linear warmup into cosine decay and
global-norm gradient clipping.

Checkpoint layout (little-endian): magic "VPQM", format version u32,
JSON-encoded model/train configs (u32 length prefix each), step u64,
then named float32 arrays for parameters and Adam moments, then a JSON
rng-state blob. Loading is bit-exact and rejects wrong magic/version.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DataFormatError, augment_normalize
from .masking import MaskSchedule, sample_k
from .model import ConfigError, ModelConfig, ParamStore, forward

CHECKPOINT_MAGIC = b"VPQM"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_FLOOR = 1e-6

# stream tags for per-step derived rngs
_STREAM_BATCH = 1
_STREAM_AUGMENT = 2


class CheckpointError(DataFormatError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    steps: int = 350_000
    batch_size: int = 512
    base_lr: float = 5e-4
    warmup_steps: int | None = None  # default: 5% of steps
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    mode: str = "query_masking"  # or "fixed_q"
    fixed_k: int | None = None
    seed: int = 0
    augment: bool = True  # crop/flip; disable for position-coded synthetic tasks
    # dataset descriptor, stored so checkpoints are self-describing
    data_kind: str = "synthetic"  # or "cifar10"
    data_seed: int = 0
    n_per_class: int = 200
    data_noise: float = 0.05

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.base_lr <= 0:
            raise ConfigError("steps, batch_size and base_lr must be positive")
        if self.mode not in ("query_masking", "fixed_q"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.mode == "fixed_q" and (self.fixed_k is None or self.fixed_k < 1):
            raise ConfigError("fixed_q mode needs fixed_k >= 1")
        if self.data_kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown data_kind {self.data_kind!r}")

    @property
    def effective_warmup(self):
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, int(round(0.05 * self.steps)))


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    params: dict  # name -> float32 ndarray
    moments: dict  # name -> {"m": ndarray, "v": ndarray}
    rng_state: dict


def compute_loss(logits, label):
    """Cross-entropy with log-sum-exp stabilization; scalar Tensor."""
    return T.cross_entropy(logits, label)


def lr_at(step, config: TrainConfig):
    """Linear warmup to base_lr, then cosine decay to the 1e-6 floor."""
    warmup = config.effective_warmup
    if step < warmup:
        return config.base_lr * step / warmup
    span = max(1, config.steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return LR_FLOOR + (config.base_lr - LR_FLOOR) * cosine


def init_moments(params: ParamStore):
    return {
        name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        for name, p in params.items()
    }


def adamw_step(params: ParamStore, grads, moments, lr, weight_decay, step):
    """Decoupled-weight-decay Adam update, applied in place.

    `step` is 1-based for the bias correction. Decay applies uniformly to
    every entry.
    """
    b1t = 1.0 - ADAM_BETA1 ** step
    b2t = 1.0 - ADAM_BETA2 ** step
    for name, p in params.items():
        g = grads[name]
        m = moments[name]["m"]
        v = moments[name]["v"]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / b1t
        v_hat = v / b2t
        update = m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay:
            update = update + np.float32(weight_decay) * p.data
        p.data -= np.float32(lr) * update


def clip_grads(grads, max_norm):
    total = math.fsum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale
    return norm


def _assemble_batch(split, meta, indices, seed, step, augment):
    rng = np.random.default_rng([seed, _STREAM_AUGMENT, step])
    images = np.stack([
        augment_normalize(split.images[i], meta, rng, train_mode=augment)
        for i in indices
    ])
    return images, split.labels[indices]


def train_loop(params: ParamStore, split, meta, model_config: ModelConfig,
               train_config: TrainConfig, checkpoint_path=None,
               checkpoint_every=None, metrics_path=None, resume_from=None,
               log_every=0, stop_at_step=None):
    """Run the optimization loop; returns (final Checkpoint, metrics rows).

    Metrics rows are (step, loss, lr, k_drawn); also streamed as CSV when
    `metrics_path` is given. On a non-finite loss the loop aborts with a
    diagnostic checkpoint at `<checkpoint_path>.diag` when a path is set.
    `stop_at_step` interrupts early with a resumable checkpoint; resuming
    replays the identical uninterrupted run because all randomness is
    derived per step.
    """
    cfg = train_config
    if cfg.mode == "fixed_q" and not 1 <= cfg.fixed_k <= model_config.n_queries:
        raise ConfigError(
            f"fixed_k {cfg.fixed_k} out of range [1, {model_config.n_queries}]"
        )
    schedule = MaskSchedule(q_max=model_config.n_queries, rng_seed=cfg.seed)
    start_step = 0
    if resume_from is not None:
        start_step = resume_from.step
        params = ParamStore.from_state_dict(resume_from.params)
        moments = {name: {"m": mv["m"].copy(), "v": mv["v"].copy()}
                   for name, mv in resume_from.moments.items()}
    else:
        moments = init_moments(params)

    end_step = cfg.steps if stop_at_step is None else min(cfg.steps, stop_at_step)
    metrics = []
    metrics_file = open(metrics_path, "w") if metrics_path else None
    if metrics_file:
        metrics_file.write("step,loss,lr,k_drawn\n")
    try:
        for step in range(start_step, end_step):
            if cfg.mode == "query_masking":
                k = sample_k(schedule, step)
            else:
                k = cfg.fixed_k
            batch_rng = np.random.default_rng([cfg.seed, _STREAM_BATCH, step])
            indices = batch_rng.integers(0, len(split), size=cfg.batch_size)
            images, labels = _assemble_batch(split, meta, indices, cfg.seed, step,
                                             cfg.augment)

            try:
                params.zero_grad()
                logits = forward(images, k, params, model_config)
                loss = compute_loss(logits, labels)
                loss_val = loss.item()
                grads = T.backward(loss, params)
            except T.NumericError:
                if checkpoint_path:
                    diag = _make_checkpoint(model_config, cfg, step, params, moments)
                    save_checkpoint(str(checkpoint_path) + ".diag", diag)
                raise
            clip_grads(grads, cfg.grad_clip)
            lr = lr_at(step, cfg)
            adamw_step(params, grads, moments, lr, cfg.weight_decay, step + 1)

            metrics.append((step, loss_val, lr, k))
            if metrics_file:
                metrics_file.write(f"{step},{loss_val!r},{lr!r},{k}\n")
            if log_every and (step % log_every == 0 or step == cfg.steps - 1):
                print(f"step {step:6d}  loss {loss_val:.4f}  lr {lr:.2e}  k {k}")
            if (checkpoint_path and checkpoint_every
                    and (step + 1) % checkpoint_every == 0 and step + 1 < end_step):
                ckpt = _make_checkpoint(model_config, cfg, step + 1, params, moments)
                save_checkpoint(checkpoint_path, ckpt)
    finally:
        if metrics_file:
            metrics_file.close()

    final = _make_checkpoint(model_config, cfg, end_step, params, moments)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, final)
    return final, metrics


def _make_checkpoint(model_config, train_config, step, params, moments):
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        step=step,
        params=params.state_dict(),
        moments={name: {"m": mv["m"].copy(), "v": mv["v"].copy()}
                 for name, mv in moments.items()},
        rng_state={"seed": train_config.seed, "step": step,
                   "derivation": "per-step (seed, stream, step)"},
    )


def _write_blob(f, payload: bytes):
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _write_array(f, name: str, arr: np.ndarray):
    _write_blob(f, name.encode("utf-8"))
    shape = arr.shape
    f.write(struct.pack("<I", len(shape)))
    for dim in shape:
        f.write(struct.pack("<Q", dim))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"{self.path}: truncated at offset {self.pos} "
                f"(needed {n} bytes, {len(self.raw) - self.pos} left)"
            )
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def blob(self):
        return self.take(self.u32())

    def array(self):
        name = self.blob().decode("utf-8")
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(count * 4), dtype="<f4").reshape(shape)
        return name, data.copy()  # frombuffer views are read-only


def save_checkpoint(path, ckpt: Checkpoint):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_blob(buf, json.dumps(asdict(ckpt.model_config)).encode("utf-8"))
    _write_blob(buf, json.dumps(asdict(ckpt.train_config)).encode("utf-8"))
    buf.write(struct.pack("<Q", ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _write_array(buf, name, arr)
    buf.write(struct.pack("<I", len(ckpt.moments)))
    for name, mv in ckpt.moments.items():
        _write_array(buf, name, mv["m"])
        _write_array(buf, name, mv["v"])
    _write_blob(buf, json.dumps(ckpt.rng_state).encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: file not found")
    r = _Reader(path.read_bytes(), path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    model_config = ModelConfig(**json.loads(r.blob().decode("utf-8")))
    train_config = TrainConfig(**json.loads(r.blob().decode("utf-8")))
    step = r.u64()
    params = {}
    for _ in range(r.u32()):
        name, arr = r.array()
        params[name] = arr
    moments = {}
    for _ in range(r.u32()):
        name_m, m = r.array()
        name_v, v = r.array()
        if name_m != name_v:
            raise CheckpointError(f"{path}: moment pair mismatch {name_m!r}/{name_v!r}")
        moments[name_m] = {"m": m, "v": v}
    rng_state = json.loads(r.blob().decode("utf-8"))
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(model_config=model_config, train_config=train_config,
                      step=step, params=params, moments=moments, rng_state=rng_state)
