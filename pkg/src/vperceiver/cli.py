"""Command-line surface.

Subcommands: train, eval, sweep-k, sweep-dqs, profile, export-attn.
Configuration files are flat `key = value` text (one key per line, `#`
comments) whose keys mirror the ModelConfig and TrainConfig fields; CLI
flags override file values.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import harness
from .data import DataFormatError, load_cifar10, make_synthetic
from .model import ConfigError, ModelConfig, ParamStore, init_params
from .profiler import profile_csv_rows, profile_run
from .tensor import NumericError
from .train import TrainConfig, load_checkpoint, train_loop

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def parse_config_file(path):
    """Flat key = value config; returns (model kwargs, train kwargs)."""
    model_kwargs, train_kwargs = {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _MODEL_KEYS:
            model_kwargs[key] = _parse_value(value)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _parse_value(value)
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return model_kwargs, train_kwargs


def _parse_value(text):
    lowered = text.lower()
    if lowered in ("none", ""):
        return None
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _load_dataset(model_config, train_config, data_dir):
    if train_config.data_kind == "cifar10":
        if not data_dir:
            raise ConfigError("data_kind=cifar10 requires --data-dir")
        return load_cifar10(data_dir)
    return make_synthetic(
        train_config.data_seed, train_config.n_per_class,
        model_config.n_classes, model_config.image_size,
        noise=train_config.data_noise,
    )


def _configs_from(args, overrides=None):
    model_kwargs, train_kwargs = ({}, {})
    if getattr(args, "config", None):
        model_kwargs, train_kwargs = parse_config_file(args.config)
    if overrides:
        train_kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _restore(ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    return ckpt, ParamStore.from_state_dict(ckpt.params)


def _split_of(train, test, name):
    if name not in ("train", "test"):
        raise ConfigError(f"unknown split {name!r}")
    return train if name == "train" else test


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _cmd_train(args):
    mode = {"masking": "query_masking", "fixed-q": "fixed_q"}.get(args.mode, args.mode)
    overrides = {"mode": mode if args.mode else None, "fixed_k": args.fixed_k,
                 "steps": args.steps, "seed": args.seed}
    model_config, train_config = _configs_from(args, overrides)
    train, _, meta = _load_dataset(model_config, train_config, args.data_dir)
    params = init_params(model_config, train_config.seed)
    ckpt, metrics = train_loop(
        params, train, meta, model_config, train_config,
        checkpoint_path=args.out, checkpoint_every=args.checkpoint_every,
        metrics_path=args.metrics, log_every=args.log_every,
    )
    print(f"trained {ckpt.step} steps; final loss {metrics[-1][1]:.4f}; "
          f"checkpoint: {args.out}")
    return 0


def _cmd_eval(args):
    ckpt, params = _restore(args.ckpt)
    train, test, meta = _load_dataset(ckpt.model_config, ckpt.train_config, args.data_dir)
    split = _split_of(train, test, args.split)
    if (args.k is None) == (args.threshold is None):
        raise ConfigError("pass exactly one of --k or --threshold")
    if args.k is not None:
        acc = harness.eval_fixed_k(params, split, args.k, ckpt.model_config, meta)
        print(f"accuracy(k={args.k}, split={args.split}) = {acc:.4f}")
    else:
        records = harness.sweep_dqs(params, split, [args.threshold],
                                    ckpt.model_config, meta)
        rec = records[0]
        print(f"accuracy(t={args.threshold}, split={args.split}) = {rec.accuracy:.4f}  "
              f"queries mean={rec.q_mean:.2f} std={rec.q_std:.2f} "
              f"min={rec.q_min} max={rec.q_max}")
    return 0


def _cmd_sweep_k(args):
    ckpt, params = _restore(args.ckpt)
    train, test, meta = _load_dataset(ckpt.model_config, ckpt.train_config, args.data_dir)
    split = _split_of(train, test, args.split)
    modes = tuple(m.strip() for m in args.modes.split(","))
    records = harness.sweep_queries(
        params, split, _int_list(args.k_list), ckpt.model_config, meta,
        modes=modes, repeats=args.repeats, seed=args.seed,
        include_timing=args.timing,
    )
    harness.records_to_csv(records, args.out_csv)
    print(f"wrote {len(records)} rows to {args.out_csv}")
    return 0


def _cmd_sweep_dqs(args):
    ckpt, params = _restore(args.ckpt)
    train, test, meta = _load_dataset(ckpt.model_config, ckpt.train_config, args.data_dir)
    split = _split_of(train, test, args.split)
    records = harness.sweep_dqs(params, split, _float_list(args.t_list),
                                ckpt.model_config, meta, include_timing=args.timing)
    harness.records_to_csv(records, args.out_csv)
    print(f"wrote {len(records)} rows to {args.out_csv}")
    return 0


def _cmd_profile(args):
    model_kwargs, _ = parse_config_file(args.config) if args.config else ({}, {})
    config = ModelConfig(**model_kwargs)
    params = init_params(config, seed=0)
    rng = np.random.default_rng(0)
    batch = rng.standard_normal(
        (args.batch, config.in_channels, config.image_size, config.image_size)
    ).astype(np.float32)
    records = profile_run(params, batch, config, _int_list(args.k_list),
                          repeats=args.repeats)
    rows = profile_csv_rows(config, records)
    Path(args.out_csv).write_text("\n".join(rows) + "\n")
    print(f"wrote {len(rows) - 1} rows to {args.out_csv}")
    return 0


def _cmd_export_attn(args):
    ckpt, params = _restore(args.ckpt)
    train, test, meta = _load_dataset(ckpt.model_config, ckpt.train_config, args.data_dir)
    split = _split_of(train, test, args.split)
    atlas = harness.export_attention(params, split, args.out, ckpt.model_config, meta)
    print(f"exported {atlas.maps.shape[0]} query maps "
          f"({atlas.grid_rows}x{atlas.grid_cols} montage) to {args.out}.csv/.pgm")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vperceiver",
        description="Visual Perceiver with query masking and dynamic query selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data-dir", help="CIFAR-10 binary directory (data_kind=cifar10)")
    p.add_argument("--mode", choices=["masking", "fixed-q"])
    p.add_argument("--fixed-k", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", help="metrics CSV output path")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--split", default="test")
    p.add_argument("--data-dir")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-k", help="fixed-k / random-subset accuracy sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k-list", default="1,2,4,8,16,32,48,64")
    p.add_argument("--modes", default="fixed_k,random_subset")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data-dir")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=_cmd_sweep_k)

    p = sub.add_parser("sweep-dqs", help="dynamic-selection threshold sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--t-list", default="0.6,0.65,0.7,0.8,0.9,0.99")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data-dir")
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=_cmd_sweep_dqs)

    p = sub.add_parser("profile", help="FLOP model and inference timing")
    p.add_argument("--config")
    p.add_argument("--k-list", default="1,2,4,8,16,32,48,64")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("export-attn", help="averaged cross-attention maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--split", default="test")
    p.add_argument("--data-dir")
    p.set_defaults(func=_cmd_export_attn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
