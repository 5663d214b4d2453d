"""Shared test utilities that do touch the package under test."""

import numpy as np

from vperceiver import tensor as T
from vperceiver.model import ModelConfig, ParamStore, init_params, param_shapes

import oracles


def gradcheck(build, arrays, h=1e-3, tol=1e-3, floor=1e-6):
    """Check analytic gradients of `build(*tensors) -> scalar Tensor`
    against central finite differences, all in float64 graphs.

    Returns the worst relative error seen (asserts it is below tol).
    """
    tensors = [T.Tensor(np.asarray(a, np.float64), requires_grad=True,
                        dtype=np.float64) for a in arrays]
    build(*tensors).backward()
    worst = 0.0
    for idx, base in enumerate(arrays):
        def f_at(x, idx=idx):
            args = [np.asarray(a, np.float64).copy() for a in arrays]
            args[idx] = x
            ts = [T.Tensor(a, dtype=np.float64) for a in args]
            return build(*ts).item()
        fd = oracles.fd_gradient(f_at, np.asarray(base, np.float64), h=h)
        rel = oracles.max_rel_err(tensors[idx].grad, fd, floor=floor)
        worst = max(worst, rel)
        assert rel < tol, f"arg {idx}: relative gradient error {rel} >= {tol}"
    return worst


def tiny_config(**overrides):
    """Smallest config that still exercises every code path."""
    kwargs = dict(image_size=8, patch_size=4, in_channels=3, dim=8,
                  n_queries=2, n_sa_layers=1, n_heads=2, mlp_ratio=4,
                  n_classes=3)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def params_f64(config, seed=0):
    """Parameter store with float64 tensors (for oracle-grade graphs)."""
    base = init_params(config, seed)
    return ParamStore({
        name: T.Tensor(p.data.astype(np.float64), requires_grad=True,
                       dtype=np.float64)
        for name, p in base.items()
    })


def random_image(config, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (config.in_channels, config.image_size, config.image_size)
    if batch is not None:
        shape = (batch,) + shape
    return rng.random(shape, dtype=np.float32)


def flat_param_vector(params):
    return np.concatenate([p.data.reshape(-1) for _, p in params.items()])


def assert_shapes_match(params, config):
    shapes = param_shapes(config)
    assert params.names() == list(shapes)
    for name, shape in shapes.items():
        assert params[name].shape == shape
