"""Visual Perceiver classifier.

Pipeline: image -> patch tokens -> linear embed + learned positional
embeddings -> single-head cross-attention from an ordered table of learned
latent queries -> stack of multi-head self-attention encoder blocks over
the latents -> single-query decoder block -> linear classification head.

Only the first ``k_select`` latent queries enter the cross-attention, so
the encoder cost scales with the number of selected queries, not with the
number of image patches.

All blocks are pre-norm. The cross-attention and decoder blocks carry an
output projection and their own MLP sub-block (Perceiver-IO style); the
latent queries themselves are the residual stream entering the first
block. Single-head attention scales scores by sqrt(dim); self-attention
scales by sqrt(dim / heads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid model/training configuration."""


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    dim: int = 192
    n_queries: int = 64
    n_sa_layers: int = 12
    n_heads: int = 3
    mlp_ratio: int = 4
    n_classes: int = 10
    # the cross-attention and decoder blocks always use a single head

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1")
        for name in ("image_size", "patch_size", "in_channels", "dim", "n_sa_layers",
                     "n_heads", "mlp_ratio", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def mlp_hidden(self):
        return self.mlp_ratio * self.dim


class ParamStore:
    """Ordered, named collection of learnable tensors.

    Entry order is fixed at construction; the latent query table keeps its
    row order, which is semantically meaningful (prefix selection).
    """

    def __init__(self, entries):
        self._entries = dict(entries)

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def zero_grad(self):
        for p in self._entries.values():
            p.grad = None

    def n_params(self):
        return sum(p.data.size for p in self._entries.values())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self._entries.items()}

    def clone(self):
        return ParamStore(
            {name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
             for name, p in self._entries.items()}
        )

    @staticmethod
    def from_state_dict(state):
        return ParamStore(
            {name: Tensor(arr, requires_grad=True) for name, arr in state.items()}
        )


def _trunc_normal(rng, shape, std=0.02):
    # resample anything beyond 2 sigma, like the usual ViT/DeiT init
    arr = rng.standard_normal(shape) * std
    bad = np.abs(arr) > 2 * std
    while bad.any():
        arr[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(arr) > 2 * std
    return arr.astype(np.float32)


def param_shapes(config: ModelConfig):
    """Name -> shape for every learnable tensor, in model order."""
    d, h = config.dim, config.mlp_hidden
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.n_patches, d),
        "latents": (config.n_queries, d),
    }

    def attn_block(prefix, with_kv_norm):
        shapes[f"{prefix}.norm_q.gamma"] = (d,)
        shapes[f"{prefix}.norm_q.beta"] = (d,)
        if with_kv_norm:
            shapes[f"{prefix}.norm_kv.gamma"] = (d,)
            shapes[f"{prefix}.norm_kv.beta"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}"] = (d, d)
        for bias in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.attn.{bias}"] = (d,)
        shapes[f"{prefix}.norm_mlp.gamma"] = (d,)
        shapes[f"{prefix}.norm_mlp.beta"] = (d,)
        shapes[f"{prefix}.mlp.w1"] = (d, h)
        shapes[f"{prefix}.mlp.b1"] = (h,)
        shapes[f"{prefix}.mlp.w2"] = (h, d)
        shapes[f"{prefix}.mlp.b2"] = (d,)

    attn_block("cross", with_kv_norm=True)
    for i in range(config.n_sa_layers):
        attn_block(f"enc{i}", with_kv_norm=False)
    shapes["decoder.query"] = (1, d)
    attn_block("decoder", with_kv_norm=True)
    shapes["head.norm.gamma"] = (d,)
    shapes["head.norm.beta"] = (d,)
    shapes["head.weight"] = (d, config.n_classes)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameters: truncated normal (std 0.02) for weights, queries and
    positional embeddings; zeros for biases and norm betas; ones for gammas."""
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma",):
            data = np.ones(shape, dtype=np.float32)
        elif leaf in ("beta",) or leaf.startswith("b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = _trunc_normal(rng, shape)
        entries[name] = Tensor(data, requires_grad=True)
    return ParamStore(entries)


def count_params(config: ModelConfig) -> int:
    """Closed-form learnable-parameter count.

    Per component (d = dim, h = mlp_ratio*d, P = n_patches, Q = n_queries,
    C = n_classes, pd = patch_dim, L = n_sa_layers):

      patch embed     pd*d + d
      pos embed       P*d
      latent queries  Q*d
      attn core       4*(d*d + d)                      (q/k/v/out proj + biases)
      mlp sub-block   2*d + d*h + h + h*d + d          (norm + two linears)
      cross block     4*d + attn core + mlp            (two pre-norms)
      encoder block   2*d + attn core + mlp            (one pre-norm) , x L
      decoder block   d + cross block                  (one learned query row)
      head            2*d + d*C + C                    (final norm + linear)

    Affine in Q with slope exactly d (only the query table grows).
    """
    d, h = config.dim, config.mlp_hidden
    attn_core = 4 * (d * d + d)
    mlp = 2 * d + d * h + h + h * d + d
    cross_block = 4 * d + attn_core + mlp
    encoder_block = 2 * d + attn_core + mlp
    total = (
        config.patch_dim * d + d
        + config.n_patches * d
        + config.n_queries * d
        + cross_block
        + config.n_sa_layers * encoder_block
        + d + cross_block
        + 2 * d + d * config.n_classes + config.n_classes
    )
    return total


def patchify(image, patch_size):
    """Split [C,H,W] (or [B,C,H,W]) into row-major flat patches.

    Output rows run left-to-right then top-to-bottom over the patch grid;
    each row is the patch flattened channel-major. Values are copied
    unchanged.
    """
    arr = np.asarray(image, dtype=np.float32)
    batched = arr.ndim == 4
    if not batched:
        if arr.ndim != 3:
            raise ConfigError(f"expected [C,H,W] or [B,C,H,W], got shape {arr.shape}")
        arr = arr[None]
    b, c, height, width = arr.shape
    if height % patch_size != 0 or width % patch_size != 0:
        raise ConfigError(
            f"image {height}x{width} not divisible by patch_size {patch_size}"
        )
    hp, wp = height // patch_size, width // patch_size
    x = arr.reshape(b, c, hp, patch_size, wp, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # [B, hp, wp, C, p, p]
    patches = np.ascontiguousarray(x.reshape(b, hp * wp, c * patch_size * patch_size))
    return patches if batched else patches[0]


def embed(patches, params) -> Tensor:
    """token_i = patches_i @ W + b + pos_embed_i."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    w = params["patch_embed.weight"]
    if x.shape[-1] != w.shape[0]:
        raise T.ShapeError(
            f"patch dim {x.shape[-1]} does not match projection rows {w.shape[0]}"
        )
    return T.add(T.add(T.matmul(x, w), params["patch_embed.bias"]), params["pos_embed"])


def _norm(x, params, prefix, name):
    return T.layer_norm(x, params[f"{prefix}.{name}.gamma"], params[f"{prefix}.{name}.beta"])


def _mlp(x, params, prefix):
    h = T.add(T.matmul(_norm(x, params, prefix, "norm_mlp"), params[f"{prefix}.mlp.w1"]),
              params[f"{prefix}.mlp.b1"])
    out = T.add(T.matmul(T.gelu(h), params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return T.add(x, out)


def _cross_block(queries, inputs, params, prefix, trace=None, trace_key=None):
    """Pre-norm single-head cross-attention block with residual MLP.

    Each output row depends only on its own query row and the inputs.
    """
    d = params[f"{prefix}.attn.wq"].shape[0]
    qn = _norm(queries, params, prefix, "norm_q")
    kvn = _norm(inputs, params, prefix, "norm_kv")
    q = T.add(T.matmul(qn, params[f"{prefix}.attn.wq"]), params[f"{prefix}.attn.bq"])
    k = T.add(T.matmul(kvn, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"])
    v = T.add(T.matmul(kvn, params[f"{prefix}.attn.wv"]), params[f"{prefix}.attn.bv"])
    scores = T.mul(T.matmul(q, T.transpose(k, _swap_axes(k))), 1.0 / math.sqrt(d))
    weights = T.softmax(scores)
    pre = T.matmul(weights, v)
    attn_out = T.add(T.matmul(pre, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])
    if trace is not None:
        trace[f"{trace_key}_weights"] = weights.data.copy()
        trace[f"{trace_key}_pre_out"] = pre.data.copy()
    x = T.add(queries, attn_out)
    return _mlp(x, params, prefix)


def _swap_axes(t):
    n = t.data.ndim
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def cross_attend(inputs, queries, params, trace=None) -> Tensor:
    """Attend k latent queries over the input tokens (single head).

    `inputs` is [n_x, d] or [B, n_x, d]; `queries` is [k, d] (shared over
    the batch). Returns tokens with the same leading shape as inputs and k
    rows.
    """
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    inputs = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if queries.shape[-2] == 0:
        raise ValueError("cross_attend requires at least one query")
    if inputs.shape[-2] == 0:
        raise ValueError("cross_attend requires at least one input token")
    return _cross_block(queries, inputs, params, "cross", trace, "cross")


def encoder_block(tokens, params, layer, config, trace=None) -> Tensor:
    """Pre-norm multi-head self-attention + MLP, both residual."""
    prefix = f"enc{layer}"
    heads = config.n_heads
    d = config.dim
    dh = d // heads
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, n, _ = x.shape
    if trace is not None:
        trace.setdefault("encoder_tokens", []).append(n)

    xn = _norm(x, params, prefix, "norm_q")
    q = T.add(T.matmul(xn, params[f"{prefix}.attn.wq"]), params[f"{prefix}.attn.bq"])
    k = T.add(T.matmul(xn, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"])
    v = T.add(T.matmul(xn, params[f"{prefix}.attn.wv"]), params[f"{prefix}.attn.bv"])

    def split_heads(t):
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores)
    if trace is not None:
        trace.setdefault("encoder_weights", []).append(weights.data.copy())
    ctx = T.matmul(weights, v)  # [B, H, n, dh]
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    attn_out = T.add(T.matmul(merged, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])
    x = T.add(x, attn_out)
    x = _mlp(x, params, prefix)
    return T.reshape(x, x.shape[1:]) if squeeze else x


def decode_classify(tokens, params, config, trace=None) -> Tensor:
    """Single learned decoder query over the latent tokens, then the head."""
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if x.shape[-2] == 0:
        raise ValueError("decode_classify requires at least one token")
    squeeze = x.data.ndim == 2
    out = _cross_block(params["decoder.query"], x, params, "decoder", trace, "decoder")
    out = T.layer_norm(out, params["head.norm.gamma"], params["head.norm.beta"])
    logits = T.add(T.matmul(out, params["head.weight"]), params["head.bias"])
    # drop the single-token axis: [.., 1, C] -> [.., C]
    if squeeze:
        return T.reshape(logits, (config.n_classes,))
    return T.reshape(logits, (logits.shape[0], config.n_classes))


def forward_subset(image, indices, params, config, trace=None) -> Tensor:
    """Full pipeline using an arbitrary subset of latent query rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size < 1 or idx.size > config.n_queries:
        raise ValueError(f"subset size {idx.size} out of range [1, {config.n_queries}]")
    if len(np.unique(idx)) != idx.size:
        raise ValueError("query subset indices must be unique")
    patches = patchify(image, config.patch_size)
    tokens = embed(patches, params)
    queries = T.gather_rows(params["latents"], idx)
    x = cross_attend(tokens, queries, params, trace)
    for layer in range(config.n_sa_layers):
        x = encoder_block(x, params, layer, config, trace)
    return decode_classify(x, params, config, trace)


def forward(image, k_select, params, config, trace=None) -> Tensor:
    """Classify using only the first `k_select` latent queries.

    Bit-identical to running a model whose query table is physically
    truncated to its first `k_select` rows; queries past the prefix cannot
    influence the logits.
    """
    if not 1 <= k_select <= config.n_queries:
        raise ValueError(f"k_select {k_select} out of range [1, {config.n_queries}]")
    return forward_subset(image, np.arange(k_select), params, config, trace)
