"""Padding-aware encoder blocks.

The encoder is a strided convolutional frontend (4x length reduction)
followed by a stack of layers, each combining a Macaron feed-forward pair,
multi-head self-attention with relative sinusoidal positions, and a
convolution module (pointwise / GLU / depthwise / batch norm / Swish /
pointwise, in a residual).

Every batch-consuming op computes each sample on its valid slice and writes
zeros elsewhere, so in eval mode the valid region of a padded batch is
bit-identical to running the sample alone.  That exactness is the property
the test harness certifies; the deliberately broken variants in
:mod:`pangolinn.bugs` give up exactly that discipline.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .numerics import Rng, SequenceBatch, as_tensor, derive_seed, read_tensor, write_tensor
from .numerics import conv1d, depthwise_conv1d

__all__ = [
    "ConformerConfig",
    "DESK_CONFIG",
    "PAPER_CONFIG",
    "ParamSpec",
    "ParameterSet",
    "parameter_manifest",
    "attention_manifest",
    "init_parameters",
    "init_from_specs",
    "zero_parameters",
    "write_parameters",
    "read_parameters",
    "sinusoidal_pe",
    "rel_gather",
    "relative_position_logits",
    "rel_mhsa",
    "causal_attention_layer",
    "glu",
    "swish",
    "layer_norm",
    "batch_norm",
    "dropout",
    "conv_module",
    "ffn",
    "subsample_length",
    "subsampling_frontend",
    "encoder_layer",
    "encoder",
    "encoder_length_transfer",
]

NORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ConformerConfig:
    """Architecture hyperparameters.

    ``pointwise_kernel`` is fixed at 1: pointwise convolutions mix channels,
    not time, by definition.
    """

    num_layers: int = 2
    d_model: int = 16
    num_heads: int = 2
    ffn_dim: int = 32
    depthwise_kernel: int = 7
    pointwise_kernel: int = 1
    dropout_p: float = 0.1
    frontend_kernel: int = 3
    frontend_stride: int = 2
    frontend_pad: int = 1

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.depthwise_kernel % 2 == 0:
            raise ValueError("depthwise kernel must be odd")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.pointwise_kernel != 1:
            raise ValueError("pointwise convolutions have kernel size 1 by definition")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


DESK_CONFIG = ConformerConfig()
PAPER_CONFIG = ConformerConfig(
    num_layers=12, d_model=512, num_heads=8, ffn_dim=2048, depthwise_kernel=31
)


# ---------------------------------------------------------------------------
# Parameters.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    path: str
    shape: tuple[int, ...]
    init: str  # "gaussian" | "ones" | "zeros"


@dataclass(frozen=True)
class ParameterSet:
    """Named map from parameter path to float64 array, plus the creation seed.

    Arrays are treated as immutable; concurrent forward passes over one set
    are safe.
    """

    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __getitem__(self, path: str) -> np.ndarray:
        return self.tensors[path]

    def paths(self) -> list[str]:
        return sorted(self.tensors)

    def sub(self, prefix: str) -> dict[str, np.ndarray]:
        """View of the parameters under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        out = {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}
        if not out:
            raise KeyError(f"no parameters under prefix {prefix!r}")
        return out


def _norm_specs(prefix: str, dim: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.gain", (dim,), "ones"),
        ParamSpec(f"{prefix}.bias", (dim,), "zeros"),
    ]


def _linear_specs(prefix: str, out_dim: int, in_dim: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.weight", (out_dim, in_dim), "gaussian"),
        ParamSpec(f"{prefix}.bias", (out_dim,), "gaussian"),
    ]


def attention_manifest(d_model: int, prefix: str = "attn") -> list[ParamSpec]:
    """Query/key/value/output projections for one attention block."""
    specs: list[ParamSpec] = []
    for name in ("q", "k", "v", "out"):
        specs += _linear_specs(f"{prefix}.{name}", d_model, d_model)
    return specs


def parameter_manifest(config: ConformerConfig) -> list[ParamSpec]:
    """Every parameter the encoder needs, sorted by path."""
    d = config.d_model
    specs: list[ParamSpec] = []
    for stage in (1, 2):
        specs += [
            ParamSpec(f"frontend.conv{stage}.weight", (d, d, config.frontend_kernel), "gaussian"),
            ParamSpec(f"frontend.conv{stage}.bias", (d,), "gaussian"),
        ]
    for i in range(config.num_layers):
        layer = f"layer{i}"
        for ffn_name in ("ffn1", "ffn2"):
            specs += _norm_specs(f"{layer}.{ffn_name}.norm", d)
            specs += _linear_specs(f"{layer}.{ffn_name}.lin1", config.ffn_dim, d)
            specs += _linear_specs(f"{layer}.{ffn_name}.lin2", d, config.ffn_dim)
        specs += _norm_specs(f"{layer}.attn.norm", d)
        specs += attention_manifest(d, prefix=f"{layer}.attn")
        specs += _norm_specs(f"{layer}.conv.norm", d)
        specs += [
            ParamSpec(f"{layer}.conv.pointwise1.weight", (2 * d, d, 1), "gaussian"),
            ParamSpec(f"{layer}.conv.pointwise1.bias", (2 * d,), "gaussian"),
            ParamSpec(f"{layer}.conv.depthwise.weight", (d, config.depthwise_kernel), "gaussian"),
            ParamSpec(f"{layer}.conv.depthwise.bias", (d,), "gaussian"),
            ParamSpec(f"{layer}.conv.bn.gamma", (d,), "ones"),
            ParamSpec(f"{layer}.conv.bn.beta", (d,), "zeros"),
            ParamSpec(f"{layer}.conv.bn.running_mean", (d,), "zeros"),
            ParamSpec(f"{layer}.conv.bn.running_var", (d,), "ones"),
            ParamSpec(f"{layer}.conv.pointwise2.weight", (d, d, 1), "gaussian"),
            ParamSpec(f"{layer}.conv.pointwise2.bias", (d,), "gaussian"),
        ]
        specs += _norm_specs(f"{layer}.norm_out", d)
    return sorted(specs, key=lambda s: s.path)


def init_from_specs(specs: list[ParamSpec], seed: int) -> ParameterSet:
    """Materialize a manifest.  Weights and biases draw Gaussian(0, 0.02) from
    a per-path sub-seed of ``seed``; norm gains/variances start at one, norm
    biases and running means at zero."""
    tensors: dict[str, np.ndarray] = {}
    for spec in specs:
        size = int(np.prod(spec.shape))
        if spec.init == "gaussian":
            rng = Rng(derive_seed(seed, spec.path))
            values = rng.gaussian(size, std=INIT_STD)
        elif spec.init == "ones":
            values = np.ones(size)
        elif spec.init == "zeros":
            values = np.zeros(size)
        else:
            raise ValueError(f"unknown init kind {spec.init!r}")
        tensors[spec.path] = as_tensor(values, shape=spec.shape)
    return ParameterSet(tensors, seed=seed)


def init_parameters(config: ConformerConfig, seed: int) -> ParameterSet:
    return init_from_specs(parameter_manifest(config), seed)


def zero_parameters(config: ConformerConfig) -> ParameterSet:
    """All weights and biases zero, norms at identity; every residual branch
    of the encoder then vanishes."""
    tensors = {}
    for spec in parameter_manifest(config):
        fill = 1.0 if spec.init == "ones" else 0.0
        tensors[spec.path] = np.full(spec.shape, fill)
    return ParameterSet(tensors, seed=0)


def write_parameters(params: ParameterSet, directory: str | Path) -> None:
    """Write ``manifest.txt`` (one ``path dim0xdim1x...`` line, sorted) plus
    one binary tensor file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for path in params.paths():
        arr = params[path]
        lines.append(f"{path} {'x'.join(str(d) for d in arr.shape)}")
        write_tensor(arr, directory / f"{path}.pgt")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_parameters(directory: str | Path, seed: int = 0) -> ParameterSet:
    """Load a directory written by :func:`write_parameters`.  The manifest
    does not carry the creation seed; pass it if you care."""
    directory = Path(directory)
    tensors: dict[str, np.ndarray] = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        path, shape_text = line.split()
        shape = tuple(int(d) for d in shape_text.split("x"))
        arr = read_tensor(directory / f"{path}.pgt")
        if arr.shape != shape:
            raise ValueError(f"{path}: manifest says {shape}, file has {arr.shape}")
        tensors[path] = arr
    return ParameterSet(tensors, seed=seed)


# ---------------------------------------------------------------------------
# Elementwise pieces.
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return x * _sigmoid(x)


def glu(x: np.ndarray) -> np.ndarray:
    """Gated linear unit over the last axis: split in half, ``a * sigmoid(b)``."""
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ValueError(f"GLU needs an even last dimension, got {dim}")
    a, b = x[..., : dim // 2], x[..., dim // 2 :]
    return a * _sigmoid(b)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Normalize each position over the feature axis (population variance,
    eps 1e-5), then scale and shift."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + NORM_EPS) * gain + bias


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def dropout(x: np.ndarray, p: float, rng: Rng | None = None, mode: str = "eval") -> np.ndarray:
    """Zero each value with probability ``p`` and scale survivors by 1/(1-p).

    Identity in eval mode or at p = 0.  Train mode consumes one uniform per
    value in row-major order from the caller's ``rng``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an Rng")
    keep = rng.uniform(x.size).reshape(x.shape) >= p
    return x * keep / (1.0 - p)


# ---------------------------------------------------------------------------
# Relative positional attention.
# ---------------------------------------------------------------------------


def sinusoidal_pe(distance: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of a (signed) relative distance:
    ``pe[2i] = sin(d / 10000**(2i/d_model))``, ``pe[2i+1] = cos(...)``."""
    if d_model % 2 != 0:
        raise ValueError("d_model must be even for sin/cos pairs")
    freq = np.power(10000.0, -2.0 * np.arange(d_model // 2) / d_model)
    angles = distance * freq
    out = np.empty(d_model)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


@lru_cache(maxsize=256)
def _pe_table(length: int, dim: int) -> np.ndarray:
    """Rows m = 0 .. 2L-2 hold ``sinusoidal_pe(m - (L-1), dim)``."""
    table = np.stack([sinusoidal_pe(m - (length - 1), dim) for m in range(2 * length - 1)])
    table.setflags(write=False)
    return table


def rel_gather(pre: np.ndarray, length: int, offset: int) -> np.ndarray:
    """Align a pre-shift matrix to query/key indices:
    ``out[i, j] = pre[i, j - i + offset]`` for i, j < length.

    ``offset = length - 1`` is the correct per-sample alignment; using the
    padded length's offset instead reproduces the displaced-columns failure.
    """
    idx = np.arange(length)
    cols = idx[None, :] - idx[:, None] + offset
    if cols.min() < 0 or cols.max() >= pre.shape[1]:
        raise ValueError("offset drives the gather out of the pre-shift matrix")
    return np.take_along_axis(np.asarray(pre, dtype=np.float64)[:length], cols, axis=1)


def _sample_rel_logits(q_heads: np.ndarray, length: int) -> np.ndarray:
    """[H, L, L] positional logits for one sample: ``q_i . pe(i - j)``.

    Entries are individual dot products so the brute-force definition is
    matched bit for bit.
    """
    heads, _, dim = q_heads.shape
    table = _pe_table(length, dim)
    out = np.zeros((heads, length, length))
    for h in range(heads):
        q = q_heads[h]
        for i in range(length):
            for j in range(length):
                out[h, i, j] = np.dot(q[i], table[i - j + length - 1])
    return out


def relative_position_logits(queries: np.ndarray, lengths) -> np.ndarray:
    """Positional attention logits, [B, H, T, T].

    ``out[b, h, i, j] = queries[b, h, i] . sinusoidal_pe(i - j)`` for
    ``i, j < lengths[b]`` and zero elsewhere.
    """
    queries = np.asarray(queries, dtype=np.float64)
    b_sz, heads, t_len, _ = queries.shape
    out = np.zeros((b_sz, heads, t_len, t_len))
    for b, ln in enumerate(lengths):
        out[b, :, :ln, :ln] = _sample_rel_logits(queries[b, :, :ln], ln)
    return out


RelLogitsFn = Callable[[np.ndarray, int, int], np.ndarray]


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    length, d_model = x.shape
    return x.reshape(length, num_heads, d_model // num_heads).transpose(1, 0, 2)


def _attend(batch: SequenceBatch, p: Mapping[str, np.ndarray], num_heads: int,
            rel_logits_fn: RelLogitsFn | None) -> SequenceBatch:
    """Shared multi-head attention scaffold; the positional term is pluggable
    so broken gathers can be swapped in while everything else stays equal."""
    t_pad = batch.padded_len
    head_dim = batch.feature_dim // num_heads
    scale = 1.0 / np.sqrt(head_dim)
    out = np.zeros_like(batch.data)
    for b, ln in enumerate(batch.lengths):
        x = batch.data[b, :ln]
        q = _split_heads(x @ p["q.weight"].T + p["q.bias"], num_heads)
        k = _split_heads(x @ p["k.weight"].T + p["k.bias"], num_heads)
        v = _split_heads(x @ p["v.weight"].T + p["v.bias"], num_heads)
        logits = q @ k.transpose(0, 2, 1) * scale
        if rel_logits_fn is None:
            logits = logits + _sample_rel_logits(q, ln)
        else:
            logits = logits + rel_logits_fn(q, ln, t_pad)
        attn = _softmax(logits)
        ctx = (attn @ v).transpose(1, 0, 2).reshape(ln, -1)
        out[b, :ln] = ctx @ p["out.weight"].T + p["out.bias"]
    return SequenceBatch(out, batch.lengths)


def rel_mhsa(batch: SequenceBatch, p: Mapping[str, np.ndarray], num_heads: int,
             rel_logits_fn: RelLogitsFn | None = None) -> SequenceBatch:
    """Multi-head self-attention with relative positional logits.

    Logits are the content term ``Q K^T / sqrt(d_head)`` plus the positional
    term; the softmax runs over each sample's valid keys only.  Returns the
    projected branch (masked), to be added by the caller.
    """
    if batch.feature_dim % num_heads != 0:
        raise ValueError("feature dim must divide evenly into heads")
    return _attend(batch, p, num_heads, rel_logits_fn)


def causal_attention_layer(batch: SequenceBatch, p: Mapping[str, np.ndarray]) -> SequenceBatch:
    """Single-head self-attention where position i sees keys j <= i only."""
    out = np.zeros_like(batch.data)
    scale = 1.0 / np.sqrt(batch.feature_dim)
    for b, ln in enumerate(batch.lengths):
        x = batch.data[b, :ln]
        q = x @ p["q.weight"].T + p["q.bias"]
        k = x @ p["k.weight"].T + p["k.bias"]
        v = x @ p["v.weight"].T + p["v.bias"]
        logits = q @ k.T * scale
        future = np.triu(np.ones((ln, ln), dtype=bool), k=1)
        logits[future] = -np.inf
        ctx = _softmax(logits) @ v
        out[b, :ln] = ctx @ p["out.weight"].T + p["out.bias"]
    return SequenceBatch(out, batch.lengths)


# ---------------------------------------------------------------------------
# Batch norm, convolution module, feed-forward, frontend.
# ---------------------------------------------------------------------------


def _gather_valid(data: np.ndarray, lengths) -> np.ndarray:
    return np.concatenate([data[b, :ln] for b, ln in enumerate(lengths)], axis=0)


def batch_norm(batch: SequenceBatch, p: Mapping[str, np.ndarray],
               mode: str = "eval") -> SequenceBatch:
    """Per-channel normalization.

    Eval mode uses the stored running statistics and touches each position
    independently.  Masked-train mode estimates mean and (population)
    variance from the valid frames of the whole batch only, so samples couple
    through the statistics.  Padded positions are re-zeroed either way.
    """
    if mode not in ("eval", "masked-train"):
        raise ValueError(f"unknown batch norm mode {mode!r}")
    if mode == "eval":
        mean, var = p["running_mean"], p["running_var"]
    else:
        if sum(batch.lengths) == 0:
            raise ValueError("masked-train batch norm needs at least one valid frame")
        frames = _gather_valid(batch.data, batch.lengths)
        mean = frames.mean(axis=0)
        var = np.mean((frames - mean) ** 2, axis=0)
    normed = (batch.data - mean) / np.sqrt(var + NORM_EPS) * p["gamma"] + p["beta"]
    normed *= batch.mask()[:, :, None]
    return SequenceBatch(normed, batch.lengths)


def _conv_branch_pre_bn(rows: np.ndarray, p: Mapping[str, np.ndarray]) -> np.ndarray:
    """Convolution-module stages before batch norm, on one sample's rows."""
    y = layer_norm(rows, p["norm.gain"], p["norm.bias"])
    y = conv1d(y, p["pointwise1.weight"], p["pointwise1.bias"])
    y = glu(y)
    return depthwise_conv1d(y, p["depthwise.weight"], p["depthwise.bias"])


def _conv_branch_post_bn(rows: np.ndarray, p: Mapping[str, np.ndarray]) -> np.ndarray:
    """Convolution-module stages after batch norm, on one sample's rows."""
    return conv1d(swish(rows), p["pointwise2.weight"], p["pointwise2.bias"])


def conv_module(batch: SequenceBatch, p: Mapping[str, np.ndarray], mode: str = "eval",
                dropout_p: float = 0.0, rng: Rng | None = None) -> SequenceBatch:
    """Residual convolution module: layer norm, pointwise conv doubling the
    features, GLU, depthwise conv, batch norm, Swish, pointwise conv, dropout.

    The depthwise kernel is the only stage that spans time, and it only ever
    sees the sample's valid rows; padded positions of the output are zero.
    """
    bn_mode = "eval" if mode == "eval" else "masked-train"
    mid = np.zeros_like(batch.data)
    for b, ln in enumerate(batch.lengths):
        mid[b, :ln] = _conv_branch_pre_bn(batch.data[b, :ln], p)
    bn_params = {k[3:]: v for k, v in p.items() if k.startswith("bn.")}
    normed = batch_norm(SequenceBatch(mid, batch.lengths), bn_params, mode=bn_mode)
    out = np.zeros_like(batch.data)
    for b, ln in enumerate(batch.lengths):
        branch = _conv_branch_post_bn(normed.data[b, :ln], p)
        branch = dropout(branch, dropout_p, rng=rng, mode=mode)
        out[b, :ln] = batch.data[b, :ln] + branch
    return SequenceBatch(out, batch.lengths)


def ffn(batch: SequenceBatch, p: Mapping[str, np.ndarray], mode: str = "eval",
        dropout_p: float = 0.0, rng: Rng | None = None) -> SequenceBatch:
    """Position-wise feed-forward branch: linear, Swish, dropout, linear.
    The caller adds it with its residual weight."""
    out = np.zeros_like(batch.data)
    for b, ln in enumerate(batch.lengths):
        x = batch.data[b, :ln]
        y = swish(x @ p["lin1.weight"].T + p["lin1.bias"])
        y = dropout(y, dropout_p, rng=rng, mode=mode)
        out[b, :ln] = y @ p["lin2.weight"].T + p["lin2.bias"]
    return SequenceBatch(out, batch.lengths)


def subsample_length(length: int, kernel: int = 3, stride: int = 2, pad: int = 1) -> int:
    out = (length + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(f"length {length} subsamples to nothing")
    return out


def subsampling_frontend(batch: SequenceBatch, p: Mapping[str, np.ndarray],
                         kernel: int = 3, stride: int = 2, pad: int = 1) -> SequenceBatch:
    """Two strided conv+ReLU stages shrinking each sample's length, with the
    per-sample lengths recomputed (and the output re-masked) after each."""
    new_lengths = tuple(
        subsample_length(subsample_length(ln, kernel, stride, pad), kernel, stride, pad)
        for ln in batch.lengths
    )
    out = np.zeros((batch.batch_size, max(new_lengths), batch.feature_dim))
    for b, ln in enumerate(batch.lengths):
        y = _relu(conv1d(batch.data[b, :ln], p["conv1.weight"], p["conv1.bias"],
                         stride=stride, pad=pad))
        y = _relu(conv1d(y, p["conv2.weight"], p["conv2.bias"], stride=stride, pad=pad))
        out[b, : y.shape[0]] = y
    return SequenceBatch(out, new_lengths)


def _ln_batch(batch: SequenceBatch, gain: np.ndarray, bias: np.ndarray) -> SequenceBatch:
    out = np.zeros_like(batch.data)
    for b, ln in enumerate(batch.lengths):
        out[b, :ln] = layer_norm(batch.data[b, :ln], gain, bias)
    return SequenceBatch(out, batch.lengths)


def _add(batch: SequenceBatch, branch: SequenceBatch, weight: float = 1.0) -> SequenceBatch:
    return SequenceBatch(batch.data + weight * branch.data, batch.lengths)


def encoder_layer(batch: SequenceBatch, p: ParameterSet | Mapping[str, np.ndarray],
                  config: ConformerConfig, mode: str = "eval", rng: Rng | None = None,
                  conv_fn=None, rel_logits_fn: RelLogitsFn | None = None,
                  blind_final_norm: bool = False) -> SequenceBatch:
    """One encoder layer: half-weighted FFN, self-attention, convolution
    module, half-weighted FFN, closing layer norm; every sublayer is
    pre-normalized.

    ``conv_fn``/``rel_logits_fn``/``blind_final_norm`` exist so the broken
    variants can swap in their components while sharing the wiring.
    """
    if isinstance(p, ParameterSet):
        get = p.sub
    else:
        def get(prefix: str, _p=p):
            cut = len(prefix) + 1
            return {k[cut:]: v for k, v in _p.items() if k.startswith(prefix + ".")}
    conv_fn = conv_fn or conv_module
    drop = config.dropout_p if mode == "train" else 0.0

    ffn1 = get("ffn1")
    x = _add(batch, ffn(_ln_batch(batch, ffn1["norm.gain"], ffn1["norm.bias"]), ffn1,
                        mode=mode, dropout_p=drop, rng=rng), weight=0.5)
    attn = get("attn")
    x = _add(x, rel_mhsa(_ln_batch(x, attn["norm.gain"], attn["norm.bias"]), attn,
                         config.num_heads, rel_logits_fn=rel_logits_fn))
    x = conv_fn(x, get("conv"), mode=mode, dropout_p=drop, rng=rng)
    ffn2 = get("ffn2")
    x = _add(x, ffn(_ln_batch(x, ffn2["norm.gain"], ffn2["norm.bias"]), ffn2,
                    mode=mode, dropout_p=drop, rng=rng), weight=0.5)
    norm_out = get("norm_out")
    if blind_final_norm:
        # Length-blind closing norm: padded rows are normalized too instead of
        # being rebuilt from the valid slice, so stream garbage survives.
        data = layer_norm(x.data, norm_out["gain"], norm_out["bias"])
        return SequenceBatch(data, x.lengths)
    return _ln_batch(x, norm_out["gain"], norm_out["bias"])


def encoder(batch: SequenceBatch, params: ParameterSet, config: ConformerConfig,
            mode: str = "eval", rng: Rng | None = None,
            frontend_fn=None, conv_fn=None, rel_logits_fn: RelLogitsFn | None = None,
            blind_final_norm: bool = False) -> SequenceBatch:
    """Subsampling frontend followed by ``config.num_layers`` encoder layers.
    The returned batch carries the subsampled lengths."""
    frontend_fn = frontend_fn or subsampling_frontend
    x = frontend_fn(batch, params.sub("frontend"), kernel=config.frontend_kernel,
                    stride=config.frontend_stride, pad=config.frontend_pad)
    for i in range(config.num_layers):
        x = encoder_layer(x, params.sub(f"layer{i}"), config, mode=mode, rng=rng,
                          conv_fn=conv_fn, rel_logits_fn=rel_logits_fn,
                          blind_final_norm=blind_final_norm)
    return x


def encoder_length_transfer(config: ConformerConfig) -> Callable[[int], int]:
    """Per-sample output length for a given input length."""
    def transfer(length: int) -> int:
        once = subsample_length(length, config.frontend_kernel,
                                config.frontend_stride, config.frontend_pad)
        return subsample_length(once, config.frontend_kernel,
                                config.frontend_stride, config.frontend_pad)
    return transfer
