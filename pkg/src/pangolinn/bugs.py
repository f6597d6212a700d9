"""Deliberately broken encoder variants.

Three padding-handling failures observed in production sequence encoders are
reproduced as drop-in component swaps:

- ``b1``: the convolution module ignores padding.  Pointwise biases put
  non-zero values on padded rows, the depthwise kernel drags them across the
  boundary into valid frames, train-mode batch statistics include padded
  frames, and the module output is never re-masked.
- ``b2``: the subsampling frontend runs both strided convolutions over the
  full padded rows, so the second convolution reads the first one's boundary
  spill and the last valid output frames come out wrong.  Lengths are still
  reported by the correct formula.
- ``b3``: the relative-position gather is aligned with the padded length
  instead of the sample's own length, displacing every row's positional
  columns whenever the sample is shorter than the batch.

All variants share the correct encoder's parameters and wiring, so any output
difference is attributable to padding handling alone.  On batches with
uniform lengths (no padding) every variant is bit-identical to the correct
encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import conformer
from .conformer import (
    NORM_EPS,
    ConformerConfig,
    ParameterSet,
    _conv_branch_post_bn,
    _conv_branch_pre_bn,
    _gather_valid,
    _pe_table,
    rel_gather,
)
from .numerics import Rng, SequenceBatch

__all__ = [
    "BugSet",
    "VARIANTS",
    "build_encoder_with_bugs",
    "bug_b1_conv_module",
    "bug_b2_frontend",
    "bug_b3_relative_logits",
]


@dataclass(frozen=True)
class BugSet:
    """Which of the three padding bugs a build carries. Empty set = correct."""

    b1: bool = False
    b2: bool = False
    b3: bool = False

    def __bool__(self) -> bool:
        return self.b1 or self.b2 or self.b3

    @property
    def name(self) -> str:
        if not self:
            return "correct"
        if self.b1 and self.b2 and self.b3:
            return "all"
        return "+".join(n for n, on in (("b1", self.b1), ("b2", self.b2), ("b3", self.b3)) if on)


VARIANTS: dict[str, BugSet] = {
    "correct": BugSet(),
    "b1": BugSet(b1=True),
    "b2": BugSet(b2=True),
    "b3": BugSet(b3=True),
    "all": BugSet(b1=True, b2=True, b3=True),
}


def bug_b1_conv_module(batch: SequenceBatch, p: Mapping[str, np.ndarray],
                       mode: str = "eval", dropout_p: float = 0.0,
                       rng: Rng | None = None) -> SequenceBatch:
    """Convolution module with every padding guard removed.

    The whole pipeline runs over all padded rows, train-mode batch statistics
    count every position, and the output keeps whatever landed on the padded
    rows.
    """
    n_batch, t_pad, _ = batch.data.shape
    mid = np.empty_like(batch.data)
    for b in range(n_batch):
        mid[b] = _conv_branch_pre_bn(batch.data[b], p)
    if mode == "eval":
        mean, var = p["bn.running_mean"], p["bn.running_var"]
    else:
        frames = _gather_valid(mid, (t_pad,) * n_batch)
        mean = frames.mean(axis=0)
        var = np.mean((frames - mean) ** 2, axis=0)
    normed = (mid - mean) / np.sqrt(var + NORM_EPS) * p["bn.gamma"] + p["bn.beta"]
    out = np.empty_like(batch.data)
    for b in range(n_batch):
        branch = _conv_branch_post_bn(normed[b], p)
        branch = conformer.dropout(branch, dropout_p, rng=rng, mode=mode)
        out[b] = batch.data[b] + branch
    return SequenceBatch(out, batch.lengths)


def bug_b2_frontend(batch: SequenceBatch, p: Mapping[str, np.ndarray],
                    kernel: int = 3, stride: int = 2, pad: int = 1) -> SequenceBatch:
    """Strided frontend with no re-masking between or after the convolutions.

    Both convolutions see the full padded rows, so the second one reads the
    first one's boundary spill; the reported lengths still follow the correct
    formula.
    """
    new_lengths = tuple(
        conformer.subsample_length(
            conformer.subsample_length(ln, kernel, stride, pad), kernel, stride, pad)
        for ln in batch.lengths
    )
    rows = []
    for b in range(batch.batch_size):
        y = np.maximum(conformer.conv1d(batch.data[b], p["conv1.weight"], p["conv1.bias"],
                                        stride=stride, pad=pad), 0.0)
        y = np.maximum(conformer.conv1d(y, p["conv2.weight"], p["conv2.bias"],
                                        stride=stride, pad=pad), 0.0)
        rows.append(y)
    return SequenceBatch(np.stack(rows), new_lengths)


def _band_pre_matrix(q_head: np.ndarray, length: int, padded_len: int) -> np.ndarray:
    """Pre-shift matrix for one head: the sample's positional band
    ``pre[i, k] = q_i . pe((L-1) - k)`` occupies columns 0 .. 2L-2 of a
    [L, 2T-1] matrix; everything outside the band is zero."""
    dim = q_head.shape[1]
    table = _pe_table(length, dim)
    pre = np.zeros((length, 2 * padded_len - 1))
    for i in range(length):
        for k in range(2 * length - 1):
            pre[i, k] = np.dot(q_head[i], table[2 * length - 2 - k])
    return pre


def _global_offset_rel_logits(q_heads: np.ndarray, length: int, padded_len: int) -> np.ndarray:
    """The buggy positional term: gather the per-sample band with the padded
    length's offset, ``out[i, j] = pre[i, j - i + T - 1]``.  Whenever the
    sample is shorter than the batch this reads displaced (mostly zero)
    columns; with no padding it coincides with the correct gather."""
    heads = q_heads.shape[0]
    out = np.empty((heads, length, length))
    for h in range(heads):
        pre = _band_pre_matrix(q_heads[h], length, padded_len)
        out[h] = rel_gather(pre, length, padded_len - 1)
    return out


def bug_b3_relative_logits(queries: np.ndarray, lengths) -> np.ndarray:
    """[B, H, T, T] positional logits with the padded-length gather applied
    to every sample; zero outside each sample's valid block."""
    queries = np.asarray(queries, dtype=np.float64)
    b_sz, heads, t_pad, _ = queries.shape
    out = np.zeros((b_sz, heads, t_pad, t_pad))
    for b, ln in enumerate(lengths):
        out[b, :, :ln, :ln] = _global_offset_rel_logits(queries[b, :, :ln], ln, t_pad)
    return out


def build_encoder_with_bugs(config: ConformerConfig, params: ParameterSet, bugs: BugSet):
    """Encoder forward pass with the selected components replaced by their
    padding-blind counterparts.  With an empty BugSet this is exactly the
    correct encoder."""
    frontend_fn = bug_b2_frontend if bugs.b2 else None
    conv_fn = bug_b1_conv_module if bugs.b1 else None
    rel_fn = _global_offset_rel_logits if bugs.b3 else None
    # Only the padding-blind conv module leaves garbage on padded rows; keep
    # the closing norms length-blind so the wiring does not quietly erase it.
    blind = bugs.b1

    def forward(batch: SequenceBatch, mode: str = "eval", rng: Rng | None = None) -> SequenceBatch:
        return conformer.encoder(batch, params, config, mode=mode, rng=rng,
                                 frontend_fn=frontend_fn, conv_fn=conv_fn,
                                 rel_logits_fn=rel_fn, blind_final_norm=blind)

    return forward
