"""CTC projection head and label-run compression.

The projection turns encoder frames into per-frame distributions over a label
vocabulary plus a trailing blank symbol.  Compression assigns each frame its
most likely label and collapses maximal runs of equal labels into the mean of
their frames, shortening the sequence; blank runs are kept like any other
label's.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .conformer import ParamSpec, ParameterSet, init_from_specs, _softmax
from .numerics import SequenceBatch, make_batch

__all__ = [
    "CtcDistribution",
    "ctc_manifest",
    "init_ctc_parameters",
    "ctc_project",
    "ctc_compress",
    "run_length_oracle",
]

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class CtcDistribution:
    """[B, T, V+1] per-frame probabilities (blank is the last index) plus the
    per-sample valid frame counts.  Valid rows sum to one; padded rows are
    all zero."""

    probs: np.ndarray
    lengths: tuple[int, ...] = field(default=())

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        lengths = tuple(int(x) for x in self.lengths)
        if probs.ndim != 3 or len(lengths) != probs.shape[0]:
            raise ValueError("probs must be [B, T, V+1] with one length per sample")
        if np.any(probs < 0.0):
            raise ValueError("probabilities must be non-negative")
        for b, ln in enumerate(lengths):
            sums = probs[b, :ln].sum(axis=1)
            if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
                raise ValueError(f"sample {b} has rows that do not sum to 1")
            if np.any(probs[b, ln:] != 0.0):
                raise ValueError(f"sample {b} has non-zero padded rows")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "lengths", lengths)

    @property
    def num_labels(self) -> int:
        """Vocabulary size without the blank."""
        return self.probs.shape[2] - 1


def ctc_manifest(d_model: int, vocab_size: int) -> list[ParamSpec]:
    return [
        ParamSpec("ctc.weight", (vocab_size + 1, d_model), "gaussian"),
        ParamSpec("ctc.bias", (vocab_size + 1,), "gaussian"),
    ]


def init_ctc_parameters(d_model: int, vocab_size: int, seed: int) -> ParameterSet:
    return init_from_specs(ctc_manifest(d_model, vocab_size), seed)


def ctc_project(batch: SequenceBatch, p: Mapping[str, np.ndarray]) -> CtcDistribution:
    """Position-wise linear projection plus row softmax over each sample's
    valid frames; padded rows stay zero."""
    probs = np.zeros((batch.batch_size, batch.padded_len, p["weight"].shape[0]))
    for b, ln in enumerate(batch.lengths):
        logits = batch.data[b, :ln] @ p["weight"].T + p["bias"]
        probs[b, :ln] = _softmax(logits)
    return CtcDistribution(probs, batch.lengths)


def ctc_compress(batch: SequenceBatch, dist: CtcDistribution) -> SequenceBatch:
    """Collapse each maximal run of equal argmax labels into the arithmetic
    mean of its frames.  Ties pick the lowest label index; the new per-sample
    length is the number of runs."""
    if batch.lengths != dist.lengths:
        raise ValueError("batch and distribution disagree on lengths")
    pooled: list[np.ndarray] = []
    for b, ln in enumerate(batch.lengths):
        frames = batch.data[b, :ln]
        labels = np.argmax(dist.probs[b, :ln], axis=1)
        breaks = np.flatnonzero(np.diff(labels)) + 1
        starts = np.concatenate(([0], breaks))
        ends = np.concatenate((breaks, [ln]))
        pooled.append(np.stack([frames[s:e].mean(axis=0) for s, e in zip(starts, ends)]))
    return make_batch(pooled)


def run_length_oracle(labels: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal-run decomposition by linear scan: [1, 1, 2] -> [(1, 2), (2, 1)]."""
    labels = list(labels)
    if not labels:
        raise ValueError("cannot decompose an empty label sequence")
    runs: list[tuple[int, int]] = []
    current, count = labels[0], 1
    for lab in labels[1:]:
        if lab == current:
            count += 1
        else:
            runs.append((int(current), count))
            current, count = lab, 1
    runs.append((int(current), count))
    return runs
