"""Property-test harness for padded sequence modules.

A module under test is a deterministic eval-mode forward pass over a
:class:`~pangolinn.numerics.SequenceBatch` plus, when it has one, a declared
per-sample length transfer.  Four checks are provided:

- padding invariance: the valid region of a padded batch must equal each
  sequence run alone;
- batch-size sweep: one pool of sequences, regrouped into batches of several
  sizes, must give every sequence the same output as its solo run (the
  "same inputs, different batch size" experiment);
- causality: outputs up to a cut must not move when everything after the cut
  is replaced with fresh noise;
- mask preservation: output positions past each sample's declared length must
  be exactly zero.

Reports are plain data, deterministic for a given (module, config), and
serialize to a stable JSON schema (``report_version`` 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Rng, SequenceBatch, derive_seed, make_batch, unbatch

__all__ = [
    "ModuleUnderTest",
    "CheckConfig",
    "CaseResult",
    "CheckReport",
    "padding_invariance_check",
    "batch_size_sweep",
    "causality_check",
    "mask_preservation_check",
]

REPORT_VERSION = 1
LENGTH_VIOLATION = "length-transfer-violation"


@dataclass(frozen=True)
class ModuleUnderTest:
    """What the harness needs to know about a module.

    ``forward`` must be deterministic and eval-mode.  ``length_transfer``
    maps an input length to the output length; pass None for modules whose
    output lengths are data-dependent, in which case the solo reference runs
    define the expected lengths.
    """

    name: str
    forward: Callable[[SequenceBatch], SequenceBatch]
    length_transfer: Callable[[int], int] | None = None


@dataclass(frozen=True)
class CheckConfig:
    seed: int = 0
    num_cases: int = 20
    batch_sizes: tuple[int, ...] = (1, 4, 16)
    length_min: int = 8
    length_max: int = 64
    feature_dim: int = 16
    tolerance: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        if self.length_min < 1 or self.length_max < self.length_min:
            raise ValueError("need 1 <= length_min <= length_max")
        if self.tolerance < 0.0:
            raise ValueError("tolerance must be non-negative")
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise ValueError("batch_sizes must be non-empty positive ints")
        if self.num_cases < 1 or self.feature_dim < 1:
            raise ValueError("num_cases and feature_dim must be positive")


@dataclass(frozen=True)
class CaseResult:
    case_seed: int
    lengths: tuple[int, ...]
    batch_size: int
    max_abs_divergence: float
    worst_position: tuple[int, int, int]  # (sample, frame, feature)
    passed: bool
    failure_kind: str | None = None


@dataclass(frozen=True)
class CheckReport:
    check_name: str
    module_name: str
    config: CheckConfig
    cases: tuple[CaseResult, ...] = field(default=())
    overall_pass: bool = True

    def to_json(self) -> str:
        """Stable JSON: fixed key order, floats at 17 significant digits."""
        cases = []
        for c in self.cases:
            entry: dict = {
                "case_seed": c.case_seed,
                "lengths": list(c.lengths),
                "batch_size": c.batch_size,
                "max_abs_divergence": c.max_abs_divergence,
                "worst_position": list(c.worst_position),
                "pass": c.passed,
            }
            if c.failure_kind is not None:
                entry["failure_kind"] = c.failure_kind
            cases.append(entry)
        doc = {
            "report_version": REPORT_VERSION,
            "check_name": self.check_name,
            "module_name": self.module_name,
            "seed": self.config.seed,
            "tolerance": self.config.tolerance,
            "batch_sizes": list(self.config.batch_sizes),
            "cases": cases,
            "overall_pass": self.overall_pass,
        }
        return _encode(doc)


def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_encode(v)}" for k, v in value.items()) + "}"
    raise TypeError(f"cannot encode {type(value)!r}")


# ---------------------------------------------------------------------------
# Sampling.
# ---------------------------------------------------------------------------


def _sample_lengths(rng: Rng, n: int, cfg: CheckConfig) -> list[int]:
    """Random lengths in [length_min, length_max]; batches bigger than one are
    guaranteed at least two distinct lengths, otherwise padding-triggered bugs
    would be unobservable by construction."""
    if n > 1 and cfg.length_min == cfg.length_max:
        raise ValueError("cannot draw heterogeneous lengths from a single-value range")
    lengths = [rng.randint(cfg.length_min, cfg.length_max) for _ in range(n)]
    while n > 1 and len(set(lengths)) < 2:
        lengths = [rng.randint(cfg.length_min, cfg.length_max) for _ in range(n)]
    return lengths


def _sample_sequences(rng: Rng, lengths: list[int], dim: int) -> list[np.ndarray]:
    return [rng.gaussian(ln * dim).reshape(ln, dim) for ln in lengths]


def _case_seeds(cfg: CheckConfig, n: int, label: str) -> list[int]:
    rng = Rng(derive_seed(cfg.seed, label))
    return [rng.next_u64() for _ in range(n)]


def _divergence(candidate: np.ndarray, reference: np.ndarray):
    """Max absolute difference and its (frame, feature) location."""
    diff = np.abs(candidate - reference)
    if diff.size == 0:
        return 0.0, (0, 0)
    flat = int(np.argmax(diff))
    t, d = np.unravel_index(flat, diff.shape)
    return float(diff[t, d]), (int(t), int(d))


# ---------------------------------------------------------------------------
# Checks.
# ---------------------------------------------------------------------------


def padding_invariance_check(module: ModuleUnderTest, cfg: CheckConfig) -> CheckReport:
    """Batched forward vs each sequence alone, compared over valid positions.

    Batch sizes cycle through ``cfg.batch_sizes`` across cases.  A module
    whose output lengths contradict its declared transfer fails the case with
    a distinct failure kind instead of a divergence.
    """
    cases = []
    for idx, case_seed in enumerate(_case_seeds(cfg, cfg.num_cases, "padding-invariance")):
        batch_size = cfg.batch_sizes[idx % len(cfg.batch_sizes)]
        rng = Rng(case_seed)
        lengths = _sample_lengths(rng, batch_size, cfg)
        batch = make_batch(_sample_sequences(rng, lengths, cfg.feature_dim))
        refs = [module.forward(make_batch([s])) for s in unbatch(batch)]
        candidate = module.forward(batch)
        cases.append(_compare_case(module, cfg, case_seed, batch, refs, candidate))
    return _finish("padding_invariance", module, cfg, cases)


def _compare_case(module, cfg, case_seed, batch, refs, candidate) -> CaseResult:
    if module.length_transfer is not None:
        expected = [module.length_transfer(ln) for ln in batch.lengths]
    else:
        expected = [ref.lengths[0] for ref in refs]
    ref_lengths = [ref.lengths[0] for ref in refs]
    if list(candidate.lengths) != expected or ref_lengths != expected:
        return CaseResult(case_seed, batch.lengths, batch.batch_size, 0.0, (0, 0, 0),
                          passed=False, failure_kind=LENGTH_VIOLATION)
    worst, worst_pos = 0.0, (0, 0, 0)
    for b, exp_len in enumerate(expected):
        div, (t, d) = _divergence(candidate.data[b, :exp_len], refs[b].data[0, :exp_len])
        if div > worst:
            worst, worst_pos = div, (b, t, d)
    return CaseResult(case_seed, batch.lengths, batch.batch_size, worst, worst_pos,
                      passed=worst <= cfg.tolerance)


def batch_size_sweep(module: ModuleUnderTest, cfg: CheckConfig) -> CheckReport:
    """Fix a pool of ``cfg.num_cases`` sequences, regroup it into batches of
    each configured size, and compare every sequence's output against its
    solo run.  One case per batch size."""
    if cfg.num_cases < max(cfg.batch_sizes):
        raise ValueError("sequence pool is smaller than the largest batch size")
    pool_seed = derive_seed(cfg.seed, "sweep-pool")
    rng = Rng(pool_seed)
    lengths = _sample_lengths(rng, cfg.num_cases, cfg)
    pool = _sample_sequences(rng, lengths, cfg.feature_dim)
    refs = [module.forward(make_batch([s])) for s in pool]
    if module.length_transfer is not None:
        expected = [module.length_transfer(ln) for ln in lengths]
    else:
        expected = [ref.lengths[0] for ref in refs]

    cases = []
    for batch_size in cfg.batch_sizes:
        worst, worst_pos, violated = 0.0, (0, 0, 0), False
        for start in range(0, len(pool), batch_size):
            group = pool[start : start + batch_size]
            out = module.forward(make_batch(group))
            for offset in range(len(group)):
                pool_idx = start + offset
                if out.lengths[offset] != expected[pool_idx]:
                    violated = True
                    continue
                div, (t, d) = _divergence(out.data[offset, : expected[pool_idx]],
                                          refs[pool_idx].data[0, : expected[pool_idx]])
                if div > worst:
                    worst, worst_pos = div, (pool_idx, t, d)
        if violated:
            cases.append(CaseResult(pool_seed, tuple(lengths), batch_size, 0.0, (0, 0, 0),
                                    passed=False, failure_kind=LENGTH_VIOLATION))
        else:
            cases.append(CaseResult(pool_seed, tuple(lengths), batch_size, worst, worst_pos,
                                    passed=worst <= cfg.tolerance))
    return _finish("batch_size_sweep", module, cfg, cases)


def causality_check(module: ModuleUnderTest, cfg: CheckConfig) -> CheckReport:
    """Replace everything after a cut with fresh Gaussian noise and require
    the outputs up to the cut to stay put.

    Noise, not zeros: zeroing can coincide with padding semantics and hide
    the leak.  Only applies to modules with an identity length transfer.
    """
    if module.length_transfer is None or any(
        module.length_transfer(ln) != ln for ln in range(cfg.length_min, cfg.length_max + 1)
    ):
        raise ValueError(
            "causality check applies only to modules whose output keeps the input length"
        )
    cases = []
    for case_seed in _case_seeds(cfg, cfg.num_cases, "causality"):
        rng = Rng(case_seed)
        length = rng.randint(cfg.length_min, cfg.length_max)
        x = rng.gaussian(length * cfg.feature_dim).reshape(length, cfg.feature_dim)
        base = module.forward(make_batch([x]))
        # up to four distinct cuts; a single-frame sequence has nothing to cut
        cuts = sorted({rng.randint(1, length - 1) for _ in range(min(4, length - 1))}) \
            if length > 1 else []
        worst, worst_pos = 0.0, (0, 0, 0)
        for cut in cuts:
            perturbed = x.copy()
            tail = length - cut - 1
            if tail > 0:
                perturbed[cut + 1 :] = rng.gaussian(tail * cfg.feature_dim).reshape(
                    tail, cfg.feature_dim
                )
            out = module.forward(make_batch([perturbed]))
            div, (t, d) = _divergence(out.data[0, : cut + 1], base.data[0, : cut + 1])
            if div > worst:
                worst, worst_pos = div, (0, t, d)
        cases.append(CaseResult(case_seed, (length,), 1, worst, worst_pos,
                                passed=worst <= cfg.tolerance))
    return _finish("causality", module, cfg, cases)


def mask_preservation_check(module: ModuleUnderTest, cfg: CheckConfig) -> CheckReport:
    """Forward padded batches and require every output position past each
    sample's reported length to be exactly 0.0."""
    cases = []
    for idx, case_seed in enumerate(_case_seeds(cfg, cfg.num_cases, "mask-preservation")):
        batch_size = cfg.batch_sizes[idx % len(cfg.batch_sizes)]
        rng = Rng(case_seed)
        lengths = _sample_lengths(rng, batch_size, cfg)
        batch = make_batch(_sample_sequences(rng, lengths, cfg.feature_dim))
        out = module.forward(batch)
        worst, worst_pos = 0.0, (0, 0, 0)
        for b, ln in enumerate(out.lengths):
            padded = np.abs(out.data[b, ln:])
            if padded.size and padded.max() > worst:
                flat = int(np.argmax(padded))
                t, d = np.unravel_index(flat, padded.shape)
                worst, worst_pos = float(padded.max()), (b, int(t) + ln, int(d))
        cases.append(CaseResult(case_seed, batch.lengths, batch_size, worst, worst_pos,
                                passed=worst == 0.0))
    return _finish("mask_preservation", module, cfg, cases)


def _finish(check_name: str, module: ModuleUnderTest, cfg: CheckConfig, cases) -> CheckReport:
    cases = tuple(cases)
    return CheckReport(check_name, module.name, cfg, cases,
                       overall_pass=all(c.passed for c in cases))
