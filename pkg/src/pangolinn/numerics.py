"""Dense numeric core: padded sequence batches, seeded randomness, raw 1D convolution.

Everything is double precision and deterministic. Batches of variable-length
sequences are padded to a rectangle; the per-sample ``lengths`` vector is the
single source of truth for which positions are valid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Rng",
    "rng_gaussian",
    "derive_seed",
    "as_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "write_tensor",
    "read_tensor",
    "SequenceBatch",
    "padding_mask",
    "make_batch",
    "unbatch",
    "apply_mask",
    "conv1d",
    "depthwise_conv1d",
]

_MASK64 = (1 << 64) - 1
# SplitMix64 constants.
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
# FNV-1a 64-bit constants, used to fold text labels into seeds.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 generator with a Box-Muller Gaussian transform.

    The state advances by ``0x9E3779B97F4A7C15`` per draw and each output is
    the standard SplitMix64 finalizer (xor-shift 30, multiply ``_MIX1``,
    xor-shift 27, multiply ``_MIX2``, xor-shift 31).  The uint64 stream for a
    given seed is identical on every platform and run.  Floating-point draws
    are documented transforms of that stream: uniforms take the top 53 bits
    (``u = (bits >> 11) * 2**-53``), Gaussians map uniform pairs ``(a, b)``
    through ``sqrt(-2*ln(1-a)) * (cos, sin)(2*pi*b)``, so their exact bits
    additionally depend on the platform libm.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def _block_u64(self, n: int) -> np.ndarray:
        """``n`` outputs as a uint64 array; same stream as ``next_u64``."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + np.uint64(_GAMMA) * idx
        self._state = (self._state + _GAMMA * n) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1), one uint64 draw each."""
        bits = self._block_u64(n) >> np.uint64(11)
        return bits.astype(np.float64) * 2.0**-53

    def gaussian(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """``n`` Gaussian doubles via Box-Muller on consecutive uniform pairs."""
        if std < 0.0:
            raise ValueError("std must be non-negative")
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        a, b = u[0::2], u[1::2]
        # 1-a is in (0, 2**-53 .. 1], so the log never sees zero.
        r = np.sqrt(-2.0 * np.log(1.0 - a))
        theta = 2.0 * np.pi * b
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return mean + std * out[:n]

    def randint(self, low: int, high: int) -> int:
        """Integer in [low, high], inclusive. Modulo mapping; the bias is
        below 2**-53 for the spans used here."""
        if high < low:
            raise ValueError("empty range")
        return low + self.next_u64() % (high - low + 1)


def rng_gaussian(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw ``n`` Gaussian values from ``rng`` (see :meth:`Rng.gaussian`)."""
    return rng.gaussian(n, mean=mean, std=std)


def derive_seed(seed: int, label: str) -> int:
    """Deterministic sub-seed: FNV-1a of ``label`` xored into ``seed`` and
    passed through the SplitMix64 finalizer."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return _mix64((int(seed) ^ h) + _GAMMA)


# ---------------------------------------------------------------------------
# Tensors: float64 numpy arrays with a validation gate and a flat binary format.
# ---------------------------------------------------------------------------

_MAGIC = b"PGT1"


def as_tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate ``values`` as a finite float64 C-order array.

    Rejects NaN/Inf and, when ``shape`` is given, any element-count mismatch.
    """
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        expected = int(np.prod(shape)) if len(shape) else 1
        if arr.size != expected:
            raise ValueError(
                f"shape {tuple(shape)} wants {expected} values, got {arr.size}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return np.ascontiguousarray(arr)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize: b"PGT1", rank and dims as little-endian u64, then the
    row-major little-endian f64 payload."""
    arr = as_tensor(arr)
    header = _MAGIC + struct.pack("<Q", arr.ndim)
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != _MAGIC:
        raise ValueError("bad magic; not a PGT1 tensor")
    (rank,) = struct.unpack_from("<Q", raw, 4)
    dims = struct.unpack_from(f"<{rank}Q", raw, 12)
    payload = np.frombuffer(raw, dtype="<f8", offset=12 + 8 * rank)
    return as_tensor(payload.copy(), shape=dims)


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Padded sequence batches.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceBatch:
    """A [B, T, D] float64 tensor of sequences padded to length T, plus the
    per-sample valid lengths.

    ``max(lengths) == T`` always holds (no slack columns).  Positions at
    ``t >= lengths[b]`` are zero for any batch produced by the padding-safe
    ops here; deliberately broken modules may emit batches that violate that,
    which is exactly what the mask-preservation check looks for.  Arrays are
    treated as immutable once wrapped.
    """

    data: np.ndarray
    lengths: tuple[int, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"batch data must be [B, T, D], got shape {data.shape}")
        lengths = tuple(int(x) for x in self.lengths)
        if len(lengths) != data.shape[0]:
            raise ValueError("one length per sample required")
        t = data.shape[1]
        if any(ln < 1 or ln > t for ln in lengths):
            raise ValueError(f"lengths must lie in [1, {t}], got {lengths}")
        if max(lengths) != t:
            raise ValueError("padded length must equal the longest sample")
        if not np.all(np.isfinite(data)):
            raise ValueError("batch contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "lengths", lengths)

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def padded_len(self) -> int:
        return self.data.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[2]

    def mask(self) -> np.ndarray:
        return padding_mask(self.lengths, self.padded_len)


def padding_mask(lengths: Sequence[int], padded_len: int) -> np.ndarray:
    """Boolean [B, T] validity map: ``mask[b, t] == (t < lengths[b])``."""
    arange = np.arange(padded_len)
    return arange[None, :] < np.asarray(lengths, dtype=np.int64)[:, None]


def make_batch(sequences: Sequence[np.ndarray]) -> SequenceBatch:
    """Pad [T_i, D] matrices to a common length and stack them.

    Rows past each sample's length are zero.  Rejects an empty list and
    mismatched feature sizes.
    """
    if len(sequences) == 0:
        raise ValueError("cannot batch an empty list of sequences")
    mats = [as_tensor(s) for s in sequences]
    for m in mats:
        if m.ndim != 2 or m.shape[0] < 1:
            raise ValueError("each sequence must be a non-empty [T, D] matrix")
    dim = mats[0].shape[1]
    if any(m.shape[1] != dim for m in mats):
        dims = sorted({m.shape[1] for m in mats})
        raise ValueError(f"sequences disagree on feature size: {dims}")
    lengths = tuple(m.shape[0] for m in mats)
    padded = np.zeros((len(mats), max(lengths), dim))
    for b, m in enumerate(mats):
        padded[b, : m.shape[0]] = m
    return SequenceBatch(padded, lengths)


def unbatch(batch: SequenceBatch) -> list[np.ndarray]:
    """Inverse of :func:`make_batch` restricted to valid positions."""
    return [batch.data[b, :ln].copy() for b, ln in enumerate(batch.lengths)]


def apply_mask(batch: SequenceBatch) -> SequenceBatch:
    """Zero every padded position; valid positions are untouched."""
    data = batch.data * batch.mask()[:, :, None]
    return SequenceBatch(data, batch.lengths)


# ---------------------------------------------------------------------------
# Raw 1D convolution.
# ---------------------------------------------------------------------------


def conv1d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Cross-correlation of a [T, C_in] signal with [C_out, C_in, K] weights.

    ``out[t, o] = bias[o] + sum_{k,i} w[o, i, k] * x[t*stride + k - pad, i]``
    with zeros read outside the signal; the output has
    ``floor((T + 2*pad - K) / stride) + 1`` rows.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 3:
        raise ValueError("expected x as [T, C_in] and weights as [C_out, C_in, K]")
    t_in, c_in = x.shape
    c_out, c_in_w, k = weights.shape
    if c_in_w != c_in:
        raise ValueError(f"weights expect {c_in_w} input channels, signal has {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError("need K >= 1, stride >= 1, pad >= 0")
    if t_in + 2 * pad < k:
        raise ValueError(f"signal of length {t_in} too short for kernel {k} with pad {pad}")
    padded = np.pad(x, ((pad, pad), (0, 0)))
    windows = sliding_window_view(padded, k, axis=0)[::stride]  # [T_out, C_in, K]
    return np.einsum("tik,oik->to", windows, weights) + bias


def depthwise_conv1d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    pad: int | None = None,
) -> np.ndarray:
    """Per-channel convolution of [T, C] with [C, K] weights, K odd,
    padded with (K-1)/2 zeros on each side so the length is preserved."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError("expected x as [T, C] and weights as [C, K]")
    k = weights.shape[1]
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel must be odd, got {k}")
    same_pad = (k - 1) // 2
    if pad is None:
        pad = same_pad
    if pad != same_pad:
        raise ValueError(f"pad must be (K-1)/2 = {same_pad} for same-length output")
    padded = np.pad(x, ((pad, pad), (0, 0)))
    windows = sliding_window_view(padded, k, axis=0)  # [T, C, K]
    return np.einsum("tck,ck->tc", windows, weights) + bias
