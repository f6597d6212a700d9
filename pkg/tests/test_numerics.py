"""Tests for the numeric core: batching, masking, convolution, RNG, tensors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pangolinn.numerics import (
    Rng,
    SequenceBatch,
    apply_mask,
    as_tensor,
    conv1d,
    depthwise_conv1d,
    derive_seed,
    make_batch,
    padding_mask,
    read_tensor,
    rng_gaussian,
    tensor_from_bytes,
    tensor_to_bytes,
    unbatch,
)


def _naive_conv1d(x, w, bias, stride, pad):
    """Independent oracle: direct triple loop over the definition."""
    t_in, c_in = x.shape
    c_out, _, k = w.shape
    t_out = (t_in + 2 * pad - k) // stride + 1
    out = np.zeros((t_out, c_out))
    for t in range(t_out):
        for o in range(c_out):
            acc = bias[o]
            for i in range(c_in):
                for kk in range(k):
                    src = t * stride + kk - pad
                    if 0 <= src < t_in:
                        acc += w[o, i, kk] * x[src, i]
            out[t, o] = acc
    return out


class TestMakeBatch:
    def test_pads_shorter_sequences_with_zeros(self):
        batch = make_batch([np.ones((3, 2)), np.ones((5, 2))])
        assert batch.padded_len == 5
        assert batch.lengths == (3, 5)
        assert np.all(batch.data[0, 3:] == 0.0)

    def test_singleton_has_no_padding(self):
        seq = np.arange(8.0).reshape(4, 2)
        batch = make_batch([seq])
        assert batch.lengths == (4,)
        assert np.array_equal(batch.data[0], seq)

    def test_mask_row_for_short_sample(self):
        batch = make_batch([np.ones((7, 3)), np.ones((2, 3)), np.ones((7, 3))])
        assert batch.lengths == (7, 2, 7)
        expected = [True, True, False, False, False, False, False]
        assert batch.mask()[1].tolist() == expected

    def test_rejects_empty_list(self):
        with pytest.raises(ValueError, match="empty"):
            make_batch([])

    def test_rejects_mismatched_feature_size(self):
        with pytest.raises(ValueError, match="feature size"):
            make_batch([np.ones((3, 2)), np.ones((3, 4))])

    def test_rejects_empty_sequence(self):
        with pytest.raises(ValueError):
            make_batch([np.ones((0, 2))])


class TestUnbatch:
    @given(st.lists(st.integers(min_value=1, max_value=9), min_size=1, max_size=5),
           st.integers(min_value=1, max_value=4), st.integers())
    @settings(max_examples=50, deadline=None)
    def test_round_trip_identity(self, lengths, dim, seed):
        rng = Rng(seed)
        seqs = [rng.gaussian(ln * dim).reshape(ln, dim) for ln in lengths]
        back = unbatch(make_batch(seqs))
        assert len(back) == len(seqs)
        for a, b in zip(seqs, back):
            assert np.array_equal(a, b)

    def test_lengths_3_5(self):
        seqs = [np.full((3, 2), 1.5), np.full((5, 2), -2.0)]
        back = unbatch(make_batch(seqs))
        assert [m.shape[0] for m in back] == [3, 5]


class TestApplyMask:
    def test_idempotent_on_masked_batch(self):
        batch = make_batch([np.ones((2, 3)), np.ones((4, 3))])
        again = apply_mask(batch)
        assert np.array_equal(batch.data, again.data)

    def test_zeroes_sentinel_at_padded_position(self):
        batch = make_batch([np.ones((2, 3)), np.ones((4, 3))])
        dirty = batch.data.copy()
        dirty[0, 3, 1] = 9.9
        cleaned = apply_mask(SequenceBatch(dirty, batch.lengths))
        assert cleaned.data[0, 3, 1] == 0.0

    def test_preserves_valid_region(self):
        rng = Rng(11)
        seqs = [rng.gaussian(4 * 3).reshape(4, 3), rng.gaussian(7 * 3).reshape(7, 3)]
        batch = make_batch(seqs)
        dirty = batch.data.copy()
        dirty[0, 5] = 123.0
        cleaned = apply_mask(SequenceBatch(dirty, batch.lengths))
        for a, b in zip(unbatch(cleaned), seqs):
            assert np.array_equal(a, b)


class TestPaddingMask:
    def test_prefix_structure(self):
        mask = padding_mask([3, 1, 4], 4)
        for row in mask:
            run = row.tolist()
            assert run == sorted(run, reverse=True)  # trues then falses

    def test_matches_lengths(self):
        mask = padding_mask([2, 4], 4)
        assert mask.sum(axis=1).tolist() == [2, 4]


class TestSequenceBatchInvariants:
    def test_rejects_slack_columns(self):
        with pytest.raises(ValueError, match="longest"):
            SequenceBatch(np.zeros((2, 5, 3)), (3, 4))

    def test_rejects_out_of_range_lengths(self):
        with pytest.raises(ValueError):
            SequenceBatch(np.zeros((1, 4, 2)), (5,))

    def test_rejects_non_finite(self):
        data = np.zeros((1, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            SequenceBatch(data, (2,))


class TestConv1d:
    def test_pointwise_identity(self):
        x = Rng(0).gaussian(12).reshape(4, 3)
        w = np.eye(3)[:, :, None]
        out = conv1d(x, w, np.zeros(3))
        assert np.array_equal(out, x)

    def test_length_formula_example(self):
        x = np.ones((4, 1))
        out = conv1d(x, np.ones((2, 1, 3)), np.zeros(2), stride=2, pad=1)
        assert out.shape == (2, 2)

    def test_zero_input_zero_bias(self):
        out = conv1d(np.zeros((6, 2)), Rng(1).gaussian(2 * 2 * 3).reshape(2, 2, 3),
                     np.zeros(2), pad=1)
        assert np.all(out == 0.0)

    def test_matches_naive_oracle_on_enumeration(self):
        rng = Rng(42)
        for t in (1, 2, 5, 9, 16):
            for k in (1, 2, 3, 5, 7):
                for stride in (1, 2, 3):
                    for pad in (0, 1, 3):
                        if t + 2 * pad < k:
                            continue
                        x = rng.gaussian(t * 2).reshape(t, 2)
                        w = rng.gaussian(3 * 2 * k).reshape(3, 2, k)
                        bias = rng.gaussian(3)
                        got = conv1d(x, w, bias, stride=stride, pad=pad)
                        want = _naive_conv1d(x, w, bias, stride, pad)
                        assert got.shape == want.shape
                        assert np.allclose(got, want, rtol=0, atol=1e-12)

    def test_output_length_law_enumeration(self):
        for t in range(1, 17):
            for k in range(1, 8):
                for stride in range(1, 4):
                    for pad in range(0, 4):
                        if t + 2 * pad < k:
                            continue
                        out = conv1d(np.zeros((t, 1)), np.zeros((1, 1, k)), np.zeros(1),
                                     stride=stride, pad=pad)
                        assert out.shape[0] == (t + 2 * pad - k) // stride + 1

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            conv1d(np.zeros((4, 2)), np.zeros((3, 5, 1)), np.zeros(3))
        with pytest.raises(ValueError):
            conv1d(np.zeros((4, 2)), np.zeros((3, 2, 1)), np.zeros(4))

    def test_rejects_too_short_signal(self):
        with pytest.raises(ValueError, match="too short"):
            conv1d(np.zeros((2, 1)), np.zeros((1, 1, 5)), np.zeros(1))


class TestDepthwiseConv1d:
    def test_center_tap_identity(self):
        x = Rng(5).gaussian(15).reshape(5, 3)
        w = np.zeros((3, 3))
        w[:, 1] = 1.0
        assert np.array_equal(depthwise_conv1d(x, w, np.zeros(3)), x)

    def test_single_frame_boundary(self):
        x = np.array([[2.0, -1.0]])
        w = Rng(2).gaussian(6).reshape(2, 3)
        bias = np.array([0.5, -0.5])
        out = depthwise_conv1d(x, w, bias)
        assert np.allclose(out[0], bias + w[:, 1] * x[0])

    def test_reduces_to_general_conv_with_diagonal_weights(self):
        rng = Rng(9)
        channels, k = 4, 5
        x = rng.gaussian(7 * channels).reshape(7, channels)
        w = rng.gaussian(channels * k).reshape(channels, k)
        bias = rng.gaussian(channels)
        expanded = np.zeros((channels, channels, k))
        for c in range(channels):
            expanded[c, c] = w[c]
        got = depthwise_conv1d(x, w, bias)
        want = conv1d(x, expanded, bias, pad=(k - 1) // 2)
        assert np.array_equal(got, want)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            depthwise_conv1d(np.zeros((4, 2)), np.zeros((2, 4)), np.zeros(2))


class TestRng:
    def test_zero_std_copies_mean(self):
        assert np.all(rng_gaussian(Rng(1), 5, mean=3.25, std=0.0) == 3.25)

    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(123).gaussian(64), Rng(123).gaussian(64))
        a, b = Rng(9), Rng(9)
        assert [a.next_u64() for _ in range(8)] == [b.next_u64() for _ in range(8)]

    def test_law_of_large_numbers(self):
        sample = rng_gaussian(Rng(0), 100_000, mean=0.0, std=1.0)
        assert abs(sample.mean()) < 0.02

    def test_block_matches_scalar_stream(self):
        a, b = Rng(77), Rng(77)
        block = a._block_u64(33)
        scalar = [b.next_u64() for _ in range(33)]
        assert block.tolist() == scalar
        assert a.next_u64() == b.next_u64()

    def test_rejects_negative_std(self):
        with pytest.raises(ValueError):
            Rng(0).gaussian(3, std=-1.0)

    def test_randint_bounds(self):
        rng = Rng(4)
        draws = [rng.randint(3, 6) for _ in range(200)]
        assert min(draws) >= 3 and max(draws) <= 6
        assert set(draws) == {3, 4, 5, 6}

    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(0, "a") == derive_seed(0, "a")
        assert derive_seed(0, "a") != derive_seed(0, "b")
        assert derive_seed(0, "a") != derive_seed(1, "a")


class TestTensorFormat:
    def test_round_trip(self, tmp_path):
        arr = Rng(3).gaussian(24).reshape(2, 3, 4)
        path = tmp_path / "t.pgt"
        from pangolinn.numerics import write_tensor

        write_tensor(arr, path)
        assert np.array_equal(read_tensor(path), arr)

    def test_header_layout(self):
        raw = tensor_to_bytes(np.array([[1.0, 2.0]]))
        assert raw[:4] == b"PGT1"
        assert int.from_bytes(raw[4:12], "little") == 2  # rank
        assert int.from_bytes(raw[12:20], "little") == 1
        assert int.from_bytes(raw[20:28], "little") == 2
        assert np.frombuffer(raw[28:], dtype="<f8").tolist() == [1.0, 2.0]

    def test_rejects_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            tensor_from_bytes(b"NOPE" + b"\x00" * 16)

    def test_as_tensor_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            as_tensor([1.0, np.inf])

    def test_as_tensor_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            as_tensor([1.0, 2.0, 3.0], shape=(2, 2))
