"""Acceptance suite.

One test per criterion, each printing a `[PASS]`/`[FAIL]` line (visible with
``pytest -s`` or in the captured output of a failing run).  Tolerances are
pinned here, not configured elsewhere:

1. correct-encoder padding invariance is exact (0.0) over seeds 0-4,
   batch sizes {1,4,16}, lengths 8-64, 20 cases per seed, in under 60 s;
2. each bug variant fails padding invariance (> 1e-6) on every seed 0-4,
   the correct build passes on every seed;
3. buggy and correct builds are bit-identical on homogeneous-length batches
   (100 random trials);
4. relative-position logits match the brute-force dot-product oracle exactly
   for L in 1..8, T in L..L+4, 10 seeds; the broken gather differs whenever
   L < T and matches when L = T;
5. the frontend length law floor((L-1)/2)+1 applied twice holds for
   L in 4..64, batched and solo agreeing, with exact factor 4 on multiples;
6. the causal layer passes the causality check at divergence 0.0 and
   bidirectional attention fails it, seeds 0-4;
7. label-run compression equals the run-length-oracle reconstruction exactly
   on 1,000 random instances (V=10, L <= 32), conserves weighted sums within
   1e-12, and is the identity on strictly alternating labels;
8. for the all-bugs variant the pooled sweep divergence is monotone over
   batch sizes 1 -> 10 -> 100 (and exactly 0 at size 1), seeds 0-4;
9. verify runs are byte-identical for identical flags and exit codes follow
   the 0/1/2 contract.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from pangolinn.bugs import VARIANTS, bug_b3_relative_logits, build_encoder_with_bugs
from pangolinn.cli import main
from pangolinn.conformer import (
    DESK_CONFIG,
    attention_manifest,
    causal_attention_layer,
    encoder_length_transfer,
    init_from_specs,
    init_parameters,
    rel_mhsa,
    sinusoidal_pe,
    subsample_length,
    subsampling_frontend,
    relative_position_logits,
)
from pangolinn.ctc import ctc_compress, ctc_project, init_ctc_parameters, run_length_oracle
from pangolinn.harness import (
    CheckConfig,
    ModuleUnderTest,
    batch_size_sweep,
    causality_check,
    padding_invariance_check,
)
from pangolinn.numerics import Rng, make_batch

PARAMS = init_parameters(DESK_CONFIG, 0)
TRANSFER = encoder_length_transfer(DESK_CONFIG)
ACCEPT_CFG = dict(num_cases=20, batch_sizes=(1, 4, 16), length_min=8, length_max=64,
                  feature_dim=DESK_CONFIG.d_model, tolerance=1e-9)


@contextmanager
def criterion(n: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {n}: {description}")
        raise
    print(f"[PASS] criterion {n}: {description}")


def encoder_module(name: str) -> ModuleUnderTest:
    forward = build_encoder_with_bugs(DESK_CONFIG, PARAMS, VARIANTS[name])
    return ModuleUnderTest(name, forward, TRANSFER)


def test_criterion_1_correct_encoder_padding_invariance_exact():
    with criterion(1, "correct encoder padding invariance, divergence 0.0, < 60 s"):
        start = time.monotonic()
        for seed in range(5):
            cfg = CheckConfig(seed=seed, **ACCEPT_CFG)
            report = padding_invariance_check(encoder_module("correct"), cfg)
            assert report.overall_pass, f"seed {seed} failed"
            assert all(c.max_abs_divergence == 0.0 for c in report.cases), seed
        elapsed = time.monotonic() - start
        assert elapsed < 60.0, f"took {elapsed:.1f} s"


def test_criterion_2_bug_detection_soundness():
    with criterion(2, "b1/b2/b3/all fail padding invariance on every seed, correct passes"):
        for seed in range(5):
            cfg = CheckConfig(seed=seed, **ACCEPT_CFG)
            correct = padding_invariance_check(encoder_module("correct"), cfg)
            assert correct.overall_pass, f"correct variant failed on seed {seed}"
            for name in ("b1", "b2", "b3", "all"):
                report = padding_invariance_check(encoder_module(name), cfg)
                assert not report.overall_pass, f"{name} passed on seed {seed}"
                worst = max(c.max_abs_divergence for c in report.cases)
                assert worst > 1e-6, f"{name} diverged only {worst} on seed {seed}"


def test_criterion_3_no_padding_equivalence_bit_exact():
    with criterion(3, "buggy variants bit-exact to correct on homogeneous batches"):
        forwards = {name: encoder_module(name).forward for name in VARIANTS}
        rng = Rng(1234)
        for _ in range(100):
            ln = rng.randint(8, 40)
            batch_size = rng.randint(2, 4)
            batch = make_batch([
                rng.gaussian(ln * 16).reshape(ln, 16) for _ in range(batch_size)
            ])
            want = forwards["correct"](batch)
            for name in ("b1", "b2", "b3", "all"):
                got = forwards[name](batch)
                assert got.lengths == want.lengths
                assert np.array_equal(got.data, want.data), name


def _oracle_rel_logits(queries, lengths):
    b_sz, heads, t_len, dim = queries.shape
    out = np.zeros((b_sz, heads, t_len, t_len))
    for b, ln in enumerate(lengths):
        for h in range(heads):
            for i in range(ln):
                for j in range(ln):
                    out[b, h, i, j] = np.dot(queries[b, h, i], sinusoidal_pe(i - j, dim))
    return out


def test_criterion_4_relative_shift_oracle():
    with criterion(4, "relative logits match brute-force oracle exactly; broken "
                      "gather differs iff L < T"):
        for seed in range(10):
            rng = Rng(seed)
            for ln in range(1, 9):
                for t_pad in range(ln, ln + 5):
                    q = rng.gaussian(2 * t_pad * 4).reshape(1, 2, t_pad, 4)
                    oracle = _oracle_rel_logits(q, [ln])
                    good = relative_position_logits(q, [ln])
                    assert np.array_equal(good, oracle), (seed, ln, t_pad)
                    broken = bug_b3_relative_logits(q, [ln])
                    if ln == t_pad:
                        assert np.array_equal(broken, oracle), (seed, ln)
                    else:
                        assert not np.array_equal(
                            broken[0, :, :ln, :ln], oracle[0, :, :ln, :ln]
                        ), (seed, ln, t_pad)


def test_criterion_5_subsampling_length_law():
    with criterion(5, "frontend length law floor((L-1)/2)+1 twice, batched == solo"):
        p = PARAMS.sub("frontend")
        rng = Rng(0)
        seqs = {ln: rng.gaussian(ln * 16).reshape(ln, 16) for ln in range(4, 65)}
        solo_lengths = {}
        for ln, seq in seqs.items():
            out = subsampling_frontend(make_batch([seq]), p)
            law = ((ln - 1) // 2 + 1 - 1) // 2 + 1
            assert out.lengths[0] == law, ln
            assert subsample_length(subsample_length(ln)) == law
            solo_lengths[ln] = out.lengths[0]
            if ln % 4 == 0:
                assert out.lengths[0] == ln // 4  # exact factor 4
        batched = subsampling_frontend(make_batch(list(seqs.values())), p)
        assert list(batched.lengths) == [solo_lengths[ln] for ln in seqs]


def test_criterion_6_causality_detector():
    with criterion(6, "causal layer passes causality at 0.0, bidirectional "
                      "attention fails, seeds 0-4"):
        causal_p = init_from_specs(attention_manifest(16, prefix="c"), 99).sub("c")
        causal = ModuleUnderTest(
            "causal", lambda b: causal_attention_layer(b, causal_p), lambda ln: ln)
        attn_p = init_from_specs(attention_manifest(16, prefix="a"), 98).sub("a")
        bidirectional = ModuleUnderTest(
            "noncausal", lambda b: rel_mhsa(b, attn_p, 2), lambda ln: ln)
        for seed in range(5):
            cfg = CheckConfig(seed=seed, **ACCEPT_CFG)
            good = causality_check(causal, cfg)
            assert good.overall_pass, seed
            assert all(c.max_abs_divergence == 0.0 for c in good.cases), seed
            bad = causality_check(bidirectional, cfg)
            assert not bad.overall_pass, seed


def test_criterion_7_ctc_compression_oracle():
    with criterion(7, "compression == run-length oracle on 1000 instances, "
                      "conservation <= 1e-12, alternating identity"):
        head = init_ctc_parameters(16, 10, 7).sub("ctc")
        rng = Rng(2024)
        for _ in range(1000):
            ln = rng.randint(1, 32)
            batch = make_batch([rng.gaussian(ln * 16).reshape(ln, 16)])
            dist = ctc_project(batch, head)
            out = ctc_compress(batch, dist)
            labels = list(np.argmax(dist.probs[0, :ln], axis=1))
            runs = run_length_oracle(labels)
            pos, rebuilt = 0, []
            for _, count in runs:
                rebuilt.append(batch.data[0, pos : pos + count].mean(axis=0))
                pos += count
            rebuilt = np.stack(rebuilt)
            assert out.lengths == (len(runs),)
            assert np.array_equal(out.data[0, : len(runs)], rebuilt)
            weighted = sum(c * v for (_, c), v in zip(runs, rebuilt))
            residual = np.abs(weighted - batch.data[0, :ln].sum(axis=0)).max()
            assert residual <= 1e-12
        # strictly alternating labels: every run has length one
        frames = Rng(5).gaussian(12 * 16).reshape(12, 16)
        from pangolinn.ctc import CtcDistribution

        probs = np.zeros((1, 12, 11))
        for t in range(12):
            probs[0, t, t % 2] = 1.0
        out = ctc_compress(make_batch([frames]), CtcDistribution(probs, (12,)))
        assert out.lengths == (12,)
        assert np.array_equal(out.data[0], frames)


def test_criterion_8_sweep_trend_monotone():
    # Monotonicity is a property of the pooled suite, not of any single
    # case: the worst divergence over all seeds and the mean per-sequence
    # divergence must both be non-decreasing in the batch size.
    with criterion(8, "all-bugs sweep divergence monotone over batch sizes "
                      "1 -> 10 -> 100, seeds 0-4 pooled"):
        module = encoder_module("all")
        worst = {1: [], 10: [], 100: []}
        mean_inputs = {1: [], 10: [], 100: []}
        for seed in range(5):
            cfg = CheckConfig(seed=seed, num_cases=100, batch_sizes=(1, 10, 100),
                              length_min=8, length_max=64, feature_dim=16)
            report = batch_size_sweep(module, cfg)
            for case in report.cases:
                worst[case.batch_size].append(case.max_abs_divergence)
            for size in (1, 10, 100):
                mean_inputs[size].extend(_per_sequence_divergences(module, cfg, size))
        assert all(v == 0.0 for v in worst[1])
        pooled_max = {size: max(vals) for size, vals in worst.items()}
        assert pooled_max[100] >= pooled_max[10] >= pooled_max[1] == 0.0, pooled_max
        pooled_mean = {size: float(np.mean(vals)) for size, vals in mean_inputs.items()}
        assert pooled_mean[100] >= pooled_mean[10] >= pooled_mean[1] == 0.0, pooled_mean


def _per_sequence_divergences(module, cfg, batch_size):
    """Every pool sequence's |grouped - solo| divergence at one batch size,
    recomputed directly from the same pool the sweep uses."""
    from pangolinn.harness import _sample_lengths, _sample_sequences
    from pangolinn.numerics import derive_seed

    rng = Rng(derive_seed(cfg.seed, "sweep-pool"))
    lengths = _sample_lengths(rng, cfg.num_cases, cfg)
    pool = _sample_sequences(rng, lengths, cfg.feature_dim)
    refs = [module.forward(make_batch([s])) for s in pool]
    expected = [module.length_transfer(ln) for ln in lengths]
    divs = []
    for start in range(0, len(pool), batch_size):
        out = module.forward(make_batch(pool[start : start + batch_size]))
        for offset in range(min(batch_size, len(pool) - start)):
            idx = start + offset
            diff = np.abs(out.data[offset, : expected[idx]]
                          - refs[idx].data[0, : expected[idx]])
            divs.append(float(diff.max()))
    return divs


def test_criterion_9_determinism_and_exit_codes(tmp_path, capsys):
    with criterion(9, "byte-identical JSON across runs; exit codes 0/1/2"):
        flags = ["--seed", "3", "--batch-sizes", "1,4,16", "--max-len", "48"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        code_ok = main(["verify", "--module", "correct", *flags, "--json", str(a)])
        code_again = main(["verify", "--module", "correct", *flags, "--json", str(b)])
        assert code_ok == 0 and code_again == 0
        assert a.read_bytes() == b.read_bytes()
        assert main(["verify", "--module", "all", *flags]) == 1
        with pytest.raises(SystemExit) as err:
            main(["verify", "--module", "no-such-variant"])
        assert err.value.code == 2
        capsys.readouterr()
