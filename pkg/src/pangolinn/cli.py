"""Command-line front end.

Three subcommands:

- ``verify``: build a module variant, run the applicable checks, print a
  summary table, optionally write the reports as JSON.  Exit 0 when all
  checks pass, 1 when any fails, 2 on usage errors.
- ``demo-bugs``: divergence matrix of every encoder variant across inference
  batch sizes.
- ``ctc-demo``: length statistics and conservation residuals for label-run
  compression on encoder outputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bugs import VARIANTS, build_encoder_with_bugs
from .conformer import (
    DESK_CONFIG,
    PAPER_CONFIG,
    attention_manifest,
    causal_attention_layer,
    encoder_length_transfer,
    init_from_specs,
    init_parameters,
    rel_mhsa,
)
from .ctc import (
    CtcDistribution,
    ctc_compress,
    ctc_project,
    init_ctc_parameters,
    run_length_oracle,
)
from .harness import (
    CheckConfig,
    CheckReport,
    ModuleUnderTest,
    batch_size_sweep,
    causality_check,
    mask_preservation_check,
    padding_invariance_check,
)
from .numerics import Rng, derive_seed, make_batch

DEFAULT_NUM_CASES = 20
DEFAULT_VOCAB = 10
ENCODER_VARIANTS = tuple(VARIANTS)
MODULE_CHOICES = ENCODER_VARIANTS + ("causal", "noncausal", "ctc-compress")
CHECK_CHOICES = ("padding", "sweep", "causality", "mask")
CONSERVATION_TOL = 1e-12


def _build_module(variant: str, preset: str, seed: int) -> tuple[ModuleUnderTest, int]:
    """Instantiate the module under test; returns it plus its feature dim."""
    config = DESK_CONFIG if preset == "desk" else PAPER_CONFIG
    if variant in VARIANTS:
        params = init_parameters(config, derive_seed(seed, "encoder-params"))
        forward = build_encoder_with_bugs(config, params, VARIANTS[variant])
        module = ModuleUnderTest(variant, forward, encoder_length_transfer(config))
        return module, config.d_model
    if variant == "causal":
        params = init_from_specs(attention_manifest(config.d_model, prefix="causal"),
                                 derive_seed(seed, "causal-params"))
        p = params.sub("causal")
        module = ModuleUnderTest("causal", lambda b: causal_attention_layer(b, p),
                                 lambda ln: ln)
        return module, config.d_model
    if variant == "noncausal":
        params = init_from_specs(attention_manifest(config.d_model, prefix="attn"),
                                 derive_seed(seed, "noncausal-params"))
        p = params.sub("attn")
        heads = config.num_heads
        module = ModuleUnderTest("noncausal", lambda b: rel_mhsa(b, p, heads),
                                 lambda ln: ln)
        return module, config.d_model
    if variant == "ctc-compress":
        params = init_ctc_parameters(config.d_model, DEFAULT_VOCAB, derive_seed(seed, "ctc-params"))
        p = params.sub("ctc")
        forward = lambda b: ctc_compress(b, ctc_project(b, p))  # noqa: E731
        return ModuleUnderTest("ctc-compress", forward, None), config.d_model
    raise ValueError(f"unknown module variant {variant!r}")


def _identity_transfer(module: ModuleUnderTest, cfg: CheckConfig) -> bool:
    if module.length_transfer is None:
        return False
    return all(module.length_transfer(ln) == ln
               for ln in range(cfg.length_min, cfg.length_max + 1))


def _run_checks(module: ModuleUnderTest, cfg: CheckConfig, selected) -> list[CheckReport]:
    reports = []
    for name in selected:
        if name == "padding":
            reports.append(padding_invariance_check(module, cfg))
        elif name == "sweep":
            sweep_cfg = replace(cfg, num_cases=max(max(cfg.batch_sizes), 1))
            reports.append(batch_size_sweep(module, sweep_cfg))
        elif name == "causality":
            reports.append(causality_check(module, cfg))
        elif name == "mask":
            reports.append(mask_preservation_check(module, cfg))
    return reports


def _print_report_table(reports: list[CheckReport]) -> None:
    print(f"{'check':<20} {'module':<14} {'cases':>5} {'worst divergence':>17} result")
    for rep in reports:
        worst = max((c.max_abs_divergence for c in rep.cases), default=0.0)
        label = "pass" if rep.overall_pass else "FAIL"
        kinds = {c.failure_kind for c in rep.cases if c.failure_kind}
        note = f"  ({', '.join(sorted(kinds))})" if kinds else ""
        print(f"{rep.check_name:<20} {rep.module_name:<14} {len(rep.cases):>5} "
              f"{worst:>17.2e} {label}{note}")


def _write_json(reports: list[CheckReport], path: str) -> None:
    body = ",\n".join(rep.to_json() for rep in reports)
    Path(path).write_text("[\n" + body + "\n]\n")


def cmd_verify(args) -> int:
    module, feature_dim = _build_module(args.module, args.preset, args.seed)
    if args.preset == "paper":
        print("note: paper preset selected; expect a long runtime", file=sys.stderr)
    cfg = CheckConfig(seed=args.seed, num_cases=DEFAULT_NUM_CASES,
                      batch_sizes=tuple(args.batch_sizes), length_min=args.min_len,
                      length_max=args.max_len, feature_dim=feature_dim,
                      tolerance=args.tol)
    if args.checks:
        selected = args.checks
    else:
        selected = ["padding", "sweep", "mask"]
        if _identity_transfer(module, cfg):
            selected.insert(2, "causality")
    reports = _run_checks(module, cfg, selected)
    _print_report_table(reports)
    if args.json:
        _write_json(reports, args.json)
    return 0 if all(rep.overall_pass for rep in reports) else 1


def cmd_demo_bugs(args) -> int:
    sizes = tuple(args.batch_sizes)
    cfg = CheckConfig(seed=args.seed, num_cases=max(sizes), batch_sizes=sizes,
                      length_min=args.min_len, length_max=args.max_len,
                      feature_dim=16, tolerance=args.tol)
    reports = []
    print("worst |batched - solo| divergence per variant and inference batch size")
    header = "variant   " + "".join(f"{f'ibs={s}':>14}" for s in sizes)
    print(header)
    for variant in ENCODER_VARIANTS:
        module, feature_dim = _build_module(variant, args.preset, args.seed)
        var_cfg = replace(cfg, feature_dim=feature_dim)
        report = batch_size_sweep(module, var_cfg)
        reports.append(report)
        cells = "".join(f"{c.max_abs_divergence:>14.2e}" for c in report.cases)
        print(f"{variant:<10}{cells}")
    if args.json:
        _write_json(reports, args.json)
    return 0


def cmd_ctc_demo(args) -> int:
    config = DESK_CONFIG if args.preset == "desk" else PAPER_CONFIG
    enc_params = init_parameters(config, derive_seed(args.seed, "encoder-params"))
    encoder_fwd = build_encoder_with_bugs(config, enc_params, VARIANTS["correct"])
    head = init_ctc_parameters(config.d_model, DEFAULT_VOCAB, derive_seed(args.seed, "ctc-params"))
    p = head.sub("ctc")
    rng = Rng(derive_seed(args.seed, "ctc-demo"))
    all_ok = True
    print(f"{'batch':>5} {'mean in len':>12} {'mean out len':>13} {'ratio':>7} "
          f"{'max residual':>13} oracle")
    for batch_idx in range(5):
        lengths = [rng.randint(args.min_len, args.max_len) for _ in range(8)]
        if len(set(lengths)) < 2:
            lengths[0] = args.min_len
            lengths[-1] = args.max_len
        seqs = [rng.gaussian(ln * config.d_model).reshape(ln, config.d_model) for ln in lengths]
        enc_out = encoder_fwd(make_batch(seqs))
        dist = ctc_project(enc_out, p)
        comp = ctc_compress(enc_out, dist)
        residual, oracle_ok = _ctc_oracle_check(enc_out, dist, comp)
        all_ok = all_ok and oracle_ok and residual <= CONSERVATION_TOL
        in_mean = float(np.mean(enc_out.lengths))
        out_mean = float(np.mean(comp.lengths))
        print(f"{batch_idx:>5} {in_mean:>12.2f} {out_mean:>13.2f} {out_mean / in_mean:>7.3f} "
              f"{residual:>13.2e} {'ok' if oracle_ok else 'MISMATCH'}")
    ratio = _alternating_ratio(config.d_model)
    print(f"adversarial alternating-label fixture: compression ratio {ratio:.1f}")
    all_ok = all_ok and ratio == 1.0
    return 0 if all_ok else 1


def _ctc_oracle_check(batch, dist, comp) -> tuple[float, bool]:
    """Rebuild the compression from the run-length oracle and compare."""
    worst_residual, ok = 0.0, True
    for b, ln in enumerate(batch.lengths):
        frames = batch.data[b, :ln]
        labels = list(np.argmax(dist.probs[b, :ln], axis=1))
        runs = run_length_oracle(labels)
        pos = 0
        rebuilt = []
        for _, count in runs:
            rebuilt.append(frames[pos : pos + count].mean(axis=0))
            pos += count
        rebuilt = np.stack(rebuilt)
        got = comp.data[b, : comp.lengths[b]]
        if got.shape != rebuilt.shape or not np.array_equal(got, rebuilt):
            ok = False
            continue
        residual = np.abs(
            sum(count * vec for (_, count), vec in zip(runs, rebuilt)) - frames.sum(axis=0)
        ).max()
        worst_residual = max(worst_residual, float(residual))
    return worst_residual, ok


def _alternating_ratio(dim: int) -> float:
    """Compression ratio of a fixture whose argmax labels strictly alternate."""
    length = 12
    frames = np.arange(length * dim, dtype=np.float64).reshape(length, dim)
    probs = np.zeros((1, length, DEFAULT_VOCAB + 1))
    for t in range(length):
        probs[0, t, t % 2] = 1.0
    batch = make_batch([frames])
    comp = ctc_compress(batch, CtcDistribution(probs, (length,)))
    return comp.lengths[0] / length


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"not a comma list of ints: {text!r}") from err
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _check_list(text: str) -> list[str]:
    values = [x for x in text.split(",") if x]
    for v in values:
        if v not in CHECK_CHOICES:
            raise argparse.ArgumentTypeError(
                f"unknown check {v!r}; choose from {', '.join(CHECK_CHOICES)}")
    return values


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tol", type=float, default=1e-9)
    parser.add_argument("--batch-sizes", type=_int_list, default=[1, 10, 100],
                        metavar="N,N,...")
    parser.add_argument("--min-len", type=int, default=8)
    parser.add_argument("--max-len", type=int, default=64)
    parser.add_argument("--preset", choices=("desk", "paper"), default="desk")
    parser.add_argument("--json", metavar="PATH", default=None,
                        help="write the reports as a JSON array")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pangolinn",
        description="padding-safety checks for sequence encoder modules")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="run checks against one module variant")
    verify.add_argument("--module", choices=MODULE_CHOICES, default="correct")
    verify.add_argument("--checks", type=_check_list, default=None,
                        metavar=",".join(CHECK_CHOICES))
    _add_common(verify)
    verify.set_defaults(func=cmd_verify)

    demo = sub.add_parser("demo-bugs", help="divergence matrix across variants and batch sizes")
    _add_common(demo)
    demo.set_defaults(func=cmd_demo_bugs)

    ctc_demo = sub.add_parser("ctc-demo", help="label-run compression statistics")
    _add_common(ctc_demo)
    ctc_demo.set_defaults(func=cmd_ctc_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
