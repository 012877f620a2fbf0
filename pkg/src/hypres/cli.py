"""Command-line entry point.

Subcommands run pipeline stages (terms, couplings, scan, sample, fit,
xsec) or the whole chain (pipeline); stage outputs are cached in the
configured output directory and reused when the configuration digest
matches.  Exit code 0 on success, 1 on a stage error (message is tagged
with the stage), 2 on a configuration problem.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, HypresError
from .pipeline import (
    RunConfig,
    run_pipeline,
    stage_couplings,
    stage_fit,
    stage_sample,
    stage_scan,
    stage_terms,
    stage_xsec,
)
from .tableio import read_keyvalues


_STAGE_ORDER = ("terms", "couplings", "scan", "sample", "fit", "xsec")


def _add_common(sub):
    sub.add_argument("--config", required=True, help="INI run configuration")
    sub.add_argument("--out", help="override [output] directory")
    sub.add_argument("--force", action="store_true",
                     help="recompute even when caches are fresh")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypres",
        description="Multichannel resonance extraction: adiabatic basis, "
        "stabilization scan, generalized pole-form fit.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("terms", "adiabatic terms table"),
        ("couplings", "terms plus nonadiabatic coupling tables"),
        ("scan", "stabilization scan and resonance windows"),
        ("sample", "K(E) samples inside one window"),
        ("fit", "pole-form fit and resonance report"),
        ("xsec", "profile files: K entries, inverse parts, cross sections"),
        ("pipeline", "run every stage in order"),
    ):
        sub = subs.add_parser(name, help=help_text)
        _add_common(sub)
        if name in ("sample", "fit", "xsec", "pipeline"):
            sub.add_argument("--resonance", type=int, default=0,
                             help="window index from the scan stage (0 = lowest)")
        if name in ("fit", "pipeline"):
            sub.add_argument("--model", choices=["general", "diagonal", "both"],
                             help="override [fit] model")
        if name == "pipeline":
            sub.add_argument("--stage", choices=list(_STAGE_ORDER),
                             help="stop after this stage (dependencies included)")
    return parser


def _print_summary(path):
    pairs, _ = read_keyvalues(path)
    e0 = pairs["E0"]
    gamma = pairs["Gamma"]
    print(f"# resonance report ({path})")
    print("#    -E0          E0_below_upper    Gamma          Gamma2/Gamma")
    print(
        f"{-e0:.6e}  {pairs['E0_below_upper_threshold']:.6e}    "
        f"{gamma:.6e}  {pairs['Gamma2_over_Gamma']:.4f}"
    )
    if "branching_shift" in pairs:
        print(
            f"# model comparison: residual ratio {pairs['residual_ratio']:.3e}, "
            f"branching shift {pairs['branching_shift']:.4f}"
        )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.from_file(args.config)
        if args.out:
            config.parser.set("output", "directory", args.out)
    except ConfigError as exc:
        print(f"[config] error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "terms":
            out = stage_terms(config, force=args.force)
        elif args.command == "couplings":
            out = stage_couplings(config, force=args.force)
        elif args.command == "scan":
            out = stage_scan(config, force=args.force)
        elif args.command == "sample":
            out = stage_sample(config, resonance=args.resonance, force=args.force)
        elif args.command == "fit":
            out = stage_fit(config, resonance=args.resonance,
                            model=args.model, force=args.force)
            _print_summary(out)
        elif args.command == "xsec":
            out = stage_xsec(config, resonance=args.resonance, force=args.force)
        else:
            out = run_pipeline(config, resonance=args.resonance,
                               model=args.model, force=args.force,
                               upto=args.stage)
            if args.stage in (None, "fit", "xsec"):
                _print_summary(config.out_dir() / f"fit_{args.resonance}.txt")
        print(f"[{args.command}] wrote {out}")
        return 0
    except ConfigError as exc:
        print(f"[config] error: {exc}", file=sys.stderr)
        return 2
    except HypresError as exc:
        print(f"[stage:{args.command}] error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
