"""Command-line entry point: ``naclab <verb> ...``.

Exit codes: 0 success, 1 unexpected runtime failure, 2 validation failure,
3 assumption violation or inapplicable bound, 4 the deadly-triad experiment
observed the expected one-step divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import (
    AssumptionViolation,
    BoundInapplicable,
    CertificationError,
    ConfigurationError,
    LeastSquaresDegeneracy,
    NaclabError,
    NoUniqueSolution,
)
from . import experiments, gallery
from .experiments import EXIT_ASSUMPTION, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION


def _seed_list(text: str) -> list[int]:
    """Parse ``"0,1,5"`` or ``"0-9"`` (inclusive range) or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def _load_spec(args) -> experiments.ExperimentSpec:
    path = Path(args.spec)
    if not path.exists():
        raise ConfigurationError(f"spec file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON (line {exc.lineno}): {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: spec must be a JSON object")
    if getattr(args, "seeds", None) is not None:
        try:
            doc["seeds"] = _seed_list(args.seeds)
        except ValueError:
            raise ConfigurationError(f"--seeds: cannot parse {args.seeds!r}") from None
    if getattr(args, "thin", None) is not None:
        doc["thin"] = args.thin
    return experiments.parse_spec(doc, base_dir=path.parent)


def _cmd_validate(args) -> int:
    spec = _load_spec(args)
    print(f"ok: {spec.kind} on {spec.instance.name or spec.instance_ref} with {len(spec.seeds)} seed(s)")
    return EXIT_OK


def _cmd_run(args) -> int:
    spec = _load_spec(args)
    outcome = experiments.run_experiment(spec, out=args.out, workers=args.workers)
    print(f"wrote {len(outcome.files)} file(s) to {outcome.out_dir}")
    if outcome.status == experiments.EXIT_EXPECTED_DIVERGENCE:
        n = outcome.manifest.get("divergent_seeds_n1", 0)
        print(f"one-step TD diverged on {n} of {len(spec.seeds)} seed(s), as expected")
    return outcome.status


def _cmd_sweep(args) -> int:
    spec = _load_spec(args)
    outcome = experiments.run_sweep(spec, out=args.out, workers=args.workers)
    print(outcome.files["sweep.csv"], end="")
    slope = outcome.manifest.get("slope")
    print(f"log-log slope of total samples against 1/epsilon: {slope if slope is not None else 'n/a'}")
    return outcome.status


def _cmd_gallery(args) -> int:
    if args.action == "list":
        doc = gallery._load_doc()
        for name in gallery.names():
            rec = doc[name]["certification"]
            print(
                f"{name:14s} n_min={rec['n_min']:<3d} lambda_min={rec['lambda_min']:.4g} "
                f"contraction(n=1)={rec['contraction_n1']:.4g}"
            )
        return EXIT_OK
    if not args.name:
        raise ConfigurationError("gallery certify needs an instance name")
    inst = gallery.load(args.name)
    live = gallery.certify(inst)
    print(json.dumps(live, indent=1, sort_keys=True))
    stored = inst.record
    mismatched = [
        key for key in gallery.RECORD_KEYS
        if key in stored and not _close(stored[key], live[key])
    ]
    if mismatched:
        raise CertificationError(f"stored certification differs from live values for: {', '.join(mismatched)}")
    return EXIT_OK


def _close(a, b) -> bool:
    if isinstance(a, int) and isinstance(b, int):
        return a == b
    return abs(float(a) - float(b)) <= 1e-9 * max(1.0, abs(float(a)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="naclab", description="Off-policy natural actor-critic experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def spec_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("spec", help="experiment spec (JSON)")
        p.add_argument("--seeds", help="override seeds, e.g. 0-9 or 1,2,3")
        p.add_argument("--thin", type=int, help="record every THIN-th critic iterate")
        return p

    spec_command("validate", "validate a spec without running it")
    for name, text in (("run", "run an experiment"), ("sweep", "run a sample-complexity sweep")):
        p = spec_command(name, text)
        p.add_argument("--out", help="output root (default: $NACLAB_OUT or ./naclab_out)")
        p.add_argument("--workers", type=int, default=1, help="seed-level worker processes")
    g = sub.add_parser("gallery", help="canonical instances")
    g.add_argument("action", choices=("list", "certify"))
    g.add_argument("name", nargs="?")
    return parser


COMMANDS = {
    "validate": _cmd_validate,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "gallery": _cmd_gallery,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    try:
        return COMMANDS[args.verb](args)
    except ConfigurationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (
        AssumptionViolation, BoundInapplicable, CertificationError, LeastSquaresDegeneracy, NoUniqueSolution,
    ) as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except NaclabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
