"""Command line entry point ``fkc``.

Exit codes: 0 when every hard check passes (inconclusive checks only warn),
1 when a check fails, 2 for unreadable or malformed input.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigurationError
from .scenario import Scenario, ScenarioParseError, load_scenario, run_scenario

# model used by a single-check subcommand when --model is not given
DEFAULT_MODEL = {
    "mixing": {"kind": "chain", "preset": "reference3", "n_steps": 60},
    "eta": {"kind": "chain", "preset": "reference3", "n_steps": 60},
    "qproc": {"kind": "chain", "preset": "reference3", "n_steps": 60},
    "smc": {"kind": "chain", "preset": "reference3", "n_steps": 60},
    "quenched": {"kind": "birth_death"},
    "diffusion": {"kind": "diffusion", "preset": "reference"},
}


def _model_section(arg: str | None, command: str) -> dict:
    if arg is None:
        return dict(DEFAULT_MODEL[command])
    path = Path(arg)
    if path.exists() or path.suffix in (".yaml", ".yml"):
        sc = load_scenario(path)
        return sc.model
    if command == "diffusion":
        return {"kind": "diffusion", "preset": arg}
    return {"kind": "chain", "preset": arg}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the scenario)")
    p.add_argument("--out", default=None, help="directory for CSV and JSON artifacts")
    p.add_argument("--horizon", type=float, default=None, help="grid length (steps for chains, time otherwise)")
    p.add_argument("--tolerance-scale", type=float, default=None, help="multiply every tolerance")
    p.add_argument("--workers", type=int, default=1, help="threads for Monte Carlo inner loops")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fkc", description="Mixing checks for penalized Markov processes.")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_ in [
        ("mixing", "coefficients and the contraction sweep"),
        ("eta", "eigenfunction proxy and its residual"),
        ("qproc", "Q-process kernel and its mixing bound"),
        ("quenched", "birth-death process in a random environment"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", default=None, help="preset name or scenario file whose model section is used")
        p.add_argument("--configs", type=int, default=None, help="number of random configurations")
        _common(p)

    p = sub.add_parser("smc", help="particle approximation against the exact flow")
    p.add_argument("--model", default=None)
    p.add_argument("--particles", type=int, default=10_000)
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--scheme", choices=["multinomial", "systematic"], default="multinomial")
    _common(p)

    p = sub.add_parser("diffusion", help="Monte Carlo checks for the absorbed diffusion")
    p.add_argument("--spec", default=None, help="preset name (brownian, reference) or scenario file")
    p.add_argument("--check", choices=["survival", "small_x", "escape", "tv"], default="tv")
    p.add_argument("--paths", type=int, default=None)
    _common(p)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("scenario", help="path, or the name of a shipped scenario")
    _common(p)

    p = sub.add_parser("verify-all", help="run the acceptance suite")
    p.add_argument("--list", action="store_true", help="print the criteria without running them")
    p.add_argument("--only", type=int, nargs="*", default=None, help="criterion numbers to run")
    p.add_argument("--particles", type=float, default=1.0, help="scale factor for every Monte Carlo sample size")
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    return ap


def _single(args) -> Scenario:
    cmd = args.command
    if cmd == "diffusion":
        model = _model_section(args.spec, "diffusion")
        params = {"check": args.check}
        if args.paths:
            params["n_paths"] = args.paths
        if args.check == "survival" and model.get("preset") != "brownian":
            model = {"kind": "diffusion", "preset": "brownian", "horizon": 1.0}
    elif cmd == "smc":
        model = _model_section(args.model, cmd)
        params = {"check": "smc", "particles": args.particles, "replicates": args.replicates, "scheme": args.scheme}
    else:
        model = _model_section(args.model, cmd)
        params = {"check": cmd}
        if args.configs is not None:
            params["n_configs"] = args.configs
        if cmd == "eta":
            params["uniqueness"] = True
    return Scenario(cmd, 0 if args.seed is None else args.seed, model, [params])


def _run(sc: Scenario, args) -> int:
    res = run_scenario(
        sc,
        args.out,
        seed=args.seed,
        horizon=args.horizon,
        tolerance_scale=args.tolerance_scale,
        workers=args.workers,
        log=print,
    )
    if res.out_dir is not None:
        print(f"artifacts in {res.out_dir}")
    if res.failed:
        print("failing checks: " + ", ".join(r.check for r in res.failed), file=sys.stderr)
    return res.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify-all":
            from .acceptance import CRITERIA, verify_all

            if args.list:
                for c in CRITERIA:
                    lim = f" (limit {c.time_limit:.0f}s)" if c.time_limit else ""
                    print(f"{c.cid:2d} {c.title}{lim}")
                return 0
            verdicts = verify_all(args.only, args.particles)
            total = sum(v.seconds for v in verdicts)
            bad = [v.cid for v in verdicts if not (v.passed and v.within_time)]
            print(f"{len(verdicts) - len(bad)}/{len(verdicts)} criteria passed in {total:.1f}s")
            return 1 if bad else 0
        sc = load_scenario(args.scenario) if args.command == "run" else _single(args)
        return _run(sc, args)
    except ScenarioParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
