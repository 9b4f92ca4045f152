"""Command-line entry point ``dse``.

``dse run CONFIG``       run one scenario and write CSV/SVG artifacts
``dse gain CASE``        synthesize (or re-verify) an observer gain file
``dse compare DIR...``   merge summary tables into one ranking

``DSE_SEED`` (an integer) replaces every seed in a run config and the
sampling seed of ``dse gain``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .noise_attacks import NoiseSpec
from .observer import InfeasibleLMI, LipschitzConstants, ObserverGain, verify_gain
from .powermodel import jacobian_h, load_case, split_linear
from .report import merge_summaries, plot_ranking, write_ranking, write_result
from .scenario import (ESTIMATORS, DEFAULT_CONSTANTS, SCENARIOS, SEED_NAMES, ScenarioSetup,
                       derive_seeds, estimate_constants, run_scenario, synthesize_gain)

log = logging.getLogger("powerdse")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_INFEASIBLE = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    """Run configuration is malformed."""


def env_seed():
    raw = os.environ.get("DSE_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"DSE_SEED must be an integer, got {raw!r}") from exc


def _constants_from(doc) -> LipschitzConstants:
    try:
        return LipschitzConstants(float(doc["rho"]), float(doc["mu"]), float(doc["varphi"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("observer.constants needs numeric rho, mu, varphi") from exc


def parse_config(doc: dict, base_dir: Path) -> tuple[ScenarioSetup, Path, dict]:
    """Validate a run config; returns ``(setup, output_dir, resolved_config)``.

    Relative paths are resolved against ``base_dir`` (the config's folder).
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema {doc.get('schema')!r}; expected {SCHEMA_VERSION}")
    known = {"schema", "case_path", "scenario", "noise", "estimators", "seeds", "output_dir",
             "t_end", "threshold", "warmup", "observer"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    for key in ("case_path", "scenario", "output_dir"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")

    case_path = (base_dir / doc["case_path"]).resolve()
    if not case_path.is_file():
        raise FileNotFoundError(f"case file not found: {case_path}")
    case = load_case(case_path)

    scenario = doc["scenario"]
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}")
    noise_doc = dict(doc.get("noise", {"kind": "gaussian"}))
    noise_doc.pop("seed", None)
    try:
        noise = NoiseSpec(**noise_doc)
    except TypeError as exc:
        raise ConfigError(f"bad noise block: {exc}") from exc
    estimators = doc.get("estimators", list(ESTIMATORS))
    if not isinstance(estimators, list) or not estimators:
        raise ConfigError("estimators must be a non-empty list")

    seeds = doc.get("seeds", {})
    override = env_seed()
    if override is not None:
        seeds = derive_seeds(override)
    missing = [k for k in SEED_NAMES if k not in seeds]
    if missing:
        raise ConfigError(f"seeds missing {missing}")
    seeds = {k: int(seeds[k]) for k in SEED_NAMES}

    obs = doc.get("observer", {})
    gain = None
    constants = DEFAULT_CONSTANTS
    gain_path = obs.get("gain_path")
    if gain_path is not None:
        gain_path = (base_dir / gain_path).resolve()
        gain = ObserverGain.load(gain_path)
        verify_gain(gain, split_linear(case).A, jacobian_h(case.x0, case.Y_post, case))
    elif obs.get("constants") == "estimate":
        constants = estimate_constants(case, seeds["sampling"])
    elif obs.get("constants") is not None:
        constants = _constants_from(obs["constants"])

    setup = ScenarioSetup(case=case, scenario=scenario, noise=noise, estimators=estimators,
                          seeds=seeds, t_end=float(doc.get("t_end", 10.0)),
                          threshold=float(doc.get("threshold", 3.0)),
                          warmup=float(doc.get("warmup", 2.0)), gain=gain,
                          constants=constants)
    resolved = dict(doc)
    resolved["case_path"] = str(case_path)
    resolved["seeds"] = seeds
    resolved["noise"] = {k: v for k, v in noise.to_dict().items() if k != "seed"}
    resolved["estimators"] = list(setup.estimators)
    return setup, (base_dir / doc["output_dir"]).resolve(), resolved


def cmd_run(args) -> int:
    path = Path(args.config)
    doc = json.loads(path.read_text())
    setup, out_dir, resolved = parse_config(doc, path.parent)
    result = run_scenario(setup)
    files = write_result(result, out_dir)
    (out_dir / "config.resolved.json").write_text(json.dumps(resolved, indent=2) + "\n")
    for name, run in result.runs.items():
        met = result.metrics[name]
        note = "" if run.diverged_at is None else f"  diverged at t={run.diverged_at:.3f} s"
        print(f"{name:9s} final_rel_err={met.final_err:.4g} mean_rel_err={met.mean_err:.4g} "
              f"det={met.detection_rate:.3f} fa={met.false_alarm_rate:.3f} "
              f"wall={met.wall_time:.2f}s{note}")
    print(f"wrote {len(files)} artifacts to {out_dir}")
    return EXIT_OK


def cmd_gain(args) -> int:
    case = load_case(args.case)
    out = Path(args.out) if args.out else Path(args.case).with_suffix(".gain.json")
    A = split_linear(case).A
    C = jacobian_h(case.x0, case.Y_post, case)
    if out.exists() and not args.force:
        gain = ObserverGain.load(out)
        lam = verify_gain(gain, A, C)
        print(f"loaded {out}: certificate re-verified, lambda_max = {lam:.3e}")
        return EXIT_OK
    given = [args.rho, args.mu, args.varphi]
    if all(v is not None for v in given):
        consts = LipschitzConstants(*given)
    elif any(v is not None for v in given):
        raise ConfigError("pass all of --rho, --mu, --varphi or none of them")
    else:
        seed = env_seed()
        seed = args.seed if seed is None else seed
        consts = estimate_constants(case, seed, args.samples)
        print(f"estimated rho={consts.rho:.6g} mu={consts.mu:.6g} varphi={consts.varphi:.6g}")
    gain = synthesize_gain(case, consts)
    verify_gain(gain, A, C)
    out.parent.mkdir(parents=True, exist_ok=True)
    gain.save(out)
    print(f"wrote {out}: sigma={gain.sigma:.6g} lambda_max={gain.lmi_max_eig:.3e}")
    return EXIT_OK


def cmd_compare(args) -> int:
    table = merge_summaries(args.dirs)
    if args.out:
        out = Path(args.out)
        with open(out, "w", newline="") as fh:
            write_ranking(fh, table)
        plot_ranking(out.with_suffix(".svg"), table)
    else:
        write_ranking(sys.stdout, table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dse", description="Dynamic state estimation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario from a JSON config")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gain", help="synthesize or re-verify an observer gain")
    g.add_argument("case")
    g.add_argument("--rho", type=float)
    g.add_argument("--mu", type=float)
    g.add_argument("--varphi", type=float)
    g.add_argument("--out", help="gain file (default: <case>.gain.json)")
    g.add_argument("--seed", type=int, default=0, help="sampling seed for constant estimation")
    g.add_argument("--samples", type=int, default=1000, help="region samples for rho")
    g.add_argument("--force", action="store_true", help="re-synthesize even if --out exists")
    g.set_defaults(func=cmd_gain)

    c = sub.add_parser("compare", help="merge summary.csv files into a ranking table")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--out", help="write ranking CSV (and a bar chart next to it)")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleLMI as exc:
        print(f"error: {exc} (best lambda_max = {exc.best_max_eig:.3e})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, KeyError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
