"""Command line interface.

    gridlight simulate --preset normal --out runs/normal
    gridlight train    --preset block --algo maclight --seeds 42,43 --out runs/b
    gridlight evaluate --preset normal --checkpoint runs/b/checkpoint_seed42.json
    gridlight census   --preset block --out runs/census
    gridlight plot     --records runs/b/records.csv --out runs/b/plots

Exit codes: 0 success, 1 configuration error, 2 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ScenarioConfig,
    emit_plots,
    evaluate,
    flow_census,
    load_config,
    plot_census,
    preset,
    read_records_csv,
    run_experiment,
    write_census_csv,
    write_records_csv,
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML scenario file")
    p.add_argument("--preset", choices=("normal", "peak", "block"), help="built-in scenario")
    p.add_argument("--seeds", help="comma-separated seed list, overrides the config")
    p.add_argument("--episodes", type=int, help="episodes per seed, overrides the config")
    p.add_argument("--algo", help="algorithm override (fixed/ippo/maclight/mappo/idqn)")
    p.add_argument("--vehicles", type=int, help="total vehicle count override")
    p.add_argument("--out", help="output directory")


def _resolve_config(args) -> ScenarioConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("a scenario is required: --config FILE or --preset NAME")
    overrides = {}
    if args.seeds:
        try:
            overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
        except ValueError as e:
            raise ConfigError(f"bad --seeds value {args.seeds!r}") from e
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if getattr(args, "algo", None):
        overrides["algorithm"] = args.algo
    if args.vehicles is not None:
        overrides["total_vehicles"] = args.vehicles
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return cfg


def _print_summary(records) -> None:
    seeds = sorted({r.seed for r in records})
    for seed in seeds:
        rs = [r for r in records if r.seed == seed]
        last = rs[-1]
        print(
            f"seed {seed}: episodes {len(rs)}, final return {last.ret:.2f}, "
            f"final wait {last.wait:.0f}, final queue {last.queue:.1f}, final speed {last.speed:.2f}"
        )


def _cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    cfg = dataclasses.replace(cfg, algorithm="fixed", episodes=args.episodes or 1)
    records, _ = run_experiment(cfg, out_dir=args.out, log=print if args.verbose else None)
    _print_summary(records)
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    records, _ = run_experiment(cfg, out_dir=args.out, log=print if args.verbose else None)
    _print_summary(records)
    if args.out:
        emit_plots(records, Path(args.out) / "plots")
        print(f"records, checkpoints and plots written to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    if not args.checkpoint:
        raise ConfigError("evaluate requires --checkpoint")
    records, mean_return = evaluate(cfg, args.checkpoint)
    for r in records:
        print(f"seed {r.seed}: return {r.ret:.2f} wait {r.wait:.0f} queue {r.queue:.1f} speed {r.speed:.2f}")
    print(f"mean return over {len(records)} seed(s): {mean_return:.2f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_records_csv(out / "evaluation.csv", records)
    return 0


def _cmd_census(args) -> int:
    cfg = _resolve_config(args)
    pair = flow_census(cfg)
    print(f"blocked edges: {', '.join(pair.blocked_edges)}; window [{pair.window[0]:.0f}, {pair.window[1]:.0f}) s")
    for eid in pair.blocked_edges:
        print(f"  {eid}: baseline {pair.baseline.total(eid)} entries, blocked {pair.blocked.total(eid)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_census_csv(pair.baseline, out / "census_baseline.csv")
        write_census_csv(pair.blocked, out / "census_blocked.csv")
        plot_census(pair, out)
        print(f"census written to {args.out}")
    return 0


def _cmd_plot(args) -> int:
    if not args.records:
        raise ConfigError("plot requires --records CSV")
    try:
        records = read_records_csv(args.records)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from e
    out = args.out or str(Path(args.records).parent / "plots")
    paths = emit_plots(records, out)
    print("\n".join(paths))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridlight",
        description="Multi-agent traffic signal control on a simulated grid",
    )
    parser.add_argument("--verbose", action="store_true", help="log per-episode progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the scenario under fixed-time control")
    _add_common(p_sim)
    p_train = sub.add_parser("train", help="train the configured algorithm")
    _add_common(p_train)
    p_eval = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", help="checkpoint manifest to load")
    p_census = sub.add_parser("census", help="paired flow census with/without the block")
    _add_common(p_census)
    p_plot = sub.add_parser("plot", help="render indicator SVGs from a records CSV")
    p_plot.add_argument("--records", help="records CSV produced by train/simulate")
    p_plot.add_argument("--out", help="output directory")

    args = parser.parse_args(argv)
    handlers = {
        "simulate": _cmd_simulate,
        "train": _cmd_train,
        "evaluate": _cmd_evaluate,
        "census": _cmd_census,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
