"""Command line entry point: ``pedscl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, rng_for
from .continual import SCENARIO_IDS, build_validation_set, initial_params, pretrain
from .core import load_dataset
from .experiment import Cell, Workspace, deviations, prepare, report, run_cell, run_grid
from .learn import TrainLog
from .metrics import evaluate, forgotten_metric, sequence_end
from .model import load_checkpoint, save_checkpoint
from .sim import frames, load_scenario, make_scenario, run_scenario, write_stream

logger = logging.getLogger("pedscl")

# flag name -> config field; every default can be overridden
OVERRIDES = {
    "time_step": float,
    "task_length": float,
    "t_buff": float,
    "t_pred": float,
    "t_tbptt": float,
    "t_obs": float,
    "epochs": int,
    "lr": float,
    "l2": float,
    "ewc_lambda": float,
    "coreset_size": int,
    "coreset_update": int,
    "val_size": int,
    "pretrain_epochs": int,
    "pretrain_length": float,
    "batch_size": int,
    "n_pedestrians": int,
}


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in _csv(text)]


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Reduced CI scale unless ``--full``; then the config file; then explicit flags."""
    values = (ExperimentConfig() if args.full else ExperimentConfig.reduced()).to_dict()
    if args.config:
        raw = ExperimentConfig.from_file(args.config).to_dict()
        defaults = ExperimentConfig().to_dict()
        # only keys the file actually changes override the scale preset
        values.update({k: v for k, v in raw.items() if v != defaults[k]})
    for name in OVERRIDES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "seeds", None):
        values["seeds"] = args.seeds
    if getattr(args, "strategies", None):
        values["strategies"] = args.strategies
    if getattr(args, "sequences", None):
        values["sequences"] = [_csv(s) for s in args.sequences.split(";")]
    if getattr(args, "dense", None) is not None:
        values["dense_pedestrians"] = args.dense
    return ExperimentConfig(**values)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with experiment settings")
    p.add_argument("--full", action="store_true", help="full-size settings instead of the reduced CI scale")
    for name, typ in OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario_file) if args.scenario_file else make_scenario(args.scenario, args.n)
    rng = rng_for(args.seed, "simulation", SCENARIO_IDS.get(sc.name, 99), sc.n_pedestrians)
    count = write_stream(frames(run_scenario(sc, args.ticks, rng, args.dt)), args.out, sc.name)
    print(f"wrote {count} ticks of {sc.name} to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    config = build_config(args)
    log = TrainLog()
    theta = pretrain(initial_params(config, args.seed), config, args.seed, log)
    save_checkpoint(theta, args.out, {"seed": args.seed, "config": config.digest()})
    if args.log:
        log.write_csv(args.log)
    last = log.records[-1].pred if log.records else float("nan")
    print(f"pre-trained {config.pretrain_epochs} epochs, final loss {last:.5f}; saved {args.out}")
    return 0


def _cell_from_manifest(path: str, key: str) -> tuple[ExperimentConfig, Cell, Workspace]:
    """Config, cell and shared workspace of one grid cell, enough to re-run it alone."""
    root = Path(path).parent
    manifest = json.loads(Path(path).read_text())
    config = ExperimentConfig(**manifest["config"])
    entries = {c["key"]: c for c in manifest["cells"]}
    if key not in entries:
        raise KeyError(f"cell {key!r} not in manifest; known cells: {sorted(entries)}")
    e = entries[key]
    cell = Cell(e["strategy"], tuple(e["sequence"]), e["n_pedestrians"], e["seed"], config.n_pedestrians)
    return config, cell, Workspace.load(config, cell.seed, root / f"seed{cell.seed}")


def cmd_run_scl(args) -> int:
    if args.manifest:
        if not args.cell:
            raise ValueError("--manifest needs --cell")
        config, cell, ws = _cell_from_manifest(args.manifest, args.cell)
        sequence = cell.sequence
    else:
        config = build_config(args)
        sequence = tuple(_csv(args.sequence))
        theta0 = load_checkpoint(args.theta0)[0] if args.theta0 else None
        ws = prepare(config, args.seed, theta0)
        cell = Cell(args.strategy, sequence, config.n_pedestrians, args.seed, config.n_pedestrians)
    out = Path(args.out)
    result = run_cell(ws, cell, out)
    ws.save(out / "workspace")
    (out / "run.json").write_text(json.dumps({
        "cell": cell.key, "config": config.to_dict(), "deviations": deviations(config),
    }, indent=2))
    for r in result.records:
        print(f"phase {r.phase} {r.env:9s} ADE {r.ade_mean:.3f}±{r.ade_std:.3f} FDE {r.fde_mean:.3f}±{r.fde_std:.3f}")
    if cell.strategy != "offline":
        f = forgotten_metric(result.records, sequence)
        print(f"forgotten ADE {f.ade_mean:+.3f}±{f.ade_std:.3f} FDE {f.fde_mean:+.3f}±{f.fde_std:.3f}")
    print("sequence end ADE {:.3f}±{:.3f} FDE {:.3f}±{:.3f}".format(*sequence_end(result.records, sequence)))
    return 0


def cmd_run(args) -> int:
    config = build_config(args)
    manifest = run_grid(config, args.out, workers=args.workers)
    failed = [c["key"] for c in manifest["cells"] if c["status"] != "ok"]
    print(f"{len(manifest['cells']) - len(failed)} of {len(manifest['cells'])} cells finished; results in {args.out}")
    if failed:
        print("failed cells: " + ", ".join(failed), file=sys.stderr)
        return 1
    if not args.no_report:
        report(args.out)
    return 0


def cmd_report(args) -> int:
    try:
        rows, sig = report(args.results)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    for r in rows:
        forg = "{:+.2f}±{:.2f} / {:+.2f}±{:.2f}".format(*r.forgotten) if r.forgotten else "n/a"
        print(f"{r.label:10s} {'-'.join(r.sequence):24s} forgotten {forg:28s} end " + "{:.2f}±{:.2f} / {:.2f}±{:.2f}".format(*r.seq_end))
    for row in sig:
        print(row["strategy"], {k: round(v, 3) for k, v in row.items() if k.endswith("_p")})
    return 0


def cmd_eval(args) -> int:
    config = build_config(args)
    if args.dataset:
        data = load_dataset(args.dataset)
        env = data.label or Path(args.dataset).stem
    else:
        ref_path = args.reference or args.checkpoint
        ref = load_checkpoint(ref_path)[0] if ref_path else initial_params(config, args.seed)
        data = build_validation_set(args.scenario, ref, config, args.seed)
        env = args.scenario
    params = None if args.cv else load_checkpoint(args.checkpoint)[0]
    rec = evaluate(params, data, "cv" if args.cv else "model", 0, env, config.time_step)
    print(f"{env}: ADE {rec.ade_mean:.4f}±{rec.ade_std:.4f} FDE {rec.fde_mean:.4f}±{rec.fde_std:.4f} (n={rec.n})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedscl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated pedestrian stream")
    p.add_argument("--scenario", default="square", choices=sorted(SCENARIO_IDS))
    p.add_argument("--scenario-file")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--ticks", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--dt", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", help="pre-train the initial model on the open environment")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run-scl", help="run one strategy on one environment sequence")
    _add_config_flags(p)
    p.add_argument("--sequence", default="square,obstacle,hall")
    p.add_argument("--strategy", default="scl")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--theta0", help="pre-trained checkpoint; pre-trains when omitted")
    p.add_argument("--manifest", help="grid manifest.json; re-runs --cell with the grid's model and validation sets")
    p.add_argument("--cell", help="cell key from the manifest, e.g. scl__square-obstacle-hall__s7")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_scl)

    p = sub.add_parser("run", help="run the strategy x sequence grid")
    _add_config_flags(p)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--strategies", type=_csv)
    p.add_argument("--sequences", help="semicolon-separated sequences, e.g. 'square,obstacle,hall;hall,obstacle,square'")
    p.add_argument("--dense", type=_ints, help="dense pedestrian counts (empty string for none)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-report", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="write forgetting and significance summaries")
    p.add_argument("results")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the constant-velocity model)")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--cv", action="store_true")
    p.add_argument("--dataset", help="dataset file; otherwise a validation set is simulated")
    p.add_argument("--scenario", default="square", choices=sorted(SCENARIO_IDS))
    p.add_argument("--reference", help="checkpoint whose recurrent state labels the simulated set")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.cv and not args.checkpoint:
        print("error: eval needs --checkpoint or --cv", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
