"""Command-line entry point: ``i2i-extract <subcommand> [--key value ...]``.

Exit codes: 0 success, 2 usage or configuration, 3 data or format,
4 training divergence, 5 query budget exhausted.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .backbones import load_bundle, save_bundle
from .errors import (BudgetError, ConfigurationError, FormatError, TrainingDivergenceError,
                     VictimTrainingError)
from .experiment import (ARMS, ExperimentConfig, evaluate_outputs, generate_all,
                         ignored_settings, probe_batch, probe_loss, query_attack_set,
                         run_ablation, train_arm, write_triptychs)
from .metrics import landscape_coords, landscape_slice, reports_to_csv, reports_to_text
from .sam import sharpness_probe
from .tensor_io import read_manifest, write_manifest, write_tensor
from .victim import (DomainParams, TaskSpec, VictimConfig, VictimOracle, gen_dataset,
                     load_dataset, save_dataset, train_victim)

log = logging.getLogger("i2i_extract")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_BUDGET = 0, 2, 3, 4, 5

CONFIG_KEYS = [f.name for f in dataclasses.fields(ExperimentConfig)]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with ExperimentConfig fields")
    for key in CONFIG_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                       metavar="V", help=f"overrides config key {key}")


def resolve_config(args: argparse.Namespace) -> tuple[ExperimentConfig, set[str]]:
    """Config file first, then explicit flags on top; returns the keys that were given."""
    base = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    flags = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    given = set(flags)
    if args.config:
        given |= set(read_manifest(args.config))
    return ExperimentConfig.from_mapping(flags, base).validate(), given


def cmd_gen_data(args) -> int:
    task = TaskSpec(args.task, args.image_size, args.channels)
    ds = gen_dataset(task, DomainParams.from_shift(args.shift), args.n, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples (task={task.kind}, shift={args.shift}) to {args.out}")
    return EXIT_OK


def cmd_train_victim(args) -> int:
    ds = load_dataset(args.data)
    task = TaskSpec(str(ds.manifest["task"]), int(ds.manifest["image_size"]),
                    int(ds.manifest["channels"]))
    cfg = VictimConfig(lr=args.lr, batch_size=args.batch_size, max_steps=args.max_steps,
                       l1_threshold=args.l1_threshold, seed=args.seed, budget=args.budget)
    oracle = train_victim(task, ds, cfg)
    oracle.save(args.out)
    print(f"victim saved to {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg, given = resolve_config(args)
    arm = args.arm
    for key in ignored_settings(arm, given):
        log.warning("arm=%s ignores %s", arm, key)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    oracle = VictimOracle.load(args.victim, cfg.budget)
    raw = load_dataset(args.attack_data)
    attack = query_attack_set(oracle, raw.inputs, raw.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(attack, out / "attack_queried")
    run = train_arm(cfg, arm, attack, seed)
    save_bundle(run.bundle, out / "checkpoint")
    (out / "curve.csv").write_text(reports_to_csv(run.curve))
    lines = {"arm": arm, "seed": seed, "steps": run.steps, "queries": oracle.used,
             "budget": oracle.budget, "final_probe_loss": run.final_probe_loss,
             "probe_size": min(cfg.probe_size, len(attack))}
    px, py = probe_batch(attack, cfg)
    lines["sharpness"] = sharpness_probe(run.bundle.generators,
                                         lambda: probe_loss(run.bundle, px, py),
                                         cfg.probe_rho, cfg.probe_dirs, seed)
    write_manifest(out / "report.txt", lines)
    write_manifest(out / "config.txt", cfg.to_manifest())
    if args.test_data:
        test = load_dataset(args.test_data)
        lab = VictimOracle.load(args.victim, len(test))
        victim_out = lab.query_all(test.inputs)
        outputs = generate_all(run.bundle, test.inputs)
        reports = evaluate_outputs(outputs, victim_out, test.targets, seed, cfg.channels)
        (out / "metrics.txt").write_text(reports_to_text(reports))
        write_triptychs(out, test.inputs, victim_out, outputs, cfg.n_triptychs)
    print(f"arm={arm} seed={seed} queries={oracle.used} probe_l1={run.final_probe_loss:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, given = resolve_config(args)
    for arm in cfg.arms:
        for key in ignored_settings(arm, given):
            log.warning("arm=%s ignores %s", arm, key)
    result = run_ablation(cfg, Path(args.out))
    print(result.summary(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = load_bundle(args.checkpoint)
    test = load_dataset(args.data)
    lab = VictimOracle.load(args.victim, len(test))
    victim_out = lab.query_all(test.inputs)
    outputs = generate_all(bundle, test.inputs)
    truth = test.targets if test.targets is not None else victim_out
    reports = evaluate_outputs(outputs, victim_out, truth, args.seed, bundle.spec.image_channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(reports_to_text(reports))
    rows = [{"metric": f"{r.name}.{r.mode}", "label": r.label, "value": r.value,
             "std": "" if r.std is None else r.std, "n": r.n} for r in reports]
    (out / "metrics.csv").write_text(reports_to_csv(rows))
    write_triptychs(out, test.inputs, victim_out, outputs, args.triptychs)
    for r in reports:
        print(f"{r.name}.{r.mode} [{r.label}] = {r.value!r}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    bundle = load_bundle(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.targets is None:
        raise FormatError("landscape data needs victim outputs as targets", field="blobs")
    n = min(args.probe_size, len(ds))
    px, py = ds.inputs[:n], ds.targets[:n]
    grid = landscape_slice(bundle.generators, lambda: probe_loss(bundle, px, py), args.grid,
                           args.radius, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, grid)
    write_tensor(out.with_name(out.stem + "_coords.i2it"),
                 landscape_coords(args.grid, args.radius))
    c = args.grid // 2
    print(f"grid {args.grid}x{args.grid} radius {args.radius}: center={grid[c, c]!r} "
          f"min={grid.min()!r} max={grid.max()!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2i-extract", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a procedural dataset directory")
    p.add_argument("--task", choices=["sharpen", "stylize"], default="sharpen")
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-victim", help="train a Pix2Pix victim on a shift-0 dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-steps", type=int, default=1500)
    p.add_argument("--l1-threshold", type=float, default=None)
    p.add_argument("--budget", type=int, default=2000)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("extract", help="query the victim and train one surrogate arm")
    p.add_argument("--victim", required=True)
    p.add_argument("--attack-data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--arm", choices=ARMS, default="full")
    p.add_argument("--seed", type=int, default=None, help="defaults to the first config seed")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("ablate", help="run all arms x seeds end to end")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="metrics of a checkpoint against the victim")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--triptychs", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="export a 2-D loss-landscape slice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset whose targets are victim outputs")
    p.add_argument("--out", required=True, help="output .i2it grid file")
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-size", type=int, default=64)
    p.set_defaults(func=cmd_landscape)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergenceError, VictimTrainingError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
