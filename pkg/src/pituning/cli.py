"""Command-line entry point: one subcommand per pipeline stage plus sweeps and reports."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import WindowArrays, load_dataset, window_sequences
from .metrics import evaluate
from .model import export_attention_map, load_checkpoint, write_attention_map
from .pipeline import (
    ReportError,
    RunPaths,
    StageFailed,
    load_run_data,
    prepare_run,
    read_plans,
    report,
    run_pipeline,
    run_stage,
    stage_data,
    stage_device,
    stage_distill,
    stage_plan,
    stage_population,
    sweep,
    write_manifest,
)

log = logging.getLogger("pituning")

COMMANDS = {
    "generate-data": "write the population and device datasets into the run directory",
    "train-population": "train the teacher with intent + masked event reconstruction losses",
    "distill": "distil the teacher into the smaller student",
    "plan-forget": "compute every device user's forget/retain intent sets",
    "tune-device": "unlearn and fine-tune per user, then score every arm",
    "evaluate": "score a checkpoint on a dataset",
    "sweep": "rerun the experiment over device data sizes or sequence lengths",
    "export-attention": "write the mean attention weight per intent and position",
    "report": "summarise a run directory as text",
    "run-all": "run every stage and print the report",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="text config with 'section.key = value' lines")
    common.add_argument("--out", help="run directory (overrides run.out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="pituning",
        description="Population-to-individual tuning of intent predictors. Any config key can be "
                    "overridden with '--section.key value'.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "evaluate":
            p.add_argument("--checkpoint", help="model file (default: the run's student)")
            p.add_argument("--data", help="dataset file (default: the run's device data)")
        elif name == "export-attention":
            p.add_argument("--checkpoint", help="model file (default: the run's teacher)")
            p.add_argument("--data", help="dataset file (default: the run's population data)")
            p.add_argument("--output", help="TSV path (default: <run>/attention.tsv)")
        elif name == "sweep":
            p.add_argument("--axis", required=True, choices=("device_data_size", "sequence_length"))
            p.add_argument("--values", required=True, help="comma-separated values, e.g. 0.25,0.5,1")
    return parser


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise SystemExit(f"error: unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise SystemExit(f"error: missing value for {tok}") from None
        pairs.append((key, value))
    return pairs


def make_config(args, extra) -> ExperimentConfig:
    try:
        cfg = load_config(args.config, parse_overrides(extra))
    except (KeyError, ValueError) as exc:
        raise SystemExit(f"error: {exc}") from None
    if args.out:
        cfg.run.out_dir = args.out
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg


def _windows(path, window: int) -> WindowArrays:
    ds = load_dataset(path)
    parts = [WindowArrays.from_windows(window_sequences(ds.users[u], window), window) for u in ds.user_ids()]
    return WindowArrays.concat(parts)


def run_command(args, cfg: ExperimentConfig) -> str:
    cmd = args.command
    if cmd == "run-all":
        res = run_pipeline(cfg)
        return report(res.root)
    if cmd == "report":
        text = report(cfg.run.out_dir)
        (Path(cfg.run.out_dir) / "report.txt").write_text(text, encoding="utf-8")
        return text
    if cmd == "sweep":
        values = [float(v) for v in args.values.split(",") if v.strip()]
        table = sweep(cfg, args.axis, values)
        lines = [f"{v:g} {arm} prec_w={row['prec_w']:.4f}" for v, rows in table for arm, row in rows.items()]
        return "\n".join(lines) + "\n"

    if cmd in ("evaluate", "export-attention"):
        # read-only: leave the run's config snapshot alone
        paths = RunPaths(Path(cfg.run.out_dir))
    else:
        paths = prepare_run(cfg)
    if cmd == "generate-data":
        pop, dev = run_stage(paths, cmd, stage_data, cfg, paths)
        return f"population: {pop.n_records} records, device: {dev.n_records} records\n"
    if cmd == "train-population":
        pop, _ = run_stage(paths, cmd, load_run_data, cfg, paths)
        _, rep = run_stage(paths, cmd, stage_population, cfg, paths, pop)
        return rep.to_text()
    if cmd == "distill":
        pop, _ = run_stage(paths, cmd, load_run_data, cfg, paths)
        teacher = run_stage(paths, cmd, load_checkpoint, paths.teacher)
        res = run_stage(paths, cmd, stage_distill, cfg, paths, pop, teacher)
        return f"student params {res.param_count}, teacher params {res.teacher_params}, agreement {res.agreement:.4f}\n"
    if cmd == "plan-forget":
        _, dev = run_stage(paths, cmd, load_run_data, cfg, paths)
        plans = run_stage(paths, cmd, stage_plan, cfg, paths, dev)
        return "".join(p.to_text() + "\n" for p in plans.values())
    if cmd == "tune-device":
        _, dev = run_stage(paths, cmd, load_run_data, cfg, paths)
        plans = run_stage(paths, cmd, read_plans, paths.plans)
        run_stage(paths, cmd, stage_device, cfg, paths, dev, plans)
        write_manifest(paths)
        return paths.results.read_text()
    if cmd == "evaluate":
        ckpt = run_stage(paths, cmd, load_checkpoint, args.checkpoint or paths.student)
        arrays = run_stage(paths, cmd, _windows, args.data or paths.device_data, ckpt.config.window)
        return run_stage(paths, cmd, evaluate, ckpt, arrays, cfg.eval.ks).to_text()
    if cmd == "export-attention":
        ckpt = run_stage(paths, cmd, load_checkpoint, args.checkpoint or paths.teacher)
        arrays = run_stage(paths, cmd, _windows, args.data or paths.population_data, ckpt.config.window)
        matrix = run_stage(paths, cmd, export_attention_map, ckpt.model, arrays)
        target = Path(args.output) if args.output else paths.root / "attention.tsv"
        write_attention_map(matrix, target)
        return f"wrote {target}\n"
    raise SystemExit(f"error: unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = make_config(args, extra)
    try:
        sys.stdout.write(run_command(args, cfg))
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ReportError as exc:
        print(f"error: report: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
