"""
cascade-kd

Command-line interface for generating data, training early-exit cascades,
fitting exit policies and running the comparison studies.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from loguru import logger

from services.config import TOOL_VERSION, ExperimentConfig, config_hash, load_config, parse_config, serialize_config
from services.costmodel import (
    bandwidth_report,
    flops_of_model,
    load_stream_specs,
    pareto_front,
    parse_tau_grid,
    sweep_csv_name,
    sweep_tradeoff,
)
from services.distill import PkdSchedule, StrategyVariant, evaluate_ics, train_ics
from services.errors import CascadeError
from services.experiments import (
    Benchmark,
    run_flatness_study,
    run_frame_ablation,
    run_order_study,
    run_table1,
    run_wise_study,
    train_backbones,
    with_fresh_ics,
)
from services.logging_setup import setup_logging
from services.moddata import MODALITIES, GenSpec, Modality, generate, get_split, load_dataset, save_dataset
from services.netmodel import CascadeModel, load_checkpoint, save_checkpoint
from services.probe import flatness, scan_ic_landscape
from services.reports import GRID_HEADER, grid_rows, tradeoff_rows, write_csv, write_json
from services.storage import ManifestRecorder, claim_output
from services.wise import (
    NEVER_EXIT_TAU,
    ExitChain,
    ExitEngine,
    ExitPoint,
    LateralMode,
    get_policy,
    load_policy,
    save_policy,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Raised for bad command-line usage detected after parsing."""
    pass


class CascadeArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _experiment(args) -> ExperimentConfig:
    return parse_config(Path(args.config)) if getattr(args, "config", None) else ExperimentConfig()


def _recorder(out_dir: Path, command: str, cfg: ExperimentConfig, seed: Optional[int] = None) -> ManifestRecorder:
    recorder = ManifestRecorder(out_dir, command, config_hash(cfg), TOOL_VERSION, seed)
    config_path = claim_output(Path(out_dir) / "config.env")
    config_path.write_text(serialize_config(cfg), encoding="utf-8")
    recorder.add(config_path)
    return recorder


def _benchmark_from_file(data: Path, split_id: int) -> Benchmark:
    dataset = load_dataset(data)
    split = get_split(len(dataset), dataset.spec.seed, split_id)
    return Benchmark(dataset.spec.seed, split_id, dataset.subset(split.train), dataset.subset(split.test))


def _load_cascade(ckpt_dir: Path) -> CascadeModel:
    model = CascadeModel(backbones={})
    for m in MODALITIES:
        ckpt = load_checkpoint(Path(ckpt_dir) / f"{m.value}.ckpt")
        if ckpt.backbone.modality is not m:
            raise CascadeError(f"{m.value}.ckpt holds a {ckpt.backbone.modality.value} backbone")
        model.backbones[m] = ckpt.backbone
        for ic in ckpt.ics:
            model.ics[ic.key] = ic
    return model


def _save_cascade(model: CascadeModel, out_dir: Path, recorder: ManifestRecorder, metadata: Dict[str, object]) -> None:
    for m in MODALITIES:
        path = claim_output(Path(out_dir) / f"{m.value}.ckpt")
        ics = [model.ics[(m, p)] for p in (1, 2, 3) if (m, p) in model.ics]
        save_checkpoint(path, model.backbones[m], ics, metadata)
        recorder.add(path)


def gen_data_command(args) -> None:
    """Generate a synthetic three-modality dataset."""
    cfg = _experiment(args)
    spec = GenSpec.preset(args.preset, seed=args.seed) if args.preset else cfg.gen_spec(args.seed)
    out = claim_output(Path(args.out))
    dataset = generate(spec)
    save_dataset(dataset, out)
    print(f"Generated {len(dataset)} samples ({spec.num_classes} classes, seed {spec.seed}) → {out}")


def train_backbones_command(args) -> None:
    """Pretrain and freeze the MV, R and I-frame backbones."""
    cfg = _experiment(args)
    threads = load_config().threads
    bench = _benchmark_from_file(Path(args.data), args.split)
    if args.seed is not None and args.seed != bench.seed:
        raise UsageError(f"--seed {args.seed} does not match the dataset seed {bench.seed}")
    out_dir = Path(args.out_dir)
    recorder = _recorder(out_dir, "train-backbones", cfg, bench.seed)
    model = train_backbones(cfg, bench, threads=threads)
    table = evaluate_ics(model, bench.test)
    metadata = {"seed": bench.seed, "split": args.split, "epochs": cfg.training.backbone_epochs, "strategy": "backbone"}
    _save_cascade(model, out_dir, recorder, metadata)
    recorder.finish()
    for m in MODALITIES:
        print(f"{m.value:>6} FC test accuracy: {table.get(m, 4):.4f}")


def train_ics_command(args) -> None:
    """Train all nine ICs on frozen backbones with one strategy."""
    cfg = _experiment(args)
    bench = _benchmark_from_file(Path(args.data), args.split)
    variant = StrategyVariant.parse(args.strategy)
    schedule = PkdSchedule.parse(args.schedule) if args.schedule else cfg.schedule()
    strategy = cfg.strategy(variant)
    if args.temperature is not None:
        strategy = replace(strategy, temperature=args.temperature)
    if variant.uses_schedule:
        strategy = replace(strategy, schedule=schedule)
    epochs = schedule.total_epochs if variant.uses_schedule else cfg.ics.epochs

    model = with_fresh_ics(cfg, _load_cascade(Path(args.ckpt_dir)), bench.seed)
    out_dir = Path(args.out_dir)
    recorder = _recorder(out_dir, "train-ics", cfg, bench.seed)
    train_ics(model, bench.train, strategy, cfg.ic_optim(), seed=bench.seed, epochs=epochs,
              reset_on_phase=cfg.ics.reset_on_phase)
    table = evaluate_ics(model, bench.test)
    metadata = {"seed": bench.seed, "split": args.split, "epochs": epochs, "strategy": variant.value}
    _save_cascade(model, out_dir, recorder, metadata)
    rows = [(bench.seed, args.split, variant.value, m.value, idx, acc) for (m, idx), acc in table.entries.items()]
    recorder.add(write_csv(out_dir / "ic_accuracy.csv",
                           ["dataset_seed", "split", "strategy", "modality", "ic_index", "accuracy"], rows,
                           config_hash(cfg)))
    recorder.finish()
    print(f"Trained ICs with {variant.value}: mean IC accuracy {table.ic_mean():.4f}")


def fit_wise_command(args) -> None:
    """Fit exit-policy weights and write a policy file."""
    cfg = _experiment(args)
    bench = _benchmark_from_file(Path(args.data), args.split)
    model = _load_cascade(Path(args.ckpt_dir))
    order = [Modality.parse(m) for m in args.chain_order.split(",")] if args.chain_order else cfg.chain_order()
    chain = ExitChain.from_order(order)
    mode = LateralMode.parse(args.mode)
    engine = ExitEngine(model, bench.part(args.fit_split or cfg.policy.fit_split))
    policy = get_policy(mode, chain, args.tau if args.tau is not None else cfg.policy.tau, engine=engine)
    save_policy(claim_output(Path(args.out)), policy)
    print(f"Saved {mode.value} policy over {len(chain)} exits → {args.out}")


def infer_command(args) -> None:
    """Run thresholded early-exit inference on a test split."""
    bench = _benchmark_from_file(Path(args.data), args.split)
    model = _load_cascade(Path(args.ckpt_dir))
    policy = load_policy(Path(args.policy))
    if args.tau is not None:
        policy = policy.with_tau(args.tau)
    result = ExitEngine(model, bench.test).evaluate(policy)
    payload = {
        "mode": policy.mode.value,
        "tau": policy.tau,
        "accuracy": result.accuracy,
        "mean_flops": result.mean_flops,
        "exit_histogram": result.exit_histogram,
        "num_samples": result.num_samples,
    }
    if args.out:
        write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=2))


def sweep_command(args) -> None:
    """Sweep the threshold and emit accuracy/FLOPs trade-off CSVs."""
    cfg = _experiment(args)
    bench = _benchmark_from_file(Path(args.data), args.split)
    model = _load_cascade(Path(args.ckpt_dir))
    base = load_policy(Path(args.policy))
    taus = parse_tau_grid(args.tau_grid or cfg.policy.tau_grid)
    modes = [LateralMode.parse(m) for m in args.modes.split(",")] if args.modes else [base.mode]
    out_dir = Path(args.out_dir)
    recorder = ManifestRecorder(out_dir, "sweep", config_hash(cfg), TOOL_VERSION, bench.seed)
    engine = ExitEngine(model, bench.test, flops_of_model(model))
    for mode in modes:
        if mode is base.mode:
            policy = base
        elif mode is LateralMode.WISE and base.weights is None:
            policy = get_policy(mode, base.chain, base.tau, engine=ExitEngine(model, bench.part(cfg.policy.fit_split)))
        else:
            policy = get_policy(mode, base.chain, base.tau, weights=base.weights)
        points = sweep_tradeoff(engine, policy, taus)
        recorder.add(write_csv(out_dir / sweep_csv_name(mode.value), ["tau", "accuracy", "mean_flops", "exit_hist_json"],
                               tradeoff_rows(points), config_hash(cfg)))
        recorder.add(write_csv(out_dir / sweep_csv_name(mode.value, "pareto"),
                               ["tau", "accuracy", "mean_flops", "exit_hist_json"],
                               tradeoff_rows(pareto_front(points)), config_hash(cfg)))
        print(f"{mode.value}: {len(points)} points, "
              f"flops {points[0].mean_flops:.0f}..{points[-1].mean_flops:.0f}")
    recorder.finish()


def probe_flatness_command(args) -> None:
    """Scan the loss landscape around one IC and report its flatness."""
    cfg = _experiment(args)
    ckpt = load_checkpoint(Path(args.ckpt))
    exit_point = ExitPoint.parse(args.ic)
    if exit_point.is_final or exit_point.modality is not ckpt.backbone.modality:
        raise UsageError(f"--ic must name an IC (1-3) of the checkpoint's {ckpt.backbone.modality.value} backbone")
    model = CascadeModel(backbones={ckpt.backbone.modality: ckpt.backbone}, ics={ic.key: ic for ic in ckpt.ics})
    bench = _benchmark_from_file(Path(args.data), args.split)
    dataset = bench.part(args.eval_split or cfg.probe.eval_split)
    radius = args.r if args.r is not None else cfg.probe.radius
    grid = scan_ic_landscape(model, (exit_point.modality, exit_point.index), dataset, radius,
                             args.n or cfg.probe.resolution, args.seed)
    score = flatness(grid, radius)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        recorder = _recorder(out_dir, "probe-flatness", cfg, args.seed)
        name = f"landscape_{exit_point.modality.value}_ic{exit_point.index}.csv"
        recorder.add(write_csv(out_dir / name, GRID_HEADER, grid_rows(grid), config_hash(cfg)))
        recorder.finish()
    print(f"{exit_point.label()}: center loss {grid.center_loss:.6f}, flatness(r={radius}) {score.score:.6f} "
          f"over {score.cells} cells")


def stream_report_command(args) -> None:
    """Latency and iso-latency bandwidth ratios for packet streams."""
    fixture = load_stream_specs(Path(args.specs))
    report = bandwidth_report(fixture.specs, args.reference or fixture.reference)
    if args.out:
        write_json(Path(args.out), report)
    print(json.dumps(report, indent=2))


def _write_study(out_dir: Path, name: str, cfg: ExperimentConfig, result, command: str) -> None:
    recorder = _recorder(out_dir, command, cfg)
    h = config_hash(cfg)
    recorder.add(write_csv(out_dir / f"{name}_runs.csv", result.raw_header, result.raw_rows, h))
    recorder.add(write_csv(out_dir / f"{name}.csv", result.summary_header, result.summary_rows, h))
    recorder.finish()
    for row in result.summary_rows:
        print("  ".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))


def run_table1_command(args) -> None:
    """CE versus PKD per exit over all seeds and splits."""
    cfg = _experiment(args)
    _write_study(Path(args.out_dir), "table1", cfg, run_table1(cfg, load_config().threads), "run-table1")


def run_order_study_command(args) -> None:
    """Teacher-order study without lateral connections."""
    cfg = _experiment(args)
    _write_study(Path(args.out_dir), "order_study", cfg, run_order_study(cfg, load_config().threads), "run-order-study")


def run_wise_study_command(args) -> None:
    """No-lateral, uniform and WISE ensembles at iso-compute."""
    cfg = _experiment(args)
    result = run_wise_study(cfg, tau_override=args.tau, threads=load_config().threads)
    _write_study(Path(args.out_dir), "wise_study", cfg, result, "run-wise-study")


def run_flatness_study_command(args) -> None:
    """Median IC flatness per strategy on one modality."""
    cfg = _experiment(args)
    result = run_flatness_study(cfg, Modality.parse(args.modality))
    _write_study(Path(args.out_dir), "flatness_study", cfg, result, "run-flatness-study")


def frame_ablation_command(args) -> None:
    """Vary one modality's frame count and record accuracy and FLOPs."""
    cfg = _experiment(args)
    axis = Modality.parse(args.axis)
    counts = [int(c) for c in args.counts.split(",")] if args.counts else None
    points = run_frame_ablation(cfg, axis, counts)
    out_dir = Path(args.out_dir)
    recorder = _recorder(out_dir, "frame-ablation", cfg)
    rows = [(axis.value, p.count, p.accuracy, p.model_flops, p.mean_flops) for p in points]
    recorder.add(write_csv(out_dir / f"frame_ablation_{axis.value}.csv",
                           ["axis", "count", "accuracy", "model_flops", "mean_flops"], rows, config_hash(cfg)))
    recorder.finish()
    for p in points:
        print(f"{axis.value} x{p.count}: accuracy {p.accuracy:.4f}, model flops {p.model_flops}, mean flops {p.mean_flops:.0f}")


COMMANDS = {
    "gen-data": gen_data_command,
    "train-backbones": train_backbones_command,
    "train-ics": train_ics_command,
    "fit-wise": fit_wise_command,
    "infer": infer_command,
    "sweep": sweep_command,
    "probe-flatness": probe_flatness_command,
    "stream-report": stream_report_command,
    "run-table1": run_table1_command,
    "run-order-study": run_order_study_command,
    "run-wise-study": run_wise_study_command,
    "run-flatness-study": run_flatness_study_command,
    "frame-ablation": frame_ablation_command,
}


def build_parser() -> argparse.ArgumentParser:
    parser = CascadeArgumentParser(
        prog="cascade-kd",
        description="Early-exit cascades for compressed-video classification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate data, train backbones and ICs
  cascade-kd gen-data --config configs/toy.env --out runs/data.cvkd
  cascade-kd train-backbones --data runs/data.cvkd --out-dir runs/backbones
  cascade-kd train-ics --data runs/data.cvkd --ckpt-dir runs/backbones --out-dir runs/pkd --strategy pkd

  # Fit a policy and sweep the threshold
  cascade-kd fit-wise --ckpt-dir runs/pkd --data runs/data.cvkd --out runs/policy.wise
  cascade-kd sweep --ckpt-dir runs/pkd --data runs/data.cvkd --policy runs/policy.wise --out-dir runs/sweep
        """,
    )
    parser.add_argument("--log-level", default=None, help="Override CASCADE_KD_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", help="Available commands", parser_class=CascadeArgumentParser)

    def sub(name: str, help_text: str, config: bool = True) -> argparse.ArgumentParser:
        p = subparsers.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="Experiment config (dotenv format)")
        return p

    p = sub("gen-data", "Generate a synthetic dataset")
    p.add_argument("--out", required=True, help="Dataset file to write")
    p.add_argument("--seed", type=int, default=0, help="Dataset seed (default: 0)")
    p.add_argument("--preset", choices=["ucf-like", "hmdb-like"], help="Named generator preset instead of the config")

    p = sub("train-backbones", "Pretrain and freeze the three backbones")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="Expected dataset seed; must match the data file")
    p.add_argument("--split", type=int, default=1, choices=[1, 2, 3])

    p = sub("train-ics", "Train ICs on frozen backbones")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-dir", required=True, help="Directory with frozen backbone checkpoints")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--strategy", default="pkd", choices=[v.value for v in StrategyVariant])
    p.add_argument("--schedule", help="PKD phase boundaries as K,T,M")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--split", type=int, default=1, choices=[1, 2, 3])

    p = sub("fit-wise", "Fit exit-policy weights")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--out", required=True, help="Policy file to write")
    p.add_argument("--mode", default="wise", choices=[m.value for m in LateralMode])
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--chain-order", help="Comma-separated modality order, e.g. r,mv,iframe")
    p.add_argument("--fit-split", default=None, choices=["train", "test"])
    p.add_argument("--split", type=int, default=1, choices=[1, 2, 3])

    p = sub("infer", "Evaluate a policy on the test split", config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--split", type=int, default=1, choices=[1, 2, 3])
    p.add_argument("--out", help="Also write the result as JSON")

    p = sub("sweep", "Sweep the threshold")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tau-grid", help="start:stop:step or comma list (default from config)")
    p.add_argument("--modes", help="Comma-separated lateral modes to sweep (default: the policy's)")
    p.add_argument("--split", type=int, default=1, choices=[1, 2, 3])

    p = sub("probe-flatness", "Loss-landscape flatness of one IC")
    p.add_argument("--ckpt", required=True, help="Checkpoint of one modality")
    p.add_argument("--data", required=True)
    p.add_argument("--ic", required=True, help="IC as <modality>:<1-3>, e.g. mv:2")
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-split", choices=["train", "test"], default=None)
    p.add_argument("--split", type=int, default=1, choices=[1, 2, 3])
    p.add_argument("--out-dir", help="Write the grid CSV (alpha, beta, loss) and a run manifest here")

    p = sub("stream-report", "Latency and bandwidth of packet streams", config=False)
    p.add_argument("--specs", required=True, help="JSON stream fixture")
    p.add_argument("--reference", help="Reference stream name (default: the fixture's)")
    p.add_argument("--out", help="Also write the report as JSON")

    for name, help_text in (
        ("run-table1", "CE versus PKD over all seeds and splits"),
        ("run-order-study", "Teacher-order study"),
        ("run-wise-study", "Lateral-mode study at iso-compute"),
    ):
        p = sub(name, help_text)
        p.add_argument("--out-dir", required=True)
        if name == "run-wise-study":
            p.add_argument("--tau", type=float, default=None, help=f"Force one threshold (e.g. {NEVER_EXIT_TAU})")

    p = sub("run-flatness-study", "IC flatness per strategy")
    p.add_argument("--modality", default="iframe", choices=[m.value for m in MODALITIES])
    p.add_argument("--out-dir", required=True)

    p = sub("frame-ablation", "Frame-count ablation on one modality")
    p.add_argument("--axis", required=True, choices=[m.value for m in MODALITIES])
    p.add_argument("--counts", help="Comma-separated frame counts (default from config)")
    p.add_argument("--out-dir", required=True)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    app_config = load_config()
    setup_logging(app_config.logs_dir, args.log_level or app_config.log_level)

    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"cascade-kd {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CascadeError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
