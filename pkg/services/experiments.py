"""Experiment recipes: benchmarks, strategy studies, the WISE study and ablations.

Every study iterates over the configured seeds and splits. Backbones are
trained once per (seed, split) and shared, frozen, by every IC strategy of
that run; ICs are re-initialized from the run seed for each strategy so the
strategies differ only in their training signal.
"""

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from services.config import ExperimentConfig
from services.costmodel import FrameAblationPoint, flops_of_model, frame_count_ablation
from services.distill import AccuracyTable, StrategyVariant, evaluate_ics, train_backbone, train_ics
from services.moddata import MODALITIES, GenSpec, Modality, ModalityDataset, generate, get_split
from services.netmodel import FC_EXIT, CascadeModel, attach_all_ics, build_cascade, freeze
from services.probe import flatness, scan_ic_landscape
from services.reports import summarize
from services.wise import (
    ExitChain,
    ExitEngine,
    LateralMode,
    check_iso_spread,
    get_policy,
    iso_compute_threshold_search,
)
from services.workers import run_ordered


@dataclass
class Benchmark:
    seed: int
    split_id: int
    train: ModalityDataset
    test: ModalityDataset

    def part(self, name: str) -> ModalityDataset:
        return self.train if name == "train" else self.test


def build_benchmark(cfg: ExperimentConfig, seed: int, split_id: int, spec: Optional[GenSpec] = None) -> Benchmark:
    spec = spec or cfg.gen_spec(seed)
    dataset = generate(spec)
    split = get_split(len(dataset), spec.seed, split_id)
    return Benchmark(seed, split_id, dataset.subset(split.train), dataset.subset(split.test))


def train_backbones(cfg: ExperimentConfig, bench: Benchmark, threads: int = 1) -> CascadeModel:
    """Pretrain the three backbones concurrently, then freeze them."""
    spec = bench.train.spec
    model = build_cascade(
        {m: spec.input_dim(m) for m in MODALITIES},
        spec.num_classes,
        seed=bench.seed,
        widths=cfg.model.widths(),
    )
    optim = cfg.backbone_optim()

    def train_one(m: Modality):
        return train_backbone(
            model.backbones[m], bench.train, cfg.training.backbone_epochs, optim[m], seed=bench.seed, test_set=bench.test
        )

    run_ordered(train_one, MODALITIES, threads)
    for net in model.backbones.values():
        freeze(net)
    return model


def with_fresh_ics(cfg: ExperimentConfig, backbones: CascadeModel, seed: int) -> CascadeModel:
    model = CascadeModel(backbones=backbones.backbones)
    attach_all_ics(model, seed=seed, hidden_ratio=cfg.model.ic_hidden_ratio)
    return model


def train_strategy(
    cfg: ExperimentConfig, backbones: CascadeModel, bench: Benchmark, variant: StrategyVariant
) -> Tuple[CascadeModel, AccuracyTable]:
    model = with_fresh_ics(cfg, backbones, bench.seed)
    strategy = cfg.strategy(variant)
    train_ics(
        model,
        bench.train,
        strategy,
        cfg.ic_optim(),
        seed=bench.seed,
        epochs=cfg.ics.epochs,
        reset_on_phase=cfg.ics.reset_on_phase,
    )
    return model, evaluate_ics(model, bench.test)


@dataclass
class StudyResult:
    raw_header: List[str]
    raw_rows: List[Tuple] = field(default_factory=list)
    summary_header: List[str] = field(default_factory=list)
    summary_rows: List[Tuple] = field(default_factory=list)


RAW_HEADER = ["dataset_seed", "split", "strategy", "modality", "ic_index", "accuracy"]
SUMMARY_HEADER = ["strategy", "modality", "ic_index", "mean", "std", "n"]


def _runs(cfg: ExperimentConfig) -> List[Tuple[int, int]]:
    return [(seed, split) for seed in cfg.run.seeds for split in cfg.run.splits]


def run_strategy_study(
    cfg: ExperimentConfig,
    variants: Sequence[StrategyVariant],
    diff: Optional[Tuple[StrategyVariant, StrategyVariant]] = None,
    threads: int = 1,
) -> StudyResult:
    """Per-exit test accuracy of each strategy, aggregated over seeds and splits.

    ``diff=(a, b)`` adds rows with the paired difference a - b.
    """

    def one_run(run: Tuple[int, int]) -> List[Tuple]:
        seed, split = run
        bench = build_benchmark(cfg, seed, split)
        backbones = train_backbones(cfg, bench)
        rows = []
        for variant in variants:
            _, table = train_strategy(cfg, backbones, bench, variant)
            for (m, idx), acc in table.entries.items():
                rows.append((seed, split, variant.value, m.value, idx, acc))
            logger.info(f"seed={seed} split={split} {variant.value}: mean IC acc {table.ic_mean():.3f}")
        return rows

    result = StudyResult(raw_header=RAW_HEADER, summary_header=SUMMARY_HEADER)
    for rows in run_ordered(one_run, _runs(cfg), threads):
        result.raw_rows.extend(rows)

    cells: Dict[Tuple[str, str, int], List[float]] = {}
    for seed, split, strategy, modality, idx, acc in result.raw_rows:
        cells.setdefault((strategy, modality, idx), []).append(acc)
    for variant in variants:
        for m in MODALITIES:
            for idx in (1, 2, 3, FC_EXIT):
                values = cells.get((variant.value, m.value, idx))
                if values:
                    result.summary_rows.append((variant.value, m.value, idx, *summarize(values)))

    if diff is not None:
        a, b = diff
        for m in MODALITIES:
            for idx in (1, 2, 3, FC_EXIT):
                va, vb = cells.get((a.value, m.value, idx)), cells.get((b.value, m.value, idx))
                if va and vb:
                    paired = [x - y for x, y in zip(va, vb)]
                    result.summary_rows.append((f"diff {a.value}-{b.value}", m.value, idx, *summarize(paired)))
    return result


def run_table1(cfg: ExperimentConfig, threads: int = 1) -> StudyResult:
    """CE versus PKD curriculum per exit, with a PKD - CE difference row."""
    return run_strategy_study(
        cfg,
        [StrategyVariant.CE, StrategyVariant.PKD_CURRICULUM],
        diff=(StrategyVariant.PKD_CURRICULUM, StrategyVariant.CE),
        threads=threads,
    )


def run_order_study(cfg: ExperimentConfig, threads: int = 1) -> StudyResult:
    """I-frame KD versus curriculum versus anti-curriculum, each IC scored on its own."""
    return run_strategy_study(
        cfg,
        [StrategyVariant.IFRAME_KD, StrategyVariant.PKD_CURRICULUM, StrategyVariant.PKD_ANTI],
        threads=threads,
    )


WISE_RAW_HEADER = ["dataset_seed", "split", "mode", "tau", "accuracy", "mean_flops", "exit_hist_json"]
WISE_SUMMARY_HEADER = ["mode", "accuracy_mean", "accuracy_std", "mean_flops", "flops_std", "n"]
WISE_MODES = (LateralMode.NONE, LateralMode.UNIFORM, LateralMode.WISE)


@dataclass
class WiseRun:
    seed: int
    split: int
    mode: LateralMode
    tau: float
    accuracy: float
    mean_flops: float
    exit_histogram: List[int]


def wise_study_run(
    cfg: ExperimentConfig, bench: Benchmark, model: CascadeModel, tau_override: Optional[float] = None
) -> List[WiseRun]:
    """Evaluate the three lateral modes on one trained cascade at matched mean FLOPs."""
    chain = ExitChain.from_order(cfg.chain_order())
    ledger = flops_of_model(model)
    fit_engine = ExitEngine(model, bench.part(cfg.policy.fit_split), ledger)
    test_engine = ExitEngine(model, bench.test, ledger)
    target = cfg.policy.iso_target_fraction * ledger.total()

    runs = []
    for mode in WISE_MODES:
        policy = get_policy(mode, chain, cfg.policy.tau, engine=fit_engine)
        if tau_override is not None:
            tau = tau_override
            evaluation = test_engine.evaluate(policy.with_tau(tau))
        else:
            iso = iso_compute_threshold_search(test_engine, policy, target, tolerance=cfg.policy.iso_tolerance)
            tau, evaluation = iso.tau, iso.evaluation
        runs.append(
            WiseRun(bench.seed, bench.split_id, mode, tau, evaluation.accuracy, evaluation.mean_flops, evaluation.exit_histogram)
        )
    return runs


def run_wise_study(cfg: ExperimentConfig, tau_override: Optional[float] = None, threads: int = 1) -> StudyResult:
    """No-lateral, uniform and WISE ensembles at iso-compute over all runs."""

    def one_run(run: Tuple[int, int]) -> List[WiseRun]:
        seed, split = run
        bench = build_benchmark(cfg, seed, split)
        backbones = train_backbones(cfg, bench)
        model, _ = train_strategy(cfg, backbones, bench, StrategyVariant.parse(cfg.ics.strategy))
        return wise_study_run(cfg, bench, model, tau_override)

    result = StudyResult(raw_header=WISE_RAW_HEADER, summary_header=WISE_SUMMARY_HEADER)
    all_runs = [r for runs in run_ordered(one_run, _runs(cfg), threads) for r in runs]
    for r in all_runs:
        result.raw_rows.append(
            (r.seed, r.split, r.mode.value, r.tau, r.accuracy, r.mean_flops, json.dumps(r.exit_histogram))
        )
    means: Dict[str, float] = {}
    for mode in WISE_MODES:
        acc = [r.accuracy for r in all_runs if r.mode is mode]
        flops = [r.mean_flops for r in all_runs if r.mode is mode]
        acc_mean, acc_std, n = summarize(acc)
        flops_mean, flops_std, _ = summarize(flops)
        means[mode.value] = flops_mean
        result.summary_rows.append((mode.value, acc_mean, acc_std, flops_mean, flops_std, n))
    if tau_override is None:
        spread = check_iso_spread(means)
        logger.info(f"WISE study: mean FLOPs spread {spread:.2%} across lateral modes")
    return result


def make_ablation_runner(cfg: ExperimentConfig, tau: Optional[float] = None):
    """Runner for frame_count_ablation: accuracy of the WISE cascade at a near-one threshold."""
    tau = cfg.ablation.tau if tau is None else tau
    chain = ExitChain.from_order(cfg.chain_order())

    def runner(spec: GenSpec) -> Tuple[float, int, float]:
        accs, flops = [], []
        model_flops = 0
        for seed, split in _runs(cfg):
            bench = build_benchmark(cfg, seed, split, spec=replace(spec, seed=seed))
            backbones = train_backbones(cfg, bench)
            model, _ = train_strategy(cfg, backbones, bench, StrategyVariant.parse(cfg.ics.strategy))
            ledger = flops_of_model(model)
            fit_engine = ExitEngine(model, bench.part(cfg.policy.fit_split), ledger)
            policy = get_policy(LateralMode.WISE, chain, tau, engine=fit_engine)
            evaluation = ExitEngine(model, bench.test, ledger).evaluate(policy)
            accs.append(evaluation.accuracy)
            flops.append(evaluation.mean_flops)
            model_flops = ledger.total()
        return float(np.mean(accs)), model_flops, float(np.mean(flops))

    return runner


def run_frame_ablation(
    cfg: ExperimentConfig, axis: Modality, counts: Optional[Sequence[int]] = None
) -> List[FrameAblationPoint]:
    counts = list(counts or cfg.ablation.counts)
    return frame_count_ablation(make_ablation_runner(cfg), axis, counts, cfg.data)


FLATNESS_HEADER = ["dataset_seed", "split", "strategy", "modality", "ic_index", "radius", "flatness"]


def run_flatness_study(
    cfg: ExperimentConfig,
    modality: Modality = Modality.IFRAME,
    variants: Sequence[StrategyVariant] = (StrategyVariant.CE, StrategyVariant.PKD_CURRICULUM),
) -> StudyResult:
    """Flatness of each IC of ``modality`` under each strategy."""
    result = StudyResult(raw_header=FLATNESS_HEADER, summary_header=["strategy", "ic_index", "median", "mean", "n"])
    radius = cfg.probe.radius
    for seed, split in _runs(cfg):
        bench = build_benchmark(cfg, seed, split)
        backbones = train_backbones(cfg, bench)
        for variant in variants:
            model, _ = train_strategy(cfg, backbones, bench, variant)
            for point in (1, 2, 3):
                grid = scan_ic_landscape(
                    model, (modality, point), bench.part(cfg.probe.eval_split), radius, cfg.probe.resolution, seed
                )
                score = flatness(grid, radius).score
                result.raw_rows.append((seed, split, variant.value, modality.value, point, radius, score))
    for variant in variants:
        for point in (1, 2, 3):
            scores = [row[6] for row in result.raw_rows if row[2] == variant.value and row[4] == point]
            result.summary_rows.append((variant.value, point, float(np.median(scores)), float(np.mean(scores)), len(scores)))
    return result

