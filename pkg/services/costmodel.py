"""Analytic FLOP accounting, threshold sweeps, Pareto fronts and the stream model."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

from loguru import logger

from services.errors import CostModelError
from services.moddata import MODALITIES, GenSpec, Modality
from services.netmodel import FC_EXIT, NUM_BLOCKS, CascadeModel

if TYPE_CHECKING:
    from services.wise import ExitEngine, ExitPolicy

MAX_FRAMES = 16
BANDWIDTH_LABEL = "MODEL-DEPENDENT"


def dense_flops(in_dim: int, out_dim: int) -> int:
    """Multiply-add pairs plus one bias add per output."""
    return 2 * in_dim * out_dim + out_dim


def relu_flops(dim: int) -> int:
    return dim


def sequential_flops(dims: Sequence[int], relu_hidden: bool = True) -> int:
    """Cost of a dense stack ``dims[0] → dims[1] → ...`` with ReLU between layers."""
    total = 0
    for i in range(len(dims) - 1):
        total += dense_flops(dims[i], dims[i + 1])
        if relu_hidden and i < len(dims) - 2:
            total += relu_flops(dims[i + 1])
    return total


@dataclass(frozen=True)
class FlopLedger:
    """Exact per-component FLOP counts of a cascade."""

    blocks: Dict[Modality, Tuple[int, ...]]
    ics: Dict[Tuple[Modality, int], int]
    fcs: Dict[Modality, int]

    def head_cost(self, modality: Modality, exit_index: int) -> int:
        if exit_index == FC_EXIT:
            return self.fcs[modality]
        try:
            return self.ics[(modality, exit_index)]
        except KeyError:
            raise CostModelError(f"ledger has no IC at {modality.value}:{exit_index}")

    def depth(self, exit_index: int) -> int:
        return NUM_BLOCKS if exit_index == FC_EXIT else exit_index

    def chain_costs(self, exits: Sequence[Tuple[Modality, int]]) -> List[int]:
        """Cumulative cost after each exit; blocks shared within a modality are paid once."""
        evaluated = {m: 0 for m in MODALITIES}
        total = 0
        costs = []
        for modality, exit_index in exits:
            need = self.depth(exit_index)
            for block in range(evaluated[modality], need):
                total += self.blocks[modality][block]
            evaluated[modality] = max(evaluated[modality], need)
            total += self.head_cost(modality, exit_index)
            costs.append(total)
        return costs

    def total(self) -> int:
        return sum(sum(b) for b in self.blocks.values()) + sum(self.ics.values()) + sum(self.fcs.values())

    def backbone_total(self, modality: Modality) -> int:
        return sum(self.blocks[modality]) + self.fcs[modality]


def flops_of_model(model: CascadeModel) -> FlopLedger:
    blocks = {}
    fcs = {}
    for m, net in model.backbones.items():
        blocks[m] = tuple(
            dense_flops(net.block_input_dim(b), net.widths[b - 1]) + relu_flops(net.widths[b - 1])
            for b in range(1, NUM_BLOCKS + 1)
        )
        fcs[m] = dense_flops(net.widths[-1], net.num_classes)
    ics = {
        key: sequential_flops([ic.in_dim, ic.hidden_dim, ic.num_classes])
        for key, ic in model.ics.items()
    }
    return FlopLedger(blocks=blocks, ics=ics, fcs=fcs)


@dataclass(frozen=True)
class TradeoffPoint:
    tau: float
    accuracy: float
    mean_flops: float
    exit_histogram: Tuple[int, ...] = ()


def parse_tau_grid(text: str) -> List[float]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise CostModelError(f"tau grid needs step > 0 and stop >= start, got {text!r}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            grid = [round(start + i * step, 10) for i in range(count)]
        else:
            grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CostModelError(f"malformed tau grid {text!r}")
    if not grid:
        raise CostModelError("tau grid is empty")
    return grid


def sweep_tradeoff(engine: "ExitEngine", policy: "ExitPolicy", taus: Sequence[float]) -> List[TradeoffPoint]:
    """Evaluate ``policy`` at every threshold of an ascending grid."""
    if list(taus) != sorted(taus):
        raise CostModelError("tau grid must be sorted ascending")
    points = []
    for tau in taus:
        result = engine.evaluate(policy.with_tau(tau))
        points.append(TradeoffPoint(tau, result.accuracy, result.mean_flops, tuple(result.exit_histogram)))
    logger.info(
        f"Swept {len(points)} thresholds ({policy.mode.value}): "
        f"flops {points[0].mean_flops:.0f} → {points[-1].mean_flops:.0f}"
    )
    return points


def _dominates(a: TradeoffPoint, b: TradeoffPoint) -> bool:
    return (
        a.accuracy >= b.accuracy
        and a.mean_flops <= b.mean_flops
        and (a.accuracy > b.accuracy or a.mean_flops < b.mean_flops)
    )


def pareto_front(points: Sequence[TradeoffPoint]) -> List[TradeoffPoint]:
    """Points not dominated in (higher accuracy, lower FLOPs), ordered by FLOPs."""
    ordered = sorted(points, key=lambda p: (p.mean_flops, -p.accuracy))
    front: List[TradeoffPoint] = []
    for p in ordered:
        if not front or p.accuracy > front[-1].accuracy:
            front.append(p)
        elif p.accuracy == front[-1].accuracy and p.mean_flops == front[-1].mean_flops:
            # exact duplicate, neither dominates the other
            front.append(p)
    return front


def iso_accuracy_cost(points: Sequence[TradeoffPoint], target_accuracy: float) -> TradeoffPoint:
    """Cheapest point whose accuracy reaches ``target_accuracy``."""
    eligible = [p for p in points if p.accuracy >= target_accuracy]
    if not eligible:
        best = max((p.accuracy for p in points), default=float("nan"))
        raise CostModelError(f"no sweep point reaches accuracy {target_accuracy:.4f} (best {best:.4f})")
    return min(eligible, key=lambda p: (p.mean_flops, p.tau))


@dataclass(frozen=True)
class FrameAblationPoint:
    count: int
    accuracy: float
    model_flops: int
    mean_flops: float


AblationRunner = Callable[[GenSpec], Tuple[float, int, float]]


def frame_count_ablation(
    runner: AblationRunner,
    axis: Modality,
    counts: Sequence[int],
    base_spec: GenSpec,
) -> List[FrameAblationPoint]:
    """Vary one modality's frame count, keeping the other two fixed.

    ``runner`` builds, trains and evaluates a cascade for a GenSpec and
    returns (accuracy, full-model FLOPs, mean FLOPs at the chosen threshold).
    """
    counts = list(counts)
    if not counts:
        raise CostModelError("frame ablation needs at least one count")
    if counts != sorted(set(counts)):
        raise CostModelError(f"frame counts must be strictly increasing, got {counts}")
    if counts[0] < 1 or counts[-1] > MAX_FRAMES:
        raise CostModelError(f"frame counts must lie in [1, {MAX_FRAMES}], got {counts}")

    points = []
    for count in counts:
        accuracy, model_flops, mean_flops = runner(base_spec.with_frames(axis, count))
        points.append(FrameAblationPoint(count, accuracy, model_flops, mean_flops))
        logger.info(f"{axis.value} frames={count}: acc {accuracy:.3f}, model flops {model_flops}")
    for prev, cur in zip(points, points[1:]):
        if cur.model_flops <= prev.model_flops:
            raise CostModelError(f"model FLOPs did not grow from {prev.count} to {cur.count} {axis.value} frames")
    return points


@dataclass(frozen=True)
class StreamSpec:
    """Frames a method needs before it can classify, and bytes per frame type."""

    name: str
    gop_frames: int
    n_i: int
    n_mv: int
    n_r: int
    s_i: float
    s_mv: float
    s_r: float

    def __post_init__(self) -> None:
        if min(self.gop_frames, self.n_i, self.n_mv, self.n_r) <= 0:
            raise CostModelError(f"stream {self.name}: frame counts must be positive")
        if min(self.s_i, self.s_mv, self.s_r) <= 0:
            raise CostModelError(f"stream {self.name}: byte sizes must be positive")
        if self.s_i < self.s_mv or self.s_i < self.s_r:
            raise CostModelError(f"stream {self.name}: I-frames must be the largest frame type")

    @property
    def total_bytes(self) -> float:
        return self.n_i * self.s_i + self.n_mv * self.s_mv + self.n_r * self.s_r

    @staticmethod
    def from_dict(data: Dict[str, object]) -> "StreamSpec":
        try:
            return StreamSpec(
                name=str(data["name"]),
                gop_frames=int(data["gop_frames"]),
                n_i=int(data["n_i"]),
                n_mv=int(data["n_mv"]),
                n_r=int(data["n_r"]),
                s_i=float(data["s_i"]),
                s_mv=float(data["s_mv"]),
                s_r=float(data["s_r"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CostModelError(f"malformed stream spec {data!r}: {e}")


def relative_latency(spec_a: StreamSpec, spec_b: StreamSpec) -> float:
    """I-frames arrive once per GOP, so latency scales with the I-frame count."""
    return spec_a.n_i / spec_b.n_i


def bandwidth_report(specs: Sequence[StreamSpec], reference: str) -> Dict[str, object]:
    by_name = {s.name: s for s in specs}
    if reference not in by_name:
        raise CostModelError(f"reference stream {reference!r} not among {sorted(by_name)}")
    ref = by_name[reference]
    rows = []
    for spec in specs:
        latency = relative_latency(spec, ref)
        rows.append(
            {
                "name": spec.name,
                "frames": {"i": spec.n_i, "mv": spec.n_mv, "r": spec.n_r},
                "total_bytes": spec.total_bytes,
                "relative_latency": latency,
                "iso_latency_bandwidth_ratio": (spec.total_bytes / ref.total_bytes) / latency,
            }
        )
    return {"reference": reference, "bandwidth_model": BANDWIDTH_LABEL, "rows": rows}


@dataclass
class StreamFixture:
    reference: str
    specs: List[StreamSpec] = field(default_factory=list)


def load_stream_specs(path: Path) -> StreamFixture:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CostModelError(f"cannot read stream specs {path}: {e}")
    specs = [StreamSpec.from_dict(item) for item in data.get("streams", [])]
    if not specs:
        raise CostModelError(f"{path}: no streams defined")
    return StreamFixture(reference=str(data.get("reference", specs[0].name)), specs=specs)


def sweep_csv_name(mode: str, suffix: Optional[str] = None) -> str:
    return f"tradeoff_{mode}{'_' + suffix if suffix else ''}.csv"
