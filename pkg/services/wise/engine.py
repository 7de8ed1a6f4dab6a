"""Thresholded early-exit inference over a frozen cascade."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from services.costmodel import FlopLedger, flops_of_model
from services.errors import IsoComputeError, WiseError
from services.moddata import Modality, ModalityDataset, ModalitySample
from services.netmodel import NUM_BLOCKS, CascadeModel, ic_forward
from services.numcore import stable_softmax
from services.wise.base import NEVER_EXIT_TAU, ExitChain, ExitPoint, ExitPolicy, ExitTrace, PolicyEvaluation
from services.wise.ensemble import combine_batch, ensemble_combine, fit_wise

ISO_TOLERANCE = 0.02
ISO_MAX_ITERATIONS = 40
ISO_SPREAD_LIMIT = 0.05


class _LazyCascade:
    """Evaluates blocks and heads on demand, each at most once."""

    def __init__(self, model: CascadeModel, inputs: Dict[Modality, np.ndarray]) -> None:
        self.model = model
        self.inputs = inputs
        self.activations: Dict[Modality, List[np.ndarray]] = {m: [] for m in model.backbones}
        self.probs: Dict[ExitPoint, np.ndarray] = {}
        self.block_evaluations = 0
        self.head_evaluations = 0

    def _features(self, modality: Modality, depth: int) -> np.ndarray:
        net = self.model.backbones[modality]
        acts = self.activations[modality]
        while len(acts) < depth:
            h = self.inputs[modality] if not acts else acts[-1]
            acts.append(net.run_block(len(acts) + 1, h).data)
            self.block_evaluations += 1
        return acts[depth - 1]

    def exit_probs(self, exit_point: ExitPoint) -> np.ndarray:
        cached = self.probs.get(exit_point)
        if cached is not None:
            return cached
        m = exit_point.modality
        if exit_point.is_final:
            logits = self.model.backbones[m].classify(self._features(m, NUM_BLOCKS))
        else:
            logits = ic_forward(self.model.ic(m, exit_point.index), self._features(m, exit_point.index))
        probs = stable_softmax(logits.data, axis=1)
        self.probs[exit_point] = probs
        self.head_evaluations += 1
        return probs


def infer_early_exit(
    model: CascadeModel,
    policy: ExitPolicy,
    sample: ModalitySample,
    ledger: Optional[FlopLedger] = None,
) -> Tuple[int, ExitTrace]:
    """Walk the chain for one sample and stop at the first confident exit."""
    ledger = ledger or flops_of_model(model)
    costs = ledger.chain_costs(policy.chain.keys())
    lazy = _LazyCascade(model, {m: np.asarray(getattr(sample, m.value))[None, :] for m in model.backbones})
    history: List[np.ndarray] = []
    last = len(policy.chain)
    for position, exit_point in enumerate(policy.chain, start=1):
        history.append(lazy.exit_probs(exit_point)[0])
        dist, confidence = ensemble_combine(np.stack(history), policy.position_weights(position))
        if confidence > policy.tau or position == last:
            prediction = int(np.argmax(dist))
            trace = ExitTrace(
                position=position,
                confidence=confidence,
                prediction=prediction,
                flops=costs[position - 1],
                head_evaluations=lazy.head_evaluations,
                block_evaluations=lazy.block_evaluations,
            )
            return prediction, trace
    raise WiseError("exit chain is empty")


class ExitEngine:
    """Per-exit probabilities for a fixed sample set, computed once and reused across policies."""

    def __init__(self, model: CascadeModel, dataset: ModalityDataset, ledger: Optional[FlopLedger] = None) -> None:
        if len(dataset) == 0:
            raise WiseError("cannot evaluate a policy on an empty sample set")
        self.model = model
        self.dataset = dataset
        self.ledger = ledger or flops_of_model(model)
        self._lazy = _LazyCascade(model, {m: dataset.inputs(m) for m in model.backbones})

    @property
    def head_evaluations(self) -> int:
        return self._lazy.head_evaluations

    def probs(self, exit_point: ExitPoint) -> np.ndarray:
        return self._lazy.exit_probs(exit_point)

    def stacked(self, chain: ExitChain) -> np.ndarray:
        return np.stack([self.probs(e) for e in chain])

    def fit_weights(self, chain: ExitChain):
        return fit_wise(self.stacked(chain), self.dataset.labels)

    def evaluate(self, policy: ExitPolicy) -> PolicyEvaluation:
        chain = policy.chain
        probs = self.stacked(chain)
        costs = np.array(self.ledger.chain_costs(chain.keys()), dtype=np.float64)
        n = len(self.dataset)
        last = len(chain)
        position = np.full(n, last, dtype=np.int64)
        prediction = np.zeros(n, dtype=np.int64)
        undecided = np.ones(n, dtype=bool)
        for L in range(1, last + 1):
            dist = combine_batch(probs[:L], policy.position_weights(L))
            fire = undecided & ((dist.max(axis=1) > policy.tau) | (L == last))
            position[fire] = L
            prediction[fire] = np.argmax(dist[fire], axis=1)
            undecided &= ~fire
            if not undecided.any():
                break
        histogram = np.bincount(position - 1, minlength=last)
        return PolicyEvaluation(
            accuracy=float(np.mean(prediction == self.dataset.labels)),
            mean_flops=float(costs[position - 1].mean()),
            exit_histogram=[int(c) for c in histogram],
            num_samples=n,
        )


def evaluate_policy(
    model: CascadeModel,
    policy: ExitPolicy,
    dataset: ModalityDataset,
    ledger: Optional[FlopLedger] = None,
) -> PolicyEvaluation:
    """Accuracy, mean FLOPs and exit histogram of ``policy`` over ``dataset``."""
    return ExitEngine(model, dataset, ledger).evaluate(policy)


@dataclass(frozen=True)
class IsoComputeResult:
    tau: float
    mean_flops: float
    evaluation: PolicyEvaluation


def iso_compute_threshold_search(
    engine: ExitEngine,
    policy: ExitPolicy,
    target_flops: float,
    tolerance: float = ISO_TOLERANCE,
    max_iterations: int = ISO_MAX_ITERATIONS,
) -> IsoComputeResult:
    """Bisect on the threshold until mean FLOPs lie within ``tolerance`` of the target.

    Raises:
        IsoComputeError: If no threshold lands within tolerance, either because
            the target is outside the reachable FLOP range or because the
            FLOPs-versus-threshold curve steps over the tolerance band
    """
    low = engine.evaluate(policy.with_tau(0.0))
    high = engine.evaluate(policy.with_tau(NEVER_EXIT_TAU))
    lo_cost, hi_cost = low.mean_flops, high.mean_flops
    band = tolerance * target_flops
    if target_flops < lo_cost - band or target_flops > hi_cost + band:
        raise IsoComputeError(
            f"{policy.mode.value}: target {target_flops:.0f} FLOPs outside achievable range "
            f"[{lo_cost:.0f}, {hi_cost:.0f}]"
        )
    if target_flops <= lo_cost:
        return IsoComputeResult(0.0, lo_cost, low)
    if target_flops >= hi_cost:
        return IsoComputeResult(NEVER_EXIT_TAU, hi_cost, high)

    lo_tau, hi_tau = 0.0, NEVER_EXIT_TAU
    best = min(
        (abs(lo_cost - target_flops), 0.0, low),
        (abs(hi_cost - target_flops), NEVER_EXIT_TAU, high),
        key=lambda item: item[0],
    )
    for _ in range(max_iterations):
        mid = 0.5 * (lo_tau + hi_tau)
        result = engine.evaluate(policy.with_tau(mid))
        gap = abs(result.mean_flops - target_flops)
        if gap < best[0]:
            best = (gap, mid, result)
        if gap <= tolerance * target_flops:
            break
        if result.mean_flops < target_flops:
            lo_tau = mid
        else:
            hi_tau = mid
    gap, tau, result = best
    if gap > tolerance * target_flops:
        raise IsoComputeError(
            f"{policy.mode.value}: closest threshold {tau:.6f} gives {result.mean_flops:.0f} FLOPs, "
            f"target {target_flops:.0f} is not reachable within {tolerance:.1%}; "
            f"achievable range [{lo_cost:.0f}, {hi_cost:.0f}]"
        )
    logger.debug(f"{policy.mode.value}: iso-compute threshold {tau:.6f} gives {result.mean_flops:.0f} FLOPs")
    return IsoComputeResult(tau, result.mean_flops, result)


def check_iso_spread(mean_flops: Dict[str, float], limit: float = ISO_SPREAD_LIMIT) -> float:
    """Relative spread of mean FLOPs across policies; raises when it exceeds ``limit``."""
    if not mean_flops:
        raise IsoComputeError("no policies to compare")
    lo, hi = min(mean_flops.values()), max(mean_flops.values())
    spread = 0.0 if hi == lo else (hi - lo) / lo if lo > 0 else float("inf")
    if spread > limit:
        listing = ", ".join(f"{name}={flops:.0f}" for name, flops in mean_flops.items())
        raise IsoComputeError(f"mean FLOPs differ by {spread:.1%} across policies (limit {limit:.0%}): {listing}")
    return spread
