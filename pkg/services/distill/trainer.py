"""Backbone pretraining, IC training under CE / KD / PKD, and IC evaluation."""

from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from services.distill.base import (
    AccuracyTable,
    BackboneTrainResult,
    IcTrainResult,
    IcTrainStrategy,
    OptimizerConfig,
    StrategyVariant,
    teacher_for_epoch,
)
from services.errors import DistillError
from services.moddata import MODALITIES, Modality, ModalityDataset
from services.netmodel import FC_EXIT, IC_ATTACH_POINTS, BackboneNet, CascadeModel, ic_forward
from services.numcore import AdamState, adam_step, backward, cross_entropy, lr_schedule
from services.rng import philox

LOSS_WINDOW = 20


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _batches(n: int, batch_size: int, seed: int, *stream: object) -> List[np.ndarray]:
    perm = philox(seed, *stream).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_window(losses: List[float], label: str) -> None:
    if len(losses) > LOSS_WINDOW and losses[-1] > losses[-1 - LOSS_WINDOW]:
        logger.warning(
            f"{label}: loss rose over the last {LOSS_WINDOW} epochs "
            f"({losses[-1 - LOSS_WINDOW]:.4f} → {losses[-1]:.4f})"
        )


def train_backbone(
    net: BackboneNet,
    dataset: ModalityDataset,
    epochs: int,
    optim: OptimizerConfig,
    seed: int = 0,
    test_set: Optional[ModalityDataset] = None,
) -> BackboneTrainResult:
    """Minimize CE of the backbone FC on ``dataset``'s own modality.

    Args:
        net: Unfrozen backbone; left unfrozen on return
        dataset: Training samples
        epochs: Number of passes over ``dataset``; 0 leaves ``net`` untouched
        optim: Adam settings and step schedule
        seed: Seeds the per-epoch batch order
        test_set: If given, test accuracy is reported in the result

    Returns:
        BackboneTrainResult with the per-epoch mean loss trace

    Raises:
        DistillError: If the net is frozen or the loss becomes NaN
    """
    if net.frozen:
        raise DistillError(f"{net.modality.value} backbone is frozen; refusing to train it")
    m = net.modality
    x = dataset.inputs(m)
    y = dataset.labels
    params = net.parameters()
    state = AdamState(lr=optim.lr, weight_decay=optim.weight_decay, eps=optim.eps)
    result = BackboneTrainResult(modality=m)

    for epoch in range(epochs):
        state.lr = lr_schedule(optim.lr, epoch, optim.milestones, optim.gamma)
        total = 0.0
        for idx in _batches(len(y), optim.batch_size, seed, "batches", "backbone", m.value, epoch):
            loss = cross_entropy(net.forward(x[idx]), y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise DistillError(f"{m.value} backbone: non-finite loss {value} at epoch {epoch} (lr={state.lr:g})")
            backward(loss)
            adam_step(state, params)
            total += value * len(idx)
        result.losses.append(total / len(y))
        logger.debug(f"{m.value} backbone epoch {epoch}: loss={result.losses[-1]:.4f} lr={state.lr:g}")
        _check_window(result.losses, f"{m.value} backbone")

    result.train_accuracy = _accuracy(net.forward(x).data, y)
    if test_set is not None:
        result.test_accuracy = _accuracy(net.forward(test_set.inputs(m)).data, test_set.labels)
    logger.info(
        f"{m.value} backbone trained for {epochs} epochs: train acc {result.train_accuracy:.3f}"
        + (f", test acc {result.test_accuracy:.3f}" if result.test_accuracy is not None else "")
    )
    return result


def _features(model: CascadeModel, dataset: ModalityDataset) -> Tuple[Dict[Modality, list], Dict[Modality, np.ndarray]]:
    # Every backbone sees only its own modality input
    taps: Dict[Modality, list] = {}
    logits: Dict[Modality, np.ndarray] = {}
    for m in MODALITIES:
        layer_out, fc = model.backbones[m].forward_with_taps(dataset.inputs(m))
        taps[m] = [t.data for t in layer_out]
        logits[m] = fc.data
    return taps, logits


def train_ics(
    model: CascadeModel,
    dataset: ModalityDataset,
    strategy: IcTrainStrategy,
    optim: Dict[Modality, OptimizerConfig],
    seed: int = 0,
    epochs: Optional[int] = None,
    reset_on_phase: bool = True,
) -> IcTrainResult:
    """Train all attached ICs against frozen backbones.

    Each IC has its own Adam state and loss, so gradients never mix. KD
    strategies take the teacher from ``teacher_for_epoch``; the teacher FC
    logits are computed on the teacher's own modality for the same sample
    indices as the student batch.

    ``epochs`` overrides the schedule length; 0 trains nothing. With
    ``reset_on_phase`` the Adam moments restart at every teacher change.
    """
    from services.distill import get_objective

    for m, net in model.backbones.items():
        if not net.frozen:
            raise DistillError(f"{m.value} backbone is not frozen; freeze backbones before training ICs")
    if not model.ics:
        raise DistillError("no ICs attached to the model")

    schedule = strategy.schedule
    if epochs is None:
        if schedule is None:
            raise DistillError(f"strategy {strategy.variant.value} needs an explicit epoch count")
        epochs = schedule.total_epochs
    if schedule is not None and epochs > schedule.total_epochs:
        raise DistillError(f"{epochs} epochs exceed the schedule length {schedule.total_epochs}")

    ce = get_objective(StrategyVariant.CE)
    kd = get_objective(strategy.variant, strategy.temperature)
    taps, teacher_logits = _features(model, dataset)
    y = dataset.labels
    states = {
        ic.key: AdamState(lr=optim[ic.modality].lr, weight_decay=optim[ic.modality].weight_decay, eps=optim[ic.modality].eps)
        for ic in model.iter_ics()
    }
    result = IcTrainResult(strategy=strategy, losses={key: [] for key in states})
    batch_size = min(cfg.batch_size for cfg in optim.values())
    previous: Optional[Modality] = None

    for epoch in range(epochs):
        teacher = teacher_for_epoch(schedule, strategy, epoch)
        if epoch > 0 and teacher != previous and reset_on_phase:
            logger.info(f"IC phase change at epoch {epoch}: teacher {previous} → {teacher}; resetting Adam moments")
            for state in states.values():
                state.reset_moments()
        previous = teacher
        result.teachers.append(teacher)
        objective = ce if teacher is None else kd

        totals = {key: 0.0 for key in states}
        for idx in _batches(len(y), batch_size, seed, "batches", "ics", epoch):
            target = None if teacher is None else teacher_logits[teacher][idx]
            for ic in model.iter_ics():
                state = states[ic.key]
                cfg = optim[ic.modality]
                state.lr = lr_schedule(cfg.lr, epoch, cfg.milestones, cfg.gamma)
                loss = objective.loss(ic_forward(ic, taps[ic.modality][ic.attach_point - 1][idx]), y[idx], target)
                value = loss.item()
                if not np.isfinite(value):
                    raise DistillError(f"IC {ic.modality.value}:{ic.attach_point}: non-finite loss at epoch {epoch}")
                backward(loss)
                adam_step(state, ic.parameters())
                totals[ic.key] += value * len(idx)
        for key, total in totals.items():
            result.losses[key].append(total / len(y))
        logger.debug(f"IC epoch {epoch} ({strategy.variant.value}, teacher={teacher}): mean loss "
                     f"{np.mean([v[-1] for v in result.losses.values()]):.4f}")

    logger.info(f"Trained {len(states)} ICs with {strategy.variant.value} for {epochs} epochs")
    return result


def evaluate_ics(model: CascadeModel, dataset: ModalityDataset) -> AccuracyTable:
    """Argmax accuracy of all nine ICs and the three FCs on ``dataset``."""
    if len(dataset) == 0:
        raise DistillError("cannot evaluate on an empty test set")
    taps, logits = _features(model, dataset)
    y = dataset.labels
    entries: Dict[Tuple[Modality, int], float] = {}
    for m in MODALITIES:
        for point in IC_ATTACH_POINTS:
            if (m, point) in model.ics:
                entries[(m, point)] = _accuracy(ic_forward(model.ics[(m, point)], taps[m][point - 1]).data, y)
        entries[(m, FC_EXIT)] = _accuracy(logits[m], y)
    return AccuracyTable(entries=entries, num_samples=len(dataset))
