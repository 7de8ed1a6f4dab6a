"""Types, schedules and the loss interface shared by the distillation trainers."""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.errors import DistillError
from services.moddata import Modality
from services.numcore import Tensor


class StrategyVariant(str, Enum):
    CE = "ce"
    IFRAME_KD = "iframe-kd"
    PKD_CURRICULUM = "pkd"
    PKD_ANTI = "pkd-anti"

    @classmethod
    def parse(cls, value: str) -> "StrategyVariant":
        try:
            return cls(value.lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise DistillError(f"Unknown IC strategy: {value!r} (expected one of {choices})")

    @property
    def uses_schedule(self) -> bool:
        return self in (StrategyVariant.PKD_CURRICULUM, StrategyVariant.PKD_ANTI)


@dataclass(frozen=True)
class PkdSchedule:
    """Teacher phases [0, K), [K, T) and [T, M) over M IC epochs."""

    total_epochs: int
    boundary_k: int
    boundary_t: int

    def __post_init__(self) -> None:
        if not self.boundary_k < self.boundary_t:
            raise DistillError(f"schedule requires K < T, got K={self.boundary_k}, T={self.boundary_t}")
        if not 0 < self.boundary_k:
            raise DistillError(f"schedule requires 0 < K, got K={self.boundary_k}")
        if not self.boundary_t < self.total_epochs:
            raise DistillError(f"schedule requires T < M, got T={self.boundary_t}, M={self.total_epochs}")

    @staticmethod
    def even(total_epochs: int) -> "PkdSchedule":
        return PkdSchedule(total_epochs, total_epochs // 3, 2 * total_epochs // 3)

    @staticmethod
    def parse(text: str) -> "PkdSchedule":
        """Parse the ``K,T,M`` form used on the command line."""
        try:
            k, t, m = (int(part) for part in text.split(","))
        except ValueError:
            raise DistillError(f"schedule must look like K,T,M with integers, got {text!r}")
        return PkdSchedule(total_epochs=m, boundary_k=k, boundary_t=t)

    def phase(self, epoch: int) -> int:
        if epoch < self.boundary_k:
            return 0
        if epoch < self.boundary_t:
            return 1
        return 2


@dataclass(frozen=True)
class IcTrainStrategy:
    variant: StrategyVariant
    temperature: float = 1.0
    schedule: Optional[PkdSchedule] = None

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise DistillError(f"KD temperature must be > 0, got {self.temperature}")
        if self.variant.uses_schedule and self.schedule is None:
            raise DistillError(f"strategy {self.variant.value} needs a PkdSchedule")


CURRICULUM_ORDER = (Modality.MV, Modality.R, Modality.IFRAME)
ANTI_CURRICULUM_ORDER = (Modality.IFRAME, Modality.R, Modality.MV)


def teacher_for_epoch(schedule: Optional[PkdSchedule], strategy: IcTrainStrategy, epoch: int) -> Optional[Modality]:
    """Which backbone's FC teaches the ICs at ``epoch``; None means plain CE."""
    variant = strategy.variant
    if variant is StrategyVariant.CE:
        return None
    if variant is StrategyVariant.IFRAME_KD:
        return Modality.IFRAME
    if schedule is None:
        raise DistillError(f"strategy {variant.value} needs a PkdSchedule")
    if not 0 <= epoch < schedule.total_epochs:
        raise DistillError(f"epoch {epoch} outside schedule of {schedule.total_epochs} epochs")
    order = CURRICULUM_ORDER if variant is StrategyVariant.PKD_CURRICULUM else ANTI_CURRICULUM_ORDER
    return order[schedule.phase(epoch)]


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    weight_decay: float = 1e-4
    eps: float = 1e-3
    batch_size: int = 32
    milestones: Tuple[int, ...] = ()
    gamma: float = 0.1


@dataclass
class BackboneTrainResult:
    modality: Modality
    losses: List[float] = field(default_factory=list)
    train_accuracy: float = 0.0
    test_accuracy: Optional[float] = None


@dataclass
class IcTrainResult:
    strategy: IcTrainStrategy
    losses: Dict[Tuple[Modality, int], List[float]] = field(default_factory=dict)
    teachers: List[Optional[Modality]] = field(default_factory=list)


@dataclass
class AccuracyTable:
    """Test accuracy per exit; attach points 1..3 are ICs, 4 is the FC."""

    entries: Dict[Tuple[Modality, int], float]
    num_samples: int

    def get(self, modality: Modality, exit_index: int) -> float:
        return self.entries[(modality, exit_index)]

    def ic_mean(self) -> float:
        values = [acc for (m, idx), acc in self.entries.items() if idx != 4]
        return float(np.mean(values))


class IcObjective(ABC):
    """Loss applied to one IC's logits on a mini-batch."""

    name: str = ""

    @abstractmethod
    def loss(self, student_logits: Tensor, labels: np.ndarray, teacher_logits: Optional[np.ndarray]) -> Tensor:
        """Build the scalar loss node.

        Args:
            student_logits: IC logits for the batch
            labels: true classes for the batch
            teacher_logits: FC logits of the current teacher on the same
                sample indices, or None when no teacher is active

        Returns:
            Scalar Tensor ready for backward()
        """
        pass
