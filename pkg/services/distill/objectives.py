"""Per-IC training losses: label cross-entropy and distillation from a teacher FC."""

from typing import Optional

import numpy as np

from services.distill.base import IcObjective
from services.errors import DistillError
from services.numcore import Tensor, cross_entropy, kd_loss


class CrossEntropyObjective(IcObjective):
    name = "ce"

    def loss(self, student_logits: Tensor, labels: np.ndarray, teacher_logits: Optional[np.ndarray]) -> Tensor:
        return cross_entropy(student_logits, labels)


class DistillationObjective(IcObjective):
    """Pure KD against the active teacher; labels are ignored."""

    name = "kd"

    def __init__(self, temperature: float = 1.0) -> None:
        self.temperature = temperature

    def loss(self, student_logits: Tensor, labels: np.ndarray, teacher_logits: Optional[np.ndarray]) -> Tensor:
        if teacher_logits is None:
            raise DistillError("KD objective called without teacher logits")
        return kd_loss(student_logits, teacher_logits, self.temperature)
