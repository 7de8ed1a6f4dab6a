"""IC training strategies: CE, I-frame KD and progressive KD."""

from services.distill.base import (
    AccuracyTable,
    BackboneTrainResult,
    IcObjective,
    IcTrainResult,
    IcTrainStrategy,
    OptimizerConfig,
    PkdSchedule,
    StrategyVariant,
    teacher_for_epoch,
)


def get_objective(variant: StrategyVariant, temperature: float = 1.0) -> IcObjective:
    """Get the IC loss used while a strategy has an active teacher."""
    if variant is StrategyVariant.CE:
        from services.distill.objectives import CrossEntropyObjective
        return CrossEntropyObjective()
    elif variant in (StrategyVariant.IFRAME_KD, StrategyVariant.PKD_CURRICULUM, StrategyVariant.PKD_ANTI):
        from services.distill.objectives import DistillationObjective
        return DistillationObjective(temperature)
    raise ValueError(f"Unknown IC strategy: {variant}")


from services.distill.trainer import evaluate_ics, train_backbone, train_ics  # noqa: E402

__all__ = [
    "AccuracyTable",
    "BackboneTrainResult",
    "IcObjective",
    "IcTrainResult",
    "IcTrainStrategy",
    "OptimizerConfig",
    "PkdSchedule",
    "StrategyVariant",
    "evaluate_ics",
    "get_objective",
    "teacher_for_epoch",
    "train_backbone",
    "train_ics",
]
