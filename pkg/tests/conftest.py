import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from services.distill import IcTrainStrategy, OptimizerConfig, StrategyVariant, train_backbone, train_ics  # noqa: E402
from services.moddata import MODALITIES, GenSpec, generate, get_split  # noqa: E402
from services.netmodel import attach_all_ics, build_cascade, freeze  # noqa: E402

TINY_WIDTHS = {m: (8, 8, 6, 6) for m in MODALITIES}


def tiny_spec(seed: int = 0, **overrides) -> GenSpec:
    fields = dict(
        seed=seed,
        num_classes=3,
        samples_per_class=8,
        dim_mv=4,
        dim_r=16,
        dim_i=16,
        block_pool=4,
        frames_mv=2,
        frames_r=2,
        frames_i=2,
        signal_scale=0.5,
    )
    fields.update(overrides)
    return GenSpec(**fields)


def tiny_optim(lr: float = 0.01) -> dict:
    return {m: OptimizerConfig(lr=lr, batch_size=8) for m in MODALITIES}


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(tiny_spec())


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    split = get_split(len(tiny_dataset), tiny_dataset.spec.seed, 1)
    return tiny_dataset.subset(split.train), tiny_dataset.subset(split.test)


def make_frozen_cascade(dataset, epochs: int = 5):
    spec = dataset.spec
    model = build_cascade({m: spec.input_dim(m) for m in MODALITIES}, spec.num_classes, seed=0, widths=TINY_WIDTHS)
    for m in MODALITIES:
        train_backbone(model.backbones[m], dataset, epochs, tiny_optim()[m], seed=0)
        freeze(model.backbones[m])
    attach_all_ics(model, seed=0)
    return model


@pytest.fixture(scope="session")
def tiny_cascade(tiny_split):
    """Frozen backbones with CE-trained ICs; treat as read-only."""
    train, _ = tiny_split
    model = make_frozen_cascade(train)
    train_ics(model, train, IcTrainStrategy(StrategyVariant.CE), tiny_optim(), seed=0, epochs=3)
    return model


TINY_CONFIG = """
DATA_NUM_CLASSES=3
DATA_SAMPLES_PER_CLASS=8
DATA_DIM_MV=4
DATA_DIM_R=16
DATA_DIM_I=16
DATA_FRAMES_MV=2
DATA_FRAMES_R=2
DATA_FRAMES_I=2
DATA_SIGNAL_SCALE=0.5
MODEL_WIDTHS_MV=8,8,6,6
MODEL_WIDTHS_R=8,8,6,6
MODEL_WIDTHS_I=8,8,6,6
TRAIN_BATCH_SIZE=8
TRAIN_BACKBONE_EPOCHS=3
TRAIN_BACKBONE_MILESTONES=2
IC_EPOCHS=6
IC_BOUNDARY_K=2
IC_BOUNDARY_T=4
IC_MILESTONES=4
PROBE_RESOLUTION=3
POLICY_TAU_GRID=0,0.5,0.9,1.01
"""
