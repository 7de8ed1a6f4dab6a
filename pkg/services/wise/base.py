"""Exit chains, WISE weights and exit policies."""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from services.errors import WiseError
from services.moddata import Modality
from services.netmodel import FC_EXIT, IC_ATTACH_POINTS

DEFAULT_CHAIN_ORDER = (Modality.R, Modality.MV, Modality.IFRAME)
NEVER_EXIT_TAU = 1.01


@dataclass(frozen=True)
class ExitPoint:
    modality: Modality
    index: int

    def __post_init__(self) -> None:
        if self.index not in (*IC_ATTACH_POINTS, FC_EXIT):
            raise WiseError(f"exit index must be 1..{FC_EXIT}, got {self.index}")

    @property
    def is_final(self) -> bool:
        return self.index == FC_EXIT

    def label(self) -> str:
        return f"{self.modality.value}:{self.index}"

    @staticmethod
    def parse(text: str) -> "ExitPoint":
        try:
            modality, index = text.split(":")
            return ExitPoint(Modality(modality.lower()), FC_EXIT if index.lower() == "fc" else int(index))
        except ValueError:
            raise WiseError(f"exit must look like <modality>:<1-3|4|fc>, got {text!r}")


@dataclass(frozen=True)
class ExitChain:
    exits: Tuple[ExitPoint, ...]

    def __post_init__(self) -> None:
        if not self.exits:
            raise WiseError("exit chain is empty")
        if len(set(self.exits)) != len(self.exits):
            raise WiseError("exit chain lists an exit more than once")

    @staticmethod
    def from_order(order: Sequence[Modality] = DEFAULT_CHAIN_ORDER) -> "ExitChain":
        """All exits of each modality in depth order, modalities in ``order``."""
        return ExitChain(tuple(ExitPoint(m, i) for m in order for i in (*IC_ATTACH_POINTS, FC_EXIT)))

    @staticmethod
    def parse(text: str) -> "ExitChain":
        return ExitChain(tuple(ExitPoint.parse(tok) for tok in text.split()))

    def __len__(self) -> int:
        return len(self.exits)

    def __iter__(self) -> Iterator[ExitPoint]:
        return iter(self.exits)

    def __getitem__(self, i: int) -> ExitPoint:
        return self.exits[i]

    def keys(self) -> List[Tuple[Modality, int]]:
        return [(e.modality, e.index) for e in self.exits]

    def text(self) -> str:
        return " ".join(e.label() for e in self.exits)


class LateralMode(str, Enum):
    WISE = "wise"
    UNIFORM = "uniform"
    NONE = "none"

    @classmethod
    def parse(cls, value: str) -> "LateralMode":
        try:
            return cls(value.lower())
        except ValueError:
            raise WiseError(f"Unknown lateral mode: {value!r} (expected wise, uniform or none)")


@dataclass(frozen=True)
class WiseWeights:
    """``betas[L-1]`` holds the L scaling factors used at chain position L."""

    betas: Tuple[Tuple[float, ...], ...]

    def __post_init__(self) -> None:
        for L, row in enumerate(self.betas, start=1):
            if len(row) != L:
                raise WiseError(f"beta row for position {L} has {len(row)} entries")
            if any(b < 0 or not np.isfinite(b) for b in row):
                raise WiseError(f"beta row for position {L} has negative or non-finite entries")
            if not any(b > 0 for b in row):
                raise WiseError(f"beta row for position {L} is all zero")

    def __len__(self) -> int:
        return len(self.betas)

    def at(self, position: int) -> np.ndarray:
        return np.array(self.betas[position - 1], dtype=np.float64)

    @staticmethod
    def uniform(length: int) -> "WiseWeights":
        return WiseWeights(tuple(tuple([1.0 / L] * L) for L in range(1, length + 1)))


@dataclass(frozen=True)
class ExitPolicy:
    chain: ExitChain
    mode: LateralMode
    tau: float
    weights: Optional[WiseWeights] = None

    def __post_init__(self) -> None:
        if not self.tau >= 0:
            raise WiseError(f"threshold must be >= 0, got {self.tau}")
        if self.mode is LateralMode.WISE:
            if self.weights is None:
                raise WiseError("WISE policy needs fitted weights")
            if len(self.weights) != len(self.chain):
                raise WiseError(f"weights cover {len(self.weights)} positions, chain has {len(self.chain)}")

    def with_tau(self, tau: float) -> "ExitPolicy":
        return replace(self, tau=tau)

    def with_mode(self, mode: LateralMode) -> "ExitPolicy":
        return replace(self, mode=mode)

    def position_weights(self, position: int) -> np.ndarray:
        """Ensemble weights over chain positions 1..``position``."""
        if self.mode is LateralMode.WISE:
            return self.weights.at(position)
        if self.mode is LateralMode.UNIFORM:
            return np.ones(position)
        beta = np.zeros(position)
        beta[-1] = 1.0
        return beta


@dataclass
class ExitTrace:
    position: int
    confidence: float
    prediction: int
    flops: int
    head_evaluations: int = 0
    block_evaluations: int = 0


@dataclass
class PolicyEvaluation:
    accuracy: float
    mean_flops: float
    exit_histogram: List[int] = field(default_factory=list)
    num_samples: int = 0
