"""Per-modality block backbones, internal classifiers and checkpoints."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from services.binio import BinaryReader, BinaryWriter
from services.errors import FormatError, ModelError
from services.moddata import MODALITIES, Modality
from services.numcore import Tensor, dense_forward, relu
from services.rng import philox

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1
NUM_BLOCKS = 4
IC_ATTACH_POINTS = (1, 2, 3)
FC_EXIT = 4

DEFAULT_WIDTHS = {
    Modality.MV: (64, 64, 32, 32),
    Modality.R: (64, 64, 32, 32),
    Modality.IFRAME: (128, 96, 64, 64),
}

Input = Union[np.ndarray, Tensor]


def _init_dense(seed: int, scope: str, in_dim: int, out_dim: int) -> Tuple[Tensor, Tensor]:
    # He-normal weights, zero bias
    rng = philox(seed, "init", scope)
    W = Tensor(rng.standard_normal((in_dim, out_dim)) * np.sqrt(2.0 / in_dim), requires_grad=True, name=f"{scope}.W")
    b = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{scope}.b")
    return W, b


class BackboneNet:
    """Four dense+ReLU blocks followed by a k-way final classifier (FC)."""

    def __init__(
        self,
        modality: Modality,
        input_dim: int,
        widths: Sequence[int],
        num_classes: int,
        seed: int = 0,
    ) -> None:
        if len(widths) != NUM_BLOCKS:
            raise ModelError(f"backbone needs exactly {NUM_BLOCKS} block widths, got {len(widths)}")
        self.modality = modality
        self.input_dim = input_dim
        self.widths = tuple(int(w) for w in widths)
        self.num_classes = num_classes
        self.frozen = False
        self.blocks: List[Tuple[Tensor, Tensor]] = []
        prev = input_dim
        for i, width in enumerate(self.widths, start=1):
            self.blocks.append(_init_dense(seed, f"{modality.value}.block{i}", prev, width))
            prev = width
        self.fc = _init_dense(seed, f"{modality.value}.fc", prev, num_classes)

    def parameters(self) -> List[Tensor]:
        params = [t for pair in self.blocks for t in pair]
        params.extend(self.fc)
        return params

    def block_input_dim(self, block: int) -> int:
        return self.input_dim if block == 1 else self.widths[block - 2]

    def run_block(self, block: int, x: Input) -> Tensor:
        W, b = self.blocks[block - 1]
        return relu(dense_forward(x, W, b))

    def _check_input(self, x: Input) -> None:
        shape = x.shape if isinstance(x, Tensor) else np.shape(x)
        if len(shape) != 2 or shape[1] != self.input_dim:
            raise ModelError(f"{self.modality.value} backbone expects [batch, {self.input_dim}] input, got {tuple(shape)}")

    def forward_with_taps(self, x: Input) -> Tuple[List[Tensor], Tensor]:
        """Activations after blocks 1..4 and the FC logits."""
        self._check_input(x)
        taps = []
        h: Input = x
        for block in range(1, NUM_BLOCKS + 1):
            h = self.run_block(block, h)
            taps.append(h)
        W, b = self.fc
        return taps, dense_forward(h, W, b)

    def forward(self, x: Input) -> Tensor:
        return self.forward_with_taps(x)[1]

    def classify(self, features: Input) -> Tensor:
        W, b = self.fc
        return dense_forward(features, W, b)


class InternalClassifier:
    """Early-exit head: dense projection, ReLU, dense k-way classifier."""

    def __init__(
        self,
        modality: Modality,
        attach_point: int,
        in_dim: int,
        hidden_dim: int,
        num_classes: int,
        seed: int = 0,
    ) -> None:
        if attach_point not in IC_ATTACH_POINTS:
            raise ModelError(f"IC attach point must be one of {IC_ATTACH_POINTS}, got {attach_point}")
        self.modality = modality
        self.attach_point = attach_point
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        scope = f"{modality.value}.ic{attach_point}"
        self.proj = _init_dense(seed, f"{scope}.proj", in_dim, hidden_dim)
        self.head = _init_dense(seed, f"{scope}.head", hidden_dim, num_classes)

    @property
    def key(self) -> Tuple[Modality, int]:
        return self.modality, self.attach_point

    def parameters(self) -> List[Tensor]:
        return [*self.proj, *self.head]

    def forward(self, features: Input) -> Tensor:
        shape = features.shape if isinstance(features, Tensor) else np.shape(features)
        if len(shape) != 2 or shape[1] != self.in_dim:
            raise ModelError(
                f"{self.modality.value} IC{self.attach_point} expects [batch, {self.in_dim}] features, got {tuple(shape)}"
            )
        h = relu(dense_forward(features, *self.proj))
        return dense_forward(h, *self.head)


def ic_forward(ic: InternalClassifier, tap_features: Input) -> Tensor:
    return ic.forward(tap_features)


def freeze(net: BackboneNet) -> None:
    """Freeze every backbone parameter; the FC stays usable as a teacher."""
    for p in net.parameters():
        p.freeze()
    net.frozen = True


def attach_ics(net: BackboneNet, seed: int = 0, hidden_ratio: float = 0.5) -> List[InternalClassifier]:
    ics = []
    for point in IC_ATTACH_POINTS:
        in_dim = net.widths[point - 1]
        hidden = max(1, int(in_dim * hidden_ratio))
        ics.append(InternalClassifier(net.modality, point, in_dim, hidden, net.num_classes, seed=seed))
    return ics


@dataclass
class CascadeModel:
    """Three backbones and their nine ICs; exits 1..3 are ICs, exit 4 is the FC."""

    backbones: Dict[Modality, BackboneNet]
    ics: Dict[Tuple[Modality, int], InternalClassifier] = field(default_factory=dict)

    def ic(self, modality: Modality, attach_point: int) -> InternalClassifier:
        try:
            return self.ics[(modality, attach_point)]
        except KeyError:
            raise ModelError(f"no IC attached at {modality.value}:{attach_point}")

    def iter_ics(self) -> Iterator[InternalClassifier]:
        for m in MODALITIES:
            for point in IC_ATTACH_POINTS:
                if (m, point) in self.ics:
                    yield self.ics[(m, point)]

    @property
    def num_classes(self) -> int:
        return next(iter(self.backbones.values())).num_classes


def build_cascade(
    input_dims: Dict[Modality, int],
    num_classes: int,
    seed: int,
    widths: Optional[Dict[Modality, Sequence[int]]] = None,
) -> CascadeModel:
    """Backbones only; ICs are attached with attach_all_ics once the backbones are frozen."""
    widths = widths or DEFAULT_WIDTHS
    backbones = {m: BackboneNet(m, input_dims[m], widths[m], num_classes, seed=seed) for m in MODALITIES}
    return CascadeModel(backbones=backbones)


def attach_all_ics(model: CascadeModel, seed: int, hidden_ratio: float = 0.5) -> None:
    model.ics = {}
    for m in MODALITIES:
        for ic in attach_ics(model.backbones[m], seed=seed, hidden_ratio=hidden_ratio):
            model.ics[ic.key] = ic


@dataclass
class Checkpoint:
    backbone: BackboneNet
    ics: List[InternalClassifier]
    metadata: Dict[str, object]


def _architecture(net: BackboneNet, ics: Sequence[InternalClassifier]) -> Dict[str, object]:
    return {
        "modality": net.modality.value,
        "input_dim": net.input_dim,
        "widths": list(net.widths),
        "num_classes": net.num_classes,
        "ics": [{"attach_point": ic.attach_point, "hidden_dim": ic.hidden_dim} for ic in ics],
    }


def save_checkpoint(
    path: Path,
    net: BackboneNet,
    ics: Sequence[InternalClassifier] = (),
    metadata: Optional[Dict[str, object]] = None,
) -> None:
    meta = {"architecture": _architecture(net, ics), "frozen": net.frozen, "training": dict(metadata or {})}
    tensors = net.parameters() + [p for ic in ics for p in ic.parameters()]

    w = BinaryWriter()
    w.raw(CHECKPOINT_MAGIC)
    w.u16(CHECKPOINT_VERSION)
    w.text(json.dumps(meta, sort_keys=True), width="u32")
    w.u16(len(tensors))
    for t in tensors:
        w.text(t.name)
        w.u8(t.data.ndim)
        for d in t.shape:
            w.u32(d)
        w.array(t.data)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(w.getvalue())
    logger.info(f"Saved {net.modality.value} checkpoint ({len(ics)} ICs) → {path}")


def load_checkpoint(path: Path, expect: Optional[Dict[str, object]] = None) -> Checkpoint:
    """Read a checkpoint, optionally refusing one whose architecture differs from ``expect``."""
    path = Path(path)
    label = f"checkpoint {path.name}"
    r = BinaryReader(path.read_bytes(), label=label)
    r.expect_magic(CHECKPOINT_MAGIC)
    r.expect_version(CHECKPOINT_VERSION)
    try:
        meta = json.loads(r.text(width="u32"))
        arch = meta["architecture"]
        modality = Modality(arch["modality"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{label}: malformed metadata: {e}")

    if expect is not None:
        for key, value in expect.items():
            if arch.get(key) != value:
                raise ModelError(f"{label}: architecture field {key!r} is {arch.get(key)!r}, expected {value!r}")

    net = BackboneNet(modality, int(arch["input_dim"]), arch["widths"], int(arch["num_classes"]))
    ics = []
    for spec in arch["ics"]:
        point = int(spec["attach_point"])
        ics.append(
            InternalClassifier(modality, point, net.widths[point - 1], int(spec["hidden_dim"]), net.num_classes)
        )
    expected = {t.name: t for t in net.parameters() + [p for ic in ics for p in ic.parameters()]}

    count = r.u16()
    if count != len(expected):
        raise ModelError(f"{label}: holds {count} tensors, architecture needs {len(expected)}")
    for _ in range(count):
        name = r.text()
        shape = tuple(r.u32() for _ in range(r.u8()))
        target = expected.get(name)
        if target is None:
            raise ModelError(f"{label}: unexpected tensor {name!r}")
        if shape != target.shape:
            raise ModelError(f"{label}: tensor {name} has shape {shape}, architecture needs {target.shape}")
        target.data = r.array(shape)
    if not r.at_end():
        raise FormatError(f"{label}: trailing bytes after tensor block")

    if meta.get("frozen"):
        freeze(net)
    return Checkpoint(backbone=net, ics=ics, metadata=dict(meta.get("training", {})))
