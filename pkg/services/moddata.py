"""Seeded synthetic MV / R / I-frame datasets, splits and persistence.

Each class owns a latent template sequence of frames. I-frames are noisy
template frames, residuals are noisy consecutive-frame differences and
motion vectors are block-averaged differences with the largest noise, so
class separability orders I-frame > R > MV by construction.
"""

from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from loguru import logger

from services.binio import BinaryReader, BinaryWriter
from services.errors import DatasetError, FormatError
from services.rng import MASK64, philox

DATASET_MAGIC = b"CVKD"
DATASET_VERSION = 1
TEST_FRACTION_DENOM = 4
NUM_SPLITS = 3


class Modality(str, Enum):
    MV = "mv"
    R = "r"
    IFRAME = "iframe"

    @classmethod
    def parse(cls, value: str) -> "Modality":
        try:
            return cls(value.lower())
        except ValueError:
            raise DatasetError(f"Unknown modality: {value!r} (expected mv, r or iframe)")


MODALITIES: Tuple[Modality, ...] = (Modality.MV, Modality.R, Modality.IFRAME)


@dataclass(frozen=True)
class GenSpec:
    seed: int = 0
    num_classes: int = 10
    samples_per_class: int = 60
    dim_mv: int = 16
    dim_r: int = 64
    dim_i: int = 64
    sigma_mv: float = 0.9
    sigma_r: float = 0.5
    sigma_i: float = 0.25
    block_pool: int = 4
    frames_mv: int = 3
    frames_r: int = 3
    frames_i: int = 3
    signal_scale: float = 0.055

    @staticmethod
    def preset(name: str, seed: int = 0) -> "GenSpec":
        """Named dataset presets: the default benchmark and a harder one."""
        if name == "ucf-like":
            return GenSpec(seed=seed)
        if name == "hmdb-like":
            return GenSpec(seed=seed, samples_per_class=40, signal_scale=0.045)
        raise DatasetError(f"Unknown dataset preset: {name}")

    def validate(self) -> None:
        if not 0 <= self.seed <= MASK64:
            raise DatasetError(f"seed must fit in 64 bits, got {self.seed}")
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise DatasetError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not self.sigma_mv > self.sigma_r > self.sigma_i > 0:
            raise DatasetError(
                f"noise must satisfy sigma_mv > sigma_r > sigma_i > 0, "
                f"got ({self.sigma_mv}, {self.sigma_r}, {self.sigma_i})"
            )
        if self.block_pool < 1 or self.dim_i % self.block_pool:
            raise DatasetError(f"block_pool {self.block_pool} must divide dim_i {self.dim_i}")
        if self.dim_mv != self.dim_i // self.block_pool:
            raise DatasetError(f"dim_mv must equal dim_i / block_pool = {self.dim_i // self.block_pool}, got {self.dim_mv}")
        if self.dim_r != self.dim_i:
            raise DatasetError(f"dim_r must equal dim_i ({self.dim_i}), got {self.dim_r}")
        if min(self.frames_mv, self.frames_r, self.frames_i) < 1:
            raise DatasetError("frame counts must be >= 1")
        if self.signal_scale <= 0:
            raise DatasetError(f"signal_scale must be > 0, got {self.signal_scale}")

    def frames(self, modality: Modality) -> int:
        return {Modality.MV: self.frames_mv, Modality.R: self.frames_r, Modality.IFRAME: self.frames_i}[modality]

    def frame_dim(self, modality: Modality) -> int:
        return {Modality.MV: self.dim_mv, Modality.R: self.dim_r, Modality.IFRAME: self.dim_i}[modality]

    def input_dim(self, modality: Modality) -> int:
        return self.frames(modality) * self.frame_dim(modality)

    def sigma(self, modality: Modality) -> float:
        return {Modality.MV: self.sigma_mv, Modality.R: self.sigma_r, Modality.IFRAME: self.sigma_i}[modality]

    def with_frames(self, modality: Modality, count: int) -> "GenSpec":
        key = {Modality.MV: "frames_mv", Modality.R: "frames_r", Modality.IFRAME: "frames_i"}[modality]
        return replace(self, **{key: count})


@dataclass(frozen=True)
class ModalitySample:
    mv: np.ndarray
    r: np.ndarray
    iframe: np.ndarray
    label: int


@dataclass(frozen=True)
class DatasetSplit:
    split_id: int
    train: np.ndarray
    test: np.ndarray


class ModalityDataset:
    """Row-aligned modality matrices plus labels for one GenSpec."""

    def __init__(self, spec: GenSpec, labels: np.ndarray, mv: np.ndarray, r: np.ndarray, iframe: np.ndarray) -> None:
        n = len(labels)
        for name, arr, modality in (("mv", mv, Modality.MV), ("r", r, Modality.R), ("iframe", iframe, Modality.IFRAME)):
            if arr.shape != (n, spec.input_dim(modality)):
                raise DatasetError(f"{name} matrix has shape {arr.shape}, expected {(n, spec.input_dim(modality))}")
        self.spec = spec
        self.labels = np.asarray(labels, dtype=np.int64)
        self._inputs: Dict[Modality, np.ndarray] = {Modality.MV: mv, Modality.R: r, Modality.IFRAME: iframe}
        for arr in self._inputs.values():
            arr.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ModalitySample:
        return ModalitySample(
            mv=self._inputs[Modality.MV][i],
            r=self._inputs[Modality.R][i],
            iframe=self._inputs[Modality.IFRAME][i],
            label=int(self.labels[i]),
        )

    def __iter__(self) -> Iterator[ModalitySample]:
        for i in range(len(self)):
            yield self[i]

    def inputs(self, modality: Modality) -> np.ndarray:
        return self._inputs[modality]

    def subset(self, indices: Sequence[int]) -> "ModalityDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ModalityDataset(
            self.spec,
            self.labels[idx],
            self._inputs[Modality.MV][idx],
            self._inputs[Modality.R][idx],
            self._inputs[Modality.IFRAME][idx],
        )

    def equals(self, other: "ModalityDataset") -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(self.inputs(m), other.inputs(m)) for m in MODALITIES)
        )


def _block_mean(x: np.ndarray, pool: int) -> np.ndarray:
    return x.reshape(-1, pool).mean(axis=1)


def _template_frames(spec: GenSpec, label: int, count: int) -> List[np.ndarray]:
    appearance = philox(spec.seed, "appearance", label).standard_normal(spec.dim_i)
    frames = []
    for t in range(count):
        motion = philox(spec.seed, "motion", label, t).standard_normal(spec.dim_mv)
        detail = philox(spec.seed, "detail", label, t).standard_normal(spec.dim_i)
        frame = 0.5 * appearance + np.repeat(motion, spec.block_pool) + 0.5 * detail
        frames.append(spec.signal_scale * frame)
    return frames


def generate(spec: GenSpec) -> ModalityDataset:
    """Deterministically build ``num_classes * samples_per_class`` samples."""
    spec.validate()
    horizon = max(spec.frames_i, spec.frames_r + 1, spec.frames_mv + 1)
    templates = [_template_frames(spec, c, horizon) for c in range(spec.num_classes)]

    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.samples_per_class)
    mats = {m: np.empty((n, spec.input_dim(m))) for m in MODALITIES}

    for i, label in enumerate(labels):
        frames = templates[label]
        for m in MODALITIES:
            width = spec.frame_dim(m)
            sigma = spec.sigma(m)
            for j in range(spec.frames(m)):
                noise = sigma * philox(spec.seed, "noise", m.value, i, j).standard_normal(width)
                if m is Modality.IFRAME:
                    clean = frames[j]
                elif m is Modality.R:
                    clean = frames[j + 1] - frames[j]
                else:
                    clean = _block_mean(frames[j + 1] - frames[j], spec.block_pool)
                mats[m][i, j * width:(j + 1) * width] = clean + noise

    logger.debug(f"Generated {n} samples, k={spec.num_classes}, seed={spec.seed}")
    return ModalityDataset(spec, labels, mats[Modality.MV], mats[Modality.R], mats[Modality.IFRAME])


def make_splits(n: int, seed: int) -> List[DatasetSplit]:
    """Three 75/25 train/test partitions with disjoint test folds."""
    if n < 10:
        raise DatasetError(f"need at least 10 samples to split, got {n}")
    perm = philox(seed, "splits").permutation(n)
    n_test = n // TEST_FRACTION_DENOM
    splits = []
    for k in range(NUM_SPLITS):
        test = np.sort(perm[k * n_test:(k + 1) * n_test])
        train = np.setdiff1d(np.arange(n), test)
        splits.append(DatasetSplit(split_id=k + 1, train=train, test=test))
    return splits


def get_split(n: int, seed: int, split_id: int) -> DatasetSplit:
    if split_id not in range(1, NUM_SPLITS + 1):
        raise DatasetError(f"split_id must be 1..{NUM_SPLITS}, got {split_id}")
    return make_splits(n, seed)[split_id - 1]


def save_dataset(dataset: ModalityDataset, path: Path) -> None:
    w = BinaryWriter()
    w.raw(DATASET_MAGIC)
    w.u16(DATASET_VERSION)
    spec_fields = fields(GenSpec)
    w.u16(len(spec_fields))
    values = asdict(dataset.spec)
    for f in spec_fields:
        w.text(f.name, width="u8")
        if f.type in (int, "int"):
            w.raw(b"i")
            w.u64(int(values[f.name]))
        else:
            w.raw(b"f")
            w.f64(float(values[f.name]))
    w.u32(len(dataset))
    w.array(dataset.labels, dtype="<i4")
    for m in MODALITIES:
        w.array(dataset.inputs(m))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(w.getvalue())
    logger.info(f"Saved dataset ({len(dataset)} samples) → {path}")


def load_dataset(path: Path) -> ModalityDataset:
    path = Path(path)
    r = BinaryReader(path.read_bytes(), label=f"dataset {path.name}")
    r.expect_magic(DATASET_MAGIC)
    r.expect_version(DATASET_VERSION)
    known = {f.name for f in fields(GenSpec)}
    values = {}
    for _ in range(r.u16()):
        name = r.text(width="u8")
        tag = r.take(1)
        if name not in known:
            raise FormatError(f"dataset {path.name}: unknown GenSpec field {name!r}")
        if tag == b"i":
            values[name] = r.u64()
        elif tag == b"f":
            values[name] = r.f64()
        else:
            raise FormatError(f"dataset {path.name}: bad type tag {tag!r} for field {name}")
    missing = known - values.keys()
    if missing:
        raise FormatError(f"dataset {path.name}: missing GenSpec fields {sorted(missing)}")
    spec = GenSpec(**values)
    try:
        spec.validate()
    except DatasetError as e:
        raise FormatError(f"dataset {path.name}: stored GenSpec is invalid: {e}")
    n = r.u32()
    labels = r.array((n,), dtype="<i4").astype(np.int64)
    mats = [r.array((n, spec.input_dim(m))) for m in MODALITIES]
    if not r.at_end():
        raise FormatError(f"dataset {path.name}: trailing bytes after sample block")
    return ModalityDataset(spec, labels, *mats)
