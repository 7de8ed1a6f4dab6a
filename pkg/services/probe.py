"""Loss-landscape scans around trained parameters and a flatness score."""

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from loguru import logger

from services.errors import ProbeError
from services.moddata import ModalityDataset
from services.netmodel import CascadeModel
from services.numcore import Tensor, cross_entropy
from services.rng import philox

DEFAULT_RADIUS = 1.0
DEFAULT_RESOLUTION = 21
ORTHO_EPS = 1e-10


@dataclass(frozen=True)
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # [len(alphas), len(betas)]
    radius: float
    directions: Tuple[List[np.ndarray], List[np.ndarray]]

    @property
    def center_loss(self) -> float:
        c = len(self.alphas) // 2
        return float(self.losses[c, c])


@dataclass(frozen=True)
class FlatnessScore:
    radius: float
    score: float
    cells: int


def _flatten(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in parts])


def _unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> List[np.ndarray]:
    parts, offset = [], 0
    for p in like:
        parts.append(vec[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    return parts


def _layer_normalized_direction(params: Sequence[Tensor], seed: int, which: int) -> np.ndarray:
    parts = []
    for i, p in enumerate(params):
        d = philox(seed, "probe", which, p.name or i).standard_normal(p.shape)
        d_norm = np.linalg.norm(d)
        p_norm = np.linalg.norm(p.data)
        if p_norm > 0 and d_norm > 0:
            d = d * (p_norm / d_norm)
        parts.append(d)
    return _flatten(parts)


def random_directions(params: Sequence[Tensor], seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Two orthonormal directions, each built from per-layer normalized noise."""
    d1 = _layer_normalized_direction(params, seed, 1)
    d2 = _layer_normalized_direction(params, seed, 2)
    d1 = d1 / np.linalg.norm(d1)
    d2 = d2 - (d2 @ d1) * d1
    d2 = d2 / np.linalg.norm(d2)
    if abs(d1 @ d2) >= ORTHO_EPS:
        raise ProbeError(f"probe directions not orthogonal (inner product {d1 @ d2:.3e})")
    return d1, d2


def scan_landscape(
    params: Sequence[Tensor],
    loss_fn: Callable[[], float],
    radius: float = DEFAULT_RADIUS,
    resolution: int = DEFAULT_RESOLUTION,
    seed: int = 0,
) -> LandscapeGrid:
    """Evaluate ``loss_fn`` on a 2-D slice through the current parameters.

    Parameters are moved in place for each cell and restored bit-exactly
    before returning, also when ``loss_fn`` raises.
    """
    if radius <= 0:
        raise ProbeError(f"radius must be > 0, got {radius}")
    if resolution < 1 or resolution % 2 == 0:
        raise ProbeError(f"resolution must be odd so the center is a grid point, got {resolution}")
    if not params:
        raise ProbeError("no parameters to probe")

    saved = [p.data.copy() for p in params]
    d1, d2 = random_directions(params, seed)
    d1_parts, d2_parts = _unflatten(d1, saved), _unflatten(d2, saved)
    coords = np.linspace(-radius, radius, resolution)
    losses = np.empty((resolution, resolution))
    try:
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                for p, base, u, v in zip(params, saved, d1_parts, d2_parts):
                    p.data = base + a * u + b * v
                losses[i, j] = loss_fn()
    finally:
        for p, base in zip(params, saved):
            p.data = base
    logger.debug(f"Scanned {resolution}x{resolution} landscape, r={radius}, center loss {losses[resolution // 2, resolution // 2]:.5f}")
    return LandscapeGrid(coords, coords.copy(), losses, radius, (d1_parts, d2_parts))


def flatness(grid: LandscapeGrid, radius: float) -> FlatnessScore:
    """Mean loss increase over cells within ``radius`` of the center."""
    if radius > grid.radius + 1e-12:
        raise ProbeError(f"radius {radius} exceeds grid extent {grid.radius}")
    if radius < 0:
        raise ProbeError(f"radius must be >= 0, got {radius}")
    aa, bb = np.meshgrid(grid.alphas, grid.betas, indexing="ij")
    inside = np.sqrt(aa ** 2 + bb ** 2) <= radius + 1e-12
    delta = grid.losses[inside] - grid.center_loss
    return FlatnessScore(radius=radius, score=float(delta.mean()), cells=int(inside.sum()))


def scan_ic_landscape(
    model: CascadeModel,
    ic_key: Tuple,
    dataset: ModalityDataset,
    radius: float = DEFAULT_RADIUS,
    resolution: int = DEFAULT_RESOLUTION,
    seed: int = 0,
) -> LandscapeGrid:
    """Landscape of one IC's CE loss on ``dataset`` with the backbone held fixed."""
    modality, attach_point = ic_key
    ic = model.ic(modality, attach_point)
    taps, _ = model.backbones[modality].forward_with_taps(dataset.inputs(modality))
    features = taps[attach_point - 1].data
    labels = dataset.labels

    def loss_fn() -> float:
        return cross_entropy(ic.forward(features), labels).item()

    return scan_landscape(ic.parameters(), loss_fn, radius, resolution, seed)
