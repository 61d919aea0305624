"""Patch-level animal segmentation: detector probabilities per patch refined
by binary mean-field sweeps with a Potts coupling weighted by spatial and
color similarity between patches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import features as feat
from . import svm


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    width: int
    height: int

    def __post_init__(self):
        if self.patch_size < 4:
            raise ValueError("patch_size must be >= 4")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dims must be positive")

    @property
    def nx(self) -> int:
        return -(-self.width // self.patch_size)

    @property
    def ny(self) -> int:
        return -(-self.height // self.patch_size)

    def patch_region(self, row: int, col: int) -> feat.Region:
        x0 = col * self.patch_size
        y0 = row * self.patch_size
        return feat.Region(x0, y0, min(x0 + self.patch_size, self.width), min(y0 + self.patch_size, self.height))

    def regions(self):
        return [self.patch_region(r, c) for r in range(self.ny) for c in range(self.nx)]


@dataclass(frozen=True)
class PairwiseParams:
    w: float = 2.0
    theta_pos: float = 2.0
    theta_color: float = 0.15
    iterations: int = 5

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("coupling weight must be >= 0")
        if self.theta_pos <= 0 or self.theta_color <= 0:
            raise ValueError("bandwidths must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def grid_for(image: np.ndarray, patch_size: int = 16) -> PatchGrid:
    return PatchGrid(patch_size=patch_size, width=image.shape[1], height=image.shape[0])


def patch_mean_colors(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    colors = np.empty((grid.ny, grid.nx, 3))
    for r in range(grid.ny):
        for c in range(grid.nx):
            reg = grid.patch_region(r, c)
            colors[r, c] = image[reg.y0 : reg.y1, reg.x0 : reg.x1].mean(axis=(0, 1))
    return colors


def compute_unary(
    image: np.ndarray,
    grid: PatchGrid,
    detector: svm.LinearModel,
    params: feat.ConvNetParams,
    pyramid: feat.PyramidConfig = feat.PyramidConfig(),
    scale: float = 1.0,
) -> np.ndarray:
    """Foreground probability per patch from the patch-trained detector."""
    rf = feat.extract_region_features(image, grid.regions(), params, pyramid)
    margins = svm.predict_margins(detector, rf.matrix)
    probs = 1.0 / (1.0 + np.exp(-scale * margins))
    return probs.reshape(grid.ny, grid.nx)


def _pairwise_kernel(grid: PatchGrid, colors: np.ndarray, pp: PairwiseParams) -> np.ndarray:
    n = grid.ny * grid.nx
    rows, cols = np.divmod(np.arange(n), grid.nx)
    dpos2 = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
    flat = colors.reshape(n, 3)
    dcol2 = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
    k = np.exp(-dpos2 / (2 * pp.theta_pos**2) - dcol2 / (2 * pp.theta_color**2))
    k[dpos2 > (3 * pp.theta_pos) ** 2] = 0.0  # truncated neighborhood
    np.fill_diagonal(k, 0.0)
    return k


def refine_mean_field(unary: np.ndarray, image: np.ndarray, grid: PatchGrid, pp: PairwiseParams = PairwiseParams()) -> np.ndarray:
    """Synchronous sweeps of q_i <- sigmoid(logit(u_i) + w * sum_j k_ij (2 q_j - 1))."""
    if unary.shape != (grid.ny, grid.nx):
        raise ValueError(f"unary shape {unary.shape} does not match grid {(grid.ny, grid.nx)}")
    if pp.w == 0.0:
        return unary.copy()
    colors = patch_mean_colors(image, grid)
    k = _pairwise_kernel(grid, colors, pp)
    u = np.clip(unary.reshape(-1), 1e-12, 1.0 - 1e-12)
    logit_u = np.log(u / (1.0 - u))
    q = u.copy()
    for _ in range(pp.iterations):
        msg = k @ (2.0 * q - 1.0)
        q = 1.0 / (1.0 + np.exp(-(logit_u + pp.w * msg)))
    return q.reshape(grid.ny, grid.nx)


def threshold_mask(pf: np.ndarray, tau: float = 0.5) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0,1)")
    return (pf >= tau).astype(np.uint8)


def upsample_mask(mask: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Nearest-neighbor upsample of a patch mask to pixel resolution."""
    pixels = np.zeros((grid.height, grid.width), dtype=np.uint8)
    for r in range(grid.ny):
        for c in range(grid.nx):
            reg = grid.patch_region(r, c)
            pixels[reg.y0 : reg.y1, reg.x0 : reg.x1] = mask[r, c]
    return pixels


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gray out the background (mask == 0); foreground pixels unchanged."""
    if mask.shape != image.shape[:2]:
        raise ValueError("mask must be at pixel resolution")
    out = np.full_like(image, 0.5)
    out[mask.astype(bool)] = image[mask.astype(bool)]
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def segment_image(
    image: np.ndarray,
    detector: svm.LinearModel,
    params: feat.ConvNetParams,
    pyramid: feat.PyramidConfig = feat.PyramidConfig(),
    patch_size: int = 16,
    pp: PairwiseParams = PairwiseParams(),
    tau: float = 0.5,
    scale: float = 1.0,
) -> np.ndarray:
    """Full pipeline: unary -> mean-field -> threshold -> pixel mask."""
    grid = grid_for(image, patch_size)
    unary = compute_unary(image, grid, detector, params, pyramid, scale)
    refined = refine_mean_field(unary, image, grid, pp)
    return upsample_mask(threshold_mask(refined, tau), grid)


def write_pbm(path, mask: np.ndarray) -> None:
    """Binary P4 portable bitmap (1 = foreground)."""
    h, w = mask.shape
    padded_w = -(-w // 8) * 8
    bits = np.zeros((h, padded_w), dtype=np.uint8)
    bits[:, :w] = mask.astype(bool)
    packed = np.packbits(bits, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode())
        fh.write(packed.tobytes())
