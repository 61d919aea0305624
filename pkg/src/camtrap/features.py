"""Deterministic convolutional features with spatial-pyramid pooling over
rectangular regions, plus grid region proposals.

The network is a small fixed stack: per layer a 3x3 same-padding convolution,
ReLU, then 2x2 stride-2 max pooling.  Weights are seeded Glorot-uniform and
frozen by default; `backward` exists for gradient checks and optional
fine-tuning.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class Region:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate region {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"negative region origin {self}")

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class PyramidConfig:
    levels: Tuple[int, ...] = (1, 2)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels or any(g < 1 for g in self.levels):
            raise ValueError("pyramid levels must be a nonempty list of ints >= 1")

    @property
    def n_cells(self) -> int:
        return sum(g * g for g in self.levels)


@dataclass
class ConvNetParams:
    channels: Tuple[int, ...]  # e.g. (3, 8, 16)
    weights: List[np.ndarray]  # each (3, 3, c_in, c_out)
    biases: List[np.ndarray]  # each (c_out,)
    seed: int

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def downsample(self) -> int:
        return 2 ** self.n_layers

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.channels).encode())
        for w, b in zip(self.weights, self.biases):
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class RegionFeatures:
    regions: Tuple[Region, ...]
    matrix: np.ndarray  # R x D

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.regions):
            raise ValueError("row count must equal region count")


def init_convnet(channels: Sequence[int] = (3, 8, 16), seed: int = 0) -> ConvNetParams:
    """Glorot-uniform weights, |w| <= sqrt(6/(fan_in+fan_out)); zero biases."""
    channels = tuple(int(c) for c in channels)
    if len(channels) < 2 or any(c < 1 for c in channels):
        raise ValueError(f"bad channel chain {channels}")
    rng = np.random.default_rng(np.uint64(seed))
    weights, biases = [], []
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        a = np.sqrt(6.0 / (9 * c_in + 9 * c_out))
        weights.append(rng.uniform(-a, a, size=(3, 3, c_in, c_out)))
        biases.append(np.zeros(c_out))
    return ConvNetParams(channels=channels, weights=weights, biases=biases, seed=seed)


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, wd = x.shape[:2]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.tile(b, (h, wd, 1)).astype(float)
    for dy in range(3):
        for dx in range(3):
            out += xp[dy : dy + h, dx : dx + wd] @ w[dy, dx]
    return out


def _maxpool2(x: np.ndarray):
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    win = x[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, -1).transpose(0, 2, 1, 3, 4)
    flat = win.reshape(h2, w2, 4, -1)
    idx = flat.argmax(axis=2)
    pooled = np.take_along_axis(flat, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return pooled, idx


def forward(image: np.ndarray, params: ConvNetParams, return_cache: bool = False):
    """Feature map of shape (H / 2^L, W / 2^L, C_out), floor division."""
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] != params.channels[0]:
        raise ValueError(
            f"image has {image.shape[2]} channels, net expects {params.channels[0]}"
        )
    if min(image.shape[0], image.shape[1]) < params.downsample:
        raise ValueError("image smaller than the network's receptive field")
    x = image.astype(float)
    cache = {"image": x, "layers": []}
    for w, b in zip(params.weights, params.biases):
        pre = _conv3x3(x, w, b)
        act = np.maximum(pre, 0.0)
        pooled, idx = _maxpool2(act)
        cache["layers"].append({"input": x, "pre": pre, "act_shape": act.shape, "idx": idx})
        x = pooled
    if return_cache:
        return x, cache
    return x


def backward(grad_out: np.ndarray, cache: dict, params: ConvNetParams):
    """Gradients of a scalar loss wrt the input image and all layer params,
    given the loss gradient wrt the forward output."""
    g = grad_out.astype(float)
    grad_w = [None] * params.n_layers
    grad_b = [None] * params.n_layers
    for li in range(params.n_layers - 1, -1, -1):
        layer = cache["layers"][li]
        ah, aw, c = layer["act_shape"]
        h2, w2 = g.shape[:2]
        # unpool: route gradient to the argmax cell of each 2x2 window
        g_act = np.zeros((ah, aw, c))
        win = np.zeros((h2, w2, 4, c))
        np.put_along_axis(win, layer["idx"][:, :, None, :], g[:, :, None, :], axis=2)
        win = win.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4)
        g_act[: 2 * h2, : 2 * w2] = win.reshape(2 * h2, 2 * w2, c)
        g_pre = g_act * (layer["pre"] > 0)
        x = layer["input"]
        hh, ww = x.shape[:2]
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        w = params.weights[li]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for dy in range(3):
            for dx in range(3):
                gxp[dy : dy + hh, dx : dx + ww] += g_pre @ w[dy, dx].T
                gw[dy, dx] = np.tensordot(xp[dy : dy + hh, dx : dx + ww], g_pre, axes=([0, 1], [0, 1]))
        grad_w[li] = gw
        grad_b[li] = g_pre.sum(axis=(0, 1))
        g = gxp[1 : 1 + hh, 1 : 1 + ww]
    return g, grad_w, grad_b


def propose_regions(
    width: int,
    height: int,
    scales: Sequence[float] = (0.5, 0.75),
    stride_fraction: float = 0.5,
) -> List[Region]:
    """Square sliding windows at each scale plus the full image, appended last."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    short = min(width, height)
    seen = []
    for s in scales:
        win = max(1, int(round(s * short)))
        stride = max(1, int(round(stride_fraction * win)))
        xs = list(range(0, max(width - win, 0) + 1, stride))
        ys = list(range(0, max(height - win, 0) + 1, stride))
        for y0 in ys:
            for x0 in xs:
                x1 = min(x0 + win, width)
                y1 = min(y0 + win, height)
                t = (x0, y0, x1, y1)
                if t not in seen:
                    seen.append(t)
    full = (0, 0, width, height)
    if full in seen:
        seen.remove(full)
    seen.append(full)
    return [Region(*t) for t in seen]


def _cell_edges(lo: int, hi: int, g: int) -> List[int]:
    # even (banker's) rounding of the cell boundaries
    return [lo + round(i * (hi - lo) / g) for i in range(g + 1)]


def spp_pool(fmap: np.ndarray, region: Region, pyramid: PyramidConfig, downsample: int = 1) -> np.ndarray:
    """Max-pool the region over nested g x g grids; concatenated level-major,
    cells row-major, channels fastest."""
    fh, fw, c = fmap.shape
    x0 = min(region.x0 // downsample, fw - 1)
    y0 = min(region.y0 // downsample, fh - 1)
    x1 = max(min(-(-region.x1 // downsample), fw), x0 + 1)
    y1 = max(min(-(-region.y1 // downsample), fh), y0 + 1)
    out = np.empty(c * pyramid.n_cells)
    pos = 0
    for g in pyramid.levels:
        xe = _cell_edges(x0, x1, g)
        ye = _cell_edges(y0, y1, g)
        for gy in range(g):
            ya, yb = ye[gy], ye[gy + 1]
            if yb <= ya:
                ya = min(ya, y1 - 1)
                yb = ya + 1
            for gx in range(g):
                xa, xb = xe[gx], xe[gx + 1]
                if xb <= xa:
                    xa = min(xa, x1 - 1)
                    xb = xa + 1
                out[pos : pos + c] = fmap[ya:yb, xa:xb].max(axis=(0, 1))
                pos += c
    return out


def feature_dim(params: ConvNetParams, pyramid: PyramidConfig) -> int:
    return params.out_channels * pyramid.n_cells


def extract_region_features(
    image: np.ndarray,
    regions: Sequence[Region],
    params: ConvNetParams,
    pyramid: PyramidConfig = PyramidConfig(),
) -> RegionFeatures:
    """Pooled, L2-normalized feature row per region (zero rows left zero)."""
    fmap = forward(image, params)
    rows = np.stack(
        [spp_pool(fmap, r, pyramid, downsample=params.downsample) for r in regions]
    )
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return RegionFeatures(regions=tuple(regions), matrix=rows / norms)


def full_image_region(image: np.ndarray) -> Region:
    return Region(0, 0, image.shape[1], image.shape[0])


# ---------------------------------------------------------------------------
# serialization

_PARAMS_MAGIC = "camtrap-convnet v1"


def save_convnet(params: ConvNetParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_PARAMS_MAGIC + "\n")
        fh.write("channels " + " ".join(str(c) for c in params.channels) + "\n")
        fh.write(f"seed {params.seed}\n")
        for li, (w, b) in enumerate(zip(params.weights, params.biases)):
            fh.write(f"layer {li} shape {' '.join(str(s) for s in w.shape)}\n")
            fh.write(" ".join(repr(float(v)) for v in w.ravel()) + "\n")
            fh.write(" ".join(repr(float(v)) for v in b) + "\n")


def load_convnet(path) -> ConvNetParams:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a {_PARAMS_MAGIC} file")
    channels = tuple(int(t) for t in lines[1].split()[1:])
    seed = int(lines[2].split()[1])
    weights, biases = [], []
    i = 3
    while i < len(lines):
        shape = tuple(int(t) for t in lines[i].split()[3:])
        weights.append(np.array([float(t) for t in lines[i + 1].split()]).reshape(shape))
        biases.append(np.array([float(t) for t in lines[i + 2].split()]))
        i += 3
    return ConvNetParams(channels=channels, weights=weights, biases=biases, seed=seed)


def save_feature_cache(path, features: dict, params: ConvNetParams, pyramid: PyramidConfig) -> None:
    """Cache {image id: RegionFeatures} keyed by the params checksum."""
    arrays = {"__meta_checksum": np.array(params.checksum()), "__meta_levels": np.array(pyramid.levels)}
    for rid, rf in features.items():
        arrays[f"m::{rid}"] = rf.matrix
        arrays[f"r::{rid}"] = np.array([r.as_tuple() for r in rf.regions], dtype=np.int64)
    np.savez(path, **arrays)


def load_feature_cache(path, params: ConvNetParams, pyramid: PyramidConfig) -> dict:
    data = np.load(path)
    if str(data["__meta_checksum"]) != params.checksum():
        raise ValueError(f"{path}: cache was built for different network parameters")
    if tuple(data["__meta_levels"]) != pyramid.levels:
        raise ValueError(f"{path}: cache was built for a different pyramid")
    out = {}
    for key in data.files:
        if key.startswith("m::"):
            rid = key[3:]
            regions = tuple(Region(*map(int, row)) for row in data[f"r::{rid}"])
            out[rid] = RegionFeatures(regions=regions, matrix=data[key])
    return out
