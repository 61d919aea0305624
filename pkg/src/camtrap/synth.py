"""Deterministic synthetic camera-trap corpus.

Positives carry one planted texture patch (stripes for tiger, spots for
leopard, checker for other species); pattern parameters are a fixed function
of (species, individual, seed) so individuals are identifiable.  Negatives
contain background clutter only.  Every pixel depends only on (config,
record id), so generation order never matters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .manifest import ImageRecord, Manifest, INDIVIDUAL_SPECIES

_FAMILIES = ("stripes", "spots", "checker")


@dataclass(frozen=True)
class SpeciesSpec:
    name: str
    family: str
    n_individuals: int  # 0 = no individual tags, per-image pattern params
    n_images: int

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown texture family {self.family!r}")
        if self.n_individuals < 0 or self.n_images < 0:
            raise ValueError("counts must be >= 0")
        if self.n_individuals > 0 and self.n_images % self.n_individuals != 0:
            raise ValueError(
                f"{self.name}: n_images={self.n_images} not divisible by "
                f"n_individuals={self.n_individuals}"
            )
        if self.n_individuals > 0 and self.name not in INDIVIDUAL_SPECIES:
            raise ValueError(f"{self.name}: individuals allowed only for {INDIVIDUAL_SPECIES}")


def default_species_specs(
    individuals_per_species: int = 4, images_per_individual: int = 10
) -> Tuple[SpeciesSpec, ...]:
    n = individuals_per_species * images_per_individual
    return (
        SpeciesSpec("tiger", "stripes", individuals_per_species, n),
        SpeciesSpec("leopard", "spots", individuals_per_species, n),
        SpeciesSpec("chital", "checker", 0, n),
    )


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 96
    species_specs: Tuple[SpeciesSpec, ...] = field(default_factory=default_species_specs)
    n_negatives: int = 40
    night_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if not 0.0 <= self.night_fraction <= 1.0:
            raise ValueError("night_fraction must lie in [0,1]")
        if self.n_negatives < 0:
            raise ValueError("n_negatives must be >= 0")


@dataclass(frozen=True)
class SynthImage:
    pixels: np.ndarray  # H x W x 3, float in [0,1]
    record: ImageRecord
    ground_truth_box: Optional[Tuple[int, int, int, int]]  # x0,y0,x1,y1 half-open


def _rng_for(*parts) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    return np.random.default_rng(np.random.SeedSequence(entropy=list(words)))


def _smooth_field(rng, size, cells=6):
    coarse = rng.normal(size=(cells, cells))
    xs = np.linspace(0, cells - 1, size)
    i0 = np.clip(xs.astype(int), 0, cells - 2)
    t = xs - i0
    rows = coarse[i0] * (1 - t)[:, None] + coarse[i0 + 1] * t[:, None]
    cols = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
    return cols


def _background(rng, size):
    base = np.array([0.42, 0.45, 0.38]) + rng.uniform(-0.04, 0.04, size=3)
    img = np.empty((size, size, 3))
    for c in range(3):
        img[:, :, c] = base[c] + 0.05 * _smooth_field(rng, size)
    return img


def _add_clutter(rng, img, n_shapes):
    size = img.shape[0]
    for _ in range(n_shapes):
        w = int(rng.integers(size // 8, size // 3))
        h = int(rng.integers(size // 8, size // 3))
        x0 = int(rng.integers(0, max(1, size - w)))
        y0 = int(rng.integers(0, max(1, size - h)))
        tint = rng.uniform(-0.12, 0.12, size=3)
        img[y0 : y0 + h, x0 : x0 + w] += tint
    return img


def _vdc(n: int, base: int) -> float:
    v, denom = 0.0, 1.0
    while n:
        n, rem = divmod(n, base)
        denom *= base
        v += rem / denom
    return v


#: each species owns a disjoint red-channel band so species stay color
#: separable; individual tints spread over green/blue inside the band
_SPECIES_RED_BAND = {
    name: (0.06 + 0.09 * i, 0.14 + 0.09 * i)
    for i, name in enumerate(
        ("muntjac", "chital", "sambar", "elephant", "gaur", "dhole", "bear", "wild_pig", "tiger", "leopard")
    )
}


def _individual_tint(index: int, offset: np.ndarray, band) -> np.ndarray:
    # low-discrepancy points keep individuals of one species well separated
    lo, hi = band
    r = lo + (hi - lo) * ((_vdc(index + 1, 5) + offset[0]) % 1.0)
    g = 0.1 + 0.8 * ((_vdc(index + 1, 2) + offset[1]) % 1.0)
    b = 0.1 + 0.8 * ((_vdc(index + 1, 3) + offset[2]) % 1.0)
    return np.array([r, g, b])


def _render_stripes(sig, xs, ys):
    theta, freq, phase, duty = sig["theta"], sig["freq"], sig["phase"], sig["duty"]
    coord = xs * math.cos(theta) + ys * math.sin(theta)
    s = np.sin(2 * math.pi * (freq * coord / 64.0 + phase))
    return s < math.sin(math.pi * (duty - 0.5))  # True = dark stripe


def _render_spots(sig, xs, ys):
    spacing, radius, jx, jy = sig["spacing"], sig["radius"], sig["jx"], sig["jy"]
    gx = xs / spacing
    gy = ys / spacing
    # nearest lattice point with per-individual jitter (same for all cells)
    dx = (gx - np.floor(gx + 0.5) - jx) * spacing
    dy = (gy - np.floor(gy + 0.5) - jy) * spacing
    return dx * dx + dy * dy < radius * radius


def _render_checker(sig, xs, ys):
    cell, theta = sig["cell"], sig["theta"]
    u = (xs * math.cos(theta) + ys * math.sin(theta)) / cell
    v = (-xs * math.sin(theta) + ys * math.cos(theta)) / cell
    return (np.floor(u).astype(int) + np.floor(v).astype(int)) % 2 == 0


_RENDERERS = {"stripes": _render_stripes, "spots": _render_spots, "checker": _render_checker}


def _pattern_signature(family: str, rng_sig, tint: np.ndarray) -> dict:
    """Fixed per-individual pattern parameters."""
    sig = {"tint": tint}
    if family == "stripes":
        sig.update(
            theta=rng_sig.uniform(0, math.pi),
            freq=rng_sig.uniform(3.0, 9.0),
            phase=rng_sig.uniform(0, 1),
            duty=rng_sig.uniform(0.4, 0.55),
        )
    elif family == "spots":
        spacing = rng_sig.uniform(7.0, 16.0)
        sig.update(
            spacing=spacing,
            radius=spacing * rng_sig.uniform(0.2, 0.32),
            jx=rng_sig.uniform(-0.25, 0.25),
            jy=rng_sig.uniform(-0.25, 0.25),
        )
    else:
        sig.update(cell=rng_sig.uniform(5.0, 13.0), theta=rng_sig.uniform(0, math.pi / 2))
    return sig


def _snap8(v: int) -> int:
    return max(8, (v // 8) * 8)


def _plant_patch(rng, img, family, sig):
    size = img.shape[0]
    side = _snap8(int(rng.uniform(0.55, 0.8) * size))
    side = min(side, (size // 8) * 8)
    max_off = size - side
    x0 = (int(rng.integers(0, max_off + 1)) // 8) * 8
    y0 = (int(rng.integers(0, max_off + 1)) // 8) * 8
    ys, xs = np.mgrid[0:side, 0:side].astype(float)
    dark = _RENDERERS[family](sig, xs, ys)
    patch = np.where(dark[:, :, None], 0.3 * sig["tint"], sig["tint"])
    img[y0 : y0 + side, x0 : x0 + side] = patch
    return (x0, y0, x0 + side, y0 + side)


def _night_indices(n: int, fraction: float):
    return {i for i in range(n) if math.floor((i + 1) * fraction) > math.floor(i * fraction)}


def render_image(cfg: SynthConfig, record_id: str, species: str, individual, night: bool):
    """Render one image; pure function of (cfg, record id and its labels)."""
    rng = _rng_for(cfg.seed, "img", record_id)
    img = _background(rng, cfg.image_size)
    box = None
    if species == "unclassified":
        img = _add_clutter(rng, img, int(rng.integers(3, 7)))
    else:
        img = _add_clutter(rng, img, int(rng.integers(0, 2)))
        spec = next(s for s in cfg.species_specs if s.name == species)
        sig_key = individual if individual is not None else record_id
        rng_sig = _rng_for(cfg.seed, "sig", species, sig_key)
        offset = _rng_for(cfg.seed, "colors", species).uniform(0, 1, size=3)
        band = _SPECIES_RED_BAND[species]
        if individual is not None:
            tint = _individual_tint(int(individual.rsplit("_", 1)[1]), offset, band)
        else:
            u = rng_sig.uniform(0, 1, size=3)
            tint = np.array(
                [band[0] + (band[1] - band[0]) * u[0], 0.1 + 0.8 * u[1], 0.1 + 0.8 * u[2]]
            )
        sig = _pattern_signature(spec.family, rng_sig, tint)
        box = _plant_patch(rng, img, spec.family, sig)
    if night:
        img = img * 0.35 + rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0), box


def generate_corpus(cfg: SynthConfig, out_dir=None):
    """Build the full corpus.  Returns (manifest, {id: SynthImage}); when
    out_dir is given also writes PPM images plus manifest.csv there."""
    records = []
    images: Dict[str, SynthImage] = {}

    def add(record_id, species, individual, night):
        pixels, box = render_image(cfg, record_id, species, individual, night)
        rec = ImageRecord(
            id=record_id,
            path=f"{record_id}.ppm",
            species=species,
            individual=individual,
            illumination="night" if night else "day",
            width=cfg.image_size,
            height=cfg.image_size,
        )
        records.append(rec)
        images[record_id] = SynthImage(pixels=pixels, record=rec, ground_truth_box=box)

    for spec in cfg.species_specs:
        if spec.n_individuals > 0:
            per = spec.n_images // spec.n_individuals
            for ind in range(spec.n_individuals):
                name = f"{spec.name}_{ind:02d}"
                nights = _night_indices(per, cfg.night_fraction)
                for i in range(per):
                    add(f"{spec.name}-{ind:02d}-{i:03d}", spec.name, name, i in nights)
        else:
            nights = _night_indices(spec.n_images, cfg.night_fraction)
            for i in range(spec.n_images):
                add(f"{spec.name}-xx-{i:03d}", spec.name, None, i in nights)

    nights = _night_indices(cfg.n_negatives, cfg.night_fraction)
    for i in range(cfg.n_negatives):
        add(f"unclassified-xx-{i:03d}", "unclassified", None, i in nights)

    manifest = Manifest(records=tuple(records), provenance=f"synthetic seed={cfg.seed}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rid, im in images.items():
            write_ppm(out_dir / im.record.path, im.pixels)
        from .manifest import save_manifest

        save_manifest(manifest, out_dir / "manifest.csv")
    return manifest, images


def ground_truth_mask(img: SynthImage) -> np.ndarray:
    """Binary H x W mask, 1 inside the planted box."""
    if img.ground_truth_box is None:
        raise ValueError(f"{img.record.id}: negative image has no ground-truth box")
    h, w = img.pixels.shape[:2]
    mask = np.zeros((h, w), dtype=np.uint8)
    x0, y0, x1, y1 = img.ground_truth_box
    mask[y0:y1, x0:x1] = 1
    return mask


def write_ppm(path, pixels: np.ndarray) -> None:
    """Binary P6 portable pixel map, 8 bits per channel."""
    h, w = pixels.shape[:2]
    data = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 ppm")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / float(maxval)


def load_images(manifest: Manifest, root) -> Dict[str, np.ndarray]:
    """Read all manifest images (PPM) from a root directory."""
    root = Path(root)
    return {r.id: read_ppm(root / r.path) for r in manifest}
