"""Seeded, scripted replications of the experimental protocols, emitting
plot-ready CSV.

Every protocol is a pure function of (corpus, config): trial seeds are
base_seed + trial index, aggregation order is fixed by that index, and CSV
bytes are reproducible.  Trials may run in parallel (--jobs); results are
identical to the serial run because each trial depends only on its own seed.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import features as ft
from . import manifest as mf
from . import metrics as mt
from . import segmentation as seg
from . import svm
from . import synth
from . import wsddn

PROTOCOLS = (
    "volume",
    "proportion",
    "split",
    "illumination",
    "species",
    "individual",
    "joint-individuals",
)


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str
    synth_config: Optional[synth.SynthConfig] = None
    manifest_path: Optional[str] = None
    images_root: Optional[str] = None
    output_dir: Optional[str] = None
    base_seed: int = 0
    n_seeds: int = 10
    split_fraction: float = 0.7
    fractions: Tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    train_proportions: Tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    split_ratios: Tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    k: int = 30
    balance: bool = True
    segment: bool = False
    sweep_individuals: bool = False
    channels: Tuple[int, ...] = (3, 8, 16)
    pyramid_levels: Tuple[int, ...] = (1, 2)
    region_scales: Tuple[float, ...] = (0.5,)
    region_stride: float = 0.5
    feature_seed: int = 0
    svm_epochs: int = 30
    svm_lambda: float = 1e-3
    head_epochs: int = 1200
    head_lr: float = 8.0
    head_l2: float = 1e-4
    patch_size: int = 8
    jobs: int = 1

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if self.n_seeds < 1:
            raise ValueError("need at least one seed")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ValueError("fractions must lie in (0,1]")
        if self.synth_config is None and self.manifest_path is None:
            raise ValueError("either synth_config or manifest_path is required")

    def resolved(self) -> dict:
        d = asdict(self)
        d.pop("jobs")  # execution detail; jobs=N output must match jobs=1
        return d


@dataclass
class Report:
    protocol: str
    config: dict
    version: str
    rows: List[dict] = field(default_factory=list)
    aggregates: List[dict] = field(default_factory=list)
    confusions: Dict[str, mt.ConfusionMatrix] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)


class PipelineContext:
    """Corpus images plus shared, lazily built feature tables."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        if cfg.synth_config is not None:
            self.manifest, synth_images = synth.generate_corpus(cfg.synth_config)
            self.images = {rid: si.pixels for rid, si in synth_images.items()}
            self.boxes = {rid: si.ground_truth_box for rid, si in synth_images.items()}
        else:
            self.manifest = mf.load_manifest(cfg.manifest_path)
            root = cfg.images_root or str(Path(cfg.manifest_path).parent)
            self.images = synth.load_images(self.manifest, root)
            self.boxes = {}
        self.by_id = self.manifest.by_id()
        self.params = ft.init_convnet(cfg.channels, seed=cfg.feature_seed)
        self.pyramid = ft.PyramidConfig(cfg.pyramid_levels)
        self._image_feats: Dict[str, np.ndarray] = {}
        self._region_feats: Dict[str, ft.RegionFeatures] = {}

    def image_feature(self, rid: str) -> np.ndarray:
        if rid not in self._image_feats:
            img = self.images[rid]
            rf = ft.extract_region_features(
                img, [ft.full_image_region(img)], self.params, self.pyramid
            )
            self._image_feats[rid] = rf.matrix[0]
        return self._image_feats[rid]

    def region_features(self, rid: str, image: Optional[np.ndarray] = None) -> ft.RegionFeatures:
        key = rid
        if key not in self._region_feats:
            img = self.images[rid] if image is None else image
            regions = ft.propose_regions(
                img.shape[1], img.shape[0], self.cfg.region_scales, self.cfg.region_stride
            )
            self._region_feats[key] = ft.extract_region_features(
                img, regions, self.params, self.pyramid
            )
        return self._region_feats[key]


def _presence_label(rec) -> float:
    return 1.0 if rec.has_animal else -1.0


def _detector_metrics(ctx, train_ids, val_ids, seed) -> dict:
    x_tr = np.stack([ctx.image_feature(i) for i in train_ids])
    y_tr = np.array([_presence_label(ctx.by_id[i]) for i in train_ids])
    model = svm.train_linear_svm(
        x_tr, y_tr, svm.SvmTrainConfig(epochs=ctx.cfg.svm_epochs, lam=ctx.cfg.svm_lambda, seed=seed)
    )
    out = {}
    for tag, ids in (("train", train_ids), ("test", val_ids)):
        x = np.stack([ctx.image_feature(i) for i in ids])
        y = np.array([_presence_label(ctx.by_id[i]) for i in ids])
        pred = np.where(svm.predict_margins(model, x) >= 0.0, 1.0, -1.0)
        pairs = [
            ("animal" if p > 0 else "unclassified", "animal" if t > 0 else "unclassified")
            for p, t in zip(pred, y)
        ]
        cm = mt.accumulate(pairs, ["animal", "unclassified"])
        bc = mt.binary_counts(cm, "animal")
        out[tag] = {
            "sensitivity": mt.sensitivity(bc),
            "specificity": mt.specificity(bc),
            "precision": mt.precision(bc),
            "accuracy": mt.accuracy(bc),
        }
    return out


def _mean(values):
    vals = [v for v in values if v is not None]
    return None if not vals else float(np.mean(vals))


def _aggregate(rows: List[dict], group_keys: Sequence[str], value_keys: Sequence[str]) -> List[dict]:
    groups = {}
    order = []
    for row in rows:
        key = tuple(row[k] for k in group_keys)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for key in order:
        rs = groups[key]
        agg = dict(zip(group_keys, key))
        agg["n_trials"] = len(rs)
        for vk in value_keys:
            vals = [r[vk] for r in rs if r.get(vk) is not None]
            agg[f"{vk}_mean"] = _mean(vals)
            agg[f"{vk}_min"] = None if not vals else float(min(vals))
            agg[f"{vk}_max"] = None if not vals else float(max(vals))
        out.append(agg)
    return out


def _run_trials(cfg: ExperimentConfig, trial_fn, trial_args: List[tuple]) -> List[dict]:
    """Run trials (possibly in parallel); result order follows trial_args."""
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(lambda a: trial_fn(*a), trial_args))
    return [trial_fn(*a) for a in trial_args]


# ---------------------------------------------------------------------------
# detector protocols


def run_volume_sweep(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    """Detector metrics as the corpus volume grows (subsample, 70:30, train)."""
    ctx = ctx or PipelineContext(cfg)
    for rid in ctx.manifest.ids():
        ctx.image_feature(rid)

    def trial(fraction, trial_idx):
        seed = cfg.base_seed + trial_idx
        sub = mf.subsample_fraction(ctx.manifest, fraction, seed, "presence")
        split = mf.stratified_split(sub, cfg.split_fraction, seed, "presence")
        m = _detector_metrics(ctx, split.train, split.validation, seed)
        row = {"fraction": fraction, "trial": trial_idx, "seed": seed, "n_images": len(sub)}
        row.update({k: v for k, v in m["test"].items()})
        return row

    args = [(f, t) for f in cfg.fractions for t in range(cfg.n_seeds)]
    rows = _run_trials(cfg, trial, args)
    metrics_keys = ["sensitivity", "specificity", "precision", "accuracy"]
    return Report(
        protocol="volume",
        config=cfg.resolved(),
        version=__version__,
        rows=rows,
        aggregates=_aggregate(rows, ["fraction"], metrics_keys),
    )


def run_proportion_sweep(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    """Fixed validation set; training subset varied."""
    ctx = ctx or PipelineContext(cfg)
    for rid in ctx.manifest.ids():
        ctx.image_feature(rid)

    def trial(proportion, trial_idx):
        seed = cfg.base_seed + trial_idx
        split = mf.stratified_split(ctx.manifest, cfg.split_fraction, seed, "presence")
        pool = mf.select_records(ctx.manifest, split.train)
        sub = mf.subsample_fraction(pool, proportion, seed, "presence")
        m = _detector_metrics(ctx, sub.ids(), split.validation, seed)
        row = {"proportion": proportion, "trial": trial_idx, "seed": seed, "n_train": len(sub)}
        row.update(m["test"])
        return row

    args = [(p, t) for p in cfg.train_proportions for t in range(cfg.n_seeds)]
    rows = _run_trials(cfg, trial, args)
    metrics_keys = ["sensitivity", "specificity", "precision", "accuracy"]
    return Report(
        protocol="proportion",
        config=cfg.resolved(),
        version=__version__,
        rows=rows,
        aggregates=_aggregate(rows, ["proportion"], metrics_keys),
    )


def run_split_sweep(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    """Detector metrics across train:validation ratios; best ratio marked."""
    ctx = ctx or PipelineContext(cfg)
    for rid in ctx.manifest.ids():
        ctx.image_feature(rid)

    def trial(ratio, trial_idx):
        seed = cfg.base_seed + trial_idx
        split = mf.stratified_split(ctx.manifest, ratio, seed, "presence")
        m = _detector_metrics(ctx, split.train, split.validation, seed)
        row = {"train_ratio": ratio, "trial": trial_idx, "seed": seed}
        row.update(m["test"])
        return row

    args = [(r, t) for r in cfg.split_ratios for t in range(cfg.n_seeds)]
    rows = _run_trials(cfg, trial, args)
    metrics_keys = ["sensitivity", "specificity", "precision", "accuracy"]
    aggregates = _aggregate(rows, ["train_ratio"], metrics_keys)
    best = max(aggregates, key=lambda a: (a["accuracy_mean"], -a["train_ratio"]))
    for a in aggregates:
        a["best"] = int(a["train_ratio"] == best["train_ratio"])
    report = Report(
        protocol="split",
        config=cfg.resolved(),
        version=__version__,
        rows=rows,
        aggregates=aggregates,
    )
    report.notes.append(f"best_train_ratio {best['train_ratio']!r}")
    return report


def run_illumination_study(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    """Day-only, night-only and mixed detector runs, balanced positives and
    negatives, training and test accuracy per sub-dataset."""
    ctx = ctx or PipelineContext(cfg)
    subsets = [("daylight", "day"), ("night", "night"), ("mixed", None)]

    def trial(name, illum, trial_idx):
        seed = cfg.base_seed + trial_idx
        man = ctx.manifest if illum is None else mf.filter_manifest(ctx.manifest, illumination=illum)
        counts = {True: 0, False: 0}
        for r in man:
            counts[r.has_animal] += 1
        if counts[True] < 2 or counts[False] < 2:
            return {"subset": name, "trial": trial_idx, "seed": seed, "n_images": len(man),
                    "training_accuracy": None, "test_accuracy": None, "skipped": 1}
        balanced = mf.balance_classes(man, "presence", seed)
        split = mf.stratified_split(balanced, cfg.split_fraction, seed, "presence")
        m = _detector_metrics(ctx, split.train, split.validation, seed)
        return {
            "subset": name,
            "trial": trial_idx,
            "seed": seed,
            "n_images": len(balanced),
            "training_accuracy": m["train"]["accuracy"],
            "test_accuracy": m["test"]["accuracy"],
            "skipped": 0,
        }

    args = [(n, il, t) for (n, il) in subsets for t in range(cfg.n_seeds)]
    rows = _run_trials(cfg, trial, args)
    aggregates = _aggregate(rows, ["subset"], ["training_accuracy", "test_accuracy"])
    for agg in aggregates:
        agg["skipped"] = int(all(r["skipped"] for r in rows if r["subset"] == agg["subset"]))
    return Report(
        protocol="illumination",
        config=cfg.resolved(),
        version=__version__,
        rows=rows,
        aggregates=aggregates,
    )


# ---------------------------------------------------------------------------
# species identification


def _train_species_heads(ctx, cfg, train_ids, seed):
    by_id = ctx.by_id
    species = sorted({by_id[i].species for i in train_ids} - {"unclassified"})
    all_classes = species + ["unclassified"]
    head_cfg = wsddn.HeadTrainConfig(
        epochs=cfg.head_epochs, learning_rate=cfg.head_lr, seed=seed, l2=cfg.head_l2
    )
    # (a) gate head: species only, image-level features, positives only
    pos_ids = [i for i in train_ids if by_id[i].has_animal]
    gate_ds = [
        (
            ft.RegionFeatures(
                regions=(ft.full_image_region(ctx.images[i]),),
                matrix=ctx.image_feature(i)[None, :],
            ),
            wsddn.one_hot(by_id[i].species, species),
        )
        for i in pos_ids
    ]
    gate_head = wsddn.train_head(gate_ds, species, head_cfg)
    # (b) direct head: all classes, image-level features
    direct_ds = [
        (
            ft.RegionFeatures(
                regions=(ft.full_image_region(ctx.images[i]),),
                matrix=ctx.image_feature(i)[None, :],
            ),
            wsddn.one_hot(by_id[i].species, all_classes),
        )
        for i in train_ids
    ]
    direct_head = wsddn.train_head(direct_ds, all_classes, head_cfg)
    # (c/d) WSDDN head: all classes, region features
    region_ds = [
        (ctx.region_features(i), wsddn.one_hot(by_id[i].species, all_classes))
        for i in train_ids
    ]
    region_head = wsddn.train_head(region_ds, all_classes, head_cfg)
    # detector for the gate
    x_tr = np.stack([ctx.image_feature(i) for i in train_ids])
    y_tr = np.array([_presence_label(by_id[i]) for i in train_ids])
    detector = svm.train_linear_svm(
        x_tr, y_tr, svm.SvmTrainConfig(epochs=cfg.svm_epochs, lam=cfg.svm_lambda, seed=seed)
    )
    return species, all_classes, detector, gate_head, direct_head, region_head


def run_species_comparison(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    """Four classifier variants compared per class:
    detector_gated  - detector first; negatives become unclassified, else the
                      species-only head predicts (per-class binary accuracy)
    direct          - one head over species+unclassified on image-level
                      features (per-class binary accuracy; confusion emitted)
    wsddn_top1/5    - two-stream region head with top-K aggregation; per-class
                      top-k accuracy = fraction of that class's images whose
                      top-k ranking contains it
    """
    ctx = ctx or PipelineContext(cfg)
    by_id = ctx.by_id
    agg_cfg = wsddn.AggregationConfig(k=cfg.k)
    report = Report(protocol="species", config=cfg.resolved(), version=__version__)

    for trial_idx in range(cfg.n_seeds):
        seed = cfg.base_seed + trial_idx
        split = mf.stratified_split(ctx.manifest, cfg.split_fraction, seed, "species")
        species, all_classes, detector, gate_head, direct_head, region_head = _train_species_heads(
            ctx, cfg, list(split.train), seed
        )
        gated_pairs, direct_pairs = [], []
        hits1 = {c: [0, 0] for c in all_classes}
        hits5 = {c: [0, 0] for c in all_classes}
        k5 = min(5, len(all_classes))
        for i in split.validation:
            true = by_id[i].species
            fvec = ctx.image_feature(i)
            # (a) detector gate
            if svm.predict_margin(detector, fvec) < 0.0:
                gated = "unclassified"
            else:
                rf1 = ft.RegionFeatures(
                    regions=(ft.full_image_region(ctx.images[i]),), matrix=fvec[None, :]
                )
                s = wsddn.score_regions(rf1, gate_head)
                gated = wsddn.predict_topk(wsddn.aggregate_sum(s, species), 1)[0]
            gated_pairs.append((gated, true))
            # (b) direct
            rf1 = ft.RegionFeatures(
                regions=(ft.full_image_region(ctx.images[i]),), matrix=fvec[None, :]
            )
            s = wsddn.score_regions(rf1, direct_head)
            direct_pairs.append((wsddn.predict_topk(wsddn.aggregate_sum(s, all_classes), 1)[0], true))
            # (c, d) WSDDN top-k
            s = wsddn.score_regions(ctx.region_features(i), region_head)
            ranked = wsddn.predict_topk(wsddn.aggregate_topk(s, all_classes, agg_cfg), k5)
            hits1[true][0] += ranked[0] == true
            hits1[true][1] += 1
            hits5[true][0] += true in ranked
            hits5[true][1] += 1
        gated_cm = mt.accumulate(gated_pairs, all_classes)
        direct_cm = mt.accumulate(direct_pairs, all_classes)
        for c in all_classes:
            row = {
                "trial": trial_idx,
                "seed": seed,
                "class": c,
                "detector_gated": mt.accuracy(mt.binary_counts(gated_cm, c)),
                "direct": mt.accuracy(mt.binary_counts(direct_cm, c)),
                "wsddn_top1": hits1[c][0] / hits1[c][1] if hits1[c][1] else None,
                "wsddn_top5": hits5[c][0] / hits5[c][1] if hits5[c][1] else None,
            }
            report.rows.append(row)
        if trial_idx == 0:
            report.confusions["direct"] = direct_cm
    report.aggregates = _aggregate(
        report.rows, ["class"], ["detector_gated", "direct", "wsddn_top1", "wsddn_top5"]
    )
    return report


# ---------------------------------------------------------------------------
# individual recognition


def _train_patch_detector(ctx, cfg, train_ids, seed):
    """Patch-level detector from planted ground-truth boxes."""
    rng = np.random.default_rng(np.uint64(seed))
    rows, labs = [], []
    for i in train_ids:
        box = ctx.boxes.get(i)
        if box is None:
            continue
        img = ctx.images[i]
        grid = seg.grid_for(img, cfg.patch_size)
        rf = ft.extract_region_features(img, grid.regions(), ctx.params, ctx.pyramid)
        x0, y0, x1, y1 = box
        pos, neg = [], []
        for idx, reg in enumerate(rf.regions):
            if reg.x0 >= x0 and reg.x1 <= x1 and reg.y0 >= y0 and reg.y1 <= y1:
                pos.append(idx)
            elif reg.x1 <= x0 or reg.x0 >= x1 or reg.y1 <= y0 or reg.y0 >= y1:
                neg.append(idx)
        take = min(len(pos), len(neg), 8)
        if take == 0:
            continue
        for idx in rng.choice(pos, take, replace=False):
            rows.append(rf.matrix[idx])
            labs.append(1.0)
        for idx in rng.choice(neg, take, replace=False):
            rows.append(rf.matrix[idx])
            labs.append(-1.0)
    if not rows:
        raise ValueError("segmented variant requires ground-truth boxes (synthetic corpus)")
    return svm.train_linear_svm(
        np.stack(rows), np.array(labs), svm.SvmTrainConfig(epochs=cfg.svm_epochs, lam=cfg.svm_lambda, seed=seed)
    )


def _segmented_region_features(ctx, cfg, rid, patch_detector):
    img = ctx.images[rid]
    mask = seg.segment_image(
        img, patch_detector, ctx.params, ctx.pyramid, patch_size=cfg.patch_size
    )
    masked = seg.apply_mask(img, mask)
    regions = ft.propose_regions(img.shape[1], img.shape[0], cfg.region_scales, cfg.region_stride)
    return ft.extract_region_features(masked, regions, ctx.params, ctx.pyramid)


def _individual_run(ctx, cfg, man, classes, seed, balanced, segmented):
    """Train one individuals head and evaluate per-individual metrics."""
    by_id = ctx.by_id
    split = mf.stratified_split(man, cfg.split_fraction, seed, "individual")
    train_man = mf.select_records(man, split.train)
    if balanced:
        train_man = mf.balance_classes(train_man, "individual", seed)
    patch_detector = None
    feats = ctx.region_features
    if segmented:
        patch_detector = _train_patch_detector(ctx, cfg, train_man.ids(), seed)
        cache = {}

        def feats(rid):
            if rid not in cache:
                cache[rid] = _segmented_region_features(ctx, cfg, rid, patch_detector)
            return cache[rid]

    head_cfg = wsddn.HeadTrainConfig(
        epochs=cfg.head_epochs, learning_rate=cfg.head_lr, seed=seed, l2=cfg.head_l2
    )
    ds = [(feats(i), wsddn.one_hot(by_id[i].individual, classes)) for i in train_man.ids()]
    head = wsddn.train_head(ds, classes, head_cfg)
    agg_cfg = wsddn.AggregationConfig(k=cfg.k)
    pairs = []
    for i in split.validation:
        s = wsddn.score_regions(feats(i), head)
        pairs.append((wsddn.predict_topk(wsddn.aggregate_topk(s, classes, agg_cfg), 1)[0], by_id[i].individual))
    cm = mt.accumulate(pairs, classes)
    train_counts = {c: 0 for c in classes}
    for i in train_man.ids():
        train_counts[by_id[i].individual] += 1
    return cm, train_counts


def run_individual_study(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    """{balanced, unbalanced} x {raw, segmented} x {tiger, leopard, joint}
    individual-recognition grid, per-individual counts and measures."""
    ctx = ctx or PipelineContext(cfg)
    by_id = ctx.by_id
    report = Report(protocol="individual", config=cfg.resolved(), version=__version__)
    species_opts = []
    for sp in ("tiger", "leopard"):
        if any(r.species == sp and r.individual for r in ctx.manifest):
            species_opts.append((sp, (sp,)))
    if len(species_opts) == 2:
        species_opts.append(("joint", ("tiger", "leopard")))

    for sp_name, sp_set in species_opts:
        man = mf.filter_manifest(ctx.manifest, species=sp_set)
        man = mf.Manifest(tuple(r for r in man if r.individual), man.provenance)
        classes = sorted({r.individual for r in man})
        if len(classes) < 2:
            raise ValueError(f"{sp_name}: need at least 2 individuals")
        for balanced in (False, True):
            for segmented in (False, True) if cfg.segment else (False,):
                for trial_idx in range(cfg.n_seeds):
                    seed = cfg.base_seed + trial_idx
                    cm, train_counts = _individual_run(
                        ctx, cfg, man, classes, seed, balanced, segmented
                    )
                    for c in classes:
                        bc = mt.binary_counts(cm, c)
                        report.rows.append(
                            {
                                "species": sp_name,
                                "balanced": int(balanced),
                                "segmented": int(segmented),
                                "trial": trial_idx,
                                "seed": seed,
                                "individual": c,
                                "train_images": train_counts[c],
                                "tp": bc.tp,
                                "tn": bc.tn,
                                "fp": bc.fp,
                                "fn": bc.fn,
                                "sensitivity": mt.sensitivity(bc),
                                "specificity": mt.specificity(bc),
                                "precision": mt.precision(bc),
                                "accuracy": mt.accuracy(bc),
                            }
                        )
        if cfg.sweep_individuals:
            for n in range(2, len(classes) + 1):
                subset = classes[:n]
                sub_man = mf.Manifest(
                    tuple(r for r in man if r.individual in set(subset)), man.provenance
                )
                seed = cfg.base_seed
                cm, _ = _individual_run(ctx, cfg, sub_man, subset, seed, True, False)
                sens = [mt.sensitivity(mt.binary_counts(cm, c)) for c in subset]
                accs = [mt.accuracy(mt.binary_counts(cm, c)) for c in subset]
                report.rows.append(
                    {
                        "species": sp_name,
                        "balanced": 1,
                        "segmented": 0,
                        "trial": -1,
                        "seed": seed,
                        "individual": f"sweep_n={n}",
                        "train_images": 0,
                        "tp": 0,
                        "tn": 0,
                        "fp": 0,
                        "fn": 0,
                        "sensitivity": _mean(sens),
                        "specificity": None,
                        "precision": None,
                        "accuracy": _mean(accs),
                    }
                )
    report.aggregates = _aggregate(
        [r for r in report.rows if r["trial"] >= 0],
        ["species", "balanced", "segmented", "individual"],
        ["sensitivity", "specificity", "precision", "accuracy"],
    )
    return report


def run_joint_individuals(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    """Single head over the union of tiger and leopard individuals;
    per-individual sensitivity and specificity, sorted by sensitivity."""
    ctx = ctx or PipelineContext(cfg)
    man = mf.Manifest(
        tuple(r for r in ctx.manifest if r.individual), ctx.manifest.provenance
    )
    n_species = len({r.species for r in man})
    if n_species < 2:
        raise ValueError("joint study needs individuals from 2 species")
    classes = sorted({r.individual for r in man})
    report = Report(protocol="joint-individuals", config=cfg.resolved(), version=__version__)
    for trial_idx in range(cfg.n_seeds):
        seed = cfg.base_seed + trial_idx
        cm, train_counts = _individual_run(
            ctx, cfg, man, classes, seed, cfg.balance, cfg.segment
        )
        trial_rows = []
        for c in classes:
            bc = mt.binary_counts(cm, c)
            trial_rows.append(
                {
                    "trial": trial_idx,
                    "seed": seed,
                    "individual": c,
                    "train_images": train_counts[c],
                    "sensitivity": mt.sensitivity(bc),
                    "specificity": mt.specificity(bc),
                    "accuracy": mt.accuracy(bc),
                }
            )
        trial_rows.sort(key=lambda r: (-(r["sensitivity"] if r["sensitivity"] is not None else -1.0), r["individual"]))
        report.rows.extend(trial_rows)
    report.aggregates = _aggregate(report.rows, ["individual"], ["sensitivity", "specificity", "accuracy"])
    return report


RUNNERS = {
    "volume": run_volume_sweep,
    "proportion": run_proportion_sweep,
    "split": run_split_sweep,
    "illumination": run_illumination_study,
    "species": run_species_comparison,
    "individual": run_individual_study,
    "joint-individuals": run_joint_individuals,
}


def run_protocol(cfg: ExperimentConfig, ctx: Optional[PipelineContext] = None) -> Report:
    return RUNNERS[cfg.protocol](cfg, ctx)


# ---------------------------------------------------------------------------
# report output


def _csv_value(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(float(v))
    return v


def _write_rows_csv(path, rows: List[dict]) -> None:
    if not rows:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_csv_value(row.get(f)) for f in fields])


def write_report(report: Report, out_dir) -> List[str]:
    """Write trial CSV, aggregate CSV, confusion matrices, the resolved
    config and a run manifest; returns the file list."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    trials_path = out / f"{report.protocol}_trials.csv"
    _write_rows_csv(trials_path, report.rows)
    files.append(trials_path.name)
    agg_path = out / f"{report.protocol}_aggregate.csv"
    _write_rows_csv(agg_path, report.aggregates)
    files.append(agg_path.name)
    for name, cm in report.confusions.items():
        p = out / f"{report.protocol}_confusion_{name}.csv"
        mt.write_confusion_csv(cm, p)
        files.append(p.name)
    cfg_path = out / "config.json"
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump({"version": report.version, "config": report.config}, fh, indent=2, sort_keys=True, default=repr)
        fh.write("\n")
    files.append(cfg_path.name)
    man_path = out / "run_manifest.txt"
    with open(man_path, "w", encoding="utf-8") as fh:
        fh.write(f"camtrap-run v1\nprotocol {report.protocol}\nversion {report.version}\n")
        for note in report.notes:
            fh.write(f"note {note}\n")
        for f in files:
            fh.write(f"file {f}\n")
    files.append(man_path.name)
    return files
