"""Command-line entry point.

Every subcommand is a thin adapter over the library: parse flags, read and
write files, call one module.  Exit codes: 0 success, 1 usage error, 2 data
error.  All randomness sits behind ``--seed``; ``--jobs N`` caps parallel
trials and N=1 is the bit-exactness baseline.  The ``CAMTRAP_OUT``
environment variable overrides the default output directory.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import features as ft
from . import manifest as mf
from . import metrics as mt
from . import segmentation as seg
from . import svm
from . import synth
from . import wsddn

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

OUT_ENV = "CAMTRAP_OUT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; we reserve 2 for data errors."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _default_out() -> str:
    return os.environ.get(OUT_ENV, ".")


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"--fraction must lie in (0,1), got {text}")
    return v


def _int_tuple(text: str):
    return tuple(int(t) for t in text.split(","))


def _float_tuple(text: str):
    return tuple(float(t) for t in text.split(","))


# ---------------------------------------------------------------------------
# config files: one `key = value` per line, # comments, comma lists


def parse_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {raw.rstrip()!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = _coerce(val.strip())
    return values


def _coerce(text: str):
    if text and text[0] in "'\"" and text[-1] == text[0] and len(text) >= 2:
        return text[1:-1]
    if "," in text:
        return tuple(_coerce(t.strip()) for t in text.split(","))
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


# ---------------------------------------------------------------------------
# shared helpers


def _load_corpus(args):
    man = mf.load_manifest(args.manifest)
    root = args.images if args.images else str(Path(args.manifest).parent)
    images = synth.load_images(man, root)
    return man, images


def _net_and_pyramid(args):
    params = ft.init_convnet(args.channels, seed=args.net_seed)
    pyramid = ft.PyramidConfig(args.levels)
    return params, pyramid


def _image_features(man, images, params, pyramid):
    feats = {}
    for rid in man.ids():
        img = images[rid]
        rf = ft.extract_region_features(img, [ft.full_image_region(img)], params, pyramid)
        feats[rid] = rf.matrix[0]
    return feats


def _add_net_flags(p):
    p.add_argument("--channels", type=_int_tuple, default=(3, 8, 16), help="conv channel chain, e.g. 3,8,16")
    p.add_argument("--levels", type=_int_tuple, default=(1, 2), help="pyramid grid sizes, e.g. 1,2")
    p.add_argument("--net-seed", type=int, default=0, help="seed for the frozen conv weights")


def _add_region_flags(p):
    p.add_argument("--scales", type=_float_tuple, default=(0.5,), help="window scales, e.g. 0.5,0.75")
    p.add_argument("--stride", type=float, default=0.5, help="stride as a fraction of the window")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    specs = synth.default_species_specs(args.individuals, args.images_per_individual)
    cfg = synth.SynthConfig(
        image_size=args.image_size,
        species_specs=specs,
        n_negatives=args.negatives,
        night_fraction=args.night_fraction,
        seed=args.seed,
    )
    out = Path(args.out)
    synth.generate_corpus(cfg, out_dir=out)
    n = sum(s.n_images for s in specs) + args.negatives
    print(f"wrote {n} images and manifest.csv to {out}")
    return EXIT_OK


def _cmd_split(args) -> int:
    man = mf.load_manifest(args.manifest)
    split = mf.stratified_split(man, args.fraction, args.seed, args.stratify_by)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mf.save_manifest(mf.select_records(man, split.train), out / "train.csv")
    mf.save_manifest(mf.select_records(man, split.validation), out / "validation.csv")
    print(f"train {len(split.train)} validation {len(split.validation)}")
    return EXIT_OK


def _cmd_train_detect(args) -> int:
    man, images = _load_corpus(args)
    params, pyramid = _net_and_pyramid(args)
    feats = _image_features(man, images, params, pyramid)
    x = np.stack([feats[r.id] for r in man])
    y = np.array([1.0 if r.has_animal else -1.0 for r in man])
    model = svm.train_linear_svm(x, y, svm.SvmTrainConfig(args.epochs, args.lam, args.seed))
    svm.save_model(model, args.out)
    pred = np.where(svm.predict_margins(model, x) >= 0.0, 1.0, -1.0)
    print(f"saved {args.out}; training accuracy {float((pred == y).mean())!r}")
    return EXIT_OK


def _train_head_command(args, label_of, class_names, region_level: bool) -> int:
    man, images = _load_corpus(args)
    params, pyramid = _net_and_pyramid(args)
    ds = []
    for r in man:
        img = images[r.id]
        if region_level:
            regions = ft.propose_regions(img.shape[1], img.shape[0], args.scales, args.stride)
        else:
            regions = [ft.full_image_region(img)]
        rf = ft.extract_region_features(img, regions, params, pyramid)
        ds.append((rf, wsddn.one_hot(label_of(r), class_names)))
    cfg = wsddn.HeadTrainConfig(args.epochs, args.lr, args.seed, args.l2)
    head = wsddn.train_head(ds, class_names, cfg)
    wsddn.save_head(head, args.out)
    print(f"saved {args.out}; classes {' '.join(class_names)}; final loss {float(head.loss_by_epoch[-1])!r}")
    return EXIT_OK


def _cmd_train_species(args) -> int:
    man = mf.load_manifest(args.manifest)
    classes = sorted({r.species for r in man})
    if len(classes) < 2:
        raise ValueError("need images of at least 2 species")
    return _train_head_command(args, lambda r: r.species, classes, region_level=True)


def _cmd_train_individual(args) -> int:
    man = mf.load_manifest(args.manifest)
    if args.species:
        man = mf.filter_manifest(man, species=args.species.split(","))
        mf.save_manifest(man, Path(args.out).with_suffix(".manifest.csv"))
    labeled = [r for r in man if r.individual]
    if not labeled:
        raise ValueError("manifest has no individual labels")
    classes = sorted({r.individual for r in labeled})
    args.manifest_obj = man

    # rebuild the corpus restricted to labeled records
    def label_of(r):
        return r.individual

    sub = mf.Manifest(tuple(labeled), man.provenance)
    root = args.images if args.images else str(Path(args.manifest).parent)
    images = synth.load_images(sub, root)
    params, pyramid = _net_and_pyramid(args)
    ds = []
    for r in sub:
        img = images[r.id]
        regions = ft.propose_regions(img.shape[1], img.shape[0], args.scales, args.stride)
        rf = ft.extract_region_features(img, regions, params, pyramid)
        ds.append((rf, wsddn.one_hot(label_of(r), classes)))
    cfg = wsddn.HeadTrainConfig(args.epochs, args.lr, args.seed, args.l2)
    head = wsddn.train_head(ds, classes, cfg)
    wsddn.save_head(head, args.out)
    print(f"saved {args.out}; classes {' '.join(classes)}; final loss {float(head.loss_by_epoch[-1])!r}")
    return EXIT_OK


def _cmd_segment(args) -> int:
    image = synth.read_ppm(args.image)
    detector = svm.load_model(args.detector)
    params, pyramid = _net_and_pyramid(args)
    pp = seg.PairwiseParams(args.w, args.theta_pos, args.theta_color, args.iterations)
    mask = seg.segment_image(
        image, detector, params, pyramid,
        patch_size=args.patch_size, pp=pp, tau=args.tau, scale=args.scale,
    )
    seg.write_pbm(args.out, mask)
    print(f"wrote {args.out}; foreground fraction {float(mask.mean())!r}")
    return EXIT_OK


def _read_label_csv(path):
    """id,label rows; optional ranked columns label1..labelK."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "id" or len(header) < 2:
            raise ValueError(f"{path}: expected header id,label[,label2..]")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            if row[0] in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {row[0]!r}")
            out[row[0]] = row[1:]
    if not out:
        raise ValueError(f"{path}: no rows")
    return out


def _cmd_eval(args) -> int:
    pred = _read_label_csv(args.pred)
    truth = _read_label_csv(args.truth)
    if set(pred) != set(truth):
        raise ValueError("prediction and truth files cover different ids")
    ids = sorted(pred)
    classes = sorted({truth[i][0] for i in ids} | {pred[i][0] for i in ids})
    pairs = [(pred[i][0], truth[i][0]) for i in ids]
    cm = mt.accumulate(pairs, classes)
    report = mt.metrics_report(cm)
    sys.stdout.write(mt.format_summary(report))
    if args.k > 1:
        rankings = [pred[i] for i in ids]
        acc = mt.topk_accuracy(rankings, [truth[i][0] for i in ids], args.k)
        print(f"top-{args.k} accuracy {acc!r}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        mt.write_metrics_csv(report, out / "metrics.csv")
        mt.write_confusion_csv(cm, out / "confusion.csv")
        print(f"wrote metrics.csv and confusion.csv to {out}")
    return EXIT_OK


_CORPUS_KEYS = ("image_size", "n_negatives", "night_fraction", "corpus_seed",
                "individuals", "images_per_individual")


def _experiment_config(args) -> ex.ExperimentConfig:
    values = parse_config_file(args.config) if args.config else {}
    unknown = set(values) - set(ex.ExperimentConfig.__dataclass_fields__) - set(_CORPUS_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    synth_cfg = None
    if "manifest_path" not in values and not args.manifest:
        specs = synth.default_species_specs(
            int(values.get("individuals", 4)), int(values.get("images_per_individual", 10))
        )
        synth_cfg = synth.SynthConfig(
            image_size=int(values.get("image_size", 96)),
            species_specs=specs,
            n_negatives=int(values.get("n_negatives", 40)),
            night_fraction=float(values.get("night_fraction", 0.0)),
            seed=int(values.get("corpus_seed", args.seed)),
        )
    kwargs = {k: v for k, v in values.items() if k not in _CORPUS_KEYS}
    # normalize scalar config values where the field is a tuple
    for key in ("fractions", "train_proportions", "split_ratios", "channels",
                "pyramid_levels", "region_scales"):
        if key in kwargs and not isinstance(kwargs[key], tuple):
            kwargs[key] = (kwargs[key],)
    # flags override file values
    kwargs["protocol"] = args.protocol
    kwargs["base_seed"] = args.seed
    kwargs["jobs"] = args.jobs
    if args.manifest:
        kwargs["manifest_path"] = args.manifest
        kwargs["images_root"] = args.images
    if args.n_seeds is not None:
        kwargs["n_seeds"] = args.n_seeds
    kwargs["synth_config"] = synth_cfg
    return ex.ExperimentConfig(**kwargs)


def _cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    report = ex.run_protocol(cfg)
    files = ex.write_report(report, args.out)
    print(f"protocol {cfg.protocol}: {len(report.rows)} trial rows; wrote {' '.join(files)} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="camtrap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", default=_default_out(), help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--individuals", type=int, default=4, help="individuals per tagged species")
    p.add_argument("--images-per-individual", type=int, default=10)
    p.add_argument("--negatives", type=int, default=40, help="images with no animal")
    p.add_argument("--night-fraction", type=float, default=0.0)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("split", help="stratified train/validation split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=_fraction, default=0.7, help="train fraction, in (0,1)")
    p.add_argument("--stratify-by", choices=("species", "individual", "presence"), default="presence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(fn=_cmd_split)

    p = sub.add_parser("train-detect", help="train the animal/no-animal detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", default=None, help="image root (default: manifest directory)")
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lam", type=float, default=1e-3, help="regularization strength")
    _add_net_flags(p)
    p.set_defaults(fn=_cmd_train_detect)

    for name, fn, extra in (
        ("train-species", _cmd_train_species, "species-identification head"),
        ("train-individual", _cmd_train_individual, "individual-recognition head"),
    ):
        p = sub.add_parser(name, help=f"train the {extra}")
        p.add_argument("--manifest", required=True)
        p.add_argument("--images", default=None)
        p.add_argument("--out", required=True, help="head output path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=1200)
        p.add_argument("--lr", type=float, default=8.0)
        p.add_argument("--l2", type=float, default=1e-4)
        if name == "train-individual":
            p.add_argument("--species", default=None, help="comma list, e.g. tiger,leopard")
        _add_net_flags(p)
        _add_region_flags(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("segment", help="segment one image with a patch detector")
    p.add_argument("--image", required=True, help="PPM input")
    p.add_argument("--detector", required=True, help="patch-level linear model")
    p.add_argument("--out", required=True, help="PBM mask output")
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--w", type=float, default=2.0, help="pairwise coupling weight")
    p.add_argument("--theta-pos", type=float, default=2.0)
    p.add_argument("--theta-color", type=float, default=0.15)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--tau", type=float, default=0.5, help="foreground threshold")
    p.add_argument("--scale", type=float, default=1.0, help="margin-to-probability scale")
    _add_net_flags(p)
    p.set_defaults(fn=_cmd_segment)

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("--pred", required=True, help="CSV id,label[,label2..] (ranked)")
    p.add_argument("--truth", required=True, help="CSV id,label")
    p.add_argument("--k", type=int, default=1, help="also report top-k accuracy when k > 1")
    p.add_argument("--out", default=None, help="directory for metrics.csv and confusion.csv")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("experiment", help="run a scripted protocol")
    p.add_argument("protocol", choices=ex.PROTOCOLS)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--manifest", default=None, help="use this corpus instead of a synthetic one")
    p.add_argument("--images", default=None)
    p.add_argument("--n-seeds", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel trials; 1 is the reference")
    p.add_argument("--out", default=_default_out())
    p.set_defaults(fn=_cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (mf.ManifestError, ValueError, OSError) as exc:
        print(f"camtrap {args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
