"""Two-stream region scoring and weakly supervised training.

Region scores are the elementwise product of a recognition factor (softmax
across classes, per region) and a detection factor (softmax across regions,
per class).  Image-level scores come either from summing region scores or
from the modified rule: rank regions by their maximum class score, keep the
top K, average per class.  Training minimizes per-class binary cross-entropy
against the sum-aggregated scores with full-batch gradient descent; the
top-K rule is applied at inference only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .features import RegionFeatures

EPS = 1e-6


@dataclass
class TwoStreamHead:
    w_rec: np.ndarray  # D x C
    w_det: np.ndarray  # D x C
    class_names: Tuple[str, ...]
    loss_by_epoch: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if self.w_rec.shape != self.w_det.shape:
            raise ValueError("recognition and detection matrices must share a shape")
        if self.w_rec.shape[1] != len(self.class_names):
            raise ValueError("column count must equal the number of classes")

    @property
    def dim(self) -> int:
        return self.w_rec.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w_rec.shape[1]


@dataclass(frozen=True)
class RegionScoreMatrix:
    scores: np.ndarray  # R x C
    recognition: np.ndarray  # R x C, rows sum to 1
    detection: np.ndarray  # R x C, columns sum to 1


@dataclass(frozen=True)
class AggregationConfig:
    k: int = 30

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")


@dataclass(frozen=True)
class ClassScores:
    values: np.ndarray
    class_names: Tuple[str, ...]

    def __post_init__(self):
        if self.values.shape != (len(self.class_names),):
            raise ValueError("one value per class required")


def _softmax_rows(u: np.ndarray) -> np.ndarray:
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_cols(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-2, keepdims=True))
    return e / e.sum(axis=-2, keepdims=True)


def score_regions(rf: RegionFeatures, head: TwoStreamHead) -> RegionScoreMatrix:
    if rf.matrix.shape[1] != head.dim:
        raise ValueError(
            f"feature dim {rf.matrix.shape[1]} does not match head dim {head.dim}"
        )
    rec = _softmax_rows(rf.matrix @ head.w_rec)
    det = _softmax_cols(rf.matrix @ head.w_det)
    return RegionScoreMatrix(scores=rec * det, recognition=rec, detection=det)


def aggregate_sum(s: RegionScoreMatrix, class_names: Sequence[str]) -> ClassScores:
    values = np.clip(s.scores.sum(axis=0), EPS, 1.0 - EPS)
    return ClassScores(values=values, class_names=tuple(class_names))


def aggregate_topk(
    s: RegionScoreMatrix, class_names: Sequence[str], cfg: AggregationConfig = AggregationConfig()
) -> ClassScores:
    row_max = s.scores.max(axis=1)
    order = np.argsort(-row_max, kind="stable")  # ties -> lower region index
    k = min(cfg.k, s.scores.shape[0])
    values = s.scores[order[:k]].mean(axis=0)
    return ClassScores(values=values, class_names=tuple(class_names))


def predict_topk(cs: ClassScores, k: int) -> List[str]:
    c = len(cs.class_names)
    if not 1 <= k <= c:
        raise ValueError(f"k must lie in [1, {c}], got {k}")
    order = np.argsort(-cs.values, kind="stable")  # ties -> lower class index
    return [cs.class_names[i] for i in order[:k]]


def detect_region(s: RegionScoreMatrix, class_index: int) -> int:
    if not 0 <= class_index < s.scores.shape[1]:
        raise ValueError(f"class index {class_index} out of range")
    return int(np.argmax(s.scores[:, class_index]))


@dataclass(frozen=True)
class HeadTrainConfig:
    epochs: int = 500
    learning_rate: float = 0.5
    seed: int = 0
    l2: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.l2 < 0:
            raise ValueError("bad training config")


def _bce_loss_and_grad(x: np.ndarray, targets: np.ndarray, a: np.ndarray, b: np.ndarray, l2: float):
    """Loss and gradients for stacked features x (N,R,D) and one-hot targets
    (N,C) through the sum-aggregated two-stream scores."""
    n = x.shape[0]
    u = x @ a
    v = x @ b
    p = _softmax_rows(u)
    q = _softmax_cols(v)
    s = p * q
    ysum = s.sum(axis=1)
    y = np.clip(ysum, EPS, 1.0 - EPS)
    loss = -(targets * np.log(y) + (1.0 - targets) * np.log(1.0 - y)).sum(axis=1).mean()
    loss += 0.5 * l2 * (float((a * a).sum()) + float((b * b).sum()))

    g_y = (y - targets) / (y * (1.0 - y))
    g_y = np.where((ysum < EPS) | (ysum > 1.0 - EPS), 0.0, g_y)  # clamp is flat
    ds = g_y[:, None, :]
    dp = ds * q
    dq = ds * p
    du = p * (dp - (dp * p).sum(axis=2, keepdims=True))
    dv = q * (dq - (dq * q).sum(axis=1, keepdims=True))
    ga = np.einsum("nrd,nrc->dc", x, du) / n + l2 * a
    gb = np.einsum("nrd,nrc->dc", x, dv) / n + l2 * b
    return loss, ga, gb


def train_head(
    dataset: Sequence[Tuple[RegionFeatures, np.ndarray]],
    class_names: Sequence[str],
    cfg: HeadTrainConfig = HeadTrainConfig(),
) -> TwoStreamHead:
    """Full-batch gradient descent with seeded Glorot-uniform init.

    `dataset` pairs RegionFeatures with one-hot image labels over
    `class_names`.  All images must share a region count.
    """
    class_names = tuple(class_names)
    c = len(class_names)
    if c < 2:
        raise ValueError("need at least 2 classes")
    dims = {rf.matrix.shape[1] for rf, _ in dataset}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    d = dims.pop()
    counts = {rf.matrix.shape[0] for rf, _ in dataset}
    if len(counts) != 1:
        raise ValueError("all images must have the same region count")
    targets = np.stack([t for _, t in dataset]).astype(float)
    if targets.shape[1] != c:
        raise ValueError("target width must equal the number of classes")
    present = (targets.sum(axis=0) > 0).sum()
    if present < 2:
        raise ValueError("need examples of at least 2 classes")
    x = np.stack([rf.matrix for rf, _ in dataset])

    rng = np.random.default_rng(np.uint64(cfg.seed))
    bound = np.sqrt(6.0 / (d + c))
    a = rng.uniform(-bound, bound, size=(d, c))
    b = rng.uniform(-bound, bound, size=(d, c))

    history = []
    for _ in range(cfg.epochs):
        loss, ga, gb = _bce_loss_and_grad(x, targets, a, b, cfg.l2)
        history.append(loss)
        a = a - cfg.learning_rate * ga
        b = b - cfg.learning_rate * gb
    final_loss, _, _ = _bce_loss_and_grad(x, targets, a, b, cfg.l2)
    history.append(final_loss)
    return TwoStreamHead(w_rec=a, w_det=b, class_names=class_names, loss_by_epoch=history)


def one_hot(name: str, class_names: Sequence[str]) -> np.ndarray:
    t = np.zeros(len(class_names))
    t[list(class_names).index(name)] = 1.0
    return t


# ---------------------------------------------------------------------------
# serialization

_HEAD_MAGIC = "camtrap-two-stream-head v1"


def save_head(head: TwoStreamHead, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_HEAD_MAGIC + "\n")
        fh.write("classes " + " ".join(head.class_names) + "\n")
        fh.write(f"shape {head.dim} {head.n_classes}\n")
        fh.write(" ".join(repr(float(v)) for v in head.w_rec.ravel()) + "\n")
        fh.write(" ".join(repr(float(v)) for v in head.w_det.ravel()) + "\n")


def load_head(path) -> TwoStreamHead:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _HEAD_MAGIC:
        raise ValueError(f"{path}: not a {_HEAD_MAGIC} file")
    class_names = tuple(lines[1].split()[1:])
    d, c = (int(t) for t in lines[2].split()[1:])
    w_rec = np.array([float(t) for t in lines[3].split()]).reshape(d, c)
    w_det = np.array([float(t) for t in lines[4].split()]).reshape(d, c)
    return TwoStreamHead(w_rec=w_rec, w_det=w_det, class_names=class_names)
