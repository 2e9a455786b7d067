"""Adam, step learning-rate schedule, augmentation, training loop and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset
from .errors import ContractError, DataError, ShapeError
from .geometry import PointCloud
from .model import CloudPlan, Model, plan_cloud, predict, save_params
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "split", "loss", "oa", "acc", "miou", "lr")

# named random sub-streams derived from the run seed
STREAMS = {"data": 0, "init": 1, "augment": 2, "shuffle": 3, "dropout": 4}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1000 + STREAMS[name]])


@dataclass(frozen=True)
class TrainConfig:
    task: str = "classification"
    initial_lr: float = 1e-3
    decay_factor: float = 0.7
    decay_every_epochs: int = 20
    epochs: int = 150
    batch_size: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    dropout_max_ratio: float = 0.875
    shift_range: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        if not 0 < self.decay_factor <= 1:
            raise ContractError(f"decay_factor {self.decay_factor} outside (0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every_epochs < 1:
            raise ContractError("batch_size, epochs and decay_every_epochs must be >= 1")
        if not 0 <= self.dropout_max_ratio < 1:
            raise ContractError(f"dropout_max_ratio {self.dropout_max_ratio} outside [0, 1)")

    def replace(self, **changes) -> TrainConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        return cls(**d)


def classification_training(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        task="classification",
        initial_lr=0.001,
        decay_factor=0.7,
        decay_every_epochs=20,
        epochs=150,
        batch_size=20,
    )
    return cfg.replace(**overrides)


def segmentation_training(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        task="segmentation",
        initial_lr=0.0005,
        decay_factor=0.5,
        decay_every_epochs=20,
        epochs=120,
        batch_size=8,
        dropout_max_ratio=0.0,
    )
    return cfg.replace(**overrides)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> AdamState:
        return cls(cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# augmentation


def augment(pc: PointCloud, cfg: TrainConfig, rng: np.random.Generator) -> PointCloud:
    """Random point dropout, global scale and per-axis shift (training only).

    Dropped points are replaced by the first point (and its label).
    """
    if not cfg.augment:
        return pc
    coords = pc.coords.copy()
    labels = None if pc.point_labels is None else pc.point_labels.copy()
    if cfg.dropout_max_ratio > 0:
        ratio = rng.random() * cfg.dropout_max_ratio
        drop = np.flatnonzero(rng.random(len(coords)) <= ratio)
        if drop.size:
            coords[drop] = coords[0]
            if labels is not None:
                labels[drop] = labels[0]
    lo, hi = cfg.scale_range
    if (lo, hi) != (1.0, 1.0):
        coords = coords * rng.uniform(lo, hi)
    if cfg.shift_range > 0:
        coords = coords + rng.uniform(-cfg.shift_range, cfg.shift_range, 3)
    return PointCloud(coords, pc.attrs, labels, pc.cloud_label)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def classification_metrics(y_true, y_pred, num_classes: int) -> dict[str, float]:
    """Overall accuracy and mean per-class recall over classes that occur."""
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ContractError("cannot score an empty prediction set")
    cm = confusion_matrix(y_true, y_pred, num_classes)
    support = cm.sum(axis=1)
    present = support > 0
    recall = np.diag(cm)[present] / support[present]
    return {"oa": float(np.trace(cm) / cm.sum()), "acc": float(recall.mean())}


def shape_iou(pred, gt, parts: Sequence[int]) -> float:
    """Mean over the category's parts; a part absent from both counts as 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    bad = np.setdiff1d(gt, parts)
    if bad.size:
        raise DataError(f"ground-truth labels {bad.tolist()} outside part set {list(parts)}")
    ious = []
    for part in parts:
        p, g = pred == part, gt == part
        union = np.count_nonzero(p | g)
        ious.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(ious))


def segmentation_miou(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    categories: Sequence[str],
    part_map: Mapping[str, Sequence[int]],
) -> dict:
    """Instance mIoU (mean over shapes) and per-category IoU (mean within a category)."""
    if not preds:
        raise ContractError("cannot score an empty prediction set")
    per_shape = [shape_iou(p, g, part_map[c]) for p, g, c in zip(preds, gts, categories)]
    cat: dict[str, list[float]] = {}
    for c, v in zip(categories, per_shape):
        cat.setdefault(c, []).append(v)
    category_iou = {c: float(np.mean(v)) for c, v in cat.items()}
    return {
        "instance_miou": float(np.mean(per_shape)),
        "category_iou": category_iou,
        "class_miou": float(np.mean(list(category_iou.values()))),
        "shape_iou": per_shape,
    }


def restricted_predict(logits: np.ndarray, parts: Sequence[int]) -> np.ndarray:
    """Per-point arg-max among the category's own part labels."""
    parts = np.asarray(parts)
    return parts[np.argmax(logits[:, parts], axis=1)]


def plan_dataset(model: Model, dataset: Dataset) -> list[CloudPlan]:
    """Geometry plans for every sample, for datasets scored repeatedly."""
    return [plan_cloud(pc, model.cfg) for pc in dataset.samples]


def _plans(dataset: Dataset, plans):
    return plans if plans is not None else [None] * len(dataset)


def evaluate_classification(model: Model, dataset: Dataset, plans=None) -> dict[str, float]:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    y_true, y_pred, losses = [], [], []
    with no_grad():
        for pc, plan in zip(dataset.samples, _plans(dataset, plans)):
            logits = model(pc, plan=plan)
            losses.append(model.loss(logits, pc).item())
            y_true.append(pc.cloud_label)
            y_pred.append(predict(logits))
    out = classification_metrics(y_true, y_pred, model.cfg.num_classes)
    out["loss"] = float(np.mean(losses))
    return out


def evaluate_segmentation(model: Model, dataset: Dataset, plans=None) -> dict:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    preds, gts, cats, losses = [], [], [], []
    correct = total = 0
    with no_grad():
        for pc, plan in zip(dataset.samples, _plans(dataset, plans)):
            logits = model(pc, plan=plan)
            losses.append(model.loss(logits, pc).item())
            cat = dataset.class_names[pc.cloud_label]
            pred = restricted_predict(logits.data, dataset.part_map[cat])
            preds.append(pred)
            gts.append(pc.point_labels)
            cats.append(cat)
            correct += int(np.count_nonzero(pred == pc.point_labels))
            total += len(pred)
    out = segmentation_miou(preds, gts, cats, dataset.part_map)
    out["point_acc"] = correct / total
    out["loss"] = float(np.mean(losses))
    return out


def evaluate(model: Model, dataset: Dataset, plans: Sequence[CloudPlan] | None = None) -> dict:
    """Test metrics; ``plans`` (from :func:`plan_dataset`) skips recomputing geometry."""
    if model.cfg.task == "classification":
        return evaluate_classification(model, dataset, plans)
    return evaluate_segmentation(model, dataset, plans)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Trainer:
    """Owns the optimizer state and the augmentation/shuffle/dropout streams."""

    model: Model
    cfg: TrainConfig
    state: AdamState = None
    epoch: int = 0

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.from_config(self.cfg)
        self.rng_augment = stream(self.cfg.seed, "augment")
        self.rng_shuffle = stream(self.cfg.seed, "shuffle")
        self.rng_dropout = stream(self.cfg.seed, "dropout")

    def train_epoch(self, dataset: Dataset) -> dict[str, float]:
        """One pass over ``dataset``; returns mean loss and training accuracy."""
        if len(dataset) == 0:
            raise ContractError("cannot train on an empty dataset")
        model, cfg = self.model, self.cfg
        lr = lr_at_epoch(cfg, self.epoch)
        order = self.rng_shuffle.permutation(len(dataset))
        losses, correct, total = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            model.zero_grad()
            for i in batch:
                pc = augment(dataset.samples[i], cfg, self.rng_augment)
                logits = model(pc, self.rng_dropout)
                loss = model.loss(logits, pc)
                backward(loss)
                losses.append(loss.item())
                if model.cfg.task == "classification":
                    correct += int(predict(logits) == pc.cloud_label)
                    total += 1
                else:
                    correct += int(np.count_nonzero(predict(logits) == pc.point_labels))
                    total += len(pc)
            grads = {
                name: p.grad / len(batch)
                for name, p in model.params.items()
                if p.grad is not None
            }
            adam_step(model.params, grads, self.state, lr)
        self.epoch += 1
        return {"loss": float(np.mean(losses)), "oa": correct / total, "lr": lr}


def train_epoch(model: Model, dataset: Dataset, cfg: TrainConfig, trainer: Trainer | None = None) -> dict:
    trainer = trainer or Trainer(model, cfg)
    return trainer.train_epoch(dataset)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


def metrics_row(epoch: int, split: str, metrics: Mapping, lr: float, task: str) -> dict:
    if task == "classification":
        return {"epoch": epoch, "split": split, "loss": metrics.get("loss"), "oa": metrics.get("oa"),
                "acc": metrics.get("acc"), "miou": None, "lr": lr}
    oa = metrics.get("point_acc", metrics.get("oa"))
    return {"epoch": epoch, "split": split, "loss": metrics.get("loss"), "oa": oa,
            "acc": None, "miou": metrics.get("instance_miou"), "lr": lr}


def write_metrics_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) if k != "split" else r[k] for k in CSV_HEADER])


@dataclass
class FitResult:
    rows: list[dict]
    final: dict
    best: dict
    best_epoch: int


def fit(
    model: Model,
    train: Dataset,
    test: Dataset | None,
    cfg: TrainConfig,
    out_dir=None,
    eval_every: int = 1,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs, evaluating on ``test`` every ``eval_every`` epochs.

    With ``out_dir`` the metrics CSV and the best-epoch checkpoint are written there.
    The best epoch is chosen by test OA (classification) or instance mIoU (segmentation).
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, cfg)
    key = "oa" if model.cfg.task == "classification" else "instance_miou"
    # a deterministic FPS start makes the test geometry fixed, so plan it once
    plans = plan_dataset(model, test) if test is not None and not model.cfg.fps_random_start else None
    rows, best, best_epoch, final = [], None, -1, {}
    for epoch in range(cfg.epochs):
        tr = trainer.train_epoch(train)
        rows.append(metrics_row(epoch, "train", tr, tr["lr"], model.cfg.task))
        last = epoch == cfg.epochs - 1
        if test is not None and (last or (epoch + 1) % eval_every == 0):
            te = evaluate(model, test, plans)
            rows.append(metrics_row(epoch, "test", te, tr["lr"], model.cfg.task))
            log.info("epoch %d train loss %.4f test %s %.4f", epoch, tr["loss"], key, te[key])
            if best is None or te[key] > best[key]:
                best, best_epoch = te, epoch
                if out_dir is not None:
                    save_params(out_dir / "best.clcw", model.params)
            final = te
        else:
            log.info("epoch %d train loss %.4f", epoch, tr["loss"])
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", rows)
        save_params(out_dir / "last.clcw", model.params)
    return FitResult(rows, final, best or {}, best_epoch)
