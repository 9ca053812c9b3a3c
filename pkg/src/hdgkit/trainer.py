"""Train a linear open-set head on precomputed features and run
confidence-thresholded inference."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .hdge import EmbeddingKind, EmbeddingTable, load_container, save_embeddings
from .losses import (
    ClassifierHead,
    LossBreakdown,
    LossError,
    PerturbationConfig,
    total_loss,
    _row_softmax,
)
from .splits import EvalTask
from .teacher import TeacherScores


class TrainerError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


class Objective(str, enum.Enum):
    ERM = "erm"
    CLIPBASE = "clipbase"
    SCIPD = "scipd"


@dataclass(frozen=True)
class TrainerConfig:
    objective: Objective = Objective.SCIPD
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    # soft distillation targets cap the reachable max-softmax well below
    # 0.5, so the rejection bar sits above uniform (1/N) but below that cap
    unknown_threshold: float = 0.15

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainerError("bad_config", "epochs and batch_size must be >= 1")
        if not 0 < self.unknown_threshold < 1:
            raise TrainerError("bad_config", "unknown_threshold must be in (0, 1)")


@dataclass
class TrainedModel:
    head: ClassifierHead
    class_order: list[str]
    history: list[tuple[float, float]]  # per epoch: (train loss, val accuracy)
    selected_epoch: int  # 1-based, argmax val accuracy, lowest on ties
    config: TrainerConfig


@dataclass(frozen=True)
class PredictionRow:
    sample_id: str
    predicted: str | None  # class name, or None for UNKNOWN
    max_prob: float
    true_class: str


def _gather(task: EvalTask, which: str) -> list[tuple[str, str]]:
    groups = task.train_samples if which == "train" else task.val_samples
    out = []
    for dom in task.split.source_domains:
        out.extend(groups.get(dom, []))
    return out


def _features_for(table: EmbeddingTable, sample_ids: list[str]) -> np.ndarray:
    missing = [s for s in sample_ids if s not in table.rows]
    if missing:
        raise TrainerError("missing_feature", f"no feature row for sample '{missing[0]}'")
    return table.matrix(sample_ids)


def train(
    task: EvalTask,
    features: EmbeddingTable,
    teacher: TeacherScores | None,
    texts: EmbeddingTable | None,
    cfg: TrainerConfig,
) -> TrainedModel:
    """Mini-batch SGD with momentum on the head; batches drawn by a seeded
    shuffle each epoch, best-validation-accuracy checkpoint kept."""
    if cfg.objective != Objective.ERM and teacher is None:
        raise TrainerError("missing_scores", f"objective {cfg.objective.value} needs teacher scores")
    if cfg.objective == Objective.SCIPD and cfg.perturbation.beta > 0 and texts is None:
        raise TrainerError("missing_texts", "scipd with beta > 0 needs text embeddings")

    if teacher is not None:
        class_order = teacher.class_order
    elif texts is not None:
        class_order = texts.keys()
    else:
        raise TrainerError("missing_classes", "need teacher scores or texts to fix class order")
    n_classes = len(class_order)
    class_index = {c: i for i, c in enumerate(class_order)}

    train_rows = _gather(task, "train")
    val_rows = _gather(task, "val")
    if not train_rows:
        raise TrainerError("empty_train", "no training samples in task")
    train_ids = [s for s, _ in train_rows]
    x_train = _features_for(features, train_ids)
    y_train = np.array([class_index[c] for _, c in train_rows])
    x_val = _features_for(features, [s for s, _ in val_rows]) if val_rows else None
    y_val = np.array([class_index[c] for _, c in val_rows]) if val_rows else None

    d_f = features.dim
    d_t = texts.dim if texts is not None else d_f
    rng = np.random.default_rng(cfg.seed)
    w = rng.uniform(-1 / np.sqrt(d_t), 1 / np.sqrt(d_t), size=(n_classes, d_t))
    proj = None
    if d_f != d_t:
        proj = rng.uniform(-1 / np.sqrt(d_f), 1 / np.sqrt(d_f), size=(d_t, d_f))
    head = ClassifierHead(weights=w, projection=proj)

    teacher_probs = teacher.probs_for(train_ids) if teacher is not None else None
    texts_mat = texts.matrix(class_order) if texts is not None else None
    onehot = np.eye(n_classes)

    # scipd with beta=0 must not touch the class-perturbation path at all
    scipd_cfg = cfg.perturbation
    vel_w = np.zeros_like(head.weights)
    vel_p = np.zeros_like(head.projection) if proj is not None else None
    history: list[tuple[float, float]] = []
    best = (-1.0, -1)  # (val accuracy, epoch index)
    best_state = None

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train_rows))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            try:
                if cfg.objective == Objective.SCIPD:
                    bd = total_loss(xb, teacher_probs[idx], yb, head, texts_mat, scipd_cfg)
                else:
                    targets = teacher_probs[idx] if cfg.objective == Objective.CLIPBASE else onehot[yb]
                    bd = _plain_ce(xb, targets, head)
            except LossError as e:
                if e.code != "non_finite":
                    raise
                bd = None
            if bd is None or not np.isfinite(bd.total):
                raise TrainerError(
                    "diverged", f"non-finite loss at epoch {epoch + 1}, batch {n_batches}"
                )
            gw = bd.grad_weights + cfg.weight_decay * head.weights
            vel_w = cfg.momentum * vel_w - cfg.learning_rate * gw
            head.weights = head.weights + vel_w
            if proj is not None and bd.grad_projection is not None:
                gp = bd.grad_projection + cfg.weight_decay * head.projection
                vel_p = cfg.momentum * vel_p - cfg.learning_rate * gp
                head.projection = head.projection + vel_p
            epoch_loss += bd.total
            n_batches += 1
        val_acc = _closed_set_accuracy(head, x_val, y_val) if x_val is not None else 0.0
        history.append((epoch_loss / n_batches, val_acc))
        if val_acc > best[0]:
            best = (val_acc, epoch)
            best_state = (
                head.weights.copy(),
                head.projection.copy() if proj is not None else None,
            )
    if best_state is not None:
        head.weights, head.projection = best_state[0], best_state[1]
        selected = best[1] + 1
    else:
        selected = cfg.epochs
    return TrainedModel(
        head=head,
        class_order=class_order,
        history=history,
        selected_epoch=selected,
        config=cfg,
    )


def _plain_ce(xb: np.ndarray, targets: np.ndarray, head: ClassifierHead) -> LossBreakdown:
    """Mean soft cross-entropy against fixed target distributions (ERM
    one-hot or teacher distributions), with head gradients."""
    x = head.project(xb)
    logits = x @ head.weights.T
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))).ravel()
    loss = float(np.mean(lse - np.sum(targets * logits, axis=1)))
    grad_logits = (_row_softmax(logits) - targets) / xb.shape[0]
    grad_p = None
    if head.projection is not None:
        grad_p = (grad_logits @ head.weights).T @ xb
    return LossBreakdown(
        l_sip=loss,
        l_cp=0.0,
        total=loss,
        instance_weights=np.ones(xb.shape[0]),
        grad_logits=grad_logits,
        grad_weights=grad_logits.T @ x,
        grad_projection=grad_p,
    )


def _closed_set_accuracy(head: ClassifierHead, x: np.ndarray, y: np.ndarray) -> float:
    pred = np.argmax(head.logits(x), axis=1)
    return float(np.mean(pred == y))


def infer_open_set(
    model: TrainedModel,
    features: EmbeddingTable,
    samples: list[tuple[str, str]],
    theta: float | None = None,
) -> list[PredictionRow]:
    """Softmax over head logits; reject as UNKNOWN iff max prob < theta,
    ties at argmax to the lowest class index."""
    theta = model.config.unknown_threshold if theta is None else theta
    ids = [s for s, _ in samples]
    x = _features_for(features, ids)
    probs = _row_softmax(model.head.logits(x))
    out = []
    for i, (sid, true_cls) in enumerate(samples):
        j = int(np.argmax(probs[i]))
        p = float(probs[i, j])
        predicted = model.class_order[j] if p >= theta else None
        out.append(PredictionRow(sample_id=sid, predicted=predicted, max_prob=p, true_class=true_cls))
    return out


def write_predictions(rows: list[PredictionRow], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            pred = r.predicted if r.predicted is not None else "UNKNOWN"
            f.write(f"{r.sample_id}\t{pred}\t{r.max_prob:.9f}\t{r.true_class}\n")


def _config_to_dict(cfg: TrainerConfig) -> dict:
    d = asdict(cfg)
    d["objective"] = cfg.objective.value
    return d


def config_from_dict(d: dict) -> TrainerConfig:
    pert = PerturbationConfig(**d.get("perturbation", {}))
    return TrainerConfig(
        objective=Objective(d.get("objective", "scipd")),
        epochs=d.get("epochs", 30),
        batch_size=d.get("batch_size", 64),
        learning_rate=d.get("learning_rate", 0.5),
        momentum=d.get("momentum", 0.9),
        weight_decay=d.get("weight_decay", 0.0),
        seed=d.get("seed", 0),
        perturbation=pert,
        unknown_threshold=d.get("unknown_threshold", 0.5),
    )


def save_checkpoint(model: TrainedModel, path) -> None:
    """HDGE container: W rows keyed by class name, projection and metadata
    in the JSON footer."""
    table = EmbeddingTable(dim=model.head.weights.shape[1], kind=EmbeddingKind.CHECKPOINT)
    for i, cls in enumerate(model.class_order):
        table.put(cls, model.head.weights[i])
    footer = {
        "config": _config_to_dict(model.config),
        "class_order": model.class_order,
        "selected_epoch": model.selected_epoch,
        "history": model.history,
        "projection": model.head.projection.tolist() if model.head.projection is not None else None,
    }
    save_embeddings(table, path, footer=footer)


def load_checkpoint(path) -> TrainedModel:
    table, footer = load_container(path)
    if table.kind != EmbeddingKind.CHECKPOINT or not footer:
        raise TrainerError("bad_checkpoint", f"{path} is not a checkpoint file")
    class_order = list(footer["class_order"])
    w = table.matrix(class_order)
    proj = footer.get("projection")
    head = ClassifierHead(weights=w, projection=np.array(proj) if proj is not None else None)
    return TrainedModel(
        head=head,
        class_order=class_order,
        history=[tuple(h) for h in footer["history"]],
        selected_epoch=int(footer["selected_epoch"]),
        config=config_from_dict(footer["config"]),
    )
