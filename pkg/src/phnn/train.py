"""SGD training loop, learning-rate schedules and evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint, ops
from .errors import DataModelMismatch, EmptyReference, NonFiniteLoss, ShapeMismatch, SpecInvalid
from .tensor import Tensor, Tape, backward, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "epoch", "lr", "loss")
TASK_LOSS = {"classify": "softmax_cross_entropy", "sed": "binary_cross_entropy", "regress": "mse"}


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    epochs: int = 1
    batch_size: int = 128
    seed: int = 0
    loss: Optional[str] = None
    step_period: int = 30
    step_gamma: float = 0.1

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise SpecInvalid("lr0 must be non-negative")
        if not 0 <= self.momentum < 1:
            raise SpecInvalid("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise SpecInvalid("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise SpecInvalid("epochs and batch_size must be >= 1")
        if self.schedule not in ("cosine", "step", "constant"):
            raise SpecInvalid(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    task: str
    accuracy: Optional[float] = None
    f_score: Optional[float] = None
    error_rate: Optional[float] = None
    sed_score: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    loss_curve: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("accuracy", "f_score", "precision", "recall"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.error_rate is not None and self.error_rate < 0:
            raise ValueError("error rate must be >= 0")
        if self.sed_score is not None:
            expected = (self.error_rate + 1.0 - self.f_score) / 2.0
            if not math.isclose(self.sed_score, expected, rel_tol=0, abs_tol=1e-12):
                raise ValueError("sed_score inconsistent with error rate and F-score")
        self.loss_curve = [(int(s), float(v)) for s, v in self.loss_curve]

    def to_json(self) -> str:
        d = asdict(self)
        d["loss_curve"] = [list(p) for p in self.loss_curve]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["loss_curve"] = [tuple(p) for p in d.get("loss_curve", [])]
        return cls(**d)


# ---------------------------------------------------------------- optimisation

def default_decay_mask(params: Sequence[Tensor]) -> list:
    """Weight decay for weights, filters and algebra matrices; never for 1-d biases or norms."""
    return [p.ndim >= 2 for p in params]


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
             cfg: TrainConfig, lr_t: float, decay: Optional[Sequence[bool]] = None) -> None:
    """Classical momentum with L2 folded into the gradient, updating in place."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeMismatch("params, grads and velocity must align")
    decay = default_decay_mask(params) if decay is None else decay
    for p, g, v, dec in zip(params, grads, velocity, decay):
        step = g + cfg.weight_decay * p.data if (dec and cfg.weight_decay) else g
        v *= cfg.momentum
        v += step
        if lr_t:
            p.data -= lr_t * v


def lr_schedule(kind: str, lr0: float, t: int, T: int, period: int = 30, gamma: float = 0.1) -> float:
    if kind == "cosine":
        return lr0 * (1.0 + math.cos(math.pi * t / T)) / 2.0
    if kind == "step":
        return lr0 * gamma ** (t // period)
    if kind == "constant":
        return lr0
    raise ValueError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------- metrics

def accuracy(logits, labels) -> float:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    return float(np.mean(z.argmax(axis=1) == y))


def sed_counts(pred_probs, labels, threshold: float = 0.5) -> dict:
    p = np.asarray(pred_probs.data if isinstance(pred_probs, Tensor) else pred_probs)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if p.shape != y.shape:
        raise ShapeMismatch(f"predictions {p.shape} vs labels {y.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    pred = p >= threshold
    ref = y >= 0.5
    return {"tp": int(np.sum(pred & ref)), "fp": int(np.sum(pred & ~ref)),
            "fn": int(np.sum(~pred & ref)), "n_ref": int(np.sum(ref))}


def sed_scores(tp: int, fp: int, fn: int, n_ref: int) -> dict:
    """Frame-based F-score, error rate and combined SED score from raw counts."""
    if n_ref == 0:
        raise EmptyReference("error rate undefined: the reference has no active events")
    s = min(fn, fp)
    d = max(0, fn - fp)
    i = max(0, fp - fn)
    er = (s + d + i) / n_ref
    denom = 2 * tp + fp + fn
    f = 2 * tp / denom if denom else 0.0
    return {"f_score": f, "error_rate": er, "sed_score": (er + 1.0 - f) / 2.0,
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "substitutions": s, "deletions": d, "insertions": i}


def sed_metrics(pred_probs, labels, threshold: float = 0.5) -> MetricsReport:
    c = sed_counts(pred_probs, labels, threshold)
    sc = sed_scores(c["tp"], c["fp"], c["fn"], c["n_ref"])
    return MetricsReport(task="sed", f_score=sc["f_score"], error_rate=sc["error_rate"],
                         sed_score=sc["sed_score"], precision=sc["precision"], recall=sc["recall"],
                         extras={**c, **{k: sc[k] for k in ("substitutions", "deletions", "insertions")}})


# ---------------------------------------------------------------- training loop

@dataclass
class ArrayDataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) == 0 or len(self.inputs) != len(self.targets):
            raise DataModelMismatch("dataset must be non-empty with one target per input")

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class TrainResult:
    report: MetricsReport
    log_rows: list
    checkpoint: Optional[checkpoint.CheckpointInfo] = None


def predict(model, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            outs.append(model(Tensor(inputs[i:i + batch_size])).data)
    model.train(was_training)
    return np.concatenate(outs, axis=0)


def evaluate(model, data: ArrayDataset, task: str, threshold: float = 0.5) -> MetricsReport:
    out = predict(model, data.inputs)
    if task == "classify":
        return MetricsReport(task="classify", accuracy=accuracy(out, data.targets))
    if task == "sed":
        return sed_metrics(out, data.targets, threshold)
    mse = float(np.mean((out - data.targets) ** 2))
    return MetricsReport(task="regress", extras={"mse": mse})


def write_log(path, rows: Sequence[Sequence], extra_columns: Sequence[str] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(LOG_HEADER) + list(extra_columns))
        for row in rows:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))] + [repr(float(v)) for v in row[4:]])


def train_run(model, dataset: ArrayDataset, cfg: TrainConfig, task: str = "classify",
              eval_data: Optional[ArrayDataset] = None, out_dir=None, run_config: Optional[dict] = None,
              callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train ``model`` in place with seeded shuffling; deterministic for a fixed seed.

    Writes ``train_log.csv`` and ``checkpoint.phck`` into ``out_dir`` when given.
    """
    if task not in TASK_LOSS:
        raise SpecInvalid(f"unknown task {task!r}")
    loss_kind = cfg.loss or TASK_LOSS[task]
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    names = [name for name, _ in model.named_parameters()]
    velocity = [np.zeros_like(p.data) for p in params]
    decay = default_decay_mask(params)
    rows = []
    step = 0
    N = len(dataset)
    model.train()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.schedule, cfg.lr0, epoch, cfg.epochs, cfg.step_period, cfg.step_gamma)
        order = rng.permutation(N)
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = Tensor(dataset.inputs[idx])
            yb = dataset.targets[idx]
            for p in params:
                p.grad = np.zeros_like(p.data)
            with Tape():
                try:
                    out = model(xb)
                    loss = ops.loss(loss_kind, out, yb)
                except ShapeMismatch as exc:
                    raise DataModelMismatch(f"model and data disagree: {exc}") from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"loss became {value} at step {step} (epoch {epoch})")
                backward(loss)
            sgd_step(params, [p.grad for p in params], velocity, cfg, lr, decay)
            rows.append((step, epoch, lr, value))
            if callback is not None:
                callback(step, value)
            step += 1
        log.debug("epoch %d lr %.5g last loss %.6g", epoch, lr, rows[-1][3])

    report = evaluate(model, eval_data if eval_data is not None else dataset, task)
    report.loss_curve = [(r[0], r[3]) for r in rows]
    if task == "classify" and eval_data is not None:
        report.extras["train_accuracy"] = evaluate(model, dataset, task).accuracy
        report.extras["eval_accuracy"] = report.accuracy
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_log(out_dir / "train_log.csv", rows)
        ckpt = checkpoint.save(out_dir / "checkpoint.phck",
                               checkpoint.model_sections(model, dict(zip(names, velocity))),
                               run_config if run_config is not None else {"train": cfg.to_dict()})
        (out_dir / "metrics.json").write_text(report.to_json())
    return TrainResult(report, rows, ckpt)
