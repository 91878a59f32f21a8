"""Experiment drivers behind the command-line interface.

Toy Kronecker-recovery tasks, parameter audits, gradient-check sweeps and
end-to-end classification / sound-event-detection runs.
"""

from __future__ import annotations

import csv
import json
import logging
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, ops
from .algebra import make_algebra, preset_algebra
from .data import (SyntheticSedParams, apply_channel_policy, generate_synthetic_sed, load_image_dataset,
                   make_desk_images, write_cifar_binary)
from .errors import ChannelPolicyError, DivisibilityError, SpecInvalid
from .gradcheck import run_gradchecks
from .layers import PHCConv, PHMLinear, param_count
from .models import ModelSpec, build_model, hypercomplex_param_report
from .tensor import Tape, Tensor, backward, no_grad
from .train import ArrayDataset, TrainConfig, TrainResult, sgd_step, train_run

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


# ---------------------------------------------------------------- toy recovery tasks

@dataclass
class ToyConfig:
    seed: int = 0
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    samples: int = 512
    channels: int = 4
    size: int = 16
    kernel: int = 3
    loss_tolerance: float = 1e-4
    h_tolerance: float = 1e-3
    target_n: int = 4
    pure: bool = False
    zero_target: bool = False
    zero_init: bool = False


@dataclass
class ToyReport:
    seed: int
    final_loss: float
    h_rel_error: float
    converged: bool
    loss_curve: list
    algebra_energy: list
    term_energy: list
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def toy_target(cfg: ToyConfig, rng: np.random.Generator) -> np.ndarray:
    """Target weight built from random filter blocks and the preset algebra for ``target_n``.

    With ``target_n=4`` the weight has the signed Hamilton block layout; the
    ``pure`` variant zeroes the real-part block.
    """
    n = cfg.target_n
    family = {1: "real", 2: "complex", 4: "quaternion", 8: "octonion"}[n]
    c = cfg.channels
    blocks = rng.normal(size=(n, c // n, c // n, cfg.kernel, cfg.kernel))
    if cfg.pure:
        blocks[0] = 0.0
    if cfg.zero_target:
        blocks[:] = 0.0
    return ops.kron_sum(preset_algebra(family).weights, Tensor(blocks)).data


def run_toy(cfg: ToyConfig) -> ToyReport:
    """Fit a learnable-algebra PHC layer to data generated by a fixed target weight."""
    rng = np.random.default_rng(cfg.seed)
    target = toy_target(cfg, rng)
    pad = cfg.kernel // 2
    x = rng.normal(size=(cfg.samples, cfg.channels, cfg.size, cfg.size))
    with no_grad():
        y = ops.conv2d(Tensor(x), Tensor(target), None, 1, pad).data

    n = cfg.target_n
    layer = PHCConv(cfg.channels, cfg.channels, cfg.kernel, make_algebra(n, "learnable", seed=cfg.seed + 1),
                    padding=pad, bias=False, rng=rng)
    if cfg.zero_init:
        layer.filters.data[:] = 0.0
    params = layer.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    tcfg = TrainConfig(lr0=cfg.lr, momentum=cfg.momentum, weight_decay=0.0, schedule="constant")
    curve = []
    for step in range(cfg.steps):
        if cfg.batch_size >= cfg.samples:
            idx = slice(None)
        else:
            idx = rng.integers(0, cfg.samples, size=cfg.batch_size)
        for p in params:
            p.grad = np.zeros_like(p.data)
        with Tape() as tape:
            loss = ops.mse_loss(layer(Tensor(x[idx])), y[idx])
            backward(loss, tape)
        curve.append(loss.item())
        sgd_step(params, [p.grad for p in params], velocity, tcfg, cfg.lr)

    with no_grad():
        final = float(np.mean((layer(Tensor(x)).data - y) ** 2))
        learned = layer.build_weight().data
    norm = np.linalg.norm(target)
    diff = np.linalg.norm(learned - target)
    h_err = diff / norm if norm > 0 else diff
    A = layer.algebra.data
    F = layer.filters.data
    a_energy = [float(np.sum(A[i] ** 2)) for i in range(n)]
    terms = np.array([np.sum(A[i] ** 2) * np.sum(F[i] ** 2) for i in range(n)])
    share = (terms / terms.sum()).tolist() if terms.sum() > 0 else terms.tolist()
    converged = h_err < cfg.h_tolerance if cfg.pure else final < cfg.loss_tolerance
    return ToyReport(cfg.seed, final, float(h_err), bool(converged), curve, a_energy, share, asdict(cfg))


def cmd_toy_quaternion(seed: int = 0, steps: int = 2000, tolerance: float = 1e-4, **overrides) -> ToyReport:
    return run_toy(ToyConfig(seed=seed, steps=steps, loss_tolerance=tolerance, **overrides))


def cmd_toy_pure(seed: int = 0, steps: int = 2000, tolerance: float = 1e-3, **overrides) -> ToyReport:
    return run_toy(ToyConfig(seed=seed, steps=steps, h_tolerance=tolerance, pure=True, **overrides))


# ---------------------------------------------------------------- parameter audit

AUDIT_COLUMNS = ("family", "n", "exact", "dense_equivalent", "ratio", "reduction_pct", "cubic_terms",
                 "layers", "layer_law_holds", "checkpoint_payload_bytes", "checkpoint_total_bytes")


@dataclass
class AuditRow:
    family: str
    n: int
    exact: int
    dense_equivalent: int
    ratio: float
    reduction_pct: float
    cubic_terms: int
    layers: int
    layer_law_holds: bool
    checkpoint_payload_bytes: int
    checkpoint_total_bytes: int


def audit_spec(family: str, n: int, widths: Optional[Sequence[int]] = None, **overrides) -> ModelSpec:
    """Lite spec for the audit: RGB input, zero-padded whenever n does not divide 3."""
    kw = dict(overrides)
    if widths is not None:
        kw["stage_widths"] = tuple(widths)
        if family == "phresnet":
            kw.setdefault("stem_width", widths[0])
        if family == "phvgg":
            kw.setdefault("classifier_widths", (widths[-1], widths[-1]))
    policy = "natural" if 3 % n == 0 else "zero_pad_to_n"
    return ModelSpec.lite(family, n, 10 if family != "phsed" else 6, 3 if family != "phsed" else 8,
                          channel_policy=policy if family != "phsed" else "natural", **kw)


def layer_law_holds(model) -> bool:
    """Every PHC/PHM layer stores exactly n^3 + s*d*k^dims/n weight scalars."""
    for m in model.modules():
        if isinstance(m, (PHCConv, PHMLinear)):
            stored = m.algebra.size + (m.filters.size if isinstance(m, PHCConv) else m.blocks.size)
            if stored != param_count(m, include_bias=False).exact:
                return False
    return True


def cmd_param_audit(families: Sequence[str] = ("phvgg", "phresnet"), widths: Optional[Sequence[int]] = None,
                    n_values: Sequence[int] = (1, 2, 3, 4), depths: Optional[Sequence[int]] = None,
                    out_path=None) -> list:
    for n in n_values:
        for w in widths or ():
            if w % n:
                raise DivisibilityError(f"n={n} does not divide width {w}")
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for family in families:
            for n in n_values:
                extra = {"depths": tuple(depths)} if depths is not None else {}
                spec = audit_spec(family, n, widths, **extra)
                try:
                    spec.validate()
                except SpecInvalid as exc:
                    raise DivisibilityError(str(exc)) from exc
                model = build_model(spec, seed=0)
                rep = hypercomplex_param_report(model)
                info = checkpoint.save(Path(tmp) / f"{family}_{n}.phck", checkpoint.model_sections(model),
                                       {"model": spec.to_dict()})
                rows.append(AuditRow(family, n, rep.exact, rep.dense_equivalent, rep.ratio,
                                     100.0 * (rep.ratio - 1.0), rep.cubic_terms, len(rep.layers),
                                     layer_law_holds(model), info.payload_bytes, info.total_bytes))
    if out_path is not None:
        write_audit_csv(out_path, rows)
    return rows


def write_audit_csv(path, rows: Sequence[AuditRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in AUDIT_COLUMNS])


# ---------------------------------------------------------------- gradient checks

def cmd_gradcheck(scope: str = "all", seed: int = 0) -> tuple:
    """Returns (results, exit_code); the exit code is 1 when any check fails."""
    results = run_gradchecks(scope, seed)
    return results, int(any(not r.passed for r in results))


# ---------------------------------------------------------------- end-to-end runs

@dataclass
class RunConfig:
    """Versioned description of one training run (see ``configs/example_run.json``)."""

    task: str = "classify"
    n: int = 1
    family: str = "phresnet"
    channel_policy: str = "natural"
    seed: int = 0
    algebra_mode: str = "learnable"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    out_dir: Optional[str] = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise SpecInvalid(f"run config version {self.version}, expected {CONFIG_VERSION}")
        if self.task not in ("classify", "sed"):
            raise SpecInvalid(f"unknown task {self.task!r}")
        if self.channel_policy not in ("natural", "zero_pad_to_n"):
            raise ChannelPolicyError(f"unknown channel policy {self.channel_policy!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecInvalid(f"unknown run config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def dataset_descriptor(self) -> dict:
        base = dict(DESK_DATASET) if self.task == "classify" else dict(SED_DATASET)
        base.update(self.dataset)
        return base

    def train_config(self) -> TrainConfig:
        base = dict(DESK_TRAIN) if self.task == "classify" else dict(SED_TRAIN)
        base.update(self.train)
        base["seed"] = self.seed
        return TrainConfig(**base)

    def input_channels(self) -> int:
        ds = self.dataset_descriptor()
        if self.task == "sed":
            return int(ds.get("channels", 8))
        return int(ds.get("image_shape", (3, 8, 8))[0])

    def model_spec(self) -> ModelSpec:
        ds = self.dataset_descriptor()
        overrides = dict(DESK_MODEL if self.task == "classify" else SED_MODEL)
        overrides.update(self.model)
        if self.task == "sed":
            overrides.setdefault("input_size", (ds.get("frames", 32), ds.get("mel_bins", 16)))
            num_classes = int(ds.get("num_classes", 6))
        else:
            overrides.setdefault("input_size", tuple(ds.get("image_shape", (3, 8, 8))[1:]))
            num_classes = int(ds.get("num_classes", 10))
        overrides = {k: tuple(tuple(p) if isinstance(p, list) else p for p in v) if isinstance(v, list) else v
                     for k, v in overrides.items()}
        return ModelSpec.lite(self.family, self.n, num_classes, self.input_channels(),
                              channel_policy=self.channel_policy, **overrides)


DESK_DATASET = {"kind": "desk", "num": 10_000, "seed": 0, "train_fraction": 0.8, "image_shape": [3, 8, 8],
                "num_classes": 10}
DESK_TRAIN = {"lr0": 0.1, "epochs": 2, "batch_size": 128, "momentum": 0.9, "weight_decay": 5e-4,
              "schedule": "cosine"}
DESK_MODEL = {"depths": [1, 1, 1, 1]}

SED_DATASET = {"kind": "synthetic_sed", "num_clips": 300, "train_clips": 200, "seed": 0, "channels": 8,
               "frames": 32, "mel_bins": 16, "num_classes": 6}
SED_TRAIN = {"lr0": 0.1, "epochs": 20, "batch_size": 16, "momentum": 0.9, "weight_decay": 5e-4,
             "schedule": "cosine"}
SED_MODEL = {"dropout": 0.0}


def check_channel_policy(cfg: RunConfig) -> None:
    """Fail fast, before any data generation or compute."""
    C = cfg.input_channels()
    if cfg.channel_policy == "natural" and C % cfg.n:
        raise ChannelPolicyError(f"n={cfg.n} does not divide {C} input channels under the natural policy; "
                                 "pass --channel-policy zero_pad_to_n")


def _sed_params(ds: dict) -> SyntheticSedParams:
    keys = SyntheticSedParams.__dataclass_fields__
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in ds.items() if k in keys}
    return SyntheticSedParams(**kw)


def load_classify_data(cfg: RunConfig, work_dir: Path) -> tuple:
    """(train, test) ArrayDatasets with the channel policy applied."""
    ds = cfg.dataset_descriptor()
    shape = tuple(ds.get("image_shape", (3, 8, 8)))
    kind = ds["kind"]
    if kind == "desk":
        imgs, labels = make_desk_images(int(ds["num"]), seed=int(ds["seed"]), size=shape[1],
                                        num_classes=int(ds["num_classes"]))
        split = int(round(ds["train_fraction"] * len(imgs)))
        paths = (work_dir / "data" / "train.bin", work_dir / "data" / "test.bin")
        write_cifar_binary(paths[0], imgs[:split], labels[:split])
        write_cifar_binary(paths[1], imgs[split:], labels[split:])
        sets = [load_image_dataset(p, "cifar_binary", cfg.channel_policy, cfg.n, image_shape=shape) for p in paths]
    elif kind == "cifar_binary":
        sets = [load_image_dataset(ds[key], "cifar_binary", cfg.channel_policy, cfg.n, image_shape=shape)
                for key in ("train_path", "test_path")]
    elif kind == "idx":
        sets = [load_image_dataset(ds[key], "idx", cfg.channel_policy, cfg.n, labels_path=ds[key + "_labels"])
                for key in ("train_path", "test_path")]
    else:
        raise SpecInvalid(f"unknown classification dataset kind {kind!r}")
    return tuple(ArrayDataset(s.images.data, s.labels) for s in sets)


def load_sed_data(cfg: RunConfig) -> tuple:
    ds = cfg.dataset_descriptor()
    params = _sed_params(ds)
    feats, labels = generate_synthetic_sed(params, seed=int(ds["seed"]))
    feats = apply_channel_policy(feats, cfg.channel_policy, cfg.n)
    k = int(ds["train_clips"])
    if not 0 < k < params.num_clips:
        raise SpecInvalid("train_clips must leave at least one held-out clip")
    return ArrayDataset(feats[:k], labels[:k]), ArrayDataset(feats[k:], labels[k:])


@dataclass
class RunOutcome:
    config: RunConfig
    result: TrainResult
    param_report: dict
    out_dir: Optional[Path]


def cmd_train(cfg: RunConfig, out_dir=None) -> RunOutcome:
    """End-to-end run: data, model, training, log CSV, checkpoint and metrics JSON."""
    check_channel_policy(cfg)
    spec = cfg.model_spec()
    spec.validate()
    tcfg = cfg.train_config()
    out = Path(out_dir) if out_dir is not None else (Path(cfg.out_dir) if cfg.out_dir else None)
    with tempfile.TemporaryDirectory() as tmp:
        work = out if out is not None else Path(tmp)
        if cfg.task == "classify":
            train_set, test_set = load_classify_data(cfg, work)
        else:
            train_set, test_set = load_sed_data(cfg)
    model = build_model(spec, cfg.algebra_mode, seed=cfg.seed)
    rep = hypercomplex_param_report(model)
    run_config = {"run": cfg.to_dict(), "model": spec.to_dict(), "train": tcfg.to_dict()}
    log.info("training %s n=%d (%d hypercomplex weights)", spec.family, spec.n, rep.exact)
    result = train_run(model, train_set, tcfg, cfg.task, test_set, out, run_config)
    params = {"exact": rep.exact, "dense_equivalent": rep.dense_equivalent, "ratio": rep.ratio}
    result.report.extras.update({f"params_{k}": v for k, v in params.items()})
    if out is not None:
        (out / "metrics.json").write_text(result.report.to_json())
        (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return RunOutcome(cfg, result, params, out)


COMPARISON_COLUMNS = ("n", "params_exact", "params_dense", "ratio", "final_loss", "train_accuracy",
                      "test_accuracy", "sed_score", "f_score", "error_rate")


def comparison_rows(outcomes: Sequence[RunOutcome]) -> list:
    rows = []
    for o in outcomes:
        r = o.result.report
        rows.append({"n": o.config.n, "params_exact": o.param_report["exact"],
                     "params_dense": o.param_report["dense_equivalent"], "ratio": o.param_report["ratio"],
                     "final_loss": r.loss_curve[-1][1] if r.loss_curve else None,
                     "train_accuracy": r.extras.get("train_accuracy"), "test_accuracy": r.extras.get("eval_accuracy"),
                     "sed_score": r.sed_score, "f_score": r.f_score, "error_rate": r.error_rate})
    return rows


def write_comparison(path, outcomes: Sequence[RunOutcome]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in comparison_rows(outcomes):
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def cmd_compare(base: RunConfig, n_values: Sequence[int], out_dir=None) -> list:
    """Same data and budget for every n; each run lands in ``out_dir/n<k>``."""
    for n in n_values:
        check_channel_policy(RunConfig.from_dict({**base.to_dict(), "n": n}))
    outcomes = []
    for n in n_values:
        cfg = RunConfig.from_dict({**base.to_dict(), "n": n})
        sub = Path(out_dir) / f"n{n}" if out_dir is not None else None
        outcomes.append(cmd_train(cfg, sub))
    if out_dir is not None:
        write_comparison(Path(out_dir) / "comparison.csv", outcomes)
    return outcomes


def cmd_generate_sed(params: SyntheticSedParams, seed: int, out_path) -> Path:
    feats, labels = generate_synthetic_sed(params, seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out_path, features=feats, labels=labels, params=json.dumps(params.to_dict()))
    return out_path

