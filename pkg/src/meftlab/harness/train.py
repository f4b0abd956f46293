"""Adam training loop with learning-rate grid selection and run metrics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..backbone import ModelConfig
from ..engine import Engine, Owner
from ..methods import MethodSpec
from ..model import FineTuneModel
from .cost import cost_model
from .optim import Adam
from .synthetic import Dataset

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (1e-3, 5e-4, 1e-4)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    deterministic: bool = True
    precision: str = "f32"

    def __post_init__(self):
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class TrainReport:
    method: str
    trainable_ratio: float
    peak_retained_bytes: int
    est_total_footprint_bytes: int
    backward_flops: int
    mean_step_time_ms: float | None
    best_eval_accuracy: float
    lr_selected: float
    backbone_nodes_visited: int = 0
    backbone_layers_visited: list[str] = field(default_factory=list)
    accuracy_by_lr: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _RunResult:
    accuracy: float
    peak: int
    flops: int
    step_ms: float
    backbone_nodes: int
    backbone_layers: list[str]


def evaluate(model: FineTuneModel, eng: Engine, x: np.ndarray, y: np.ndarray, batch: int = 64) -> float:
    correct = 0
    for s in range(0, len(x), batch):
        pred = model.predict(eng, eng.const(x[s:s + batch]))
        correct += int((pred == y[s:s + batch]).sum())
    return 100.0 * correct / max(1, len(x))


def train_once(cfg: ModelConfig, method: MethodSpec, data: Dataset, spec: TrainSpec, lr: float) -> _RunResult:
    eng = Engine(spec.precision)
    model = FineTuneModel(cfg, method, seed=spec.seed, dtype=eng.dtype)
    n_train = len(data.x_train)
    steps_per_epoch = math.ceil(n_train / spec.batch_size)
    if method.kind == "adalora":
        model.attach_adalora(total_steps=steps_per_epoch * spec.epochs)
    opt = Adam(model.store, lr=lr, betas=spec.betas, eps=spec.eps)
    step = 0
    flops = None
    backbone_nodes, backbone_layers = 0, []
    elapsed = 0.0
    for epoch in range(spec.epochs):
        order = np.random.default_rng([spec.seed, epoch]).permutation(n_train)
        for s in range(0, n_train, spec.batch_size):
            idx = order[s:s + spec.batch_size]
            t0 = time.perf_counter()
            loss = model.loss(eng, eng.const(data.x_train[idx]), data.y_train[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                eng.clear_tape()
                raise TrainingError(f"non-finite loss {value} for method {method.label} at lr={lr} (step {step + 1})")
            stats = eng.backward(loss)
            if model.adalora is not None:
                model.adalora.step(step)
            step += 1
            opt.step(step)
            if model.adalora is not None:
                model.adalora.apply_mask()
            elapsed += time.perf_counter() - t0
            if flops is None:
                flops = stats.flops
                backbone_nodes = stats.count(Owner.BACKBONE)
                backbone_layers = sorted(stats.labels(Owner.BACKBONE))
    acc = evaluate(model, eng, data.x_eval, data.y_eval)
    log.info("%s lr=%g acc=%.2f", method.label, lr, acc)
    return _RunResult(acc, eng.peak_retained_bytes(), int(flops or 0), 1000.0 * elapsed / max(1, step),
                      backbone_nodes, backbone_layers)


def train(cfg: ModelConfig, method, data: Dataset, spec: TrainSpec) -> TrainReport:
    """Train once per learning rate; keep the best eval accuracy (ties go to the smaller lr)."""
    method = MethodSpec.parse(method)
    results = {lr: train_once(cfg, method, data, spec, lr) for lr in spec.lr_grid}
    best_lr = min(results, key=lambda lr: (-results[lr].accuracy, lr))
    best = results[best_lr]
    itemsize = np.dtype("float32" if spec.precision == "f32" else "float64").itemsize
    cost = cost_model(cfg, method, spec.batch_size, itemsize)
    census = FineTuneModel(cfg, method, seed=spec.seed, materialize=False).trainable_ratio()
    step_ms = None if spec.deterministic else float(np.mean([r.step_ms for r in results.values()]))
    return TrainReport(
        method=method.label,
        trainable_ratio=census,
        peak_retained_bytes=max(r.peak for r in results.values()),
        est_total_footprint_bytes=cost.total_footprint,
        backward_flops=best.flops,
        mean_step_time_ms=step_ms,
        best_eval_accuracy=best.accuracy,
        lr_selected=best_lr,
        backbone_nodes_visited=best.backbone_nodes,
        backbone_layers_visited=best.backbone_layers,
        accuracy_by_lr={f"{lr:g}": r.accuracy for lr, r in results.items()},
    )
