"""Physics-informed and data-driven losses and the two-stage training pipeline.

Pre-training fits the backbone to the Jacobi fixed point of the low-fidelity
stencil using only conductivity maps. Post-training freezes the backbone
and fits the projection head to labelled high-fidelity fields. The
supervised baseline sees only the labelled fields.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import GridSpec, PackConfig, ScalarField, read_field, read_layout
from .layout import BatteryMask, battery_mask
from .nets import ModelParams, forward_backbone, forward_head
from .solver import complete_intensity_array, jacobi_target_array

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, case_id: str, epoch: int):
        super().__init__(f"non-finite loss on case {case_id!r} (epoch {epoch})")
        self.case_id = case_id
        self.epoch = epoch


class FrozenBackboneError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 10
    epochs_posttrain: int = 15
    lr0: float = 1e-3
    lr_decay: float = 0.85
    batch_size: int = 1
    eta1: float = 0.0
    eta2: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if not self.eta2 > 0:
            raise ValueError("eta2 must be positive")
        if self.eta1 < 0:
            raise ValueError("eta1 must be non-negative")
        if self.epochs_pretrain < 0 or self.epochs_posttrain < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def epochs_supervised(self) -> int:
        return self.epochs_pretrain + self.epochs_posttrain


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    wall_time: float = 0.0

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec) + "\n")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("steps")
        return d


@dataclass
class Case:
    """One training/evaluation sample held in memory."""

    case_id: str
    lam: ScalarField
    mask: BatteryMask
    truth: ScalarField | None = None

    @property
    def h(self) -> float:
        return self.lam.spec.h


def _nchw(a) -> np.ndarray:
    a = np.asarray(getattr(a, "data", getattr(a, "values", a)), dtype=np.float64)
    return a[None, None] if a.ndim == 2 else a


def _battery(lam: np.ndarray, config: PackConfig) -> np.ndarray:
    return np.abs(lam - config.lambda_b) < 1e-9


def complete_intensity(t_hat, lam, config: PackConfig) -> Tensor:
    """Source map from a predicted field: ``phi_b`` in cells, ``-k (T - T0)`` elsewhere.

    Built from the detached prediction, so it never carries gradient.
    """
    t = _nchw(t_hat)
    lv = _nchw(lam)
    return Tensor(complete_intensity_array(t, _battery(lv, config), config))


def jacobi_target(t_hat, lam, phi, h: float) -> Tensor:
    """Detached neighbour reconstruction ``T'``; ``T'/4`` is the Jacobi update."""
    return Tensor(jacobi_target_array(_nchw(t_hat), _nchw(lam), _nchw(phi), h))


def pixel_weights(delta, eta1: float, eta2: float) -> Tensor:
    """Per-sample min-max rescaled error map ``eta1 + eta2 * (d - min)/(max - min)``.

    A flat error map (``max - min < 1e-12``) gets the midpoint weight
    ``eta1 + eta2 / 2`` everywhere.
    """
    d = _nchw(delta)
    axes = tuple(range(1, d.ndim))
    lo = d.min(axis=axes, keepdims=True)
    span = d.max(axis=axes, keepdims=True) - lo
    flat = span < 1e-12
    w = eta1 + eta2 * (d - lo) / np.where(flat, 1.0, span)
    return Tensor(np.where(flat, eta1 + eta2 / 2, w))


def physics_loss(t_hat: Tensor, lam, config: PackConfig, h: float,
                 eta1: float = 0.0, eta2: float = 10.0) -> Tensor:
    """Weighted mean of ``|T^ - T'/4|``; gradient flows through the lone ``T^`` only."""
    phi = complete_intensity(t_hat, lam, config)
    target = jacobi_target(t_hat, lam, phi, h).data / 4
    delta = np.abs(t_hat.data - target)
    w = pixel_weights(delta, eta1, eta2)
    return ad.weighted_l1(t_hat, target, w)


def data_loss(t_tilde: Tensor, truth, eta1: float = 0.0, eta2: float = 10.0) -> Tensor:
    target = _nchw(truth)
    w = pixel_weights(np.abs(t_tilde.data - target), eta1, eta2)
    return ad.weighted_l1(t_tilde, target, w)


def _step(model: ModelParams, loss: Tensor, lr: float) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        return value
    model.zero_grad()
    ad.backward(loss)
    ad.adam_step(model.parameters(), lr)
    model.zero_grad()
    return value


def _run_epochs(model, cases, epochs, cfg: TrainConfig, loss_fn, log_: TrainLog,
                after_epoch=None):
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.lr0
    t_start = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(cases))
        losses = []
        for idx in order:
            case = cases[idx]
            value = _step(model, loss_fn(case), lr)
            if not np.isfinite(value):
                raise TrainingDivergedError(case.case_id, epoch)
            losses.append(value)
            log_.steps.append({"epoch": epoch, "case_id": case.case_id,
                               "loss": value, "lr": lr})
        log_.lr_trace.append(lr)
        log_.epoch_loss.append(float(np.mean(losses)) if losses else 0.0)
        log.info("epoch %d: mean loss %.6g (lr %.3g)", epoch, log_.epoch_loss[-1], lr)
        if after_epoch is not None:
            after_epoch(epoch)
        lr = ad.decay_lr(lr, cfg.lr_decay)
    log_.wall_time += time.perf_counter() - t_start
    return log_


def pretrain(backbone: ModelParams, cases: list[Case], cfg: TrainConfig,
             pack: PackConfig) -> tuple[ModelParams, TrainLog]:
    """Unsupervised physics-informed training on conductivity maps only."""
    if not cases:
        raise ValueError("empty pretraining split")

    def loss_fn(case):
        t_hat = forward_backbone(backbone, case.lam)
        return physics_loss(t_hat, case.lam, pack, case.h, cfg.eta1, cfg.eta2)

    return backbone, _run_epochs(backbone, cases, cfg.epochs_pretrain, cfg, loss_fn, TrainLog())


def predict_backbone(backbone: ModelParams, lam) -> np.ndarray:
    with ad.no_grad():
        return forward_backbone(backbone, lam).data[0, 0]


def predict_pipeline(backbone: ModelParams, head: ModelParams, lam) -> np.ndarray:
    with ad.no_grad():
        t_hat = forward_backbone(backbone, lam)
        return forward_head(head, t_hat, lam).data[0, 0]


def posttrain(backbone: ModelParams, head: ModelParams, cases: list[Case], cfg: TrainConfig,
              pack: PackConfig | None = None) -> tuple[ModelParams, TrainLog]:
    """Fit the projection head on labelled cases with the backbone frozen."""
    if not cases:
        raise ValueError("empty labeled split")
    if any(c.truth is None for c in cases):
        raise ValueError("post-training cases need ground-truth temperature fields")
    before = backbone.digest()
    with ad.no_grad():
        low = {c.case_id: forward_backbone(backbone, c.lam) for c in cases}

    def loss_fn(case):
        t_tilde = forward_head(head, low[case.case_id], case.lam)
        return data_loss(t_tilde, case.truth, cfg.eta1, cfg.eta2)

    out = _run_epochs(head, cases, cfg.epochs_posttrain, cfg, loss_fn, TrainLog())
    if backbone.digest() != before:
        raise FrozenBackboneError("backbone parameters changed during post-training")
    return head, out


def train_supervised(baseline: ModelParams, cases: list[Case], cfg: TrainConfig,
                     val_cases: list[Case] = ()) -> tuple[ModelParams, TrainLog]:
    """Data-only training with best-validation-MAE checkpoint selection."""
    if not cases:
        raise ValueError("empty labeled split")
    if any(c.truth is None for c in list(cases) + list(val_cases)):
        raise ValueError("supervised training needs ground-truth temperature fields")
    tlog = TrainLog()
    best = {"mae": np.inf, "state": None}

    def loss_fn(case):
        return data_loss(forward_backbone(baseline, case.lam), case.truth, cfg.eta1, cfg.eta2)

    def after_epoch(epoch):
        if not val_cases:
            return
        mae = float(np.mean([np.abs(predict_backbone(baseline, c.lam) - c.truth.values).mean()
                             for c in val_cases]))
        tlog.val_mae.append(mae)
        if mae <= best["mae"]:
            best.update(mae=mae, state=baseline.state())
            tlog.best_epoch = epoch

    _run_epochs(baseline, cases, cfg.epochs_supervised, cfg, loss_fn, tlog, after_epoch)
    if best["state"] is not None:
        baseline.load_state(best["state"])
    return baseline, tlog


def load_case(manifest, entry) -> Case:
    """Read one manifest entry; the physical extent comes from its layout."""
    layout = read_layout(manifest.resolve(entry.layout))
    raw = read_field(manifest.resolve(entry.conductivity))
    grid = GridSpec(raw.spec.rows, raw.spec.cols,
                    layout.domain_mm[0] * 1e-3, layout.domain_mm[1] * 1e-3)
    lam = ScalarField(grid, raw.values)
    mask = battery_mask(layout, grid)
    truth = None
    if entry.temperature is not None:
        truth = read_field(manifest.resolve(entry.temperature), grid)
    return Case(entry.case_id, lam, mask, truth)


def load_cases(manifest, splits) -> list[Case]:
    if isinstance(splits, str):
        splits = (splits,)
    return [load_case(manifest, e) for e in manifest.split(*splits)]


def save_log(tlog: TrainLog, path) -> None:
    path = Path(path)
    tlog.write_jsonl(path)
    Path(str(path) + ".summary.json").write_text(json.dumps(tlog.summary(), indent=1) + "\n")
