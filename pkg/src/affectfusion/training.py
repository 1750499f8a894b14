"""Two-phase training (MSE, then 1 - CCC), early stopping, late-fusion fitting."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO, Union

import numpy as np

from . import models as M
from .errors import ConfigError, InsufficientDataError, NumericalError
from .models import FeatureBundle, LateFusionCombiner, LateFusionEnsemble, Model, ModelSpec
from .nncore import OptimizerState, adam_step
from .objectives import LOSSES, MetricsReport, ccc, evaluate_report, mse

DEFAULT_LR = {"arousal": 1e-2, "valence": 1e-3}
MONITOR = {"mse": "mse", "one_minus_ccc": "one_minus_ccc"}


@dataclass
class TrainConfig:
    target: str
    max_epochs: int = 300
    patience: Optional[int] = 20  # None disables early stopping
    batch_size: int = 32
    lr: Optional[float] = None  # None -> 1e-2 arousal, 1e-3 valence
    fine_tune_lr: Optional[float] = None  # None -> lr
    seed: int = 7
    shuffle: bool = True
    verbose: bool = True

    def __post_init__(self):
        if self.target not in DEFAULT_LR:
            raise ConfigError(f"unknown target {self.target!r}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience is not None and self.patience <= 0:
            raise ConfigError("patience must be positive (or None to disable)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2; the CCC loss needs batch statistics")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.target]
        if self.fine_tune_lr is None:
            self.fine_tune_lr = self.lr
        if self.lr < 0 or self.fine_tune_lr < 0:
            raise ConfigError("learning rates must be >= 0")


@dataclass
class Split:
    bundles: list[FeatureBundle]
    labels: np.ndarray
    video_ids: Optional[list[str]] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.bundles) != self.labels.size:
            raise ConfigError(f"{len(self.bundles)} bundles but {self.labels.size} labels")
        if not self.bundles:
            raise InsufficientDataError("empty split")

    def __len__(self) -> int:
        return len(self.bundles)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_report: MetricsReport


@dataclass
class TrainHistory:
    monitor: str
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    first_batch_loss: Optional[float] = None

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return {
            "monitor": self.monitor,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "epochs": [{"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss,
                        **{f"val_{k}": v for k, v in r.val_report.to_dict().items()}}
                       for r in self.records],
        }


class EarlyStopping:
    """Stop once the monitored loss has not dropped for ``patience`` epochs.

    Only strict improvements count.  Epochs are numbered from 1.
    """

    def __init__(self, patience: Optional[int]):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when it is the new best."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch, self.stale = val_loss, self.epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience is not None and self.stale >= self.patience


def _batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    chunks = [order[k:k + size] for k in range(0, n, size)]
    # fold a trailing singleton into the previous batch: CCC needs n >= 2
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _take(inputs: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in inputs.items()}


def _validation_loss(loss: str, pred: np.ndarray, labels: np.ndarray) -> float:
    if loss == "mse":
        return mse(pred, labels)
    return 1.0 - ccc(pred, labels)


def _predict_inputs(model: Model, inputs: dict[str, np.ndarray], chunk: int = 256) -> np.ndarray:
    n = next(iter(inputs.values())).shape[0]
    out = [M.forward(model, _take(inputs, np.arange(s, min(s + chunk, n))))[0]
           for s in range(0, n, chunk)]
    return np.concatenate(out)


def train_phase(
    model: Model,
    train: Split,
    val: Split,
    cfg: TrainConfig,
    loss: str = "mse",
    lr: Optional[float] = None,
    phase: int = 1,
    progress: Optional[TextIO] = None,
) -> tuple[Model, TrainHistory]:
    """Minibatch Adam with early stopping; returns the best-epoch model.

    ``model`` itself is left untouched.  The monitored validation loss is the
    training loss computed over the whole validation split.
    """
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}")
    if loss == "one_minus_ccc" and len(val) < 2:
        raise InsufficientDataError("n >= 2 required for CCC validation")
    if progress is None and cfg.verbose:
        progress = sys.stdout
    lr = cfg.lr if lr is None else lr
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, phase])))

    work = model.copy()
    tr_in = M.stack_inputs(work.spec, train.bundles)
    va_in = M.stack_inputs(work.spec, val.bundles)
    opt = OptimizerState(lr=lr)
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory(monitor=MONITOR[loss])
    best = work.copy()
    n = len(train)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total, seen = 0.0, 0
        for b, idx in enumerate(_batches(n, cfg.batch_size, order), start=1):
            value, grads, _ = M.loss_and_gradients(
                work, _take(tr_in, idx), train.labels[idx], loss, "train", rng)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            if history.first_batch_loss is None:
                history.first_batch_loss = value
            adam_step(work.params, grads, opt)
            total += value * idx.size
            seen += idx.size

        pred = _predict_inputs(work, va_in)
        if not np.all(np.isfinite(pred)):
            raise NumericalError(f"non-finite validation predictions at epoch {epoch}")
        report = evaluate_report(pred, val.labels) if len(val) >= 2 else MetricsReport(
            ccc=float("nan"), pearson=None, mse=mse(pred, val.labels), n=len(val))
        val_loss = _validation_loss(loss, pred, val.labels)
        history.records.append(EpochRecord(epoch, total / seen, val_loss, report))
        if progress is not None:
            progress.write(f"{epoch}\t{total / seen:.6f}\t{val_loss:.6f}\t{report.ccc:.6f}\n")
            progress.flush()
        if stopper.update(val_loss):
            best = work.copy()
        if stopper.should_stop:
            history.stop_reason = "patience"
            break
    else:
        history.stop_reason = "max_epochs"
    history.best_epoch = stopper.best_epoch
    return best, history


def fit_and_refine(model: Model, train: Split, val: Split, cfg: TrainConfig,
                   progress: Optional[TextIO] = None) -> tuple[Model, tuple[TrainHistory, TrainHistory]]:
    """MSE pretraining, then 1 - CCC fine-tuning from the phase-1 best weights."""
    phase1, h1 = train_phase(model, train, val, cfg, "mse", cfg.lr, 1, progress)
    phase2, h2 = train_phase(phase1, train, val, cfg, "one_minus_ccc", cfg.fine_tune_lr, 2, progress)
    return phase2, (h1, h2)


def train_model(spec: ModelSpec, train: Split, val: Split, cfg: TrainConfig,
                standardize: bool = True, init_from: Optional[Model] = None,
                progress: Optional[TextIO] = None):
    """Build a model from ``cfg.seed``, fit input scaling on ``train``, run both phases.

    Returns ``(phase1_best, phase2_best, (history1, history2))``.
    """
    model = M.build_model(spec, np.random.Generator(np.random.PCG64(cfg.seed)))
    if standardize:
        M.fit_scaler(model, M.stack_inputs(spec, train.bundles))
    if init_from is not None:
        M.warm_start(model, init_from)
    phase1, h1 = train_phase(model, train, val, cfg, "mse", cfg.lr, 1, progress)
    phase2, h2 = train_phase(phase1, train, val, cfg, "one_minus_ccc", cfg.fine_tune_lr, 2,
                             progress)
    return phase1, phase2, (h1, h2)


# ---------------------------------------------------------------- late fusion

def solve_late_fusion(preds: np.ndarray, labels: np.ndarray, target: str,
                      ridge: float = 1e-8) -> LateFusionCombiner:
    """Least squares over [preds, 1] via ridge-regularized normal equations."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    X = np.column_stack([preds, np.ones(len(labels))])
    A = X.T @ X + ridge * np.eye(X.shape[1])
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(np.float64).eps:
        raise NumericalError(f"late-fusion design is singular (condition estimate {cond:.3g})")
    try:
        w = np.linalg.solve(A, X.T @ labels)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"late-fusion solve failed (condition estimate {cond:.3g})") from exc
    return LateFusionCombiner(w[:3], float(w[3]), target)


def fit_late_fusion(unimodal: Sequence[Model], data: Split, target: str,
                    ridge: float = 1e-8) -> LateFusionCombiner:
    """Fit the combiner on eval-mode predictions of the visual, audio and text models."""
    if len(unimodal) != 3:
        raise ConfigError("late fusion needs exactly three unimodal models")
    for m in unimodal:
        if m.spec.target != target:
            raise ConfigError(f"model {m.spec.kind} targets {m.spec.target}, not {target}")
    preds = np.column_stack([M.predict_batch(m, data.bundles) for m in unimodal])
    return solve_late_fusion(preds, data.labels, target, ridge)


# ---------------------------------------------------------------- evaluation

Predictor = Union[Model, LateFusionEnsemble]


def predictions(predictor: Predictor, bundles: Sequence[FeatureBundle]) -> np.ndarray:
    if isinstance(predictor, LateFusionEnsemble):
        return predictor.predict_batch(bundles)
    return M.predict_batch(predictor, bundles)


def evaluate_model(predictor: Predictor, data: Split, per_video: bool = False) -> MetricsReport:
    """Metrics over all utterances pooled, or CCC averaged per video.

    Per-video mode averages CCC (and Pearson) over videos with at least two
    utterances; MSE is always pooled.
    """
    pred = predictions(predictor, data.bundles)
    if len(data) < 2:
        raise InsufficientDataError(f"n >= 2 required, got n = {len(data)}")
    report = evaluate_report(pred, data.labels)
    if not per_video:
        return report
    if data.video_ids is None:
        raise ConfigError("per-video evaluation needs video ids")
    groups: dict[str, list[int]] = {}
    for k, vid in enumerate(data.video_ids):
        groups.setdefault(vid, []).append(k)
    cccs, rhos = [], []
    for idx in groups.values():
        if len(idx) < 2:
            continue
        r = evaluate_report(pred[idx], data.labels[idx])
        cccs.append(r.ccc)
        if r.pearson is not None:
            rhos.append(r.pearson)
    if not cccs:
        raise InsufficientDataError("no video has two or more utterances")
    return MetricsReport(ccc=float(np.mean(cccs)),
                         pearson=float(np.mean(rhos)) if rhos else None,
                         mse=report.mse, n=report.n)
