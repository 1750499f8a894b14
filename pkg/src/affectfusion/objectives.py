"""Regression metrics: MSE, Pearson, concordance correlation, and the 1 - CCC loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, InsufficientDataError, ShapeError


def _pair(pred, gnd) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gnd = np.asarray(gnd, dtype=np.float64).reshape(-1)
    if pred.shape != gnd.shape:
        raise ShapeError(f"pred has {pred.size} entries, gnd has {gnd.size}")
    if pred.size == 0:
        raise InsufficientDataError("empty series")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gnd))):
        raise ShapeError("series contain non-finite values")
    return pred, gnd


def _need(n: int, k: int = 2) -> None:
    if n < k:
        raise InsufficientDataError(f"n >= {k} required, got n = {n}")


@dataclass(frozen=True)
class SeriesStats:
    mean: float
    var: float  # population (divide by n)


@dataclass(frozen=True)
class _Moments:
    pred: SeriesStats
    gnd: SeriesStats
    cov: float
    pred_const: bool
    gnd_const: bool
    n: int


def _moments(pred: np.ndarray, gnd: np.ndarray) -> _Moments:
    # exact zeros for constant series; float means would otherwise leave ~1e-17 residue
    pred_const = bool(pred.max() == pred.min())
    gnd_const = bool(gnd.max() == gnd.min())
    mp = float(pred[0]) if pred_const else float(pred.mean())
    mg = float(gnd[0]) if gnd_const else float(gnd.mean())
    dp = np.zeros_like(pred) if pred_const else pred - mp
    dg = np.zeros_like(gnd) if gnd_const else gnd - mg
    return _Moments(
        pred=SeriesStats(mp, float(np.mean(dp * dp))),
        gnd=SeriesStats(mg, float(np.mean(dg * dg))),
        cov=float(np.mean(dp * dg)),
        pred_const=pred_const,
        gnd_const=gnd_const,
        n=pred.size,
    )


def _rescaled(pred: np.ndarray, gnd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # CCC and Pearson are invariant to a common scale; a power-of-two factor is exact
    # and keeps tiny-magnitude series from underflowing to zero variance
    top = max(float(np.abs(pred).max()), float(np.abs(gnd).max()))
    if top == 0.0:
        return pred, gnd
    e = np.frexp(top)[1]
    return np.ldexp(pred, -e), np.ldexp(gnd, -e)


def series_stats(x) -> SeriesStats:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InsufficientDataError("empty series")
    return _moments(x, x).pred


def mse(pred, gnd) -> float:
    pred, gnd = _pair(pred, gnd)
    d = pred - gnd
    return float(np.mean(d * d))


def _pearson(m: _Moments) -> Optional[float]:
    if m.pred_const or m.gnd_const:
        return None
    r = m.cov / (np.sqrt(m.pred.var) * np.sqrt(m.gnd.var))
    return float(np.clip(r, -1.0, 1.0))


def _ccc(m: _Moments) -> float:
    denom = m.gnd.var + m.pred.var + (m.gnd.mean - m.pred.mean) ** 2
    if denom == 0.0:
        raise DegenerateInputError("CCC undefined: both series constant with equal means")
    return float(np.clip(2.0 * m.cov / denom, -1.0, 1.0))


def pearson(pred, gnd) -> Optional[float]:
    """Correlation from population moments; ``None`` when either series is constant."""
    pred, gnd = _pair(pred, gnd)
    _need(pred.size)
    return _pearson(_moments(*_rescaled(pred, gnd)))


def ccc(pred, gnd) -> float:
    """Concordance correlation coefficient.

    2 cov / (var_gnd + var_pred + (mean_gnd - mean_pred)^2), population moments.
    A constant predictor scores 0 as long as the denominator is positive.
    """
    pred, gnd = _pair(pred, gnd)
    _need(pred.size)
    return _ccc(_moments(*_rescaled(pred, gnd)))


def ccc_loss_and_grad(pred, gnd) -> tuple[float, np.ndarray]:
    """``1 - ccc`` and its gradient w.r.t. ``pred`` (``gnd`` held fixed)."""
    pred, gnd = _pair(pred, gnd)
    n = pred.size
    _need(n)
    mp, mg = pred.mean(), gnd.mean()
    dp, dg = pred - mp, gnd - mg
    num = 2.0 * np.mean(dp * dg)
    den = np.mean(dp * dp) + np.mean(dg * dg) + (mp - mg) ** 2
    if den == 0.0:
        raise DegenerateInputError("CCC undefined: both series constant with equal means")
    dnum = 2.0 * dg / n
    dden = 2.0 * dp / n + 2.0 * (mp - mg) / n
    drho = (dnum * den - num * dden) / (den * den)
    return float(1.0 - num / den), -drho


def mse_loss_and_grad(pred, gnd) -> tuple[float, np.ndarray]:
    pred, gnd = _pair(pred, gnd)
    d = pred - gnd
    return float(np.mean(d * d)), 2.0 * d / d.size


LOSSES = {"mse": mse_loss_and_grad, "one_minus_ccc": ccc_loss_and_grad}


@dataclass(frozen=True)
class MetricsReport:
    ccc: float
    pearson: Optional[float]
    mse: float
    n: int

    def as_line(self) -> str:
        p = "nan" if self.pearson is None else repr(self.pearson)
        return f"ccc={self.ccc!r} mse={self.mse!r} pearson={p} n={self.n}"

    def to_dict(self) -> dict:
        return {"ccc": self.ccc, "pearson": self.pearson, "mse": self.mse, "n": self.n}


def evaluate_report(pred, gnd) -> MetricsReport:
    pred, gnd = _pair(pred, gnd)
    _need(pred.size)
    m = _moments(*_rescaled(pred, gnd))
    d = pred - gnd
    return MetricsReport(ccc=_ccc(m), pearson=_pearson(m), mse=float(np.mean(d * d)), n=m.n)
