"""Error metrics for trip-time regression: MAPE (the training loss), MAE, RMSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass
class MetricsReport:
    mape: float
    mae: float
    rmse: float
    n: int

    def to_dict(self) -> dict:
        return {"mape": self.mape, "mae": self.mae, "rmse": self.rmse, "n": self.n}


def _as_pair(y, y_hat, require_positive: bool):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"metric inputs differ in length: {y.shape[0]} vs {y_hat.shape[0]}")
    if y.size == 0:
        raise DomainError("metrics need at least one sample")
    if require_positive and np.any(y <= 0):
        raise DomainError("MAPE needs strictly positive ground-truth values")
    return y, y_hat


def mape(y, y_hat) -> float:
    """Mean of |y - y_hat| / y."""
    y, y_hat = _as_pair(y, y_hat, require_positive=True)
    return float(np.mean(np.abs(y - y_hat) / y))


def mae(y, y_hat) -> float:
    y, y_hat = _as_pair(y, y_hat, require_positive=False)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat) -> float:
    y, y_hat = _as_pair(y, y_hat, require_positive=False)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mape_value_and_grad(y, y_hat) -> tuple[float, np.ndarray]:
    """MAPE and its gradient wrt predictions: sign(y_hat - y) / (N * y).

    The subgradient at exact ties is 0.
    """
    y, y_hat = _as_pair(y, y_hat, require_positive=True)
    value = float(np.mean(np.abs(y - y_hat) / y))
    grad = np.sign(y_hat - y) / (y.size * y)
    return value, grad


def compute_report(y, y_hat) -> MetricsReport:
    y, y_hat = _as_pair(y, y_hat, require_positive=True)
    return MetricsReport(mape=mape(y, y_hat), mae=mae(y, y_hat), rmse=rmse(y, y_hat), n=int(y.size))
