"""Metrics, inference timing, squared-error distributions, and the
(model x horizon) sweep that produces the consolidated comparison table.

Metrics are computed on normalized force. Test time is wall clock over a
single sequential pass of single-sample inference (the prosthesis
control-loop scenario), measured after one untimed warm-up pass.
Quantiles use linear interpolation between order statistics.
"""
from __future__ import annotations

import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace, asdict, field

import numpy as np

from .dataset import WindowedDataset, make_windows_multi, split_train_eval
from .errors import ConstantTargetError, DataError
from .models import Model
from .training import TrainConfig, TrainHistory, train

__all__ = [
    "r_squared",
    "error_distribution",
    "ErrorDistribution",
    "measure_test_time",
    "EvalReport",
    "evaluate_model",
    "horizon_sweep",
    "TABLE_COLUMNS",
    "consolidated_rows",
]

TABLE_COLUMNS = [
    "model", "horizon", "mse", "r2", "test_time_s", "pred_per_s",
    "n_eval", "se_min", "se_q1", "se_median", "se_q3", "se_max",
    "se_whisker_lo", "se_whisker_hi", "se_outliers",
]

# deterministic metric columns (excludes wall-clock measurements)
METRIC_COLUMNS = [c for c in TABLE_COLUMNS if c not in ("test_time_s", "pred_per_s")]


def r_squared(pred: np.ndarray, actual: np.ndarray) -> float:
    """1 - SS_res/SS_tot with the mean taken over the evaluated set."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    if pred.ndim != 1 or pred.size < 2:
        raise ValueError("r_squared needs 1-D vectors of length >= 2")
    mu = actual.mean()
    ss_tot = float(np.sum((actual - mu) ** 2))
    if ss_tot == 0.0:
        raise ConstantTargetError("actual values are constant; R^2 is undefined")
    ss_res = float(np.sum((actual - pred) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass(frozen=True)
class ErrorDistribution:
    """Five-number summary of per-sample squared errors plus 1.5*IQR whiskers."""

    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_lo: float
    whisker_hi: float
    n_outliers: int
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def error_distribution(pred: np.ndarray, actual: np.ndarray) -> ErrorDistribution:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    se = (pred - actual) ** 2
    q1, med, q3 = np.quantile(se, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = se[(se >= lo_fence) & (se <= hi_fence)]
    return ErrorDistribution(
        min=float(se.min()),
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        max=float(se.max()),
        whisker_lo=float(inside.min()),
        whisker_hi=float(inside.max()),
        n_outliers=int(np.count_nonzero((se < lo_fence) | (se > hi_fence))),
        n=int(se.size),
    )


def _environment_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def measure_test_time(model: Model, ds: WindowedDataset) -> dict:
    """Wall clock of one sequential single-sample pass over the eval set.

    One untimed warm-up pass precedes the measurement. Returns the time,
    the derived rate, and an environment descriptor.
    """
    n = len(ds)
    if n == 0:
        raise DataError("cannot time an empty evaluation set")
    inputs = ds.inputs
    for i in range(n):
        model.forward(inputs[i])
    t0 = time.perf_counter()
    for i in range(n):
        model.forward(inputs[i])
    elapsed = time.perf_counter() - t0
    return {
        "test_time_s": elapsed,
        "predictions_per_second": n / elapsed,
        "n": n,
        "environment": _environment_descriptor(),
    }


@dataclass
class EvalReport:
    """Everything reported for one (model, horizon) cell."""

    model: str
    horizon: int
    mse: float
    r2: float
    test_time_s: float
    predictions_per_second: float
    n_eval: int
    distribution: ErrorDistribution
    config: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    per_step: list[dict] = field(default_factory=list)  # multi-horizon extension

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mse must be non-negative")
        if self.r2 > 1.0:
            raise ValueError("r2 cannot exceed 1")
        d = self.distribution
        if not (d.q1 <= d.median <= d.q3):
            raise ValueError("quartiles out of order")
        if self.test_time_s <= 0:
            raise ValueError("test_time_s must be positive")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "horizon": self.horizon,
            "mse": self.mse,
            "r2": self.r2,
            "test_time_s": self.test_time_s,
            "predictions_per_second": self.predictions_per_second,
            "n_eval": self.n_eval,
            "distribution": self.distribution.to_dict(),
            "config": self.config,
            "environment": self.environment,
            "per_step": self.per_step,
        }

    def table_row(self) -> dict:
        d = self.distribution
        return {
            "model": self.model,
            "horizon": self.horizon,
            "mse": self.mse,
            "r2": self.r2,
            "test_time_s": self.test_time_s,
            "pred_per_s": self.predictions_per_second,
            "n_eval": self.n_eval,
            "se_min": d.min,
            "se_q1": d.q1,
            "se_median": d.median,
            "se_q3": d.q3,
            "se_max": d.max,
            "se_whisker_lo": d.whisker_lo,
            "se_whisker_hi": d.whisker_hi,
            "se_outliers": d.n_outliers,
        }


def predict_batched(model: Model, ds: WindowedDataset, chunk: int = 1024) -> np.ndarray:
    """Vectorized predictions over a dataset (metrics path, not the timer)."""
    outs = []
    for a in range(0, len(ds), chunk):
        outs.append(model.forward_batch(ds.inputs[a : a + chunk]))
    return np.concatenate(outs) if outs else np.empty(0)


def evaluate_model(
    model: Model,
    eval_ds: WindowedDataset,
    config: dict | None = None,
    *,
    timing: bool = True,
) -> EvalReport:
    """Metrics + timing + squared-error distribution for one trained model."""
    if len(eval_ds) == 0:
        raise DataError("evaluation set is empty")
    pred = predict_batched(model, eval_ds)
    per_step: list[dict] = []
    if eval_ds.multi_horizon:
        actual2 = eval_ds.targets
        for k in range(actual2.shape[1]):
            per_step.append(
                {
                    "step": k + 1,
                    "mse": float(np.mean((pred[:, k] - actual2[:, k]) ** 2)),
                    "r2": r_squared(pred[:, k], actual2[:, k]),
                }
            )
        pred_flat = pred[:, -1]
        actual = actual2[:, -1]
    else:
        pred_flat = pred
        actual = eval_ds.targets
    mse = float(np.mean((pred_flat - actual) ** 2))
    r2 = r_squared(pred_flat, actual)
    dist = error_distribution(pred_flat, actual)
    if timing:
        tinfo = measure_test_time(model, eval_ds)
        t_s, rate, env = (
            tinfo["test_time_s"],
            tinfo["predictions_per_second"],
            tinfo["environment"],
        )
    else:
        t_s, rate, env = float("nan"), float("nan"), {}
    return EvalReport(
        model=model.config.arch,
        horizon=eval_ds.horizon,
        mse=mse,
        r2=r2,
        test_time_s=t_s,
        predictions_per_second=rate,
        n_eval=len(eval_ds),
        distribution=dist,
        config=config or {},
        environment=env,
        per_step=per_step,
    )


def _run_cell(args) -> dict:
    corpus, cell_config = args
    ds = make_windows_multi(
        corpus, cell_config.window, cell_config.horizon,
        multi_horizon=cell_config.multi_horizon,
    )
    train_ds, eval_ds = split_train_eval(
        ds, cell_config.eval_fraction, cell_config.seed,
        shuffle=cell_config.shuffle_split,
    )
    model, history = train(train_ds, eval_ds, cell_config)
    report = evaluate_model(model, eval_ds, config=cell_config.to_dict())
    return {
        "report": report,
        "history": history,
        "model": model,
        "dataset_manifest": ds.manifest(),
    }


def horizon_sweep(
    corpus: list[tuple[str, np.ndarray]],
    architectures: list[str],
    horizons: list[int],
    base_config: TrainConfig,
    *,
    workers: int = 1,
) -> list[dict]:
    """Train and evaluate every (architecture, horizon) cell from scratch.

    Each cell uses the same base seed, so a single-cell sweep is identical
    to calling train + evaluate directly. Cells are independent; with
    workers > 1 they run in parallel processes and, being individually
    deterministic, produce results identical to a serial sweep.
    """
    if not architectures or not horizons:
        raise ValueError("need at least one architecture and one horizon")
    if any(h < 1 for h in horizons):
        raise ValueError(f"horizons must be positive, got {horizons}")
    cells = [
        (corpus, replace(base_config, arch=arch, horizon=h))
        for h in horizons
        for arch in architectures
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    return results


def consolidated_rows(reports: list[EvalReport]) -> list[dict]:
    return [r.table_row() for r in reports]
