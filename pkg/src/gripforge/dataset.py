"""Windowed supervised datasets: (EMG window -> future force) pairs.

Sample i of a series of length N pairs EMG rows [i, i+W) with the force
value H steps after the window's last input row, so the sample count is
N - W - H + 1. Windows never straddle recording boundaries. The default
train/eval split holds out the contiguous tail of each recording to
avoid temporal leakage between overlapping windows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .signals import N_EMG_CHANNELS, N_COLUMNS

__all__ = [
    "WindowedDataset",
    "make_windows",
    "make_windows_multi",
    "flatten_for_mlp",
    "split_train_eval",
]


@dataclass(frozen=True)
class WindowedDataset:
    """Immutable stack of (window, target) samples.

    inputs:  [n, W, 8] normalized EMG windows
    targets: [n] normalized force at horizon H ([n, H] when multi_horizon)
    recording_index: [n] which source span each sample came from
    target_row: [n] target's row index within its source recording
    spans: (recording_id, n_rows) per source, in input order
    """

    inputs: np.ndarray
    targets: np.ndarray
    window: int
    horizon: int
    spans: tuple[tuple[str, int], ...]
    recording_index: np.ndarray
    target_row: np.ndarray
    multi_horizon: bool = False

    def __post_init__(self):
        for name in ("inputs", "targets", "recording_index", "target_row"):
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def sample(self, i: int) -> tuple[np.ndarray, float | np.ndarray]:
        return self.inputs[i], self.targets[i]

    def take(self, idx: np.ndarray) -> "WindowedDataset":
        idx = np.asarray(idx)
        return WindowedDataset(
            inputs=self.inputs[idx].copy(),
            targets=self.targets[idx].copy(),
            window=self.window,
            horizon=self.horizon,
            spans=self.spans,
            recording_index=self.recording_index[idx].copy(),
            target_row=self.target_row[idx].copy(),
            multi_horizon=self.multi_horizon,
        )

    def manifest(self) -> dict:
        return {
            "window": self.window,
            "horizon": self.horizon,
            "multi_horizon": self.multi_horizon,
            "n_samples": len(self),
            "sources": [
                {"recording_id": sid, "n_rows": n} for sid, n in self.spans
            ],
        }


def _windows_one(table: np.ndarray, window: int, horizon: int, multi_horizon: bool):
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != N_COLUMNS:
        raise DataError(f"expected an [N, {N_COLUMNS}] table, got {table.shape}")
    n = table.shape[0]
    if window < 1 or horizon < 1:
        raise ValueError(f"window and horizon must be >= 1, got W={window}, H={horizon}")
    count = n - window - horizon + 1
    if count < 1:
        raise DataError(
            f"series of {n} rows is too short for W={window}, H={horizon}: "
            f"needs at least {window + horizon} rows ({window + horizon - n} short)"
        )
    emg = table[:, :N_EMG_CHANNELS]
    force = table[:, N_EMG_CHANNELS]
    # [n-W+1, 8, W] -> [count, W, 8]
    swept = np.lib.stride_tricks.sliding_window_view(emg, window, axis=0)
    inputs = np.ascontiguousarray(swept[:count].transpose(0, 2, 1))
    last = window - 1
    if multi_horizon:
        steps = np.lib.stride_tricks.sliding_window_view(force[last + 1 :], horizon)
        targets = np.ascontiguousarray(steps[:count])
        target_row = np.arange(count) + last + horizon
    else:
        targets = force[last + horizon : last + horizon + count].copy()
        target_row = np.arange(count) + last + horizon
    return inputs, targets, target_row


def make_windows(
    table: np.ndarray, window: int, horizon: int, *, multi_horizon: bool = False
) -> WindowedDataset:
    """Build samples from a single normalized [N, 9] table."""
    inputs, targets, target_row = _windows_one(table, window, horizon, multi_horizon)
    count = inputs.shape[0]
    return WindowedDataset(
        inputs=inputs,
        targets=targets,
        window=window,
        horizon=horizon,
        spans=(("", int(np.asarray(table).shape[0])),),
        recording_index=np.zeros(count, dtype=np.int64),
        target_row=target_row,
        multi_horizon=multi_horizon,
    )


def make_windows_multi(
    tables: Sequence[tuple[str, np.ndarray]],
    window: int,
    horizon: int,
    *,
    multi_horizon: bool = False,
) -> WindowedDataset:
    """Build samples per recording and concatenate; no window crosses a boundary."""
    if not tables:
        raise DataError("need at least one source table")
    all_inputs, all_targets, all_rows, all_idx, spans = [], [], [], [], []
    for k, (sid, table) in enumerate(tables):
        inputs, targets, target_row = _windows_one(table, window, horizon, multi_horizon)
        all_inputs.append(inputs)
        all_targets.append(targets)
        all_rows.append(target_row)
        all_idx.append(np.full(inputs.shape[0], k, dtype=np.int64))
        spans.append((sid, int(np.asarray(table).shape[0])))
    return WindowedDataset(
        inputs=np.concatenate(all_inputs),
        targets=np.concatenate(all_targets),
        window=window,
        horizon=horizon,
        spans=tuple(spans),
        recording_index=np.concatenate(all_idx),
        target_row=np.concatenate(all_rows),
        multi_horizon=multi_horizon,
    )


def flatten_for_mlp(window: np.ndarray) -> np.ndarray:
    """Row-major concatenation of a [W, 8] window: timestep 0's channels first."""
    window = np.asarray(window)
    if window.ndim != 2:
        raise ValueError(f"expected a [W, channels] window, got shape {window.shape}")
    return window.reshape(-1)


def _tail_quotas(counts: np.ndarray, eval_total: int) -> np.ndarray:
    """Distribute eval_total across recordings, largest fractional remainder first."""
    counts = counts.astype(np.int64)
    total = counts.sum()
    exact = counts * (eval_total / total)
    quotas = np.floor(exact).astype(np.int64)
    remainders = exact - quotas
    # never hold out an entire recording unless unavoidable
    quotas = np.minimum(quotas, counts)
    short = eval_total - quotas.sum()
    order = np.argsort(-remainders, kind="stable")
    i = 0
    while short > 0 and i < 10 * len(counts):
        k = order[i % len(counts)]
        if quotas[k] < counts[k]:
            quotas[k] += 1
            short -= 1
        i += 1
    return quotas


def split_train_eval(
    ds: WindowedDataset,
    eval_fraction: float,
    seed: int,
    *,
    shuffle: bool = False,
) -> tuple[WindowedDataset, WindowedDataset]:
    """Partition into train/eval; eval gets floor(n * fraction), at least 1.

    Default policy holds out the contiguous tail of each recording
    (temporal-leakage safe); shuffle=True draws a seeded random subset
    instead. Both are deterministic for a fixed seed.
    """
    if not (0.0 < eval_fraction < 1.0):
        raise ValueError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    n = len(ds)
    if n < 2:
        raise DataError(f"cannot split a dataset of {n} sample(s)")
    eval_total = max(1, int(np.floor(n * eval_fraction)))

    if shuffle:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        eval_idx = np.sort(perm[:eval_total])
        train_idx = np.sort(perm[eval_total:])
    else:
        counts = np.bincount(ds.recording_index, minlength=len(ds.spans))
        quotas = _tail_quotas(counts[counts > 0], eval_total)
        # map quotas back to span positions that actually have samples
        present = np.flatnonzero(counts > 0)
        eval_mask = np.zeros(n, dtype=bool)
        for span_pos, quota in zip(present, quotas):
            if quota == 0:
                continue
            members = np.flatnonzero(ds.recording_index == span_pos)
            eval_mask[members[-quota:]] = True
        eval_idx = np.flatnonzero(eval_mask)
        train_idx = np.flatnonzero(~eval_mask)

    return ds.take(train_idx), ds.take(eval_idx)
