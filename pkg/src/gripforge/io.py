"""File formats: recording CSVs, JSON documents, hashing, manifests.

Recording CSV: header `t,emg1,...,emg8,force`, one row per sample at a
uniform rate, UTF-8, dot decimal separator. Writers use a fixed float
format so identical data produces byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from .errors import DataError
from .signals import N_EMG_CHANNELS, Recording

__all__ = [
    "RECORDING_HEADER",
    "read_recording_csv",
    "write_recording_csv",
    "write_json",
    "read_json",
    "atomic_write_text",
    "sha256_file",
    "run_manifest",
    "write_table_csv",
]

RECORDING_HEADER = "t," + ",".join(f"emg{i}" for i in range(1, 9)) + ",force"
FLOAT_FMT = "%.10g"


def read_recording_csv(
    path: str | Path, sample_rate_hz: float = 200.0, subject_id: str | None = None
) -> Recording:
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != RECORDING_HEADER:
            raise DataError(
                f"{path}: unexpected header {header!r}; expected {RECORDING_HEADER!r}"
            )
        try:
            data = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise DataError(f"{path}: malformed numeric data ({e})") from e
    if data.shape[1] != N_EMG_CHANNELS + 2:
        raise DataError(
            f"{path}: expected {N_EMG_CHANNELS + 2} columns, found {data.shape[1]}"
        )
    return Recording(
        sample_rate_hz=sample_rate_hz,
        emg=data[:, 1 : 1 + N_EMG_CHANNELS],
        force=data[:, 1 + N_EMG_CHANNELS],
        subject_id=subject_id if subject_id is not None else path.stem,
    )


def write_recording_csv(path: str | Path, rec: Recording) -> None:
    path = Path(path)
    t = np.arange(rec.n_samples) / rec.sample_rate_hz
    table = np.column_stack([t, rec.emg, rec.force])
    lines = [RECORDING_HEADER]
    for row in table:
        lines.append(",".join(FLOAT_FMT % v for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_table_csv(path: str | Path, columns: list[str], rows: list[dict]) -> None:
    """Deterministic CSV for metric tables; floats via repr, ints verbatim."""
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row[col]
            if isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(Path(path), json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        return json.load(fh)


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_manifest(
    command: str,
    config: dict,
    inputs: list[str | Path],
    outputs: list[str | Path],
    seeds: dict | None = None,
) -> dict:
    """Everything needed to reproduce a run: config echo, input hashes,
    seeds, tool version, timestamps, output paths."""
    from . import __version__

    return {
        "command": command,
        "config": config,
        "inputs": [
            {"path": str(p), "sha256": sha256_file(p)} for p in inputs
        ],
        "outputs": [str(p) for p in outputs],
        "seeds": seeds or {},
        "tool_version": __version__,
        "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
