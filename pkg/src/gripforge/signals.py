"""Deterministic preprocessing of raw recordings.

Causal (forward-only) IIR filtering realized as cascaded second-order
sections, min-max normalization fitted on the merged multi-subject
corpus, and the streaming filter state used by the online predictor.
All arithmetic is float64; filtering is offline whole-signal with zero
initial state, and a streaming pass with carried section state produces
bit-identical output.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as _sig

from .errors import DataError
from .nncore import check_finite

__all__ = [
    "Recording",
    "FilterCoefficients",
    "ScalerParams",
    "MergedTable",
    "design_bandpass",
    "design_notch",
    "design_lowpass",
    "frequency_response",
    "apply_filter",
    "StreamingFilter",
    "preprocess_recording",
    "merge_recordings",
    "merge_and_fit_scaler",
    "minmax_apply",
    "minmax_invert",
    "N_EMG_CHANNELS",
    "N_COLUMNS",
]

N_EMG_CHANNELS = 8
N_COLUMNS = N_EMG_CHANNELS + 1  # 8 EMG + force


@dataclass(frozen=True)
class Recording:
    """One subject's synchronized capture: 8 EMG channels + 1 force channel."""

    sample_rate_hz: float
    emg: np.ndarray  # [n_samples, 8]
    force: np.ndarray  # [n_samples]
    subject_id: str = ""

    def __post_init__(self):
        emg = np.asarray(self.emg, dtype=np.float64)
        force = np.asarray(self.force, dtype=np.float64)
        if emg.ndim != 2 or emg.shape[1] != N_EMG_CHANNELS:
            raise DataError(f"emg must be [n, {N_EMG_CHANNELS}], got {emg.shape}")
        if force.ndim != 1 or force.shape[0] != emg.shape[0]:
            raise DataError(
                f"force length {force.shape} does not match emg rows {emg.shape[0]}"
            )
        if emg.shape[0] < 1:
            raise DataError("recording must contain at least one sample")
        if not self.sample_rate_hz > 0:
            raise DataError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        check_finite("emg", emg)
        check_finite("force", force)
        object.__setattr__(self, "emg", emg)
        object.__setattr__(self, "force", force)

    @property
    def n_samples(self) -> int:
        return self.emg.shape[0]

    def as_table(self) -> np.ndarray:
        """[n, 9] matrix: EMG columns then force."""
        return np.column_stack([self.emg, self.force])


@dataclass(frozen=True)
class FilterCoefficients:
    """Cascade of normalized biquads; each row is (b0, b1, b2, a1, a2), a0 == 1.

    Every section must be stable: roots of z^2 + a1 z + a2 strictly inside
    the unit circle.
    """

    sections: np.ndarray  # [n_sections, 5]
    sample_rate_hz: float

    def __post_init__(self):
        sec = np.asarray(self.sections, dtype=np.float64)
        if sec.ndim != 2 or sec.shape[1] != 5 or sec.shape[0] < 1:
            raise ValueError(f"sections must be a non-empty [n, 5] array, got {sec.shape}")
        check_finite("sections", sec)
        for i, (_, _, _, a1, a2) in enumerate(sec):
            poles = np.roots([1.0, a1, a2])
            if np.any(np.abs(poles) >= 1.0):
                raise ValueError(
                    f"section {i} is unstable: pole magnitudes {np.abs(poles)}"
                )
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        object.__setattr__(self, "sections", sec)

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def as_sos(self) -> np.ndarray:
        """scipy second-order-sections layout [b0, b1, b2, 1, a1, a2]."""
        n = self.sections.shape[0]
        sos = np.empty((n, 6), dtype=np.float64)
        sos[:, 0:3] = self.sections[:, 0:3]
        sos[:, 3] = 1.0
        sos[:, 4:6] = self.sections[:, 3:5]
        return sos

    def to_dict(self) -> dict:
        return {
            "sections": [
                {"b0": b0, "b1": b1, "b2": b2, "a1": a1, "a2": a2}
                for b0, b1, b2, a1, a2 in self.sections
            ],
            "sample_rate_hz": self.sample_rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterCoefficients":
        sections = np.array(
            [[s["b0"], s["b1"], s["b2"], s["a1"], s["a2"]] for s in d["sections"]],
            dtype=np.float64,
        )
        return cls(sections=sections, sample_rate_hz=float(d["sample_rate_hz"]))

    @classmethod
    def from_sos(cls, sos: np.ndarray, sample_rate_hz: float) -> "FilterCoefficients":
        sos = np.atleast_2d(np.asarray(sos, dtype=np.float64))
        a0 = sos[:, 3:4]
        normalized = sos / a0
        sections = np.column_stack([normalized[:, 0:3], normalized[:, 4:6]])
        return cls(sections=sections, sample_rate_hz=sample_rate_hz)


def design_bandpass(
    low_hz: float, high_hz: float, fs_hz: float, order: int = 4
) -> FilterCoefficients:
    """Butterworth band-pass as a cascade of biquads (bilinear transform).

    order is the prototype order and must be even; the realized cascade has
    `order` second-order sections (band transformation doubles the pole count).
    """
    nyquist = fs_hz / 2.0
    if not (0.0 < low_hz < high_hz < nyquist):
        raise ValueError(
            f"cutoffs must satisfy 0 < low < high < fs/2, got "
            f"low={low_hz}, high={high_hz}, fs={fs_hz}"
        )
    if order < 2 or order % 2 != 0:
        raise ValueError(f"order must be a positive even integer, got {order}")
    sos = _sig.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs_hz, output="sos")
    return FilterCoefficients.from_sos(sos, fs_hz)


def design_notch(center_hz: float, quality_q: float, fs_hz: float) -> FilterCoefficients:
    """Single-biquad notch: deep rejection at center_hz, unity elsewhere."""
    nyquist = fs_hz / 2.0
    if not (0.0 < center_hz < nyquist):
        raise ValueError(
            f"notch center must lie in (0, fs/2) = (0, {nyquist}), got {center_hz}"
        )
    if not quality_q > 0:
        raise ValueError(f"quality factor must be positive, got {quality_q}")
    b, a = _sig.iirnotch(center_hz, quality_q, fs=fs_hz)
    return FilterCoefficients.from_sos(np.hstack([b, a]), fs_hz)


def design_lowpass(cut_hz: float, fs_hz: float, order: int = 4) -> FilterCoefficients:
    """Butterworth low-pass; the default force-channel filter."""
    nyquist = fs_hz / 2.0
    if not (0.0 < cut_hz < nyquist):
        raise ValueError(f"cutoff must lie in (0, fs/2) = (0, {nyquist}), got {cut_hz}")
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    sos = _sig.butter(order, cut_hz, btype="low", fs=fs_hz, output="sos")
    return FilterCoefficients.from_sos(sos, fs_hz)


def frequency_response(
    coeffs: FilterCoefficients, freqs_hz: Sequence[float] | np.ndarray
) -> np.ndarray:
    """Evaluate H(e^{j 2 pi f / fs}) directly from the coefficients.

    Plain polynomial evaluation, independent of any design or filtering
    routine, so it can serve as the analytic oracle for both.
    """
    f = np.asarray(freqs_hz, dtype=np.float64)
    z1 = np.exp(-2j * np.pi * f / coeffs.sample_rate_hz)
    z2 = z1 * z1
    h = np.ones_like(z1, dtype=np.complex128)
    for b0, b1, b2, a1, a2 in coeffs.sections:
        h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
    return h


def apply_filter(coeffs: FilterCoefficients, x: np.ndarray) -> np.ndarray:
    """Run the cascade over a whole signal, zero initial state, causal.

    Accepts a 1-D signal or a [n, channels] matrix filtered column-wise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot filter an empty signal")
    check_finite("signal", x)
    return _sig.sosfilt(coeffs.as_sos(), x, axis=0)


class StreamingFilter:
    """Stateful per-channel cascade for sample-at-a-time filtering.

    Feeding a signal in chunks of any size yields output bit-identical to
    apply_filter on the whole signal.
    """

    def __init__(self, coeffs: FilterCoefficients, n_channels: int = 1):
        self.coeffs = coeffs
        self.n_channels = n_channels
        self._sos = coeffs.as_sos()
        self._zi = np.zeros((coeffs.n_sections, 2, n_channels))

    def process(self, chunk: np.ndarray) -> np.ndarray:
        """Filter a chunk: [n] for 1 channel, or [n, n_channels]."""
        chunk = np.asarray(chunk, dtype=np.float64)
        squeeze = False
        if chunk.ndim == 1:
            if self.n_channels != 1:
                raise DataError("1-D chunk fed to a multi-channel streaming filter")
            chunk = chunk[:, None]
            squeeze = True
        if chunk.shape[1] != self.n_channels:
            raise DataError(
                f"chunk has {chunk.shape[1]} channels, filter expects {self.n_channels}"
            )
        out, self._zi = _sig.sosfilt(self._sos, chunk, axis=0, zi=self._zi)
        return out[:, 0] if squeeze else out

    def reset(self):
        self._zi[:] = 0.0


def preprocess_recording(
    rec: Recording,
    bandpass: FilterCoefficients,
    notch: FilterCoefficients,
    force_bandpass: FilterCoefficients | None = None,
    force_notch: FilterCoefficients | None = None,
) -> Recording:
    """Band-pass then notch every channel, preserving shape.

    By default the force channel goes through the same pair of filters as
    the EMG channels; pass force_bandpass/force_notch to use a per-type
    design (the CLI defaults to a low-pass for force).
    """
    for name, f in (("bandpass", bandpass), ("notch", notch)):
        if f.sample_rate_hz != rec.sample_rate_hz:
            raise DataError(
                f"{name} filter designed for {f.sample_rate_hz} Hz but recording "
                f"is sampled at {rec.sample_rate_hz} Hz"
            )
    fb = force_bandpass if force_bandpass is not None else bandpass
    fn = force_notch if force_notch is not None else notch
    for name, f in (("force_bandpass", fb), ("force_notch", fn)):
        if f.sample_rate_hz != rec.sample_rate_hz:
            raise DataError(
                f"{name} filter designed for {f.sample_rate_hz} Hz but recording "
                f"is sampled at {rec.sample_rate_hz} Hz"
            )
    emg = apply_filter(notch, apply_filter(bandpass, rec.emg))
    force = apply_filter(fn, apply_filter(fb, rec.force))
    return Recording(
        sample_rate_hz=rec.sample_rate_hz,
        emg=emg,
        force=force,
        subject_id=rec.subject_id,
    )


@dataclass(frozen=True)
class ScalerParams:
    """Per-column min/max of the fitted corpus (9 columns: 8 EMG + force)."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"min/max must be 1-D and congruent, got {lo.shape}/{hi.shape}")
        if np.any(hi < lo):
            raise ValueError("max < min for some column")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def n_columns(self) -> int:
        return self.min.shape[0]

    def select(self, columns) -> "ScalerParams":
        """Scaler restricted to a subset of columns (e.g. EMG only)."""
        idx = np.asarray(columns)
        return ScalerParams(min=self.min[idx], max=self.max[idx])

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(min=np.asarray(d["min"], float), max=np.asarray(d["max"], float))


@dataclass(frozen=True)
class MergedTable:
    """Rows of all recordings stacked in input order, with source spans."""

    data: np.ndarray  # [total_rows, 9]
    spans: tuple[tuple[str, int, int], ...]  # (subject_id, start_row, stop_row)

    def tables(self) -> list[tuple[str, np.ndarray]]:
        """Per-recording (subject_id, table) views in original order."""
        return [(sid, self.data[a:b]) for sid, a, b in self.spans]


def merge_recordings(recs: Iterable[Recording]) -> MergedTable:
    recs = list(recs)
    if not recs:
        raise DataError("need at least one recording")
    rates = {r.sample_rate_hz for r in recs}
    if len(rates) > 1:
        raise DataError(f"recordings have mixed sample rates: {sorted(rates)}")
    spans = []
    start = 0
    blocks = []
    for r in recs:
        blocks.append(r.as_table())
        spans.append((r.subject_id, start, start + r.n_samples))
        start += r.n_samples
    return MergedTable(data=np.vstack(blocks), spans=tuple(spans))


def merge_and_fit_scaler(recs: Iterable[Recording]) -> tuple[MergedTable, ScalerParams]:
    """Concatenate all subjects and fit per-column min/max on the result."""
    merged = merge_recordings(recs)
    lo = merged.data.min(axis=0)
    hi = merged.data.max(axis=0)
    if np.any(hi == lo):
        flat = np.flatnonzero(hi == lo)
        warnings.warn(
            f"columns {flat.tolist()} are constant; they will normalize to 0.5",
            stacklevel=2,
        )
    return merged, ScalerParams(min=lo, max=hi)


def _check_columns(params: ScalerParams, table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if table.ndim == 1:
        # single row
        table = table[None, :]
    if table.shape[1] != params.n_columns:
        raise DataError(
            f"table has {table.shape[1]} columns, scaler was fitted on {params.n_columns}"
        )
    return table


def minmax_apply(params: ScalerParams, table: np.ndarray) -> np.ndarray:
    """(v - min)/(max - min) per column; constant columns map to 0.5."""
    squeeze = np.asarray(table).ndim == 1
    table = _check_columns(params, table)
    span = params.max - params.min
    degenerate = span == 0
    safe_span = np.where(degenerate, 1.0, span)
    out = (table - params.min) / safe_span
    if np.any(degenerate):
        out[:, degenerate] = 0.5
    return out[0] if squeeze else out


def minmax_invert(params: ScalerParams, table: np.ndarray) -> np.ndarray:
    """Exact affine inverse of minmax_apply; constant columns recover min."""
    squeeze = np.asarray(table).ndim == 1
    table = _check_columns(params, table)
    span = params.max - params.min
    out = table * span + params.min
    return out[0] if squeeze else out
