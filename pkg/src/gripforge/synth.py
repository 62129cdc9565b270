"""Synthetic press/release recordings for desk-scale runs.

Generative model, per subject s (all draws from one seeded generator):

  activation a(t): a sequence of press episodes. Each press lasts
      0.6-2.5 s, followed by 0.25-1.5 s of rest; its profile is a raised
      cosine bump scaled by a per-press amplitude in [0.35, 1], with a
      small low-frequency wobble so repeated presses differ. a(t) in [0, ~1.1].

  force(t) = peak_s * (k * a)(t) + sigma_f * n_f(t)
      peak_s ~ U(30, 70) (newtons; the maximum-force range of a pinch
      grip), k a causal gamma kernel k(tau) ∝ tau * exp(-tau/tau_c),
      tau_c = 20 ms, truncated at off ms and normalized to sum 1. Force
      therefore lags muscle activation by the electromechanical delay
      embedded in k.

  emg_c(t) = g_{s,c} * a(t) * carrier_c(t) + sigma_w * w_c(t)
             + hum_c * sin(2 pi 50 t + phi_c)
      g_{s,c} ~ U(0.4, 1.0) per channel (a fixed synergy pattern),
      carrier_c = unit-RMS mix of a random-frequency (25-55 Hz) sinusoid
      and band-limited (20-60 Hz) noise. EMG amplitude tracks activation
      instantaneously while force lags, so force is recoverable from a
      short EMG history but not from one instant; the mains hum gives
      the notch filter real work.

Everything is derived from numpy Generators seeded by (seed, subject),
so equal seeds give byte-identical corpora.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signals import N_EMG_CHANNELS, Recording, apply_filter, design_bandpass

__all__ = ["SynthConfig", "generate_recording", "generate_corpus", "force_kernel"]


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    subjects: int = 3
    duration_s: float = 90.0
    sample_rate_hz: float = 200.0
    peak_force_range: tuple[float, float] = (30.0, 70.0)
    kernel_tau_s: float = 0.010
    kernel_cutoff_s: float = 0.070
    carrier_band_hz: tuple[float, float] = (20.0, 60.0)
    carrier_tone_mix: float = 0.6
    emg_noise: float = 0.05
    force_noise_n: float = 0.25
    hum_amplitude: float = 0.10

    def __post_init__(self):
        if self.subjects < 1 or self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("subjects, duration_s and sample_rate_hz must be positive")


def force_kernel(cfg: SynthConfig) -> np.ndarray:
    """Causal gamma kernel, unit sum; embodies the activation-to-force lag."""
    fs = cfg.sample_rate_hz
    length = max(2, int(round(cfg.kernel_cutoff_s * fs)))
    tau = np.arange(length) / fs
    k = tau * np.exp(-tau / cfg.kernel_tau_s)
    return k / k.sum()


def _activation(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    a = np.zeros(n)
    t = int(round(rng.uniform(0.1, 0.6) * fs))  # initial rest
    while t < n:
        press = int(round(rng.uniform(0.6, 2.5) * fs))
        rest = int(round(rng.uniform(0.25, 1.5) * fs))
        amp = rng.uniform(0.35, 1.0)
        end = min(t + press, n)
        m = end - t
        if m > 2:
            tau = np.arange(m) / press
            bump = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.minimum(tau, 1.0)))
            wobble = 1.0 + 0.08 * np.sin(
                2.0 * np.pi * rng.uniform(0.5, 1.5) * tau + rng.uniform(0, 2 * np.pi)
            )
            a[t:end] = amp * bump * wobble
        t = end + rest
    return np.clip(a, 0.0, None)


def _carrier(rng: np.random.Generator, n: int, cfg: SynthConfig) -> np.ndarray:
    """Unit-RMS oscillatory content: random-frequency tone + band noise."""
    lo, hi = cfg.carrier_band_hz
    bp = design_bandpass(lo, hi, cfg.sample_rate_hz, 4)
    raw = rng.standard_normal(n + 200)
    shaped = apply_filter(bp, raw)[200:]  # drop the filter transient
    shaped /= np.sqrt(np.mean(shaped**2))
    t = np.arange(n) / cfg.sample_rate_hz
    tone = np.sqrt(2.0) * np.sin(
        2.0 * np.pi * rng.uniform(25.0, 55.0) * t + rng.uniform(0, 2 * np.pi)
    )
    mix = cfg.carrier_tone_mix
    c = mix * tone + (1.0 - mix) * shaped
    return c / np.sqrt(np.mean(c**2))


def generate_recording(cfg: SynthConfig, subject: int) -> Recording:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, subject)))
    fs = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * fs))
    a = _activation(rng, n, fs)

    peak = rng.uniform(*cfg.peak_force_range)
    k = force_kernel(cfg)
    force = peak * np.convolve(a, k)[:n] + cfg.force_noise_n * rng.standard_normal(n)

    t = np.arange(n) / fs
    gains = rng.uniform(0.4, 1.0, size=N_EMG_CHANNELS)
    emg = np.empty((n, N_EMG_CHANNELS))
    for c in range(N_EMG_CHANNELS):
        carrier = _carrier(rng, n, cfg)
        hum = cfg.hum_amplitude * np.sin(
            2.0 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi)
        )
        emg[:, c] = gains[c] * a * carrier + cfg.emg_noise * rng.standard_normal(n) + hum
    return Recording(
        sample_rate_hz=fs,
        emg=emg,
        force=force,
        subject_id=f"synth{subject:02d}",
    )


def generate_corpus(cfg: SynthConfig) -> list[Recording]:
    return [generate_recording(cfg, s) for s in range(cfg.subjects)]
