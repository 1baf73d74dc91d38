"""Gammatone filterbank (GFB) energy features and context stacking.

Each channel is a 4th-order gammatone filter, applied as a causal FIR
(truncated impulse response) through one batched FFT convolution.  Frame
power is the mean squared filter output over a rectangular window, and the
per-channel powers are root-compressed.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from .errors import ConfigError, InputError

SAMPLE_RATE = 16000
GAMMATONE_ORDER = 4
# 128 ms; the 50 Hz filter's envelope is below 1e-4 of its peak by then
IR_LENGTH = 2048


@dataclass(frozen=True)
class AudioBuffer:
    utterance_id: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InputError(f"{self.utterance_id}: samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise InputError(f"{self.utterance_id}: samples contain non-finite values")
        if self.sample_rate != SAMPLE_RATE:
            raise InputError(
                f"{self.utterance_id}: sample_rate: expected {SAMPLE_RATE}, got {self.sample_rate}"
            )
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class GfbConfig:
    num_filters: int = 40
    window_len: float = 0.026
    hop: float = 0.010
    root: int = 15
    fmin: float = 50.0
    fmax: float = 7400.0

    def validate(self, sample_rate: int = SAMPLE_RATE) -> None:
        if self.num_filters < 2:
            raise ConfigError(f"num_filters must be >= 2, got {self.num_filters}")
        if not (0 < self.fmin < self.fmax <= sample_rate / 2):
            raise ConfigError(
                f"need 0 < fmin < fmax <= {sample_rate / 2}, got fmin={self.fmin}, fmax={self.fmax}"
            )
        if int(self.root) != self.root or self.root < 1:
            raise ConfigError(f"root must be a positive integer, got {self.root}")
        if self.window_len <= 0 or self.hop <= 0:
            raise ConfigError("window_len and hop must be positive")

    def window_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.window_len * sample_rate))

    def hop_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.hop * sample_rate))


@dataclass(frozen=True)
class FeatureMatrix:
    utterance_id: str
    frames: np.ndarray
    frame_period: float = 0.010

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise InputError(f"{self.utterance_id}: frames must be a T x D matrix with T >= 1")
        if not np.all(np.isfinite(frames)) or np.any(frames < 0):
            raise InputError(f"{self.utterance_id}: frames must be finite and non-negative")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_erb_rate(f):
    """ERB-rate (number of ERBs below ``f``) for ERB(f) = 24.7 (4.37 f/1000 + 1)."""
    return (1000.0 / (24.7 * 4.37)) * np.log(4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


def erb_rate_to_hz(e):
    return (np.exp(np.asarray(e, dtype=np.float64) * 24.7 * 4.37 / 1000.0) - 1.0) * 1000.0 / 4.37


def erb_bandwidth(f):
    return 24.7 * (4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


def erb_centers(cfg: GfbConfig) -> np.ndarray:
    """Center frequencies uniformly spaced on the ERB-rate axis, endpoints exact."""
    cfg.validate()
    rates = np.linspace(hz_to_erb_rate(cfg.fmin), hz_to_erb_rate(cfg.fmax), cfg.num_filters)
    centers = erb_rate_to_hz(rates)
    centers[0], centers[-1] = cfg.fmin, cfg.fmax
    return centers


def gammatone_ir(fc: float, sample_rate: int = SAMPLE_RATE, length: int = IR_LENGTH) -> np.ndarray:
    """Truncated 4th-order gammatone impulse response with unit gain at ``fc``."""
    t = np.arange(length) / sample_rate
    b = 1.019 * erb_bandwidth(fc)
    ir = t ** (GAMMATONE_ORDER - 1) * np.exp(-2 * np.pi * b * t) * np.cos(2 * np.pi * fc * t)
    gain = abs(np.sum(ir * np.exp(-2j * np.pi * fc * t)))
    return ir / gain


@functools.lru_cache(maxsize=16)
def _filter_spectra(cfg: GfbConfig, nfft: int) -> np.ndarray:
    irs = np.stack([gammatone_ir(fc) for fc in erb_centers(cfg)])
    return sp_fft.rfft(irs, nfft, axis=1)


def gammatone_outputs(samples: np.ndarray, cfg: GfbConfig) -> np.ndarray:
    """Causal filterbank outputs, shape (num_filters, N)."""
    n = samples.size
    nfft = sp_fft.next_fast_len(n + IR_LENGTH - 1, real=True)
    spec = sp_fft.rfft(samples, nfft)
    return sp_fft.irfft(_filter_spectra(cfg, nfft) * spec, nfft, axis=1)[:, :n]


def num_frames(n_samples: int, cfg: GfbConfig, sample_rate: int = SAMPLE_RATE) -> int:
    w, h = cfg.window_samples(sample_rate), cfg.hop_samples(sample_rate)
    if n_samples < w:
        return 0
    return (n_samples - w) // h + 1


def frame_power(signals: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Mean of squared values over rectangular frames; ``signals`` is (C, N), result (T, C)."""
    n = signals.shape[-1]
    t = (n - window) // hop + 1
    csum = np.zeros((signals.shape[0], n + 1))
    np.cumsum(signals * signals, axis=1, out=csum[:, 1:])
    starts = np.arange(t) * hop
    power = (csum[:, starts + window] - csum[:, starts]) / window
    # cumsum differences can dip a hair below zero on silent stretches
    return np.maximum(power, 0.0).T


def gfb_extract(audio: AudioBuffer, cfg: GfbConfig = GfbConfig()) -> FeatureMatrix:
    cfg.validate(audio.sample_rate)
    if audio.sample_rate != SAMPLE_RATE:
        raise InputError(f"sample_rate: expected {SAMPLE_RATE}, got {audio.sample_rate}")
    w = cfg.window_samples(audio.sample_rate)
    if audio.samples.size < w:
        raise InputError(
            f"{audio.utterance_id}: audio too short ({audio.samples.size} samples < window {w})"
        )
    outputs = gammatone_outputs(audio.samples, cfg)
    power = frame_power(outputs, w, cfg.hop_samples(audio.sample_rate))
    frames = np.power(power, 1.0 / cfg.root).astype(np.float32)
    return FeatureMatrix(audio.utterance_id, frames, frame_period=cfg.hop)


def stack_context(frames: np.ndarray, left: int, right: int) -> np.ndarray:
    """Concatenate frames t-left..t+right for every t, replicating edge frames.

    Accepts a ``FeatureMatrix`` or a raw T x D array.
    """
    if isinstance(frames, FeatureMatrix):
        frames = frames.frames
    frames = np.asarray(frames)
    if left < 0 or right < 0:
        raise InputError(f"context widths must be >= 0, got left={left}, right={right}")
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise InputError("expected a T x D matrix with T >= 1")
    idx = context_index(frames.shape[0], left, right)
    return frames[idx].reshape(frames.shape[0], -1)


def normalize_utterance(frames, floor: float = 1e-3) -> np.ndarray:
    """Per-band zero mean and unit variance over one utterance's frames.

    Bands whose standard deviation is below ``floor`` are divided by
    ``floor`` instead, so constant bands map to zero.
    """
    if isinstance(frames, FeatureMatrix):
        frames = frames.frames
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InputError("expected a T x D matrix with T >= 1")
    std = np.maximum(x.std(axis=0), floor)
    return ((x - x.mean(axis=0)) / std).astype(np.float32)


def context_index(t: int, left: int, right: int) -> np.ndarray:
    """(T, left+right+1) row indices into a T-frame matrix, clamped at the edges."""
    offsets = np.arange(-left, right + 1)
    return np.clip(np.arange(t)[:, None] + offsets[None, :], 0, t - 1)


def context_halfwidths(context: int) -> tuple[int, int]:
    if context < 1:
        raise ConfigError(f"context must be >= 1, got {context}")
    left = (context - 1) // 2
    return left, context - 1 - left
