"""Running-window activation entropy and the per-utterance NRSE score.

For every neuron of a tapped hidden layer, the activation series is cut into
windows of ``m`` frames (hop ``hop``); each window's values are histogrammed
into ``bins`` equal-width bins and the plug-in entropy of that histogram,
divided by ``ln(bins)``, is the window entropy.  A neuron's entropy is the
mean over its windows.  NRSE sorts the per-neuron entropies in descending
order and averages the top ``percentile`` fraction of them.

Lower NRSE means steadier activations, which is read as a more reliable
hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .features import FeatureMatrix
from .net import forward_with_taps, network_input

ACTIVATION_MODES = ("direct", "layer-softmax")


@dataclass(frozen=True)
class EntropyParams:
    window: int = 91
    hop: int = 20
    bins: int = 32
    percentile: float = 0.70
    layer_index: int = 3
    activation_mode: str = "direct"

    def validate(self) -> None:
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")
        if self.hop < 1:
            raise ConfigError(f"hop must be >= 1, got {self.hop}")
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if not 0 < self.percentile <= 1:
            raise ConfigError(f"percentile must be in (0, 1], got {self.percentile}")
        if self.layer_index < 1:
            raise ConfigError(f"layer_index must be >= 1, got {self.layer_index}")
        if self.activation_mode not in ACTIVATION_MODES:
            raise ConfigError(f"activation_mode must be one of {ACTIVATION_MODES}")


@dataclass(frozen=True)
class EntropyProfile:
    utterance_id: str
    layer_index: int
    per_neuron: np.ndarray  # (n_neurons, n_windows)

    def neuron_means(self) -> np.ndarray:
        return self.per_neuron.mean(axis=1)


@dataclass(frozen=True)
class NrseScore:
    utterance_id: str
    layer_index: int
    value: float


def window_positions(num_frames: int, window: int, hop: int) -> list[int]:
    """Window start frames; a series shorter than ``window`` gets one window."""
    if num_frames < 1:
        raise InputError("need at least one frame")
    if num_frames < window:
        return [0]
    return list(range(0, num_frames - window + 1, hop))


def _normalized_entropy(counts: np.ndarray, total: int, bins: int) -> np.ndarray:
    """Plug-in entropy / ln(bins) along the last axis of a count array."""
    q = counts / total
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(counts > 0, q * np.log(q), 0.0)
    h = -terms.sum(axis=-1) / math.log(bins)
    return np.clip(h, 0.0, 1.0) + 0.0  # no negative zero


def _bin_index(values: np.ndarray, lo, hi, bins: int) -> np.ndarray:
    span = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(span > 0, (values - lo) / np.where(span > 0, span, 1.0), 0.0)
    # the top edge belongs to the last bin
    return np.minimum((scaled * bins).astype(np.int64), bins - 1)


def _windowed_entropies(values: np.ndarray, window: int, hop: int, bins: int,
                        fixed_support: bool) -> np.ndarray:
    """values: (T, n) -> (n, n_windows) normalized entropies."""
    t, n = values.shape
    starts = window_positions(t, window, hop)
    length = min(window, t)
    out = np.empty((n, len(starts)))
    offsets = np.arange(n) * bins
    for wi, s in enumerate(starts):
        block = values[s: s + length]
        if fixed_support:
            idx = _bin_index(block, 0.0, 1.0, bins)
        else:
            idx = _bin_index(block, block.min(axis=0), block.max(axis=0), bins)
        counts = np.bincount((idx + offsets).ravel(), minlength=n * bins).reshape(n, bins)
        out[:, wi] = _normalized_entropy(counts, length, bins)
    return out


def window_entropy(series, window: int = 91, hop: int = 20, bins: int = 32) -> np.ndarray:
    """Normalized histogram entropy of each running window of a [0, 1] series."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InputError("series must be a non-empty 1-D sequence")
    bad = np.flatnonzero(~((x >= 0.0) & (x <= 1.0)))
    if bad.size:
        raise InputError(f"value {x[bad[0]]!r} at index {bad[0]} is outside [0, 1]")
    return _windowed_entropies(x[:, None], window, hop, bins, fixed_support=True)[0]


def _layer_softmax(values: np.ndarray) -> np.ndarray:
    z = values - values.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def utterance_entropy_profile(trace: np.ndarray, params: EntropyParams = EntropyParams(),
                              utterance_id: str = "", layer_index: int | None = None
                              ) -> EntropyProfile:
    """Per-neuron window entropies of a T x n activation trace."""
    params.validate()
    values = np.asarray(trace, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise InputError(f"{utterance_id}: activation trace must be a non-empty T x n matrix")
    if params.activation_mode == "direct":
        bad = ~((values >= 0.0) & (values <= 1.0))
        if bad.any():
            t, i = np.argwhere(bad)[0]
            raise InputError(f"{utterance_id}: activation {values[t, i]!r} at frame {t}, "
                             f"neuron {i} is outside [0, 1]")
        ent = _windowed_entropies(values, params.window, params.hop, params.bins, True)
    else:
        ent = _windowed_entropies(_layer_softmax(values), params.window, params.hop,
                                  params.bins, fixed_support=False)
    layer = params.layer_index if layer_index is None else layer_index
    return EntropyProfile(utterance_id, layer, ent)


def top_fraction_count(n: int, fraction: float) -> int:
    # round first: 0.7 * 10 is 7.000000000000001 in binary floating point
    return max(1, min(n, math.ceil(round(fraction * n, 9))))


def nrse(profile: EntropyProfile, percentile: float = 0.70) -> NrseScore:
    means = np.sort(profile.neuron_means())[::-1]
    k = top_fraction_count(means.size, percentile)
    value = float(np.clip(means[:k].mean(), 0.0, 1.0))
    return NrseScore(profile.utterance_id, profile.layer_index, value)


def score_utterance(spec, params, features, e: EntropyParams = EntropyParams(),
                    utterance_id: str = "") -> NrseScore:
    """Tap ``e.layer_index`` on one utterance and reduce it to its NRSE.

    ``features`` is either the raw T x D frames, which are prepared and
    stacked as the network expects, or an already stacked input matrix.
    """
    e.validate()
    if isinstance(features, FeatureMatrix):
        utterance_id = utterance_id or features.utterance_id
    x = network_input(spec, features)
    _, trace = forward_with_taps(spec, params, x, e.layer_index)
    profile = utterance_entropy_profile(trace, e, utterance_id)
    return nrse(profile, e.percentile)
