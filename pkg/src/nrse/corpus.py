"""Data ingestion, the synthetic acoustic-mismatch task, and persistence.

File formats
------------
WAV
    RIFF/WAVE, PCM 16-bit little-endian, mono, 16 kHz.  Nothing else is
    accepted.
Manifest
    JSON lines.  Each line is an object with ``utterance_id`` and at least
    one of ``audio_path`` / ``feature_path``; optional ``label_path`` and
    ``condition``.  Relative paths are resolved against the manifest's
    directory.
Labels
    Plain text, one integer class index per feature frame.
Container (checkpoints and feature caches)
    ``b"ENTS"``, u32 version, u32 kind (1 checkpoint, 2 features), u32
    header length, a UTF-8 JSON header, then the raw little-endian bytes of
    every array listed in the header, in header order.  The header's
    ``arrays`` entry lists ``name``, ``dtype`` (``<f4`` or ``<i4``) and
    ``shape``; ``meta`` carries the network spec and training summary, or
    the utterance id and frame period.
"""

from __future__ import annotations

import json
import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal

from .atomic import atomic_write as _atomic_write
from .errors import ConfigError, FormatError, InputError
from .features import (SAMPLE_RATE, AudioBuffer, FeatureMatrix, GfbConfig, erb_bandwidth,
                       erb_rate_to_hz, hz_to_erb_rate, num_frames)
from .net import NetworkSpec, Parameters, check_parameters

MAGIC = b"ENTS"
VERSION = 1
KIND_CHECKPOINT = 1
KIND_FEATURES = 2
_PREFIX = struct.Struct("<4sIII")

# reverberant-to-direct energy ratio is (T60 / REFERENCE_T60)^2: 0 dB at
# 0.3 s, about -8.5 dB direct-to-reverberant at 0.8 s, near-anechoic below 30 ms
REFERENCE_T60 = 0.3
ENVELOPE_DECAY = 6.908  # ln(1000): -60 dB of amplitude^2 at t = T60


# ----------------------------------------------------------------------------
# WAV


def read_wav(path) -> AudioBuffer:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            comptype, n = w.getcomptype(), w.getnframes()
            if comptype != "NONE":
                raise FormatError(f"{path}: compression: expected NONE, got {comptype}")
            if channels != 1:
                raise FormatError(f"{path}: channels: expected 1, got {channels}")
            if width != 2:
                raise FormatError(f"{path}: sample width: expected 16-bit, got {8 * width}-bit")
            if rate != SAMPLE_RATE:
                raise FormatError(f"{path}: sample rate: expected {SAMPLE_RATE}, got {rate}")
            raw = w.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: not a RIFF/WAVE PCM file ({exc})") from exc
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    if n == 0:
        raise FormatError(f"{path}: no samples")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(path.stem, samples, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = to_pcm16(audio.samples)
    _atomic_write(path, lambda fh: _write_wav_fh(fh, pcm, audio.sample_rate))


def _write_wav_fh(fh, pcm, rate):
    with wave.open(fh, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


# ----------------------------------------------------------------------------
# labels and manifests


def write_labels(path, labels) -> None:
    text = "".join(f"{int(v)}\n" for v in labels).encode()
    _atomic_write(path, lambda fh: fh.write(text))


def read_labels(path) -> np.ndarray:
    path = Path(path)
    values = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            values.append(int(line))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: not an integer label: {line!r}") from None
    return np.asarray(values, dtype=np.int64)


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: Path | None = None
    feature_path: Path | None = None
    label_path: Path | None = None
    condition: str = ""

    def to_json(self, base: Path | None = None) -> dict:
        def rel(p):
            if p is None:
                return None
            return os.path.relpath(p, base) if base is not None else str(p)

        d = {"utterance_id": self.utterance_id}
        for key in ("audio_path", "feature_path", "label_path"):
            v = getattr(self, key)
            if v is not None:
                d[key] = rel(v)
        d["condition"] = self.condition
        return d


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.utterance_id for e in self.entries]


def load_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    entries, seen = [], {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise FormatError(f"{path}:{lineno}: expected a JSON object")
        uid = rec.get("utterance_id")
        if not isinstance(uid, str) or not uid:
            raise FormatError(f"{path}:{lineno}: missing field utterance_id")
        if uid in seen:
            raise FormatError(
                f"{path}:{lineno}: duplicate utterance_id {uid!r} (first on line {seen[uid]})"
            )
        seen[uid] = lineno
        if not rec.get("audio_path") and not rec.get("feature_path"):
            raise FormatError(f"{path}:{lineno}: entry needs audio_path or feature_path")
        paths = {}
        for key in ("audio_path", "feature_path", "label_path"):
            if rec.get(key):
                p = Path(rec[key])
                p = p if p.is_absolute() else base / p
                if not p.exists():
                    raise FormatError(f"{path}:{lineno}: {key} {rec[key]!r} does not exist")
                paths[key] = p
        entries.append(ManifestEntry(uid, condition=str(rec.get("condition", "")), **paths))
    return Manifest(entries)


def write_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    lines = "".join(
        json.dumps(e.to_json(path.parent.resolve()), sort_keys=True) + "\n" for e in manifest
    ).encode()
    _atomic_write(path, lambda fh: fh.write(lines))


# ----------------------------------------------------------------------------
# container


def _pack(kind: int, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    descr, payload = [], []
    for name, arr in arrays:
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            if arr.dtype != np.float32:
                raise InputError(f"array {name}: containers store 32-bit reals, got {arr.dtype}")
            dt = "<f4"
        elif arr.dtype.kind in "iu":
            dt = "<i4"
        else:
            raise InputError(f"array {name}: unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=dt)
        descr.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        payload.append(data.tobytes())
    header = json.dumps({"arrays": descr, "meta": meta}, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, kind, len(header)) + header + b"".join(payload)


def _unpack(path, expect_kind: int):
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, kind, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic: found {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version: found {version}, expected {VERSION}")
    if kind != expect_kind:
        raise FormatError(f"{path}: container kind: found {kind}, expected {expect_kind}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start: start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    pos = start + hlen
    arrays = {}
    for d in header["arrays"]:
        dt = np.dtype(d["dtype"])
        count = int(np.prod(d["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload in array {d['name']!r}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(d["shape"])
        arrays[d["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes after payload")
    return header["meta"], arrays


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: Parameters
    training: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    check_parameters(ckpt.spec, ckpt.params)
    arrays = [(f"p{i}", a) for i, a in enumerate(ckpt.params.arrays)]
    blob = _pack(KIND_CHECKPOINT, {"spec": ckpt.spec.to_dict(), "training": ckpt.training}, arrays)
    _atomic_write(path, lambda fh: fh.write(blob))


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = _unpack(path, KIND_CHECKPOINT)
    try:
        spec = NetworkSpec.from_dict(meta["spec"])
        params = Parameters([arrays[f"p{i}"] for i in range(len(arrays))])
        check_parameters(spec, params)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint ({exc})") from None
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return Checkpoint(spec, params, meta.get("training", {}))


def save_features(path, fm: FeatureMatrix, labels=None) -> None:
    arrays = [("frames", np.asarray(fm.frames, dtype=np.float32))]
    if labels is not None:
        arrays.append(("labels", np.asarray(labels, dtype=np.int32)))
    meta = {"utterance_id": fm.utterance_id, "frame_period": fm.frame_period}
    blob = _pack(KIND_FEATURES, meta, arrays)
    _atomic_write(path, lambda fh: fh.write(blob))


def load_features(path) -> tuple[FeatureMatrix, np.ndarray | None]:
    meta, arrays = _unpack(path, KIND_FEATURES)
    if "frames" not in arrays:
        raise FormatError(f"{path}: feature container without frames")
    fm = FeatureMatrix(meta["utterance_id"], arrays["frames"], meta.get("frame_period", 0.01))
    return fm, arrays.get("labels")


# ----------------------------------------------------------------------------
# corruption


def _signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def _noise(n: int, color: str, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    if color == "white":
        return white
    if color == "pink":
        spec = np.fft.rfft(white)
        f = np.arange(spec.size, dtype=np.float64)
        f[0] = 1.0
        return np.fft.irfft(spec / np.sqrt(f), n)
    raise ConfigError(f"noise color must be 'white' or 'pink', got {color!r}")


def add_noise(audio: AudioBuffer, snr_db: float, seed: int, color: str = "white") -> AudioBuffer:
    """Add gaussian noise scaled to exactly ``snr_db`` over the whole utterance."""
    if not np.isfinite(snr_db):
        raise InputError(f"snr_db must be finite, got {snr_db}")
    p_sig = _signal_power(audio.samples)
    if p_sig == 0.0:
        raise InputError(f"{audio.utterance_id}: cannot set an SNR on a zero-power signal")
    noise = _noise(audio.samples.size, color, np.random.default_rng(seed))
    noise *= np.sqrt(p_sig / (10.0 ** (snr_db / 10.0)) / _signal_power(noise))
    return AudioBuffer(audio.utterance_id, audio.samples + noise, audio.sample_rate)


def rir_length(t60: float, sample_rate: int = SAMPLE_RATE) -> int:
    return int(np.ceil(1.5 * t60 * sample_rate))


def rir_envelope(t: np.ndarray, t60: float) -> np.ndarray:
    return np.exp(-ENVELOPE_DECAY * np.asarray(t) / t60)


def synthetic_rir(t60: float, seed: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Direct path plus an exponentially decaying white-noise tail.

    The tail's energy relative to the unit direct path is
    ``(t60 / REFERENCE_T60) ** 2``, so very short T60 approaches the identity.
    """
    if not t60 > 0:
        raise InputError(f"t60 must be > 0, got {t60}")
    n = rir_length(t60, sample_rate)
    tail = np.random.default_rng(seed).standard_normal(n)
    tail *= rir_envelope(np.arange(n) / sample_rate, t60)
    tail[0] = 0.0
    energy = float(np.sum(tail ** 2))
    if energy > 0:
        tail *= (t60 / REFERENCE_T60) / np.sqrt(energy)
    tail[0] = 1.0
    return tail


def apply_reverb(audio: AudioBuffer, t60: float, seed: int) -> AudioBuffer:
    """Full convolution with :func:`synthetic_rir`; output has N + L - 1 samples."""
    h = synthetic_rir(t60, seed, audio.sample_rate)
    y = sp_signal.fftconvolve(audio.samples, h)
    return AudioBuffer(audio.utterance_id, y, audio.sample_rate)


def corrupt(audio: AudioBuffer, t60: float, snr_db: float, seed: int,
            color: str = "white") -> AudioBuffer:
    """Reverberate, truncate back to the input length, then add noise."""
    ss = np.random.SeedSequence([seed, 0xAC0])
    s_rir, s_noise = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    rev = apply_reverb(audio, t60, s_rir)
    rev = AudioBuffer(audio.utterance_id, rev.samples[: audio.samples.size], audio.sample_rate)
    return add_noise(rev, snr_db, s_noise, color)


# ----------------------------------------------------------------------------
# synthetic task

SPLITS = ("train", "cv", "eval_matched", "pool", "eval_mismatched")
MISMATCHED_SPLITS = ("pool", "eval_mismatched")
LEVEL_RMS = 0.05


@dataclass(frozen=True)
class SyntheticTaskConfig:
    num_classes: int = 8
    n_train: int = 100
    n_cv: int = 20
    n_eval_matched: int = 50
    n_pool: int = 200
    n_eval_mismatched: int = 50
    duration: tuple[float, float] = (2.0, 5.0)
    segment_frames: tuple[int, int] = (30, 100)
    snr_db: tuple[float, float] = (0.0, 15.0)
    t60: tuple[float, float] = (0.1, 0.8)
    noise_color: str = "white"
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for name in ("n_train", "n_cv", "n_eval_matched", "n_pool", "n_eval_mismatched"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_train < 1 or self.n_cv < 1:
            raise ConfigError("n_train and n_cv must be >= 1")
        for name in ("duration", "segment_frames", "snr_db", "t60"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} range is empty: ({lo}, {hi})")
        if self.duration[0] <= 0.03:
            raise ConfigError("duration must exceed one analysis window")
        if self.segment_frames[0] < 1:
            raise ConfigError("segment_frames must be >= 1")
        if self.t60[0] <= 0:
            raise ConfigError("t60 must be > 0")
        if self.noise_color not in ("white", "pink"):
            raise ConfigError("noise_color must be 'white' or 'pink'")

    def split_size(self, split: str) -> int:
        return getattr(self, "n_" + split)


@dataclass(frozen=True)
class ClassBank:
    """Two resonant bands per class: (center Hz, bandwidth Hz, gain) each."""

    bands: tuple[tuple[tuple[float, float, float], ...], ...]

    def sos(self, c: int) -> list[tuple[np.ndarray, float]]:
        out = []
        for fc, bw, gain in self.bands[c]:
            lo, hi = fc - bw / 2, min(fc + bw / 2, SAMPLE_RATE / 2 - 1)
            out.append((sp_signal.butter(2, [lo, hi], "bandpass", fs=SAMPLE_RATE, output="sos"), gain))
        return out


def make_class_bank(num_classes: int, seed: int) -> ClassBank:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA4D]))
    grid = erb_rate_to_hz(np.linspace(hz_to_erb_rate(200.0), hz_to_erb_rate(6000.0),
                                      3 * num_classes))
    centers = rng.choice(grid, size=2 * num_classes, replace=False)
    bands = []
    for c in range(num_classes):
        pair = []
        for fc in centers[2 * c: 2 * c + 2]:
            pair.append((float(fc), float(1.5 * erb_bandwidth(fc)), float(rng.uniform(0.5, 1.0))))
        bands.append(tuple(pair))
    return ClassBank(tuple(bands))


@dataclass
class SynthUtterance:
    audio: AudioBuffer
    labels: np.ndarray
    condition: str = "clean"
    t60: float | None = None
    snr_db: float | None = None

    @property
    def utterance_id(self) -> str:
        return self.audio.utterance_id


def _utterance_seed(seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SPLITS.index(split), index])


def synth_clean_utterance(uid: str, bank: ClassBank, cfg: SyntheticTaskConfig,
                          rng: np.random.Generator, gfb: GfbConfig = GfbConfig()
                          ) -> tuple[AudioBuffer, np.ndarray]:
    hop, win = gfb.hop_samples(), gfb.window_samples()
    n = int(round(rng.uniform(*cfg.duration) * SAMPLE_RATE))
    seg_classes, seg_bounds = [], [0]
    prev = -1
    while seg_bounds[-1] < n:
        c = int(rng.integers(cfg.num_classes - (prev >= 0)))
        if prev >= 0 and c >= prev:
            c += 1
        length = int(rng.integers(cfg.segment_frames[0], cfg.segment_frames[1] + 1)) * hop
        seg_classes.append(c)
        seg_bounds.append(seg_bounds[-1] + length)
        prev = c
    warm = 1024
    pieces = []
    for c, s, e in zip(seg_classes, seg_bounds[:-1], seg_bounds[1:]):
        length = min(e, n) - s
        white = rng.standard_normal(length + warm)
        x = np.zeros(length)
        for sos, gain in bank.sos(c):
            x += gain * sp_signal.sosfilt(sos, white)[warm:]
        x *= 10 ** (rng.uniform(-3.0, 3.0) / 20.0) / np.sqrt(np.mean(x ** 2))
        pieces.append(x)
    x = LEVEL_RMS * np.concatenate(pieces)
    t = num_frames(n, gfb)
    centers = np.arange(t) * hop + win // 2
    labels = np.asarray(seg_classes)[np.searchsorted(seg_bounds, centers, side="right") - 1]
    return AudioBuffer(uid, x), labels.astype(np.int64)


def quantize(audio: AudioBuffer) -> AudioBuffer:
    """Peak-limit to 0.99 and round to 16-bit PCM, as if written to a WAV file."""
    x = audio.samples
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x = x * (0.99 / peak)
    return AudioBuffer(audio.utterance_id, to_pcm16(x).astype(np.float64) / 32768.0)


def synth_split(cfg: SyntheticTaskConfig, split: str, bank: ClassBank | None = None
                ) -> list[SynthUtterance]:
    cfg.validate()
    bank = bank or make_class_bank(cfg.num_classes, cfg.seed)
    out = []
    for i in range(cfg.split_size(split)):
        rng = np.random.default_rng(_utterance_seed(cfg.seed, split, i))
        uid = f"{split}_{i:05d}"
        audio, labels = synth_clean_utterance(uid, bank, cfg, rng)
        if split in MISMATCHED_SPLITS:
            t60 = float(rng.uniform(*cfg.t60))
            snr = float(rng.uniform(*cfg.snr_db))
            audio = corrupt(audio, t60, snr, int(rng.integers(2 ** 31)), cfg.noise_color)
            utt = SynthUtterance(quantize(audio), labels, f"t60={t60:.3f},snr={snr:.2f}", t60, snr)
        else:
            utt = SynthUtterance(quantize(audio), labels)
        out.append(utt)
    return out


def synth_corpus(cfg: SyntheticTaskConfig) -> dict[str, list[SynthUtterance]]:
    """All five splits: clean train/cv/eval_matched and corrupted pool/eval_mismatched."""
    cfg.validate()
    bank = make_class_bank(cfg.num_classes, cfg.seed)
    return {split: synth_split(cfg, split, bank) for split in SPLITS}


def write_corpus(corpus: dict[str, list[SynthUtterance]], out_dir) -> dict[str, Path]:
    """Write WAVs, label files and one manifest per split; returns manifest paths."""
    out_dir = Path(out_dir)
    paths = {}
    for split, utts in corpus.items():
        entries = []
        for u in utts:
            wav = out_dir / "audio" / split / f"{u.utterance_id}.wav"
            lab = out_dir / "labels" / split / f"{u.utterance_id}.lab"
            write_wav(wav, u.audio)
            write_labels(lab, u.labels)
            entries.append(ManifestEntry(u.utterance_id, audio_path=wav, label_path=lab,
                                         condition=u.condition))
        paths[split] = out_dir / f"{split}.jsonl"
        write_manifest(paths[split], Manifest(entries))
    return paths

