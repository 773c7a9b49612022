"""Log-mel featurisation and context windowing of mono audio clips."""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
FRAME_MS = 64.0
HOP_FRACTION = 0.5
N_MELS = 128
CONTEXT = 64
SHIFT = 8
POWER_FLOOR = 1e-10


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clip_id: str = ""
    labels: dict[str, str] = field(default_factory=dict)
    domain: str = "source"
    condition: str = "normal"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"{self.clip_id}: expected mono samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError(f"{self.clip_id}: non-finite samples")


@dataclass
class LogMelWindow:
    matrix: np.ndarray
    clip_id: str
    window_index: int


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Centre frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_fft_bins: int, n_mels: int, sample_rate: int) -> np.ndarray:
    """Unit-peak triangular filters equally spaced on the HTK mel scale.

    ``n_fft_bins`` counts the one-sided FFT bins (``n_fft // 2 + 1``), which
    are assumed to span 0 Hz to Nyquist.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_fft_bins < n_mels:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_fft_bins} available FFT bins")
    bin_hz = np.linspace(0.0, sample_rate / 2.0, n_fft_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (centre - lower)
    falling = (upper - bin_hz[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{empty.size} of {n_mels} mel filters cover no FFT bin; "
            f"too many filters for {n_fft_bins} bins"
        )
    return fb


def frame_length(frame_ms: float, sample_rate: int) -> int:
    return int(round(frame_ms * 1e-3 * sample_rate))


def stft_power(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centred (reflect-padded) Hann-window power spectrogram, frames x bins."""
    samples = np.asarray(samples, dtype=np.float64)
    pad = n_fft // 2
    if samples.size <= pad:
        raise ValueError(
            f"clip of {samples.size} samples is too short for a {n_fft}-sample frame"
        )
    padded = np.pad(samples, pad, mode="reflect")
    n_frames = 1 + (padded.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    # periodic Hann, the usual STFT window
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    spec = np.fft.rfft(frames * window, axis=1)
    return spec.real ** 2 + spec.imag ** 2


_FB_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _cached_filterbank(n_bins, n_mels, sample_rate):
    key = (n_bins, n_mels, sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(n_bins, n_mels, sample_rate)
    return _FB_CACHE[key]


def stft_logmel(
    clip: AudioClip | np.ndarray,
    frame_ms: float = FRAME_MS,
    hop_fraction: float = HOP_FRACTION,
    n_mels: int = N_MELS,
    sample_rate: int | None = None,
) -> np.ndarray:
    """Natural-log mel power spectrogram (frames x n_mels).

    Mel power is floored at 1e-10 before the log.
    """
    if isinstance(clip, AudioClip):
        samples, sr = clip.samples, clip.sample_rate
    else:
        samples, sr = np.asarray(clip, dtype=np.float64), sample_rate or SAMPLE_RATE
    if samples.size == 0:
        raise ValueError("empty clip")
    n_fft = frame_length(frame_ms, sr)
    if n_fft < 2:
        raise ValueError(f"frame of {frame_ms} ms at {sr} Hz is shorter than 2 samples")
    if not 0.0 < hop_fraction <= 1.0:
        raise ValueError("hop_fraction must lie in (0, 1]")
    hop = max(1, int(round(n_fft * hop_fraction)))
    power = stft_power(samples, n_fft, hop)
    fb = _cached_filterbank(power.shape[1], n_mels, sr)
    return np.log(np.maximum(power @ fb.T, POWER_FLOOR))


def window_count(n_frames: int, context: int = CONTEXT, shift: int = SHIFT) -> int:
    if shift < 1:
        raise ValueError("shift must be >= 1")
    if context > n_frames:
        raise ValueError(f"context {context} exceeds {n_frames} frames")
    return (n_frames - context) // shift + 1


def window_array(logmel: np.ndarray, context: int = CONTEXT, shift: int = SHIFT) -> np.ndarray:
    """Context windows stacked as (n_windows, context, n_mels), in temporal order."""
    n = window_count(logmel.shape[0], context, shift)
    view = np.lib.stride_tricks.sliding_window_view(logmel, context, axis=0)[::shift][:n]
    # sliding_window_view puts the window axis last: (n, mels, context)
    return np.ascontiguousarray(view.transpose(0, 2, 1))


def window_samples(
    logmel: np.ndarray, context: int = CONTEXT, shift: int = SHIFT, clip_id: str = ""
) -> list[LogMelWindow]:
    return [
        LogMelWindow(matrix=m, clip_id=clip_id, window_index=i)
        for i, m in enumerate(window_array(logmel, context, shift))
    ]


def featurize(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Default pipeline: waveform -> (32, 64, 128) windows for a 10 s clip."""
    return window_array(stft_logmel(samples, sample_rate=sample_rate))


# ---------------------------------------------------------------------------
# WAV IO (PCM16 mono only)
# ---------------------------------------------------------------------------

def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV as float64 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV not supported")
            if w.getnchannels() != 1:
                raise AudioFormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return data, sr


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples (clipped to [-1, 1]) as 16-bit PCM mono."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
