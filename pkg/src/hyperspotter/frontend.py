"""Audio ingestion, 80-channel log-mel features and SNR-controlled noise mixing."""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SAMPLE_RATE = 16000
WIN = 400  # 25 ms
HOP = 160  # 10 ms
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10
TRAIN_SNR_RANGE = (5.0, 15.0)


class AudioFormatError(ValueError):
    """WAV file does not match the accepted PCM16 / mono / 16 kHz format."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x 80
    hop_ms: float = 10.0
    win_ms: float = 25.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def load_wav(path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            comp = w.getcomptype()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got channels={channels}")
    if width != 2 or comp != "NONE":
        raise AudioFormatError(f"{path}: expected PCM16 encoding, got sample width={width} bytes")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected sample_rate={SAMPLE_RATE}, got {rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def n_frames(n_samples: int) -> int:
    if n_samples < WIN:
        raise ValueError(f"clip too short: {n_samples} samples, need at least {WIN}")
    return 1 + (n_samples - WIN) // HOP


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_band_edges(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """``n_mels + 2`` band edges in Hz; filter ``i`` peaks at ``edges[i + 1]``."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Area-normalised triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    edges = mel_band_edges(n_mels, 0.0, sr / 2)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    n = np.arange(WIN)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / WIN)


def log_mel(clip: AudioClip) -> MelSpectrogram:
    x = np.asarray(clip.samples, dtype=np.float64)
    T = n_frames(len(x))
    idx = np.arange(T)[:, None] * HOP + np.arange(WIN)[None, :]
    frames = x[idx] * _hann()
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    mel = mag @ mel_filterbank().T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)))


def export_mel_csv(mel: MelSpectrogram, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mel.frames:
            writer.writerow([f"{v:.6g}" for v in row])


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def _fit_length(noise: np.ndarray, n: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    if len(noise) < n:
        noise = np.tile(noise, int(np.ceil(n / len(noise))))
    if len(noise) == n:
        return noise
    start = 0 if rng is None else int(rng.integers(0, len(noise) - n + 1))
    return noise[start:start + n]


def scaled_noise(clean: AudioClip, noise: AudioClip, snr_db: float,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Noise cropped/tiled to the clean length and scaled to hit ``snr_db``."""
    n = _fit_length(np.asarray(noise.samples, dtype=np.float64), len(clean.samples), rng)
    return noise_scale(clean.samples, n, snr_db) * n


def noise_scale(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Gain applied to ``noise`` so that clean/noise power ratio is ``snr_db``."""
    p_clean, p_noise = _power(clean), _power(noise)
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power")
    if p_noise == 0.0:
        raise ValueError("noise signal has zero power")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_noise(clean: AudioClip, noise: AudioClip, snr_db: float,
              rng: Optional[np.random.Generator] = None) -> AudioClip:
    """Add noise at the requested SNR; ``snr_db=inf`` returns the clean clip."""
    if np.isinf(snr_db) and snr_db > 0:
        return AudioClip(np.array(clean.samples, dtype=np.float64), clean.sample_rate)
    out = np.asarray(clean.samples, dtype=np.float64) + scaled_noise(clean, noise, snr_db, rng)
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    return AudioClip(out, clean.sample_rate)


def measure_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10.0 * np.log10(_power(clean) / _power(noisy - clean))


def sample_train_snr(rng: np.random.Generator) -> float:
    return float(rng.uniform(*TRAIN_SNR_RANGE))


def gen_noise(kind: str, duration: float, seed: int = 0,
              speech: Optional[Sequence[AudioClip]] = None, n_talkers: int = 8) -> AudioClip:
    """White Gaussian noise, or a pub-like babble surrogate.

    Babble sums ``n_talkers`` randomly shifted, attenuated copies of the given
    speech clips. Without clips, synthetic tone-word speech stands in.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * SAMPLE_RATE))
    if kind == "white":
        return AudioClip(0.1 * rng.standard_normal(n))
    if kind not in ("pub", "pub-like"):
        raise ValueError(f"unknown noise kind {kind!r}")
    if not speech:
        from .dataset import synth_babble_sources

        speech = synth_babble_sources(seed, n_sources=n_talkers)
    out = np.zeros(n)
    for i in range(n_talkers):
        src = np.asarray(speech[i % len(speech)].samples, dtype=np.float64)
        src = np.tile(src, int(np.ceil(2 * n / max(len(src), 1))) + 1)
        shift = int(rng.integers(0, len(src) - n + 1))
        gain = 10.0 ** (-rng.uniform(0.0, 12.0) / 20.0)
        out += gain * src[shift:shift + n]
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return AudioClip(out)


def load_noise(spec: str, duration: float, seed: int = 0) -> AudioClip:
    """``white`` / ``pub`` or a path to a noise WAV (e.g. a MUSAN file)."""
    if spec in ("white", "pub", "pub-like"):
        return gen_noise(spec, duration, seed)
    return load_wav(Path(spec))
