"""Time-frequency analysis and synthesis.

STFT / inverse STFT with windowed overlap-add, mel filterbank projection with
log compression onto [0, 1], the Griffin-Lim phase reconstruction loop, and
the WAV / MEL1 file formats.

Defaults follow the 16 kHz speech setup used throughout the package:
window 800, hop 200, 1024-point FFT, 80 mel bands between 55 and 7600 Hz.
Mel magnitudes are compressed as 20*log10(max(x, 1e-5)) and the [-100, 0] dB
range is mapped affinely onto [0, 1].
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError

SAMPLE_RATE_HZ = 16000
N_MELS = 80
FMIN_HZ = 55.0
FMAX_HZ = 7600.0
DB_FLOOR = -100.0
AMP_FLOOR = 1e-5  # 20*log10(1e-5) == -100 dB
GRIFFIN_LIM_ITERS = 60


@dataclass
class StftConfig:
    """Analysis parameters. Defaults satisfy COLA for Hann with hop = window/4."""

    window_len: int = 800
    hop_len: int = 200
    fft_len: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop_len <= self.window_len <= self.fft_len):
            raise InputError(
                f"need 0 < hop ({self.hop_len}) <= window ({self.window_len})"
                f" <= fft ({self.fft_len})"
            )
        if self.window not in ("hann", "rect"):
            raise InputError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a declared sample rate."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class MelFilterbank:
    """Triangular mel filters over the rfft bins of an StftConfig."""

    weights: np.ndarray  # (n_mels, n_bins), all entries >= 0
    fmin_hz: float
    fmax_hz: float
    sample_rate_hz: int
    center_freqs_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _window_values(cfg: StftConfig) -> np.ndarray:
    n = cfg.window_len
    if cfg.window == "rect":
        return np.ones(n)
    # periodic Hann, needed for exact COLA at hop = window/4
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _num_frames(n_samples: int, cfg: StftConfig) -> int:
    return -(-n_samples // cfg.hop_len)  # ceil


def _frame(x: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Slice x into n_frames windows of window_len starting every hop_len."""
    needed = (n_frames - 1) * cfg.hop_len + cfg.window_len
    if len(x) < needed:
        raise InputError(f"signal of {len(x)} samples too short for {n_frames} frames")
    return sliding_window_view(x, cfg.window_len)[:: cfg.hop_len][:n_frames]


def _analyze_exact(x: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    frames = _frame(x, cfg, n_frames) * _window_values(cfg)
    return np.fft.rfft(frames, n=cfg.fft_len, axis=1)


def stft(samples: np.ndarray, cfg: StftConfig = None) -> np.ndarray:
    """Complex spectrogram, frame t covering samples [t*hop, t*hop + window).

    The tail is reflection-padded so that n_frames = ceil(len/hop).
    """
    cfg = cfg or StftConfig()
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InputError("stft input must be a non-empty 1-D signal")
    n_frames = _num_frames(len(x), cfg)
    needed = (n_frames - 1) * cfg.hop_len + cfg.window_len
    pad = needed - len(x)
    if pad > 0:
        mode = "reflect" if len(x) > 1 else "edge"
        x = np.pad(x, (0, pad), mode=mode)
    return _analyze_exact(x, cfg, n_frames)


def _overlap_add(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Least-squares synthesis: windowed overlap-add with window-squared norm."""
    n_frames = spec.shape[0]
    win = _window_values(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_len, axis=1)[:, : cfg.window_len] * win
    length = (n_frames - 1) * cfg.hop_len + cfg.window_len
    num = np.zeros(length)
    den = np.zeros(length)
    wsq = win * win
    for t in range(n_frames):
        start = t * cfg.hop_len
        num[start : start + cfg.window_len] += frames[t]
        den[start : start + cfg.window_len] += wsq
    return np.where(den > 1e-10, num / np.where(den > 1e-10, den, 1.0), 0.0)


def istft(spec: np.ndarray, cfg: StftConfig = None) -> np.ndarray:
    """Invert stft(); returns n_frames*hop samples (exact on interior under COLA)."""
    cfg = cfg or StftConfig()
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise InputError(
            f"spectrogram shape {spec.shape} inconsistent with {cfg.n_bins} bins"
        )
    n_frames = spec.shape[0]
    return _overlap_add(spec, cfg)[: n_frames * cfg.hop_len]


def build_mel_filterbank(
    n_mels: int = N_MELS,
    fmin_hz: float = FMIN_HZ,
    fmax_hz: float = FMAX_HZ,
    cfg: StftConfig = None,
    sample_rate_hz: int = SAMPLE_RATE_HZ,
) -> MelFilterbank:
    """Triangular filters with centers uniformly spaced on the mel scale."""
    cfg = cfg or StftConfig()
    if not (0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2):
        raise InputError(
            f"need 0 <= fmin ({fmin_hz}) < fmax ({fmax_hz}) <= nyquist"
            f" ({sample_rate_hz / 2})"
        )
    if n_mels < 1:
        raise InputError(f"n_mels must be >= 1, got {n_mels}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    bin_freqs = np.fft.rfftfreq(cfg.fft_len, d=1.0 / sample_rate_hz)
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_freqs[None, :] - lower[:, None]) / np.maximum(center - lower, 1e-12)[:, None]
    down = (upper[:, None] - bin_freqs[None, :]) / np.maximum(upper - center, 1e-12)[:, None]
    weights = np.maximum(0.0, np.minimum(up, down))
    if np.any(weights.max(axis=1) <= 0.0):
        raise InputError(
            f"{n_mels} mel bands exceed the fft resolution: some filters are empty"
        )
    return MelFilterbank(weights, fmin_hz, fmax_hz, sample_rate_hz, center)


def _magnitude_scale(cfg: StftConfig) -> float:
    # unit DC gain: a full-scale constant maps to ~0 dB instead of clipping
    return float(_window_values(cfg).sum())


def wav_to_mel(
    samples: np.ndarray, cfg: StftConfig = None, fb: MelFilterbank = None
) -> np.ndarray:
    """(n_frames, n_mels) log-mel matrix, dB-compressed and normalized to [0, 1]."""
    cfg = cfg or StftConfig()
    fb = fb or build_mel_filterbank(cfg=cfg)
    mag = np.abs(stft(samples, cfg)) / _magnitude_scale(cfg)
    mel = mag @ fb.weights.T
    db = 20.0 * np.log10(np.maximum(mel, AMP_FLOOR))
    return np.clip((db - DB_FLOOR) / -DB_FLOOR, 0.0, 1.0)


def mel_to_linear(
    mel_frames: np.ndarray, fb: MelFilterbank = None, cfg: StftConfig = None
) -> np.ndarray:
    """Invert the mel projection: de-normalize, de-compress, pseudo-inverse, clamp.

    Output is in raw |stft| units, ready for griffin_lim.
    """
    fb = fb or build_mel_filterbank()
    cfg = cfg or StftConfig()
    mel_frames = np.asarray(mel_frames, dtype=np.float64)
    if mel_frames.ndim != 2 or mel_frames.shape[1] != fb.n_mels:
        raise InputError(
            f"mel shape {mel_frames.shape} inconsistent with {fb.n_mels} bands"
        )
    db = mel_frames * -DB_FLOOR + DB_FLOOR
    amp = 10.0 ** (db / 20.0)
    linear = np.maximum(0.0, amp @ np.linalg.pinv(fb.weights).T)
    return linear * _magnitude_scale(cfg)


def griffin_lim(
    mag: np.ndarray,
    cfg: StftConfig = None,
    n_iters: int = GRIFFIN_LIM_ITERS,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Alternating-projection phase reconstruction from a magnitude spectrogram.

    Returns (waveform, trace) where trace[k] is the relative consistency error
    ||mag - |stft(x_k)||_F / ||mag||_F after iteration k; the trace is
    non-increasing.
    """
    cfg = cfg or StftConfig()
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[1] != cfg.n_bins:
        raise InputError(f"magnitude shape {mag.shape} inconsistent with config")
    if np.any(mag < 0):
        raise InputError("griffin_lim requires non-negative magnitudes")
    if n_iters < 1:
        raise InputError(f"n_iters must be >= 1, got {n_iters}")
    n_frames = mag.shape[0]
    mag_norm = np.linalg.norm(mag)
    if mag_norm == 0.0:
        return np.zeros(n_frames * cfg.hop_len), np.zeros(n_iters)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    trace = np.empty(n_iters)
    x = None
    for k in range(n_iters):
        x = _overlap_add(mag * phase, cfg)
        spec = _analyze_exact(x, cfg, n_frames)
        trace[k] = np.linalg.norm(mag - np.abs(spec)) / mag_norm
        phase = np.exp(1j * np.angle(spec))
    return x[: n_frames * cfg.hop_len], trace


# ---------------------------------------------------------------------------
# File formats

MEL_MAGIC = b"MEL1"


def save_mel(path, frames: np.ndarray) -> None:
    """Write a mel matrix as MEL1: magic, u32 n_frames, u32 n_mels, f32-LE rows."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise InputError(f"mel matrix must be 2-D, got shape {frames.shape}")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_mel(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MEL_MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected {MEL_MAGIC!r}")
        n_frames, n_mels = struct.unpack("<II", f.read(8))
        payload = f.read(4 * n_frames * n_mels)
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != n_frames * n_mels:
        raise InputError(f"{path}: truncated payload")
    return data.reshape(n_frames, n_mels).astype(np.float64)


def load_wav(path) -> Waveform:
    """Read a RIFF PCM wav file: 16-bit signed LE, mono; anything else rejected."""
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            sampwidth = w.getsampwidth()
            comptype = w.getcomptype()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a readable RIFF wav file ({exc})") from exc
    if comptype != "NONE":
        raise InputError(f"{path}: compressed wav ({comptype}) not supported")
    if sampwidth != 2:
        raise InputError(f"{path}: need 16-bit PCM, got {8 * sampwidth}-bit")
    if n_channels != 1:
        raise InputError(f"{path}: need mono, got {n_channels} channels")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def save_wav(path, wav: Waveform) -> None:
    """Write mono 16-bit PCM; samples are clipped to [-1, 1] first."""
    x = np.clip(wav.samples, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wav.sample_rate_hz)
        w.writeframes(pcm.tobytes())
