"""Free-running synthesis: windowed decoding, mel stitching, vocoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .errors import InputError
from .model import LipToSpeechModel
from .training import window_lengths


@dataclass
class SynthesisConfig:
    window_seconds: float = 3.0
    overlap_seconds: float = 0.4
    griffin_lim_iters: int = 60
    crossfade: str = "linear"
    dropout_seed: int = 0  # fixed prenet-dropout draw for reproducible output

    def __post_init__(self):
        if not 0.0 <= self.overlap_seconds < self.window_seconds:
            raise InputError(
                f"need 0 <= overlap ({self.overlap_seconds}) < window ({self.window_seconds})"
            )
        if self.crossfade not in ("linear", "none"):
            raise InputError(f"unknown crossfade mode {self.crossfade!r}")


def synthesize_window(frames, model: LipToSpeechModel, fps: int,
                      window_seconds: float = 3.0, rng=None, dropout_seed: int = 0):
    """Decode one exact window free-running; returns (mel in [0, 1], alignment)."""
    frames = np.asarray(frames)
    fpw, mpw = window_lengths(window_seconds, fps)
    if frames.shape[0] != fpw:
        raise InputError(
            f"window expects {fpw} frames for {window_seconds}s at {fps} fps,"
            f" got {frames.shape[0]}"
        )
    r = model.cfg.reduction_factor
    if mpw % r != 0:
        raise InputError(f"mel window {mpw} not divisible by reduction factor {r}")
    if rng is None:
        rng = np.random.default_rng(dropout_seed)
    pred, alignment = model.synthesize_window_mel(frames[None], rng, mpw // r)
    return np.clip(pred[0], 0.0, 1.0), alignment[0]


def synthesize_long(frames, model: LipToSpeechModel, fps: int,
                    cfg: SynthesisConfig = None):
    """Sliding-window synthesis for input of any length.

    Windows advance by window - overlap; overlapping mel regions are linearly
    cross-faded; the stitched mel is inverted through the filterbank
    pseudo-inverse and Griffin-Lim. Returns (mel, waveform samples, alignments).
    """
    cfg = cfg or SynthesisConfig()
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise InputError(f"expected a (T, H, W, C) sequence, got shape {frames.shape}")
    t_orig = frames.shape[0]
    fpw, mpw = window_lengths(cfg.window_seconds, fps)
    stft_cfg = dsp.StftConfig()
    mel_total = round(t_orig * dsp.SAMPLE_RATE_HZ / (stft_cfg.hop_len * fps))
    if t_orig < fpw:  # right-pad with the last frame to one full window
        pad = np.repeat(frames[-1:], fpw - t_orig, axis=0)
        frames = np.concatenate([frames, pad])
    t = frames.shape[0]
    step = max(fpw - round(cfg.overlap_seconds * fps), 1)
    starts = list(range(0, t - fpw + 1, step))
    if starts[-1] != t - fpw:
        starts.append(t - fpw)

    out = np.zeros((max(mel_total, mpw), model.cfg.n_mels))
    covered = 0  # mel frames filled so far
    alignments = []
    for w, f0 in enumerate(starts):
        mel, alignment = synthesize_window(
            frames[f0 : f0 + fpw], model, fps, cfg.window_seconds,
            dropout_seed=cfg.dropout_seed + w,
        )
        alignments.append(alignment)
        m0 = round(f0 * dsp.SAMPLE_RATE_HZ / (stft_cfg.hop_len * fps))
        m0 = min(m0, out.shape[0] - mpw)
        overlap = covered - m0
        if overlap > 0 and cfg.crossfade == "linear":
            ramp = (np.arange(1, overlap + 1) / (overlap + 1))[:, None]
            out[m0 : m0 + overlap] = (1.0 - ramp) * out[m0 : m0 + overlap] + ramp * mel[:overlap]
            out[m0 + overlap : m0 + mpw] = mel[overlap:]
        else:
            out[m0 : m0 + mpw] = mel
        covered = m0 + mpw
    mel_out = out[:mel_total]
    linear = dsp.mel_to_linear(mel_out)
    wav, _ = dsp.griffin_lim(linear, stft_cfg, cfg.griffin_lim_iters, seed=cfg.dropout_seed)
    return mel_out, wav, alignments


def alignment_monotonicity(alignment) -> float:
    """Fraction of consecutive decoder steps whose argmax memory index does
    not decrease; 1.0 for fewer than two steps."""
    alignment = np.asarray(alignment)
    if alignment.ndim != 2:
        raise InputError(f"alignment must be 2-D, got shape {alignment.shape}")
    if alignment.shape[0] < 2:
        return 1.0
    peaks = np.argmax(alignment, axis=1)
    return float(np.mean(np.diff(peaks) >= 0))
