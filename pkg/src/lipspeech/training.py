"""Window sampling, teacher-forcing decay, and the optimization loop."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, nn
from .errors import InputError
from .model import LipToSpeechModel, save_checkpoint

VALIDATION_RNG_SALT = 0x5EED


@dataclass
class TrainConfig:
    window_seconds: float = 3.0
    batch_size: int = 32
    lr: float = 1e-3
    # teacher forcing: hold at 1.0, then decay linearly to the floor.
    # Scaled-down analogue of the full-size schedule (hold ~30K iterations).
    tf_hold_iters: int = 300
    tf_decay_iters: int = 700
    tf_floor: float = 0.2
    max_iters: int = 2000
    validate_every: int = 100
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise InputError("window_seconds must be positive")
        if not 0.0 <= self.tf_floor <= 1.0:
            raise InputError("tf_floor must be in [0, 1]")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


@dataclass
class TrainResult:
    best_checkpoint: str
    best_val_loss: float
    metrics_log: str
    iterations_run: int
    aborted: bool = False


@dataclass
class LoadedExample:
    id: str
    frames: np.ndarray  # (T, H, W, C) float32
    fps: int
    mel: np.ndarray  # (M, n_mels) float32


def load_examples(manifest, stft_cfg=None, fb=None):
    """Read frames and wavs for every manifest entry; mels computed up front."""
    stft_cfg = stft_cfg or dsp.StftConfig()
    fb = fb or dsp.build_mel_filterbank(cfg=stft_cfg)
    out = []
    for e in manifest.entries:
        frames, fps = load_frames_checked(e.frames_path)
        wav = dsp.load_wav(e.wav_path)
        mel = dsp.wav_to_mel(wav.samples, stft_cfg, fb).astype(np.float32)
        out.append(LoadedExample(e.id, frames, fps, mel))
    return out


def load_frames_checked(path):
    from .data import load_frames

    frames, fps = load_frames(path)
    if fps <= 0:
        raise InputError(f"{path}: non-positive fps {fps}")
    return frames, fps


def window_lengths(window_seconds, fps, stft_cfg=None, sample_rate_hz=dsp.SAMPLE_RATE_HZ):
    """(frames per window, mel frames per window) for a wall-clock window."""
    stft_cfg = stft_cfg or dsp.StftConfig()
    n_frames = round(window_seconds * fps)
    n_mel = round(window_seconds * sample_rate_hz / stft_cfg.hop_len)
    return n_frames, n_mel


def sample_window(example: LoadedExample, window_seconds, rng,
                  stft_cfg=None, sample_rate_hz=dsp.SAMPLE_RATE_HZ, t0=None):
    """Aligned (frame slice, mel slice) covering the same wall-clock interval."""
    stft_cfg = stft_cfg or dsp.StftConfig()
    fpw, mpw = window_lengths(window_seconds, example.fps, stft_cfg, sample_rate_hz)
    total = example.frames.shape[0]
    if total < fpw:
        raise InputError(
            f"example {example.id}: {total} frames shorter than window ({fpw})"
        )
    if t0 is None:
        t0 = int(rng.integers(0, total - fpw + 1))
    mel_start = round(t0 * sample_rate_hz / (stft_cfg.hop_len * example.fps))
    mel_start = min(mel_start, max(example.mel.shape[0] - mpw, 0))
    mel = example.mel[mel_start : mel_start + mpw]
    if mel.shape[0] < mpw:
        raise InputError(f"example {example.id}: mel too short for window")
    return example.frames[t0 : t0 + fpw], mel


def teacher_forcing_prob(iteration: int, cfg: TrainConfig) -> float:
    """1.0 during the hold phase, linear decay to tf_floor, then constant."""
    if iteration < 0:
        raise InputError("iteration must be >= 0")
    if iteration < cfg.tf_hold_iters:
        return 1.0
    if cfg.tf_decay_iters <= 0:
        return cfg.tf_floor
    frac = (iteration - cfg.tf_hold_iters) / cfg.tf_decay_iters
    if frac >= 1.0:
        return cfg.tf_floor
    return 1.0 + frac * (cfg.tf_floor - 1.0)


def _assemble_batch(examples, indices, cfg, rng):
    frames, mels = [], []
    for i in indices:
        f, m = sample_window(examples[i], cfg.window_seconds, rng)
        frames.append(f)
        mels.append(m)
    return np.stack(frames), np.stack(mels)


def validation_loss(model: LipToSpeechModel, examples, cfg: TrainConfig) -> float:
    """Teacher-forced L1 on fixed (t0=0) windows; fresh fixed-seed rng so the
    prenet dropout draw is identical on every evaluation."""
    rng = np.random.default_rng(cfg.seed ^ VALIDATION_RNG_SALT)
    losses = []
    bs = max(cfg.batch_size, 1)
    windows = [sample_window(e, cfg.window_seconds, rng=None, t0=0) for e in examples]
    for start in range(0, len(windows), bs):
        chunk = windows[start : start + bs]
        frames = np.stack([c[0] for c in chunk])
        mels = np.stack([c[1] for c in chunk])
        _, _, loss = model.forward_teacher_forced(frames, mels, 1.0, rng, train=False)
        losses.append(loss * len(chunk))
    return float(sum(losses) / len(windows))


def train(model: LipToSpeechModel, train_examples, val_examples,
          cfg: TrainConfig, out_dir) -> TrainResult:
    """Run batched teacher-forced training with Adam; keeps the checkpoint with
    the best validation loss. Fully deterministic given cfg.seed."""
    if not train_examples or not val_examples:
        raise InputError("train and validation sets must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "best.ckpt"
    log_path = out_dir / "metrics.log"
    extra = {
        "window_seconds": cfg.window_seconds,
        "fps": int(train_examples[0].fps),
    }
    rng = np.random.default_rng(cfg.seed)
    adam = nn.AdamState(lr=cfg.lr)
    params = model.params()
    best_val = math.inf
    aborted = False
    it = 0
    with open(log_path, "w") as log:
        for it in range(cfg.max_iters):
            tf = teacher_forcing_prob(it, cfg)
            indices = rng.integers(0, len(train_examples), size=cfg.batch_size)
            frames, mels = _assemble_batch(train_examples, indices, cfg, rng)
            model.zero_grad()
            pred, _, loss, caches = model.forward_teacher_forced(
                frames, mels, tf, rng, train=True, want_caches=True
            )
            if not math.isfinite(loss):
                log.write(f"{it}\ttrain\tnan\t{tf:.4f}\n")
                aborted = True
                break
            model.backward(pred, caches)
            grads = model.grads()
            nn.clip_grad_norm(grads, cfg.grad_clip)
            nn.adam_step(params, grads, adam)
            log.write(f"{it}\ttrain\t{loss:.6f}\t{tf:.4f}\n")
            if (it + 1) % cfg.validate_every == 0 or it + 1 == cfg.max_iters:
                val = validation_loss(model, val_examples, cfg)
                log.write(f"{it}\tval\t{val:.6f}\t{tf:.4f}\n")
                log.flush()
                if val < best_val:
                    best_val = val
                    save_checkpoint(model, ckpt_path, extra)
    if not ckpt_path.exists():
        # aborted before any validation: retain the last finite-loss weights
        save_checkpoint(model, ckpt_path, extra)
    return TrainResult(str(ckpt_path), best_val, str(log_path), it + 1, aborted)
