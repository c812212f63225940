"""Dataset manifests, frame-sequence files, and the synthetic viseme corpus.

The synthetic corpus renders each "viseme" as a parametric mouth-aperture
ellipse in a fixed quadrant of a 48x48 frame, animated over its token
duration, and voices it as a distinct harmonic chord. Homophene pairs are
rendered identically but voiced by a chord chosen from the token one second
earlier, so resolving them requires visual context beyond the current token.

Manifest lines: id<TAB>frames_path<TAB>wav_path[<TAB>transcript].
FRM1 files: magic, u32-LE T, H, W, C, fps, then f32-LE payload in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .errors import InputError

FRM_MAGIC = b"FRM1"

MOUTH_CENTER = (36.0, 12.0)  # (row, col): lower-left quadrant of the 48x48 frame
MOUTH_QUADRANT = (1, 0)  # (row half, col half)
BACKGROUND = 0.12
APERTURE_WIDTHS = (4.0, 5.5, 7.0, 8.5)
APERTURE_HEIGHTS = (3.0, 7.0)
CHORD_BASE_HZ = 160.0
CHORD_HARMONIC_AMPS = (0.5, 0.25, 0.15)
PIXEL_NOISE_STD = 0.02


@dataclass
class ManifestEntry:
    id: str
    frames_path: str
    wav_path: str
    transcript: str = None


@dataclass
class Manifest:
    entries: list
    split: str = "train"

    def __len__(self):
        return len(self.entries)


@dataclass
class SyntheticSpec:
    n_visemes: int = 8
    tokens_per_sequence: int = 6
    token_duration_s: float = 0.5
    n_sequences: int = 240
    seed: int = 0
    homophene_pairs: tuple = ((6, 7),)
    fps: int = 24  # 0.5 s tokens must cover a whole number of frames
    frame_size: int = 48
    sample_rate_hz: int = dsp.SAMPLE_RATE_HZ
    split_ratios: tuple = (200 / 240, 20 / 240, 20 / 240)

    def __post_init__(self):
        if self.token_duration_s <= 0:
            raise InputError("token duration must be positive")
        if abs(self.fps * self.token_duration_s - self.frames_per_token) > 1e-9:
            raise InputError(
                f"token duration {self.token_duration_s}s is not a whole number"
                f" of frames at {self.fps} fps"
            )
        for a, b in self.homophene_pairs:
            if not (0 <= a < self.n_visemes and 0 <= b < self.n_visemes):
                raise InputError(f"homophene pair ({a}, {b}) references invalid visemes")

    @property
    def frames_per_token(self) -> int:
        return round(self.fps * self.token_duration_s)

    @property
    def samples_per_token(self) -> int:
        return round(self.sample_rate_hz * self.token_duration_s)


# ---------------------------------------------------------------------------
# FRM1 frame-sequence files


def save_frames(path, frames: np.ndarray, fps: int) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise InputError(f"frame sequence must be (T, H, W, C), got {frames.shape}")
    with open(path, "wb") as f:
        f.write(FRM_MAGIC)
        f.write(struct.pack("<5I", *frames.shape, fps))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_frames(path):
    """Returns (frames (T, H, W, C) float32 in [0, 1], fps)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FRM_MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected {FRM_MAGIC!r}")
        t, h, w, c, fps = struct.unpack("<5I", f.read(20))
        data = np.frombuffer(f.read(4 * t * h * w * c), dtype="<f4")
    if data.size != t * h * w * c:
        raise InputError(f"{path}: truncated payload")
    return data.reshape(t, h, w, c).copy(), fps


# ---------------------------------------------------------------------------
# Manifests


def load_manifest(path, split: str = "train", check_files: bool = True) -> Manifest:
    entries = []
    seen = set()
    base = Path(path).parent
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise InputError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
            eid, frames_path, wav_path = parts[:3]
            if eid in seen:
                raise InputError(f"{path}:{lineno}: duplicate id {eid!r}")
            seen.add(eid)
            frames_path = str(base / frames_path)
            wav_path = str(base / wav_path)
            if check_files:
                for p in (frames_path, wav_path):
                    if not Path(p).is_file():
                        raise InputError(f"{path}:{lineno}: missing file {p}")
            entries.append(
                ManifestEntry(eid, frames_path, wav_path, parts[3] if len(parts) == 4 else None)
            )
    return Manifest(entries, split)


def load_split_manifests(train_path, val_path, test_path, check_files=True) -> dict:
    """Load the three split manifests, enforcing id disjointness across them."""
    splits = {
        "train": load_manifest(train_path, "train", check_files),
        "val": load_manifest(val_path, "val", check_files),
        "test": load_manifest(test_path, "test", check_files),
    }
    seen = {}
    for split, manifest in splits.items():
        for e in manifest.entries:
            if e.id in seen:
                raise InputError(f"id {e.id!r} appears in both {seen[e.id]} and {split}")
            seen[e.id] = split
    return splits


def save_manifest(path, manifest: Manifest) -> None:
    base = Path(path).parent
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            rel_frames = _relativize(e.frames_path, base)
            rel_wav = _relativize(e.wav_path, base)
            line = f"{e.id}\t{rel_frames}\t{rel_wav}"
            if e.transcript is not None:
                line += f"\t{e.transcript}"
            f.write(line + "\n")


def _relativize(p, base):
    try:
        return str(Path(p).relative_to(base))
    except ValueError:
        return str(p)


def split_by_video(entries, ratios, seed: int):
    """Assign whole recordings to train/val/test by largest-remainder counts."""
    ratios = tuple(ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"split ratios must sum to 1, got {ratios}")
    n = len(entries)
    n_splits = sum(1 for r in ratios if r > 0)
    if n < n_splits:
        raise InputError(f"{n} videos cannot fill {n_splits} splits")
    exact = [n * r for r in ratios]
    counts = [int(x) for x in exact]
    remainder_order = sorted(range(len(ratios)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in remainder_order[: n - sum(counts)]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for split, count in zip(("train", "val", "test"), counts):
        idx = sorted(order[start : start + count])
        out.append(Manifest([entries[i] for i in idx], split))
        start += count
    return tuple(out)


# ---------------------------------------------------------------------------
# Synthetic corpus


def _render_id(viseme: int, spec: SyntheticSpec) -> int:
    """Visual class of a viseme: homophene pair members share pair[0]'s render."""
    for a, b in spec.homophene_pairs:
        if viseme in (a, b):
            return a
    return viseme


def render_token_frames(render_id: int, n_frames: int, frame_size: int = 48) -> np.ndarray:
    """Deterministic pre-noise frames for one token: an animated mouth ellipse."""
    rw = APERTURE_WIDTHS[render_id % len(APERTURE_WIDTHS)]
    rh_max = APERTURE_HEIGHTS[(render_id // len(APERTURE_WIDTHS)) % len(APERTURE_HEIGHTS)]
    rows = np.arange(frame_size)[:, None] - MOUTH_CENTER[0] * frame_size / 48.0
    cols = np.arange(frame_size)[None, :] - MOUTH_CENTER[1] * frame_size / 48.0
    frames = np.full((n_frames, frame_size, frame_size, 3), BACKGROUND, dtype=np.float32)
    for i in range(n_frames):
        frac = i / n_frames
        openness = 0.25 + 0.75 * np.sin(np.pi * frac) ** 2
        rh = max(rh_max * openness, 0.5)
        d = np.sqrt((rows / rh) ** 2 + (cols / rw) ** 2)
        mask = np.clip((1.2 - d) / 0.4, 0.0, 1.0)
        for ch, value in enumerate((0.65, 0.25, 0.25)):
            frames[i, :, :, ch] += mask * (value - BACKGROUND)
    return np.clip(frames, 0.0, 1.0)


def render_chord(chord_id: int, n_samples: int, sample_rate_hz: int = dsp.SAMPLE_RATE_HZ) -> np.ndarray:
    """Harmonic chord for one token, with raised-cosine edge fades; peak <= 0.9."""
    f0 = CHORD_BASE_HZ * 2.0 ** (chord_id / 6.0)
    t = np.arange(n_samples) / sample_rate_hz
    x = np.zeros(n_samples)
    for k, amp in enumerate(CHORD_HARMONIC_AMPS, start=1):
        x += amp * np.sin(2.0 * np.pi * k * f0 * t)
    fade = min(int(0.025 * sample_rate_hz), n_samples // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return x


def token_chords(visemes, spec: SyntheticSpec):
    """Voiced chord per token. Homophene tokens take pair[0]'s chord when the
    visual class of the token one second earlier is even, else pair[1]'s."""
    context_gap = max(1, round(1.0 / spec.token_duration_s))
    chords = []
    for i, v in enumerate(visemes):
        pair = next((p for p in spec.homophene_pairs if v in p), None)
        if pair is None:
            chords.append(int(v))
        elif i < context_gap:
            chords.append(int(pair[0]))
        else:
            ctx = _render_id(int(visemes[i - context_gap]), spec)
            chords.append(int(pair[0]) if ctx % 2 == 0 else int(pair[1]))
    return chords


def is_homophene(viseme: int, spec: SyntheticSpec) -> bool:
    return any(viseme in p for p in spec.homophene_pairs)


def render_sequence(visemes, spec: SyntheticSpec, noise_rng=None):
    """Render one token sequence to (frames (T, H, W, 3), waveform, chords)."""
    fpt, spt = spec.frames_per_token, spec.samples_per_token
    chords = token_chords(visemes, spec)
    frames = np.concatenate(
        [render_token_frames(_render_id(int(v), spec), fpt, spec.frame_size) for v in visemes]
    )
    wav = np.concatenate([render_chord(c, spt, spec.sample_rate_hz) for c in chords])
    if noise_rng is not None:
        frames = np.clip(
            frames + noise_rng.normal(0.0, PIXEL_NOISE_STD, frames.shape).astype(np.float32),
            0.0,
            1.0,
        ).astype(np.float32)
    return frames, wav, chords


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> dict:
    """Write FRM1 + wav + split manifests under out_dir; returns the manifests."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for s in range(spec.n_sequences):
        visemes = rng.integers(0, spec.n_visemes, size=spec.tokens_per_sequence)
        frames, wav, chords = render_sequence(visemes, spec, noise_rng=rng)
        eid = f"seq{s:04d}"
        frames_path = out_dir / f"{eid}.frm"
        wav_path = out_dir / f"{eid}.wav"
        save_frames(frames_path, frames, spec.fps)
        dsp.save_wav(wav_path, dsp.Waveform(wav, spec.sample_rate_hz))
        transcript = " ".join(f"v{c}" for c in chords)
        entries.append(ManifestEntry(eid, str(frames_path), str(wav_path), transcript))
    manifests = split_by_video(entries, spec.split_ratios, spec.seed)
    out = {}
    for manifest in manifests:
        save_manifest(out_dir / f"{manifest.split}.tsv", manifest)
        out[manifest.split] = manifest
    return out


def chord_mel_templates(spec: SyntheticSpec) -> np.ndarray:
    """(n_visemes, frames_per_token_mel, n_mels) reference mels, one per chord."""
    cfg = dsp.StftConfig()
    fb = dsp.build_mel_filterbank(cfg=cfg, sample_rate_hz=spec.sample_rate_hz)
    mels = [
        dsp.wav_to_mel(render_chord(c, spec.samples_per_token, spec.sample_rate_hz), cfg, fb)
        for c in range(spec.n_visemes)
    ]
    return np.stack(mels)


def decode_mel_tokens(mel: np.ndarray, templates: np.ndarray):
    """Nearest-template classification of consecutive token-length mel chunks."""
    chunk = templates.shape[1]
    n_tokens = mel.shape[0] // chunk
    out = []
    for i in range(n_tokens):
        piece = mel[i * chunk : (i + 1) * chunk]
        dists = np.linalg.norm(templates - piece[None], axis=(1, 2))
        out.append(int(np.argmin(dists)))
    return out
