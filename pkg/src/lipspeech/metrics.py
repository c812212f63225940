"""Objective evaluation: STOI, ESTOI, and word error rate.

STOI follows the short-time objective intelligibility measure: both signals
are resampled to 10 kHz, silent frames are dropped by a 40 dB energy
threshold on the clean signal, magnitudes are grouped into 15 one-third
octave bands starting at 150 Hz, and clipped normalized correlations over
384 ms segments are averaged. ESTOI shares the front end but normalizes each
segment's band-time matrix by rows then columns and averages plain inner
products, without clipping.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

from .dsp import Waveform
from .errors import InputError

FS = 10000  # internal analysis rate fixed by the metric definition
FRAME_LEN = 256
FRAME_HOP = 128
FFT_LEN = 512
N_BANDS = 15
FIRST_CENTER_HZ = 150.0
SEG_LEN = 30  # frames per short-time segment (384 ms)
BETA_DB = -15.0  # signal-to-distortion clipping bound
DYN_RANGE_DB = 40.0
LENGTH_TOLERANCE = 0.05  # fractional sample-count mismatch accepted before trim


@dataclass
class IntelligibilityScore:
    value: float
    metric: str
    valid_frames: int


@dataclass
class Transcript:
    id: str
    tokens: tuple

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        if any(not t for t in self.tokens):
            raise InputError("transcript tokens must be non-empty strings")


def _analysis_window():
    return np.hanning(FRAME_LEN + 2)[1:-1]


def _frame(x):
    n = (len(x) - FRAME_LEN) // FRAME_HOP + 1
    if n < 1:
        return np.empty((0, FRAME_LEN))
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_HOP * np.arange(n)[:, None]
    return x[idx]


def _prepare(clean: Waveform, degraded: Waveform):
    if clean.sample_rate_hz != degraded.sample_rate_hz:
        raise InputError("clean and degraded sample rates differ")
    x = np.asarray(clean.samples, dtype=np.float64)
    y = np.asarray(degraded.samples, dtype=np.float64)
    longer = max(len(x), len(y))
    if longer == 0:
        raise InputError("empty signals")
    if abs(len(x) - len(y)) > LENGTH_TOLERANCE * longer:
        raise InputError(f"length mismatch beyond trim tolerance: {len(x)} vs {len(y)}")
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    fs = clean.sample_rate_hz
    if fs != FS:
        g = math.gcd(FS, fs)
        x = resample_poly(x, FS // g, fs // g)
        y = resample_poly(y, FS // g, fs // g)
    return x, y


def _remove_silent_frames(x, y):
    """Drop frames whose clean-signal energy is 40 dB under the loudest frame;
    both signals are rebuilt by overlap-adding the retained frames."""
    w = _analysis_window()
    xf = _frame(x) * w
    yf = _frame(y) * w
    if xf.shape[0] == 0:
        raise InputError("signal shorter than one analysis frame")
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-12)
    mask = energy > energy.max() - DYN_RANGE_DB
    xf, yf = xf[mask], yf[mask]
    n_kept = int(mask.sum())
    if n_kept == 0:
        raise InputError("no active speech frames: score undefined")
    length = (n_kept - 1) * FRAME_HOP + FRAME_LEN
    xs = np.zeros(length)
    ys = np.zeros(length)
    for i in range(n_kept):
        s = i * FRAME_HOP
        xs[s : s + FRAME_LEN] += xf[i]
        ys[s : s + FRAME_LEN] += yf[i]
    return xs, ys, n_kept


def _third_octave_matrix():
    centers = FIRST_CENTER_HZ * 2.0 ** (np.arange(N_BANDS) / 3.0)
    freqs = np.fft.rfftfreq(FFT_LEN, d=1.0 / FS)
    obm = np.zeros((N_BANDS, len(freqs)))
    for i, cf in enumerate(centers):
        lo, hi = cf / 2 ** (1.0 / 6.0), cf * 2 ** (1.0 / 6.0)
        obm[i, (freqs >= lo) & (freqs < hi)] = 1.0
    return obm


def _band_envelopes(x):
    spec = np.fft.rfft(_frame(x) * _analysis_window(), n=FFT_LEN, axis=1)
    return np.sqrt(_third_octave_matrix() @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _segments(x, y):
    xb = _band_envelopes(x)
    yb = _band_envelopes(y)
    n_frames = xb.shape[1]
    if n_frames < SEG_LEN:
        raise InputError(
            f"only {n_frames} active frames; need at least {SEG_LEN} for scoring"
        )
    for m in range(SEG_LEN, n_frames + 1):
        yield xb[:, m - SEG_LEN : m], yb[:, m - SEG_LEN : m]


def stoi(clean: Waveform, degraded: Waveform) -> IntelligibilityScore:
    """Clipped band-correlation intelligibility of degraded against clean."""
    x, y = _prepare(clean, degraded)
    xs, ys, n_kept = _remove_silent_frames(x, y)
    clip_gain = 10.0 ** (-BETA_DB / 20.0)
    scores = []
    for xm, ym in _segments(xs, ys):
        norm_x = np.linalg.norm(xm, axis=1, keepdims=True)
        norm_y = np.linalg.norm(ym, axis=1, keepdims=True)
        ym_scaled = ym * norm_x / (norm_y + 1e-12)
        ym_clipped = np.minimum(ym_scaled, xm * (1.0 + clip_gain))
        xc = xm - xm.mean(axis=1, keepdims=True)
        yc = ym_clipped - ym_clipped.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1)
        corr = (xc * yc).sum(axis=1) / np.where(denom > 0, denom, 1.0)
        scores.append(corr.mean())
    return IntelligibilityScore(float(np.mean(scores)), "STOI", n_kept)


def estoi(clean: Waveform, degraded: Waveform) -> IntelligibilityScore:
    """Spectral-correlation intelligibility with row+column normalization."""
    x, y = _prepare(clean, degraded)
    xs, ys, n_kept = _remove_silent_frames(x, y)
    scores = []
    for xm, ym in _segments(xs, ys):
        xn = _normalize_rows_then_cols(xm)
        yn = _normalize_rows_then_cols(ym)
        scores.append(float((xn * yn).sum() / SEG_LEN))
    return IntelligibilityScore(float(np.mean(scores)), "ESTOI", n_kept)


def _normalize_rows_then_cols(m):
    m = m - m.mean(axis=1, keepdims=True)
    m = m / (np.linalg.norm(m, axis=1, keepdims=True) + 1e-12)
    m = m - m.mean(axis=0, keepdims=True)
    return m / (np.linalg.norm(m, axis=0, keepdims=True) + 1e-12)


# ---------------------------------------------------------------------------
# Word error rate


def normalize_text(text: str):
    """Lower-case and strip punctuation; returns a token tuple."""
    cleaned = re.sub(r"[^\w\s']", " ", text.lower())
    return tuple(cleaned.split())


def edit_distance(ref, hyp) -> int:
    """Word-level Levenshtein distance with uniform costs."""
    ref, hyp = tuple(ref), tuple(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(reference, hypothesis) -> float:
    """(substitutions + deletions + insertions) / len(reference); may exceed 1."""
    ref = reference.tokens if isinstance(reference, Transcript) else tuple(reference)
    hyp = hypothesis.tokens if isinstance(hypothesis, Transcript) else tuple(hypothesis)
    if not ref:
        raise InputError("reference transcript must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------------------
# Transcript and report files


def load_transcripts(path) -> dict:
    """Read `id<TAB>text` UTF-8 lines into {id: Transcript}."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise InputError(f"{path}:{lineno}: expected id<TAB>text")
            eid, text = line.split("\t", 1)
            if eid in out:
                raise InputError(f"{path}:{lineno}: duplicate id {eid!r}")
            out[eid] = Transcript(eid, normalize_text(text))
    return out


def write_report(path, rows) -> None:
    """rows: iterable of (id, stoi, estoi, wer); wer may be None."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("id\tstoi\testoi\twer\n")
        for eid, s, e, w in rows:
            wtxt = "" if w is None else f"{w:.6f}"
            f.write(f"{eid}\t{s:.6f}\t{e:.6f}\t{wtxt}\n")
