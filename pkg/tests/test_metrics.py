"""Tests for STOI/ESTOI and word error rate."""

import numpy as np
import pytest

from lipspeech import metrics
from lipspeech.dsp import Waveform
from lipspeech.errors import InputError


def speechlike(seconds=1.2, seed=0, sr=16000):
    """Amplitude-modulated multi-tone burst, loud enough to defeat the VAD."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * sr)) / sr
    x = np.zeros_like(t)
    for f in (220.0, 450.0, 900.0, 1800.0, 3600.0):
        x += rng.uniform(0.1, 0.3) * np.sin(2 * np.pi * f * t + rng.uniform(0, 6))
    env = 0.6 + 0.4 * np.sin(2 * np.pi * 3.0 * t)
    return Waveform(0.5 * x * env / np.abs(x).max(), sr)


def edit_distance_with_backtrace(ref, hyp):
    """Independent DP oracle: full matrix + explicit backtrace count."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=int)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
                d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
            )
    # backtrace and recount, guarding against inconsistent matrices
    i, j, ops = n, m, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops += 1
            i -= 1
        else:
            ops += 1
            j -= 1
    assert ops == d[n, m]
    return int(d[n, m])


# ---------------------------------------------------------------------------
# STOI / ESTOI
# ---------------------------------------------------------------------------


class TestIntelligibility:
    def test_identity_is_one(self):
        x = speechlike()
        assert metrics.stoi(x, x).value == pytest.approx(1.0, abs=1e-6)
        assert metrics.estoi(x, x).value == pytest.approx(1.0, abs=1e-6)

    def test_decreases_with_noise(self):
        x = speechlike()
        rng = np.random.default_rng(1)
        noise = rng.standard_normal(len(x.samples))
        noise *= np.linalg.norm(x.samples) / np.linalg.norm(noise)
        scores = []
        for snr_db in (20.0, 10.0, 0.0, -10.0):
            y = Waveform(x.samples + noise * 10 ** (-snr_db / 20), x.sample_rate_hz)
            scores.append(metrics.stoi(x, y).value)
        assert all(a > b for a, b in zip(scores, scores[1:]))

    def test_estoi_decreases_with_noise(self):
        x = speechlike()
        rng = np.random.default_rng(2)
        noise = rng.standard_normal(len(x.samples))
        noise *= np.linalg.norm(x.samples) / np.linalg.norm(noise)
        a = metrics.estoi(x, Waveform(x.samples + 0.1 * noise, x.sample_rate_hz)).value
        b = metrics.estoi(x, Waveform(x.samples + 1.0 * noise, x.sample_rate_hz)).value
        assert a > b

    def test_rejects_rate_mismatch(self):
        x = speechlike()
        y = Waveform(x.samples, 8000)
        with pytest.raises(InputError):
            metrics.stoi(x, y)

    def test_trims_small_length_mismatch(self):
        x = speechlike()
        y = Waveform(x.samples[:-100], x.sample_rate_hz)
        assert metrics.stoi(x, y).value == pytest.approx(1.0, abs=1e-3)

    def test_rejects_large_length_mismatch(self):
        x = speechlike()
        y = Waveform(x.samples[: len(x.samples) // 2], x.sample_rate_hz)
        with pytest.raises(InputError, match="mismatch"):
            metrics.stoi(x, y)

    def test_rejects_too_short_signal(self):
        x = Waveform(np.ones(1000) * 0.1, 16000)
        with pytest.raises(InputError):
            metrics.stoi(x, x)

    def test_silent_frames_are_dropped(self):
        x = speechlike()
        # padding the clean signal with silence must not change the score much
        pad = np.zeros(8000)
        xp = Waveform(np.concatenate([pad, x.samples, pad]), x.sample_rate_hz)
        base = metrics.stoi(x, x)
        padded = metrics.stoi(xp, xp)
        assert padded.value == pytest.approx(1.0, abs=1e-6)
        assert padded.valid_frames < len(xp.samples) // metrics.FRAME_HOP

    def test_third_octave_bands_cover_expected_range(self):
        obm = metrics._third_octave_matrix()
        assert obm.shape[0] == 15
        assert np.all(obm.sum(axis=1) > 0)


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------


class TestWer:
    def test_exact_fraction(self):
        assert metrics.wer("a b c".split(), "a x c".split()) == pytest.approx(1 / 3)

    def test_identity_zero(self):
        assert metrics.wer(["hello", "world"], ["hello", "world"]) == 0.0

    def test_can_exceed_one(self):
        assert metrics.wer(["a"], ["x", "y", "z"]) == 3.0

    def test_matches_backtrace_oracle_on_random_pairs(self):
        rng = np.random.default_rng(3)
        vocab = [f"w{i}" for i in range(5)]
        for _ in range(300):
            ref = [vocab[i] for i in rng.integers(0, 5, rng.integers(1, 8))]
            hyp = [vocab[i] for i in rng.integers(0, 5, rng.integers(0, 8))]
            assert metrics.edit_distance(ref, hyp) == edit_distance_with_backtrace(ref, hyp)

    def test_rejects_empty_reference(self):
        with pytest.raises(InputError):
            metrics.wer([], ["a"])

    def test_accepts_transcript_objects(self):
        a = metrics.Transcript("x", ("a", "b"))
        b = metrics.Transcript("x", ("a", "c"))
        assert metrics.wer(a, b) == 0.5


class TestTextNormalization:
    def test_lowercase_and_punctuation(self):
        assert metrics.normalize_text("Hello, World!") == ("hello", "world")

    def test_keeps_apostrophes(self):
        assert metrics.normalize_text("don't stop") == ("don't", "stop")

    def test_collapses_whitespace(self):
        assert metrics.normalize_text("  a\t b \n") == ("a", "b")


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


class TestTranscriptFiles:
    def test_load(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("s1\tHello there\ns2\tsecond line\n")
        out = metrics.load_transcripts(path)
        assert out["s1"].tokens == ("hello", "there")
        assert len(out) == 2

    def test_rejects_duplicate_and_malformed(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("s1\ta\ns1\tb\n")
        with pytest.raises(InputError, match="duplicate"):
            metrics.load_transcripts(path)
        path.write_text("no tab here\n")
        with pytest.raises(InputError, match="TAB"):
            metrics.load_transcripts(path)

    def test_report_format(self, tmp_path):
        path = tmp_path / "r.tsv"
        metrics.write_report(path, [("a", 0.5, 0.25, None), ("b", 1.0, 1.0, 0.125)])
        lines = path.read_text().splitlines()
        assert lines[0] == "id\tstoi\testoi\twer"
        assert lines[1] == "a\t0.500000\t0.250000\t"
        assert lines[2] == "b\t1.000000\t1.000000\t0.125000"
