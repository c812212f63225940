"""Tests for window sampling, the teacher-forcing schedule, and the loop."""

import numpy as np
import pytest

from lipspeech import data, dsp, training
from lipspeech.errors import InputError
from lipspeech.model import LipToSpeechModel, ModelConfig, load_checkpoint

TINY = ModelConfig(
    n_mels=80,
    encoder_channels=(2, 2, 2, 2),
    embed_dim=4,
    prenet_dim=4,
    attention_rnn_dim=4,
    decoder_rnn_dim=4,
    attention_dim=4,
    location_filters=2,
    location_kernel=5,
    seed=0,
)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = data.SyntheticSpec(n_sequences=6, split_ratios=(4 / 6, 1 / 6, 1 / 6))
    manifests = data.generate_synthetic_corpus(spec, root)
    return {
        split: training.load_examples(m) for split, m in manifests.items()
    }


# ---------------------------------------------------------------------------
# Config and schedule
# ---------------------------------------------------------------------------


class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(InputError):
            training.TrainConfig(window_seconds=0)
        with pytest.raises(InputError):
            training.TrainConfig(tf_floor=1.5)
        with pytest.raises(InputError):
            training.TrainConfig(batch_size=0)


class TestTeacherForcingSchedule:
    def test_hold_decay_floor(self):
        cfg = training.TrainConfig(tf_hold_iters=100, tf_decay_iters=200, tf_floor=0.2)
        assert training.teacher_forcing_prob(0, cfg) == 1.0
        assert training.teacher_forcing_prob(99, cfg) == 1.0
        assert training.teacher_forcing_prob(200, cfg) == pytest.approx(0.6)
        assert training.teacher_forcing_prob(300, cfg) == pytest.approx(0.2)
        assert training.teacher_forcing_prob(10_000, cfg) == pytest.approx(0.2)

    def test_monotone_non_increasing(self):
        cfg = training.TrainConfig()
        probs = [training.teacher_forcing_prob(i, cfg) for i in range(0, 2000, 50)]
        assert all(a >= b for a, b in zip(probs, probs[1:]))

    def test_rejects_negative_iteration(self):
        with pytest.raises(InputError):
            training.teacher_forcing_prob(-1, training.TrainConfig())


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


class TestWindows:
    def test_window_lengths(self):
        assert training.window_lengths(3.0, 24) == (72, 240)
        assert training.window_lengths(0.5, 24) == (12, 40)

    def test_sample_window_alignment(self, tiny_corpus):
        ex = tiny_corpus["train"][0]
        frames, mel = training.sample_window(
            ex, 1.0, rng=None, t0=24
        )  # t0 = 1 s -> mel starts at 80
        assert frames.shape[0] == 24
        assert mel.shape[0] == 80
        assert np.array_equal(mel, ex.mel[80:160])

    def test_sample_window_random_in_range(self, tiny_corpus):
        ex = tiny_corpus["train"][0]
        rng = np.random.default_rng(0)
        for _ in range(10):
            frames, mel = training.sample_window(ex, 1.0, rng)
            assert frames.shape[0] == 24 and mel.shape[0] == 80

    def test_rejects_too_short_example(self, tiny_corpus):
        ex = tiny_corpus["train"][0]
        with pytest.raises(InputError, match="shorter than window"):
            training.sample_window(ex, 10.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class TestTrainLoop:
    def run_short(self, tiny_corpus, out_dir, seed=0, max_iters=3):
        cfg = training.TrainConfig(
            batch_size=2, max_iters=max_iters, validate_every=2, seed=seed
        )
        model = LipToSpeechModel(TINY)
        result = training.train(
            model, tiny_corpus["train"], tiny_corpus["val"], cfg, out_dir
        )
        return model, result

    def test_produces_checkpoint_and_log(self, tiny_corpus, tmp_path):
        _, result = self.run_short(tiny_corpus, tmp_path / "run")
        assert (tmp_path / "run" / "best.ckpt").exists()
        assert (tmp_path / "run" / "best.ckpt.json").exists()
        assert result.iterations_run == 3
        assert not result.aborted
        lines = (tmp_path / "run" / "metrics.log").read_text().splitlines()
        kinds = [line.split("\t")[1] for line in lines]
        assert kinds == ["train", "train", "val", "train", "val"]

    def test_checkpoint_reloads_with_window_metadata(self, tiny_corpus, tmp_path):
        self.run_short(tiny_corpus, tmp_path / "run")
        model, extra = load_checkpoint(tmp_path / "run" / "best.ckpt")
        assert extra["window_seconds"] == 3.0
        assert extra["fps"] == 24
        assert model.cfg == TINY

    def test_deterministic_given_seed(self, tiny_corpus, tmp_path):
        self.run_short(tiny_corpus, tmp_path / "a", seed=7)
        self.run_short(tiny_corpus, tmp_path / "b", seed=7)
        assert (tmp_path / "a" / "best.ckpt").read_bytes() == (
            tmp_path / "b" / "best.ckpt"
        ).read_bytes()
        assert (tmp_path / "a" / "metrics.log").read_text() == (
            tmp_path / "b" / "metrics.log"
        ).read_text()

    def test_validation_loss_is_repeatable(self, tiny_corpus):
        model = LipToSpeechModel(TINY)
        cfg = training.TrainConfig(batch_size=2)
        a = training.validation_loss(model, tiny_corpus["val"], cfg)
        b = training.validation_loss(model, tiny_corpus["val"], cfg)
        assert a == b

    def test_nan_abort_keeps_last_checkpoint(self, tiny_corpus, tmp_path):
        model = LipToSpeechModel(TINY)
        model.params()["dec.proj.w"][...] = np.nan
        cfg = training.TrainConfig(batch_size=2, max_iters=5, validate_every=2)
        result = training.train(
            model, tiny_corpus["train"], tiny_corpus["val"], cfg, tmp_path / "run"
        )
        assert result.aborted
        assert result.iterations_run == 1
        assert (tmp_path / "run" / "best.ckpt").exists()
        log = (tmp_path / "run" / "metrics.log").read_text()
        assert "nan" in log

    def test_rejects_empty_sets(self, tiny_corpus, tmp_path):
        with pytest.raises(InputError):
            training.train(
                LipToSpeechModel(TINY), [], tiny_corpus["val"],
                training.TrainConfig(), tmp_path / "run",
            )
