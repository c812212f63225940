"""Command-line entry point for the full pipeline.

Subcommands: make-synthetic, train, synth, eval, mel, griffinlim. Options may
come from a flat key=value config file; explicit flags override file values.
Every run prints the resolved configuration including the seed, and partially
written outputs are removed when a command fails.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data, dsp, inference, metrics, training
from .errors import LipspeechError
from .model import LipToSpeechModel, ModelConfig, load_checkpoint


def _parse_kv_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise LipspeechError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, target):
    if isinstance(target, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise LipspeechError(f"cannot parse boolean from {value!r}")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        if target and isinstance(target[0], tuple):  # pairs like "6:7,2:3"
            return tuple(
                tuple(int(x) for x in pair.split(":")) for pair in value.split(",") if pair
            )
        return tuple(type(target[0])(x) for x in value.split(","))
    return value


def _build_config(cls, file_values: dict, overrides: dict, allowed_extra=()):
    """Instantiate a dataclass from defaults + config file + flag overrides."""
    defaults = cls()
    known = {f.name for f in fields(cls)}
    merged = {}
    for key, raw in file_values.items():
        if key in allowed_extra:
            continue
        if key not in known:
            raise LipspeechError(f"unknown config key {key!r} for {cls.__name__}")
        merged[key] = _coerce(raw, getattr(defaults, key))
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return cls(**merged)


def _print_config(name, cfg):
    for key, value in sorted(asdict(cfg).items()):
        print(f"{name}.{key} = {value}")


class _OutputGuard:
    """Removes declared outputs if the command fails midway."""

    def __init__(self):
        self.paths = []

    def declare(self, *paths):
        self.paths.extend(Path(p) for p in paths)

    def cleanup(self):
        for p in self.paths:
            if p.exists():
                p.unlink()


# ---------------------------------------------------------------------------
# Subcommands


def cmd_make_synthetic(args, guard):
    file_values = _parse_kv_file(args.spec) if args.spec else {}
    spec = _build_config(
        data.SyntheticSpec,
        file_values,
        {"seed": args.seed, "n_sequences": args.n_sequences},
    )
    _print_config("spec", spec)
    out_dir = Path(args.out)
    if not out_dir.parent.exists():
        raise LipspeechError(f"parent directory {out_dir.parent} does not exist")
    manifests = data.generate_synthetic_corpus(spec, out_dir)
    for split, manifest in manifests.items():
        print(f"{split}: {len(manifest)} sequences -> {out_dir / (split + '.tsv')}")


def cmd_train(args, guard):
    file_values = _parse_kv_file(args.config) if args.config else {}
    cfg = _build_config(
        training.TrainConfig,
        file_values,
        {"seed": args.seed, "max_iters": args.max_iters},
        allowed_extra=("halved",),
    )
    halved = _coerce(file_values.get("halved", "false"), True)
    _print_config("train", cfg)
    print(f"model.halved = {halved}")
    manifest_path = Path(args.manifest)
    val_path = Path(args.val_manifest) if args.val_manifest else manifest_path.parent / "val.tsv"
    train_manifest = data.load_manifest(manifest_path, "train")
    val_manifest = data.load_manifest(val_path, "val")
    train_examples = training.load_examples(train_manifest)
    val_examples = training.load_examples(val_manifest)
    model_cfg = ModelConfig.halved(seed=cfg.seed) if halved else ModelConfig(seed=cfg.seed)
    model = LipToSpeechModel(model_cfg)
    out_dir = Path(args.out)
    guard.declare(out_dir / "best.ckpt", out_dir / "best.ckpt.json", out_dir / "metrics.log")
    result = training.train(model, train_examples, val_examples, cfg, out_dir)
    print(f"best val L1 {result.best_val_loss:.6f} after {result.iterations_run} iters")
    print(f"checkpoint: {result.best_checkpoint}")
    if result.aborted:
        raise LipspeechError("training aborted on non-finite loss; last good checkpoint kept")


def cmd_synth(args, guard):
    model, extra = load_checkpoint(args.checkpoint)
    frames, fps = data.load_frames(args.frames)
    cfg = inference.SynthesisConfig(
        window_seconds=float(extra.get("window_seconds", 3.0)),
        overlap_seconds=args.overlap,
        griffin_lim_iters=args.griffin_lim_iters,
        dropout_seed=args.seed if args.seed is not None else 0,
    )
    _print_config("synth", cfg)
    out_wav = Path(args.out)
    out_mel = out_wav.with_suffix(".mel")
    guard.declare(out_wav, out_mel)
    mel, wav, alignments = inference.synthesize_long(frames, model, fps, cfg)
    dsp.save_wav(out_wav, dsp.Waveform(np.clip(wav, -1.0, 1.0)))
    dsp.save_mel(out_mel, mel)
    print(f"wrote {out_wav} ({len(wav) / dsp.SAMPLE_RATE_HZ:.2f}s) and {out_mel}")
    if args.dump_alignment:
        guard.declare(args.dump_alignment)
        dsp.save_mel(args.dump_alignment, np.concatenate(alignments, axis=0))
        print(f"wrote {args.dump_alignment}")


def cmd_eval(args, guard):
    ref_dir, hyp_dir = Path(args.ref_dir), Path(args.hyp_dir)
    ref_transcripts = metrics.load_transcripts(args.transcripts) if args.transcripts else {}
    hyp_transcripts = (
        metrics.load_transcripts(args.hyp_transcripts) if args.hyp_transcripts else {}
    )
    rows = []
    ref_wavs = sorted(ref_dir.glob("*.wav"))
    if not ref_wavs:
        raise LipspeechError(f"no .wav files in {ref_dir}")
    for ref_path in ref_wavs:
        eid = ref_path.stem
        hyp_path = hyp_dir / ref_path.name
        if not hyp_path.is_file():
            raise LipspeechError(f"missing hypothesis audio {hyp_path}")
        clean = dsp.load_wav(ref_path)
        degraded = dsp.load_wav(hyp_path)
        s = metrics.stoi(clean, degraded).value
        e = metrics.estoi(clean, degraded).value
        w = None
        if eid in ref_transcripts and eid in hyp_transcripts:
            w = metrics.wer(ref_transcripts[eid], hyp_transcripts[eid])
        rows.append((eid, s, e, w))
    guard.declare(args.out)
    metrics.write_report(args.out, rows)
    print(f"wrote {args.out} ({len(rows)} rows)")


def cmd_mel(args, guard):
    wav = dsp.load_wav(args.wav)
    if wav.sample_rate_hz != dsp.SAMPLE_RATE_HZ:
        raise LipspeechError(
            f"{args.wav}: expected {dsp.SAMPLE_RATE_HZ} Hz, got {wav.sample_rate_hz}"
        )
    mel = dsp.wav_to_mel(wav.samples)
    guard.declare(args.out)
    dsp.save_mel(args.out, mel)
    print(f"wrote {args.out} shape {mel.shape}")


def cmd_griffinlim(args, guard):
    mel = dsp.load_mel(args.mel)
    linear = dsp.mel_to_linear(mel)
    seed = args.seed if args.seed is not None else 0
    wav, trace = dsp.griffin_lim(linear, n_iters=args.iters, seed=seed)
    guard.declare(args.out)
    dsp.save_wav(args.out, dsp.Waveform(np.clip(wav, -1.0, 1.0)))
    print(f"wrote {args.out}; final consistency error {trace[-1]:.4f}")


# ---------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(prog="lipspeech", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate the synthetic viseme corpus")
    p.add_argument("--spec", help="key=value file with SyntheticSpec fields")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-sequences", type=int, dest="n_sequences")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train a model from split manifests")
    p.add_argument("--manifest", required=True, help="train manifest (tsv)")
    p.add_argument("--val-manifest", help="validation manifest; default sibling val.tsv")
    p.add_argument("--config", help="key=value file with TrainConfig fields + halved")
    p.add_argument("--out", required=True, help="output directory for checkpoint + log")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize speech from a FRM1 frame sequence")
    p.add_argument("--frames", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output wav path (.mel written alongside)")
    p.add_argument("--overlap", type=float, default=0.4)
    p.add_argument("--griffin-lim-iters", type=int, default=60, dest="griffin_lim_iters")
    p.add_argument("--dump-alignment", help="optional alignment dump path")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score hypothesis audio against references")
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--hyp-dir", required=True)
    p.add_argument("--transcripts", help="reference transcripts (id<TAB>text)")
    p.add_argument("--hyp-transcripts", help="hypothesis transcripts (id<TAB>text)")
    p.add_argument("--out", required=True, help="report tsv path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mel", help="extract a MEL1 melspectrogram from a wav")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mel)

    p = sub.add_parser("griffinlim", help="invert a MEL1 file to audio")
    p.add_argument("--mel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_griffinlim)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None:
        print(f"seed = {args.seed}")
    guard = _OutputGuard()
    try:
        args.func(args, guard)
    except (LipspeechError, OSError) as exc:
        guard.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
