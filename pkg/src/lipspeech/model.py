"""Lip-to-speech network: 3D-CNN face encoder and attention-based mel decoder.

The encoder is five stages of 3D convolutions. Each stage downsamples the
spatial extent by 2 (48 -> 24 -> 12 -> 6 -> 3 -> 1) while preserving the
temporal extent, and applies two residual conv blocks with batchnorm. The
decoder is Tacotron-2 style: prenet, attention LSTM, location-sensitive
attention over the T x D encoder memory, decoder LSTM, and a linear
projection emitting `reduction_factor` mel frames per step.

All backward passes are hand-chained through the nn kernels; no autodiff.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .errors import InputError

N_MELS = 80
FRAME_SIZE = 48


@dataclass
class ModelConfig:
    n_mels: int = N_MELS
    frame_size: int = FRAME_SIZE
    in_channels: int = 3
    encoder_channels: tuple = (12, 24, 48, 96)  # stages 1-4; stage 5 emits embed_dim
    embed_dim: int = 512
    prenet_dim: int = 128
    attention_rnn_dim: int = 256
    decoder_rnn_dim: int = 256
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel: int = 31
    reduction_factor: int = 2
    prenet_dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)

    @classmethod
    def halved(cls, **kw) -> "ModelConfig":
        """All hidden widths halved; used for small corpora to avoid overfitting."""
        return cls(
            encoder_channels=(6, 12, 24, 48),
            embed_dim=256,
            prenet_dim=64,
            attention_rnn_dim=128,
            decoder_rnn_dim=128,
            attention_dim=64,
            location_filters=16,
            **kw,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class _ResBlock:
    """y = relu(x + bn(conv(x))); kernel preserves all extents."""

    def __init__(self, channels, kernel, padding, rng, dtype):
        self.conv = nn.Conv3d(channels, channels, kernel, (1, 1, 1), padding, rng, dtype)
        self.bn = nn.BatchNorm(channels, dtype=dtype)

    def layers(self):
        return {"conv": self.conv, "bn": self.bn}

    def forward(self, x, train):
        y1, c1 = self.conv.forward(x)
        y2, c2 = self.bn.forward(y1, train)
        y, c3 = nn.relu_forward(x + y2)
        return y, (c1, c2, c3)

    def backward(self, gy, cache):
        c1, c2, c3 = cache
        gs = nn.relu_backward(gy, c3)
        return gs + self.conv.backward(self.bn.backward(gs, c2), c1)


class _EncoderStage:
    def __init__(self, cin, cout, down_kernel, down_pad, block_kernel, block_pad, rng, dtype):
        self.down = nn.Conv3d(cin, cout, down_kernel, (1, 2, 2), down_pad, rng, dtype)
        self.bn = nn.BatchNorm(cout, dtype=dtype)
        self.block1 = _ResBlock(cout, block_kernel, block_pad, rng, dtype)
        self.block2 = _ResBlock(cout, block_kernel, block_pad, rng, dtype)

    def layers(self):
        out = {"down": self.down, "bn": self.bn}
        for bname, block in (("block1", self.block1), ("block2", self.block2)):
            for lname, layer in block.layers().items():
                out[f"{bname}.{lname}"] = layer
        return out

    def forward(self, x, train):
        y, c1 = self.down.forward(x)
        y, c2 = self.bn.forward(y, train)
        y, c3 = nn.relu_forward(y)
        y, c4 = self.block1.forward(y, train)
        y, c5 = self.block2.forward(y, train)
        return y, (c1, c2, c3, c4, c5)

    def backward(self, gy, cache, need_input_grad=True):
        c1, c2, c3, c4, c5 = cache
        gy = self.block2.backward(gy, c5)
        gy = self.block1.backward(gy, c4)
        gy = nn.relu_backward(gy, c3)
        gy = self.bn.backward(gy, c2)
        return self.down.backward(gy, c1, need_input_grad)


class Encoder:
    """Spatio-temporal face encoder mapping (N, T, 48, 48, 3) to (N, T, D)."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.encoder_channels
        d = cfg.embed_dim
        self.stages = [
            # (cin, cout, down kernel/pad, block kernel/pad)
            _EncoderStage(cfg.in_channels, c1, (3, 5, 5), (1, 2, 2), (3, 3, 3), (1, 1, 1), rng, dtype),
            _EncoderStage(c1, c2, (3, 3, 3), (1, 1, 1), (3, 3, 3), (1, 1, 1), rng, dtype),
            _EncoderStage(c2, c3, (3, 3, 3), (1, 1, 1), (3, 3, 3), (1, 1, 1), rng, dtype),
            _EncoderStage(c3, c4, (3, 3, 3), (1, 1, 1), (3, 3, 3), (1, 1, 1), rng, dtype),
            # spatial extent here is 3 -> 1; blocks convolve over time only
            _EncoderStage(c4, d, (3, 3, 3), (1, 0, 0), (3, 1, 1), (1, 0, 0), rng, dtype),
        ]

    def layers(self):
        out = {}
        for i, stage in enumerate(self.stages):
            for lname, layer in stage.layers().items():
                out[f"enc.stage{i + 1}.{lname}"] = layer
        return out

    def forward(self, frames, train, want_stage_outputs=False):
        s = self.cfg.frame_size
        if frames.ndim != 5 or frames.shape[2] != s or frames.shape[3] != s:
            raise InputError(
                f"encoder expects (N, T, {s}, {s}, {self.cfg.in_channels}) frames,"
                f" got {frames.shape}"
            )
        x = frames
        caches = []
        stage_outputs = []
        for stage in self.stages:
            x, c = stage.forward(x, train)
            caches.append(c)
            if want_stage_outputs:
                stage_outputs.append(x)
        n, t = x.shape[0], x.shape[1]
        features = x.reshape(n, t, self.cfg.embed_dim)
        if want_stage_outputs:
            return features, caches, stage_outputs
        return features, caches

    def backward(self, gfeatures, caches):
        n, t, d = gfeatures.shape
        gy = gfeatures.reshape(n, t, 1, 1, d)
        for i, (stage, cache) in enumerate(zip(reversed(self.stages), reversed(caches))):
            # the first stage reads raw pixels; its input gradient is never used
            gy = stage.backward(gy, cache, need_input_grad=i < len(self.stages) - 1)
        return gy


@dataclass
class DecoderState:
    """Recurrent state threaded through decode steps; build via init_state()."""

    memory: np.ndarray  # (N, T, D)
    processed_memory: np.ndarray  # (N, T, A)
    pm_cache: object
    h_att: np.ndarray
    c_att: np.ndarray
    h_dec: np.ndarray
    c_dec: np.ndarray
    alpha: np.ndarray  # (N, T) previous attention weights
    alpha_cum: np.ndarray
    context: np.ndarray  # (N, D)


@dataclass
class _StepGrads:
    """Gradients flowing backwards into a step's produced state."""

    h_att: np.ndarray
    c_att: np.ndarray
    h_dec: np.ndarray
    c_dec: np.ndarray
    alpha: np.ndarray
    alpha_cum: np.ndarray
    context: np.ndarray

    @classmethod
    def zeros(cls, state: DecoderState):
        return cls(
            *(np.zeros_like(a) for a in (
                state.h_att, state.c_att, state.h_dec, state.c_dec,
                state.alpha, state.alpha_cum, state.context,
            ))
        )


class Decoder:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        d, p, a = cfg.embed_dim, cfg.prenet_dim, cfg.attention_dim
        self.prenet_fc1 = nn.Linear(cfg.n_mels, p, rng, dtype)
        self.prenet_fc2 = nn.Linear(p, p, rng, dtype)
        self.att_rnn = nn.LSTMCell(p + d, cfg.attention_rnn_dim, rng, dtype)
        self.att_query = nn.Linear(cfg.attention_rnn_dim, a, rng, dtype, bias=False)
        self.att_memory = nn.Linear(d, a, rng, dtype, bias=False)
        self.att_location_conv = nn.Conv1d(2, cfg.location_filters, cfg.location_kernel, rng, dtype, bias=False)
        self.att_location_proj = nn.Linear(cfg.location_filters, a, rng, dtype, bias=False)
        self.att_v = nn.Linear(a, 1, rng, dtype, bias=False)
        self.dec_rnn = nn.LSTMCell(cfg.attention_rnn_dim + d, cfg.decoder_rnn_dim, rng, dtype)
        self.proj = nn.Linear(cfg.decoder_rnn_dim + d, cfg.reduction_factor * cfg.n_mels, rng, dtype)

    def layers(self):
        return {
            f"dec.{name}": layer
            for name, layer in (
                ("prenet_fc1", self.prenet_fc1),
                ("prenet_fc2", self.prenet_fc2),
                ("att_rnn", self.att_rnn),
                ("att_query", self.att_query),
                ("att_memory", self.att_memory),
                ("att_location_conv", self.att_location_conv),
                ("att_location_proj", self.att_location_proj),
                ("att_v", self.att_v),
                ("dec_rnn", self.dec_rnn),
                ("proj", self.proj),
            )
        }

    def init_state(self, memory) -> DecoderState:
        if memory.ndim != 3 or memory.shape[2] != self.cfg.embed_dim:
            raise InputError(f"memory shape {memory.shape} != (N, T, {self.cfg.embed_dim})")
        n, t, _ = memory.shape
        dtype = memory.dtype
        pm, pm_cache = self.att_memory.forward(memory)
        zeros = lambda *shape: np.zeros(shape, dtype=dtype)
        return DecoderState(
            memory=memory,
            processed_memory=pm,
            pm_cache=pm_cache,
            h_att=zeros(n, self.cfg.attention_rnn_dim),
            c_att=zeros(n, self.cfg.attention_rnn_dim),
            h_dec=zeros(n, self.cfg.decoder_rnn_dim),
            c_dec=zeros(n, self.cfg.decoder_rnn_dim),
            alpha=zeros(n, t),
            alpha_cum=zeros(n, t),
            context=zeros(n, self.cfg.embed_dim),
        )

    def step(self, prev_frame, state: DecoderState, rng, train):
        """One decode step; returns (out (N, r, n_mels), new_state, alpha, cache)."""
        if not isinstance(state, DecoderState):
            raise InputError("decoder state must come from init_state()")
        cfg = self.cfg
        n = prev_frame.shape[0]
        if prev_frame.shape != (n, cfg.n_mels) or n != state.memory.shape[0]:
            raise InputError(f"prev frame shape {prev_frame.shape} != (N, {cfg.n_mels})")
        # prenet, dropout active in train and eval alike
        y, c_fc1 = self.prenet_fc1.forward(prev_frame)
        y, c_r1 = nn.relu_forward(y)
        y, m1 = nn.dropout_forward(y, cfg.prenet_dropout, rng)
        y, c_fc2 = self.prenet_fc2.forward(y)
        y, c_r2 = nn.relu_forward(y)
        prenet_out, m2 = nn.dropout_forward(y, cfg.prenet_dropout, rng)

        x_att = np.concatenate([prenet_out, state.context], axis=1)
        h_att, c_att, c_attrnn = self.att_rnn.forward(x_att, state.h_att, state.c_att)

        att_in = np.stack([state.alpha, state.alpha_cum], axis=2)  # (N, T, 2)
        floc, c_loc = self.att_location_conv.forward(att_in)
        loc_term, c_locp = self.att_location_proj.forward(floc)
        query, c_q = self.att_query.forward(h_att)
        pre = query[:, None, :] + state.processed_memory + loc_term
        th, c_th = nn.tanh_forward(pre)
        e, c_v = self.att_v.forward(th)
        alpha, c_sm = nn.softmax_forward(e[..., 0])
        context = np.einsum("nt,ntd->nd", alpha, state.memory)
        alpha_cum = state.alpha_cum + alpha

        x_dec = np.concatenate([h_att, context], axis=1)
        h_dec, c_dec, c_decrnn = self.dec_rnn.forward(x_dec, state.h_dec, state.c_dec)
        proj_in = np.concatenate([h_dec, context], axis=1)
        flat, c_proj = self.proj.forward(proj_in)
        out = flat.reshape(n, cfg.reduction_factor, cfg.n_mels)

        new_state = DecoderState(
            memory=state.memory,
            processed_memory=state.processed_memory,
            pm_cache=state.pm_cache,
            h_att=h_att,
            c_att=c_att,
            h_dec=h_dec,
            c_dec=c_dec,
            alpha=alpha,
            alpha_cum=alpha_cum,
            context=context,
        )
        cache = (
            c_fc1, c_r1, m1, c_fc2, c_r2, m2, c_attrnn,
            c_loc, c_locp, c_q, c_th, c_v, c_sm,
            alpha, state.memory, c_decrnn, c_proj,
        )
        return out, new_state, alpha, cache

    def step_backward(self, g_out, g_next: _StepGrads, cache, g_memory):
        """Invert one step. g_next carries grads into the state this step produced;
        returns (grads into the consumed state, grad wrt prev_frame). Memory and
        processed-memory grads accumulate into g_memory (dict with 'mem', 'pm')."""
        (
            c_fc1, c_r1, m1, c_fc2, c_r2, m2, c_attrnn,
            c_loc, c_locp, c_q, c_th, c_v, c_sm,
            alpha, memory, c_decrnn, c_proj,
        ) = cache
        cfg = self.cfg
        n = g_out.shape[0]
        h_att_dim = cfg.attention_rnn_dim
        p_dim = cfg.prenet_dim

        # projection
        gproj_in = self.proj.backward(g_out.reshape(n, -1), c_proj)
        gh_dec = g_next.h_dec + gproj_in[:, : cfg.decoder_rnn_dim]
        gcontext = g_next.context + gproj_in[:, cfg.decoder_rnn_dim :]
        # decoder LSTM
        gx_dec, gh_dec_prev, gc_dec_prev = self.dec_rnn.backward(gh_dec, g_next.c_dec, c_decrnn)
        gh_att = g_next.h_att + gx_dec[:, :h_att_dim]
        gcontext = gcontext + gx_dec[:, h_att_dim:]
        # context = alpha @ memory
        galpha = np.einsum("nd,ntd->nt", gcontext, memory)
        g_memory["mem"] += alpha[:, :, None] * gcontext[:, None, :]
        # alpha_cum' = alpha_cum + alpha
        galpha = galpha + g_next.alpha_cum + g_next.alpha
        galpha_cum_prev = g_next.alpha_cum.copy()
        # attention energies
        ge = nn.softmax_backward(galpha, c_sm)
        gth = self.att_v.backward(ge[..., None], c_v)
        gpre = nn.tanh_backward(gth, c_th)
        g_memory["pm"] += gpre
        gh_att = gh_att + self.att_query.backward(gpre.sum(axis=1), c_q)
        gfloc = self.att_location_proj.backward(gpre, c_locp)
        gatt_in = self.att_location_conv.backward(gfloc, c_loc)
        galpha_prev = gatt_in[:, :, 0]
        galpha_cum_prev = galpha_cum_prev + gatt_in[:, :, 1]
        # attention LSTM
        gx_att, gh_att_prev, gc_att_prev = self.att_rnn.backward(gh_att, g_next.c_att, c_attrnn)
        gprenet = gx_att[:, :p_dim]
        gcontext_prev = gx_att[:, p_dim:]
        # prenet
        gy = nn.dropout_backward(gprenet, m2)
        gy = nn.relu_backward(gy, c_r2)
        gy = self.prenet_fc2.backward(gy, c_fc2)
        gy = nn.dropout_backward(gy, m1)
        gy = nn.relu_backward(gy, c_r1)
        gprev_frame = self.prenet_fc1.backward(gy, c_fc1)

        g_prev = _StepGrads(
            h_att=gh_att_prev,
            c_att=gc_att_prev,
            h_dec=gh_dec_prev,
            c_dec=gc_dec_prev,
            alpha=galpha_prev,
            alpha_cum=galpha_cum_prev,
            context=gcontext_prev,
        )
        return g_prev, gprev_frame


class LipToSpeechModel:
    """Encoder + decoder with teacher-forced training and free-running synthesis."""

    def __init__(self, cfg: ModelConfig = None, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.dtype = dtype
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(self.cfg, rng, dtype)
        self.decoder = Decoder(self.cfg, rng, dtype)

    # -- parameter bookkeeping ------------------------------------------------

    def layers(self) -> dict:
        out = dict(self.encoder.layers())
        out.update(self.decoder.layers())
        return out

    def params(self) -> dict:
        return {
            f"{ln}.{pn}": arr
            for ln, layer in self.layers().items()
            for pn, arr in layer.params().items()
        }

    def grads(self) -> dict:
        return {
            f"{ln}.{pn}": arr
            for ln, layer in self.layers().items()
            for pn, arr in layer.grads().items()
        }

    def buffers(self) -> dict:
        return {
            f"{ln}.{pn}": arr
            for ln, layer in self.layers().items()
            for pn, arr in layer.buffers().items()
        }

    def zero_grad(self):
        for layer in self.layers().values():
            layer.zero_grad()

    # -- forward / backward ---------------------------------------------------

    def encode(self, frames, train=False):
        """Spatio-temporal features (N, T, D) for (N, T, 48, 48, 3) face crops."""
        features, _ = self.encoder.forward(np.asarray(frames, self.dtype), train)
        return features

    def init_decoder_state(self, memory) -> DecoderState:
        return self.decoder.init_state(memory)

    def decode_step(self, prev_frame, state, rng, train=False):
        """One autoregressive step: (mel frames (N, r, n_mels), state, alpha)."""
        out, new_state, alpha, _ = self.decoder.step(prev_frame, state, rng, train)
        return out, new_state, alpha

    def _run_decoder(self, memory, n_steps, targets, tf_prob, rng, train):
        """Shared decode loop. targets is required when tf_prob > 0."""
        cfg = self.cfg
        n = memory.shape[0]
        state = self.decoder.init_state(memory)
        prev = np.zeros((n, cfg.n_mels), dtype=memory.dtype)
        outs, alphas, caches, forced = [], [], [], []
        for k in range(n_steps):
            use_forced = bool(tf_prob > 0.0 and rng.random() < tf_prob)
            out, state, alpha, cache = self.decoder.step(prev, state, rng, train)
            outs.append(out)
            alphas.append(alpha)
            caches.append(cache)
            forced.append(use_forced)
            if use_forced:
                prev = targets[:, k * cfg.reduction_factor + cfg.reduction_factor - 1]
            else:
                prev = out[:, -1]
        pred = np.concatenate(outs, axis=1)  # (N, n_steps*r, n_mels)
        alignment = np.stack(alphas, axis=1)  # (N, n_steps, T)
        return pred, alignment, state, caches, forced

    def forward_teacher_forced(self, frames, targets, tf_prob, rng, train=True,
                               want_caches=False):
        """Teacher-forced pass returning (pred, alignment, L1 loss[, caches]).

        Per decoder step the previous input is the ground-truth frame with
        probability tf_prob, else the model's own output (drawn from rng).
        """
        if not 0.0 <= tf_prob <= 1.0:
            raise InputError(f"tf_prob must be in [0, 1], got {tf_prob}")
        frames = np.asarray(frames, self.dtype)
        targets = np.asarray(targets, self.dtype)
        cfg = self.cfg
        if targets.ndim != 3 or targets.shape[2] != cfg.n_mels:
            raise InputError(f"targets shape {targets.shape} != (N, M, {cfg.n_mels})")
        if targets.shape[1] % cfg.reduction_factor != 0:
            raise InputError(
                f"target length {targets.shape[1]} not divisible by r={cfg.reduction_factor}"
            )
        if frames.shape[0] != targets.shape[0]:
            raise InputError("frames/targets batch mismatch")
        n_steps = targets.shape[1] // cfg.reduction_factor
        memory, enc_caches = self.encoder.forward(frames, train)
        pred, alignment, state, caches, forced = self._run_decoder(
            memory, n_steps, targets, tf_prob, rng, train
        )
        loss = float(np.mean(np.abs(pred - targets)))
        if want_caches:
            return pred, alignment, loss, (targets, memory, state, enc_caches, caches, forced)
        return pred, alignment, loss

    def backward(self, pred, fwd_caches):
        """Backprop mean-L1 loss through decoder and encoder; fills grads."""
        targets, memory, state, enc_caches, caches, forced = fwd_caches
        cfg = self.cfg
        r = cfg.reduction_factor
        n_steps = len(caches)
        g_pred = (np.sign(pred - targets) / pred.size).astype(self.dtype)
        g_memory = {"mem": np.zeros_like(memory),
                    "pm": np.zeros_like(state.processed_memory)}
        g_next = _StepGrads.zeros(state)
        g_feedback = None  # grad wrt the frame fed into the step after k
        for k in reversed(range(n_steps)):
            g_out = g_pred[:, k * r : (k + 1) * r].copy()
            if g_feedback is not None:
                g_out[:, -1] += g_feedback
            g_next, gprev = self.decoder.step_backward(g_out, g_next, caches[k], g_memory)
            # the input to step k was step k-1's last output unless forced
            g_feedback = None if forced[k] else gprev
        gmem = g_memory["mem"] + self.decoder.att_memory.backward(
            g_memory["pm"], state.pm_cache
        )
        self.encoder.backward(gmem, enc_caches)

    def synthesize_window_mel(self, frames, rng, n_steps):
        """Free-running decode (tf_prob=0) from a zero frame; eval-mode encoder."""
        frames = np.asarray(frames, self.dtype)
        memory, _ = self.encoder.forward(frames, train=False)
        pred, alignment, _, _, _ = self._run_decoder(
            memory, n_steps, None, 0.0, rng, train=False
        )
        return pred, alignment

    def encoder_activation_map(self, frames):
        """Per-frame spatial activity of the stage-3 feature grid, in [0, 1].

        Returns (T, h, w) for a single (T, H, W, C) frame sequence: channel-wise
        L2 norm of the stage-3 output (6x6 for 48x48 inputs, so each cell covers
        an 8x8 pixel patch), min-max normalized per sequence.
        """
        frames = np.asarray(frames, self.dtype)
        if frames.ndim != 4:
            raise InputError(f"expected a single (T, H, W, C) sequence, got {frames.shape}")
        _, _, stage_outputs = self.encoder.forward(
            frames[None], train=False, want_stage_outputs=True
        )
        act = stage_outputs[2][0]  # (T, h, w, C)
        m = np.sqrt(np.sum(act.astype(np.float64) ** 2, axis=3))
        lo, hi = m.min(), m.max()
        return (m - lo) / (hi - lo + 1e-8)

    # -- persistence ----------------------------------------------------------

    def state_tensors(self) -> dict:
        out = dict(self.params())
        out.update(self.buffers())
        return out

    def load_state_tensors(self, tensors: dict):
        own = self.state_tensors()
        missing = set(own) - set(tensors)
        if missing:
            raise InputError(f"checkpoint missing tensors: {sorted(missing)[:5]} ...")
        for name, arr in own.items():
            loaded = tensors[name]
            if tuple(loaded.shape) != tuple(arr.shape):
                raise InputError(
                    f"checkpoint tensor {name} shape {loaded.shape} != {arr.shape}"
                )
            arr[...] = loaded.astype(arr.dtype)


def save_checkpoint(model: LipToSpeechModel, path, extra: dict = None) -> None:
    """Write weights (L2W1) plus a JSON sidecar with the model config."""
    nn.save_tensors(path, model.state_tensors())
    sidecar = {"model": asdict(model.cfg), "extra": extra or {}}
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild a model from save_checkpoint output; returns (model, extra)."""
    with open(str(path) + ".json") as f:
        sidecar = json.load(f)
    model = LipToSpeechModel(ModelConfig.from_dict(sidecar["model"]), dtype=dtype)
    model.load_state_tensors(nn.load_tensors(path))
    return model, sidecar.get("extra", {})
