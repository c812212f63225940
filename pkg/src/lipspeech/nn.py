"""Dense numpy kernels with hand-derived gradients.

Every layer exposes forward(...) -> (y, cache) and backward(gy, cache) -> gx;
backward accumulates parameter gradients into the layer's g* arrays. There is
no autodiff graph: callers chain backward passes explicitly in reverse order.

Layers hold float32 parameters by default; pass dtype=np.float64 when running
finite-difference gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, NumericalError


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains NaN/Inf")
    return arr


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Stateless activations


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(gy, cache):
    return gy * cache


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(gy, y):
    return gy * (1.0 - y * y)


def sigmoid_forward(x):
    with np.errstate(over="ignore"):  # exp overflow saturates harmlessly to 0
        y = 1.0 / (1.0 + np.exp(-x))
    return y, y


def sigmoid_backward(gy, y):
    return gy * y * (1.0 - y)


def softmax_forward(x):
    """Row-stochastic softmax over the last axis."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(gy, y):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def dropout_forward(x, p: float, rng: np.random.Generator):
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(gy, mask):
    return gy * mask


# ---------------------------------------------------------------------------
# Parameterized layers


class Layer:
    """Base: named learnable parameters, matching gradients, extra buffers."""

    def param_names(self):
        return ()

    def buffer_names(self):
        return ()

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.param_names()}

    def grads(self) -> dict:
        return {n: getattr(self, "g_" + n) for n in self.param_names()}

    def buffers(self) -> dict:
        return {n: getattr(self, n) for n in self.buffer_names()}

    def zero_grad(self):
        for g in self.grads().values():
            g[...] = 0.0


class Linear(Layer):
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, bias=True):
        self.w = xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype)
        self.b = np.zeros(out_dim, dtype) if bias else None
        self.g_w = np.zeros_like(self.w)
        self.g_b = np.zeros_like(self.b) if bias else None

    def param_names(self):
        return ("w", "b") if self.b is not None else ("w",)

    def forward(self, x):
        if x.shape[-1] != self.w.shape[0]:
            raise InputError(f"linear input dim {x.shape[-1]} != {self.w.shape[0]}")
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y, x

    def backward(self, gy, cache):
        x = cache
        x2 = x.reshape(-1, x.shape[-1])
        gy2 = gy.reshape(-1, gy.shape[-1])
        self.g_w += x2.T @ gy2
        if self.b is not None:
            self.g_b += gy2.sum(axis=0)
        return (gy2 @ self.w.T).reshape(x.shape)


class BatchNorm(Layer):
    """Normalization over every axis except the trailing feature axis."""

    def __init__(self, num_features, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(num_features, dtype)
        self.beta = np.zeros(num_features, dtype)
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(num_features, dtype)
        self.running_var = np.ones(num_features, dtype)

    def param_names(self):
        return ("gamma", "beta")

    def buffer_names(self):
        return ("running_mean", "running_var")

    def forward(self, x, train: bool):
        if x.shape[-1] != self.gamma.shape[0]:
            raise InputError(f"batchnorm features {x.shape[-1]} != {self.gamma.shape[0]}")
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        y = self.gamma * xhat + self.beta
        return y, (xhat, inv_std, axes, train)

    def backward(self, gy, cache):
        xhat, inv_std, axes, train = cache
        self.g_gamma += (gy * xhat).sum(axis=axes)
        self.g_beta += gy.sum(axis=axes)
        gxhat = gy * self.gamma
        if not train:
            return gxhat * inv_std
        n = xhat.size // xhat.shape[-1]
        return (
            inv_std
            / n
            * (
                n * gxhat
                - gxhat.sum(axis=axes)
                - xhat * (gxhat * xhat).sum(axis=axes)
            )
        )


def _conv_out_len(n, k, s, p):
    out = (n + 2 * p - k) // s + 1
    if out < 1:
        raise InputError(f"kernel {k} (stride {s}, pad {p}) too large for extent {n}")
    return out


class Conv3d(Layer):
    """3-D cross-correlation over (N, T, H, W, C) inputs, channels-last kernel."""

    def __init__(
        self,
        cin,
        cout,
        kernel=(3, 3, 3),
        stride=(1, 1, 1),
        padding=(1, 1, 1),
        rng=None,
        dtype=np.float32,
    ):
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        kt, kh, kw = self.kernel
        fan_in = kt * kh * kw * cin
        self.w = xavier_uniform(
            rng, (kt, kh, kw, cin, cout), fan_in, kt * kh * kw * cout, dtype
        )
        self.b = np.zeros(cout, dtype)
        self.g_w = np.zeros_like(self.w)
        self.g_b = np.zeros_like(self.b)

    def param_names(self):
        return ("w", "b")

    def _offset_slice(self, xp, dt, dh, dw, out_shape):
        """View of the padded batch hit by kernel offset (dt, dh, dw)."""
        st, sh, sw = self.stride
        out_t, out_h, out_w = out_shape
        return xp[
            :,
            dt : dt + st * out_t : st,
            dh : dh + sh * out_h : sh,
            dw : dw + sw * out_w : sw,
        ]

    def forward(self, x):
        kt, kh, kw, cin, cout = self.w.shape
        if x.ndim != 5 or x.shape[4] != cin:
            raise InputError(f"conv3d input shape {x.shape} incompatible with {cin} channels")
        pt, ph, pw = self.padding
        out_t = _conv_out_len(x.shape[1], kt, self.stride[0], pt)
        out_h = _conv_out_len(x.shape[2], kh, self.stride[1], ph)
        out_w = _conv_out_len(x.shape[3], kw, self.stride[2], pw)
        xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
        # one GEMM per kernel offset: avoids materializing a patch matrix
        y = np.zeros((x.shape[0], out_t, out_h, out_w, cout), np.result_type(x, self.w))
        y += self.b
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    sl = self._offset_slice(xp, dt, dh, dw, (out_t, out_h, out_w))
                    y += sl @ self.w[dt, dh, dw]
        return y, (xp, x.shape)

    def backward(self, gy, cache, need_input_grad=True):
        xp, x_shape = cache
        kt, kh, kw, cin, cout = self.w.shape
        pt, ph, pw = self.padding
        _, out_t, out_h, out_w, _ = gy.shape
        out_shape = (out_t, out_h, out_w)
        gy2 = gy.reshape(-1, cout)
        gxp = np.zeros_like(xp) if need_input_grad else None
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    sl = self._offset_slice(xp, dt, dh, dw, out_shape)
                    self.g_w[dt, dh, dw] += sl.reshape(-1, cin).T @ gy2
                    if need_input_grad:
                        self._offset_slice(gxp, dt, dh, dw, out_shape)[...] += (
                            gy @ self.w[dt, dh, dw].T
                        )
        self.g_b += gy2.sum(axis=0)
        if not need_input_grad:
            return None
        _, t, h, w, _ = x_shape
        return gxp[:, pt : pt + t, ph : ph + h, pw : pw + w, :]


class Conv1d(Layer):
    """Stride-1 same-length 1-D convolution over (N, T, C) inputs."""

    def __init__(self, cin, cout, kernel, rng, dtype=np.float32, bias=True):
        if kernel % 2 != 1:
            raise InputError(f"conv1d kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.padding = kernel // 2
        self.w = xavier_uniform(rng, (kernel, cin, cout), kernel * cin, kernel * cout, dtype)
        self.b = np.zeros(cout, dtype) if bias else None
        self.g_w = np.zeros_like(self.w)
        self.g_b = np.zeros_like(self.b) if bias else None

    def param_names(self):
        return ("w", "b") if self.b is not None else ("w",)

    def forward(self, x):
        k, cin, cout = self.w.shape
        if x.ndim != 3 or x.shape[2] != cin:
            raise InputError(f"conv1d input shape {x.shape} incompatible with {cin} channels")
        n, t, _ = x.shape
        p = self.padding
        xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
        v = sliding_window_view(xp, k, axis=1)  # (N, T, cin, k)
        cols = np.ascontiguousarray(v.transpose(0, 1, 3, 2)).reshape(n * t, k * cin)
        y = cols @ self.w.reshape(-1, cout)
        if self.b is not None:
            y = y + self.b
        return y.reshape(n, t, cout), (cols, xp.shape, x.shape)

    def backward(self, gy, cache):
        cols, xp_shape, x_shape = cache
        k, cin, cout = self.w.shape
        n, t, _ = x_shape
        p = self.padding
        gy2 = gy.reshape(-1, cout)
        self.g_w += (cols.T @ gy2).reshape(self.w.shape)
        if self.b is not None:
            self.g_b += gy2.sum(axis=0)
        gcols = (gy2 @ self.w.reshape(-1, cout).T).reshape(n, t, k, cin)
        gxp = np.zeros(xp_shape, dtype=gy.dtype)
        for d in range(k):
            gxp[:, d : d + t, :] += gcols[:, :, d, :]
        return gxp[:, p : p + t, :]


class LSTMCell(Layer):
    """Single-step LSTM with gate order (input, forget, candidate, output)."""

    def __init__(self, in_dim, hidden_dim, rng, dtype=np.float32):
        self.hidden_dim = hidden_dim
        k = 1.0 / np.sqrt(hidden_dim)
        self.wx = rng.uniform(-k, k, size=(in_dim, 4 * hidden_dim)).astype(dtype)
        self.wh = rng.uniform(-k, k, size=(hidden_dim, 4 * hidden_dim)).astype(dtype)
        self.b = np.zeros(4 * hidden_dim, dtype)
        self.g_wx = np.zeros_like(self.wx)
        self.g_wh = np.zeros_like(self.wh)
        self.g_b = np.zeros_like(self.b)

    def param_names(self):
        return ("wx", "wh", "b")

    def forward(self, x, h_prev, c_prev):
        hd = self.hidden_dim
        if x.shape[-1] != self.wx.shape[0] or h_prev.shape[-1] != hd:
            raise InputError(
                f"lstm shapes {x.shape}/{h_prev.shape} incompatible with cell"
            )
        gates = x @ self.wx + h_prev @ self.wh + self.b
        i, _ = sigmoid_forward(gates[..., :hd])
        f, _ = sigmoid_forward(gates[..., hd : 2 * hd])
        g = np.tanh(gates[..., 2 * hd : 3 * hd])
        o, _ = sigmoid_forward(gates[..., 3 * hd :])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return h, c, (x, h_prev, c_prev, i, f, g, o, tc)

    def backward(self, gh, gc, cache):
        x, h_prev, c_prev, i, f, g, o, tc = cache
        go = gh * tc
        gc_total = gc + gh * o * (1.0 - tc * tc)
        gf = gc_total * c_prev
        gi = gc_total * g
        gg = gc_total * i
        gc_prev = gc_total * f
        d_i = gi * i * (1.0 - i)
        d_f = gf * f * (1.0 - f)
        d_g = gg * (1.0 - g * g)
        d_o = go * o * (1.0 - o)
        dgates = np.concatenate([d_i, d_f, d_g, d_o], axis=-1)
        self.g_wx += x.reshape(-1, x.shape[-1]).T @ dgates.reshape(-1, dgates.shape[-1])
        self.g_wh += h_prev.reshape(-1, h_prev.shape[-1]).T @ dgates.reshape(
            -1, dgates.shape[-1]
        )
        self.g_b += dgates.reshape(-1, dgates.shape[-1]).sum(axis=0)
        gx = dgates @ self.wx.T
        gh_prev = dgates @ self.wh.T
        return gx, gh_prev, gc_prev


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to the parameter arrays in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InputError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Checkpoint format "L2W1"

CKPT_MAGIC = b"L2W1"
CKPT_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write named f32 tensors: magic, u32 version, u32 count, then per tensor
    u32 name length + UTF-8 name, u32 rank, u32 extents, f32-LE payload."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise InputError(f"{path}: not an L2W1 checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4")
            if data.size != n:
                raise InputError(f"{path}: truncated tensor {name}")
            tensors[name] = data.reshape(shape).copy()
    return tensors
