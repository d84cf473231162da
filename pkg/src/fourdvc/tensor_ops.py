"""Dense layers with explicit forward/backward passes.

Tensors are plain numpy arrays (row-major, NCHW for images).  Each layer owns
its parameters, lazily allocated gradient buffers and whatever it cached
during the last forward call.  Only the layers needed by the mesh and texture
autoencoders exist here.

Layers run in whatever float dtype they were built with: float32 for training
and inference, float64 for gradient checks.
"""

import struct
import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BatchSizeError, FormatError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_shape(w1, h1, in_channels, out_channels, kernel, stride, padding):
    """Output (W2, H2, D2) of a strided convolution; refuses to floor."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError("need kernel >= 1, stride >= 1, padding >= 0")
    out = []
    for name, size in (("width", w1), ("height", h1)):
        span = size - kernel + 2 * padding
        if span < 0 or span % stride:
            raise ShapeError(f"{name} {size}: ({size} - {kernel} + 2*{padding}) "
                             f"is not a non-negative multiple of stride {stride}")
        out.append(span // stride + 1)
    return out[0], out[1], out_channels


def _init_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, training=False, cache=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        """Per-sample output shape (no batch axis) for a per-sample input shape."""
        return shape

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def _acc(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.grads.clear()
        return self

    def __repr__(self):
        return f"{type(self).__name__}()"


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["W"] = _init_uniform(rng, (n_in, n_out), n_in, dtype)
        self.params["b"] = _init_uniform(rng, (n_out,), n_in, dtype)

    def forward(self, x, training=False, cache=True):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"linear expects (batch, {self.n_in}), got {x.shape}")
        if cache:
            self._cache = x
        y = x @ self.params["W"]
        y += self.params["b"]
        return y

    def backward(self, grad):
        x = self._cache
        self._acc("W", x.T @ grad)
        self._acc("b", grad.sum(axis=0))
        return grad @ self.params["W"].T

    def output_shape(self, shape):
        if tuple(shape) != (self.n_in,):
            raise ShapeError(f"linear expects ({self.n_in},), got {tuple(shape)}")
        return (self.n_out,)

    def __repr__(self):
        return f"Linear({self.n_in}, {self.n_out})"


class BatchNorm(Layer):
    """Normalizes each feature (2-D input) or channel (4-D input) over the batch."""

    kind = "batchnorm"

    def __init__(self, features, dtype=np.float32, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.features, self.eps, self.momentum = features, eps, momentum
        self.params["gamma"] = np.ones(features, dtype)
        self.params["beta"] = np.zeros(features, dtype)
        self.buffers["running_mean"] = np.zeros(features, dtype)
        self.buffers["running_var"] = np.ones(features, dtype)

    def _axes(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, training=False, cache=True):
        axes, bshape = self._axes(x)
        if x.shape[1] != self.features:
            raise ShapeError(f"batchnorm over {self.features} features, got {x.shape}")
        gamma = self.params["gamma"].reshape(bshape)
        beta = self.params["beta"].reshape(bshape)
        if training:
            if x.shape[0] < 2:
                raise BatchSizeError("batch norm needs a batch of at least 2 in training mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.features
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - self.momentum
            rm += self.momentum * mean
            rv *= 1 - self.momentum
            rv += self.momentum * var * (m / (m - 1))
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        if cache:
            self._cache = (xhat, inv_std, training)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std, training = self._cache
        axes, bshape = self._axes(grad)
        self._acc("gamma", (grad * xhat).sum(axis=axes))
        self._acc("beta", grad.sum(axis=axes))
        g = grad * self.params["gamma"].reshape(bshape)
        if not training:
            return g * inv_std.reshape(bshape)
        m = grad.size // self.features
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return (g - g_mean - xhat * gx_mean) * inv_std.reshape(bshape)

    def __repr__(self):
        return f"BatchNorm({self.features})"


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x):
    # tanh expressed through the logistic function
    return 2.0 * sigmoid(2.0 * x) - 1.0


class Activation(Layer):
    kind = "activation"
    NAMES = ("sigmoid", "tanh", "relu", "leaky_relu")

    def __init__(self, name, slope=0.2):
        super().__init__()
        if name not in self.NAMES:
            raise ValueError(f"unknown activation {name!r}")
        if name == "leaky_relu" and not 0 < slope < 1:
            raise ValueError("leaky_relu slope must lie in (0, 1)")
        self.name, self.slope = name, slope

    def forward(self, x, training=False, cache=True):
        if self.name == "sigmoid":
            y = sigmoid(x)
        elif self.name == "tanh":
            y = tanh(x)
        elif self.name == "relu":
            y = np.maximum(x, 0)
        else:
            y = np.where(x >= 0, x, x * x.dtype.type(self.slope))
        if cache:
            self._cache = (x, y)
        return y

    def backward(self, grad):
        x, y = self._cache
        if self.name == "sigmoid":
            return grad * y * (1 - y)
        if self.name == "tanh":
            return grad * (1 - y * y)
        if self.name == "relu":
            return grad * (x > 0)
        return grad * np.where(x >= 0, 1, self.slope).astype(grad.dtype)

    def __repr__(self):
        return f"Activation({self.name!r})" if self.name != "leaky_relu" else f"LeakyReLU({self.slope})"


class Conv2d(Layer):
    """Cross-correlation with zero padding; weights (K, C, F, F)."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=4, stride=2, padding=1,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        self.params["W"] = _init_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.params["b"] = _init_uniform(rng, (out_channels,), fan_in, dtype)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        w2, h2, d2 = conv_output_shape(w, h, c, self.out_channels, self.kernel, self.stride, self.padding)
        return (d2, h2, w2)

    def _windows(self, x):
        p, f, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        return sliding_window_view(xp, (f, f), axis=(2, 3))[:, :, ::s, ::s]  # (B,C,H2,W2,F,F)

    def forward(self, x, training=False, cache=True):
        if x.ndim != 4:
            raise ShapeError(f"conv expects (B, C, H, W), got {x.shape}")
        self.output_shape(x.shape[1:])
        win = self._windows(x)
        y = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))  # (B,H2,W2,K)
        y = y.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        if cache:
            self._cache = (x.shape, win)
        return np.ascontiguousarray(y)

    def backward(self, grad):
        shape, win = self._cache
        p, f, s = self.padding, self.kernel, self.stride
        self._acc("W", np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3])))
        self._acc("b", grad.sum(axis=(0, 2, 3)))
        dcols = np.tensordot(grad, self.params["W"], axes=([1], [0]))  # (B,H2,W2,C,F,F)
        b, c, h, w = shape
        h2, w2 = grad.shape[2], grad.shape[3]
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(f):
            for j in range(f):
                dxp[:, :, i:i + s * h2:s, j:j + s * w2:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]

    def __repr__(self):
        return (f"Conv2d({self.in_channels}, {self.out_channels}, F={self.kernel}, "
                f"S={self.stride}, P={self.padding})")


class ConvTranspose2d(Layer):
    """Adjoint of :class:`Conv2d` with the same (F, S, P); weights (C_in, C_out, F, F)."""

    kind = "transconv"

    def __init__(self, in_channels, out_channels, kernel=4, stride=2, padding=1,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel // (stride * stride)
        self.params["W"] = _init_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype)
        self.params["b"] = _init_uniform(rng, (out_channels,), fan_in, dtype)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"transposed conv expects {self.in_channels} channels, got {c}")
        f, s, p = self.kernel, self.stride, self.padding
        h2, w2 = (h - 1) * s + f - 2 * p, (w - 1) * s + f - 2 * p
        if h2 < 1 or w2 < 1:
            raise ShapeError(f"transposed conv output {h2}x{w2} is empty")
        return (self.out_channels, h2, w2)

    def forward(self, x, training=False, cache=True):
        if x.ndim != 4:
            raise ShapeError(f"transposed conv expects (B, C, H, W), got {x.shape}")
        _, h2, w2 = self.output_shape(x.shape[1:])
        f, s, p = self.kernel, self.stride, self.padding
        b, _, h, w = x.shape
        cols = np.tensordot(x, self.params["W"], axes=([1], [0]))  # (B,H,W,Co,F,F)
        out = np.zeros((b, self.out_channels, h2 + 2 * p, w2 + 2 * p), dtype=x.dtype)
        for i in range(f):
            for j in range(f):
                out[:, :, i:i + s * h:s, j:j + s * w:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        y = out[:, :, p:p + h2, p:p + w2] + self.params["b"][None, :, None, None]
        if cache:
            self._cache = x
        return np.ascontiguousarray(y)

    def backward(self, grad):
        x = self._cache
        f, s, p = self.kernel, self.stride, self.padding
        gp = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p))) if p else grad
        win = sliding_window_view(gp, (f, f), axis=(2, 3))[:, :, ::s, ::s]  # (B,Co,H,W,F,F)
        self._acc("W", np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3])))
        self._acc("b", grad.sum(axis=(0, 2, 3)))
        dx = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))  # (B,H,W,Ci)
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))

    def __repr__(self):
        return (f"ConvTranspose2d({self.in_channels}, {self.out_channels}, F={self.kernel}, "
                f"S={self.stride}, P={self.padding})")


def maxpool2d_forward(x):
    """2x2 / stride 2 max pool.  Ties go to the first window entry in row-major order."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even spatial dims, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool2d_backward(grad, idx):
    b, c, h2, w2 = grad.shape
    win = np.zeros((b, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
    return win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)


class MaxPool2d(Layer):
    kind = "maxpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pool needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, training=False, cache=True):
        y, idx = maxpool2d_forward(x)
        if cache:
            self._cache = idx
        return y

    def backward(self, grad):
        return maxpool2d_backward(grad, self._cache)

    def __repr__(self):
        return "MaxPool2d(2, 2)"


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(shape)} to {self.shape}")
        return self.shape

    def forward(self, x, training=False, cache=True):
        if cache:
            self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._cache)

    def __repr__(self):
        return f"Reshape{self.shape}"


class Sequential:
    def __init__(self, layers=()):
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x, training=False, cache=True):
        for layer in self.layers:
            x = layer.forward(x, training, cache)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape


# ---------------------------------------------------------------- gradient check

def grad_check(loss_fn, inputs, analytic, eps=1e-5):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` must recompute the scalar loss from the arrays in ``inputs``,
    which are perturbed in place one coordinate at a time and restored.
    """
    worst = 0.0
    for x, g in zip(inputs, analytic):
        flat = x.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"VCWT"
CKPT_VERSION = 1


def save_checkpoint(state):
    """Serialize an ordered ``name -> array`` mapping to VCWT bytes.

    Layout (little-endian): magic, u32 version, u32 count, then per entry
    u16 name length, UTF-8 name, u8 ndim, u32 dims, float32 payload; a trailing
    u32 CRC32 covers everything before it and doubles as the model fingerprint.
    """
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_fingerprint(blob):
    return struct.unpack_from("<I", blob, len(blob) - 4)[0]


def load_checkpoint(blob):
    blob = bytes(blob)
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise FormatError("not a VCWT checkpoint")
    crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off, end, state = 12, len(blob) - 4, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > end:
                raise FormatError("truncated checkpoint payload")
            state[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy()
            off += size
    except struct.error:
        raise FormatError("truncated checkpoint") from None
    if off != end:
        raise FormatError("trailing bytes in checkpoint")
    return state
