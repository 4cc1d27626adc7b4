"""Dense 4-D tensors and layer kernels with tape-recorded backward passes.

Layout is (batch, channels, height, width), float64, row-major. Every
forward kernel optionally appends one OpRecord to a Tape; backward_pass
consumes the tape in reverse and accumulates gradients into the
participating tensors. Convolution is cross-correlation (no kernel flip)
and output extents must divide exactly: (H + 2*pad - k) % stride == 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, NumericError, ShapeError, StateError

__all__ = [
    "Tensor",
    "OpRecord",
    "Tape",
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "pool2d",
    "upsample2d_nearest",
    "dense",
    "activation",
    "add",
    "mul",
    "cross_entropy",
    "backward_pass",
    "grad_check",
]


class Tensor:
    """4-D (N, C, H, W) float64 array with an optional same-shape gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (N,C,H,W), got shape {arr.shape}")
        self.data = arr
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def copy(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


@dataclass
class OpRecord:
    """One recorded forward call: op id, input tensors, output, saved intermediates."""

    op: str
    inputs: tuple
    output: Tensor
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered log of OpRecords for one forward pass."""

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)


def _as_tensor(x, what):
    if isinstance(x, Tensor):
        return x
    raise ShapeError(f"{what} must be a Tensor, got {type(x).__name__}")


def _finite(arr, op):
    # a finite sum implies all-finite entries (NaN/inf propagate through +),
    # and one reduction is much cheaper than isfinite() over the whole array
    if not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():
            return  # pathological cancellation of huge finite values
        raise NumericError(f"{op} produced non-finite values")


def _record(tape, op, inputs, out, **ctx):
    _finite(out.data, op)
    if tape is not None:
        tape.append(OpRecord(op, inputs, out, ctx))
    return out


def _out_extent(extent, k, stride, pad, axis, op):
    span = extent + 2 * pad - k
    if span < 0:
        raise ConfigError(f"{op}: kernel {k} exceeds padded input {axis} {extent + 2 * pad}")
    if span % stride != 0:
        raise ConfigError(
            f"{op}: non-integral output {axis}: ({extent}+2*{pad}-{k})/{stride}+1 is not an integer"
        )
    return span // stride + 1


def _pad_hw(arr, pad):
    if pad == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _check_conv_args(stride, pad, op):
    if stride < 1:
        raise ConfigError(f"{op}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ConfigError(f"{op}: pad must be >= 0, got {pad}")


def _bias_vec(b, cout, op):
    if b is None:
        return None
    b = _as_tensor(b, f"{op} bias")
    if b.size != cout:
        raise ShapeError(f"{op}: bias has {b.size} values, expected {cout}")
    return b


# ---------------------------------------------------------------------------
# convolution family


def conv2d(x, w, b=None, stride=1, pad=0, tape=None):
    """Standard cross-correlation, weight (out_ch, in_ch, k, k)."""
    x = _as_tensor(x, "conv2d input")
    w = _as_tensor(w, "conv2d weight")
    _check_conv_args(stride, pad, "conv2d")
    n, cin, h, wid = x.shape
    cout, win, kh, kw = w.shape
    if kh != kw:
        raise ConfigError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if win != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {win}")
    b = _bias_vec(b, cout, "conv2d")
    ho = _out_extent(h, kh, stride, pad, "height", "conv2d")
    wo = _out_extent(wid, kw, stride, pad, "width", "conv2d")

    xp = _pad_hw(x.data, pad)
    cols = _im2col(xp, kh, stride, ho, wo)
    out = cols @ w.data.reshape(cout, -1).T
    if b is not None:
        out += b.data.reshape(-1)
    out = Tensor(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)
    return _record(tape, "conv2d", inputs, out, xp=xp, k=kh, stride=stride, pad=pad)


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _conv2d_backward(rec, g):
    x, w = rec.inputs[0], rec.inputs[1]
    xp, k, stride, pad = rec.ctx["xp"], rec.ctx["k"], rec.ctx["stride"], rec.ctx["pad"]
    n, cout, ho, wo = rec.output.shape
    cin = x.shape[1]

    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
    cols = _im2col(xp, k, stride, ho, wo)
    _accum(w, (gmat.T @ cols).reshape(w.shape))
    if len(rec.inputs) == 3:
        _accum(rec.inputs[2], g.sum(axis=(0, 2, 3)).reshape(rec.inputs[2].shape))

    dcols = gmat @ w.data.reshape(cout, -1)
    # one contiguous relayout, then k*k strided adds of contiguous blocks
    dcols = np.ascontiguousarray(
        dcols.reshape(n, ho, wo, cin, k, k).transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + (ho - 1) * stride + 1 : stride,
                kj : kj + (wo - 1) * stride + 1 : stride] += dcols[ki, kj]
    _accum(x, dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp)


def depthwise_conv2d(x, w, b=None, stride=1, pad=0, tape=None):
    """Per-channel convolution, weight (ch, 1, k, k)."""
    x = _as_tensor(x, "depthwise input")
    w = _as_tensor(w, "depthwise weight")
    _check_conv_args(stride, pad, "depthwise_conv2d")
    n, c, h, wid = x.shape
    wc, one, kh, kw = w.shape
    if one != 1 or kh != kw:
        raise ShapeError(f"depthwise weight must be (C,1,k,k), got {w.shape}")
    if wc != c:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels but weight has {wc}")
    b = _bias_vec(b, c, "depthwise_conv2d")
    ho = _out_extent(h, kh, stride, pad, "height", "depthwise_conv2d")
    wo = _out_extent(wid, kw, stride, pad, "width", "depthwise_conv2d")

    xp = _pad_hw(x.data, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,cij->nchw", win, w.data[:, 0])
    if b is not None:
        out += b.data.reshape(1, c, 1, 1)
    out = Tensor(out)
    inputs = (x, w) if b is None else (x, w, b)
    return _record(tape, "depthwise_conv2d", inputs, out, xp=xp, k=kh, stride=stride, pad=pad)


def _shift(xp, ki, kj, stride, ho, wo):
    return xp[:, :, ki : ki + (ho - 1) * stride + 1 : stride, kj : kj + (wo - 1) * stride + 1 : stride]


def _depthwise_backward(rec, g):
    x, w = rec.inputs[0], rec.inputs[1]
    xp, k, stride, pad = rec.ctx["xp"], rec.ctx["k"], rec.ctx["stride"], rec.ctx["pad"]
    ho, wo = rec.output.shape[2:]

    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    _accum(w, np.einsum("nchwij,nchw->cij", win, g)[:, None])
    if len(rec.inputs) == 3:
        _accum(rec.inputs[2], g.sum(axis=(0, 2, 3)).reshape(rec.inputs[2].shape))

    if stride == 1:
        # dx is the correlation of g with the flipped kernel at complementary padding
        gp = _pad_hw(g, k - 1)
        gwin = sliding_window_view(gp, (k, k), axis=(2, 3))
        wflip = w.data[:, 0, ::-1, ::-1]
        dxp = np.einsum("nchwij,cij->nchw", gwin, wflip)
        _accum(x, dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp)
        return
    dxp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + (ho - 1) * stride + 1 : stride,
                kj : kj + (wo - 1) * stride + 1 : stride] += w.data[:, 0, ki, kj][None, :, None, None] * g
    _accum(x, dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp)


def pointwise_conv2d(x, w, b=None, tape=None):
    """1x1 convolution (per-pixel channel mixing), weight (out_ch, in_ch, 1, 1)."""
    x = _as_tensor(x, "pointwise input")
    w = _as_tensor(w, "pointwise weight")
    n, cin, h, wid = x.shape
    cout, win, kh, kw = w.shape
    if kh != 1 or kw != 1:
        raise ShapeError(f"pointwise weight must be (out,in,1,1), got {w.shape}")
    if win != cin:
        raise ShapeError(f"pointwise_conv2d: input has {cin} channels but weight expects {win}")
    b = _bias_vec(b, cout, "pointwise_conv2d")

    # batched GEMM straight in NCHW layout: (cout,cin) @ (n,cin,h*w)
    out = np.matmul(w.data[:, :, 0, 0], x.data.reshape(n, cin, h * wid)).reshape(n, cout, h, wid)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)
    out = Tensor(out)
    inputs = (x, w) if b is None else (x, w, b)
    return _record(tape, "pointwise_conv2d", inputs, out)


def _pointwise_backward(rec, g):
    x, w = rec.inputs[0], rec.inputs[1]
    n, cin, h, wid = x.shape
    cout = w.shape[0]
    g2 = g.reshape(n, cout, h * wid)
    x2 = x.data.reshape(n, cin, h * wid)
    _accum(w, np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None])
    if len(rec.inputs) == 3:
        _accum(rec.inputs[2], g.sum(axis=(0, 2, 3)).reshape(rec.inputs[2].shape))
    _accum(x, np.matmul(w.data[:, :, 0, 0].T, g2).reshape(x.shape))


# ---------------------------------------------------------------------------
# pooling / resampling


def pool2d(x, kind, window=2, stride=2, tape=None):
    """Max pooling (exact tiling, window == stride) or global average pooling."""
    x = _as_tensor(x, "pool2d input")
    n, c, h, w = x.shape
    if kind == "global-avg":
        out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
        return _record(tape, "global_avg_pool", (x,), out, hw=h * w, in_shape=x.shape)
    if kind != "max":
        raise ConfigError(f"pool2d: unknown kind {kind!r}")
    if window != stride:
        raise ConfigError(f"pool2d(max): requires window == stride, got {window}/{stride}")
    if window < 1:
        raise ConfigError(f"pool2d(max): window must be >= 1, got {window}")
    if h % window or w % window:
        raise ConfigError(f"pool2d(max): {h}x{w} input does not tile with window {window}")
    ho, wo = h // window, w // window
    tiles = x.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    tiles = np.ascontiguousarray(tiles).reshape(n, c, ho, wo, window * window)
    idx = tiles.argmax(axis=-1)
    out = Tensor(np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0])
    return _record(tape, "max_pool", (x,), out, idx=idx, window=window, in_shape=x.shape)


def _max_pool_backward(rec, g):
    x = rec.inputs[0]
    idx, window = rec.ctx["idx"], rec.ctx["window"]
    n, c, h, w = rec.ctx["in_shape"]
    ho, wo = h // window, w // window
    dtiles = np.zeros((n, c, ho, wo, window * window))
    np.put_along_axis(dtiles, idx[..., None], g[..., None], axis=-1)
    dx = dtiles.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    _accum(x, dx)


def _global_avg_backward(rec, g):
    x = rec.inputs[0]
    dx = np.empty(rec.ctx["in_shape"])
    dx[...] = g / rec.ctx["hw"]
    _accum(x, dx)


def upsample2d_nearest(x, factor, tape=None):
    """Replicate every pixel factor x factor."""
    x = _as_tensor(x, "upsample input")
    if factor < 1:
        raise ConfigError(f"upsample2d_nearest: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    rep = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor))
    out = Tensor(rep.reshape(n, c, h * factor, w * factor))
    return _record(tape, "upsample_nearest", (x,), out, factor=factor)


def _upsample_backward(rec, g):
    x = rec.inputs[0]
    f = rec.ctx["factor"]
    n, c, h, w = x.shape
    _accum(x, g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)))


# ---------------------------------------------------------------------------
# dense / activations / elementwise


def dense(x, w, b=None, tape=None):
    """Affine map per batch row; input (N,C,H,W) is flattened, weight (out, in, 1, 1)."""
    x = _as_tensor(x, "dense input")
    w = _as_tensor(w, "dense weight")
    n = x.shape[0]
    fan_in = x.size // n
    dout, din = w.shape[0], w.shape[1]
    if w.shape[2] != 1 or w.shape[3] != 1:
        raise ShapeError(f"dense weight must be (out,in,1,1), got {w.shape}")
    if din != fan_in:
        raise ShapeError(f"dense: flattened input length {fan_in} != weight in-features {din}")
    b = _bias_vec(b, dout, "dense")

    flat = x.data.reshape(n, fan_in)
    out = flat @ w.data.reshape(dout, din).T
    if b is not None:
        out += b.data.reshape(-1)
    out = Tensor(out.reshape(n, dout, 1, 1))
    inputs = (x, w) if b is None else (x, w, b)
    return _record(tape, "dense", inputs, out)


def _dense_backward(rec, g):
    x, w = rec.inputs[0], rec.inputs[1]
    n = x.shape[0]
    dout, din = w.shape[0], w.shape[1]
    gmat = g.reshape(n, dout)
    flat = x.data.reshape(n, din)
    _accum(w, (gmat.T @ flat).reshape(w.shape))
    if len(rec.inputs) == 3:
        _accum(rec.inputs[2], gmat.sum(axis=0).reshape(rec.inputs[2].shape))
    _accum(x, (gmat @ w.data.reshape(dout, din)).reshape(x.shape))


ACTIVATION_KINDS = ("relu", "sigmoid", "softmax-rows")


def activation(kind, x, tape=None):
    """relu, sigmoid, or softmax-rows (the latter on (N,K,1,1) logits)."""
    x = _as_tensor(x, "activation input")
    if kind == "relu":
        out = Tensor(np.maximum(x.data, 0.0))
        return _record(tape, "relu", (x,), out, mask=x.data > 0)
    if kind == "sigmoid":
        out = Tensor(_stable_sigmoid(x.data))
        return _record(tape, "sigmoid", (x,), out, y=out.data)
    if kind == "softmax-rows":
        n, k, h, w = x.shape
        if h != 1 or w != 1:
            raise ShapeError(f"softmax-rows expects (N,K,1,1) logits, got {x.shape}")
        z = x.data.reshape(n, k)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        s = e / e.sum(axis=1, keepdims=True)
        out = Tensor(s.reshape(x.shape))
        return _record(tape, "softmax_rows", (x,), out, s=s)
    raise ConfigError(f"activation: unknown kind {kind!r}")


def _stable_sigmoid(z):
    t = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _relu_backward(rec, g):
    _accum(rec.inputs[0], g * rec.ctx["mask"])


def _sigmoid_backward(rec, g):
    y = rec.ctx["y"]
    _accum(rec.inputs[0], g * y * (1.0 - y))


def _softmax_backward(rec, g):
    x = rec.inputs[0]
    s = rec.ctx["s"]
    g2 = g.reshape(s.shape)
    dz = s * (g2 - (g2 * s).sum(axis=1, keepdims=True))
    _accum(x, dz.reshape(x.shape))


def add(a, b, tape=None):
    """Elementwise sum of two same-shape tensors (residual join)."""
    a = _as_tensor(a, "add lhs")
    b = _as_tensor(b, "add rhs")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(tape, "add", (a, b), out)


def _add_backward(rec, g):
    _accum(rec.inputs[0], g)
    _accum(rec.inputs[1], g.copy())  # may not hand the same array to both


def mul(a, b, tape=None):
    """Elementwise product; b may broadcast (e.g. per-channel (1,C,1,1) scale)."""
    a = _as_tensor(a, "mul lhs")
    b = _as_tensor(b, "mul rhs")
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes not broadcastable {a.shape} vs {b.shape}") from exc
    if out_data.shape != a.shape:
        raise ShapeError(f"mul: rhs {b.shape} must broadcast into lhs {a.shape}")
    out = Tensor(out_data)
    return _record(tape, "mul", (a, b), out)


def _sum_to_shape(g, shape):
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _mul_backward(rec, g):
    a, b = rec.inputs
    _accum(a, _sum_to_shape(g * b.data, a.shape))
    _accum(b, _sum_to_shape(g * a.data, b.shape))


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch, via log-sum-exp.

    Returns (loss, grad) where grad = (softmax - onehot) / N shaped like the
    logits tensor; it is the seed for backward_pass.
    """
    logits = _as_tensor(logits, "cross_entropy logits")
    n, k, h, w = logits.shape
    if h != 1 or w != 1:
        raise ShapeError(f"cross_entropy expects (N,K,1,1) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"cross_entropy: expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DataError(f"cross_entropy: labels must lie in [0,{k})")
    labels = labels.astype(np.int64)

    z = logits.data.reshape(n, k)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(denom[:, 0])
    loss = float((lse - z[np.arange(n), labels]).mean())

    grad = e / denom
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.reshape(logits.shape)


# ---------------------------------------------------------------------------
# backward machinery


_BACKWARD = {
    "conv2d": _conv2d_backward,
    "depthwise_conv2d": _depthwise_backward,
    "pointwise_conv2d": _pointwise_backward,
    "max_pool": _max_pool_backward,
    "global_avg_pool": _global_avg_backward,
    "upsample_nearest": _upsample_backward,
    "dense": _dense_backward,
    "relu": _relu_backward,
    "sigmoid": _sigmoid_backward,
    "softmax_rows": _softmax_backward,
    "add": _add_backward,
    "mul": _mul_backward,
}


def _accum(t, g):
    # callers must hand over exclusively-owned, writable arrays: the first
    # gradient is adopted as-is and later contributions are added in place
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def backward_pass(tape, output, loss_grad):
    """Propagate loss_grad through the tape, populating .grad on every input.

    Records are consumed (the tape is cleared); calling without a preceding
    forward pass raises StateError.
    """
    if tape is None or not tape.records:
        raise StateError("backward_pass called with an empty tape (no forward pass recorded)")
    g = np.array(loss_grad, dtype=np.float64)  # private copy; _accum mutates grads in place
    if g.shape != output.shape:
        raise ShapeError(f"loss grad shape {g.shape} != output shape {output.shape}")
    output.grad = g
    for rec in reversed(tape.records):
        up = rec.output.grad
        if up is None:
            continue
        _BACKWARD[rec.op](rec, up)
    tape.records.clear()


def grad_check(build_fn, wrt, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    build_fn(tape) must re-run the same graph fragment on the current values
    of the tensors in `wrt` and return the output tensor; the probe objective
    is the sum of output elements. Intended for 64-bit toy shapes (<= 8 per
    extent).
    """
    tape = Tape()
    for t in wrt:
        t.zero_grad()
    out = build_fn(tape)
    backward_pass(tape, out, np.ones_like(out.data))
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in wrt]

    max_err = 0.0
    for t, ana in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(build_fn(None).data.sum())
            flat[i] = orig - eps
            fm = float(build_fn(None).data.sum())
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8)
            if err > max_err:
                max_err = err
    return max_err
