"""Dense N-D tensors with reverse-mode automatic differentiation.

Minimal engine backing the classifier: NCHW convolution (stride, padding,
dilation), batch norm, activations, softmax, pooling, affine maps, concat,
and dropout.  float32 is the working precision; build everything in
float64 when verifying gradients against finite differences.

Backward closures recompute cheap intermediates (column matrices,
normalized activations) from their parents instead of caching them, so
graph memory stays proportional to the activations themselves.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None and isinstance(data, (np.ndarray, np.generic)):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=dtype or np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse accumulation from a scalar output into every leaf grad."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def parameter(data, name: str) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _needs_graph(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _needs_graph(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g) if g.base is not None else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g.reshape((1,) * a.ndim), a.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    total = tsum(a, axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(total, 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x); the gate is recomputed in backward to save memory."""
    out_data = a.data / (1.0 + np.exp(-a.data))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-a.data))
        _accum(a, g * (sig + out_data * (1.0 - sig)))

    return _make(out_data, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    widths = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, w in zip(tensors, widths):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + w)
            _accum(t, g[tuple(sl)])
            start += w

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Affine map: x [B, N_in] @ weight.T [N_in, N_out] (+ bias)."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear dim mismatch: input {x.shape} vs weight {weight.shape}"
        )
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data

    def backward(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    """Column matrix [C*kh*kw, B*out_h*out_w] ready for one large GEMM."""
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = xp[
                :,
                :,
                i * dilation : i * dilation + stride * out_h : stride,
                j * dilation : j * dilation + stride * out_w : stride,
            ]
            cols[:, i, j] = tap.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * out_h * out_w)


def _col2im(gcols, b, c, hp, wp, kh, kw, stride, dilation, out_h, out_w):
    g6 = gcols.reshape(c, kh, kw, b, out_h, out_w)
    xp = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[
                :,
                :,
                i * dilation : i * dilation + stride * out_h : stride,
                j * dilation : j * dilation + stride * out_w : stride,
            ] += g6[:, i, j].transpose(1, 0, 2, 3)
    return xp


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor = None,
    stride: int = 1,
    padding=(0, 0),
    dilation: int = 1,
) -> Tensor:
    """Zero-padded cross-correlation, NCHW layout.

    Lowered to one large GEMM over the im2col matrix; the column matrix is
    kept alive for the backward pass when a gradient is needed.
    """
    b, c_in, h, w = x.shape
    c_out, c_k, kh, kw = kernel.shape
    if c_k != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input has {c_in} channels, kernel expects {c_k} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    ph, pw = padding
    out_h = conv_output_size(h, kh, stride, ph, dilation)
    out_w = conv_output_size(w, kw, stride, pw, dilation)
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}, dilation {dilation}"
        )
    if ph or pw:
        xp = np.zeros((b, c_in, h + 2 * ph, w + 2 * pw), dtype=x.data.dtype)
        xp[:, :, ph : ph + h, pw : pw + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    w2 = kernel.data.reshape(c_out, -1)
    out_data = (
        np.matmul(w2, cols)
        .reshape(c_out, b, out_h, out_w)
        .transpose(1, 0, 2, 3)
        .copy()
    )
    if bias is not None:
        out_data += bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        go = g.transpose(1, 0, 2, 3).reshape(c_out, b * out_h * out_w)
        if kernel.requires_grad:
            _accum(kernel, (go @ cols.T).reshape(kernel.shape))
        if x.requires_grad:
            gcols = w2.T @ go
            gxp = _col2im(
                gcols, b, c_in, h + 2 * ph, w + 2 * pw, kh, kw, stride, dilation,
                out_h, out_w,
            )
            _accum(x, gxp[:, :, ph : ph + h, pw : pw + w])
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_data, parents, backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    Training mode normalizes with biased batch statistics and updates the
    running arrays in place; eval mode normalizes with the running stats.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm parameter length must equal {c} channels")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) / std.reshape(shape)
    out_data = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        gx_hat = g * gamma.data.reshape(shape)
        if training:
            mean_g = gx_hat.mean(axis=axes).reshape(shape)
            mean_gx = (gx_hat * xhat).mean(axis=axes).reshape(shape)
            _accum(x, (gx_hat - mean_g - xhat * mean_gx) / std.reshape(shape))
        else:
            _accum(x, gx_hat / std.reshape(shape))

    return _make(out_data, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B, C, H, W] -> [B, C]."""
    b, c, h, w = x.shape

    def backward(g):
        _accum(x, np.broadcast_to(g.reshape(b, c, 1, 1), x.shape) / (h * w))

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        _accum(x, g * keep)

    return _make(x.data * keep, (x,), backward)
