"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, direct definitions)
and shares no code with the library paths it checks.
"""

from __future__ import annotations

import numpy as np


def naive_dft(x: np.ndarray, n_fft: int = None) -> np.ndarray:
    """O(N^2) DFT straight from the definition."""
    x = np.asarray(x, dtype=np.complex128)
    n = len(x) if n_fft is None else n_fft
    out = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        acc = 0.0 + 0.0j
        for i in range(len(x)):
            acc += x[i] * np.exp(-2j * np.pi * k * i / n)
        out[k] = acc
    return out


def naive_conv2d(x, kernel, bias=None, stride=1, padding=(0, 0), dilation=1,
                 count_macs=False):
    """Loop convolution over an explicitly zero-padded input.

    Every kernel tap is multiplied at every output position (padded zeros
    included), so the MAC count matches the closed-form layer cost.
    """
    b, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    ph, pw = padding
    xp = np.zeros((b, c_in, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph : ph + h, pw : pw + w] = x
    out_h = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    out_w = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((b, c_out, out_h, out_w), dtype=np.float64)
    macs = 0
    for n in range(b):
        for co in range(c_out):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = 0.0
                    for ci in range(c_in):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (kernel[co, ci, i, j]
                                        * xp[n, ci, oh * stride + i * dilation,
                                             ow * stride + j * dilation])
                                macs += 1
                    if bias is not None:
                        acc += bias[co]
                    out[n, co, oh, ow] = acc
    if count_macs:
        return out, macs
    return out


def naive_linear(x, weight, bias=None, count_macs=False):
    """Loop affine map with an explicit multiply counter."""
    b, n_in = x.shape
    n_out = weight.shape[0]
    out = np.zeros((b, n_out), dtype=np.float64)
    macs = 0
    for i in range(b):
        for o in range(n_out):
            acc = 0.0
            for k in range(n_in):
                acc += x[i, k] * weight[o, k]
                macs += 1
            if bias is not None:
                acc += bias[o]
            out[i, o] = acc
    if count_macs:
        return out, macs
    return out


def _catmull_rom(x: float) -> float:
    a = -0.5
    x = abs(x)
    if x <= 1.0:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2.0:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def naive_bicubic_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct per-pixel 4x4 Catmull-Rom evaluation, corner-aligned, edge-clamped."""
    src_h, src_w = image.shape

    def positions(src, dst):
        if dst == 1:
            return np.array([(src - 1) / 2.0])
        return np.arange(dst) * (src - 1) / (dst - 1)

    ys, xs = positions(src_h, out_h), positions(src_w, out_w)
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            py, px = ys[oy], xs[ox]
            iy, ix = int(np.floor(py)), int(np.floor(px))
            acc = 0.0
            for dy in range(-1, 3):
                for dx in range(-1, 3):
                    sy = min(max(iy + dy, 0), src_h - 1)
                    sx = min(max(ix + dx, 0), src_w - 1)
                    acc += (image[sy, sx]
                            * _catmull_rom(py - (iy + dy))
                            * _catmull_rom(px - (ix + dx)))
            out[oy, ox] = acc
    return out


def finite_difference_gradients(loss_fn, params, h=1e-5, limit=None, rng=None):
    """Central finite differences of loss_fn() w.r.t. each parameter element.

    ``params`` maps names to Tensors whose .data is perturbed in place.
    With ``limit``, a seeded subset of element indices per parameter is
    checked instead of every element.  Yields
    (name, flat_index, fd_value, analytic_required) tuples via a dict of
    fd arrays keyed like params.
    """
    fd = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if limit is not None and flat.size > limit:
            indices = rng.choice(flat.size, size=limit, replace=False)
        grads = {}
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + h
            up = loss_fn()
            flat[idx] = original - h
            down = loss_fn()
            flat[idx] = original
            grads[int(idx)] = (up - down) / (2.0 * h)
        fd[name] = grads
    return fd


def max_relative_error(fd: dict, params: dict, floor: float = 1e-6):
    """Worst relative disagreement between fd entries and analytic grads.

    Relative error uses max(|fd|, |analytic|, floor) as denominator so that
    pure round-off noise around zero gradients does not register.
    """
    worst = 0.0
    worst_name = None
    for name, grads in fd.items():
        analytic = params[name].grad
        if analytic is None:
            raise AssertionError(f"{name} has no analytic gradient")
        flat = analytic.reshape(-1)
        for idx, fd_val in grads.items():
            denom = max(abs(fd_val), abs(float(flat[idx])), floor)
            err = abs(fd_val - float(flat[idx])) / denom
            if err > worst:
                worst, worst_name = err, (name, idx)
    return worst, worst_name
