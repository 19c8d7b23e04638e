"""Minimal differentiable layer set for the vocoder networks.

Tensors are plain numpy arrays: feature maps are (C, T) or (B, C, T) for
1-D layers and (C, H, W) or (B, C, H, W) for 2-D layers, float32 for
training and float64 for gradient checks.  Every layer is a pure pair of
functions, ``*_forward`` and ``*_backward``; the backward pass is the exact
adjoint of the forward, derived by hand.  Networks chain these manually
(recording whatever the adjoint needs during the forward pass) instead of
going through a general autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


@dataclass
class Parameter:
    """Trainable array plus its gradient and Adam moment accumulators."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = field(default=0, init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params):
    for p in params:
        p.zero_grad()


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    """Fan-in-scaled uniform init, bound = 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# pointwise activations
# ---------------------------------------------------------------------------


def _alpha_col(alpha, x):
    alpha = np.asarray(alpha)
    if alpha.ndim != 1 or x.ndim < 2 or alpha.shape[0] != x.shape[-2]:
        raise ValueError(
            f"alpha has shape {alpha.shape} but x has {x.shape[-2] if x.ndim >= 2 else '?'} channels"
        )
    if np.any(alpha <= 0):
        raise ValueError("snake alpha must be strictly positive")
    return alpha[:, None]


def snake_forward(x, alpha):
    """Periodic snake activation y = x + sin^2(alpha*x)/alpha, per channel.

    With alpha = 1 this is exactly x + sin^2(x).  ``alpha`` is a 1-D array
    matching the channel axis (second to last) of ``x``.
    """
    a = _alpha_col(alpha, x)
    return x + np.square(np.sin(a * x)) / a


def snake_backward(x, alpha, upstream):
    """Adjoint of snake_forward: returns (grad_x, grad_alpha)."""
    a = _alpha_col(alpha, x)
    ax = 2.0 * a * x
    np.sin(ax, out=ax)  # ax now holds sin(2*a*x)
    grad_x = upstream * (1.0 + ax)
    # d/da [x + sin^2(ax)/a] = x*sin(2ax)/a - sin^2(ax)/a^2,
    # with sin^2(ax) recovered from the snake identity y - x
    sin_sq = np.square(np.sin(a * x))
    d_alpha = upstream * ((x * ax - sin_sq / a) / a)
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
    return grad_x, d_alpha.sum(axis=axes)


def leaky_relu_forward(x, slope=0.1):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x, upstream, slope=0.1):
    return np.where(x >= 0, upstream, slope * upstream)


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(x, upstream):
    y = np.tanh(x)
    return upstream * (1.0 - y * y)


# ---------------------------------------------------------------------------
# 1-D convolution (cross-correlation, explicit zero padding)
# ---------------------------------------------------------------------------


def _conv1d_cols(xp, kernel, stride, dilation, groups):
    """im2col view of padded input: (G, Cg*K, B*To) contiguous copy."""
    B, C, Tp = xp.shape
    K = kernel
    To = (Tp - dilation * (K - 1) - 1) // stride + 1
    sB, sC, sT = xp.strides
    Cg = C // groups
    v = as_strided(
        xp,
        shape=(groups, Cg, K, B, To),
        strides=(sC * Cg, sC, sT * dilation, sB, sT * stride),
    )
    return np.ascontiguousarray(v.reshape(groups, Cg * K, B * To)), To


def conv1d_forward(x, w, b=None, stride=1, dilation=1, padding=0, groups=1):
    """1-D convolution of x (C_in, T) or (B, C_in, T) with w (C_out, C_in/g, K).

    Output time length is floor((T + 2*pad - dilation*(K-1) - 1)/stride) + 1;
    raises if that is < 1.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, C, T = x.shape
    O, Cg, K = w.shape
    if C != Cg * groups or O % groups:
        raise ValueError(f"weight shape {w.shape} incompatible with {C} input channels, groups={groups}")
    To = (T + 2 * padding - dilation * (K - 1) - 1) // stride + 1
    if To < 1:
        raise ValueError(f"input too short: T={T} with pad={padding}, K={K}, dilation={dilation} leaves no output")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    cols, To = _conv1d_cols(xp, K, stride, dilation, groups)
    Og = O // groups
    y = np.matmul(w.reshape(groups, Og, Cg * K), cols)  # (G, Og, B*To)
    y = y.reshape(O, B, To).transpose(1, 0, 2)
    if b is not None:
        y = y + b[:, None]
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


def conv1d_backward(x, w, upstream, stride=1, dilation=1, padding=0, groups=1):
    """Adjoint of conv1d_forward: returns (grad_x, grad_w, grad_b)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
        upstream = upstream[None]
    B, C, T = x.shape
    O, Cg, K = w.shape
    Og = O // groups
    _, _, To = upstream.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    cols, _ = _conv1d_cols(xp, K, stride, dilation, groups)
    gy = upstream.transpose(1, 0, 2).reshape(groups, Og, B * To)

    grad_w = np.matmul(gy, cols.transpose(0, 2, 1)).reshape(O, Cg, K)
    grad_b = upstream.sum(axis=(0, 2))

    if stride == 1 and groups == 1 and dilation * (K - 1) >= padding:
        # full correlation with the flipped, transposed kernel is a plain conv
        w_t = np.ascontiguousarray(w.transpose(1, 0, 2)[:, :, ::-1])
        grad_x = conv1d_forward(upstream, w_t, dilation=dilation, padding=dilation * (K - 1) - padding)
        grad_x = grad_x[..., :T]
    else:
        # scatter grad into padded input: per-tap slice adds
        gcols = np.matmul(w.reshape(groups, Og, Cg * K).transpose(0, 2, 1), gy)
        gcols = gcols.reshape(C, K, B, To)
        gxp = np.zeros_like(xp)
        span = stride * (To - 1) + 1
        for k in range(K):
            start = k * dilation
            gxp[:, :, start : start + span : stride] += gcols[:, k].transpose(1, 0, 2)
        grad_x = gxp[:, :, padding : padding + T] if padding else gxp
        grad_x = np.ascontiguousarray(grad_x)
    if squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# 1-D transposed convolution
# ---------------------------------------------------------------------------


def conv_transpose1d_forward(x, w, b=None, stride=1, padding=0):
    """Transposed 1-D convolution: x (C_in, T) or (B, C_in, T), w (C_in, C_out, K).

    This is the adjoint of conv1d_forward with the same (stride, padding),
    expressed as a forward op.  Output length is (T-1)*stride - 2*pad + K.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, C, T = x.shape
    Ci, Co, K = w.shape
    if Ci != C:
        raise ValueError(f"weight expects {Ci} input channels, got {C}")
    if K < stride:
        raise ValueError(f"kernel size {K} shorter than stride {stride} would leave unfilled output samples")
    Lfull = (T - 1) * stride + K
    L = Lfull - 2 * padding
    # tmp[o, k, b, t] = sum_i w[i, o, k] * x[b, i, t]
    tmp = np.tensordot(w, x, axes=([0], [1]))
    yfull = np.zeros((B, Co, Lfull), dtype=x.dtype)
    span = stride * (T - 1) + 1
    for k in range(K):
        yfull[:, :, k : k + span : stride] += tmp[:, k].transpose(1, 0, 2)
    y = yfull[:, :, padding : padding + L]
    if b is not None:
        y = y + b[:, None]
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


def conv_transpose1d_backward(x, w, upstream, stride=1, padding=0):
    """Adjoint of conv_transpose1d_forward: returns (grad_x, grad_w, grad_b)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
        upstream = upstream[None]
    B, C, T = x.shape
    Ci, Co, K = w.shape
    gyp = np.pad(upstream, ((0, 0), (0, 0), (padding, padding))) if padding else upstream
    sB, sC, sT = gyp.strides
    # gys[o, k, b, t] = gyp[b, o, t*stride + k]
    gys = as_strided(gyp, shape=(Co, K, B, T), strides=(sC, sT, sB, sT * stride))
    grad_x = np.tensordot(w, gys, axes=([1, 2], [0, 1])).transpose(1, 0, 2)
    grad_w = np.tensordot(x, gys, axes=([0, 2], [2, 3]))
    grad_b = upstream.sum(axis=(0, 2))
    if squeeze:
        grad_x = grad_x[0]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# 2-D convolution
# ---------------------------------------------------------------------------


def conv2d_forward(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """2-D convolution of x (C, H, W) or (B, C, H, W) with w (O, C, Kh, Kw)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    B, C, H, W = x.shape
    O, C2, Kh, Kw = w.shape
    if C2 != C:
        raise ValueError(f"weight expects {C2} input channels, got {C}")
    sh, sw = stride
    ph, pw = padding
    Ho = (H + 2 * ph - Kh) // sh + 1
    Wo = (W + 2 * pw - Kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"input too small: {(H, W)} with kernel {(Kh, Kw)}, pad {padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    sB, sC, sH, sW = xp.strides
    v = as_strided(
        xp,
        shape=(C, Kh, Kw, B, Ho, Wo),
        strides=(sC, sH, sW, sB, sH * sh, sW * sw),
    )
    cols = np.ascontiguousarray(v.reshape(C * Kh * Kw, B * Ho * Wo))
    y = (w.reshape(O, -1) @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b[:, None, None]
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


def conv2d_backward(x, w, upstream, stride=(1, 1), padding=(0, 0)):
    """Adjoint of conv2d_forward: returns (grad_x, grad_w, grad_b)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        upstream = upstream[None]
    B, C, H, W = x.shape
    O, _, Kh, Kw = w.shape
    sh, sw = stride
    ph, pw = padding
    _, _, Ho, Wo = upstream.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    sB, sC, sH, sW = xp.strides
    v = as_strided(
        xp,
        shape=(C, Kh, Kw, B, Ho, Wo),
        strides=(sC, sH, sW, sB, sH * sh, sW * sw),
    )
    cols = np.ascontiguousarray(v.reshape(C * Kh * Kw, B * Ho * Wo))
    gy = upstream.transpose(1, 0, 2, 3).reshape(O, -1)

    grad_w = (gy @ cols.T).reshape(w.shape)
    grad_b = upstream.sum(axis=(0, 2, 3))

    gcols = (w.reshape(O, -1).T @ gy).reshape(C, Kh, Kw, B, Ho, Wo)
    gxp = np.zeros_like(xp)
    span_h = sh * (Ho - 1) + 1
    span_w = sw * (Wo - 1) + 1
    for kh in range(Kh):
        for kw in range(Kw):
            gxp[:, :, kh : kh + span_h : sh, kw : kw + span_w : sw] += gcols[:, kh, kw].transpose(1, 0, 2, 3)
    grad_x = gxp[:, :, ph : ph + H, pw : pw + W] if ph or pw else gxp
    if squeeze:
        grad_x = grad_x[0]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(p: Parameter, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction; zeroes the grad afterwards."""
    p.step_count += 1
    t = p.step_count
    p.adam_m[...] = beta1 * p.adam_m + (1.0 - beta1) * p.grad
    p.adam_v[...] = beta2 * p.adam_v + (1.0 - beta2) * np.square(p.grad)
    m_hat = p.adam_m / (1.0 - beta1**t)
    v_hat = p.adam_v / (1.0 - beta2**t)
    p.value[...] = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    p.zero_grad()
