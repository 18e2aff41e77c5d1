"""Neural network operations on Tensors.

Shape convention: the last two axes are (position, channel). Every op accepts
an optional leading batch axis, so (L, C) and (B, L, C) both work. Weights are
never batched.

Convolution weights are laid out (k, C_in, C_out); depthwise weights (k, C).
Output lengths:

    conv1d            L_out = floor((L + 2*pad - k) / stride) + 1
    conv_transpose1d  L_out = (L - 1)*stride - 2*pad + k + output_pad
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, GeometryError, ShapeError
from .tensor import Parameter, Tensor, concat

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pad_positions(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[-2] = (pad, pad)
    return np.pad(x, width)


# ---------------------------------------------------------------------------
# linear / convolutional layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-row affine map: y[..., l, j] = sum_i x[..., l, i] w[i, j] + b[j]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match weight shape {w.shape}")
    return x @ w + b


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D cross-correlation over the position axis, zero padded."""
    if w.data.ndim != 3:
        raise ShapeError(f"conv1d: weight must be (k, C_in, C_out), got {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {b.shape} does not match weight shape {w.shape}")
    if stride < 1 or pad < 0:
        raise GeometryError(f"conv1d: invalid stride={stride} pad={pad}")
    length = x.shape[-2]
    l_out = (length + 2 * pad - k) // stride + 1
    if length + 2 * pad < k or l_out < 1:
        raise GeometryError(
            f"conv1d: output length {l_out} < 1 for L={length} k={k} stride={stride} pad={pad}"
        )

    xp = _pad_positions(x.data, pad)
    span = (l_out - 1) * stride + 1
    y = np.zeros(x.shape[:-2] + (l_out, c_out), dtype=x.dtype)
    for m in range(k):
        y += xp[..., m:m + span:stride, :] @ w.data[m]
    y += b.data
    out = Tensor(y, (x, w, b))

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for m in range(k):
            sl = xp[..., m:m + span:stride, :]
            gxp[..., m:m + span:stride, :] += g @ w.data[m].T
            gw[m] = sl.reshape(-1, c_in).T @ g.reshape(-1, c_out)
        gx = gxp[..., pad:pad + length, :] if pad else gxp
        x.accumulate(gx)
        w.accumulate(gw)
        b.accumulate(g.reshape(-1, c_out).sum(axis=0))

    out._backward = bw
    return out


def conv_transpose1d(
    x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0, output_pad: int = 0
) -> Tensor:
    """Transposed 1-D convolution (upsampling adjoint of conv1d)."""
    if w.data.ndim != 3:
        raise ShapeError(f"conv_transpose1d: weight must be (k, C_in, C_out), got {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(
            f"conv_transpose1d: input shape {x.shape} does not match weight shape {w.shape}"
        )
    if b.shape != (c_out,):
        raise ShapeError(
            f"conv_transpose1d: bias shape {b.shape} does not match weight shape {w.shape}"
        )
    if stride < 1 or pad < 0:
        raise GeometryError(f"conv_transpose1d: invalid stride={stride} pad={pad}")
    if not 0 <= output_pad < stride:
        raise GeometryError(f"conv_transpose1d: output_pad={output_pad} must be < stride={stride}")
    length = x.shape[-2]
    l_out = (length - 1) * stride - 2 * pad + k + output_pad
    if l_out < 1:
        raise GeometryError(
            f"conv_transpose1d: output length {l_out} < 1 for L={length} k={k} "
            f"stride={stride} pad={pad} output_pad={output_pad}"
        )

    # scatter into a full buffer, then crop `pad` from the left edge
    l_full = (length - 1) * stride + k + output_pad
    span = (length - 1) * stride + 1
    y_full = np.zeros(x.shape[:-2] + (l_full, c_out), dtype=x.dtype)
    for m in range(k):
        y_full[..., m:m + span:stride, :] += x.data @ w.data[m]
    y = y_full[..., pad:pad + l_out, :] + b.data
    out = Tensor(y, (x, w, b))

    def bw(g):
        g_full = np.zeros(x.shape[:-2] + (l_full, c_out), dtype=g.dtype)
        g_full[..., pad:pad + l_out, :] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for m in range(k):
            sl = g_full[..., m:m + span:stride, :]
            gx += sl @ w.data[m].T
            gw[m] = x.data.reshape(-1, c_in).T @ sl.reshape(-1, c_out)
        x.accumulate(gx)
        w.accumulate(gw)
        b.accumulate(g.reshape(-1, c_out).sum(axis=0))

    out._backward = bw
    return out


def dwconv1d(x: Tensor, w: Tensor, b: Tensor, pad: int | None = None) -> Tensor:
    """Depthwise conv: each channel filtered independently, stride 1,
    pad = k // 2 so the length is preserved. k must be odd."""
    if w.data.ndim != 2:
        raise ShapeError(f"dwconv1d: weight must be (k, C), got {w.shape}")
    k, c = w.shape
    if k % 2 != 1:
        raise GeometryError(f"dwconv1d: kernel size must be odd, got k={k}")
    if pad is None:
        pad = k // 2
    elif pad != k // 2:
        raise GeometryError(f"dwconv1d: pad must be k//2={k // 2} to preserve length, got {pad}")
    if x.shape[-1] != c:
        raise ShapeError(f"dwconv1d: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (c,):
        raise ShapeError(f"dwconv1d: bias shape {b.shape} does not match weight shape {w.shape}")
    length = x.shape[-2]

    xp = _pad_positions(x.data, pad)
    y = np.zeros_like(x.data)
    for m in range(k):
        y += xp[..., m:m + length, :] * w.data[m]
    y += b.data
    out = Tensor(y, (x, w, b))

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for m in range(k):
            gxp[..., m:m + length, :] += g * w.data[m]
            gw[m] = (g * xp[..., m:m + length, :]).reshape(-1, c).sum(axis=0)
        gx = gxp[..., pad:pad + length, :] if pad else gxp
        x.accumulate(gx)
        w.accumulate(gw)
        b.accumulate(g.reshape(-1, c).sum(axis=0))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    # clamp-free stable form: exp of -|x| never overflows
    xd = x.data
    pos = xd >= 0
    e = np.exp(np.where(pos, -xd, xd))
    s = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    out = Tensor(s, (x,))
    out._backward = lambda g: x.accumulate(g * s * (1.0 - s))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    out = Tensor(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,))
    out._backward = lambda g: x.accumulate(g * mask)
    return out


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, no tanh shortcut)."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor((xd * phi).astype(x.dtype, copy=False), (x,))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        x.accumulate(g * (phi + xd * pdf))

    out._backward = bw
    return out


def swish(x: Tensor, beta: Tensor) -> Tensor:
    """x * sigmoid(beta * x); beta is a learnable scalar and receives gradient."""
    if beta.data.size != 1:
        raise ShapeError(f"swish: beta must be a scalar, got shape {beta.shape}")
    bval = float(beta.data.reshape(-1)[0])
    xd = x.data
    z = bval * xd
    pos = z >= 0
    e = np.exp(np.where(pos, -z, z))
    s = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    out = Tensor(xd * s, (x, beta))

    def bw(g):
        sp = s * (1.0 - s)  # sigma'(beta x)
        x.accumulate(g * (s + xd * sp * bval))
        gb = (g * xd * xd * sp).sum()
        beta.accumulate(np.full_like(beta.data, gb))

    out._backward = bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y.astype(x.dtype, copy=False), (x,))

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate(y * (g - dot))

    out._backward = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the channel axis per position, then apply affine gain/bias."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match channels {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor((xhat * gain.data + bias.data).astype(x.dtype, copy=False), (x, gain, bias))

    def bw(g):
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        x.accumulate(inv * (gx_hat - m1 - xhat * m2))
        gain.accumulate((g * xhat).reshape(-1, c).sum(axis=0))
        bias.accumulate(g.reshape(-1, c).sum(axis=0))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# attention / gating / losses
# ---------------------------------------------------------------------------

def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shapes {a.shape} and {b.shape} differ")
    return a * b


def mhsa(x: Tensor, heads: int, wq: list, wk: list, wv: list, wo: Tensor) -> Tensor:
    """Multi-head self-attention with per-head projection matrices.

    Each head computes softmax(Q K^T / sqrt(d_k)) V with d_k = C / heads;
    head outputs are concatenated over channels and mixed by wo. No positional
    encoding, so the op is permutation-equivariant over positions.
    """
    c = x.shape[-1]
    if heads < 1 or c % heads != 0:
        raise ConfigError(f"mhsa: channels {c} not divisible by heads {heads}")
    if not (len(wq) == len(wk) == len(wv) == heads):
        raise ConfigError(
            f"mhsa: expected {heads} projection triples, got {len(wq)}/{len(wk)}/{len(wv)}"
        )
    d_k = c // heads
    scale = 1.0 / np.sqrt(d_k)
    outs = []
    for i in range(heads):
        q = x @ wq[i]
        k = x @ wk[i]
        v = x @ wv[i]
        scores = (q @ k.transpose_last2()) * scale
        attn = softmax(scores, axis=-1)
        outs.append(attn @ v)
    merged = outs[0] if heads == 1 else concat(outs, axis=-1)
    return merged @ wo


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target))

    def bw(g):
        scaled = (2.0 / n) * diff * g
        pred.accumulate(scaled)
        target.accumulate(-scaled)

    out._backward = bw
    return out
