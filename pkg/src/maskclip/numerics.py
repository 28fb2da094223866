"""Dense float64 array math shared by the encoder, RMA and training code.

Every function here is pure. Forward ops that have a hand-written backward
come in pairs (``conv2d`` / ``conv2d_backward`` and so on) so the training
module can chain them without an autodiff engine.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """Raised when an operation would hand back NaN or Inf."""


class FullyMaskedRowError(ValueError):
    def __init__(self, row: int):
        super().__init__(f"attention row {row} has every entry masked out")
        self.row = row


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row softmax over the last axis where ``mask`` True means "masked out".

    Masked entries come back as exact zeros. Leading axes (e.g. heads) are
    broadcast against a 2-D mask.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.zeros(logits.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    full = mask.all(axis=-1)
    if full.any():
        idx = np.argwhere(full)[0]
        raise FullyMaskedRowError(int(idx[-1]))
    shifted = np.where(mask, -np.inf, logits)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, 0.0, np.exp(shifted))
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given ``probs`` = softmax(logits) along the last axis."""
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit_clamped(p: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Inverse sigmoid of ``p`` clamped to [eps, 1 - eps]."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(q) - np.log1p(-q)


def shift_in_logit_space(p: np.ndarray, residual: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """``sigmoid(logit_clamped(p, eps) + residual)`` evaluated in odds form.

    Writing it as ``q / (q + (1 - q) * exp(-residual))`` with ``q`` the clamped
    input gives back ``q`` bit-for-bit when the residual is zero, which the
    sigmoid/log round trip does not.
    """
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    with np.errstate(over="ignore"):
        return q / (q + (1.0 - q) * np.exp(-np.asarray(residual, dtype=np.float64)))


def logit_clamped_backward(p: np.ndarray, grad: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    inside = (p > eps) & (p < 1.0 - eps)
    safe = np.where(inside, p, 0.5)
    return np.where(inside, grad / (safe * (1.0 - safe)), 0.0)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad * (cdf + x * pdf)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize over the last axis. Returns ``(y, (xhat, rstd))``; the cache feeds the backward."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layer_norm_backward(grad: np.ndarray, cache, gamma: np.ndarray) -> np.ndarray:
    xhat, rstd = cache
    g = grad * gamma
    return rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise NonFiniteError("cannot L2-normalize a zero vector")
    return x / n


def l2_normalize_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / n
    return (grad - y * (grad * y).sum(axis=-1, keepdims=True)) / n


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    hp, wp = h + 2 * padding - k, w + 2 * padding - k
    if hp < 0 or wp < 0 or hp % stride or wp % stride:
        raise ValueError(
            f"conv geometry {h}x{w}, kernel {k}, stride {stride}, padding {padding} does not tile evenly"
        )
    return hp // stride + 1, wp // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # B, Cin, H', W', k, k


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlation of ``x`` [Cin, H, W] (or [B, Cin, H, W]) with ``kernel`` [Cout, Cin, k, k]."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    cout, cin, k, k2 = kernel.shape
    if k != k2 or x.shape[1] != cin:
        raise ValueError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    _conv_geometry(x.shape[2], x.shape[3], k, stride, padding)
    win = _windows(x, k, stride, padding)
    out = np.einsum("bchwij,ocij->bohw", win, kernel, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out if batched else out[0]


def conv2d_backward(
    grad: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    need_input_grad: bool = True,
):
    """Gradients of ``conv2d`` w.r.t. (input, kernel, bias); input grad is None if not requested."""
    batched = x.ndim == 4
    if not batched:
        x, grad = x[None], grad[None]
    k = kernel.shape[-1]
    win = _windows(x, k, stride, padding)
    d_kernel = np.einsum("bohw,bchwij->ocij", grad, win, optimize=True)
    d_bias = grad.sum(axis=(0, 2, 3))
    d_x = None
    if need_input_grad:
        b, cin, h, w = x.shape
        ho, wo = grad.shape[2], grad.shape[3]
        d_pad = np.zeros((b, cin, h + 2 * padding, w + 2 * padding))
        for i in range(k):
            for j in range(k):
                d_pad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                    "bohw,oc->bchw", grad, kernel[:, :, i, j], optimize=True
                )
        d_x = d_pad[:, :, padding : padding + h, padding : padding + w]
        if not batched:
            d_x = d_x[0]
    return d_x, d_kernel, d_bias


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, negative source coordinates clamped to 0
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[o, i0] += 1.0 - lam
        a[o, i1] += lam
    return a


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with align_corners=False bilinear interpolation."""
    x = np.asarray(x, dtype=np.float64)
    ah = _interp_matrix(x.shape[-2], out_h)
    aw = _interp_matrix(x.shape[-1], out_w)
    return ah @ x @ aw.T


def bilinear_resize_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    ah = _interp_matrix(in_h, grad.shape[-2])
    aw = _interp_matrix(in_w, grad.shape[-1])
    return ah.T @ grad @ aw


def finite_diff_grad(fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
