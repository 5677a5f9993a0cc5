"""Dense float64 numeric core.

Tensors are plain ``numpy.ndarray`` objects in float64.  Feature maps are
``(C, H, W)`` with pixel centers at integer coordinates; ``x`` indexes
columns and ``y`` rows.  Only the handful of layers the detector needs are
here, each with a hand-written backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geom import Box


class NonFiniteError(FloatingPointError):
    pass


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN/Inf")
    return t


@dataclass
class FcLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent FC shapes {self.weights.shape} / {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None) -> "FcLayer":
        std = np.sqrt(2.0 / n_in) if std is None else std
        return cls(rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out))


def fc_forward(layer: FcLayer, x: np.ndarray) -> np.ndarray:
    """``y = W x + b`` for a vector or a ``(N, in)`` batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"FC expects inner dim {layer.n_in}, got {x.shape}")
    return x @ layer.weights.T + layer.bias


def fc_backward(layer: FcLayer, x: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_W, grad_b)`` for a batched forward."""
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    return (g2 @ layer.weights).reshape(np.shape(x)), g2.T @ x2, g2.sum(axis=0)


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(t, dtype=np.float64), 0.0)


def softmax2(logits) -> tuple:
    """Two-class softmax over the last axis; returns ``(p0, p1)``."""
    z = np.asarray(logits, dtype=np.float64)
    d = z[..., 1] - z[..., 0]
    e = np.exp(-np.abs(d))
    # logistic form, evaluated on the stable side for each sign of d
    big = 1.0 / (1.0 + e)
    small = e / (1.0 + e)
    p1 = np.where(d >= 0, big, small)
    p0 = np.where(d >= 0, small, big)
    if np.ndim(p1) == 0:
        return float(p0), float(p1)
    return p0, p1


def log_softmax2(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def smooth_l1(x):
    a = np.abs(x)
    out = np.where(a < 1.0, 0.5 * np.square(x), a - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


# -- bilinear sampling and RoIAlign ---------------------------------------------

def _bilinear(featmap: np.ndarray, xs: np.ndarray, ys: np.ndarray, with_grad: bool = False):
    """Sample ``(C, H, W)`` at arrays of points; returns ``(*xs.shape, C)``.

    Neighbors outside the map contribute zero.  With ``with_grad`` also
    returns the partial derivatives with respect to x and y.
    """
    c, h, w = featmap.shape
    # one cell of zero padding; corners further out are masked via their weights
    padded = np.zeros((h + 2, w + 2, c))
    padded[1:-1, 1:-1] = featmap.transpose(1, 2, 0)
    flat = padded.reshape(-1, c)
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = (xs - x0f)[..., None]
    fy = (ys - y0f)[..., None]
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    def corner(yi, xi):
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (np.clip(yi, -1, h) + 1) * (w + 2) + np.clip(xi, -1, w) + 1
        return flat[idx] * ok[..., None]

    v00 = corner(y0, x0)
    v01 = corner(y0, x0 + 1)
    v10 = corner(y0 + 1, x0)
    v11 = corner(y0 + 1, x0 + 1)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    val = top + fy * (bot - top)
    if not with_grad:
        return val
    dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = bot - top
    return val, dx, dy


def bilinear_sample(featmap: np.ndarray, x: float, y: float) -> np.ndarray:
    fm = np.asarray(featmap, dtype=np.float64)
    if fm.ndim == 2:
        fm = fm[None]
    return _bilinear(fm, np.array([float(x)]), np.array([float(y)]))[0]


def roi_sample_points(rois: np.ndarray, out_h: int, out_w: int, samples_per_bin: int):
    """Sample coordinates ``(N, out_h*s, out_w*s)`` for corner+size RoIs."""
    s = samples_per_bin
    fr_x = (np.arange(out_w * s) + 0.5) / (out_w * s)
    fr_y = (np.arange(out_h * s) + 0.5) / (out_h * s)
    xs = rois[:, 0:1] + fr_x[None, :] * rois[:, 2:3]
    ys = rois[:, 1:2] + fr_y[None, :] * rois[:, 3:4]
    xs = np.broadcast_to(xs[:, None, :], (len(rois), out_h * s, out_w * s))
    ys = np.broadcast_to(ys[:, :, None], (len(rois), out_h * s, out_w * s))
    return xs, ys


def _bin_mean(v: np.ndarray, out_h: int, out_w: int, s: int) -> np.ndarray:
    # v: (N, out_h*s, out_w*s, C) -> (N, C, out_h, out_w)
    n, c = v.shape[0], v.shape[-1]
    v = v.reshape(n, out_h, s, out_w, s, c).sum(axis=(2, 4)) * (1.0 / (s * s))
    return np.ascontiguousarray(v.transpose(0, 3, 1, 2))


def roi_align_batch(featmap: np.ndarray, rois: np.ndarray, out_h: int = 7, out_w: int = 7,
                    samples_per_bin: int = 2, with_grad: bool = False):
    """RoIAlign for ``(N, 4)`` RoIs in feature coordinates -> ``(N, C, out_h, out_w)``.

    With ``with_grad`` also returns the derivatives of every output bin with
    respect to translating the RoI along x and along y.
    """
    if out_h < 1 or out_w < 1 or samples_per_bin < 1:
        raise ValueError("pooled size and samples_per_bin must be >= 1")
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if np.any(rois[:, 2:] <= 0):
        raise ValueError("degenerate RoI (non-positive size)")
    xs, ys = roi_sample_points(rois, out_h, out_w, samples_per_bin)
    s = samples_per_bin
    if not with_grad:
        return _bin_mean(_bilinear(featmap, xs, ys), out_h, out_w, s)
    val, dx, dy = _bilinear(featmap, xs, ys, with_grad=True)
    return (_bin_mean(val, out_h, out_w, s), _bin_mean(dx, out_h, out_w, s),
            _bin_mean(dy, out_h, out_w, s))


def roi_align(featmap: np.ndarray, roi: Box, out_h: int = 7, out_w: int = 7,
              samples_per_bin: int = 2) -> np.ndarray:
    fm = np.asarray(featmap, dtype=np.float64)
    return roi_align_batch(fm, np.array([roi.as_list()]), out_h, out_w, samples_per_bin)[0]


# -- convolution stack --------------------------------------------------------

def conv2d_same(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Bias-free 'same' convolution (cross-correlation) of ``(Cin, H, W)``."""
    cout, cin, kh, kw = kernels.shape
    if x.shape[0] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[0]}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (Cin, H, W, kh, kw)
    return np.einsum("chwij,ocij->ohw", win, kernels, optimize=True)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, : h2 * 2, : w2 * 2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


# -- gradient checking --------------------------------------------------------

def grad_check(f: Callable[[np.ndarray], float], at: np.ndarray, analytic_grad: np.ndarray,
               eps: float = 1e-5, abs_floor: float = 1e-6) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f``.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(at, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} != point shape {x.shape}")
    flat = x.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), abs_floor)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
