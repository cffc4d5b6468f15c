"""Dense layer math with hand-written backward passes.

Every layer is a pair ``*_forward(x, ...) -> (out, cache)`` and
``*_backward(dout, cache) -> grads``.  Activations are numpy arrays laid
out as (N, C, H, W); a 3-d (C, H, W) input is accepted by the forward
functions and promoted to a batch of one.

Layers are dtype-generic: they compute in whatever float width the input
and parameters carry.  The model runs in float32; the gradient checker
re-runs everything in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BinresError, ShapeError

__all__ = [
    "ConvParams",
    "BatchNormParams",
    "AdamState",
    "Adam",
    "init_conv",
    "init_batchnorm",
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu_forward",
    "relu_backward",
    "subpixel_shuffle",
    "subpixel_unshuffle",
    "adam_step",
    "finite_diff_check",
    "GradCheckReport",
    "NonDeterministicError",
]


def _as_batch(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected a (C, H, W) or (N, C, H, W) array, got shape {x.shape}")
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, stride: int = 1,
              padding: int = 1, kernel: int = 3, dtype=np.float32) -> ConvParams:
    """He-uniform weights in +-sqrt(6 / fan_in), zero bias."""
    fan_in = in_ch * kernel * kernel
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel)).astype(dtype)
    return ConvParams(w, np.zeros(out_ch, dtype=dtype), stride, padding)


def init_batchnorm(ch: int, dtype=np.float32) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(ch, dtype=dtype),
        beta=np.zeros(ch, dtype=dtype),
        running_mean=np.zeros(ch, dtype=dtype),
        running_var=np.ones(ch, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, params: ConvParams):
    x = _as_batch(x)
    w, b, s, p = params.weight, params.bias, params.stride, params.padding
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input shape {x.shape} has {c} channels but weight shape {w.shape} expects {ci}")
    if h + 2 * p < kh or wd + 2 * p < kw:
        raise ShapeError(f"conv2d: input shape {x.shape} with padding {p} is smaller than kernel {w.shape}")
    if s < 1 or p < 0:
        raise ShapeError(f"conv2d: invalid stride {s} / padding {p}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    # (N, C, Ho, Wo, kh, kw) view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, win, params)


def conv2d_backward(dout: np.ndarray, cache):
    """Returns (dx, dweight, dbias)."""
    x_shape, win, params = cache
    w, s, p = params.weight, params.stride, params.padding
    n, c, h, wd = x_shape
    _, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, mode: str = "train"):
    """Per-channel batch norm.  Train mode updates the running stats in place."""
    x = _as_batch(x)
    ch = x.shape[1]
    if params.gamma.shape != (ch,):
        raise ShapeError(f"batchnorm: input shape {x.shape} does not match {params.gamma.shape[0]} channels")
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError(f"batchnorm: train mode needs >= 2 values per channel, input shape {x.shape}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = params.momentum
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * var * (count / (count - 1))
    elif mode == "eval":
        mean = params.running_mean
        var = params.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    return out, (xhat, inv_std, params.gamma, mode)


def batchnorm_backward(dout: np.ndarray, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, mode = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / count) * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# relu / sub-pixel
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(dout: np.ndarray, cache):
    # gradient at exactly 0 is 0
    return dout * (cache > 0)


def subpixel_shuffle(x: np.ndarray) -> np.ndarray:
    """(N, 4C, h, w) -> (N, C, 2h, 2w).

    Output pixel (2y+dy, 2x+dx) of channel c reads input channel c*4 + dy*2 + dx.
    """
    squeeze = x.ndim == 3
    x = _as_batch(x)
    n, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"subpixel_shuffle: channel count {c4} (shape {x.shape}) is not divisible by 4")
    c = c4 // 4
    out = x.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * h, 2 * w)
    return out[0] if squeeze else out


def subpixel_unshuffle(x: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`subpixel_shuffle`; also its backward pass."""
    squeeze = x.ndim == 3
    x = _as_batch(x)
    n, c, h2, w2 = x.shape
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"subpixel_unshuffle: spatial dims of {x.shape} must be even")
    h, w = h2 // 2, w2 // 2
    out = x.reshape(n, c, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h, w)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.  Returns new (param, state); inputs are untouched."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape} differ")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    new = param - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new.astype(param.dtype, copy=False), new_state


class Adam:
    """Adam over a dict of named parameter arrays, updated in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.states = {k: AdamState.zeros_like(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for k, p in params.items()}

    @property
    def lr(self) -> float:
        return next(iter(self.states.values())).lr

    @lr.setter
    def lr(self, value: float) -> None:
        for st in self.states.values():
            st.lr = value

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            new, self.states[k] = adam_step(p, grads[k], self.states[k])
            p[...] = new


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class NonDeterministicError(BinresError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    @property
    def flagged(self) -> Dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if v >= self.tolerance}


def finite_diff_check(loss_and_grads: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
                      params: Dict[str, np.ndarray], h: float = 1e-4, tolerance: float = 1e-3,
                      max_per_param: Optional[int] = None, seed: int = 0,
                      floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_and_grads(params)`` must return ``(loss, {name: grad})`` and be a
    pure function of ``params``.  Parameters are copied to float64 first.
    The relative error of one coordinate is ``|a - n| / max(|a| + |n|, floor)``,
    so a backward scaled by 2 shows up as 1/3.
    """
    wide = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss0, analytic = loss_and_grads(wide)
    loss1, _ = loss_and_grads(wide)
    if loss0 != loss1:
        raise NonDeterministicError(f"forward is not deterministic: {loss0!r} != {loss1!r}")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in wide.items():
        idx_all = np.arange(p.size)
        if max_per_param is not None and p.size > max_per_param:
            idx_all = np.sort(rng.choice(p.size, size=max_per_param, replace=False))
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        flat = p.reshape(-1)
        worst = 0.0
        for i in idx_all:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grads(wide)
            flat[i] = orig - h
            lm, _ = loss_and_grads(wide)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            err = abs(a[i] - num) / max(abs(a[i]) + abs(num), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked[name] = len(idx_all)
    return report
