"""Activation + discretization of encoder features into {-1, +1}.

A binarizer is the composition ``b(sigma(e))``: ``sigma`` squashes the
encoder output into [-1, 1] and ``b`` thresholds (or samples) to +-1.
Gradients pass straight through ``b`` wherever ``-1 <= z <= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import BinresError, ConfigError, ShapeError

__all__ = [
    "BinarizerKind",
    "GumbelConfig",
    "Binarizer",
    "activate",
    "activate_backward",
    "binarize_forward",
    "binarize_backward",
    "binarize_surrogate",
    "anneal_temperature",
    "gumbel_noise",
]

_U_CLAMP = 1e-12
_CONTRACT_TOL = 1e-6


class BinarizerKind(str, Enum):
    HARDTANH = "hardtanh"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    STOCHASTIC = "stochastic"
    GUMBEL = "gumbel"

    @classmethod
    def parse(cls, name) -> "BinarizerKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        if key == "gumbel_sigmoid":
            key = "gumbel"
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown binarizer {name!r}; expected one of {[k.value for k in cls]}") from None


@dataclass
class GumbelConfig:
    tau_initial: float = 1.0
    anneal_factor: float = 0.97
    tau_floor: float = 0.3
    tau: Optional[float] = None

    def __post_init__(self):
        if self.tau is None:
            self.tau = self.tau_initial
        if not (self.tau_floor > 0 and 0 < self.anneal_factor < 1 and self.tau_initial > 0):
            raise ConfigError(f"invalid Gumbel schedule {self}")
        self.tau = max(self.tau, self.tau_floor)


def anneal_temperature(cfg: GumbelConfig, epoch: int) -> float:
    """Set and return ``tau = max(floor, tau_initial * factor**epoch)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    cfg.tau = max(cfg.tau_floor, cfg.tau_initial * cfg.anneal_factor ** epoch)
    return cfg.tau


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def _sigm(x):
    # exp overflow gives inf and 1 / (1 + inf) == 0, the correct limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def activate(e: np.ndarray, kind, mode: str = "eval", tau: float = 1.0,
             rng: Optional[np.random.Generator] = None,
             noise: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Map encoder output into [-1, 1].  Returns ``(z, cache)``.

    For the Gumbel variant in train mode two independent Gumbel(0, 1) draws
    ``g_k, g_l`` per element perturb the logit; ``noise`` overrides the draw.
    Eval mode uses zero noise.
    """
    kind = BinarizerKind.parse(kind)
    if not np.all(np.isfinite(e)):
        raise BinresError("activate: non-finite encoder output")
    if kind is BinarizerKind.HARDTANH:
        z = np.clip(e, -1.0, 1.0)
        return z, (kind, (np.abs(e) <= 1.0).astype(e.dtype))
    if kind in (BinarizerKind.TANH, BinarizerKind.STOCHASTIC):
        z = np.tanh(e)
        return z, (kind, 1.0 - z * z)
    if kind is BinarizerKind.SIGMOID:
        s = _sigm(e)
        return 2.0 * (s - 0.5), (kind, 2.0 * s * (1.0 - s))
    # gumbel-sigmoid
    if noise is not None:
        gk, gl = noise
    elif mode == "train":
        if rng is None:
            raise BinresError("gumbel activation in train mode needs a seeded rng")
        gk, gl = gumbel_noise(rng, e.shape), gumbel_noise(rng, e.shape)
    else:
        gk = gl = 0.0
    s = _sigm((e + gk - gl) / tau).astype(e.dtype, copy=False)
    return 2.0 * (s - 0.5), (kind, 2.0 * s * (1.0 - s) / tau)


def activate_backward(dz: np.ndarray, cache) -> np.ndarray:
    _, dsigma = cache
    return dz * dsigma


def binarize_forward(z: np.ndarray, kind, mode: str = "eval",
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Discretize ``z`` in [-1, 1] to exactly +-1.

    Deterministic variants return +1 iff ``z >= 0``.  The stochastic variant
    in train mode returns +1 with probability ``(1 + z) / 2``; in eval mode it
    thresholds like the rest.
    """
    kind = BinarizerKind.parse(kind)
    if z.size and (z.min() < -1 - _CONTRACT_TOL or z.max() > 1 + _CONTRACT_TOL):
        raise BinresError(f"binarize_forward: values outside [-1, 1] (min {z.min()}, max {z.max()})")
    if kind is BinarizerKind.STOCHASTIC and mode == "train":
        if rng is None:
            raise BinresError("stochastic binarization in train mode needs a seeded rng")
        # +1 with probability (1 + z) / 2; z = 1 and z = -1 are certain
        u = rng.random(z.shape)
        return np.where(u < (1.0 + z) / 2.0, 1.0, -1.0).astype(z.dtype)
    return np.where(z >= 0, 1.0, -1.0).astype(z.dtype)


def binarize_surrogate(z: np.ndarray) -> np.ndarray:
    """Piecewise-linear stand-in for the discretization: clip(z, -1, 1)."""
    return np.clip(z, -1.0, 1.0)


def binarize_backward(grad_out: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Straight-through: pass the gradient where -1 <= z <= 1, zero elsewhere."""
    if grad_out.shape != z.shape:
        raise ShapeError(f"binarize_backward: grad shape {grad_out.shape} != z shape {z.shape}")
    return grad_out * ((z >= -1.0) & (z <= 1.0))


class Binarizer:
    """The full ``B = b o sigma`` with its straight-through backward.

    ``surrogate=True`` swaps the discretization for the piecewise-linear
    ``clip(z, -1, 1)`` whose derivative is the straight-through mask.  The
    resulting forward is differentiable, which is what finite-difference
    checks need.
    """

    def __init__(self, kind, gumbel: Optional[GumbelConfig] = None, surrogate: bool = False):
        self.kind = BinarizerKind.parse(kind)
        self.gumbel = gumbel or GumbelConfig()
        self.surrogate = surrogate

    def forward(self, e: np.ndarray, mode: str = "eval", rng: Optional[np.random.Generator] = None):
        z, act_cache = activate(e, self.kind, mode, tau=self.gumbel.tau, rng=rng)
        if self.surrogate:
            b = binarize_surrogate(z)
        else:
            b = binarize_forward(z, self.kind, mode, rng)
        return b, (z, act_cache)

    def backward(self, grad_b: np.ndarray, cache) -> np.ndarray:
        z, act_cache = cache
        return activate_backward(binarize_backward(grad_b, z), act_cache)
