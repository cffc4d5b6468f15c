"""Binary residual autoencoder: encoder, binarizer, decoder and training.

Encoder: L blocks of conv3x3/stride2 -> batchnorm -> ReLU, all with C
channels; the last block skips the ReLU and feeds the binarizer.
Decoder: L blocks of conv3x3/stride1 to 4C channels -> batchnorm -> ReLU
-> sub-pixel x2, then a conv3x3 projection to the input channels and tanh.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .binarizer import Binarizer, BinarizerKind, GumbelConfig, anneal_temperature
from .errors import BinresError, ConfigError, ShapeError

__all__ = [
    "AutoencoderConfig",
    "TrainConfig",
    "ResidualFrame",
    "ResidualAutoencoder",
    "TrainHistory",
    "reconstruction_loss",
    "train",
    "pad_to_multiple",
    "crop",
]


@dataclass
class AutoencoderConfig:
    L: int = 2
    C: int = 8
    input_channels: int = 3
    binarizer: BinarizerKind = BinarizerKind.HARDTANH
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)

    def __post_init__(self):
        self.binarizer = BinarizerKind.parse(self.binarizer)
        if self.L < 1 or self.C < 1 or self.input_channels < 1:
            raise ConfigError(f"L, C and input_channels must be >= 1: {self}")

    @property
    def factor(self) -> int:
        return 2 ** self.L

    def latent_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        return (self.C, height // self.factor, width // self.factor)

    def latent_bits(self, height: int, width: int) -> int:
        """Binary map size C*W*H / 2^(2L) for dims divisible by 2^L."""
        c, h, w = self.latent_shape(height, width)
        return c * h * w

    @property
    def bits_per_pixel(self) -> float:
        """Raw latent bits per pixel, before entropy coding."""
        return self.C / 4 ** self.L


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_halving_period_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 10
    epochs: int = 50
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halving_period_epochs)


@dataclass
class ResidualFrame:
    data: np.ndarray  # (C, H, W), values in [-1, 1]
    original_dims: Tuple[int, int]


def pad_to_multiple(x: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad the last two axes up to the next multiple."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(x, pad, mode=mode)


def crop(x: np.ndarray, dims: Tuple[int, int]) -> np.ndarray:
    return x[..., :dims[0], :dims[1]]


def reconstruction_loss(r: np.ndarray, r_hat: np.ndarray) -> float:
    """Mean squared error over every element."""
    r = getattr(r, "data", r)
    r_hat = getattr(r_hat, "data", r_hat)
    if np.shape(r) != np.shape(r_hat):
        raise ShapeError(f"reconstruction_loss: shapes {np.shape(r)} and {np.shape(r_hat)} differ")
    d = np.asarray(r, dtype=np.float64) - np.asarray(r_hat, dtype=np.float64)
    return float(np.mean(d * d))


class ResidualAutoencoder:
    """Parameters and forward/backward passes of the residual autoencoder."""

    def __init__(self, config: AutoencoderConfig, seed: int = 0, dtype=np.float32,
                 surrogate: bool = False, output_init: str = "zero"):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c, cin, L = config.C, config.input_channels, config.L
        self.encoder: List[Tuple[nn.ConvParams, nn.BatchNormParams]] = []
        for i in range(L):
            conv = nn.init_conv(rng, cin if i == 0 else c, c, stride=2, padding=1, dtype=dtype)
            self.encoder.append((conv, nn.init_batchnorm(c, dtype)))
        self.decoder: List[Tuple[nn.ConvParams, nn.BatchNormParams]] = []
        for _ in range(L):
            conv = nn.init_conv(rng, c, 4 * c, stride=1, padding=1, dtype=dtype)
            self.decoder.append((conv, nn.init_batchnorm(4 * c, dtype)))
        self.output_proj = nn.init_conv(rng, c, cin, stride=1, padding=1, dtype=dtype)
        if output_init == "zero":
            # start as the zero predictor: residuals are small next to the init scale
            self.output_proj.weight[...] = 0
        elif output_init != "uniform":
            raise ValueError(f"output_init must be 'zero' or 'uniform', got {output_init!r}")
        self.binarizer = Binarizer(config.binarizer, config.gumbel, surrogate=surrogate)
        self.optimizer: Optional[nn.Adam] = None

    # -- parameter access ---------------------------------------------------

    def _layers(self):
        for i, (conv, bn) in enumerate(self.encoder):
            yield f"enc{i}", conv, bn
        for i, (conv, bn) in enumerate(self.decoder):
            yield f"dec{i}", conv, bn
        yield "out", self.output_proj, None

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays in checkpoint order.  Arrays are shared, not copied."""
        out = {}
        for name, conv, bn in self._layers():
            out[f"{name}.weight"] = conv.weight
            out[f"{name}.bias"] = conv.bias
            if bn is not None:
                out[f"{name}.gamma"] = bn.gamma
                out[f"{name}.beta"] = bn.beta
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, _, bn in self._layers():
            if bn is not None:
                out[f"{name}.running_mean"] = bn.running_mean
                out[f"{name}.running_var"] = bn.running_var
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        mine = self.state_arrays()
        if set(arrays) != set(mine):
            raise ShapeError(f"state mismatch: missing {sorted(set(mine) - set(arrays))}, "
                             f"unexpected {sorted(set(arrays) - set(mine))}")
        for k, v in arrays.items():
            if v.shape != mine[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {mine[k].shape}")
            mine[k][...] = v

    def copy(self, dtype=None) -> "ResidualAutoencoder":
        other = ResidualAutoencoder.__new__(ResidualAutoencoder)
        other.config = self.config
        other.dtype = np.dtype(dtype or self.dtype)
        cast = lambda a: np.array(a, dtype=other.dtype)  # noqa: E731
        conv_copy = lambda p: nn.ConvParams(cast(p.weight), cast(p.bias), p.stride, p.padding)  # noqa: E731
        bn_copy = lambda p: nn.BatchNormParams(cast(p.gamma), cast(p.beta), cast(p.running_mean),  # noqa: E731
                                               cast(p.running_var), p.momentum, p.eps)
        other.encoder = [(conv_copy(c), bn_copy(b)) for c, b in self.encoder]
        other.decoder = [(conv_copy(c), bn_copy(b)) for c, b in self.decoder]
        other.output_proj = conv_copy(self.output_proj)
        other.binarizer = Binarizer(self.binarizer.kind, self.binarizer.gumbel, self.binarizer.surrogate)
        other.optimizer = None
        return other

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = nn._as_batch(np.asarray(x))
        f = self.config.factor
        if x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected {self.config.input_channels} channels, got input shape {x.shape}")
        h, w = x.shape[2:]
        if h % f or w % f:
            raise ShapeError(f"input dims {h}x{w} not divisible by 2^L={f}; "
                             f"pad by ({(-h) % f}, {(-w) % f}) first (see pad_to_multiple)")
        return x.astype(self.dtype, copy=False)

    def _encode(self, x, mode):
        caches = []
        h = x
        last = len(self.encoder) - 1
        for i, (conv, bn) in enumerate(self.encoder):
            h, c_conv = nn.conv2d_forward(h, conv)
            h, c_bn = nn.batchnorm_forward(h, bn, mode)
            c_relu = None
            if i < last:
                h, c_relu = nn.relu_forward(h)
            caches.append((c_conv, c_bn, c_relu))
        return h, caches

    def _decode(self, b, mode):
        caches = []
        h = b
        for conv, bn in self.decoder:
            h, c_conv = nn.conv2d_forward(h, conv)
            h, c_bn = nn.batchnorm_forward(h, bn, mode)
            h, c_relu = nn.relu_forward(h)
            h = nn.subpixel_shuffle(h)
            caches.append((c_conv, c_bn, c_relu))
        h, c_out = nn.conv2d_forward(h, self.output_proj)
        out = np.tanh(h)
        return out, (caches, c_out, out)

    def encode(self, r, mode: str = "eval") -> np.ndarray:
        """Residual (N, C, H, W) or (C, H, W) -> pre-activation features e."""
        squeeze = np.ndim(getattr(r, "data", r)) == 3
        x = self._check_input(getattr(r, "data", r))
        e, _ = self._encode(x, mode)
        return e[0] if squeeze else e

    def binarize(self, e: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
        b, _ = self.binarizer.forward(e, mode, rng)
        return b

    def decode(self, binary, mode: str = "eval") -> np.ndarray:
        """+-1 map (N, C, h, w) or (C, h, w) -> residual estimate in [-1, 1]."""
        b = np.asarray(binary)
        squeeze = b.ndim == 3
        b = nn._as_batch(b)
        if b.shape[1] != self.config.C:
            raise ShapeError(f"binary map shape {b.shape} does not have C={self.config.C} channels")
        out, _ = self._decode(b.astype(self.dtype, copy=False), mode)
        return out[0] if squeeze else out

    def forward(self, x: np.ndarray, mode: str = "train", rng=None):
        """Full E -> B -> D pass.  Returns ``(r_hat, cache)``."""
        x = self._check_input(x)
        e, enc_c = self._encode(x, mode)
        b, bin_c = self.binarizer.forward(e, mode, rng)
        out, dec_c = self._decode(b, mode)
        return out, (enc_c, bin_c, dec_c)

    def backward(self, dout: np.ndarray, cache) -> Dict[str, np.ndarray]:
        enc_c, bin_c, dec_c = cache
        grads: Dict[str, np.ndarray] = {}
        dec_caches, c_out, out = dec_c
        dh = dout * (1.0 - out * out)
        dh, grads["out.weight"], grads["out.bias"] = nn.conv2d_backward(dh, c_out)
        for i in range(len(self.decoder) - 1, -1, -1):
            c_conv, c_bn, c_relu = dec_caches[i]
            dh = nn.subpixel_unshuffle(dh)
            dh = nn.relu_backward(dh, c_relu)
            dh, grads[f"dec{i}.gamma"], grads[f"dec{i}.beta"] = nn.batchnorm_backward(dh, c_bn)
            dh, grads[f"dec{i}.weight"], grads[f"dec{i}.bias"] = nn.conv2d_backward(dh, c_conv)
        dh = self.binarizer.backward(dh, bin_c)
        for i in range(len(self.encoder) - 1, -1, -1):
            c_conv, c_bn, c_relu = enc_c[i]
            if c_relu is not None:
                dh = nn.relu_backward(dh, c_relu)
            dh, grads[f"enc{i}.gamma"], grads[f"enc{i}.beta"] = nn.batchnorm_backward(dh, c_bn)
            dh, grads[f"enc{i}.weight"], grads[f"enc{i}.bias"] = nn.conv2d_backward(dh, c_conv)
        return grads

    def latent_map(self, r: np.ndarray) -> np.ndarray:
        """Eval-mode +-1 map for residual frames whose dims divide 2^L."""
        return self.binarize(self.encode(r, "eval"), "eval")

    def reconstruct(self, r: np.ndarray) -> np.ndarray:
        """Eval-mode r_hat for arbitrary-size residuals (pads, then crops)."""
        data = getattr(r, "data", r)
        dims = data.shape[-2:]
        x = pad_to_multiple(np.asarray(data), self.config.factor)
        return crop(self.decode(self.latent_map(x)), dims)


@dataclass
class TrainHistory:
    epoch_loss: List[float] = field(default_factory=list)
    step_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)


def _stack_dataset(dataset, factor: int) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        frames = [dataset] if dataset.ndim == 3 else list(dataset)
    else:
        frames = [np.asarray(getattr(f, "data", f)) for f in dataset]
    if not frames:
        raise BinresError("train: empty dataset")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ShapeError(f"train: frame {i} has shape {f.shape}, expected {shape}")
    return pad_to_multiple(np.stack(frames), factor)


def train(dataset, cfg: TrainConfig, acfg: AutoencoderConfig,
          model: Optional[ResidualAutoencoder] = None, log=None) -> Tuple[ResidualAutoencoder, TrainHistory]:
    """Minimize the mean squared reconstruction error with Adam.

    The learning rate halves every ``cfg.lr_halving_period_epochs`` epochs and
    the Gumbel temperature (if used) is annealed once per epoch.  Everything
    is driven by ``cfg.seed``.
    """
    data = _stack_dataset(dataset, acfg.factor)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    if model is None:
        model = ResidualAutoencoder(acfg, seed=int(seeds[0].generate_state(1)[0]))
    data = data.astype(model.dtype)
    rng = np.random.default_rng(seeds[1])
    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    history = TrainHistory()
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        if acfg.binarizer is BinarizerKind.GUMBEL:
            anneal_temperature(model.binarizer.gumbel, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            out, cache = model.forward(batch, "train", rng)
            diff = out - batch
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            grads = model.backward((2.0 / diff.size) * diff, cache)
            opt.step(grads)
            losses.append(loss)
            history.step_loss.append(loss)
        history.epoch_loss.append(float(np.mean(losses)))
        history.lr.append(opt.lr)
        if log is not None:
            log(epoch, history.epoch_loss[-1], opt.lr)
    model.optimizer = opt
    return model, history
