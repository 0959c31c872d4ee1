"""Dense float64 layer library with explicit forward/backward per layer kind.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Layouts:

    Dense         (n, in)        -> (n, out)       W: (out, in), b: (out,)
    Conv1D        (n, C, L)      -> (n, C', L')    W: (C', C, k), b: (C',)
    BatchNorm1D   (n, C) | (n, C, L), statistics per channel
    GlobalAvgPool (n, C, L)      -> (n, C)
    ReLU, Softmax elementwise / over the last axis

There is no autodiff graph. A network is a ``Sequential`` stack whose
``backward`` walks the caches produced by ``forward`` in reverse.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError

DTYPE = np.float64


class LayerKind(str, enum.Enum):
    DENSE = "Dense"
    CONV1D = "Conv1D"
    RELU = "ReLU"
    BATCHNORM1D = "BatchNorm1D"
    GLOBALAVGPOOL = "GlobalAvgPool"
    SOFTMAX = "Softmax"


class Mode(str, enum.Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    channels: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        k = self.kind
        if k is LayerKind.DENSE and (self.in_features < 1 or self.out_features < 1):
            raise ConfigError("Dense widths must be >= 1")
        if k is LayerKind.CONV1D:
            if self.in_channels < 1 or self.out_channels < 1:
                raise ConfigError("Conv1D channel counts must be >= 1")
            if self.kernel < 1 or self.stride < 1:
                raise ConfigError("Conv1D kernel and stride must be >= 1")
        if k is LayerKind.BATCHNORM1D:
            if self.channels < 1:
                raise ConfigError("BatchNorm1D channel count must be >= 1")
            if not (0.0 <= self.momentum <= 1.0) or self.eps <= 0:
                raise ConfigError("BatchNorm1D needs momentum in [0, 1] and eps > 0")

    @classmethod
    def dense(cls, in_features, out_features):
        return cls(LayerKind.DENSE, in_features=in_features, out_features=out_features)

    @classmethod
    def conv1d(cls, in_channels, out_channels, kernel, stride=1):
        return cls(LayerKind.CONV1D, in_channels=in_channels, out_channels=out_channels,
                   kernel=kernel, stride=stride)

    @classmethod
    def batchnorm(cls, channels, momentum=0.1, eps=1e-5):
        return cls(LayerKind.BATCHNORM1D, channels=channels, momentum=momentum, eps=eps)

    @classmethod
    def relu(cls):
        return cls(LayerKind.RELU)

    @classmethod
    def global_avg_pool(cls):
        return cls(LayerKind.GLOBALAVGPOOL)

    @classmethod
    def softmax(cls):
        return cls(LayerKind.SOFTMAX)

    def output_length(self, length):
        """Sequence length after this layer (Conv1D uses valid padding)."""
        if self.kind is LayerKind.CONV1D:
            if self.kernel > length:
                raise ConfigError(f"kernel {self.kernel} longer than input length {length}")
            return (length - self.kernel) // self.stride + 1
        return length

    def param_shapes(self):
        """(name, shape, trainable) for every parameter block this layer owns."""
        k = self.kind
        if k is LayerKind.DENSE:
            return [("W", (self.out_features, self.in_features), True),
                    ("b", (self.out_features,), True)]
        if k is LayerKind.CONV1D:
            return [("W", (self.out_channels, self.in_channels, self.kernel), True),
                    ("b", (self.out_channels,), True)]
        if k is LayerKind.BATCHNORM1D:
            c = (self.channels,)
            return [("gamma", c, True), ("beta", c, True),
                    ("running_mean", c, False), ("running_var", c, False)]
        return []


@dataclass
class ParamBlock:
    """One named parameter array plus its gradient buffer.

    Non-trainable blocks (BatchNorm running statistics) are state that
    travels with the parameters but is never touched by SGD.
    """

    name: str
    values: np.ndarray
    grad: np.ndarray = None
    trainable: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad = np.asarray(self.grad, dtype=DTYPE)
        if self.grad.shape != self.values.shape:
            raise ConfigError(f"{self.name}: grad shape {self.grad.shape} != values shape {self.values.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self):
        return ParamBlock(self.name, self.values.copy(), self.grad.copy(), self.trainable)


def init_params(spec: LayerSpec, rng: np.random.Generator, prefix: str = "") -> list[ParamBlock]:
    """He-normal weights, zero biases, unit BatchNorm scale."""
    blocks = []
    for name, shape, trainable in spec.param_shapes():
        if name == "W":
            fan_in = int(np.prod(shape[1:]))
            values = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name in ("gamma", "running_var"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        blocks.append(ParamBlock(prefix + name, values, trainable=trainable))
    return blocks


def _check_params(spec, params):
    expected = spec.param_shapes()
    if len(params) != len(expected):
        raise ConfigError(f"{spec.kind.value} expects {len(expected)} parameter blocks, got {len(params)}")
    for (name, shape, _), p in zip(expected, params):
        if p.values.shape != tuple(shape):
            raise ConfigError(f"{spec.kind.value} parameter {name}: shape {p.values.shape} != {shape}")


def _conv_windows(x, kernel, stride):
    # (n, C, L) -> (n, L', C, k) view-then-copy
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3))


def layer_forward(spec: LayerSpec, params: Sequence[ParamBlock], x: np.ndarray, mode: Mode = Mode.TRAIN,
                  update_running: bool = True):
    """Run one layer. Returns ``(output, cache)``.

    In ``Mode.TRAIN`` BatchNorm normalizes with batch statistics and, unless
    ``update_running`` is false, folds them into the running statistics.
    """
    _check_params(spec, params)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0 or x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    kind = spec.kind

    if kind is LayerKind.DENSE:
        if x.ndim != 2 or x.shape[1] != spec.in_features:
            raise ConfigError(f"Dense expects (n, {spec.in_features}), got {x.shape}")
        W, b = params[0].values, params[1].values
        return x @ W.T + b, (x,)

    if kind is LayerKind.CONV1D:
        if x.ndim != 3 or x.shape[1] != spec.in_channels:
            raise ConfigError(f"Conv1D expects (n, {spec.in_channels}, L), got {x.shape}")
        n, _, length = x.shape
        lout = spec.output_length(length)
        cols = _conv_windows(x, spec.kernel, spec.stride).reshape(n * lout, -1)
        W, b = params[0].values, params[1].values
        y = cols @ W.reshape(spec.out_channels, -1).T + b
        y = y.reshape(n, lout, spec.out_channels).transpose(0, 2, 1)
        return np.ascontiguousarray(y), (cols, x.shape)

    if kind is LayerKind.RELU:
        mask = x > 0
        return x * mask, (mask,)

    if kind is LayerKind.BATCHNORM1D:
        if x.ndim not in (2, 3) or x.shape[1] != spec.channels:
            raise ConfigError(f"BatchNorm1D expects (n, {spec.channels}[, L]), got {x.shape}")
        gamma, beta, rmean, rvar = params
        axes = (0,) if x.ndim == 2 else (0, 2)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
        if mode is Mode.TRAIN:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_running:
                count = x.size // spec.channels
                unbiased = var * count / max(count - 1, 1)
                m = spec.momentum
                rmean.values[...] = (1 - m) * rmean.values + m * mean
                rvar.values[...] = (1 - m) * rvar.values + m * unbiased
        else:
            mean, var = rmean.values, rvar.values
        inv_std = 1.0 / np.sqrt(var + spec.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        y = gamma.values.reshape(bshape) * xhat + beta.values.reshape(bshape)
        return y, (xhat, inv_std, axes, bshape, mode)

    if kind is LayerKind.GLOBALAVGPOOL:
        if x.ndim != 3:
            raise ConfigError(f"GlobalAvgPool expects (n, C, L), got {x.shape}")
        return x.mean(axis=2), (x.shape,)

    if kind is LayerKind.SOFTMAX:
        y = softmax(x)
        return y, (y,)

    raise ConfigError(f"unknown layer kind {kind}")


def layer_backward(spec: LayerSpec, params: Sequence[ParamBlock], cache, grad_out: np.ndarray,
                   param_grads: bool = True, input_grad: bool = True):
    """Backpropagate ``grad_out`` through one layer.

    Parameter gradients are added into ``params[i].grad`` when
    ``param_grads`` is true. Returns the gradient w.r.t. the layer input,
    or None for Dense/Conv1D when ``input_grad`` is false.
    """
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    kind = spec.kind

    if kind is LayerKind.DENSE:
        (x,) = cache
        if grad_out.shape != (x.shape[0], spec.out_features):
            raise InvalidInputError(f"Dense grad shape {grad_out.shape} does not match cache")
        W = params[0].values
        if param_grads:
            params[0].grad += grad_out.T @ x
            params[1].grad += grad_out.sum(axis=0)
        return grad_out @ W if input_grad else None

    if kind is LayerKind.CONV1D:
        cols, in_shape = cache
        n, cin, length = in_shape
        lout = cols.shape[0] // n
        if grad_out.shape != (n, spec.out_channels, lout):
            raise InvalidInputError(f"Conv1D grad shape {grad_out.shape} does not match cache")
        g2 = grad_out.transpose(0, 2, 1).reshape(n * lout, spec.out_channels)
        W2 = params[0].values.reshape(spec.out_channels, -1)
        if param_grads:
            params[0].grad += (g2.T @ cols).reshape(params[0].values.shape)
            params[1].grad += g2.sum(axis=0)
        if not input_grad:
            return None
        dcols = (g2 @ W2).reshape(n, lout, cin, spec.kernel)
        dx = np.zeros(in_shape, dtype=DTYPE)
        s = spec.stride
        span = s * (lout - 1) + 1
        for j in range(spec.kernel):
            dx[:, :, j:j + span:s] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dx

    if kind is LayerKind.RELU:
        (mask,) = cache
        if grad_out.shape != mask.shape:
            raise InvalidInputError("ReLU grad shape does not match cache")
        return grad_out * mask

    if kind is LayerKind.BATCHNORM1D:
        xhat, inv_std, axes, bshape, mode = cache
        if grad_out.shape != xhat.shape:
            raise InvalidInputError("BatchNorm1D grad shape does not match cache")
        gamma = params[0].values.reshape(bshape)
        if param_grads:
            params[0].grad += (grad_out * xhat).sum(axis=axes)
            params[1].grad += grad_out.sum(axis=axes)
        gxhat = grad_out * gamma
        if mode is Mode.INFER:
            return gxhat * inv_std.reshape(bshape)
        count = xhat.size // xhat.shape[1]
        mean_g = gxhat.sum(axis=axes).reshape(bshape) / count
        mean_gx = (gxhat * xhat).sum(axis=axes).reshape(bshape) / count
        return (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(bshape)

    if kind is LayerKind.GLOBALAVGPOOL:
        (shape,) = cache
        if grad_out.shape != shape[:2]:
            raise InvalidInputError("GlobalAvgPool grad shape does not match cache")
        return np.repeat(grad_out[:, :, None] / shape[2], shape[2], axis=2)

    if kind is LayerKind.SOFTMAX:
        (y,) = cache
        if grad_out.shape != y.shape:
            raise InvalidInputError("Softmax grad shape does not match cache")
        return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))

    raise ConfigError(f"unknown layer kind {kind}")


def softmax(logits):
    """Row-wise softmax over the last axis, max-shifted for stability."""
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sgd_update(params: Sequence[ParamBlock], stepsize: float):
    """In-place ``values -= stepsize * grad`` on trainable blocks, then zero grads."""
    if not stepsize > 0:
        raise ConfigError(f"stepsize must be positive, got {stepsize}")
    for p in params:
        if p.trainable:
            p.values -= stepsize * p.grad
        p.zero_grad()
    return params


@dataclass
class Sequential:
    """A feed-forward stack of layers with their parameter blocks."""

    specs: list[LayerSpec]
    params: list[list[ParamBlock]] = field(default_factory=list)

    @classmethod
    def build(cls, specs, rng, prefix=""):
        params = [init_params(s, rng, f"{prefix}{i}.") for i, s in enumerate(specs)]
        return cls(list(specs), params)

    def forward(self, x, mode=Mode.TRAIN, update_running=True):
        caches = []
        for spec, ps in zip(self.specs, self.params):
            x, cache = layer_forward(spec, ps, x, mode, update_running)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad, param_grads=True, input_grad=True):
        last = len(self.specs) - 1
        for i in range(last, -1, -1):
            grad = layer_backward(self.specs[i], self.params[i], caches[i], grad, param_grads,
                                  input_grad or i > 0)
        return grad

    def blocks(self):
        return [p for ps in self.params for p in ps]

    def trainable(self):
        return [p for p in self.blocks() if p.trainable]

    def zero_grad(self):
        for p in self.blocks():
            p.zero_grad()

    def copy(self):
        return Sequential(list(self.specs), [[p.copy() for p in ps] for ps in self.params])

    def has_batchnorm(self):
        return any(s.kind is LayerKind.BATCHNORM1D for s in self.specs)


def finite_diff_check(loss_fn: Callable, params: Sequence[ParamBlock], step: float = 1e-5,
                      coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` aligned
    to the trainable entries of ``params``. Returns the maximum over checked
    coordinates of ``|analytic - numeric| / max(1e-8, |numeric|)``.
    If ``coords`` is given, only that many randomly chosen coordinates per
    block are perturbed.
    """
    if not step > 0:
        raise InvalidInputError("finite-difference step must be positive")
    trainable = [p for p in params if p.trainable]
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise InvalidInputError("loss is not finite at the check point")
    grads = [np.array(g, dtype=DTYPE, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(trainable, grads):
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn(params)[0]
            flat[i] = orig - step
            lm = loss_fn(params)[0]
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise InvalidInputError("loss became non-finite under perturbation")
            num = (lp - lm) / (2 * step)
            err = abs(g.reshape(-1)[i] - num) / max(1e-8, abs(num))
            worst = max(worst, err)
    return worst
