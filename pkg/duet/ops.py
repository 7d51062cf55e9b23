"""
Differentiable kernels and their functional wrappers.

Layouts are channel-first: feature maps are [B, C, H, W] (a single map
[C, H, W] is accepted wherever a batch is), vectors are [B, D].
"""

import numpy as np
from dataclasses import dataclass
from typing import Optional, Tuple, Union
from duet.modes import Kind, NormMode
from duet.tensor import Array_T, Function, Shape_T, Tensor, TensorError

Grads_T = Tuple[Optional[Array_T], ...]


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise TensorError(message)


def _as_batch(x: Array_T, rank: int, op: str) -> Tuple[Array_T, bool]:
    """Promote an unbatched array to rank `rank` with a leading batch axis."""
    if x.ndim == rank - 1:
        return x[None], True
    _require(x.ndim == rank,
             f'{op} expects rank {rank - 1} or {rank} input, got shape {x.shape}')
    return x, False


def _unbroadcast(grad: Array_T, shape: Shape_T) -> Array_T:
    """Sum a gradient back down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Conv2d(Function):
    """Cross-correlation with square kernels of extent 1 or 3, no bias."""

    def __init__(self, stride: int = 1, pad: int = 0) -> None:
        _require(stride in (1, 2), f'conv2d stride must be 1 or 2, got {stride}')
        _require(pad >= 0, f'conv2d pad must be non-negative, got {pad}')
        self.stride = stride
        self.pad = pad

    def _windows(self, xp: Array_T, di: int, dj: int) -> Array_T:
        s = self.stride
        return xp[:, :, di:di + s * (self.out_h - 1) + 1:s,
                  dj:dj + s * (self.out_w - 1) + 1:s]

    def forward(self, x: Array_T, w: Array_T) -> Array_T:
        x4, self.squeeze = _as_batch(x, 4, 'conv2d')
        _require(w.ndim == 4, f'conv2d weight must be [C_out, C_in, k, k], got {w.shape}')
        batch, channels, height, width = x4.shape
        out_channels, in_channels, k, k2 = w.shape
        _require(k == k2 and k in (1, 3), f'conv2d kernel must be 1x1 or 3x3, got {k}x{k2}')
        _require(in_channels == channels,
                 f'conv2d weight expects {in_channels} input channels, '
                 f'input has {channels}')
        span_h = height + 2 * self.pad - k
        span_w = width + 2 * self.pad - k
        _require(span_h >= 0 and span_w >= 0,
                 f'conv2d output extent not positive for input {height}x{width}, '
                 f'kernel {k}, pad {self.pad}')
        self.out_h = span_h // self.stride + 1
        self.out_w = span_w // self.stride + 1
        p = self.pad
        xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p))) if p else x4
        self.xp, self.w, self.in_hw = xp, w, (height, width)

        pixels = self.out_h * self.out_w
        out: Optional[Array_T] = None
        for di in range(k):
            for dj in range(k):
                patch = self._windows(xp, di, dj).reshape(batch, channels, pixels)
                term = np.matmul(w[:, :, di, dj], patch)
                out = term if out is None else out + term
        assert out is not None
        out = out.reshape(batch, out_channels, self.out_h, self.out_w)
        return out[0] if self.squeeze else out

    def backward(self, grad: Array_T) -> Grads_T:
        g4 = grad[None] if self.squeeze else grad
        xp, w = self.xp, self.w
        batch, channels = xp.shape[:2]
        out_channels, _, k, _ = w.shape
        pixels = self.out_h * self.out_w
        g3 = g4.reshape(batch, out_channels, pixels)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        s = self.stride
        for di in range(k):
            for dj in range(k):
                patch = self._windows(xp, di, dj).reshape(batch, channels, pixels)
                gw[:, :, di, dj] = np.tensordot(g3, patch, axes=([0, 2], [0, 2]))
                back = np.matmul(w[:, :, di, dj].T, g3)
                gxp[:, :, di:di + s * (self.out_h - 1) + 1:s,
                    dj:dj + s * (self.out_w - 1) + 1:s] += back.reshape(
                        batch, channels, self.out_h, self.out_w)
        p = self.pad
        height, width = self.in_hw
        gx = gxp[:, :, p:p + height, p:p + width]
        return (gx[0] if self.squeeze else gx), gw


class PointwiseLinear(Function):
    """Per-pixel affine map y_i = W x_i (+ b), i.e. a 1x1 convolution."""

    def forward(self, x: Array_T, w: Array_T, b: Optional[Array_T] = None) -> Array_T:
        x4, self.squeeze = _as_batch(x, 4, 'pointwise_linear')
        _require(w.ndim == 2 and w.shape[1] == x4.shape[1],
                 f'pointwise_linear weight {w.shape} does not match '
                 f'{x4.shape[1]} input channels')
        batch, channels, height, width = x4.shape
        self.x3 = x4.reshape(batch, channels, height * width)
        self.w, self.has_bias = w, b is not None
        y = np.matmul(w, self.x3)
        if b is not None:
            _require(b.shape == (w.shape[0],),
                     f'pointwise_linear bias {b.shape} does not match {w.shape[0]} outputs')
            y = y + b[:, None]
        y = y.reshape(batch, w.shape[0], height, width)
        return y[0] if self.squeeze else y

    def backward(self, grad: Array_T) -> Grads_T:
        g4 = grad[None] if self.squeeze else grad
        g3 = g4.reshape(g4.shape[0], g4.shape[1], -1)
        gx = np.matmul(self.w.T, g3).reshape(
            g4.shape[0], self.w.shape[1], *g4.shape[2:])
        gw = np.tensordot(g3, self.x3, axes=([0, 2], [0, 2]))
        grads: Tuple[Optional[Array_T], ...] = (gx[0] if self.squeeze else gx, gw)
        if self.has_bias:
            grads = grads + (g3.sum(axis=(0, 2)),)
        return grads


class Linear(Function):
    """y = x W^T (+ b) over [B, D] vectors."""

    def forward(self, x: Array_T, w: Array_T, b: Optional[Array_T] = None) -> Array_T:
        _require(x.ndim == 2 and w.ndim == 2 and w.shape[1] == x.shape[1],
                 f'linear weight {w.shape} does not match input {x.shape}')
        self.x, self.w, self.has_bias = x, w, b is not None
        y = x @ w.T
        if b is not None:
            _require(b.shape == (w.shape[0],),
                     f'linear bias {b.shape} does not match {w.shape[0]} outputs')
            y = y + b
        return y

    def backward(self, grad: Array_T) -> Grads_T:
        grads: Tuple[Optional[Array_T], ...] = (grad @ self.w, grad.T @ self.x)
        if self.has_bias:
            grads = grads + (grad.sum(axis=0),)
        return grads


@dataclass
class BatchNormState:
    """Running statistics of one normalization layer.

    The arrays are updated in place so a parameter table that registered
    them as buffers keeps seeing the current values.
    """
    running_mean: Array_T
    running_var: Array_T
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> 'BatchNormState':
        return cls(np.zeros(channels, dtype=np.float64),
                   np.ones(channels, dtype=np.float64))


class BatchNorm(Function):
    """Normalization over every axis but the channel axis (axis 1)."""

    def __init__(self, state: BatchNormState, mode: NormMode = NormMode.TRAIN) -> None:
        self.state = state
        self.mode = mode

    def forward(self, x: Array_T, gamma: Array_T, beta: Array_T) -> Array_T:
        _require(x.ndim >= 2, f'batch_norm expects [B, C, ...] input, got {x.shape}')
        channels = x.shape[1]
        _require(gamma.shape == (channels,) and beta.shape == (channels,),
                 f'batch_norm affine parameters must have shape ({channels},)')
        self.axes = tuple(i for i in range(x.ndim) if i != 1)
        self.view = tuple(channels if i == 1 else 1 for i in range(x.ndim))
        self.count = x.size // channels
        state = self.state

        if self.mode is NormMode.TRAIN:
            _require(self.count >= 2,
                     f'batch_norm in train mode needs at least 2 values per '
                     f'channel, got {self.count}')
            mean = x.mean(axis=self.axes)
            var = x.var(axis=self.axes)
            unbiased = var * self.count / (self.count - 1)
            state.running_mean *= 1.0 - state.momentum
            state.running_mean += state.momentum * mean
            state.running_var *= 1.0 - state.momentum
            state.running_var += state.momentum * unbiased
        else:
            mean = state.running_mean.astype(x.dtype)
            var = state.running_var.astype(x.dtype)

        self.inv_std = (1.0 / np.sqrt(var + state.eps)).reshape(self.view)
        self.xhat = (x - mean.reshape(self.view)) * self.inv_std
        self.gamma = gamma
        return self.xhat * gamma.reshape(self.view) + beta.reshape(self.view)

    def backward(self, grad: Array_T) -> Grads_T:
        ggamma = (grad * self.xhat).sum(axis=self.axes)
        gbeta = grad.sum(axis=self.axes)
        gxhat = grad * self.gamma.reshape(self.view)
        if self.mode is NormMode.TRAIN:
            m = self.count
            gx = (self.inv_std / m) * (
                m * gxhat
                - gxhat.sum(axis=self.axes, keepdims=True)
                - self.xhat * (gxhat * self.xhat).sum(axis=self.axes, keepdims=True))
        else:
            gx = gxhat * self.inv_std
        return gx, ggamma, gbeta


class Add(Function):
    def forward(self, x: Array_T, y: Array_T) -> Array_T:
        _require(x.shape == y.shape, f'add shape mismatch: {x.shape} vs {y.shape}')
        return x + y

    def backward(self, grad: Array_T) -> Grads_T:
        return grad, grad


class Sub(Function):
    def forward(self, x: Array_T, y: Array_T) -> Array_T:
        _require(x.shape == y.shape, f'sub shape mismatch: {x.shape} vs {y.shape}')
        return x - y

    def backward(self, grad: Array_T) -> Grads_T:
        return grad, -grad


class Mul(Function):
    """x * y where y is x-shaped or broadcasts onto x (masks, gates)."""

    def forward(self, x: Array_T, y: Array_T) -> Array_T:
        try:
            shape = np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise TensorError(f'mul cannot combine {x.shape} with {y.shape}')
        _require(shape == x.shape, f'mul operand {y.shape} must broadcast onto {x.shape}')
        self.x, self.y = x, y
        return x * y

    def backward(self, grad: Array_T) -> Grads_T:
        return grad * self.y, _unbroadcast(grad * self.x, self.y.shape)


class Relu(Function):
    def forward(self, x: Array_T) -> Array_T:
        self.active = x > 0
        return np.where(self.active, x, 0).astype(x.dtype)

    def backward(self, grad: Array_T) -> Grads_T:
        return (np.where(self.active, grad, 0).astype(grad.dtype),)


class Scale(Function):
    def __init__(self, factor: float = 1.0) -> None:
        self.factor = factor

    def forward(self, x: Array_T) -> Array_T:
        return x * self.factor

    def backward(self, grad: Array_T) -> Grads_T:
        return (grad * self.factor,)


class Shift(Function):
    def __init__(self, offset: float = 0.0) -> None:
        self.offset = offset

    def forward(self, x: Array_T) -> Array_T:
        return x + self.offset

    def backward(self, grad: Array_T) -> Grads_T:
        return (grad,)


class SoftmaxRows(Function):
    """Softmax along the last axis, with optional key and query masks.

    Masked-out keys get an additive -inf logit and so exactly zero weight.
    A row whose query is masked out, or with no surviving key, is all
    zeros. Masks are boolean arrays broadcastable to the logits.
    """

    def __init__(self,
                 key_mask: Optional[Array_T] = None,
                 query_mask: Optional[Array_T] = None) -> None:
        self.key_mask = key_mask
        self.query_mask = query_mask

    def forward(self, x: Array_T) -> Array_T:
        if np.isnan(x).any():
            raise TensorError('softmax_rows rejects NaN logits')
        _require(x.ndim >= 1, 'softmax_rows needs at least one axis')
        valid = np.ones(x.shape, dtype=bool)
        if self.key_mask is not None:
            valid &= np.broadcast_to(self.key_mask, x.shape)
        if self.query_mask is not None:
            valid &= np.broadcast_to(self.query_mask, x.shape)
        z = np.where(valid, x, -np.inf)
        row_max = z.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0)
        e = np.exp(z - row_max)
        total = e.sum(axis=-1, keepdims=True)
        alive = total > 0
        self.out = np.where(alive, e / np.where(alive, total, 1), 0).astype(x.dtype)
        return self.out

    def backward(self, grad: Array_T) -> Grads_T:
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class GlobalAvgPool(Function):
    """Mean over the two trailing spatial axes: [B, C, H, W] -> [B, C]."""

    def forward(self, x: Array_T) -> Array_T:
        _require(x.ndim in (3, 4), f'global_avg_pool expects [B?, C, H, W], got {x.shape}')
        _require(x.shape[-1] * x.shape[-2] >= 1, 'global_avg_pool needs H*W >= 1')
        self.shape = x.shape
        return x.mean(axis=(-2, -1))

    def backward(self, grad: Array_T) -> Grads_T:
        pixels = self.shape[-1] * self.shape[-2]
        spread = np.broadcast_to(grad[..., None, None] / pixels, self.shape)
        return (np.array(spread),)


class Matmul(Function):
    """Batched matrix product with identical leading axes."""

    def forward(self, a: Array_T, b: Array_T) -> Array_T:
        _require(a.ndim >= 2 and a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]
                 and a.shape[-1] == b.shape[-2],
                 f'matmul shape mismatch: {a.shape} @ {b.shape}')
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: Array_T) -> Grads_T:
        return (np.matmul(grad, np.swapaxes(self.b, -1, -2)),
                np.matmul(np.swapaxes(self.a, -1, -2), grad))


class Transpose(Function):
    """Swap the two trailing axes."""

    def forward(self, x: Array_T) -> Array_T:
        _require(x.ndim >= 2, f'transpose needs rank >= 2, got {x.shape}')
        return np.ascontiguousarray(np.swapaxes(x, -1, -2))

    def backward(self, grad: Array_T) -> Grads_T:
        return (np.ascontiguousarray(np.swapaxes(grad, -1, -2)),)


class Reshape(Function):
    def __init__(self, shape: Shape_T = ()) -> None:
        self.shape = shape

    def forward(self, x: Array_T) -> Array_T:
        self.source = x.shape
        try:
            return x.reshape(self.shape)
        except ValueError:
            raise TensorError(f'cannot reshape {x.shape} into {self.shape}')

    def backward(self, grad: Array_T) -> Grads_T:
        return (grad.reshape(self.source),)


class Sum(Function):
    def forward(self, x: Array_T) -> Array_T:
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad: Array_T) -> Grads_T:
        return (np.full(self.shape, grad, dtype=grad.dtype),)


class Mean(Function):
    def forward(self, x: Array_T) -> Array_T:
        self.shape = x.shape
        return np.asarray(x.mean())

    def backward(self, grad: Array_T) -> Grads_T:
        return (np.full(self.shape, grad / np.prod(self.shape), dtype=grad.dtype),)


class L2Normalize(Function):
    """Scale each row of [B, D] to unit Euclidean norm."""

    def __init__(self, eps: float = 1e-12) -> None:
        self.eps = eps

    def forward(self, x: Array_T) -> Array_T:
        _require(x.ndim == 2, f'l2_normalize expects [B, D], got {x.shape}')
        self.norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + self.eps)
        self.out = x / self.norm
        return self.out

    def backward(self, grad: Array_T) -> Grads_T:
        dot = (grad * self.out).sum(axis=1, keepdims=True)
        return ((grad - self.out * dot) / self.norm,)


class PairwiseDistance(Function):
    """d_ij = sqrt(|e_i - e_j|^2 + eps) over the rows of [B, D]."""

    def __init__(self, eps: float = 1e-12) -> None:
        self.eps = eps

    def forward(self, e: Array_T) -> Array_T:
        _require(e.ndim == 2, f'pairwise_distance expects [B, D], got {e.shape}')
        self.diff = e[:, None, :] - e[None, :, :]
        self.dist = np.sqrt(np.sum(self.diff * self.diff, axis=-1) + self.eps)
        return self.dist

    def backward(self, grad: Array_T) -> Grads_T:
        coef = (grad + grad.T) / self.dist
        return (np.einsum('ij,ijd->id', coef, self.diff),)


class MaskedExtreme(Function):
    """Per-row max (or min) of [B, M] over the entries where `mask` holds."""

    def __init__(self, mask: Optional[Array_T] = None, largest: bool = True) -> None:
        self.mask = mask
        self.largest = largest

    def forward(self, x: Array_T) -> Array_T:
        mask = np.ones(x.shape, dtype=bool) if self.mask is None else self.mask
        _require(mask.shape == x.shape, f'mask {mask.shape} does not match {x.shape}')
        _require(bool(mask.any(axis=1).all()), 'every row needs at least one candidate')
        fill = -np.inf if self.largest else np.inf
        candidates = np.where(mask, x, fill)
        self.index = (candidates.argmax(axis=1) if self.largest
                      else candidates.argmin(axis=1))
        self.shape = x.shape
        return x[np.arange(x.shape[0]), self.index]

    def backward(self, grad: Array_T) -> Grads_T:
        gx = np.zeros(self.shape, dtype=grad.dtype)
        gx[np.arange(self.shape[0]), self.index] = grad
        return (gx,)


class SoftmaxCrossEntropy(Function):
    """Mean over the batch of -log softmax(logits)[label]."""

    def __init__(self, labels: Optional[Array_T] = None) -> None:
        self.labels = np.asarray([] if labels is None else labels, dtype=np.int64)

    def forward(self, logits: Array_T) -> Array_T:
        _require(logits.ndim == 2 and self.labels.shape == (logits.shape[0],),
                 f'softmax_cross_entropy expects [B, M] logits and B labels, '
                 f'got {logits.shape} and {self.labels.shape}')
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_total = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_total
        rows = np.arange(logits.shape[0])
        self.probs = np.exp(log_probs)
        return np.asarray(-log_probs[rows, self.labels].mean())

    def backward(self, grad: Array_T) -> Grads_T:
        batch = self.probs.shape[0]
        g = self.probs.copy()
        g[np.arange(batch), self.labels] -= 1.0
        return (g * (grad / batch),)


Operand_T = Union[Tensor, float]


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, weight, stride=stride, pad=pad)


def pointwise_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if bias is None:
        return PointwiseLinear.apply(x, weight)
    return PointwiseLinear.apply(x, weight, bias)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


def batch_norm(x: Tensor,
               gamma: Tensor,
               beta: Tensor,
               state: BatchNormState,
               mode: NormMode = NormMode.TRAIN) -> Tensor:
    return BatchNorm.apply(x, gamma, beta, state=state, mode=mode)


def elementwise(kind: Kind, x: Tensor, other: Optional[Operand_T] = None) -> Tensor:
    """Dispatch an elementwise kernel by kind.

    ADD/SUB/MUL take a second tensor, SCALE/SHIFT a scalar, RELU nothing.
    """
    if kind in (Kind.ADD, Kind.SUB, Kind.MUL):
        if not isinstance(other, Tensor):
            raise TensorError(f'{kind.value} needs a tensor operand')
        binary = {Kind.ADD: Add, Kind.SUB: Sub, Kind.MUL: Mul}[kind]
        return binary.apply(x, other)
    if kind is Kind.RELU:
        return Relu.apply(x)
    if isinstance(other, Tensor) or other is None:
        raise TensorError(f'{kind.value} needs a scalar operand')
    if kind is Kind.SCALE:
        return Scale.apply(x, factor=float(other))
    return Shift.apply(x, offset=float(other))


def add(x: Tensor, y: Tensor) -> Tensor:
    return elementwise(Kind.ADD, x, y)


def sub(x: Tensor, y: Tensor) -> Tensor:
    return elementwise(Kind.SUB, x, y)


def mul(x: Tensor, y: Tensor) -> Tensor:
    return elementwise(Kind.MUL, x, y)


def relu(x: Tensor) -> Tensor:
    return elementwise(Kind.RELU, x)


def scale(x: Tensor, factor: float) -> Tensor:
    return elementwise(Kind.SCALE, x, factor)


def shift(x: Tensor, offset: float) -> Tensor:
    return elementwise(Kind.SHIFT, x, offset)


def softmax_rows(logits: Tensor,
                 key_mask: Optional[Array_T] = None,
                 query_mask: Optional[Array_T] = None) -> Tensor:
    return SoftmaxRows.apply(logits, key_mask=key_mask, query_mask=query_mask)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return Matmul.apply(a, b)


def transpose(x: Tensor) -> Tensor:
    return Transpose.apply(x)


def reshape(x: Tensor, shape: Shape_T) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def sum_all(x: Tensor) -> Tensor:
    return Sum.apply(x)


def mean_all(x: Tensor) -> Tensor:
    return Mean.apply(x)


def l2_normalize(x: Tensor) -> Tensor:
    return L2Normalize.apply(x)


def pairwise_distance(e: Tensor, eps: float = 1e-12) -> Tensor:
    return PairwiseDistance.apply(e, eps=eps)


def masked_max(x: Tensor, mask: Array_T) -> Tensor:
    return MaskedExtreme.apply(x, mask=mask, largest=True)


def masked_min(x: Tensor, mask: Array_T) -> Tensor:
    return MaskedExtreme.apply(x, mask=mask, largest=False)


def softmax_cross_entropy(logits: Tensor, labels: Array_T) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=labels)
