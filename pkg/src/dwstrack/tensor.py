"""
Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Every operation on tensors which require gradients records
its inputs and a closure computing the vector-Jacobian product. Calling `backward` on a
scalar loss sorts the recorded graph topologically into a `ComputationTape` and replays it
in reverse, accumulating gradients additively into the leaves.

Only the operations needed by the DWSFormer layer set are provided:

- elementwise arithmetic with singleton-axis broadcasting,
- `affine`, `conv1d` (strided, padded, grouped), `batch_norm1d`,
- `adaptive_avg_pool`, `adaptive_std_pool`, `global_avg_pool_time`,
- `softmax`, `sigmoid`, `transpose`, `reshape`, `sum` and `mean`.

Computations run in single precision unless `double_precision()` is active.
"""
import numbers
import threading
import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dwstrack.errors import (
    DimensionError, ConfigurationError, InputTooShortError, StateError,
)

__all__ = [
    'Tensor', 'ComputationTape', 'RunningStats',
    'tensor', 'parameter', 'zeros', 'ones',
    'default_dtype', 'double_precision', 'no_grad', 'is_grad_enabled',
    'affine', 'conv1d', 'conv1d_output_length', 'batch_norm1d',
    'adaptive_avg_pool', 'adaptive_std_pool', 'global_avg_pool_time',
    'softmax', 'sigmoid', 'elementwise_mul', 'transpose', 'reshape', 'backward',
]

STD_POOL_EPS = 1e-5
BATCH_NORM_EPS = 1e-5

# Precision and gradient recording are per thread, so independent models may run on
# separate threads.
_local = threading.local()


def default_dtype():
    return getattr(_local, 'dtype', np.float32)


def is_grad_enabled():
    return getattr(_local, 'grad_enabled', True)


@contextlib.contextmanager
def double_precision():
    """
    Create tensors in double precision within the context. Meant for gradient checks.
    """
    previous = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


@contextlib.contextmanager
def no_grad():
    """
    Do not record operations within the context.
    """
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _readonly(array):
    array.setflags(write=False)
    return array


class Tensor(object):
    """
    A dense N-dimensional float array with optional gradient tracking.

    The data buffer is read-only once the tensor exists; only `grad` changes, and
    optimizers swap whole buffers through `assign`.
    """
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _readonly(np.array(data, dtype=dtype or default_dtype()))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ''

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = _readonly(np.asarray(data, dtype=parents[0].data.dtype))
        out.grad = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents, out._backward = (), None
        out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def assign(self, values):
        values = np.array(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise DimensionError('cannot assign shape {0} to tensor of shape {1}'.format(
                values.shape, self.data.shape))
        self.data = _readonly(values)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        return 'Tensor(shape={0}, dtype={1}, requires_grad={2})'.format(
            self.shape, self.dtype, self.requires_grad)

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, -other)

    def __rsub__(self, other):
        return _add(-self, other)

    def __neg__(self):
        return _scale(self, -1.0)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return elementwise_mul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, numbers.Number):
            raise TypeError('tensors can only be divided by numbers')
        return _scale(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else int(np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]))
        return _reduce_sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self):
        return transpose(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


class ComputationTape(object):
    """
    The recorded operations leading to a root tensor, in topological order (inputs first).
    """
    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, root):
        order, seen = [], {id(root)}
        stack = [(root, iter(root._parents))]
        while stack:
            node, parents = stack[-1]
            for parent in parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    break
            else:
                stack.pop()
                order.append(node)
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def replay(self, seed):
        """
        Propagate `seed`, the gradient of the root, back to the leaves.

        Each node is visited once; closures are released afterwards, so the tape can only
        be replayed once.
        """
        grads = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad.astype(node.dtype, copy=True) if node.grad is None \
                    else node.grad + grad
                continue
            if node._backward is None:
                raise StateError(
                    'part of the graph was already consumed by an earlier backward pass')
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
            node._backward = None


def backward(loss):
    """
    Populate `grad` of every leaf tensor requiring gradients that `loss` depends on.
    """
    if loss.size != 1:
        raise DimensionError(
            'backward needs a scalar loss, got shape {0}'.format(loss.shape))
    if not loss.requires_grad:
        raise StateError('loss is detached: no tensor requiring gradients contributed to it')
    if not loss.is_leaf and loss._backward is None:
        raise StateError('backward was already called on this graph; re-run the forward pass')
    ComputationTape.record(loss).replay(np.ones_like(loss.data))


#
# Broadcasting: only axes of length one may be stretched, and ranks must agree.
#
def broadcast_shape(a, b):
    if a == b:
        return a
    if len(a) != len(b):
        raise DimensionError(
            'cannot broadcast shapes {0} and {1}: ranks differ'.format(a, b))
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError('cannot broadcast shapes {0} and {1}'.format(a, b))
    return tuple(out)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _scale(a, factor):
    return Tensor._result(a.data * factor, (a,), lambda g: (g * factor,), 'scale')


def _add(a, b):
    if isinstance(b, numbers.Number):
        return Tensor._result(a.data + b, (a,), lambda g: (g,), 'add')
    shape = broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    out = Tensor._result(a.data + b.data, (a, b), _backward, 'add')
    assert out.shape == shape
    return out


def elementwise_mul(a, b):
    """
    Elementwise product; operands agree in shape or have length one on stretched axes.
    """
    if isinstance(b, numbers.Number):
        return _scale(a, b)
    if isinstance(a, numbers.Number):
        return _scale(b, a)
    broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Tensor._result(a.data * b.data, (a, b), _backward, 'mul')


def _reduce_sum(a, axis, keepdims):
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, 'sum')


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor._result(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a):
    """
    Swap the last two axes, i.e. [M, L] -> [L, M] (batched inputs keep their leading axes).
    """
    if a.ndim < 2:
        raise DimensionError('transpose needs at least two axes, got shape {0}'.format(a.shape))
    return Tensor._result(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), 'transpose')


def affine(x, weight, bias=None):
    """
    y = x W^T + b, computed per row of `x`.

    :param x: Tensor of shape [..., C_in]
    :param weight: Tensor of shape [C_out, C_in]
    :param bias: optional Tensor of shape [C_out]
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError('affine: input shape {0} does not match weight shape {1}'.format(
            x.shape, weight.shape))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError('affine: bias shape {0} does not match weight shape {1}'.format(
            bias.shape, weight.shape))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        gb = g2.sum(axis=0) if bias is not None else None
        return g @ weight.data, g2.T @ x2, gb
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, _backward, 'affine')


def conv1d_output_length(length, kernel_size, stride=1, padding=0):
    return (length + 2 * padding - kernel_size) // stride + 1


def conv1d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """
    One-dimensional cross-correlation.

    :param x: Tensor of shape [C_in, L] or [B, C_in, L]
    :param weight: Tensor of shape [C_out, C_in / groups, k]
    :param bias: optional Tensor of shape [C_out]

    With `groups == C_in == C_out` this is a depthwise convolution, with `k == 1` and
    `groups == 1` a pointwise one. The output length is
    `floor((L + 2 * padding - k) / stride) + 1`.
    """
    if x.ndim not in (2, 3) or weight.ndim != 3:
        raise DimensionError('conv1d: unsupported shapes {0} and {1}'.format(
            x.shape, weight.shape))
    if groups < 1 or stride < 1 or padding < 0:
        raise ConfigurationError('conv1d: invalid groups={0}, stride={1}, padding={2}'.format(
            groups, stride, padding))
    c_out, c_group, k = weight.shape
    c_in, length = x.shape[-2:]
    if c_in % groups or c_out % groups:
        raise ConfigurationError(
            'conv1d: channels ({0} in, {1} out) are not divisible by groups={2}'.format(
                c_in, c_out, groups))
    if c_group * groups != c_in:
        raise DimensionError('conv1d: input shape {0} does not match weight shape {1}'.format(
            x.shape, weight.shape))
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError('conv1d: bias shape {0} does not match weight shape {1}'.format(
            bias.shape, weight.shape))
    if length + 2 * padding < k:
        raise InputTooShortError(length, k - 2 * padding, what='conv1d input')
    l_out = conv1d_output_length(length, k, stride, padding)

    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    n = xd.shape[0]
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    cols = sliding_window_view(xd, k, axis=2)[:, :, ::stride][:, :, :l_out]
    cols = cols.reshape(n, groups, c_group, l_out, k)
    w = weight.data.reshape(groups, c_out // groups, c_group, k)
    out = np.einsum('bgclk,gock->bgol', cols, w).reshape(n, c_out, l_out)
    if bias is not None:
        out = out + bias.data[:, None]
    if not batched:
        out = out[0]

    def _backward(g):
        g = (g if batched else g[None]).reshape(n, groups, c_out // groups, l_out)
        gw = np.einsum('bgol,bgclk->gock', g, cols).reshape(weight.shape)
        gcols = np.einsum('bgol,gock->bgclk', g, w).reshape(n, c_in, l_out, k)
        gx = np.zeros((n, c_in, length + 2 * padding), dtype=x.dtype)
        for j in range(k):
            gx[:, :, j:j + stride * (l_out - 1) + 1:stride] += gcols[..., j]
        gx = gx[:, :, padding:padding + length]
        gb = g.sum(axis=(0, 3)).reshape(c_out) if bias is not None else None
        return gx if batched else gx[0], gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, _backward, 'conv1d')


class RunningStats(object):
    """
    Running per-channel mean and variance of a batch-norm layer.

    Statistics are undefined until the first update in train mode.
    """
    def __init__(self, channels, momentum=0.1):
        self.channels = channels
        self.momentum = momentum
        self.mean = None
        self.var = None
        self.count = 0

    @property
    def initialized(self):
        return self.count > 0

    def update(self, mean, var):
        if self.mean is None:
            self.mean = np.zeros_like(mean)
            self.var = np.ones_like(var)
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * mean
        self.var = (1 - m) * self.var + m * var
        self.count += 1


def batch_norm1d(x, gamma, beta, running_stats, training, eps=BATCH_NORM_EPS):
    """
    Normalize each channel of x ([B, C, L]) over batch and time.

    In train mode the batch moments are used and `running_stats` is updated (the running
    variance uses the unbiased estimate); in eval mode the running statistics are used.
    """
    if x.ndim != 3 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise DimensionError('batch_norm1d: input shape {0} does not match parameters {1}'.format(
            x.shape, gamma.shape))
    axes = (0, 2)
    g_shape = (1, -1, 1)
    if training:
        n = x.shape[0] * x.shape[2]
        if n < 2:
            raise DimensionError(
                'batch_norm1d: train mode needs at least two values per channel, '
                'got input shape {0}'.format(x.shape))
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_stats.update(mean, var * (n / (n - 1)))
    else:
        if not running_stats.initialized:
            raise StateError('batch_norm1d: running statistics are uninitialized; '
                             'run a train-mode step or calibrate first')
        mean, var = running_stats.mean, running_stats.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(g_shape)) * inv_std.reshape(g_shape)
    out = gamma.data.reshape(g_shape) * xhat + beta.data.reshape(g_shape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(g_shape)
        if training:
            n = x.shape[0] * x.shape[2]
            gx = (inv_std.reshape(g_shape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(g_shape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(g_shape))
        else:
            gx = gxhat * inv_std.reshape(g_shape)
        return gx, ggamma, gbeta
    return Tensor._result(out, (x, gamma, beta), _backward, 'batch_norm1d')


def adaptive_avg_pool(x):
    """
    Mean over the last axis: [M, L] -> [M, 1].
    """
    length = x.shape[-1]
    if length < 1:
        raise DimensionError('adaptive_avg_pool: empty input of shape {0}'.format(x.shape))
    return Tensor._result(
        x.data.mean(axis=-1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / length, x.shape).copy(),),
        'avg_pool')


def adaptive_std_pool(x, eps=STD_POOL_EPS):
    """
    Population standard deviation over the last axis, `sqrt(var + eps)`: [M, L] -> [M, 1].

    A single-sample row has variance zero.
    """
    length = x.shape[-1]
    if length < 1:
        raise DimensionError('adaptive_std_pool: empty input of shape {0}'.format(x.shape))
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)

    def _backward(g):
        with np.errstate(divide='ignore', invalid='ignore'):
            local = np.where(std > 0, centered / (length * std), 0.0)
        return (g * local,)
    return Tensor._result(std, (x,), _backward, 'std_pool')


def global_avg_pool_time(x):
    """
    Mean over time: [C, L] -> [C] (or [B, C, L] -> [B, C]).
    """
    return x.mean(axis=-1)


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError('softmax: axis {0} invalid for shape {1}'.format(axis, x.shape))
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor._result(y, (x,), _backward, 'softmax')


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(y, (x,), lambda g: (g * y * (1.0 - y),), 'sigmoid')
