"""
Layers with learnable parameters and a registry of stable parameter names.
"""
import collections

import numpy as np

from dwstrack.tensor import (
    Tensor, RunningStats, parameter, affine, conv1d, conv1d_output_length, batch_norm1d,
)
from dwstrack.errors import ConfigurationError, DimensionError

__all__ = ['Module', 'Stack', 'Conv1d', 'BatchNorm1d', 'Affine', 'init_uniform']


def init_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module(object):
    """
    Base class of all layers and blocks.

    Attributes holding parameter tensors, sub-modules or running statistics are registered
    in assignment order; names are joined with dots, e.g. `stages.0.1.star.expand_a.weight`.
    """
    def __init__(self):
        object.__setattr__(self, '_parameters', collections.OrderedDict())
        object.__setattr__(self, '_modules', collections.OrderedDict())
        object.__setattr__(self, '_stats', collections.OrderedDict())
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, RunningStats):
            self._stats[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)

    def forward(self, *args, **kw):  # pragma: no cover
        raise NotImplementedError()

    def named_modules(self, prefix=''):
        yield prefix, self
        for name, module in self._modules.items():
            yield from module.named_modules(prefix + name + '.')

    def named_parameters(self):
        for prefix, module in self.named_modules():
            for name, p in module._parameters.items():
                yield prefix + name, p

    def parameters(self):
        return collections.OrderedDict(self.named_parameters())

    def named_stats(self):
        for prefix, module in self.named_modules():
            for name, stats in module._stats.items():
                yield prefix + name, stats

    def count_parameters(self):
        return sum(p.size for _, p in self.named_parameters())

    def train(self, mode=True):
        for _, module in self.named_modules():
            object.__setattr__(module, 'training', mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self):
        """
        Parameters and running statistics as a flat dict of numpy arrays.
        """
        state = collections.OrderedDict()
        for name, p in self.named_parameters():
            state['param/' + name] = np.array(p.data)
        for name, stats in self.named_stats():
            if stats.initialized:
                state['stats/{0}/mean'.format(name)] = np.array(stats.mean)
                state['stats/{0}/var'.format(name)] = np.array(stats.var)
            state['stats/{0}/count'.format(name)] = np.array(stats.count)
        return state

    def load_state_dict(self, state):
        params = self.parameters()
        expected = set('param/' + name for name in params)
        found = set(k for k in state if k.startswith('param/'))
        if expected != found:
            raise DimensionError('parameter names differ: missing {0}, unexpected {1}'.format(
                sorted(expected - found), sorted(found - expected)))
        dtype = np.float32
        for name, p in params.items():
            p.assign(state['param/' + name])
            dtype = p.dtype
        for name, stats in self.named_stats():
            stats.count = int(state.get('stats/{0}/count'.format(name), 0))
            if stats.count:
                stats.mean = np.array(state['stats/{0}/mean'.format(name)], dtype=dtype)
                stats.var = np.array(state['stats/{0}/var'.format(name)], dtype=dtype)
            else:
                stats.mean = stats.var = None


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, groups=1,
                 bias=True, rng=None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                'Conv1d: channels ({0} in, {1} out) are not divisible by groups={2}'.format(
                    in_channels, out_channels, groups))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.groups = \
            kernel_size, stride, padding, groups
        fan_in = in_channels // groups * kernel_size
        self.weight = parameter(
            init_uniform(rng, (out_channels, in_channels // groups, kernel_size), fan_in))
        self.bias = parameter(init_uniform(rng, (out_channels,), fan_in)) if bias else None

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_length(self, length):
        return conv1d_output_length(length, self.kernel_size, self.stride, self.padding)

    def flops(self, length):
        """
        Multiply-accumulates: C_out * (C_in / groups) * k per output position.
        """
        return self.out_channels * (self.in_channels // self.groups) * self.kernel_size * \
            self.output_length(length)


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running = RunningStats(channels, momentum=momentum)

    def forward(self, x):
        return batch_norm1d(x, self.gamma, self.beta, self.running, self.training)

    def flops(self, length):
        """
        One scale-and-shift per element.
        """
        return self.channels * length


class Affine(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, zero_bias=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = parameter(init_uniform(rng, (out_features, in_features), in_features))
        if bias:
            self.bias = parameter(
                np.zeros(out_features) if zero_bias
                else init_uniform(rng, (out_features,), in_features))
        else:
            self.bias = None

    def forward(self, x):
        return affine(x, self.weight, self.bias)

    def flops(self):
        return self.in_features * self.out_features


class Stack(Module):
    """
    An ordered container of modules, named by position, applied in sequence.
    """
    def __init__(self, modules=()):
        super().__init__()
        for i, module in enumerate(modules):
            setattr(self, str(i), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, index):
        return list(self._modules.values())[index]

    def forward(self, x):
        for module in self:
            x = module(x)
        return x
