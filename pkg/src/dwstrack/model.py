"""
The DWSFormer network.

A window of IMU readings ([B, 6, L]) passes a kernel-3 stem convolution and four stages of
Dual-Wing Star Transform Blocks (DWSTB). Stages are joined by stride-3 convolutions with
batch norm, which shorten the sequence and widen the channels. Global average pooling over
time and an affine head yield the mean velocity of the window.

Each DWSTB computes

    x' = x + project(dual_wing_attention(star(x)))
    out = x' + msgcu(x')

where `star` multiplies two pointwise expansions of a depthwise-filtered input (the Star
Operation), the dual-wing attention gates the expanded features per channel and per time
step, and the MSGCU modulates a depthwise value branch with a softmax channel gate.
"""
import typing
import fractions
import dataclasses

import numpy as np

from dwstrack.tensor import (
    no_grad, reshape, transpose, sigmoid, softmax, adaptive_avg_pool, adaptive_std_pool,
    global_avg_pool_time, parameter,
)
from dwstrack.layers import Module, Stack, Conv1d, BatchNorm1d, Affine
from dwstrack.errors import ConfigurationError, DimensionError, InputTooShortError

__all__ = [
    'ModelConfig', 'StarOperation', 'Wing', 'DualWingAttention', 'MSGCU', 'DWSTB',
    'Downsample', 'DwsformerModel', 'quadratic_terms']

DOWNSAMPLE_STRIDE = 3
STEM_KERNEL = 3


def _rational(value, field):
    try:
        return fractions.Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError('{0} must be a rational number, got {1!r}'.format(field, value))


@dataclasses.dataclass
class ModelConfig:
    """
    Architectural hyperparameters.

    `star_expansion` and `gate_hidden_ratio` accept rationals such as `2`, `0.25` or `'1/4'`.
    """
    in_channels: int = 6
    window_len: int = 200
    stage_widths: typing.List[int] = dataclasses.field(default_factory=lambda: [24, 48, 96, 416])
    stage_depths: typing.List[int] = dataclasses.field(default_factory=lambda: [2, 2, 2, 2])
    star_expansion: typing.Any = 2
    dw_kernel: int = 3
    wing_kernel: int = 3
    gate_hidden_ratio: typing.Any = '1/4'
    output_dim: int = 2
    enable_msgcu: bool = True
    star_batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.stage_depths = [int(d) for d in self.stage_depths]
        self.validate()

    def validate(self):
        if not self.stage_widths or len(self.stage_widths) != len(self.stage_depths):
            raise ConfigurationError('stage_widths {0} and stage_depths {1} must be non-empty '
                                     'and of equal length'.format(
                                         self.stage_widths, self.stage_depths))
        if any(w < 1 for w in self.stage_widths) or any(d < 0 for d in self.stage_depths):
            raise ConfigurationError('invalid stage widths {0} or depths {1}'.format(
                self.stage_widths, self.stage_depths))
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigurationError(
                'stage_widths must be non-decreasing, got {0}'.format(self.stage_widths))
        for name in ('dw_kernel', 'wing_kernel'):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigurationError('{0} must be odd and positive, got {1}'.format(name, k))
        if self.output_dim not in (2, 3):
            raise ConfigurationError(
                'output_dim must be 2 or 3, got {0}'.format(self.output_dim))
        if self.in_channels < 1:
            raise ConfigurationError('in_channels must be positive')
        if _rational(self.star_expansion, 'star_expansion') <= 0:
            raise ConfigurationError('star_expansion must be positive')
        for width in self.stage_widths:
            self.expanded_width(width)
            self.gate_hidden_width(width)
        if self.window_len < self.min_window_len:
            raise ConfigurationError('window_len {0} is below the minimum {1}'.format(
                self.window_len, self.min_window_len))

    def expanded_width(self, channels):
        """
        M = r * C, the width of the star product.
        """
        m = _rational(self.star_expansion, 'star_expansion') * channels
        if m.denominator != 1:
            raise ConfigurationError(
                'star_expansion {0} times width {1} is not an integer'.format(
                    self.star_expansion, channels))
        return int(m)

    def gate_hidden_width(self, channels):
        hidden = int(_rational(self.gate_hidden_ratio, 'gate_hidden_ratio') * channels)
        if hidden < 1:
            raise ConfigurationError(
                'gate_hidden_ratio {0} leaves no hidden unit at width {1}'.format(
                    self.gate_hidden_ratio, channels))
        return hidden

    @property
    def num_stages(self):
        return len(self.stage_widths)

    @property
    def min_window_len(self):
        """
        Shortest window for which every stage-joining convolution keeps the reference
        reduction schedule (27 for four stages).
        """
        return DOWNSAMPLE_STRIDE ** (self.num_stages - 1)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d['star_expansion'] = str(d['star_expansion'])
        d['gate_hidden_ratio'] = str(d['gate_hidden_ratio'])
        return d

    @classmethod
    def from_dict(cls, d):
        fields = set(f.name for f in dataclasses.fields(cls))
        unknown = set(d) - fields
        if unknown:
            raise ConfigurationError('unknown model settings: {0}'.format(sorted(unknown)))
        return cls(**d)


def quadratic_terms(dimension):
    """
    The distinct monomials x_i * x_j (i <= j) in the product of two linear forms over a
    `dimension`-dimensional (augmented) input, as index pairs; there are n (n + 1) / 2.
    """
    return [(i, j) for i in range(dimension) for j in range(i, dimension)]


def _as_batch(x):
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError('expected a [C, L] or [B, C, L] tensor, got shape {0}'.format(x.shape))


def _unbatch(x, squeeze):
    return reshape(x, x.shape[1:]) if squeeze else x


def _check_width(module, x, channels):
    if x.shape[-2] != channels:
        raise DimensionError('{0} of width {1} got input of shape {2}'.format(
            module.__class__.__name__, channels, x.shape))


class StarOperation(Module):
    """
    Depthwise conv -> batch norm -> two pointwise convs C -> M, multiplied elementwise,
    -> pointwise projection M -> C.
    """
    def __init__(self, channels, config, rng):
        super().__init__()
        self.channels = channels
        self.width = config.expanded_width(channels)
        k = config.dw_kernel
        self.dwconv = Conv1d(channels, channels, k, padding=k // 2, groups=channels, rng=rng)
        self.norm = BatchNorm1d(channels) if config.star_batch_norm else None
        self.expand_a = Conv1d(channels, self.width, 1, rng=rng)
        self.expand_b = Conv1d(channels, self.width, 1, rng=rng)
        self.project = Conv1d(self.width, channels, 1, rng=rng)

    def local(self, x):
        x, squeeze = _as_batch(x)
        _check_width(self, x, self.channels)
        x = self.dwconv(x)
        if self.norm is not None:
            x = self.norm(x)
        return _unbatch(x, squeeze)

    def expand(self, x):
        """
        The product stage: [C, L] -> [M, L].
        """
        x = self.local(x)
        return self.expand_a(x) * self.expand_b(x)

    def forward(self, x):
        return self.project(self.expand(x))

    def flop_breakdown(self, length, prefix=''):
        yield prefix + 'dwconv', self.dwconv.flops(length)
        if self.norm is not None:
            yield prefix + 'norm', self.norm.flops(length)
        yield prefix + 'expand_a', self.expand_a.flops(length)
        yield prefix + 'expand_b', self.expand_b.flops(length)
        yield prefix + 'product', self.width * length
        yield prefix + 'project', self.project.flops(length)


class Wing(Module):
    """
    Gate over the rows of a [R, S] feature map: mu * mean + xi * std over S, a single
    feature convolution along R and a sigmoid yield weights in (0, 1) of shape [R, 1].
    """
    def __init__(self, kernel, rng):
        super().__init__()
        self.mu = parameter([1.0])
        self.xi = parameter([0.0])
        self.conv = Conv1d(1, 1, kernel, padding=kernel // 2, rng=rng)

    def forward(self, x):
        scalar_shape = (1,) * x.ndim
        pooled = adaptive_avg_pool(x) * reshape(self.mu, scalar_shape) + \
            adaptive_std_pool(x) * reshape(self.xi, scalar_shape)
        return transpose(sigmoid(self.conv(transpose(pooled))))

    def flop_breakdown(self, rows, cols, prefix=''):
        yield prefix + 'pool', 3 * rows * cols + 2 * rows
        yield prefix + 'conv', self.conv.flops(rows)
        yield prefix + 'sigmoid', rows


class DualWingAttention(Module):
    """
    X_DWS = W_c * X + W_t * X with a channel gate W_c ([M, 1]) broadcast along time and a
    temporal gate W_t ([1, L]) computed on the transposed features and broadcast along
    channels.
    """
    def __init__(self, config, rng):
        super().__init__()
        self.channel = Wing(config.wing_kernel, rng)
        self.temporal = Wing(config.wing_kernel, rng)

    def channel_gate(self, x):
        return self.channel(x)

    def temporal_gate(self, x):
        return transpose(self.temporal(transpose(x)))

    def forward(self, x):
        return self.channel_gate(x) * x + self.temporal_gate(x) * x

    def flop_breakdown(self, channels, length, prefix=''):
        yield from self.channel.flop_breakdown(channels, length, prefix + 'channel.')
        yield from self.temporal.flop_breakdown(length, channels, prefix + 'temporal.')
        yield prefix + 'apply', 3 * channels * length


class MSGCU(Module):
    """
    Multi-scale gated convolution unit.

    The value branch is a depthwise convolution; the gating branch pools over time, passes a
    two-layer fully connected network (sigmoid in between) and a softmax over channels. The
    gate is scaled by C, so a uniform gate leaves the value branch unchanged.
    """
    def __init__(self, channels, config, rng):
        super().__init__()
        self.channels = channels
        self.hidden = config.gate_hidden_width(channels)
        k = config.dw_kernel
        self.value = Conv1d(channels, channels, k, padding=k // 2, groups=channels, rng=rng)
        self.fc1 = Affine(channels, self.hidden, rng=rng)
        self.fc2 = Affine(self.hidden, channels, rng=rng)

    def gate(self, x):
        """
        Softmax weights over channels, [B, C] (or [C] for an unbatched input).
        """
        _check_width(self, x, self.channels)
        return softmax(self.fc2(sigmoid(self.fc1(global_avg_pool_time(x)))), axis=-1)

    def forward(self, x):
        gate = self.gate(x) * float(self.channels)
        return reshape(gate, gate.shape + (1,)) * self.value(x)

    def flop_breakdown(self, length, prefix=''):
        c, h = self.channels, self.hidden
        yield prefix + 'value', self.value.flops(length)
        yield prefix + 'pool', c * length
        yield prefix + 'fc1', self.fc1.flops() + h
        yield prefix + 'fc2', self.fc2.flops()
        yield prefix + 'softmax', 2 * c
        yield prefix + 'apply', c * length


class DWSTB(Module):
    """
    Dual-Wing Star Transform Block: [C, L] -> [C, L].
    """
    def __init__(self, channels, config, rng):
        super().__init__()
        self.channels = channels
        self.star = StarOperation(channels, config, rng)
        self.attention = DualWingAttention(config, rng)
        self.msgcu = MSGCU(channels, config, rng) if config.enable_msgcu else None

    def dwsb(self, x):
        """
        The dual-wing star branch, projected back to C channels.
        """
        return self.star.project(self.attention(self.star.expand(x)))

    def forward(self, x):
        x = x + self.dwsb(x)
        if self.msgcu is None:
            return x
        return x + self.msgcu(x)

    def flop_breakdown(self, length, prefix=''):
        yield from self.star.flop_breakdown(length, prefix + 'star.')
        yield from self.attention.flop_breakdown(self.star.width, length, prefix + 'attention.')
        yield prefix + 'residual', self.channels * length
        if self.msgcu is not None:
            yield from self.msgcu.flop_breakdown(length, prefix + 'msgcu.')
            yield prefix + 'msgcu_residual', self.channels * length


class Downsample(Module):
    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.conv = Conv1d(in_channels, out_channels, 3, stride=DOWNSAMPLE_STRIDE, padding=1,
                           rng=rng)
        self.norm = BatchNorm1d(out_channels)

    def forward(self, x):
        return self.norm(self.conv(x))

    def output_length(self, length):
        return self.conv.output_length(length)

    def flop_breakdown(self, length, prefix=''):
        yield prefix + 'conv', self.conv.flops(length)
        yield prefix + 'norm', self.norm.flops(self.output_length(length))


class DwsformerModel(Module):
    """
    Regress the mean velocity of IMU windows: [B, in_channels, L] -> [B, output_dim].

    .. code-block:: python

        >>> model = DwsformerModel(ModelConfig())
        >>> model.count_parameters()
        2566110
        >>> [s['length'] for s in model.stage_shapes(200)]
        [200, 67, 23, 8]
    """
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        widths = config.stage_widths
        self.stem = Conv1d(config.in_channels, widths[0], STEM_KERNEL, padding=STEM_KERNEL // 2,
                           rng=rng)
        stages, downsamples = [], []
        for i, (width, depth) in enumerate(zip(widths, config.stage_depths)):
            stages.append(Stack([DWSTB(width, config, rng) for _ in range(depth)]))
            if i + 1 < len(widths):
                downsamples.append(Downsample(width, widths[i + 1], rng))
        self.stages = Stack(stages)
        self.downsamples = Stack(downsamples)
        self.head = Affine(widths[-1], config.output_dim, rng=rng, zero_bias=True)

    def features(self, window):
        if window.ndim != 3 or window.shape[1] != self.config.in_channels:
            raise DimensionError('expected windows of shape [B, {0}, L], got {1}'.format(
                self.config.in_channels, window.shape))
        if window.shape[2] < self.config.min_window_len:
            raise InputTooShortError(window.shape[2], self.config.min_window_len, what='window')
        x = self.stem(window)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.downsamples):
                x = self.downsamples[i](x)
        return global_avg_pool_time(x)

    def forward(self, window):
        return self.head(self.features(window))

    def predict(self, window):
        """
        Forward pass without gradient tracking, as a numpy array.
        """
        with no_grad():
            return np.array(self(window).data)

    def calibrate(self, batches):
        """
        Initialize the running batch-norm statistics from train-mode passes over `batches`,
        leaving parameters untouched.
        """
        mode = self.training
        self.train()
        with no_grad():
            for batch in batches:
                self(batch)
        self.train(mode)

    def stage_shapes(self, length):
        """
        (channels, length) entering each stage for windows of `length` samples.
        """
        shapes = []
        for i, width in enumerate(self.config.stage_widths):
            shapes.append(dict(stage=i + 1, channels=width, length=length))
            if i < len(self.downsamples):
                length = self.downsamples[i].output_length(length)
        return shapes

    def flop_breakdown(self, length):
        """
        FLOPs per named layer for one window of `length` samples.

        Convolutions and affine layers count multiply-accumulates; elementwise products,
        normalization, pooling, gates and residual additions count one per output element
        (standard-deviation pooling counts two).
        """
        rows = [('stem', self.stem.flops(length))]
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage):
                rows.extend(block.flop_breakdown(length, 'stages.{0}.{1}.'.format(i, j)))
            if i < len(self.downsamples):
                rows.extend(self.downsamples[i].flop_breakdown(
                    length, 'downsamples.{0}.'.format(i)))
                length = self.downsamples[i].output_length(length)
        rows.append(('pool', self.config.stage_widths[-1] * length))
        rows.append(('head', self.head.flops()))
        return rows

    def count_flops(self, length=None):
        return sum(n for _, n in self.flop_breakdown(length or self.config.window_len))

    def msgcu_parameters(self):
        return sum(p.size for name, p in self.named_parameters() if '.msgcu.' in name)
