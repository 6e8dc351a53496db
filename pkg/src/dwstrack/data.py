"""
IMU sequences, their file format, windowing into training samples, normalization and
dataset splits.

Sequence files are plain text. The first line is a header, e.g.

    dwstrack-imu v1 rate=200 cols=gyro_x,gyro_y,gyro_z,accel_x,accel_y,accel_z,gt_vx,gt_vy

followed by one whitespace-separated row of decimal floats per sample. Ground-truth
position (`gt_px,gt_py`), velocity (`gt_vx,gt_vy`) and orientation (`ori_w,ori_x,ori_y,ori_z`)
columns are optional. Orientation is the body-to-world rotation as a quaternion; with the
`world` input frame, gyro and accel are rotated by it before windowing.
Files are named `<sequence id>.imu`.
"""
import re
import typing
import logging
import pathlib
import dataclasses

import numpy as np

from dwstrack.tensor import Tensor
from dwstrack.util import format_float, read_yaml, write_yaml
from dwstrack.errors import ParseError, ValidationError, DimensionError

__all__ = [
    'ImuSequence', 'ImuWindow', 'NormalizationStats', 'SplitSpec', 'WindowDataset',
    'load_sequence', 'write_sequence', 'make_windows', 'window_starts',
    'normalize_stats', 'apply_normalization', 'denormalize', 'make_split',
    'load_split', 'write_split', 'load_corpus', 'quaternion_matrix', 'to_frame',
    'SEQUENCE_SUFFIX', 'SPLIT_FILE', 'FRAMES']

log = logging.getLogger(__name__)

FORMAT = 'dwstrack-imu'
VERSION = 'v1'
SEQUENCE_SUFFIX = '.imu'
SPLIT_FILE = 'split.yaml'
IMU_COLUMNS = ('gyro_x', 'gyro_y', 'gyro_z', 'accel_x', 'accel_y', 'accel_z')
OPTIONAL_GROUPS = (
    ('gt_position', ('gt_px', 'gt_py')),
    ('gt_velocity', ('gt_vx', 'gt_vy')),
    ('orientation', ('ori_w', 'ori_x', 'ori_y', 'ori_z')),
)
MIN_STD = 1e-12
FRAMES = ('body', 'world')

_HEADER = re.compile(r'^{0}\s+(?P<version>v\d+)\s+rate=(?P<rate>\S+)\s+cols=(?P<cols>\S+)$'.format(
    FORMAT))


@dataclasses.dataclass
class ImuSequence:
    """
    Gyroscope (rad/s) and accelerometer (m/s^2) readings sampled at `sample_rate_hz`, with
    optional planar ground truth. Sample k is taken at time k / sample_rate_hz.
    """
    sequence_id: str
    sample_rate_hz: float
    gyro: np.ndarray
    accel: np.ndarray
    gt_position: typing.Optional[np.ndarray] = None
    gt_velocity: typing.Optional[np.ndarray] = None
    orientation: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValidationError('sample_rate_hz', 'must be positive, got {0}'.format(
                self.sample_rate_hz))
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)
        expected = dict(gyro=3, accel=3, gt_position=2, gt_velocity=2, orientation=4)
        for name, width in expected.items():
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=float)
            setattr(self, name, value)
            if value.ndim != 2 or value.shape[1] != width:
                raise DimensionError('{0} must have shape [T, {1}], got {2}'.format(
                    name, width, value.shape))
            if value.shape[0] != self.gyro.shape[0]:
                raise DimensionError('{0} has {1} samples, gyro has {2}'.format(
                    name, value.shape[0], self.gyro.shape[0]))

    def __len__(self):
        return self.gyro.shape[0]

    @property
    def dt(self):
        return 1.0 / self.sample_rate_hz

    @property
    def times(self):
        return np.arange(len(self)) / self.sample_rate_hz

    @property
    def features(self):
        """
        [6, T]: gyro xyz then accel xyz.
        """
        return np.concatenate([self.gyro, self.accel], axis=1).T

    @property
    def columns(self):
        cols = list(IMU_COLUMNS)
        for attr, names in OPTIONAL_GROUPS:
            if getattr(self, attr) is not None:
                cols.extend(names)
        return cols


def quaternion_matrix(q):
    """
    [T, 3, 3] rotation matrices of the quaternions (w, x, y, z) in the rows of `q`.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=1)
    if (norm < MIN_STD).any():
        raise ValidationError('orientation', 'zero quaternion at sample {0}'.format(
            int(np.argmax(norm < MIN_STD))))
    w, x, y, z = (q / norm[:, None]).T
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=1).reshape(-1, 3, 3)


def to_frame(seq, frame):
    """
    The sequence with gyro and accel expressed in `frame`: `body` leaves them as recorded,
    `world` rotates them by the sequence's orientation.
    """
    if frame not in FRAMES:
        raise ValidationError('frame', 'expected one of {0}, got {1!r}'.format(FRAMES, frame))
    if frame == 'body':
        return seq
    if seq.orientation is None:
        raise ValidationError('orientation', 'sequence {0} has no orientation'.format(
            seq.sequence_id))
    rotation = quaternion_matrix(seq.orientation)
    return dataclasses.replace(
        seq,
        gyro=np.einsum('tij,tj->ti', rotation, seq.gyro),
        accel=np.einsum('tij,tj->ti', rotation, seq.accel))


def write_sequence(seq, path):
    path = pathlib.Path(path)
    blocks = [seq.gyro, seq.accel] + [
        getattr(seq, attr) for attr, _ in OPTIONAL_GROUPS if getattr(seq, attr) is not None]
    data = np.concatenate(blocks, axis=1)
    with path.open('w', encoding='utf8') as f:
        f.write('{0} {1} rate={2} cols={3}\n'.format(
            FORMAT, VERSION, format_float(seq.sample_rate_hz), ','.join(seq.columns)))
        for row in data:
            f.write(' '.join(format_float(v) for v in row))
            f.write('\n')
    return path


def load_sequence(path, sequence_id=None):
    """
    Read a sequence file; the sequence id defaults to the file name without suffix.

    :raises ParseError: for a malformed header, missing or unknown columns, rows with the \
    wrong number of values or non-finite values. The message names the line number.
    """
    path = pathlib.Path(path)
    with path.open(encoding='utf8') as f:
        header = f.readline().strip()
        match = _HEADER.match(header)
        if not match:
            raise ParseError('malformed header {0!r}'.format(header), path, 1)
        if match.group('version') != VERSION:
            raise ParseError('unsupported format version {0}'.format(match.group('version')),
                             path, 1)
        try:
            rate = float(match.group('rate'))
        except ValueError:
            raise ParseError('invalid rate {0!r}'.format(match.group('rate')), path, 1)
        cols = match.group('cols').split(',')
        known = set(IMU_COLUMNS).union(*[names for _, names in OPTIONAL_GROUPS])
        for col in cols:
            if col not in known:
                raise ParseError('unknown column {0!r}'.format(col), path, 1)
        for col in IMU_COLUMNS:
            if col not in cols:
                raise ParseError('missing column {0!r}'.format(col), path, 1)
        for _, names in OPTIONAL_GROUPS:
            present = [n for n in names if n in cols]
            if present and len(present) != len(names):
                raise ParseError('incomplete column group: {0} needs {1}'.format(
                    present, ','.join(names)), path, 1)

        rows = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            tokens = line.split()
            if len(tokens) != len(cols):
                raise ParseError('expected {0} values, found {1}'.format(
                    len(cols), len(tokens)), path, lineno)
            try:
                row = [float(t) for t in tokens]
            except ValueError as e:
                raise ParseError(str(e), path, lineno)
            if not all(np.isfinite(row)):
                raise ParseError('non-finite value', path, lineno)
            rows.append(row)

    data = np.array(rows, dtype=float).reshape(len(rows), len(cols))
    index = {c: i for i, c in enumerate(cols)}

    def block(names):
        if names[0] not in index:
            return None
        return data[:, [index[n] for n in names]]

    try:
        return ImuSequence(
            sequence_id=sequence_id or path.stem,
            sample_rate_hz=rate,
            gyro=block(IMU_COLUMNS[:3]),
            accel=block(IMU_COLUMNS[3:]),
            **{attr: block(names) for attr, names in OPTIONAL_GROUPS})
    except ValidationError as e:
        raise ParseError(str(e), path, 1)


@dataclasses.dataclass
class ImuWindow:
    """
    One training sample: a [6, L] block of readings and the mean ground-truth velocity over
    the same L frames.
    """
    features: np.ndarray
    target_velocity: np.ndarray
    source: typing.Tuple[str, int]

    @classmethod
    def from_sequence(cls, seq, start, length):
        stop = start + length
        if start < 0 or stop > len(seq):
            raise DimensionError('window [{0}, {1}) exceeds sequence of length {2}'.format(
                start, stop, len(seq)))
        return cls(
            features=seq.features[:, start:stop],
            target_velocity=seq.gt_velocity[start:stop].mean(axis=0),
            source=(seq.sequence_id, start))

    @property
    def length(self):
        return self.features.shape[1]


def window_starts(length, window_len, stride):
    """
    Start indices 0, stride, 2 * stride, ... of all windows fitting into `length` samples.
    """
    if window_len < 1 or stride < 1:
        raise ValueError('window length and stride must be positive, got {0} and {1}'.format(
            window_len, stride))
    return list(range(0, length - window_len + 1, stride))


def make_windows(seq, window_len, stride):
    if seq.gt_velocity is None:
        raise ValidationError(
            'gt_velocity', 'sequence {0} has no ground-truth velocity'.format(seq.sequence_id))
    starts = window_starts(len(seq), window_len, stride)
    if not starts:
        log.warning('sequence %s has %d samples, fewer than the window length %d: no windows',
                    seq.sequence_id, len(seq), window_len)
    return [ImuWindow.from_sequence(seq, s, window_len) for s in starts]


@dataclasses.dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return dict(mean=[float(v) for v in self.mean], std=[float(v) for v in self.std])

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.array(d['mean'], dtype=float), std=np.array(d['std'], dtype=float))

    def normalize(self, features):
        return (features - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, features):
        return features * self.std[:, None] + self.mean[:, None]


def normalize_stats(train_windows):
    """
    Per-channel mean and (population) standard deviation over the given training windows.

    Channels without variation get a standard deviation of 1.
    """
    if not train_windows:
        raise ValueError('cannot compute normalization statistics without windows')
    stacked = np.stack([w.features for w in train_windows])
    mean = stacked.mean(axis=(0, 2))
    std = stacked.std(axis=(0, 2))
    flat = std < MIN_STD
    if flat.any():
        log.warning('channels %s have zero variance; their std is clamped to 1',
                    np.flatnonzero(flat).tolist())
        std = np.where(flat, 1.0, std)
    return NormalizationStats(mean=mean, std=std)


def apply_normalization(window, stats):
    return dataclasses.replace(window, features=stats.normalize(window.features))


def denormalize(window, stats):
    return dataclasses.replace(window, features=stats.denormalize(window.features))


@dataclasses.dataclass
class SplitSpec:
    train: typing.List[str]
    val: typing.List[str]
    test: typing.List[str]
    seed: int = 0

    def __post_init__(self):
        seen = {}
        for name in ('train', 'val', 'test'):
            for sid in getattr(self, name):
                if sid in seen:
                    raise ValidationError(
                        'split', 'sequence {0!r} is in both {1} and {2}'.format(
                            sid, seen[sid], name))
                seen[sid] = name

    @property
    def ids(self):
        return self.train + self.val + self.test

    def __getitem__(self, name):
        if name not in ('train', 'val', 'test'):
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self):
        return dict(seed=self.seed, train=list(self.train), val=list(self.val),
                    test=list(self.test))


def make_split(sequence_ids, seed=0, ratios=(8, 1, 1)):
    """
    Split sequence ids (never windows) into train, validation and test sets by seeded
    shuffling. Validation and test get floor(n * ratio / sum(ratios)) sequences each.
    """
    ids = sorted(sequence_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    total = sum(ratios)
    n_val = len(ids) * ratios[1] // total
    n_test = len(ids) * ratios[2] // total
    if not (n_val and n_test):
        log.warning('degenerate split of %d sequences: %d validation, %d test',
                    len(ids), n_val, n_test)
    n_train = len(ids) - n_val - n_test
    return SplitSpec(
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train:n_train + n_val]),
        test=sorted(shuffled[n_train + n_val:]),
        seed=seed)


def write_split(split, path):
    write_yaml(path, split.to_dict())


def load_split(path):
    path = pathlib.Path(path)
    d = read_yaml(path)
    for name in ('train', 'val', 'test'):
        if not isinstance(d.get(name, []), list):
            raise ValidationError(name, 'must be a list of sequence ids in {0}'.format(path))
    return SplitSpec(
        train=[str(s) for s in d.get('train', [])],
        val=[str(s) for s in d.get('val', [])],
        test=[str(s) for s in d.get('test', [])],
        seed=int(d.get('seed', 0)))


def load_corpus(data_dir, ids, frame='body'):
    """
    Load the sequences with the given ids from `data_dir`, with features in `frame`.
    """
    data_dir = pathlib.Path(data_dir)
    sequences = []
    for sid in ids:
        path = data_dir / (sid + SEQUENCE_SUFFIX)
        if not path.exists():
            raise FileNotFoundError('sequence file {0} listed in the split is missing'.format(
                path))
        sequences.append(to_frame(load_sequence(path, sequence_id=sid), frame))
    return sequences


class WindowDataset(object):
    """
    Windows stacked into arrays, with deterministic mini-batch iteration.
    """
    def __init__(self, windows):
        self.windows = list(windows)
        if self.windows:
            self.features = np.stack([w.features for w in self.windows])
            self.targets = np.stack([w.target_velocity for w in self.windows])
        else:
            self.features = np.zeros((0, len(IMU_COLUMNS), 0))
            self.targets = np.zeros((0, 2))

    @classmethod
    def from_sequences(cls, sequences, window_len, stride, stats=None):
        windows = []
        for seq in sequences:
            for window in make_windows(seq, window_len, stride):
                windows.append(apply_normalization(window, stats) if stats else window)
        return cls(windows)

    def __len__(self):
        return len(self.windows)

    def batches(self, batch_size, rng=None):
        """
        Yield (features [B, 6, L], targets [B, D]) tensors; shuffled iff `rng` is given.
        A trailing batch of a single window is merged into the one before it.
        """
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        starts = list(range(0, len(self), batch_size))
        if len(starts) > 1 and len(self) - starts[-1] == 1:
            del starts[-1]
        for start, stop in zip(starts, starts[1:] + [len(self)]):
            index = order[start:stop]
            yield Tensor(self.features[index]), Tensor(self.targets[index])
