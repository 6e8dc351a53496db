"""
Synthetic planar motion and the IMU readings a body-fixed sensor would record.

A motion profile is a list of segments. Within a segment the turn rate is constant and the
speed ramps linearly from the speed at the segment start to the segment's `speed`, so the
trajectory can be integrated in closed form. The body x axis points along the direction
of travel, z points up:

- gyro = (0, 0, turn rate) + bias + noise,
- accel = (tangential acceleration, speed * turn rate, g or 0) + bias + noise.

Gravity is removed from the accelerometer by default (`gravity: false`). With
`step_frequency_hz` set, the accelerometer also records a walking gait riding on the
smooth path: a vertical bounce of `bounce_per_speed * speed` and a forward sway of `sway`,
both oscillating in phase at the step frequency. The ground truth follows the smooth path.

Orientation is the yaw rotation from body to world frame, as unit quaternions
(w, x, y, z).

Ground-truth velocity sample k is the mean velocity over [t_k, t_k + dt), so summing
velocity samples times dt reproduces positions exactly.
"""
import typing
import dataclasses

import numpy as np

from dwstrack.data import ImuSequence
from dwstrack.errors import ValidationError

__all__ = ['Segment', 'RandomWalk', 'MotionProfile', 'synthesize', 'GRAVITY']

GRAVITY = 9.80665


def _float(d, key, field, default=None):
    value = d.get(key, default)
    if value is None:
        raise ValidationError(field, 'missing value')
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ValidationError(field, 'expected a number, got {0!r}'.format(value))


def _vector(d, key, field, size=3):
    value = d.get(key, [0.0] * size)
    if isinstance(value, (int, float)):
        value = [value] * size
    if not isinstance(value, (list, tuple)) or len(value) != size:
        raise ValidationError(field, 'expected {0} numbers, got {1!r}'.format(size, value))
    return tuple(float(v) for v in value)


def _range(d, key, field):
    value = d.get(key)
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValidationError(field, 'expected [min, max], got {0!r}'.format(value))
    lo, hi = float(value[0]), float(value[1])
    if lo > hi:
        raise ValidationError(field, 'min {0} exceeds max {1}'.format(lo, hi))
    return lo, hi


@dataclasses.dataclass
class Segment:
    duration_s: float
    speed: float
    turn_rate: float = 0.0
    start_speed: typing.Optional[float] = None


@dataclasses.dataclass
class RandomWalk:
    """
    Recipe for random walks with turns: segment durations, end speeds and turn rates are
    drawn uniformly from the given ranges until `duration_s` is covered.
    """
    duration_s: float
    segment_s: typing.Tuple[float, float] = (2.0, 6.0)
    speed: typing.Tuple[float, float] = (0.5, 1.5)
    turn_rate: typing.Tuple[float, float] = (-0.8, 0.8)
    straight_fraction: float = 0.4

    def segments(self, rng):
        segments, elapsed = [], 0.0
        while elapsed < self.duration_s - 1e-9:
            duration = min(rng.uniform(*self.segment_s), self.duration_s - elapsed)
            speed = rng.uniform(*self.speed)
            turn = 0.0 if rng.uniform() < self.straight_fraction else rng.uniform(*self.turn_rate)
            segments.append(Segment(duration_s=duration, speed=speed, turn_rate=turn))
            elapsed += duration
        return segments


@dataclasses.dataclass
class MotionProfile:
    segments: typing.List[Segment] = dataclasses.field(default_factory=list)
    sample_rate_hz: float = 200.0
    initial_heading: float = 0.0
    gyro_noise_std: float = 0.0
    accel_noise_std: float = 0.0
    gyro_bias: typing.Tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias: typing.Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gravity: bool = False
    random_walk: typing.Optional[RandomWalk] = None
    # 0 disables the gait oscillation.
    step_frequency_hz: float = 0.0
    bounce_per_speed: float = 2.0
    sway: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.sample_rate_hz > 0:
            raise ValidationError('sample_rate_hz', 'must be positive')
        for name in ('gyro_noise_std', 'accel_noise_std', 'step_frequency_hz',
                     'bounce_per_speed', 'sway'):
            if getattr(self, name) < 0:
                raise ValidationError(name, 'must not be negative')
        if self.step_frequency_hz >= self.sample_rate_hz / 2:
            raise ValidationError('step_frequency_hz', 'must be below half the sample rate')
        if not self.segments and self.random_walk is None:
            raise ValidationError('segments', 'a profile needs segments or a random_walk')
        for i, seg in enumerate(self.segments):
            if not seg.duration_s > 0:
                raise ValidationError('segments[{0}].duration_s'.format(i), 'must be positive')
            if seg.speed < 0:
                raise ValidationError('segments[{0}].speed'.format(i),
                                      'negative speed {0}'.format(seg.speed))
            if seg.start_speed is not None and seg.start_speed < 0:
                raise ValidationError('segments[{0}].start_speed'.format(i),
                                      'negative speed {0}'.format(seg.start_speed))
        if self.random_walk is not None:
            rw = self.random_walk
            if not rw.duration_s > 0:
                raise ValidationError('random_walk.duration_s', 'must be positive')
            if rw.segment_s[0] <= 0:
                raise ValidationError('random_walk.segment_s', 'must be positive')
            if rw.speed[0] < 0:
                raise ValidationError('random_walk.speed', 'negative speed {0}'.format(
                    rw.speed[0]))

    @property
    def duration_s(self):
        return sum(seg.duration_s for seg in self.segments)

    def realize(self, rng):
        """
        A profile with explicit segments; random-walk profiles draw theirs from `rng`.
        """
        if self.segments:
            return self
        return dataclasses.replace(
            self, segments=self.random_walk.segments(rng), random_walk=None)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ValidationError('profile', 'expected a mapping')
        known = set(f.name for f in dataclasses.fields(cls))
        unknown = set(d) - known
        if unknown:
            raise ValidationError(sorted(unknown)[0], 'unknown profile field')
        segments = []
        for i, s in enumerate(d.get('segments') or []):
            field = 'segments[{0}]'.format(i)
            if not isinstance(s, dict):
                raise ValidationError(field, 'expected a mapping')
            segments.append(Segment(
                duration_s=_float(s, 'duration_s', field + '.duration_s'),
                speed=_float(s, 'speed', field + '.speed'),
                turn_rate=_float(s, 'turn_rate', field + '.turn_rate', 0.0),
                start_speed=None if s.get('start_speed') is None
                else _float(s, 'start_speed', field + '.start_speed')))
        random_walk = None
        if d.get('random_walk') is not None:
            rw = d['random_walk']
            defaults = RandomWalk(duration_s=1.0)
            random_walk = RandomWalk(
                duration_s=_float(rw, 'duration_s', 'random_walk.duration_s'),
                segment_s=_range(rw, 'segment_s', 'random_walk.segment_s')
                if 'segment_s' in rw else defaults.segment_s,
                speed=_range(rw, 'speed', 'random_walk.speed')
                if 'speed' in rw else defaults.speed,
                turn_rate=_range(rw, 'turn_rate', 'random_walk.turn_rate')
                if 'turn_rate' in rw else defaults.turn_rate,
                straight_fraction=_float(
                    rw, 'straight_fraction', 'random_walk.straight_fraction',
                    defaults.straight_fraction))
        return cls(
            segments=segments,
            sample_rate_hz=_float(d, 'sample_rate_hz', 'sample_rate_hz', 200.0),
            initial_heading=_float(d, 'initial_heading', 'initial_heading', 0.0),
            gyro_noise_std=_float(d, 'gyro_noise_std', 'gyro_noise_std', 0.0),
            accel_noise_std=_float(d, 'accel_noise_std', 'accel_noise_std', 0.0),
            gyro_bias=_vector(d, 'gyro_bias', 'gyro_bias'),
            accel_bias=_vector(d, 'accel_bias', 'accel_bias'),
            gravity=bool(d.get('gravity', False)),
            random_walk=random_walk,
            step_frequency_hz=_float(d, 'step_frequency_hz', 'step_frequency_hz', 0.0),
            bounce_per_speed=_float(d, 'bounce_per_speed', 'bounce_per_speed', 2.0),
            sway=_float(d, 'sway', 'sway', 1.0))


def _displacement(speed, accel, heading, turn_rate, tau):
    """
    Closed-form integral of (speed + accel t) (cos, sin)(heading + turn_rate t) over [0, tau].
    """
    c0, s0 = np.cos(heading), np.sin(heading)
    if abs(turn_rate) < 1e-12:
        dist = speed * tau + 0.5 * accel * tau * tau
        return np.stack([dist * c0, dist * s0], axis=-1)
    w = turn_rate
    theta = heading + w * tau
    c, s = np.cos(theta), np.sin(theta)
    dx = speed / w * (s - s0) + accel * (tau * s / w + (c - c0) / (w * w))
    dy = speed / w * (c0 - c) + accel * (-tau * c / w + (s - s0) / (w * w))
    return np.stack([dx, dy], axis=-1)


def _kinematics(profile, times):
    """
    Position, heading, speed, tangential acceleration and turn rate at `times`; the last
    segment extends past its end.
    """
    n = len(times)
    pos = np.zeros((n, 2))
    heading, speed, accel, turn = np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n)
    start_pos = np.zeros(2)
    start_heading = profile.initial_heading
    start_time = 0.0
    previous_speed = None
    for i, seg in enumerate(profile.segments):
        v0 = seg.start_speed if seg.start_speed is not None else (
            seg.speed if previous_speed is None else previous_speed)
        a = (seg.speed - v0) / seg.duration_s
        end_time = start_time + seg.duration_s
        last = i == len(profile.segments) - 1
        mask = times >= start_time
        if not last:
            mask &= times < end_time
        tau = times[mask] - start_time
        pos[mask] = start_pos + _displacement(v0, a, start_heading, seg.turn_rate, tau)
        heading[mask] = start_heading + seg.turn_rate * tau
        speed[mask] = v0 + a * tau
        accel[mask] = a
        turn[mask] = seg.turn_rate
        start_pos = start_pos + _displacement(
            v0, a, start_heading, seg.turn_rate, np.array(seg.duration_s))
        start_heading += seg.turn_rate * seg.duration_s
        start_time = end_time
        previous_speed = seg.speed
    return pos, heading, speed, accel, turn


def synthesize(profile, seed=0, sequence_id='synthetic'):
    """
    Simulate the profile and return an `ImuSequence` with noise-free ground truth.

    Only the sensor noise depends on `seed` (and, for random-walk profiles, the drawn
    segments).
    """
    rng = np.random.default_rng(seed)
    profile = profile.realize(rng)
    rate = profile.sample_rate_hz
    count = int(round(profile.duration_s * rate))
    if count < 1:
        raise ValidationError('segments', 'profile is shorter than one sample')
    times = np.arange(count + 1) / rate
    pos, heading, speed, accel, turn = _kinematics(profile, times)
    heading, speed, accel, turn = heading[:count], speed[:count], accel[:count], turn[:count]

    gyro = np.zeros((count, 3))
    gyro[:, 2] = turn
    body_accel = np.zeros((count, 3))
    body_accel[:, 0] = accel
    body_accel[:, 1] = speed * turn
    if profile.gravity:
        body_accel[:, 2] = GRAVITY
    if profile.step_frequency_hz > 0:
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * profile.step_frequency_hz * times[:count] + phase)
        body_accel[:, 0] += profile.sway * wave
        body_accel[:, 2] += profile.bounce_per_speed * speed * wave
    gyro += np.array(profile.gyro_bias) + rng.normal(0.0, profile.gyro_noise_std, gyro.shape)
    body_accel += np.array(profile.accel_bias) + \
        rng.normal(0.0, profile.accel_noise_std, body_accel.shape)

    return ImuSequence(
        sequence_id=sequence_id,
        sample_rate_hz=rate,
        gyro=gyro,
        accel=body_accel,
        gt_position=pos[:count],
        gt_velocity=np.diff(pos, axis=0) * rate,
        orientation=np.stack([
            np.cos(heading / 2), np.zeros(count), np.zeros(count), np.sin(heading / 2)], axis=1))
