import numpy as np
import pytest

from dwstrack.model import ModelConfig
from dwstrack.synth import MotionProfile, Segment, synthesize


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config():
    """
    A reduced two-stage model which trains in seconds.
    """
    return ModelConfig(
        window_len=12, stage_widths=[4, 8], stage_depths=[1, 1], gate_hidden_ratio='1/2')


@pytest.fixture
def walk_profile():
    return MotionProfile(
        segments=[
            Segment(duration_s=4.0, speed=1.0),
            Segment(duration_s=3.0, speed=1.4, turn_rate=0.5),
            Segment(duration_s=3.0, speed=0.8, turn_rate=-0.3),
        ],
        sample_rate_hz=20.0,
        gyro_noise_std=0.01,
        accel_noise_std=0.05)


@pytest.fixture
def corpus(walk_profile):
    return [synthesize(walk_profile, seed=[1, i], sequence_id='seq_{0:03d}'.format(i))
            for i in range(4)]


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / 'tiny.yaml'
    path.write_text("""\
model:
  stage_widths: [4, 8]
  stage_depths: [1, 1]
  gate_hidden_ratio: '1/2'
train:
  max_epochs: 2
  batch_size: 16
data:
  window_len: 12
  sample_rate_hz: 20.0
""", encoding='utf8')
    return path


@pytest.fixture
def profile_yaml(tmp_path):
    path = tmp_path / 'profile.yaml'
    path.write_text("""\
sample_rate_hz: 20.0
gyro_noise_std: 0.01
accel_noise_std: 0.05
segments:
  - {duration_s: 4.0, speed: 1.0}
  - {duration_s: 3.0, speed: 1.4, turn_rate: 0.5}
  - {duration_s: 3.0, speed: 0.8, turn_rate: -0.3}
""", encoding='utf8')
    return path
