"""
Run configuration.

A configuration is a YAML document with the sections `model`, `train`, `data` and `eval`:

.. code-block:: yaml

    model:
      stage_widths: [24, 48, 96, 416]
      enable_msgcu: true
    train:
      lr: 0.001
      patience: 10
    data:
      window_len: 200
    eval:
      rte_interval_s: 60

Settings are resolved with increasing precedence from `DEFAULTS`, the configuration file and
command-line overrides. The window length is a `data` setting and is passed on to the model.
"""
import copy
import logging
import pathlib

from dwstrack.data import FRAMES
from dwstrack.model import ModelConfig
from dwstrack.train import TrainConfig
from dwstrack.util import read_yaml
from dwstrack.errors import ConfigurationError

__all__ = [
    'DEFAULTS', 'load_config', 'merge', 'model_config', 'train_config', 'data_settings',
    'eval_settings']

log = logging.getLogger(__name__)


def _model_defaults():
    d = ModelConfig().to_dict()
    del d['window_len']
    return d


DEFAULTS = dict(
    model=_model_defaults(),
    train=TrainConfig().to_dict(),
    data=dict(
        window_len=200,
        # null: window_len // 2
        train_stride=None,
        # null: window_len when tiling, window_len // 2 with overlap fusion
        eval_stride=None,
        sample_rate_hz=200.0,
        # body, or world: rotate gyro and accel by the sequence orientation
        frame='body',
    ),
    eval=dict(
        rte_interval_s=60.0,
        fuse_overlap=False,
    ),
)


def merge(config, updates, source='configuration'):
    """
    Update the sections of `config` in place; unknown sections or keys are an error.
    """
    if not isinstance(updates, dict):
        raise ConfigurationError('{0}: expected a mapping of sections'.format(source))
    for section, values in updates.items():
        if section not in DEFAULTS:
            raise ConfigurationError('{0}: unknown section {1!r}'.format(source, section))
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigurationError('{0}: section {1!r} must be a mapping'.format(
                source, section))
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigurationError('{0}: unknown key {1}.{2}'.format(source, section, key))
            config[section][key] = value
    return config


def load_config(path=None, overrides=None):
    """
    Resolve the configuration from defaults, an optional YAML file and overrides.

    :param overrides: nested dict of section -> key -> value, e.g. from command-line flags
    """
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = pathlib.Path(path)
        if not path.exists():
            raise FileNotFoundError('configuration file {0} does not exist'.format(path))
        merge(config, read_yaml(path), source=str(path))
        log.debug('configuration read from %s', path)
    if overrides:
        merge(config, overrides, source='command line')
    model_config(config)
    train_config(config)
    data_settings(config)
    return config


def model_config(config):
    return ModelConfig.from_dict(dict(config['model'], window_len=config['data']['window_len']))


def train_config(config):
    return TrainConfig.from_dict(config['train'])


def data_settings(config):
    """
    The `data` section with strides resolved and the input frame checked.
    """
    data = dict(config['data'])
    window_len = int(data['window_len'])
    if window_len < 1:
        raise ConfigurationError('data.window_len must be positive')
    data['window_len'] = window_len
    data['train_stride'] = int(data['train_stride'] or max(window_len // 2, 1))
    if data['frame'] not in FRAMES:
        raise ConfigurationError('data.frame must be one of {0}, got {1!r}'.format(
            FRAMES, data['frame']))
    if data['eval_stride'] is not None:
        data['eval_stride'] = int(data['eval_stride'])
    for key in ('train_stride', 'eval_stride'):
        if data[key] is not None and not 0 < data[key] <= window_len:
            raise ConfigurationError('data.{0} must be in [1, window_len], got {1}'.format(
                key, data[key]))
    return data


def eval_settings(config):
    data = data_settings(config)
    return dict(
        window_len=data['window_len'],
        rte_interval_s=float(config['eval']['rte_interval_s']),
        fuse_overlap=bool(config['eval']['fuse_overlap']),
        stride=data['eval_stride'])
