"""
Versioned checkpoint container.

A checkpoint is a numpy `.npz` archive holding

- `format_version`: integer, currently 1,
- `meta`: a YAML document with the model configuration, input frame, normalization
  statistics, optimizer scalars and training state,
- `param/<name>`, `stats/<name>/mean|var|count`: the model state, little-endian float32,
- `adam/m/<name>`, `adam/v/<name>`: Adam moment buffers under the parameter names,
- `best/param/<name>`, `best/stats/...`: the state of the best epoch so far, present when
  it differs from the current one.

Arrays are stored losslessly, so saving and loading reproduces parameters and moment
buffers bit for bit.
"""
import typing
import logging
import pathlib
import collections
import dataclasses

import numpy as np
import yaml

from dwstrack.data import NormalizationStats, FRAMES
from dwstrack.model import ModelConfig, DwsformerModel
from dwstrack.errors import CheckpointVersionError, ConfigurationError, DimensionError

__all__ = ['Checkpoint', 'FORMAT_VERSION']

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FLOAT = '<f4'


def _float32(array):
    array = np.asarray(array)
    return array.astype(FLOAT) if array.dtype.kind == 'f' else array


@dataclasses.dataclass
class Checkpoint:
    model_config: ModelConfig
    state: typing.Dict[str, np.ndarray]
    normalization: typing.Optional[NormalizationStats] = None
    # Adam scalars (`step`, `lr`, `beta1`, `beta2`, `eps`) and moment buffers `m` and `v`.
    optimizer: typing.Optional[dict] = None
    train_state: dict = dataclasses.field(default_factory=dict)
    # Model state of the best epoch, when that is not the epoch this checkpoint was taken at.
    best_state: typing.Optional[typing.Dict[str, np.ndarray]] = None
    # See `dwstrack.data.to_frame`.
    frame: str = 'body'

    @classmethod
    def from_model(cls, model, normalization=None, optimizer=None, train_state=None,
                   frame='body'):
        return cls(
            model_config=model.config,
            state=model.state_dict(),
            normalization=normalization,
            optimizer=optimizer,
            train_state=dict(train_state or {}),
            frame=frame)

    def build_model(self):
        """
        A model in eval mode carrying the stored parameters and running statistics.
        """
        model = DwsformerModel(self.model_config)
        try:
            model.load_state_dict(self.state)
        except DimensionError as e:
            raise CheckpointVersionError(
                'checkpoint does not match its model configuration: {0}'.format(e))
        return model.eval()

    def best_checkpoint(self):
        """
        The checkpoint of the best epoch recorded in this one, without optimizer state.
        """
        if self.best_state is None:
            return self
        return type(self)(
            model_config=self.model_config,
            state=self.best_state,
            normalization=self.normalization,
            train_state=dict(self.train_state['best_train_state']),
            frame=self.frame)

    def load_into(self, model):
        if model.config.to_dict() != self.model_config.to_dict():
            raise CheckpointVersionError(
                'model configuration differs from the checkpoint: {0} != {1}'.format(
                    model.config.to_dict(), self.model_config.to_dict()))
        model.load_state_dict(self.state)
        return model

    def save(self, path):
        """
        Write the checkpoint to `path`, replacing an existing file only once the new one is
        complete.
        """
        path = pathlib.Path(path)
        meta = dict(
            model=self.model_config.to_dict(),
            frame=self.frame,
            normalization=self.normalization.to_dict() if self.normalization else None,
            optimizer=None,
            train_state=self.train_state)
        arrays = collections.OrderedDict()
        arrays['format_version'] = np.array(FORMAT_VERSION)
        for key, value in self.state.items():
            arrays[key] = _float32(value)
        if self.optimizer is not None:
            meta['optimizer'] = {
                k: v for k, v in self.optimizer.items() if k not in ('m', 'v')}
            for moment in ('m', 'v'):
                for name, value in self.optimizer[moment].items():
                    arrays['adam/{0}/{1}'.format(moment, name)] = _float32(value)
        for key, value in (self.best_state or {}).items():
            arrays['best/' + key] = _float32(value)
        arrays['meta'] = np.array(yaml.safe_dump(meta, sort_keys=False))
        tmp = path.with_name(path.name + '.tmp')
        with tmp.open('wb') as f:
            np.savez(f, **arrays)
        tmp.replace(path)
        log.info('checkpoint written to %s', path)
        return path

    @classmethod
    def load(cls, path):
        path = pathlib.Path(path)
        with np.load(str(path), allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
        if 'format_version' not in arrays or 'meta' not in arrays:
            raise CheckpointVersionError('{0} is not a dwstrack checkpoint'.format(path))
        version = int(arrays.pop('format_version'))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                '{0}: unsupported checkpoint format version {1} (expected {2})'.format(
                    path, version, FORMAT_VERSION))
        meta = yaml.safe_load(str(arrays.pop('meta')))
        try:
            config = ModelConfig.from_dict(meta['model'])
        except (ConfigurationError, TypeError, KeyError) as e:
            raise CheckpointVersionError(
                '{0}: invalid model configuration: {1}'.format(path, e))
        frame = meta.get('frame', 'body')
        if frame not in FRAMES:
            raise CheckpointVersionError('{0}: unknown input frame {1!r}'.format(path, frame))
        state = collections.OrderedDict(
            (k, v) for k, v in arrays.items() if k.startswith(('param/', 'stats/')))
        best_state = collections.OrderedDict(
            (k[5:], v) for k, v in arrays.items() if k.startswith('best/'))
        optimizer = None
        if meta.get('optimizer') is not None:
            optimizer = dict(meta['optimizer'])
            for moment in ('m', 'v'):
                prefix = 'adam/{0}/'.format(moment)
                optimizer[moment] = collections.OrderedDict(
                    (k[len(prefix):], v) for k, v in arrays.items() if k.startswith(prefix))
        return cls(
            model_config=config,
            state=state,
            normalization=NormalizationStats.from_dict(meta['normalization'])
            if meta.get('normalization') else None,
            optimizer=optimizer,
            train_state=meta.get('train_state') or {},
            best_state=best_state or None,
            frame=frame)
