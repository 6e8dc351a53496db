"""
Training: mean squared error on window velocities, Adam, and a plateau learning-rate
schedule which ends training once the rate decays below `min_lr`.
"""
import enum
import typing
import logging
import pathlib
import collections
import dataclasses

import numpy as np

from dwstrack.tensor import backward, no_grad
from dwstrack.checkpoint import Checkpoint
from dwstrack.util import write_csv, format_float
from dwstrack.errors import (
    ConfigurationError, DimensionError, StateError, NumericError, ValidationError,
    CheckpointVersionError,
)

__all__ = [
    'TrainConfig', 'OptimState', 'Adam', 'PlateauSchedule', 'EpochRecord', 'TrainResult',
    'mse_loss', 'adam_step', 'clip_grad_norm', 'lr_schedule_step', 'evaluate_loss', 'train',
    'TERMINATE', 'METRICS_FILE', 'BEST_CHECKPOINT', 'LAST_CHECKPOINT']

log = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
BEST_CHECKPOINT = 'best.npz'
LAST_CHECKPOINT = 'last.npz'
# Relative tolerance of the termination test, so 1e-3 * 0.1 ** 3 counts as 1e-6.
LR_TOLERANCE = 1e-9


class ScheduleSignal(enum.Enum):
    TERMINATE = 'terminate'


TERMINATE = ScheduleSignal.TERMINATE


@dataclasses.dataclass
class TrainConfig:
    lr: float = 1e-3
    patience: int = 10
    decay_factor: float = 0.1
    min_lr: float = 1e-6
    batch_size: int = 128
    max_epochs: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: typing.Optional[float] = 10.0
    target_loss: typing.Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.decay_factor < 1:
            raise ConfigurationError(
                'decay_factor must be in (0, 1), got {0}'.format(self.decay_factor))
        if not 0 < self.min_lr < self.lr:
            raise ConfigurationError('min_lr {0} must be positive and below lr {1}'.format(
                self.min_lr, self.lr))
        for name in ('patience', 'batch_size', 'max_epochs'):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError('{0} must be positive'.format(name))
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError('invalid Adam hyperparameters')
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError('grad_clip must be positive or null')

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = set(f.name for f in dataclasses.fields(cls))
        unknown = set(d) - fields
        if unknown:
            raise ConfigurationError('unknown train settings: {0}'.format(sorted(unknown)))
        return cls(**d)


def mse_loss(pred, target):
    """
    Mean over all B * D elements of the squared error.
    """
    if pred.shape != target.shape:
        raise DimensionError('mse_loss: prediction shape {0} != target shape {1}'.format(
            pred.shape, target.shape))
    diff = pred - target
    return (diff * diff).mean()


@dataclasses.dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: typing.Dict[str, np.ndarray] = dataclasses.field(default_factory=collections.OrderedDict)
    v: typing.Dict[str, np.ndarray] = dataclasses.field(default_factory=collections.OrderedDict)

    @classmethod
    def for_parameters(cls, params, **kw):
        return cls(
            m=collections.OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items()),
            v=collections.OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items()),
            **kw)

    def to_dict(self):
        return dict(
            step=self.step, lr=float(self.lr), beta1=self.beta1, beta2=self.beta2,
            eps=self.eps,
            m=collections.OrderedDict((n, np.array(a)) for n, a in self.m.items()),
            v=collections.OrderedDict((n, np.array(a)) for n, a in self.v.items()))

    @classmethod
    def from_dict(cls, d, params):
        for moment in ('m', 'v'):
            if set(d[moment]) != set(params):
                raise CheckpointVersionError(
                    'optimizer state does not match the model parameters')
            for name, p in params.items():
                if d[moment][name].shape != p.shape:
                    raise CheckpointVersionError(
                        'moment buffer {0} has shape {1}, parameter has {2}'.format(
                            name, d[moment][name].shape, p.shape))
        return cls(
            lr=float(d['lr']), beta1=float(d['beta1']), beta2=float(d['beta2']),
            eps=float(d['eps']), step=int(d['step']),
            m=collections.OrderedDict(
                (n, np.array(d['m'][n], dtype=p.dtype)) for n, p in params.items()),
            v=collections.OrderedDict(
                (n, np.array(d['v'][n], dtype=p.dtype)) for n, p in params.items()))


def adam_step(params, state):
    """
    One bias-corrected Adam update of the named parameters, in the order of `params`, using
    their accumulated `grad`.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise StateError('no gradient for parameter {0}'.format(missing[0]))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        p.assign(p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return params, state


class Adam(object):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = collections.OrderedDict(params)
        self.state = OptimState.for_parameters(
            self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.state)

    def state_dict(self):
        return self.state.to_dict()

    def load_state_dict(self, d):
        self.state = OptimState.from_dict(d, self.params)


def clip_grad_norm(params, max_norm):
    """
    Scale all gradients so that their global L2 norm is at most `max_norm`.

    :return: the norm before clipping
    """
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


def lr_schedule_step(history, lr, config):
    """
    The learning rate for the next epoch given the validation losses so far.

    The rate decays by `decay_factor` whenever `patience` epochs have passed without a
    strict improvement of the best validation loss (counting restarts after each decay).
    Falling below `min_lr` yields `TERMINATE`.
    """
    if not history:
        raise ValueError('lr_schedule_step needs at least one completed epoch')
    best = int(np.argmin(history))
    since_best = len(history) - 1 - best
    if since_best == 0 or since_best % config.patience:
        return lr
    new_lr = lr * config.decay_factor
    if new_lr < config.min_lr * (1 - LR_TOLERANCE):
        return TERMINATE
    return new_lr


class PlateauSchedule(object):
    def __init__(self, config, lr=None, history=None):
        self.config = config
        self.lr = config.lr if lr is None else lr
        self.history = list(history or [])

    def step(self, val_loss):
        self.history.append(float(val_loss))
        new_lr = lr_schedule_step(self.history, self.lr, self.config)
        if new_lr is TERMINATE:
            log.info('learning rate would decay below %g: terminating', self.config.min_lr)
        elif new_lr != self.lr:
            log.info('learning rate decayed from %g to %g', self.lr, new_lr)
            self.lr = new_lr
        return new_lr

    def to_dict(self):
        return dict(lr=float(self.lr), history=list(self.history))


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def row(self):
        return [str(self.epoch), format_float(self.train_loss), format_float(self.val_loss),
                format_float(self.lr)]


@dataclasses.dataclass
class TrainResult:
    history: typing.List[EpochRecord]
    best: Checkpoint
    last: Checkpoint
    stop_reason: str
    run_dir: typing.Optional[pathlib.Path] = None

    @property
    def best_val_loss(self):
        return self.best.train_state['best_val_loss']

    @property
    def final_train_loss(self):
        return self.history[-1].train_loss if self.history else None


def evaluate_loss(model, data, batch_size=128):
    """
    Mean squared error over all windows of `data`, in eval mode.
    """
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for x, y in data.batches(batch_size):
            total += float(mse_loss(model(x), y).item()) * y.shape[0]
            count += y.shape[0]
    return total / count


def _write_metrics(path, history):
    write_csv(
        path,
        [['epoch', 'train_loss', 'val_loss', 'lr']] + [r.row() for r in history])


def train(model, train_data, val_data, config=None, run_dir=None, normalization=None,
          resume=None, frame='body'):
    """
    Fit `model` to the windows of `train_data`, selecting the checkpoint with the lowest
    validation loss.

    Shuffling in epoch e is seeded with (seed, e), so a run resumed from the checkpoint of
    epoch e - 1 reproduces epoch e exactly.

    :param run_dir: if given, `metrics.csv`, `best.npz` and `last.npz` are written there
    :param resume: a `Checkpoint` written by an earlier call
    :param frame: input frame of the windows, recorded in the checkpoints
    :raises NumericError: on a non-finite loss, carrying the last good checkpoint
    """
    config = config or TrainConfig()
    if not len(train_data):
        raise ValidationError('train', 'no training windows')
    if not len(val_data):
        raise ValidationError('val', 'no validation windows')
    run_dir = pathlib.Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    optimizer = Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                     eps=config.eps)
    schedule = PlateauSchedule(config)
    history, start_epoch = [], 1
    best_val, best_epoch = float('inf'), 0
    if resume is not None:
        if resume.frame != frame:
            raise ConfigurationError(
                'cannot resume a {0}-frame checkpoint on {1}-frame data'.format(
                    resume.frame, frame))
        resume.load_into(model)
        if resume.optimizer is not None:
            optimizer.load_state_dict(resume.optimizer)
        ts = resume.train_state
        schedule = PlateauSchedule(config, **ts['schedule'])
        optimizer.lr = schedule.lr
        history = [EpochRecord(**r) for r in ts['history']]
        start_epoch = ts['epoch'] + 1
        best_val, best_epoch = ts['best_val_loss'], ts['best_epoch']
        normalization = normalization or resume.normalization
        log.info('resuming after epoch %d', ts['epoch'])
        last, best = resume, resume.best_checkpoint()
        if run_dir is not None:
            best.save(run_dir / BEST_CHECKPOINT)
    else:
        last = best = Checkpoint.from_model(
            model, normalization, optimizer.state_dict(),
            dict(epoch=0, best_val_loss=best_val, best_epoch=0, history=[],
                 schedule=schedule.to_dict(), train_config=config.to_dict()),
            frame=frame)
    stop_reason = 'max_epochs'

    for epoch in range(start_epoch, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        model.train()
        total, count = 0.0, 0
        for x, y in train_data.batches(config.batch_size, rng):
            optimizer.zero_grad()
            loss = mse_loss(model(x), y)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericError(
                    'non-finite training loss in epoch {0}'.format(epoch), checkpoint=last)
            backward(loss)
            if config.grad_clip is not None:
                clip_grad_norm(params, config.grad_clip)
            optimizer.step()
            total += value * y.shape[0]
            count += y.shape[0]
        train_loss = total / count
        val_loss = evaluate_loss(model, val_data, config.batch_size)
        if not np.isfinite(val_loss):
            raise NumericError(
                'non-finite validation loss in epoch {0}'.format(epoch), checkpoint=last)

        record = EpochRecord(epoch, train_loss, val_loss, float(optimizer.lr))
        history.append(record)
        log.info('epoch %d: train loss %.6g, val loss %.6g, lr %g',
                 epoch, train_loss, val_loss, record.lr)
        improved = val_loss < best_val
        if improved:
            best_val, best_epoch = val_loss, epoch
        new_lr = schedule.step(val_loss)

        last = Checkpoint.from_model(
            model, normalization, optimizer.state_dict(),
            dict(epoch=epoch, best_val_loss=best_val, best_epoch=best_epoch,
                 history=[dataclasses.asdict(r) for r in history],
                 schedule=schedule.to_dict(), train_config=config.to_dict()),
            frame=frame)
        if improved:
            best = last
        else:
            last.best_state = best.state
            last.train_state['best_train_state'] = best.train_state
        if run_dir is not None:
            _write_metrics(run_dir / METRICS_FILE, history)
            last.save(run_dir / LAST_CHECKPOINT)
            if improved:
                best.save(run_dir / BEST_CHECKPOINT)

        if config.target_loss is not None and train_loss < config.target_loss:
            stop_reason = 'target_loss'
            log.info('training loss %.6g reached the target %g', train_loss, config.target_loss)
            break
        if new_lr is TERMINATE:
            stop_reason = 'min_lr'
            break
        optimizer.lr = new_lr

    return TrainResult(
        history=history, best=best, last=last, stop_reason=stop_reason, run_dir=run_dir)
