"""
Trajectories from predicted velocities, and their errors against ground truth.

Metric definitions:

- ATE: root mean square of the position error over the whole trajectory, with ground truth
  interpolated linearly to the estimate's timestamps; no spatial alignment.
- RTE: mean over consecutive intervals of `interval_s` seconds of the position RMSE after
  moving the estimate onto the ground truth at each interval start. Sequences shorter than
  one interval report the full-span RMSE scaled by interval / span (flagged).
- PDE: distance between the final estimated and ground-truth positions, divided by the
  ground-truth path length.
"""
import typing
import logging
import pathlib
import dataclasses
import concurrent.futures

import numpy as np

from dwstrack.tensor import Tensor
from dwstrack.data import window_starts
from dwstrack.util import write_csv, write_yaml, iter_dicts_from_csv, format_float
from dwstrack.errors import EvaluationError, InputTooShortError

__all__ = [
    'Trajectory', 'SequenceReport', 'EvalReport', 'integrate', 'fuse_overlapping',
    'gt_trajectory', 'align', 'ate', 'rte', 'relative_errors', 'pde', 'cdf',
    'predict_velocities', 'predict_trajectory', 'evaluate_sequence', 'evaluate',
    'export_report', 'read_metric_table', 'write_trajectory', 'METRIC_DEFINITIONS',
    'METRIC_COLUMNS']

log = logging.getLogger(__name__)

DEFAULT_RTE_INTERVAL_S = 60.0
METRIC_COLUMNS = ('sequence', 'ate_m', 'rte_m', 'pde', 'length_m')
METRIC_DEFINITIONS = dict(
    ate_m='RMSE of position error over the whole trajectory, ground truth linearly '
          'interpolated to estimate timestamps, no alignment',
    rte_m='mean over consecutive {interval:g} s intervals of the position RMSE after '
          're-anchoring the estimate at each interval start',
    pde='final position drift divided by ground-truth path length',
    length_m='ground-truth path length',
    mse='squared error of window velocities averaged over windows and components, (m/s)^2',
)


@dataclasses.dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        positions = np.asarray(self.positions, dtype=float)
        if times.ndim != 1 or not len(times):
            raise EvaluationError('a trajectory needs at least one timestamp')
        if positions.shape != (len(times), 2):
            raise EvaluationError('positions of shape {0} do not match {1} timestamps'.format(
                positions.shape, len(times)))
        if np.any(np.diff(times) <= 0):
            raise EvaluationError('trajectory timestamps must be strictly increasing')
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'positions', positions)

    def __len__(self):
        return len(self.times)

    @property
    def length(self):
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    def at(self, times):
        """
        Positions linearly interpolated at `times`.
        """
        times = np.asarray(times, dtype=float)
        return np.stack([np.interp(times, self.times, self.positions[:, i]) for i in (0, 1)],
                        axis=-1)

    def translated(self, offset):
        return Trajectory(self.times, self.positions + np.asarray(offset, dtype=float))


def integrate(velocities, durations, origin=(0.0, 0.0), start_time=0.0):
    """
    Positions p_0 = origin, p_{k+1} = p_k + v_k * dt_k (rectangle rule).

    :param velocities: [K, 2] mean velocities of consecutive intervals
    :param durations: interval length in s, a scalar or one per interval
    """
    velocities = np.asarray(velocities, dtype=float).reshape(-1, 2)
    if not len(velocities):
        raise EvaluationError('nothing to integrate: no velocities')
    durations = np.broadcast_to(np.asarray(durations, dtype=float), (len(velocities),))
    steps = velocities * durations[:, None]
    positions = np.concatenate(
        [np.zeros((1, 2)), np.cumsum(steps, axis=0)]) + np.asarray(origin, dtype=float)
    times = start_time + np.concatenate([[0.0], np.cumsum(durations)])
    return Trajectory(times, positions)


def fuse_overlapping(velocities, starts, window_len):
    """
    Per-sample velocities averaged over all windows covering the sample.

    :return: [N, 2] velocities for samples 0 .. N - 1, N the end of the last window
    """
    velocities = np.asarray(velocities, dtype=float)
    if not len(starts):
        raise EvaluationError('nothing to fuse: no windows')
    n = starts[-1] + window_len
    total, cover = np.zeros((n, 2)), np.zeros(n)
    for start, v in zip(starts, velocities):
        total[start:start + window_len] += v
        cover[start:start + window_len] += 1
    if np.any(cover == 0):
        raise EvaluationError('windows leave samples uncovered; stride exceeds window length')
    return total / cover[:, None]


def gt_trajectory(seq):
    """
    Ground-truth positions at the sample times, plus the position at T * dt, the end of the
    last sample, extrapolated with the last velocity.
    """
    if seq.gt_position is None and seq.gt_velocity is None:
        raise EvaluationError('sequence {0} has no ground truth'.format(seq.sequence_id))
    if seq.gt_position is None:
        return integrate(seq.gt_velocity, seq.dt)
    positions = seq.gt_position
    if seq.gt_velocity is not None:
        positions = np.concatenate([positions, positions[-1:] + seq.gt_velocity[-1:] * seq.dt])
    return Trajectory(np.arange(len(positions)) * seq.dt, positions)


def align(est, gt):
    """
    Estimated positions within the ground-truth time span and the ground truth interpolated
    to their timestamps.
    """
    mask = (est.times >= gt.times[0] - 1e-9) & (est.times <= gt.times[-1] + 1e-9)
    if mask.sum() < 2:
        raise EvaluationError(
            'trajectories share {0} timestamps, at least 2 are needed'.format(mask.sum()))
    times = est.times[mask]
    return times, est.positions[mask], gt.at(times)


def _rmse(a, b):
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def ate(est, gt):
    _, e, g = align(est, gt)
    return _rmse(e, g)


def relative_errors(est, gt, interval_s=DEFAULT_RTE_INTERVAL_S):
    """
    RMSE per interval and whether the span was shorter than one interval.

    :return: (list of per-interval errors, scaled flag)
    """
    times, e, g = align(est, gt)
    span = times[-1] - times[0]
    if span < interval_s - 1e-9:
        e = e - e[0] + g[0]
        return [_rmse(e, g) * interval_s / span], True
    errors, start = [], times[0]
    while start + interval_s <= times[-1] + 1e-9:
        idx = np.flatnonzero((times >= start - 1e-9) & (times <= start + interval_s + 1e-9))
        if len(idx) >= 2:
            anchored = e[idx] - e[idx[0]] + g[idx[0]]
            errors.append(_rmse(anchored, g[idx]))
        start += interval_s
    if not errors:
        raise EvaluationError('no interval of {0:g} s holds two timestamps'.format(interval_s))
    return errors, False


def rte(est, gt, interval_s=DEFAULT_RTE_INTERVAL_S):
    errors, _ = relative_errors(est, gt, interval_s)
    return float(np.mean(errors))


def pde(est, gt):
    length = gt.length
    if length <= 0:
        raise EvaluationError('ground-truth path has zero length')
    _, e, g = align(est, gt)
    return float(np.linalg.norm(e[-1] - g[-1]) / length)


def cdf(values):
    """
    (value, cumulative fraction) pairs of the empirical distribution.
    """
    values = np.sort(np.asarray(values, dtype=float))
    if not len(values):
        raise EvaluationError('no values')
    return [(float(v), (i + 1) / len(values)) for i, v in enumerate(values)]


@dataclasses.dataclass
class SequenceReport:
    sequence_id: str
    ate: float
    rte: float
    pde: float
    length: float
    mse: typing.Optional[float] = None
    rte_scaled: bool = False
    estimate: typing.Optional[Trajectory] = None
    ground_truth: typing.Optional[Trajectory] = None

    def row(self):
        return [self.sequence_id] + [
            format_float(v) for v in (self.ate, self.rte, self.pde, self.length)]


@dataclasses.dataclass
class EvalReport:
    sequences: typing.List[SequenceReport]
    rte_interval_s: float = DEFAULT_RTE_INTERVAL_S

    def __len__(self):
        return len(self.sequences)

    def means(self):
        res = {}
        for name, attr in zip(
                METRIC_COLUMNS[1:] + ('mse',), ('ate', 'rte', 'pde', 'length', 'mse')):
            values = [getattr(s, attr) for s in self.sequences if getattr(s, attr) is not None]
            res[name] = float(np.mean(values)) if values else None
        return res

    def definitions(self):
        return {k: v.format(interval=self.rte_interval_s) for k, v in METRIC_DEFINITIONS.items()}


def predict_velocities(model, seq, stats, window_len, stride, batch_size=64):
    """
    Window start indices and the model's [K, D] velocity predictions.
    """
    if len(seq) < window_len:
        raise InputTooShortError(len(seq), window_len, what='sequence')
    features = stats.normalize(seq.features) if stats is not None else seq.features
    starts = window_starts(len(seq), window_len, stride)
    windows = np.stack([features[:, s:s + window_len] for s in starts])
    preds = [model.predict(Tensor(windows[i:i + batch_size]))
             for i in range(0, len(windows), batch_size)]
    return starts, np.concatenate(preds)[:, :2].astype(float)


def _origin(seq):
    return seq.gt_position[0] if seq.gt_position is not None else np.zeros(2)


def predict_trajectory(model, seq, stats, window_len, fuse_overlap=False, stride=None):
    """
    Integrate the predicted velocities of a sequence from its ground-truth start.

    Without fusion the windows tile the sequence (stride = window length) and the result
    has one position per window boundary. With fusion, overlapping windows (default stride
    window_len // 2) are averaged per sample and integrated per sample.

    :return: (trajectory, window starts, window velocities)
    """
    if fuse_overlap:
        stride = stride or max(window_len // 2, 1)
        starts, velocities = predict_velocities(model, seq, stats, window_len, stride)
        per_sample = fuse_overlapping(velocities, starts, window_len)
        return integrate(per_sample, seq.dt, origin=_origin(seq)), starts, velocities
    starts, velocities = predict_velocities(model, seq, stats, window_len, window_len)
    return integrate(velocities, window_len * seq.dt, origin=_origin(seq)), starts, velocities


def evaluate_sequence(model, seq, stats, window_len, rte_interval_s=DEFAULT_RTE_INTERVAL_S,
                      fuse_overlap=False, stride=None):
    est, starts, velocities = predict_trajectory(
        model, seq, stats, window_len, fuse_overlap=fuse_overlap, stride=stride)
    gt = gt_trajectory(seq)
    mse = None
    if seq.gt_velocity is not None:
        targets = np.stack([seq.gt_velocity[s:s + window_len].mean(axis=0) for s in starts])
        mse = float(np.mean((velocities - targets) ** 2))
    errors, scaled = relative_errors(est, gt, rte_interval_s)
    if scaled:
        log.warning('sequence %s spans less than %g s: RTE is the scaled full-span error',
                    seq.sequence_id, rte_interval_s)
    return SequenceReport(
        sequence_id=seq.sequence_id,
        ate=ate(est, gt),
        rte=float(np.mean(errors)),
        pde=pde(est, gt),
        length=gt.length,
        mse=mse,
        rte_scaled=scaled,
        estimate=est,
        ground_truth=gt)


def evaluate(model, sequences, stats, window_len, rte_interval_s=DEFAULT_RTE_INTERVAL_S,
             fuse_overlap=False, stride=None, threads=1):
    """
    Evaluate all sequences, optionally on a thread pool; reports are ordered by sequence id.
    """
    if not sequences:
        raise EvaluationError('no sequences to evaluate')
    model.eval()

    def run(seq):
        return evaluate_sequence(
            model, seq, stats, window_len, rte_interval_s=rte_interval_s,
            fuse_overlap=fuse_overlap, stride=stride)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(run, sequences))
    else:
        reports = [run(seq) for seq in sequences]
    reports.sort(key=lambda r: r.sequence_id)
    for r in reports:
        log.info('%s: ATE %.4f m, RTE %.4f m, PDE %.4f', r.sequence_id, r.ate, r.rte, r.pde)
    return EvalReport(reports, rte_interval_s=rte_interval_s)


def write_trajectory(path, est, gt=None):
    """
    Write `t,est_x,est_y[,gt_x,gt_y]` rows, ground truth interpolated at the estimate's times.
    """
    header = ['t', 'est_x', 'est_y']
    columns = [est.times, est.positions[:, 0], est.positions[:, 1]]
    if gt is not None:
        header.extend(['gt_x', 'gt_y'])
        g = gt.at(est.times)
        columns.extend([g[:, 0], g[:, 1]])
    write_csv(path, [header] + [[format_float(v) for v in row] for row in zip(*columns)])


def export_report(report, out_dir):
    """
    Write the metric table, per-sequence window MSE, CDFs of ATE and MSE, the PDE list, a
    summary with the metric definitions and one trajectory file per sequence to `out_dir`.

    :return: dict mapping artifact names to paths
    """
    if not len(report):
        raise EvaluationError('cannot export an empty report')
    out_dir = pathlib.Path(out_dir)
    out_dir.joinpath('trajectories').mkdir(parents=True, exist_ok=True)
    definitions = report.definitions()
    paths = dict(
        metrics=out_dir / 'metrics.csv',
        ate_cdf=out_dir / 'ate_cdf.csv',
        mse=out_dir / 'mse.csv',
        mse_cdf=out_dir / 'mse_cdf.csv',
        pde=out_dir / 'pde.csv',
        summary=out_dir / 'summary.yaml')

    write_csv(
        paths['metrics'],
        [list(METRIC_COLUMNS)] + [s.row() for s in report.sequences])
    write_csv(paths['ate_cdf'], [['value', 'cumulative_fraction']] + [
        [format_float(v), format_float(f)] for v, f in cdf([s.ate for s in report.sequences])])
    mses = [(s.sequence_id, s.mse) for s in report.sequences if s.mse is not None]
    if mses:
        write_csv(paths['mse'], [['sequence', 'mse']] + [
            [sid, format_float(v)] for sid, v in mses])
        write_csv(paths['mse_cdf'], [['value', 'cumulative_fraction']] + [
            [format_float(v), format_float(f)] for v, f in cdf([v for _, v in mses])])
    else:
        del paths['mse'], paths['mse_cdf']
    write_csv(paths['pde'], [['sequence', 'pde']] + [
        [s.sequence_id, format_float(s.pde)] for s in report.sequences])
    for s in report.sequences:
        if s.estimate is not None:
            write_trajectory(
                out_dir / 'trajectories' / (s.sequence_id + '.csv'), s.estimate, s.ground_truth)
    write_yaml(paths['summary'], dict(
        sequences=len(report),
        means=report.means(),
        rte_interval_s=float(report.rte_interval_s),
        rte_scaled=[s.sequence_id for s in report.sequences if s.rte_scaled],
        definitions=definitions))
    return paths


def read_metric_table(path):
    """
    The rows of a metric table written by `export_report`, with floats parsed.
    """
    rows = []
    for row in iter_dicts_from_csv(path):
        rows.append({
            k: row[k] if k == 'sequence' else float(row[k]) for k in METRIC_COLUMNS})
    return rows
