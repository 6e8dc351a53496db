"""
The `dwstrack` command line.

    dwstrack synth PROFILE --count 20 --out-dir corpus
    dwstrack train corpus --config run.yaml --out-dir runs
    dwstrack eval runs/run-.../best.npz corpus --split test --out-dir report
    dwstrack predict runs/run-.../best.npz corpus/seq_000.imu --out-dir predictions
    dwstrack inspect --window-len 200

Every command except `inspect` writes `manifest.yaml` to its output directory before doing
any work; `--from-manifest` re-runs the recorded command line.

Exit codes: 0 on success, 2 for invalid input, 3 for numeric failure during training.
"""
import sys
import logging
import pathlib
import argparse
import datetime
import dataclasses

import dwstrack
from dwstrack import config as cfg
from dwstrack.model import DwsformerModel, quadratic_terms
from dwstrack.data import (
    SPLIT_FILE, SEQUENCE_SUFFIX, WindowDataset, write_sequence, make_split, write_split,
    load_split, load_corpus, load_sequence, make_windows, normalize_stats, to_frame,
    FRAMES,
)
from dwstrack.synth import MotionProfile, synthesize
from dwstrack.checkpoint import Checkpoint
from dwstrack.train import train, BEST_CHECKPOINT
from dwstrack.evaluate import (
    evaluate, export_report, predict_trajectory, gt_trajectory, write_trajectory,
)
from dwstrack.util import read_yaml, write_yaml
from dwstrack.errors import DwstrackError, NumericError, CheckpointVersionError

__all__ = ['main', 'RunManifest', 'EXIT_OK', 'EXIT_INPUT', 'EXIT_NUMERIC']

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MANIFEST_FILE = 'manifest.yaml'


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    inputs: list
    out_dir: str
    version: str = dwstrack.__version__

    def write(self, directory):
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_yaml(directory / MANIFEST_FILE, dataclasses.asdict(self))
        return directory / MANIFEST_FILE

    @classmethod
    def read(cls, path):
        path = pathlib.Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        if not path.exists():
            raise FileNotFoundError('manifest {0} does not exist'.format(path))
        return cls(**read_yaml(path))


def _overrides(args):
    """
    Nested configuration updates from the command-line flags which were given.
    """
    res = {}

    def put(section, key, value):
        if value is not None:
            res.setdefault(section, {})[key] = value

    put('train', 'seed', args.seed)
    put('model', 'seed', args.seed)
    put('data', 'window_len', getattr(args, 'window_len', None))
    put('data', 'frame', getattr(args, 'frame', None))
    put('train', 'max_epochs', getattr(args, 'epochs', None))
    put('train', 'batch_size', getattr(args, 'batch_size', None))
    put('train', 'lr', getattr(args, 'lr', None))
    put('train', 'target_loss', getattr(args, 'target_loss', None))
    if getattr(args, 'no_grad_clip', False):
        res.setdefault('train', {})['grad_clip'] = None
    if getattr(args, 'ablation', None) == 'no-msgcu':
        put('model', 'enable_msgcu', False)
    if getattr(args, 'fuse_overlap', False):
        put('eval', 'fuse_overlap', True)
    put('eval', 'rte_interval_s', getattr(args, 'rte_interval', None))
    return res


def _manifest(args, argv, config, inputs, out_dir):
    manifest = RunManifest(
        command=args.command,
        argv=list(argv),
        config=config,
        seed=config['train']['seed'],
        inputs=[str(p) for p in inputs],
        out_dir=str(out_dir))
    path = manifest.write(out_dir)
    log.info('manifest written to %s', path)
    return manifest


def cmd_synth(args, argv):
    config = cfg.load_config(args.config, _overrides(args))
    profile = MotionProfile.from_dict(read_yaml(args.profile))
    out_dir = pathlib.Path(args.out_dir)
    _manifest(args, argv, config, [args.profile], out_dir)
    seed = config['train']['seed']
    ids = []
    for i in range(args.count):
        sid = 'seq_{0:03d}'.format(i)
        seq = synthesize(profile, seed=[seed, i], sequence_id=sid)
        write_sequence(seq, out_dir / (sid + SEQUENCE_SUFFIX))
        ids.append(sid)
    split = make_split(ids, seed=seed)
    write_split(split, out_dir / SPLIT_FILE)
    print('{0} sequences written to {1} ({2}/{3}/{4} train/val/test)'.format(
        len(ids), out_dir, len(split.train), len(split.val), len(split.test)))
    return EXIT_OK


def _print_counts(model, window_len):
    print('parameters: {0}'.format(model.count_parameters()))
    print('FLOPs at L={0}: {1}'.format(window_len, model.count_flops(window_len)))


def cmd_train(args, argv):
    config = cfg.load_config(args.config, _overrides(args))
    model_config = cfg.model_config(config)
    model = DwsformerModel(model_config)
    if args.dry_run:
        _print_counts(model, model_config.window_len)
        return EXIT_OK

    data_dir = pathlib.Path(args.data_dir)
    split_path = data_dir / SPLIT_FILE
    if not split_path.exists():
        raise FileNotFoundError('split file {0} does not exist'.format(split_path))
    seed = config['train']['seed']
    run_dir = pathlib.Path(args.out_dir) / 'run-{0}-seed{1}'.format(
        datetime.datetime.now().strftime('%Y%m%dT%H%M%S'), seed)
    _manifest(args, argv, config, [data_dir] + ([args.resume] if args.resume else []), run_dir)

    split = load_split(split_path)
    data = cfg.data_settings(config)
    window_len = data['window_len']
    train_seqs = load_corpus(data_dir, split.train, frame=data['frame'])
    val_seqs = load_corpus(data_dir, split.val, frame=data['frame'])
    for seq in train_seqs + val_seqs:
        if seq.sample_rate_hz != data['sample_rate_hz']:
            log.warning('sequence %s is sampled at %g Hz, configured rate is %g Hz',
                        seq.sequence_id, seq.sample_rate_hz, data['sample_rate_hz'])
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None and resume.normalization is not None:
        stats = resume.normalization
    else:
        stats = normalize_stats(
            [w for seq in train_seqs for w in make_windows(seq, window_len, data['train_stride'])])
    train_data = WindowDataset.from_sequences(train_seqs, window_len, data['train_stride'], stats)
    val_data = WindowDataset.from_sequences(val_seqs, window_len, window_len, stats)
    log.info('%d training and %d validation windows', len(train_data), len(val_data))

    result = train(model, train_data, val_data, cfg.train_config(config), run_dir=run_dir,
                   normalization=stats, resume=resume, frame=data['frame'])
    print('stopped after epoch {0} ({1})'.format(result.history[-1].epoch, result.stop_reason))
    print('final validation loss: {0:.6g}'.format(result.history[-1].val_loss))
    print('best checkpoint: {0}'.format(run_dir / BEST_CHECKPOINT))
    return EXIT_OK


def _checkpoint_model(args, config):
    checkpoint = Checkpoint.load(args.checkpoint)
    if args.config is not None:
        expected = dict(cfg.model_config(config).to_dict(), seed=None)
        if expected != dict(checkpoint.model_config.to_dict(), seed=None):
            raise CheckpointVersionError(
                'model settings in {0} differ from checkpoint {1}'.format(
                    args.config, args.checkpoint))
    return checkpoint, checkpoint.build_model()


def cmd_eval(args, argv):
    config = cfg.load_config(args.config, _overrides(args))
    out_dir = pathlib.Path(args.out_dir)
    data_dir = pathlib.Path(args.data_dir)
    _manifest(args, argv, config, [args.checkpoint, data_dir], out_dir)
    checkpoint, model = _checkpoint_model(args, config)
    split = load_split(data_dir / SPLIT_FILE)
    sequences = load_corpus(data_dir, split[args.split], frame=checkpoint.frame)
    settings = cfg.eval_settings(config)
    settings['window_len'] = checkpoint.model_config.window_len
    report = evaluate(model, sequences, checkpoint.normalization, threads=args.threads,
                      **settings)
    paths = export_report(report, out_dir)
    for name, value in report.means().items():
        print('mean {0}: {1}'.format(name, '-' if value is None else '{0:.6g}'.format(value)))
    print('metric table: {0}'.format(paths['metrics']))
    return EXIT_OK


def cmd_predict(args, argv):
    config = cfg.load_config(args.config, _overrides(args))
    out_dir = pathlib.Path(args.out_dir)
    _manifest(args, argv, config, [args.checkpoint, args.sequence], out_dir)
    checkpoint, model = _checkpoint_model(args, config)
    seq = to_frame(load_sequence(args.sequence), checkpoint.frame)
    settings = cfg.eval_settings(config)
    est, _, _ = predict_trajectory(
        model, seq, checkpoint.normalization, checkpoint.model_config.window_len,
        fuse_overlap=settings['fuse_overlap'], stride=settings['stride'])
    gt = gt_trajectory(seq) if seq.gt_position is not None else None
    out = out_dir / (seq.sequence_id + '.csv')
    write_trajectory(out, est, gt)
    print('trajectory with {0} positions written to {1}'.format(len(est), out))
    return EXIT_OK


def cmd_inspect(args, argv):
    config = cfg.load_config(args.config, _overrides(args))
    if args.checkpoint:
        model = Checkpoint.load(args.checkpoint).build_model()
    else:
        model = DwsformerModel(cfg.model_config(config))
    length = args.length or model.config.window_len
    print('# parameters')
    for name, p in model.named_parameters():
        print('{0}\t{1}\t{2}'.format(name, 'x'.join(str(n) for n in p.shape), p.size))
    print('total\t\t{0}'.format(model.count_parameters()))
    print('msgcu\t\t{0}'.format(model.msgcu_parameters()))
    print('\n# stages at L={0}'.format(length))
    print('stage\tchannels\tlength\tstar width\tquadratic terms')
    for shape in model.stage_shapes(length):
        width = model.config.expanded_width(shape['channels'])
        print('{0}\t{1}\t{2}\t{3}\t{4}'.format(
            shape['stage'], shape['channels'], shape['length'], width,
            len(quadratic_terms(shape['channels'] + 1))))
    print('\n# FLOPs at L={0}'.format(length))
    for name, flops in model.flop_breakdown(length):
        print('{0}\t{1}'.format(name, flops))
    print('total\t{0}'.format(model.count_flops(length)))
    return EXIT_OK


COMMANDS = dict(
    synth=cmd_synth, train=cmd_train, eval=cmd_eval, predict=cmd_predict, inspect=cmd_inspect)


def get_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None,
                        help='seed of all randomness (default: train.seed of the config)')
    common.add_argument('--config', default=None, help='YAML configuration file')
    common.add_argument('--out-dir', default='.', help='output directory')
    common.add_argument('--threads', type=int, default=1,
                        help='threads for per-sequence evaluation')
    common.add_argument('-v', '--verbose', action='store_true')
    common.add_argument('-q', '--quiet', action='store_true')

    parser = argparse.ArgumentParser(
        prog='dwstrack', description='Inertial odometry with DWSFormer.')
    parser.add_argument('--version', action='version', version=dwstrack.__version__)
    parser.add_argument('--from-manifest', default=None,
                        help='re-run the command recorded in a manifest file or directory')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('synth', parents=[common], help='write a synthetic corpus')
    p.add_argument('profile', help='YAML motion profile')
    p.add_argument('--count', type=int, default=10)

    p = sub.add_parser('train', parents=[common], help='train a model')
    p.add_argument('data_dir')
    p.add_argument('--ablation', choices=['no-msgcu'], default=None)
    p.add_argument('--dry-run', action='store_true',
                   help='print parameter and FLOP counts and exit')
    p.add_argument('--resume', default=None, help='checkpoint to resume from')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--target-loss', type=float, default=None)
    p.add_argument('--no-grad-clip', action='store_true')
    p.add_argument('--window-len', type=int, default=None)
    p.add_argument('--frame', choices=FRAMES, default=None,
                   help='frame of the gyro and accel features (default: data.frame)')

    p = sub.add_parser('eval', parents=[common], help='evaluate a checkpoint on a split')
    p.add_argument('checkpoint')
    p.add_argument('data_dir')
    p.add_argument('--split', choices=['train', 'val', 'test'], default='test')
    p.add_argument('--fuse-overlap', action='store_true')
    p.add_argument('--rte-interval', type=float, default=None)

    p = sub.add_parser('predict', parents=[common], help='write the estimated trajectory')
    p.add_argument('checkpoint')
    p.add_argument('sequence')
    p.add_argument('--fuse-overlap', action='store_true')

    p = sub.add_parser('inspect', parents=[common], help='print parameters, shapes and FLOPs')
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--length', type=int, default=None, help='window length (default: config)')
    p.add_argument('--window-len', type=int, default=None)
    p.add_argument('--ablation', choices=['no-msgcu'], default=None)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = get_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        try:
            argv = RunManifest.read(args.from_manifest).argv
        except (FileNotFoundError, TypeError) as e:
            parser.error(str(e))
        args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_INPUT

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else (logging.WARNING if args.quiet else logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return COMMANDS[args.command](args, argv)
    except NumericError as e:
        log.error('%s', e)
        if e.checkpoint is not None:
            path = pathlib.Path(args.out_dir) / 'last-good.npz'
            e.checkpoint.save(path)
            log.error('last good checkpoint saved to %s', path)
        return EXIT_NUMERIC
    except (DwstrackError, FileNotFoundError, KeyError, ValueError) as e:
        log.error('%s', e)
        return EXIT_INPUT
