import logging
import math

import pytest

from dwstrack.cli import *
from dwstrack.model import DwsformerModel
from dwstrack.data import (
    load_split, load_sequence, load_corpus, write_split, SplitSpec, WindowDataset,
)
from dwstrack.checkpoint import Checkpoint
from dwstrack.evaluate import read_metric_table
from dwstrack.util import read_yaml, iter_dicts_from_csv
from dwstrack.errors import NumericError


@pytest.fixture
def corpus_dir(tmp_path, profile_yaml):
    out = tmp_path / 'corpus'
    assert main(['synth', str(profile_yaml), '--count', '10', '--out-dir', str(out)]) == 0
    return out


@pytest.fixture
def heading_corpus(tmp_path):
    """
    Straight walks along +x for training and validation, along -x for testing.
    """
    corpus = tmp_path / 'heading'
    for name, heading, count in (('forward', 0.0, 6), ('back', 3.14159, 2)):
        profile = tmp_path / (name + '.yaml')
        profile.write_text(
            'sample_rate_hz: 20.0\ngyro_noise_std: 0.01\naccel_noise_std: 0.05\n'
            'initial_heading: {0}\nsegments:\n  - {{duration_s: 10.0, speed: 1.2}}\n'.format(
                heading),
            encoding='utf8')
        assert main(['synth', str(profile), '--count', str(count),
                     '--out-dir', str(tmp_path / name)]) == 0
        for i in range(count):
            source = tmp_path / name / 'seq_{0:03d}.imu'.format(i)
            corpus.mkdir(exist_ok=True)
            corpus.joinpath('{0}_{1}.imu'.format(name, i)).write_bytes(source.read_bytes())
    write_split(
        SplitSpec(train=['forward_{0}'.format(i) for i in range(5)], val=['forward_5'],
                  test=['back_0', 'back_1']),
        corpus / 'split.yaml')
    return corpus


def test_synth(corpus_dir, profile_yaml, tmp_path):
    assert sorted(p.name for p in corpus_dir.glob('*.imu'))[0] == 'seq_000.imu'
    assert len(list(corpus_dir.glob('*.imu'))) == 10
    split = load_split(corpus_dir / 'split.yaml')
    assert (len(split.train), len(split.val), len(split.test)) == (8, 1, 1)
    assert len(load_sequence(corpus_dir / 'seq_003.imu')) == 200

    manifest = RunManifest.read(corpus_dir)
    assert manifest.command == 'synth'
    assert manifest.seed == 0
    assert manifest.inputs == [str(profile_yaml)]

    again = tmp_path / 'again'
    assert main(['synth', str(profile_yaml), '--count', '10', '--out-dir', str(again)]) == 0
    for name in ('seq_000.imu', 'seq_009.imu', 'split.yaml'):
        assert (again / name).read_bytes() == (corpus_dir / name).read_bytes()
    assert main(['synth', str(profile_yaml), '--count', '2', '--seed', '5',
                 '--out-dir', str(again)]) == 0
    assert (again / 'seq_000.imu').read_bytes() != (corpus_dir / 'seq_000.imu').read_bytes()


def test_synth_single_sequence(tmp_path, profile_yaml, caplog):
    with caplog.at_level(logging.WARNING):
        assert main(['synth', str(profile_yaml), '--count', '1',
                     '--out-dir', str(tmp_path)]) == 0
    assert 'degenerate split' in caplog.text
    assert load_split(tmp_path / 'split.yaml').train == ['seq_000']


def test_from_manifest(corpus_dir, tmp_path):
    (corpus_dir / 'seq_000.imu').unlink()
    assert main(['--from-manifest', str(corpus_dir / 'manifest.yaml')]) == 0
    assert (corpus_dir / 'seq_000.imu').exists()
    with pytest.raises(SystemExit) as e:
        main(['--from-manifest', str(tmp_path / 'missing.yaml')])
    assert e.value.code == 2


def test_input_errors(tmp_path, profile_yaml, tiny_yaml, capsys):
    assert main([]) == EXIT_INPUT
    assert main(['train', str(tmp_path), '--config', str(tiny_yaml)]) == EXIT_INPUT
    assert main(['train', str(tmp_path), '--config', str(tmp_path / 'x.yaml')]) == EXIT_INPUT

    bad = tmp_path / 'bad.yaml'
    bad.write_text('train:\n  learning_rate: 1\n', encoding='utf8')
    assert main(['inspect', '--config', str(bad)]) == EXIT_INPUT

    profile = tmp_path / 'backwards.yaml'
    profile.write_text('segments:\n  - {duration_s: 1, speed: -1}\n', encoding='utf8')
    assert main(['synth', str(profile), '--out-dir', str(tmp_path / 'out')]) == EXIT_INPUT

    with pytest.raises(SystemExit) as e:
        main(['--version'])
    assert e.value.code == 0


def test_dry_run(tmp_path, capsys):
    assert main(['train', str(tmp_path), '--dry-run']) == 0
    out = capsys.readouterr().out
    assert 'parameters: 2566110' in out
    assert 'FLOPs at L=200' in out
    assert not (tmp_path / 'manifest.yaml').exists()

    assert main(['train', str(tmp_path), '--dry-run', '--ablation', 'no-msgcu']) == 0
    assert 'parameters: 2374826' in capsys.readouterr().out


def test_inspect(tmp_path, capsys):
    assert main(['inspect', '--out-dir', str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert '# parameters' in out and '# stages at L=200' in out and '# FLOPs at L=200' in out
    assert 'total\t\t2566110' in out
    assert 'stem.weight\t24x6x3\t432' in out
    assert '\n1\t24\t200\t48\t325\n' in out
    assert '\n4\t416\t8\t832\t' in out
    assert not list(tmp_path.iterdir())

    assert main(['inspect', '--length', '27', '--ablation', 'no-msgcu']) == 0
    out = capsys.readouterr().out
    assert 'total\t\t2374826' in out
    assert 'msgcu\t\t0' in out
    assert '\n4\t416\t1\t832\t' in out


def test_pipeline(corpus_dir, tiny_yaml, tmp_path, capsys):
    runs = tmp_path / 'runs'
    assert main(['train', str(corpus_dir), '--config', str(tiny_yaml),
                 '--out-dir', str(runs)]) == 0
    run_dir = next(runs.glob('run-*-seed0'))
    assert (run_dir / 'manifest.yaml').exists()
    assert len((run_dir / 'metrics.csv').read_text().splitlines()) == 3
    best = run_dir / 'best.npz'
    checkpoint = Checkpoint.load(best)
    assert checkpoint.model_config.window_len == 12
    assert checkpoint.normalization is not None
    assert 'best checkpoint' in capsys.readouterr().out

    report = tmp_path / 'report'
    assert main(['eval', str(best), str(corpus_dir), '--out-dir', str(report)]) == 0
    rows = read_metric_table(report / 'metrics.csv')
    assert [r['sequence'] for r in rows] == load_split(corpus_dir / 'split.yaml').test
    assert rows[0]['ate_m'] >= 0
    assert read_yaml(report / 'manifest.yaml')['command'] == 'eval'
    assert 'mean ate_m' in capsys.readouterr().out

    predictions = tmp_path / 'predictions'
    assert main(['predict', str(best), str(corpus_dir / 'seq_000.imu'), '--config',
                 str(tiny_yaml), '--out-dir', str(predictions)]) == 0
    lines = (predictions / 'seq_000.csv').read_text().splitlines()
    assert lines[0] == 't,est_x,est_y,gt_x,gt_y'
    assert len(lines) == 1 + 17

    other = tmp_path / 'other.yaml'
    other.write_text('model:\n  stage_widths: [4, 4]\n', encoding='utf8')
    assert main(['eval', str(best), str(corpus_dir), '--config', str(other),
                 '--out-dir', str(report)]) == EXIT_INPUT


def test_train_empty_split(corpus_dir, tiny_yaml, tmp_path):
    split = load_split(corpus_dir / 'split.yaml')
    write_split(SplitSpec(train=split.train, val=[], test=split.test + split.val),
                corpus_dir / 'split.yaml')
    assert main(['train', str(corpus_dir), '--config', str(tiny_yaml),
                 '--out-dir', str(tmp_path / 'runs')]) == EXIT_INPUT


def test_train_divergence(corpus_dir, tiny_yaml, tiny_config, tmp_path, mocker):
    checkpoint = Checkpoint.from_model(DwsformerModel(tiny_config))
    mocker.patch('dwstrack.cli.train', side_effect=NumericError('boom', checkpoint=checkpoint))
    assert main(['train', str(corpus_dir), '--config', str(tiny_yaml),
                 '--out-dir', str(tmp_path)]) == EXIT_NUMERIC
    assert Checkpoint.load(tmp_path / 'last-good.npz').model_config.stage_widths == [4, 8]


def test_determinism(tmp_path, profile_yaml, tiny_yaml):
    tables = []
    for name in ('a', 'b'):
        out = tmp_path / name
        assert main(['synth', str(profile_yaml), '--out-dir', str(out / 'corpus')]) == 0
        assert main(['train', str(out / 'corpus'), '--config', str(tiny_yaml), '--epochs', '1',
                     '--out-dir', str(out / 'runs')]) == 0
        best = next((out / 'runs').glob('run-*')) / 'best.npz'
        assert main(['eval', str(best), str(out / 'corpus'), '--split', 'val',
                     '--out-dir', str(out / 'report')]) == 0
        tables.append((out / 'report' / 'metrics.csv').read_text())
    assert tables[0] == tables[1]


def test_trained_checkpoint(heading_corpus, tiny_yaml, tmp_path):
    runs = tmp_path / 'runs'
    assert main(['train', str(heading_corpus), '--config', str(tiny_yaml), '--epochs', '30',
                 '--lr', '0.01', '--out-dir', str(runs)]) == 0
    best = next(runs.glob('run-*')) / 'best.npz'

    def mean_ate(split):
        out = tmp_path / ('eval-' + split)
        assert main(['eval', str(best), str(heading_corpus), '--split', split,
                     '--out-dir', str(out)]) == 0
        rows = read_metric_table(out / 'metrics.csv')
        return sum(r['ate_m'] for r in rows) / len(rows)

    assert mean_ate('train') < mean_ate('test')

    checkpoint = Checkpoint.load(best)
    untrained = DwsformerModel(checkpoint.model_config)
    windows = WindowDataset.from_sequences(
        load_corpus(heading_corpus, ['forward_0']), 12, 12, checkpoint.normalization)
    untrained.calibrate([x for x, _ in windows.batches(16)])
    Checkpoint.from_model(untrained, checkpoint.normalization).save(tmp_path / 'untrained.npz')

    def endpoint_error(path):
        out = tmp_path / ('predict-' + path.stem)
        assert main(['predict', str(path), str(heading_corpus / 'forward_0.imu'),
                     '--out-dir', str(out)]) == 0
        last = list(iter_dicts_from_csv(out / 'forward_0.csv'))[-1]
        return math.hypot(float(last['est_x']) - float(last['gt_x']),
                          float(last['est_y']) - float(last['gt_y']))

    assert endpoint_error(best) < endpoint_error(tmp_path / 'untrained.npz')


def test_from_manifest_reruns(heading_corpus, tiny_yaml, tmp_path):
    runs = tmp_path / 'runs'
    assert main(['train', str(heading_corpus), '--config', str(tiny_yaml),
                 '--out-dir', str(runs)]) == 0
    run_dir = next(runs.glob('run-*'))
    trace = (run_dir / 'metrics.csv').read_text()
    assert main(['--from-manifest', str(run_dir / 'manifest.yaml')]) == 0
    traces = [p.read_text() for p in runs.glob('run-*/metrics.csv')]
    assert traces and all(t == trace for t in traces)

    best = run_dir / 'best.npz'
    for argv, name in [
        (['eval', str(best), str(heading_corpus)], 'metrics.csv'),
        (['predict', str(best), str(heading_corpus / 'forward_0.imu')], 'forward_0.csv'),
    ]:
        out = tmp_path / argv[0]
        assert main(argv + ['--out-dir', str(out)]) == 0
        expected = (out / name).read_bytes()
        (out / name).unlink()
        assert main(['--from-manifest', str(out / 'manifest.yaml')]) == 0
        assert (out / name).read_bytes() == expected


def test_train_world_frame(heading_corpus, tiny_yaml, tmp_path):
    runs = tmp_path / 'runs'
    assert main(['train', str(heading_corpus), '--config', str(tiny_yaml), '--frame', 'world',
                 '--epochs', '1', '--out-dir', str(runs)]) == 0
    best = next(runs.glob('run-*')) / 'best.npz'
    assert Checkpoint.load(best).frame == 'world'
    assert main(['predict', str(best), str(heading_corpus / 'back_0.imu'),
                 '--out-dir', str(tmp_path / 'predictions')]) == 0
