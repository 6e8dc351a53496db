from dwstrack.util import *


def test_format_float():
    assert format_float(0.1) == '0.1'
    assert float(format_float(1 / 3)) == 1 / 3
    assert format_float(2) == '2.0'


def test_csv(tmp_path):
    path = tmp_path / 'table.csv'
    write_csv(path, [['a', 'b'], [1, 'x'], [2, 'y']])
    assert path.read_bytes() == b'a,b\r\n1,x\r\n2,y\r\n'
    rows = list(iter_dicts_from_csv(path))
    assert [r['a'] for r in rows] == ['1', '2']
    assert list(rows[0]) == ['a', 'b']

    write_csv(path, [['a', 'b'], ['#1', 'x']], delimiter='\t')
    assert list(iter_dicts_from_csv(path, delimiter='\t'))[0]['a'] == '#1'


def test_yaml(tmp_path):
    path = tmp_path / 'data.yaml'
    path.write_text('', encoding='utf8')
    assert read_yaml(path) == {}
    write_yaml(path, dict(z=1, a=[1, 2], name='ünï'))
    assert list(read_yaml(path)) == ['z', 'a', 'name']
    assert read_yaml(path)['name'] == 'ünï'
