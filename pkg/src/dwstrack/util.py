"""
Utility functions for dwstrack.
"""
import csv
import pathlib
import collections

import yaml

__all__ = ['iter_dicts_from_csv', 'write_csv', 'read_yaml', 'write_yaml', 'format_float']


def format_float(value):
    """
    Shortest decimal representation which reads back to the same float.
    """
    return repr(float(value))


def iter_dicts_from_csv(filename, delimiter=','):
    """
    Iterate over the rows of a CSV file with header as ordered dicts.
    """
    header = None
    with pathlib.Path(filename).open(newline='') as csvfile:
        for row in csv.reader(csvfile, delimiter=delimiter):
            if header is None:
                header = row
            else:
                yield collections.OrderedDict(zip(header, row))


def write_csv(filename, rows, delimiter=','):
    with pathlib.Path(filename).open('w', newline='') as f:
        writer = csv.writer(f, delimiter=delimiter)
        writer.writerows(rows)


def read_yaml(filename):
    with pathlib.Path(filename).open(encoding='utf8') as f:
        return yaml.safe_load(f) or {}


def write_yaml(filename, data):
    with pathlib.Path(filename).open('w', encoding='utf8') as f:
        yaml.safe_dump(data, f, sort_keys=False, default_flow_style=False)
