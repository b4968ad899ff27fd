"""
CSV and manifest writers.

Every CSV has one header row and a fixed column order. Floats are written
with repr so equal numbers always produce equal bytes.
"""

import csv
import logging
import os

import numpy as np
import simplejson as json

log = logging.getLogger(__name__)


def format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def coordinate_columns(prefix, d):
    if d == 1:
        return [prefix]
    return ["%s%d" % (prefix, i + 1) for i in range(d)]


def write_csv(path, header, rows):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError("row has %d fields, header has %d" % (len(row), len(header)))
            writer.writerow([format_value(v) for v in row])
            count += 1
    log.debug("wrote %d rows to %s", count, path)
    return path


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError("%r is not JSON serializable" % (obj,))


def dumps(data):
    return json.dumps(data, default=_default, sort_keys=True, indent=2, ignore_nan=True)


def write_json(path, data):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        f.write(dumps(data))
        f.write("\n")
    return path
