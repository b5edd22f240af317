"""
CSV and JSON writers with a stamped schema.

Every CSV starts with two comment lines::

    # schema: airmhe.<table>/<version>
    # units: <unit per column, comma separated>

followed by the header row.  Readers can skip lines starting with ``#``.
"""

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plain(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, table, columns, rows):
    """Write ``rows`` (iterables aligned with ``columns``).

    ``columns`` is a list of ``(name, unit)`` pairs.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: airmhe.{table}/{SCHEMA_VERSION}\n")
        fh.write("# units: " + ",".join(u for _, u in columns) + "\n")
        w = csv.writer(fh)
        w.writerow([n for n, _ in columns])
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    """Return ``(schema, units, header, rows)`` with rows as lists of strings."""
    lines = Path(path).read_text().splitlines()
    schema = lines[0].split(":", 1)[1].strip()
    units = lines[1].split(":", 1)[1].strip().split(",")
    reader = csv.reader(lines[2:])
    header = next(reader)
    return schema, units, header, list(reader)


# ----------------------------------------------------------------------
# Closed-loop log


LOOP_COLUMNS = (
    [("t", "s")]
    + [(f"meas_alpha{i}", "rad") for i in (1, 2, 3)] + [("meas_vz", "m/s")]
    + [(f"meas_vc{i}", "m/s") for i in (1, 2, 3)]
    + [("pred_alpha", "rad"), ("pred_vz", "m/s"), ("pred_vc", "m/s")]
    + [(f"r_alpha{i}", "rad") for i in (1, 2, 3)] + [(f"r_vc{i}", "m/s") for i in (1, 2, 3)]
    + [(f"J_alpha{i}", "rad") for i in (1, 2, 3)] + [(f"J_vc{i}", "m/s") for i in (1, 2, 3)]
    + [("J_th_alpha", "rad"), ("J_th_vc", "m/s")]
    + [(f"healthy_alpha{i}", "flag") for i in (1, 2, 3)] + [(f"healthy_vc{i}", "flag") for i in (1, 2, 3)]
    + [("est_alpha", "rad"), ("est_wx", "m/s"), ("est_wz", "m/s")]
    + [("n_active", "count"), ("sqp_iterations", "count"), ("solve_time", "s"), ("stationarity", "1")]
)


def write_loop_log(path, trace, rows, thresholds):
    """Per-sample closed-loop log (see :data:`LOOP_COLUMNS`)."""
    out = []
    for k in range(len(trace)):
        out.append([trace.t[k], *rows[k], *trace.prediction[k], *trace.residual[k], *trace.J[k],
                    thresholds.J_alpha, thresholds.J_vc, *trace.healthy[k], *trace.estimate[k],
                    trace.n_active[k], trace.iterations[k], trace.solve_time[k], trace.stationarity[k]])
    return write_csv(path, "loop", LOOP_COLUMNS, out)
