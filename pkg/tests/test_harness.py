import json

import numpy as np
import pytest

from airmhe import cli, export
from airmhe import harness as hx
from airmhe.errors import ConfigError


SIM_CONFIG = {
    "scenario": {"duration": 2.0, "faults": [{"sensor": "vcas2", "bias": 7.0, "start": 1.0}]},
    "estimator": {"algorithm": "CMHE", "q_d": 1.0},
    "thresholds": {"J_alpha": 0.01, "J_vc": 1.0},
}


def write_config(tmp_path, conf, name="conf.json"):
    p = tmp_path / name
    p.write_text(json.dumps(conf))
    return p


def run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path / "out")])


def test_simulate_writes_schema_stamped_log(tmp_path):
    assert run(tmp_path, "simulate", "--config", str(write_config(tmp_path, SIM_CONFIG))) == 0
    schema, units, header, rows = export.read_csv(tmp_path / "out" / "loop.csv")
    assert schema == "airmhe.loop/1"
    assert header == [n for n, _ in export.LOOP_COLUMNS]
    assert units == [u for _, u in export.LOOP_COLUMNS]
    # the time grid includes both end points
    assert len(rows) == 51
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["samples"] == 51 and summary["algorithm"] == "CMHE"


def test_simulate_is_deterministic(tmp_path):
    cfg = str(write_config(tmp_path, SIM_CONFIG))
    logs = []
    for name in ("a", "b"):
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        _, _, header, rows = export.read_csv(tmp_path / name / "loop.csv")
        drop = header.index("solve_time")
        logs.append([r[:drop] + r[drop + 1:] for r in rows])
    assert logs[0] == logs[1]


def test_unknown_config_key_exits_2(tmp_path):
    assert run(tmp_path, "fig2", "--config", str(write_config(tmp_path, {"durration": 3.0}))) == 2


def test_malformed_config_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run(tmp_path, "fig3", "--config", str(p)) == 2


def test_bad_fault_spec_exits_2(tmp_path):
    conf = {"scenario": {"duration": 1.0, "faults": [{"sensor": "pitot", "bias": 1.0, "start": 0.0}]}}
    assert run(tmp_path, "simulate", "--config", str(write_config(tmp_path, conf))) == 2


def test_workers_must_be_positive(tmp_path):
    assert run(tmp_path, "simulate", "--workers", "0") == 2


def test_sensitivity_command(tmp_path):
    assert run(tmp_path, "sensitivity") == 0
    data = json.loads((tmp_path / "out" / "sensitivity.json").read_text())
    assert data["summary"]["min_eig_X_minus_Xa"] >= -1e-8


def test_fig2_small_run_writes_tables(tmp_path):
    conf = {"duration": 1.0, "q_d": [1.0]}
    code = run(tmp_path, "fig2", "--config", str(write_config(tmp_path, conf)))
    assert code in (0, 1)
    schema, _, header, rows = export.read_csv(tmp_path / "out" / "fig2.csv")
    assert schema == "airmhe.fig2/1" and header[0] == "scenario" and len(rows) == 4
    summary = json.loads((tmp_path / "out" / "fig2_summary.json").read_text())
    assert summary["passed"] == (code == 0)


def test_apply_overrides_converts_lists_and_rejects_unknown():
    cfg = cli.apply_overrides(hx.Fig3Config(), {"q_d": [0.5, 2], "common": {"seed": 4}})
    assert cfg.q_d == (0.5, 2.0) and cfg.common.seed == 4
    with pytest.raises(ConfigError):
        cli.apply_overrides(hx.Fig3Config(), {"common": {"sed": 1}})


def _square(cell):
    return {"key": cell["key"], "value": cell["key"] ** 2}


def test_run_cells_order_independent_of_workers():
    cells = [{"key": k} for k in (3, 1, 2, 0)]
    serial = hx.run_cells(_square, cells, 1)
    parallel = hx.run_cells(_square, cells, 2)
    assert [r["key"] for r in serial] == [0, 1, 2, 3]
    assert serial == parallel


def test_unknown_algorithm_rejected():
    with pytest.raises(ConfigError):
        hx._bounds("EKF")


def test_residual_rms():
    assert hx.residual_rms([3.0, -4.0]) == pytest.approx(np.sqrt(12.5))


def test_csv_roundtrip(tmp_path):
    p = export.write_csv(tmp_path / "t.csv", "demo", [("a", "m"), ("b", "flag")], [[0.1, True], [2.5, False]])
    schema, units, header, rows = export.read_csv(p)
    assert (schema, units, header) == ("airmhe.demo/1", ["m", "flag"], ["a", "b"])
    assert rows == [["0.1", "1"], ["2.5", "0"]]


def test_json_sanitizer():
    out = export.plain({"x": np.array([1.0, np.inf]), 2: np.int64(3), "f": np.bool_(True)})
    assert out == {"x": [1.0, "inf"], "2": 3, "f": True}
