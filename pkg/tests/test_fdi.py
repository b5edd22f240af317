import dataclasses

import numpy as np
import pytest

from airmhe import fdi
from airmhe import simulator as sim
from airmhe.errors import AllSensorsFaulty, EmptyBank
from airmhe.mhe import Bounds


def test_residuals_per_channel():
    row = [0.10, 0.11, 0.09, -2.0, 60.0, 61.0, 59.0]
    r = fdi.residuals(row, np.array([0.1, -1.0, 60.0]))
    assert np.allclose(r, [0.0, 0.01, -0.01, 0.0, 1.0, -1.0])


def test_rms_of_partial_window():
    st = fdi.EvaluationState()
    st.push(np.full(6, 5.0))
    J = st.push(np.zeros(6))
    assert np.allclose(J, np.sqrt(12.5))


def test_rms_window_slides():
    st = fdi.EvaluationState(n_eval=10)
    for v in range(1, 16):
        J = st.push(np.full(6, float(v)))
    assert J[0] == pytest.approx(np.sqrt(np.mean(np.arange(6, 16) ** 2.0)))


def hit_sequence(pattern, required=3, window=10):
    st = fdi.EvaluationState(window=window, required=required)
    health = fdi.HealthReport()
    th = fdi.Thresholds(1.0, 1.0)
    for k, h in enumerate(pattern):
        J = np.array([2.0 if h else 0.5, 0, 0, 0, 0, 0])
        fdi.detect(st, J, th, health, k)
    return health


def test_three_hits_in_ten_latch():
    health = hit_sequence([1, 0, 0, 0, 1, 0, 0, 0, 0, 1])
    assert health.faulty_since == {"aoa1": 9}


def test_two_hits_in_ten_do_not_latch():
    assert not hit_sequence([1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]).faulty_since


def test_hits_further_apart_than_window_do_not_latch():
    assert not hit_sequence([1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1]).faulty_since


def test_two_of_ten_rule_latches_earlier():
    assert hit_sequence([1, 0, 1], required=2).faulty_since == {"aoa1": 2}


def test_threshold_test_is_strict():
    st = fdi.EvaluationState()
    health = fdi.HealthReport()
    for k in range(10):
        fdi.detect(st, np.ones(6), fdi.Thresholds(1.0, 1.0), health, k)
    assert not health.faulty_since


def test_isolation_latches():
    health = hit_sequence([1, 1, 1] + [0] * 30)
    assert health.H_alpha == (2, 3)
    assert health.faulty_since["aoa1"] == 2


def test_inactive_detection_records_no_hits():
    st = fdi.EvaluationState()
    health = fdi.HealthReport()
    for k in range(5):
        fdi.detect(st, np.full(6, 9.0), fdi.Thresholds(1.0, 1.0), health, k, active=False)
    assert not health.faulty_since


def test_isolation_resets_surviving_channels_of_same_type():
    st = fdi.EvaluationState()
    health = fdi.HealthReport()
    th = fdi.Thresholds(1.0, 1.0)
    for k in range(3):
        st.push(np.full(6, 0.5))
        fdi.detect(st, np.array([0, 0, 0, 2.0, 1.5 if k else 0.5, 0.5]), th, health, k)
    assert list(health.faulty_since) == ["vcas1"]
    # vcas2 had two hits; they are cleared together with its buffer
    assert len(st.hits[4]) == 0 and len(st.buf[4]) == 0
    assert len(st.hits[0]) == 3 and len(st.buf[0]) == 3


def test_all_channels_of_a_type_isolated_raises():
    st = fdi.EvaluationState()
    health = fdi.HealthReport()
    with pytest.raises(AllSensorsFaulty):
        for k in range(3):
            fdi.detect(st, np.array([2.0, 2.0, 2.0, 0, 0, 0]), fdi.Thresholds(1.0, 1.0), health, k)


def test_threshold_validation():
    with pytest.raises(ValueError):
        fdi.Thresholds(0.0, 1.0)
    with pytest.raises(ValueError):
        fdi.EvaluationState(window=3, required=4)


def test_empty_bank_rejected():
    with pytest.raises(EmptyBank):
        fdi.calibrate_thresholds([], fdi.LoopConfig())


# ----------------------------------------------------------------------
# Closed loop


LOOP = fdi.LoopConfig(bounds=Bounds.wind())


def bank(seeds, duration=12.0):
    return [sim.build_scenario(sim.ScenarioConfig(duration=duration, noise=sim.SensorNoiseSpec(seed=s)))
            for s in seeds]


@pytest.fixture(scope="module")
def calibrated():
    scen = bank([0, 1])
    return scen, fdi.calibrate_thresholds(scen, LOOP)


def test_calibration_is_max_evaluated_rms(calibrated):
    scen, th = calibrated
    maxima = [fdi.max_rms(fdi.run_closed_loop(sc, LOOP), LOOP.n_suppress) for sc in scen]
    assert th.J_alpha == max(m[0] for m in maxima)
    assert th.J_vc == max(m[1] for m in maxima)


def test_calibrated_thresholds_give_no_false_alarms_on_bank(calibrated):
    scen, th = calibrated
    cfg = dataclasses.replace(LOOP, thresholds=th)
    for sc in scen:
        assert fdi.run_closed_loop(sc, cfg).isolation == {}


def test_calibration_monotone_in_bank(calibrated):
    scen, th = calibrated
    smaller = fdi.calibrate_thresholds(scen[:1], LOOP)
    assert smaller.J_alpha <= th.J_alpha and smaller.J_vc <= th.J_vc


def test_short_run_cannot_calibrate():
    with pytest.raises(EmptyBank):
        fdi.calibrate_thresholds(bank([0], duration=0.2), LOOP)


def test_vcas_bias_isolated(calibrated):
    _, th = calibrated
    fault = sim.FaultSpec.from_config({"sensor": "vcas1", "bias": 7.0, "start": 5.0})
    sc = sim.build_scenario(sim.ScenarioConfig(duration=12.0, noise=sim.SensorNoiseSpec(seed=5), faults=[fault]))
    tr = fdi.run_closed_loop(sc, dataclasses.replace(LOOP, thresholds=th))
    assert "vcas1" in tr.isolation
    assert fdi.false_alarms(tr, [fault]) == []
    t_iso = fdi.isolation_times(tr, [fault], sc.t_s)["vcas1"]
    assert 0 < t_iso < 2.0
    # after isolation the channel is excluded from every later solve
    k = tr.isolation["vcas1"]
    assert not tr.healthy[k + 1:, 3].any()


def test_first_sample_has_no_prediction():
    sc = bank([0], duration=1.0)[0]
    tr = fdi.run_closed_loop(sc, LOOP)
    assert np.all(np.isnan(tr.residual[0])) and not np.any(np.isnan(tr.residual[1:]))
    assert len(tr) == len(sc)


def test_loop_copy_is_independent():
    sc = bank([0], duration=1.0)[0]
    rows = sc.measurements.rows()
    a = fdi.ClosedLoop(LOOP, sc.t_s)
    for k in range(10):
        a.step(sc.t[k], rows[k], sc.params.at(k))
    b = a.copy()
    for k in range(10, 20):
        a.step(sc.t[k], rows[k], sc.params.at(k))
        b.step(sc.t[k], rows[k], sc.params.at(k))
    assert np.array_equal(a.trace().J[10:], b.trace().J[10:])
    assert len(b.trace()) == 20
