import csv

import numpy as np
import pytest

from eccpos import evaluation as ev
from eccpos import training as tr
from eccpos.channel import ScenarioConfig


def _report(errors_offset=(0.0, 0.0, 0.0), n=20, n_bits=None):
    rng = np.random.default_rng(1)
    pos = rng.uniform(-10, 10, (n, 3))
    est = pos + np.asarray(errors_offset)
    return ev.EvalReport(tr.localization_errors(pos, est), pos, est, n_bits, 32, (2, 2, 8))


def test_perfect_and_offset_predictors():
    assert np.all(_report().errors == 0)
    r = _report((3.0, 4.0, 0.0))
    assert np.allclose(r.errors, 5.0, atol=1e-12) and np.isclose(r.mean, 5.0)
    assert np.isclose(r.e90, 5.0)


def test_cdf_monotone_ends_at_one():
    e = np.random.default_rng(0).exponential(3.0, 500)
    grid, frac = ev.error_cdf(e, 50)
    assert grid.shape == frac.shape == (51,)
    assert grid[0] == 0 and grid[-1] == e.max()
    assert np.all(np.diff(frac) >= 0) and frac[-1] == 1.0
    assert np.isclose(frac[25], np.mean(e <= grid[25]))


def test_eta_values():
    assert _report().eta == 1.0
    assert np.isclose(_report(n_bits=10).eta, 320 / 2048)
    assert np.isclose(_report(n_bits=4).eta_total, (128 + 32) / 2048)


def test_report_files(tmp_path):
    r = _report((0.5, -1.0, 2.0), n_bits=4)
    paths = ev.emit_reports(r, tmp_path / "a")
    pos, est, err = ev.read_errors_csv(paths["errors"])
    assert np.array_equal(pos, r.positions) and np.array_equal(est, r.estimates)
    assert abs(err.mean() - r.mean) <= 1e-9
    text = open(paths["summary"]).read()
    assert f"mean_error_m: {r.mean:.2f}\n" in text and "eta: 6.25%" in text
    assert "B_emb_bits: 128" in text and "B_tot_bits: 160" in text
    rows = list(csv.reader(open(paths["cdf"])))
    assert rows[0] == ["error_m", "cdf"] and float(rows[-1][1]) == 1.0
    # re-emission is byte identical
    again = ev.emit_reports(r, tmp_path / "b")
    for k in paths:
        assert open(paths[k], "rb").read() == open(again[k], "rb").read()


def test_tradeoff_table(tmp_path):
    rows = ev.tradeoff_rows([_report(n_bits=4), _report(), _report(n_bits=10)])
    assert [r.label for r in rows] == ["lossless", "Q=10", "Q=4"]
    ev.write_tradeoff_csv(tmp_path / "t.csv", rows)
    lines = list(csv.reader(open(tmp_path / "t.csv")))
    assert lines[0] == ["setting", "q_bits", "eta_percent", "mean_error_m", "e90_m"]
    assert [l[2] for l in lines[1:]] == ["100.00", "15.62", "6.25"]
    assert lines[1][1] == ""


def test_spiral():
    pts = ev.spiral_trajectory(91, 6.0, 3.0, (1.0, 3.0), (2.0, -1.0))
    assert np.allclose(pts[0], [8.0, -1.0, 1.0]) and np.isclose(pts[-1, 2], 3.0)
    assert np.allclose(np.hypot(pts[:, 0] - 2.0, pts[:, 1] + 1.0), 6.0)
    assert np.all(np.diff(pts[:, 2]) > 0)
    sc = ScenarioConfig()
    c = 0.5 * (sc.region_low + sc.region_high)
    ev.check_inside(sc, ev.spiral_trajectory(30, 6.0, 3.0, sc.height, c[:2]))
    with pytest.raises(ValueError, match="outside"):
        ev.check_inside(sc, ev.spiral_trajectory(30, 1e3, 3.0, sc.height, c[:2]))


def test_evaluate_paths_agree(small_run, small_bank, small_stage1):
    s = tr.generate_samples(small_run, small_bank, tr.stream_id(tr.TEST), 10)
    m = tr.build_model(small_run, small_stage1.encoders, 10, None, small_bank)
    rep = ev.evaluate(m, s, small_run.scenario, batch=3)
    assert rep.errors.shape == (10,) and rep.n_bits == 10
    assert np.allclose(rep.estimates, m.predict(s.inputs, s.gains), atol=1e-5)
    with pytest.raises(ValueError):
        ev.evaluate(m, tr.Samples(s.positions[:0], s.inputs[:0], s.gains[:0]),
                    small_run.scenario)
