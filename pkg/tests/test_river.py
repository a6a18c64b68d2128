import math

import numpy as np
import pytest

from mpep.river import (
    ExitPoint,
    RiverInterval,
    collar_entry_time,
    second_variation_check,
    sub_river,
    transition_map_G,
)

TWO_PI = 2 * math.pi


def test_interval_helpers():
    r = RiverInterval(1.0, 2.0, 2.0, 1.0)
    assert r.orientation == 1
    assert r.contains(1.5) and not r.contains(2.5)
    assert r.contains(1.5 + TWO_PI)
    g = r.grid(3)
    assert np.allclose(g, [1.25, 1.5, 1.75])
    assert r.toward_theta1(0.25) == pytest.approx(1.75)
    m = r.mirror()
    assert m.lo == pytest.approx(1.0 - math.pi) and m.theta1 == pytest.approx(2.0 - math.pi)


def test_river_ends_at_heteroclinics(river, hets, pipe):
    assert river.theta1 == pytest.approx(4.7926, abs=1e-3)
    assert river.theta2 == pytest.approx(2.8930, abs=1e-3)
    assert river.orientation == 1
    ends = {h.theta for h in hets}
    assert river.theta1 in ends and river.theta2 in ends
    idx = {r["theta"]: r["index"] for r in pipe.get("maslov").payload["rows"]}
    assert idx[river.theta1] == 0 and idx[river.theta2] == 1


def test_exit_points_lie_on_gamma(problem, river):
    for th in river.grid(6):
        ep = transition_map_G(problem, th)
        assert isinstance(ep, ExitPoint)
        assert ep.gamma_distance <= 1e-8
        assert abs(ep.H) <= 1e-8
        assert 0 <= ep.s < problem.orbit.circumference


def test_river_angles_exit(pipe):
    rows = pipe.get("river").tables["river"]
    assert len(rows) == 64
    assert all(math.isfinite(r["exit_time"]) for r in rows)


def test_conjugate_points_follow_collar_entry(pipe):
    for r in pipe.get("river").tables["river"]:
        times = [float(t) for t in r["conjugate_times"].split(";") if t]
        if times:
            assert r["collar_time"] is not None
            assert r["collar_time"] < times[0]


def test_collar_is_not_entered_near_origin(problem, river):
    tr = problem.forward(river.toward_theta1(0.5), 1.0, exit=False, start_radius=0.1)
    assert collar_entry_time(problem.orbit, tr, 0.32) is None


def test_sub_river_is_the_index_zero_side(problem, river):
    sr = sub_river(problem, river.grid(8))
    idx = np.array([rec.index for rec in sr.records])
    assert np.array_equal(sr.retained, idx == 0)
    # retained angles form one block adjacent to theta1
    keep = sr.retained[::river.orientation]
    assert keep[-1] and np.all(np.diff(keep.astype(int)) >= 0)


def test_pivot(pivot, river):
    assert pivot.theta == pytest.approx(3.628, abs=5e-3)
    assert river.contains(pivot.theta)
    assert pivot.gap <= 1e-8
    assert abs(pivot.bracket[1] - pivot.bracket[0]) <= 1e-9
    assert pivot.conj_time == pytest.approx(pivot.exit.time, abs=1e-6)


def test_mouth_is_resolved(pipe):
    m = pipe.get("pivot").payload["mouth"]
    assert m["max_gap_fraction"] <= 0.005
    assert m["winding_violations"] == 0
    assert m["max_winding"] > 1


def test_second_variation_positive_in_sub_river(problem, river):
    cert = second_variation_check(problem, float(river.toward_theta1(0.3)))
    assert cert.granted
    assert cert.symmetry_defect <= 1e-8
    assert cert.probes[0] == 0.0
    assert min(cert.probes[1:]) > 0
    assert np.allclose(cert.probes, cert.probes_square, rtol=1e-8, atol=1e-12)


def test_second_variation_refused_past_pivot(problem, river):
    cert = second_variation_check(problem, float(river.toward_theta1(0.9)))
    assert not cert.granted
    assert "singular" in cert.reason
