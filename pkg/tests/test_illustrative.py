import csv
import io

import numpy as np

from logstab.illustrative import A_ILLUSTRATIVE, direction, schedule_csv, track


def test_direction_unit_and_known_value():
    for t in np.linspace(0, 1, 11):
        assert abs(np.linalg.norm(direction(t)) - 1.0) <= 1e-15
    M0 = np.array([[0, 0, 0], [0, 0, 0], [0, 1, 0]], dtype=float)
    assert np.array_equal(direction(0.0), M0)


def test_schedule():
    points, transitions = track()
    assert len(points) == 21
    early = [p for p in points if p.t <= 0.4 + 1e-12]
    assert all(np.array_equal(p.d_star, [0.5, 1, 1]) for p in early)
    assert len(transitions) == 1
    tr = transitions[0]
    assert abs(tr.t - 0.45) <= 1e-12
    assert np.array_equal(tr.d_new, [0.5, 1, 0.5])
    assert np.allclose(tr.gradient_old, [-0.2865, 1.0832, -0.0002], atol=1e-3)
    assert np.allclose(tr.gradient_new, [-0.2804, 1.0830, -0.0043], atol=1e-3)


def test_mu_descends():
    points, _ = track()
    mu = np.array([p.mu for p in points])
    assert mu[-1] < mu[0]
    assert np.all(np.diff(mu) <= 1e-12)


def test_csv_layout():
    points, _ = track()
    rows = list(csv.reader(io.StringIO(schedule_csv(points))))
    assert rows[0] == ["t", "mu", "d_star", "g1", "g2", "g3"]
    assert rows[1][2] == "m 1 1" and rows[-1][2] == "m 1 m"
    assert float(rows[-1][0]) == 1.0


def test_base_matrix():
    assert A_ILLUSTRATIVE.shape == (3, 3)
    assert A_ILLUSTRATIVE[2, 2] == -2.32
