"""Tests for adaptive integration, post-hoc event extraction, Lyapunov.

The harmonic oscillator supplies exact oracles for event timing: for
y = (cos t, -sin t), extrema of the first component sit at t = k*pi with
values (-1)^k, and level crossings of cos t are at arccos(level) + 2k*pi
and its reflection.
"""

import json
import math

import numpy as np
import pytest

from lmglab.model import ModelParams, lmg_vector_field
from lmglab.integrate import (
    DegeneratePlaneError,
    IntegrationError,
    TransientEscapeWarning,
    events_to_csv,
    extrema_events,
    integrate,
    lyapunov_max,
    poincare_crossings,
    trajectory_to_csv,
)

P_FLIP = ModelParams(omega=0.0, omega0=1.0, kappa=5.0,
                     lambda_minus=0.5, lambda_plus=0.8)
P_SINK = ModelParams(omega=0.0, omega0=1.0, kappa=5.0,
                     lambda_minus=0.5, lambda_plus=0.45,
                     gamma_down=0.01, gamma_up=0.0)


def harmonic(t, y):
    return np.array([y[1], -y[0]])


T_END = 20 * math.pi + 0.5


@pytest.fixture(scope="module")
def harmonic_traj():
    return integrate(harmonic, np.array([1.0, 0.0]), (0.0, T_END),
                     rtol=1e-12, atol=1e-14)


class TestIntegrate:
    def test_accuracy_and_dense_output(self, harmonic_traj):
        tr = harmonic_traj
        np.testing.assert_allclose(tr.states[-1],
                                   [math.cos(T_END), -math.sin(T_END)],
                                   atol=1e-8)
        np.testing.assert_allclose(tr.sol(math.pi / 2), [0.0, -1.0],
                                   atol=1e-9)
        assert tr.t_span == (0.0, T_END)
        assert tr.times[0] == 0.0 and tr.times[-1] == T_END
        assert tr.states.shape == (len(tr.times), 2)

    def test_blowup_raises(self):
        with pytest.raises(IntegrationError) as err:
            integrate(lambda t, y: np.array([y[0] ** 2]), np.array([1.0]),
                      (0.0, 2.0))
        assert err.value.t_fail is not None
        assert 0.9 < err.value.t_fail <= 1.1

    def test_stop_near_point(self):
        # flow toward the stable axis point gamma = -0.5
        f = lmg_vector_field(P_SINK)
        target = np.array([0.0, 0.0, -0.5])
        tr = integrate(f, np.array([0.05, 0.0, -0.4]), (0.0, 4000.0),
                       rtol=1e-10, atol=1e-12,
                       stop_points=[(target, 1e-4)])
        assert tr.stopped
        assert tr.times[-1] < 4000.0
        assert np.linalg.norm(tr.states[-1] - target) == pytest.approx(
            1e-4, rel=1e-3)

    def test_no_stop_flag_when_finishing(self, harmonic_traj):
        assert not harmonic_traj.stopped


class TestExtrema:
    def test_times_values_symbols(self, harmonic_traj):
        evs = extrema_events(harmonic_traj, component=0,
                             exclusion_halfwidth=0.2)
        assert len(evs) == 20
        for k, ev in enumerate(evs, start=1):
            assert ev.time == pytest.approx(k * math.pi, abs=1e-10)
            want = -1.0 if k % 2 else 1.0
            assert ev.value == pytest.approx(want, abs=1e-9)
            assert ev.symbol == (0 if k % 2 else 1)

    def test_exclusion_band_drops_symbols(self):
        tr = integrate(harmonic, np.array([0.1, 0.0]),
                       (0.0, 6 * math.pi + 0.5), rtol=1e-12, atol=1e-14)
        evs = extrema_events(tr, component=0, exclusion_halfwidth=0.2)
        assert len(evs) == 6
        assert all(ev.symbol is None for ev in evs)

    def test_second_component(self, harmonic_traj):
        evs = extrema_events(harmonic_traj, component=1,
                             exclusion_halfwidth=0.0)
        assert evs[0].time == pytest.approx(math.pi / 2, abs=1e-10)
        assert evs[0].value == pytest.approx(-1.0, abs=1e-9)


class TestPlaneCrossings:
    def test_times_and_directions(self, harmonic_traj):
        cr = poincare_crossings(harmonic_traj, component=0, value=0.5)
        assert len(cr) == 20
        t0 = math.pi / 3
        assert cr[0].time == pytest.approx(t0, abs=1e-10)
        assert cr[0].direction == -1
        assert cr[1].time == pytest.approx(2 * math.pi - t0, abs=1e-10)
        assert cr[1].direction == +1
        assert cr[2].time == pytest.approx(2 * math.pi + t0, abs=1e-10)
        np.testing.assert_allclose([c.state[0] for c in cr], 0.5, atol=1e-9)

    def test_direction_filter(self, harmonic_traj):
        down = poincare_crossings(harmonic_traj, component=0, value=0.5,
                                  direction=-1)
        assert len(down) == 10
        assert all(c.direction == -1 for c in down)

    def test_degenerate_plane_raises(self):
        tr = integrate(lambda t, y: np.zeros(1), np.array([0.5]),
                       (0.0, 10.0))
        with pytest.raises(DegeneratePlaneError):
            poincare_crossings(tr, component=0, value=0.5)


class TestModelTrajectories:
    def test_norm_conservation_without_pumps(self):
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0,
                        lambda_minus=0.5, lambda_plus=1.0)
        s0 = np.array([0.3, 0.0, -0.4])
        tr = integrate(lmg_vector_field(p), s0, (0.0, 200.0),
                       rtol=1e-12, atol=1e-14)
        norms = np.linalg.norm(tr.states, axis=1)
        assert np.max(np.abs(norms - norms[0])) < 1e-9

    def test_pole_flip_up(self):
        # mu > 0 drives theta to 0, so gamma climbs to +r from any
        # start off the south pole
        s0 = np.array([0.5 * math.sin(2.6), 0.0, 0.5 * math.cos(2.6)])
        tr = integrate(lmg_vector_field(P_FLIP), s0, (0.0, 400.0),
                       rtol=1e-11, atol=1e-13)
        assert tr.states[-1][2] == pytest.approx(0.5, abs=1e-6)


class TestLyapunov:
    def test_sink_exponent_and_warning(self):
        with pytest.warns(TransientEscapeWarning):
            res = lyapunov_max(P_SINK, np.array([0.05, 0.0, -0.4]),
                               horizon=1500.0, renorm_interval=5.0, seed=3)
        # leading eigenvalue at the sink is -mu*geq - sigma = -0.0195
        assert res.exponent == pytest.approx(-0.0195, abs=0.004)
        assert res.escaped
        assert res.stderr >= 0.0

    def test_deterministic(self):
        kw = dict(horizon=300.0, renorm_interval=5.0, seed=7)
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = lyapunov_max(P_SINK, np.array([0.05, 0.0, -0.4]), **kw)
            b = lyapunov_max(P_SINK, np.array([0.05, 0.0, -0.4]), **kw)
        assert a.exponent == b.exponent
        assert a.n_renorms == b.n_renorms


class TestCsv:
    def test_trajectory_csv_deterministic(self, tmp_path, harmonic_traj):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        trajectory_to_csv(harmonic_traj, p1, n_samples=101,
                          meta={"run": "osc"})
        trajectory_to_csv(harmonic_traj, p2, n_samples=101,
                          meta={"run": "osc"})
        assert p1.read_bytes() == p2.read_bytes()
        lines = p1.read_text().splitlines()
        meta = json.loads(lines[0][1:])
        assert meta["run"] == "osc"
        assert lines[1].split(",")[0] == "t"
        assert len(lines) == 2 + 101

    def test_events_csv(self, tmp_path, harmonic_traj):
        evs = extrema_events(harmonic_traj, component=0,
                             exclusion_halfwidth=0.2)
        cr = poincare_crossings(harmonic_traj, component=0, value=0.5)
        path = tmp_path / "ev.csv"
        events_to_csv(list(evs) + list(cr), path, meta={"w": 0.2})
        lines = path.read_text().splitlines()
        assert len(lines) == 2 + 40
        assert lines[1] == "time,kind,value,tag"
