import importlib
import math

import numpy as np
import pytest

from evcomm import geometry as geo, modem
from evcomm.events import read_events, write_events

sim = importlib.import_module("evcomm.simulate")


def test_ten_bursts_alternating_polarity():
    sched = modem.OnOffSchedule.square_wave(1000.0, 10_000.0)
    ev, truth = sim.simulate(sim.Trajectory(duration_s=1.0), sim.LedModel(noise_rate=0.0), sched, 0)
    assert len(sched) == 10
    # every burst lies within a few latency constants of its edge
    owner = np.searchsorted(sched.edges_t, ev["t"], side="right") - 1
    assert set(owner.tolist()) == set(range(10))
    for k in range(10):
        p = ev["p"][owner == k]
        assert np.sign(p.sum()) == (1 if k % 2 == 0 else -1)
    assert np.all(truth.labels == 0)


def test_determinism(tmp_path):
    sched = modem.encode(b"same seed", 5000.0)
    traj = sim.Trajectory.circular_at_speed(3000.0)
    a, ta = sim.simulate(traj, sim.LedModel(), sched, 42)
    b, tb = sim.simulate(traj, sim.LedModel(), sched, 42)
    write_events(tmp_path / "a.evb", a)
    write_events(tmp_path / "b.evb", b)
    assert (tmp_path / "a.evb").read_bytes() == (tmp_path / "b.evb").read_bytes()
    ta.write_csv(tmp_path / "a.csv")
    tb.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c, _ = sim.simulate(traj, sim.LedModel(), sched, 43)
    assert not np.array_equal(a, c)


def test_output_sorted_in_bounds():
    sched = modem.encode(b"bounds", 2000.0)
    ev, _ = sim.simulate(sim.Trajectory.circular_at_speed(4000.0), sim.LedModel(), sched, 1)
    assert np.all(np.diff(ev["t"]) >= 0)
    assert ev["x"].max() < sim.SENSOR_WIDTH and ev["y"].max() < sim.SENSOR_HEIGHT


def test_rim_speed():
    traj = sim.Trajectory.circular_at_speed(4500.0, diameter=610.0)
    assert traj.angular_rate == pytest.approx(2 * 4500.0 / 610.0)
    sched = modem.encode(b"speed", 1000.0)
    _, truth = sim.simulate(traj, sim.LedModel(), sched, 0)
    assert np.all(np.abs(truth.speed / 4500.0 - 1) < 0.01)
    # numerical derivative of the sampled path agrees too
    v = np.hypot(np.gradient(truth.x, truth.t_us * 1e-6), np.gradient(truth.y, truth.t_us * 1e-6))
    assert np.all(np.abs(v[1:-1] / 4500.0 - 1) < 0.01)


def test_pixel_speed_examples():
    assert sim.pixel_speed(sim.Trajectory(), 0) == 0.0
    lin = sim.Trajectory(kind="linear", start=(10.0, 10.0), velocity=(3000.0, 4000.0), duration_s=0.1)
    assert sim.pixel_speed(lin, 50_000) == pytest.approx(5000.0)
    circ = sim.Trajectory(kind="circular", diameter=610.0, angular_rate=2.0)
    assert sim.pixel_speed(circ, 1_234_567) == pytest.approx(610.0)
    with pytest.raises(ValueError):
        sim.pixel_speed(circ, 11e6)
    with pytest.raises(ValueError):
        sim.pixel_speed(circ, -1)


def test_waypoints():
    wp = ((0.0, 100.0, 100.0), (1.0, 200.0, 100.0), (2.0, 200.0, 300.0))
    traj = sim.Trajectory(kind="waypoints", waypoints=wp, duration_s=2.0)
    assert traj.position(0.5) == pytest.approx((150.0, 100.0))
    assert sim.pixel_speed(traj, 1_500_000) == pytest.approx(200.0)
    assert traj.max_speed() == pytest.approx(200.0)


@pytest.mark.parametrize("kw", [
    dict(kind="spiral"),
    dict(kind="linear", start=(100.0, 100.0), velocity=(1000.0, 0.0), duration_s=2.0),
    dict(kind="circular", diameter=900.0, angular_rate=1.0),
    dict(kind="waypoints", waypoints=((0.0, 1.0, 1.0),)),
    dict(duration_s=0.0),
])
def test_invalid_trajectory(kw):
    with pytest.raises(ValueError):
        sim.Trajectory(**kw)


@pytest.mark.parametrize("kw", [dict(lambda1=-1.0), dict(lambda1=2.0, lambda2=3.0), dict(noise_rate=-5.0)])
def test_invalid_led(kw):
    with pytest.raises(ValueError):
        sim.LedModel(**kw)


def test_schedule_longer_than_trajectory():
    sched = modem.encode(b"far too long for this path", 500.0)
    with pytest.raises(ValueError, match="trajectory"):
        sim.simulate(sim.Trajectory(duration_s=0.1), sim.LedModel(), sched, 0)


def test_event_census_within_five_sigma():
    sched = modem.encode(b"census " * 20, 2000.0)
    traj = sim.Trajectory.circular_at_speed(2000.0)
    led = sim.LedModel()
    ev, truth = sim.simulate(traj, led, sched, 5)
    dur = sched.end_us + 4000.0
    expect = {
        "edge": led.events_per_edge * len(sched),
        "noise": led.noise_rate * dur * 1e-6,
        # constant speed, so thinning keeps every candidate while the LED is lit
        "motion": led.motion_event_rate * 2000.0 * 1e-6 * float(
            np.sum(np.diff(np.append(sched.edges_t, dur))[sched.levels == modem.ON])),
    }
    for k, mu in expect.items():
        assert abs(truth.counts[k] - mu) <= 5 * math.sqrt(mu), k
    assert truth.labels.size == ev.size
    assert sum(truth.counts.values()) >= ev.size


def test_burst_covariance_matches_shape():
    led = sim.LedModel(lambda1=6.0, lambda2=3.0, theta=0.5, noise_rate=0.0, edge_latency_us=0.0)
    sched = modem.OnOffSchedule.square_wave(100.0, 2_000_000.0)
    ev, _ = sim.simulate(sim.Trajectory(duration_s=3.0), led, sched, 3)
    target = geo.cov_from_ellipse(geo.Ellipse(6.0, 3.0, 0.5)).as_array() + np.eye(2) / 12
    errs = []
    for t0 in sched.edges_t[:100]:
        b = ev[ev["t"] == int(t0)]
        c = np.cov(np.vstack([b["x"], b["y"]]).astype(float))
        errs.append(np.linalg.norm(c - target) / np.linalg.norm(target))
    # one burst of ~30 samples: median relative error within 15%, pooled within a few percent
    assert np.median(errs) < 0.3
    pooled = np.cov(np.vstack([ev["x"], ev["y"]]).astype(float))
    assert np.linalg.norm(pooled - target) / np.linalg.norm(target) < 0.05
    mean_burst = np.mean([np.cov(np.vstack([ev[ev["t"] == int(t0)]["x"], ev[ev["t"] == int(t0)]["y"]]).astype(float))
                          for t0 in sched.edges_t[:100]], axis=0)
    assert np.linalg.norm(mean_burst - target) / np.linalg.norm(target) < 0.15


def _major_axis(ev):
    c = np.cov(np.vstack([ev["x"], ev["y"]]).astype(float))
    return math.sqrt(np.linalg.eigvalsh(c)[-1])


def test_motion_elongates_blob():
    sched = modem.encode(b"elongate " * 4, 5000.0)
    led = sim.LedModel(noise_rate=0.0)
    still, _ = sim.simulate(sim.Trajectory(duration_s=1.0), led, sched, 1)
    lin = sim.Trajectory(kind="linear", start=(100.0, 360.0), velocity=(6000.0, 0.0), duration_s=0.15)
    fast, truth = sim.simulate(lin, led, sched, 1)
    # measure in the co-moving frame over one window
    w = (fast["t"] >= 20_000) & (fast["t"] < 24_000)
    moving = fast[w].copy()
    px, _ = truth.position_at(moving["t"])
    rel = moving["x"].astype(float) - px
    comoving = np.vstack([rel, moving["y"].astype(float)])
    major_fast = math.sqrt(np.linalg.eigvalsh(np.cov(comoving))[-1])
    ws = (still["t"] >= 20_000) & (still["t"] < 24_000)
    assert major_fast > _major_axis(still[ws])


def test_truth_csv_round_trip(tmp_path):
    sched = modem.encode(b"truth", 1000.0)
    _, truth = sim.simulate(sim.Trajectory.circular_at_speed(1000.0), sim.LedModel(), sched, 0)
    truth.write_csv(tmp_path / "truth.csv")
    lines = (tmp_path / "truth.csv").read_text().splitlines()
    assert lines[0] == "t_us,x,y,l1,l2,theta,bit"
    back = sim.GroundTruth.read_csv(tmp_path / "truth.csv")
    assert np.array_equal(back.t_us, truth.t_us)
    assert np.allclose(back.x, truth.x, atol=1e-6)
    assert np.array_equal(back.bit, truth.bit)
    assert np.all(np.diff(back.t_us) > 0)


def test_events_file_round_trip(tmp_path):
    sched = modem.encode(b"io", 1000.0)
    ev, _ = sim.simulate(sim.Trajectory(), sim.LedModel(), sched, 0)
    write_events(tmp_path / "e.evb", ev)
    assert np.array_equal(read_events(tmp_path / "e.evb"), ev)
