"""Microsimulator, aggregation, and boundary-extraction tests."""

import numpy as np
import pytest

from dtse import arz
from dtse.ground_truth import (
    GroundTruthFields,
    KraussParams,
    ScenarioSpec,
    Snapshot,
    Trajectories,
    aggregate,
    extract_boundary_input,
    krauss_step,
    run_microsim,
    safe_speed,
    spawn_arrivals,
    wave_peak_cells,
)

from conftest import PAPER_PARAMS

KP = KraussParams()


def small_scenario(**overrides):
    base = dict(
        total_length=900.0,
        buffer_length=100.0,
        duration=240.0,
        bottleneck_position=500.0,
        bottleneck_start=60.0,
        bottleneck_end=120.0,
        mean_headway=1.0,
        seed=5,
    )
    base.update(overrides)
    if base["duration"] < base["bottleneck_end"]:
        base["bottleneck_start"] = base["bottleneck_end"] = 0.0
    return ScenarioSpec(**base)


def small_model(n_cells=7):
    return arz.ModelParams(
        v_free=100.0 / 3.6, rho_jam=0.25, gamma=1.25, tau=1.0,
        n_cells=n_cells, dt=1.0, dh=100.0,
    )


def synthetic_traj(spec, snapshots):
    n = len(snapshots)
    return Trajectories(
        spec=spec, dt=1.0, snapshots=snapshots,
        entered=np.zeros(n, dtype=int), exited=np.zeros(n, dtype=int),
    )


def make_snap(entries):
    """entries: list of (id, lane, pos, speed), any order."""
    if not entries:
        return Snapshot(
            ids=np.empty(0, dtype=np.int64), lane=np.empty(0, dtype=np.int8),
            pos=np.empty(0), speed=np.empty(0),
        )
    entries = sorted(entries)
    ids, lane, pos, speed = zip(*entries)
    return Snapshot(
        ids=np.asarray(ids, dtype=np.int64), lane=np.asarray(lane, dtype=np.int8),
        pos=np.asarray(pos, dtype=float), speed=np.asarray(speed, dtype=float),
    )


# ---------------------------------------------------------------------------
# arrivals

def test_spawn_arrivals_zero_duration():
    rng = np.random.default_rng(0)
    assert spawn_arrivals(1.0, 0.0, rng).size == 0


def test_spawn_arrivals_count_within_three_sigma():
    rng = np.random.default_rng(1)
    times = spawn_arrivals(1.0, 1200.0, rng)
    assert abs(times.size - 1200) < 3 * np.sqrt(1200)
    assert np.all(np.diff(times) > 0)
    assert times[0] >= 0 and times[-1] < 1200.0


def test_spawn_arrivals_deterministic():
    a = spawn_arrivals(2.0, 500.0, np.random.default_rng(42))
    b = spawn_arrivals(2.0, 500.0, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# car following

def open_road_limit(value=KP.accel * 0 + 100.0 / 3.6):
    return lambda pos: np.full(pos.shape, value)


def test_single_vehicle_accelerates_to_limit():
    rng = np.random.default_rng(3)
    limit = 100.0 / 3.6
    lanes = [(np.array([0]), np.array([0.0]), np.array([0.0]))]
    speeds = []
    for _ in range(200):
        lanes = krauss_step(lanes, open_road_limit(limit), KP, rng)
        speeds.append(lanes[0][2][0])
    speeds = np.asarray(speeds)
    assert np.all(speeds <= limit + 1e-12)
    # dawdling keeps it below but near the limit
    assert speeds[-50:].mean() > limit - KP.imperfection * KP.accel * KP.dt_micro


def test_follower_stops_behind_stopped_leader_with_min_gap():
    rng = np.random.default_rng(4)
    # leader pinned at 200 m by a zero local limit
    limit = lambda x: np.where(x >= 195.0, 0.0, 100.0 / 3.6)

    # without dawdling the approach converges exactly onto the minimum gap
    kp = KraussParams(imperfection=0.0)
    lanes = [(np.array([0, 1]), np.array([200.0, 120.0]), np.array([0.0, 25.0]))]
    for _ in range(200):
        lanes = krauss_step(lanes, limit, kp, rng)
        _, p_, v_ = lanes[0]
        assert p_[0] - kp.length - p_[1] >= kp.min_gap - 1e-9
    assert lanes[0][2][1] == pytest.approx(0.0, abs=1e-6)
    assert lanes[0][1][0] - kp.length - lanes[0][1][1] == pytest.approx(kp.min_gap, abs=1e-4)

    # with dawdling the gap bound still holds and the follower ends crawling
    lanes = [(np.array([0, 1]), np.array([200.0, 120.0]), np.array([0.0, 25.0]))]
    for _ in range(200):
        lanes = krauss_step(lanes, limit, KP, rng)
        _, p_, v_ = lanes[0]
        assert p_[0] - KP.length - p_[1] >= KP.min_gap - 1e-9
    assert lanes[0][2][1] < 0.5


def test_equilibrium_spacing_is_fixed_point_without_dawdling():
    kp = KraussParams(imperfection=0.0)
    v = 20.0
    gap_eq = kp.min_gap + v * kp.reaction
    pos = np.array([500.0, 500.0 - kp.length - gap_eq])
    lanes = [(np.array([0, 1]), pos, np.array([v, v]))]
    rng = np.random.default_rng(0)
    limit = lambda x: np.full(x.shape, v)
    for _ in range(50):
        lanes = krauss_step(lanes, limit, kp, rng)
    _, p_, v_ = lanes[0]
    assert p_[0] - kp.length - p_[1] == pytest.approx(gap_eq, rel=1e-12)
    np.testing.assert_allclose(v_, v, rtol=1e-12)


# ---------------------------------------------------------------------------
# scenario runs

def test_zero_demand_keeps_road_empty():
    spec = small_scenario(mean_headway=1e12, duration=60.0, bottleneck_start=0.0, bottleneck_end=0.0)
    traj = run_microsim(spec)
    assert all(s.ids.size == 0 for s in traj.snapshots)


def test_microsim_deterministic_for_fixed_seed():
    spec = small_scenario()
    a = run_microsim(spec)
    b = run_microsim(spec)
    for sa, sb in zip(a.snapshots, b.snapshots):
        np.testing.assert_array_equal(sa.ids, sb.ids)
        np.testing.assert_array_equal(sa.pos, sb.pos)
        np.testing.assert_array_equal(sa.speed, sb.speed)
        np.testing.assert_array_equal(sa.lane, sb.lane)


def test_vehicle_conservation_every_step():
    traj = run_microsim(small_scenario())
    for k, snap in enumerate(traj.snapshots):
        assert traj.entered[k] - traj.exited[k] == snap.ids.size


def test_no_collisions_and_limit_respected():
    spec = small_scenario()
    traj = run_microsim(spec)
    kp = spec.krauss
    for snap in traj.snapshots:
        assert np.all(snap.speed <= spec.speed_limit + 1e-9)
        for lane in (0, 1):
            sel = snap.lane == lane
            pos = np.sort(snap.pos[sel])[::-1]
            if pos.size > 1:
                gaps = pos[:-1] - kp.length - pos[1:]
                assert gaps.min() >= kp.min_gap - 1e-9


def test_zone_speeds_respect_braking_envelope():
    spec = small_scenario()
    kp = spec.krauss
    traj = run_microsim(spec)
    z0 = spec.buffer_length + spec.bottleneck_position
    z1 = z0 + spec.bottleneck_length

    def envelope(pos):
        depth = np.maximum(pos - z0, 0.0)
        return np.sqrt(
            np.maximum(spec.speed_limit**2 - 2 * kp.decel * depth, spec.bottleneck_limit**2)
        )

    saw_slow = False
    for k in range(int(spec.bottleneck_start) + 1, int(spec.bottleneck_end)):
        snap = traj.snapshots[k]
        in_zone = (snap.pos >= z0) & (snap.pos < z1)
        if not in_zone.any():
            continue
        pos, speed = snap.pos[in_zone], snap.speed[in_zone]
        # a recorded speed was set from the limit at the pre-advance position
        assert np.all(speed <= envelope(pos - speed * kp.dt_micro) + 1e-9)
        saw_slow |= bool(np.any(speed <= spec.bottleneck_limit + 1e-9))
    assert saw_slow


# ---------------------------------------------------------------------------
# aggregation

def test_aggregate_empty_cells_use_free_flow_convention():
    spec = small_scenario(duration=3.0, mean_headway=1e12)
    traj = run_microsim(spec)
    p = small_model()
    fields = aggregate(traj, p)
    assert np.all(fields.rho == 0.0)
    assert np.all(fields.v == p.v_free)
    assert np.all(fields.psi == 0.0)


def test_aggregate_counts_per_cell():
    spec = small_scenario(duration=2.0, mean_headway=1e12)
    p = small_model()
    # ten vehicles inside cell 3 (effective [200, 300) = absolute [300, 400))
    entries = [(i, i % 2, 310.0 + 8.0 * i, 5.0) for i in range(10)]
    traj = synthetic_traj(spec, [make_snap([]), make_snap(entries), make_snap([])])
    fields = aggregate(traj, p)
    assert fields.rho[1, 2] == pytest.approx(0.10)  # 100 veh/km in veh/m
    assert fields.v[1, 2] == pytest.approx(5.0)
    expected_psi = 0.10 * (5.0 + float(arz.pressure(0.10, p)))
    assert fields.psi[1, 2] == pytest.approx(expected_psi, rel=1e-12)


def test_aggregate_partition_identity(paper_traj):
    fields = aggregate(paper_traj, PAPER_PARAMS, window=(300, 400))
    spec = paper_traj.spec
    for r, k in enumerate(range(300, 401)):
        snap = paper_traj.snapshots[k]
        eff = snap.pos - spec.buffer_length
        inside = ((eff >= 0) & (eff < spec.effective_length)).sum()
        assert fields.rho[r].sum() * PAPER_PARAMS.dh == pytest.approx(inside, abs=1e-9)


def test_aggregate_rejects_mismatched_grid(paper_traj):
    with pytest.raises(ValueError):
        aggregate(paper_traj, small_model(10))


# ---------------------------------------------------------------------------
# boundary extraction

def test_boundary_no_entering_vehicles():
    spec = small_scenario(duration=5.0, mean_headway=1e12)
    traj = run_microsim(spec)
    p = small_model()
    u = extract_boundary_input(traj, p, 4)
    assert u.demand_up == 0.0
    assert u.rho_down == 0.0
    assert u.chi_up == pytest.approx(p.v_free)  # empty buffer convention


def test_boundary_chi_up_on_constant_flow():
    spec = small_scenario(duration=3.0, mean_headway=1e12)
    p = small_model()
    v = p.v_free
    # two vehicles inside the upstream buffer at free-flow speed
    snap = make_snap([(0, 0, 30.0, v), (1, 1, 70.0, v)])
    traj = synthetic_traj(spec, [make_snap([]), snap, snap, snap])
    u = extract_boundary_input(traj, p, 2)
    rho_buf = 2.0 / spec.buffer_length
    assert u.chi_up == pytest.approx(v + float(arz.pressure(rho_buf, p)), rel=1e-12)


def test_boundary_demand_counts_domain_entries():
    spec = small_scenario(duration=6.0, mean_headway=1e12)
    p = small_model()
    snaps = [make_snap([])]
    # one vehicle crosses into the effective domain at k=2
    for k in range(1, 6):
        pos = 60.0 + 30.0 * k  # crosses absolute 100 m between k=1 and k=2
        snaps.append(make_snap([(0, 0, pos, 30.0)]))
    traj = synthetic_traj(spec, snaps)
    u = extract_boundary_input(traj, p, 5)
    # one entry in the 6-step trailing window starting at 0
    assert u.demand_up == pytest.approx(1.0 / 6.0)
    u = extract_boundary_input(traj, p, 2)
    assert u.demand_up == pytest.approx(1.0 / 3.0)


def test_boundary_jammed_downstream_buffer():
    spec = small_scenario(duration=2.0, mean_headway=1e12)
    p = small_model()
    # 30 vehicles packed into the downstream buffer [800, 900)
    entries = [(i, i % 2, 801.0 + 3.2 * i, 0.0) for i in range(30)]
    traj = synthetic_traj(spec, [make_snap([]), make_snap(entries), make_snap([])])
    u = extract_boundary_input(traj, p, 1)
    assert u.rho_down == pytest.approx(p.rho_jam)  # clamped at jam density


# ---------------------------------------------------------------------------
# shockwave qualitative behavior (shared default-config run)

def test_bottleneck_run_reaches_high_density(paper_fields):
    rho_vehkm = paper_fields.rho * 1000.0
    wave = rho_vehkm[700:843]
    assert wave.max() > 150.0
    # high densities concentrate near the bottleneck (cells 20-25)
    k_star, c_star = np.unravel_index(np.argmax(wave), wave.shape)
    assert 20 <= c_star + 1 <= 25


def test_backward_propagating_peak(paper_fields):
    peaks = wave_peak_cells(paper_fields, 700, 760)
    assert len(peaks) >= 3
    assert all(b <= a for a, b in zip(peaks, peaks[1:]))


def test_no_bottleneck_stays_subcritical():
    spec = ScenarioSpec(seed=3, bottleneck_start=0.0, bottleneck_end=0.0, duration=400.0)
    traj = run_microsim(spec)
    fields = aggregate(traj, PAPER_PARAMS)
    sigma_free = float(arz.critical_density(PAPER_PARAMS.v_free, PAPER_PARAMS))
    assert fields.rho.max() < sigma_free


def test_ego_window_and_pool(paper_traj):
    presence = paper_traj.domain_presence()
    spec = paper_traj.spec
    candidates = sorted(
        (first, vid) for vid, (first, last) in presence.items()
        if first >= spec.bottleneck_start
    )
    first, ego = candidates[0]
    window = presence[ego]
    assert window[0] >= 700
    assert window[1] > 800  # covers the latest snapshot instant
    pool = [
        vid for vid, (f, l) in presence.items()
        if l >= window[0] and f <= window[1]
    ]
    assert len(pool) > 100
