import math

import numpy as np
import pytest

from corridor_twin.errors import ConfigError, PlacementError
from corridor_twin.stations import (
    HEADER_BYTES,
    OBJECT_BYTES,
    RAW_BYTES_PER_S,
    DetectedObject,
    IrStationConfig,
    ObjectListMessage,
    StationConfig,
    TruthSnapshot,
    coverage_check,
    data_rate_report,
    export_layout,
    import_layout,
    ir_helps_at_night,
    ir_sense_tick,
    occluded_mask,
    place_stations,
    sense_tick,
)
from corridor_twin.world import build_corridor


def corridor(length):
    return build_corridor({"length": length, "segments": [
        {"start": 0.0, "end": length, "kind": "urban", "speed_limit": 13.89}]})


def union_covers(intervals, lo, hi):
    """Interval-union oracle: does the union of closed intervals cover [lo, hi]?"""
    reach = lo
    for a, b in sorted(intervals):
        if a > reach:
            return False
        reach = max(reach, b)
    return reach >= hi


def noiseless(**kw):
    base = dict(sigma_lidar=0.0, sigma_cam_lat=0.0, sigma_cam_range=0.0, sigma_vel=0.0, p_miss=0.0,
                p_false=0.0, camera_miss_by_condition=())
    base.update(kw)
    return base


# placement and coverage -------------------------------------------------------

def test_placement_230m_at_90():
    sts = place_stations(corridor(230.0), 90.0)
    assert [s.s for s in sts] == [0.0, 90.0, 180.0]
    assert union_covers([(s.s - 50, s.s + 50) for s in sts], 0.0, 230.0)
    assert coverage_check(sts, corridor(230.0)).covered


@pytest.mark.parametrize("spacing", [59.9, 120.0])
def test_placement_spacing_bounds(spacing):
    with pytest.raises(PlacementError):
        place_stations(corridor(1000.0), spacing)


def test_single_station_short_corridor():
    sts = place_stations(corridor(40.0), 60.0)
    assert len(sts) == 1
    assert coverage_check(sts, corridor(40.0)).covered


@pytest.mark.parametrize("spacing", [60.0, 75.0, 80.0, 90.0, 100.0])
def test_every_valid_spacing_covers_a_km(spacing):
    cm = corridor(1000.0)
    sts = place_stations(cm, spacing)
    rep = coverage_check(sts, cm)
    assert rep.covered and rep.gaps == () and rep.redundancy >= 1
    assert union_covers([(s.s - 50, s.s + 50) for s in sts], 0.0, 1000.0)


def test_camera_targets_adjacent_section():
    sts = place_stations(corridor(1000.0), 90.0)
    for i, st in enumerate(sts[:-1]):
        nxt = sts[i + 1]
        lo, hi = st.camera_target
        assert lo <= nxt.s <= hi
    lo, hi = sts[-1].camera_target
    assert lo <= sts[-2].s <= hi


def test_gap_between_distant_stations():
    cm = corridor(250.0)
    rep = coverage_check([StationConfig("A", 0.0), StationConfig("B", 200.0)], cm)
    assert not rep.covered
    assert rep.gaps == ((50.0, 150.0),)


def test_redundancy_in_overlap():
    cm = corridor(230.0)
    rep = coverage_check(place_stations(cm, 90.0), cm)
    # point-in-disk count oracle
    for s in (45.0, 135.0, 20.0, 100.0):
        n = sum(abs(s - c) <= 50.0 for c in (0.0, 90.0, 180.0))
        assert rep.redundancy_at(s) == n
    assert rep.redundancy_at(45.0) == 2


# sensing ----------------------------------------------------------------------

def snapshot(rows, t=0.0):
    return TruthSnapshot.from_rows(t, rows)


def test_noiseless_identity():
    st = StationConfig("ST", 100.0, occlusion=False, **noiseless())
    rows = [(1, "car", 80.0, 1.75, 4.5, 1.8, 10.0, 0.0), (2, "truck", 120.0, 5.25, 12.0, 2.5, 8.0, 0.0)]
    msg = sense_tick(st, snapshot(rows), np.random.default_rng(0))
    got = sorted((d.x, d.y, d.vx, d.vy) for d in msg.objects)
    assert got == [(80.0, 1.75, 10.0, 0.0), (120.0, 5.25, 8.0, 0.0)]


def test_off_grid_time_rejected():
    with pytest.raises(ValueError):
        sense_tick(StationConfig("ST", 0.0), snapshot([], t=0.05), np.random.default_rng(0))


def shadow_oracle(sx, sy, near, far):
    """1D bearing-interval shadow: share of the far object's angular interval covered by the near one."""
    def interval(x, y, ln, wd):
        ang = [math.atan2(y + dy - sy, x + dx - sx) for dx in (-ln / 2, ln / 2) for dy in (-wd / 2, wd / 2)]
        return min(ang), max(ang)
    a0, a1 = interval(*far)
    b0, b1 = interval(*near)
    return max(0.0, min(a1, b1) - max(a0, b0)) / (a1 - a0)


def test_truck_shadows_car_outside_camera_target():
    st = StationConfig("ST", 100.0, camera_target=(500.0, 600.0), **noiseless())
    truck = (1, "truck", 110.0, 1.75, 12.0, 2.5, 0.0, 0.0)
    car = (2, "car", 125.0, 5.25, 4.5, 1.8, 0.0, 0.0)
    cover = shadow_oracle(100.0, -5.0, (110.0, 1.75, 12.0, 2.5), (125.0, 5.25, 4.5, 1.8))
    assert cover >= 0.5
    msg = sense_tick(st, snapshot([truck, car]), np.random.default_rng(0))
    assert [round(d.x, 6) for d in msg.objects] == [110.0]
    # the same car inside the camera target comes back as a camera detection
    st2 = StationConfig("ST", 100.0, camera_target=(115.0, 200.0), **noiseless())
    msg2 = sense_tick(st2, snapshot([truck, car]), np.random.default_rng(0))
    sensors = {round(d.x, 6): d.sensor for d in msg2.objects}
    assert sensors == {110.0: "lidar", 125.0: "camera"}


def test_occlusion_mask_agrees_with_oracle(rng):
    for _ in range(200):
        n = 4
        xs = rng.uniform(60, 140, n)
        ys = rng.choice([1.75, 5.25], n)
        rows = [(i, "car", float(xs[i]), float(ys[i]), 4.5, 1.8, 0.0, 0.0) for i in range(n)]
        snap = snapshot(rows)
        mask = occluded_mask(snap, np.arange(n), 100.0, -5.0)
        for i in range(n):
            ri = math.hypot(xs[i] - 100, ys[i] + 5)
            exp = any(shadow_oracle(100.0, -5.0, (xs[j], ys[j], 4.5, 1.8), (xs[i], ys[i], 4.5, 1.8)) >= 0.5
                      for j in range(n) if j != i and math.hypot(xs[j] - 100, ys[j] + 5) < ri)
            assert mask[i] == exp


def test_lidar_sigma_recovered():
    st = StationConfig("ST", 0.0, occlusion=False, **noiseless(sigma_lidar=0.05))
    snap = snapshot([(1, "car", 10.0, 1.75, 4.5, 1.8, 0.0, 0.0)])
    rng = np.random.default_rng(7)
    xy = np.array([(m.objects[0].x, m.objects[0].y) for m in (sense_tick(st, snap, rng) for _ in range(10000))])
    sd = xy.std(axis=0, ddof=1)
    assert np.all((sd >= 0.045) & (sd <= 0.055))


def test_camera_noise_is_range_dominated():
    st = StationConfig("ST", 0.0, camera_target=(20.0, 60.0), **noiseless(sigma_cam_lat=0.1, sigma_cam_range=0.5))
    st = StationConfig(**{**st.__dict__, "lidar_radius": 10.0})
    snap = snapshot([(1, "car", 40.0, 1.75, 4.5, 1.8, 0.0, 0.0)])
    rng = np.random.default_rng(3)
    msgs = [sense_tick(st, snap, rng) for _ in range(4000)]
    det = msgs[0].objects[0]
    assert det.sensor == "camera"
    # reported covariance equals the generating one: check along the line of sight
    dx, dy = 40.0, 1.75 + 5.0
    u = np.array([dx, dy]) / math.hypot(dx, dy)
    C = np.array(det.cov)
    assert u @ C @ u == pytest.approx(0.25, rel=1e-9)
    err = np.array([(m.objects[0].x - 40.0, m.objects[0].y - 1.75) for m in msgs])
    along = err @ u
    across = err @ np.array([-u[1], u[0]])
    assert along.std() == pytest.approx(0.5, rel=0.08)
    assert across.std() == pytest.approx(0.1, rel=0.08)


def test_miss_and_false_rates(rng):
    st = StationConfig("ST", 0.0, occlusion=False, **noiseless(p_miss=0.2, p_false=0.1))
    snap = snapshot([(1, "car", 10.0, 1.75, 4.5, 1.8, 0.0, 0.0)])
    counts = np.array([len(sense_tick(st, snap, rng).objects) for _ in range(5000)])
    # E[count] = 0.8 + 0.1
    assert counts.mean() == pytest.approx(0.9, abs=0.03)


def test_local_ids_are_per_frame(rng):
    st = StationConfig("ST", 0.0, occlusion=False, **noiseless())
    rows = [(i, "car", 5.0 * i, 1.75, 4.5, 1.8, 0.0, 0.0) for i in range(1, 8)]
    msg = sense_tick(st, snapshot(rows), rng)
    assert sorted(d.local_id for d in msg.objects) == list(range(7))
    fields = set(DetectedObject.__dataclass_fields__)
    assert "id" not in fields and "plate" not in " ".join(fields)


def test_adjacent_camera_recovers_occluded_object():
    cm = corridor(400.0)
    sts = place_stations(cm, 90.0, **noiseless())
    truck = (1, "truck", 105.0, 1.75, 12.0, 2.5, 0.0, 0.0)
    car = (2, "car", 118.0, 5.25, 4.5, 1.8, 0.0, 0.0)
    snap = snapshot([truck, car])
    seen = set()
    for st in sts:
        for d in sense_tick(st, snap, np.random.default_rng(0)).objects:
            seen.add(round(d.x, 6))
    assert 118.0 in seen


def test_station_config_validation():
    with pytest.raises(ConfigError):
        StationConfig("A", 0.0, sigma_cam_lat=0.6, sigma_cam_range=0.5)
    with pytest.raises(ConfigError):
        StationConfig("A", 0.0, p_miss=1.0)
    with pytest.raises(ConfigError):
        IrStationConfig("I", 0.0, power_budget_w=150.0)


# infrared ---------------------------------------------------------------------

def test_ir_night_sigma_recovered():
    ir = IrStationConfig("IR", 0.0, quality_by_condition=(("night", 0.02, 0.15),))
    snap = snapshot([(1, "car", 10.0, 1.75, 4.5, 1.8, 0.0, 0.0)])
    rng = np.random.default_rng(11)
    xs = []
    n_frames = 10000
    for _ in range(n_frames):
        m = ir_sense_tick(ir, snap, "night", rng)
        xs += [d.x for d in m.objects]
    assert np.std(xs, ddof=1) == pytest.approx(0.15, rel=0.05)
    assert 1 - len(xs) / n_frames == pytest.approx(0.02, abs=0.006)


def test_ir_empty_and_night_help():
    ir = IrStationConfig("IR", 0.0)
    assert ir_sense_tick(ir, snapshot([]), "night", np.random.default_rng(0)).objects == ()
    assert ir_helps_at_night(ir, StationConfig("ST", 0.0))
    with pytest.raises(ConfigError):
        ir_sense_tick(ir, snapshot([]), "fog", np.random.default_rng(0))


# data rate --------------------------------------------------------------------

def test_rate_arithmetic():
    r = data_rate_report([StationConfig("A", 0.0)], 1.0, objects_per_frame=100)[0]
    assert r.objectlist_bytes_per_s == (16 + 64 * 100) * 10 == 64160
    assert r.reduction_factor == pytest.approx(1e8 / 64160)
    assert r.reduction_factor == pytest.approx(1558.6, abs=0.05)


def test_rate_empty_traffic_is_header_only():
    st = StationConfig("A", 0.0)
    msgs = [ObjectListMessage("A", k / 10, ()) for k in range(100)]
    r = data_rate_report([st], 10.0, msgs)[0]
    assert r.objectlist_bytes_per_s == HEADER_BYTES * 10
    assert r.reduction_factor == RAW_BYTES_PER_S / (HEADER_BYTES * 10)


@pytest.mark.parametrize("n", [0, 1, 10, 500, 1000])
def test_rate_factor_bound(n):
    r = data_rate_report([StationConfig("A", 0.0)], 1.0, objects_per_frame=n)[0]
    assert r.reduction_factor > 100
    assert r.objectlist_bytes_per_s == (HEADER_BYTES + OBJECT_BYTES * n) * 10


def test_layout_roundtrip(tmp_path):
    sts = place_stations(corridor(500.0), 80.0)
    back = import_layout(export_layout(sts, tmp_path / "layout.csv"))
    assert [(s.id, s.s, s.lidar_radius, s.camera_target) for s in back] == \
        [(s.id, s.s, s.lidar_radius, s.camera_target) for s in sts]
