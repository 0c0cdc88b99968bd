import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corridor_twin.errors import ConfigError
from corridor_twin.fusion import TwinEntry, TwinFrame
from corridor_twin.netlink import (
    ChannelModel,
    Deduplicator,
    Envelope,
    EventQueue,
    LatencyLog,
    Subscriber,
    decode_object_list,
    decode_spat,
    decode_twin_frame,
    encode_object_list,
    encode_spat,
    encode_twin_frame,
    in_itsg5_range,
    poll_deliveries,
    read_latency_log,
    route_downlink,
    transmit,
    wire_size,
)
from corridor_twin.stations import DetectedObject, ObjectListMessage, StationConfig
from corridor_twin.world.signals import SignalState, SpatForecast, SpatPhase

FRAME = TwinFrame(1.0, (TwinEntry(1, "car", 10.0, 1.75, 5.0, 0.0, 0.9, 2, 0.03),))


def channels(hop=0.02, bcast=0.01, cv2x=0.05, rng_m=300.0):
    return {"cv2x": ChannelModel("cv2x", cv2x), "itsg5_hop": ChannelModel("itsg5", hop, range=rng_m),
            "itsg5_broadcast": ChannelModel("itsg5", bcast, range=rng_m)}


def test_ideal_channel(rng):
    env = transmit(ChannelModel("uplink4g", 0.0), "x", "ST01", 3.2, rng)
    assert env.rx_time == env.tx_time == 3.2


def test_total_loss(rng):
    ch = ChannelModel("uplink4g", 0.05, loss_prob=1.0)
    assert all(transmit(ch, "x", "ST01", 0.0, rng).dropped for _ in range(1000))


def test_jitter_mean():
    ch = ChannelModel("uplink4g", 0.05, jitter=0.01)
    rng = np.random.default_rng(5)
    lat = np.array([transmit(ch, "x", "ST01", 0.0, rng).rx_time for _ in range(10000)])
    assert 0.055 <= lat.mean() <= 0.065
    assert lat.min() >= 0.05


def test_transmit_deterministic():
    ch = ChannelModel("uplink4g", 0.05, jitter=0.01, loss_prob=0.2)
    a = [transmit(ch, "x", "ST01", 0.0, np.random.default_rng(9)).rx_time for _ in range(1)]
    b = [transmit(ch, "x", "ST01", 0.0, np.random.default_rng(9)).rx_time for _ in range(1)]
    assert a == b


def test_channel_validation():
    with pytest.raises(ConfigError):
        ChannelModel("wifi")
    with pytest.raises(ConfigError):
        ChannelModel("itsg5", 0.01)
    with pytest.raises(ConfigError):
        ChannelModel("cv2x", -0.1)


def test_itsg5_range_predicate(rng):
    st_ = [StationConfig("ST00", 0.0, mount_y=0.0)]
    near = Subscriber("v1", 250.0, 0.0, ("itsg5", "cv2x"))
    far = Subscriber("v2", 400.0, 0.0, ("itsg5", "cv2x"))
    got = route_downlink(FRAME, "itsg5", "server", st_, [near, far], 1.0, rng, channels())
    assert [e.dst for e in got] == ["v1"]
    assert in_itsg5_range(near, st_, 300.0) and not in_itsg5_range(far, st_, 300.0)
    cv = route_downlink(FRAME, "cv2x", "server", st_, [near, far], 1.0, rng, channels())
    assert sorted(e.dst for e in cv) == ["v1", "v2"]


def test_itsg5_latency_is_sum_of_hops(rng):
    st_ = [StationConfig("ST00", 0.0, mount_y=0.0)]
    sub = [Subscriber("v", 10.0, 0.0, ("itsg5", "cv2x"))]
    g5 = route_downlink(FRAME, "itsg5", "server", st_, sub, 1.0, rng, channels(0.05, 0.05, 0.05))[0]
    cv = route_downlink(FRAME, "cv2x", "server", st_, sub, 1.0, rng, channels(0.05, 0.05, 0.05))[0]
    assert g5.rx_time - g5.tx_time == pytest.approx(0.10)
    assert cv.rx_time - cv.tx_time == pytest.approx(0.05)
    assert g5.via == "ST00"


@settings(max_examples=200, deadline=None)
@given(lat=st.floats(1e-4, 0.5), rng_m=st.floats(10.0, 1000.0), xs=st.lists(st.floats(-2000, 2000), min_size=1,
                                                                            max_size=6))
def test_channel_path_property(lat, rng_m, xs):
    st_ = [StationConfig(f"ST{i:02d}", s, mount_y=-5.0) for i, s in enumerate((0.0, 300.0))]
    subs = [Subscriber(f"v{i}", x, 1.75, ("itsg5", "cv2x")) for i, x in enumerate(xs)]
    r = np.random.default_rng(0)
    ch = channels(lat, lat, lat, rng_m)
    g5 = route_downlink(FRAME, "itsg5", "server", st_, subs, 0.0, r, ch)
    cv = {e.dst: e.rx_time for e in route_downlink(FRAME, "cv2x", "server", st_, subs, 0.0, r, ch)}
    receivers = {e.dst for e in g5}
    for s in subs:
        expect = any(math.hypot(s.x - p.s, s.y - p.mount_y) <= rng_m for p in st_)
        assert (s.id in receivers) == expect
    for e in g5:
        assert e.rx_time > cv[e.dst]


def test_dual_homed_dedup(rng):
    st_ = [StationConfig("ST00", 0.0, mount_y=0.0), StationConfig("ST01", 100.0, mount_y=0.0)]
    sub = [Subscriber("v", 50.0, 0.0, ("itsg5",))]
    envs = route_downlink(FRAME, "itsg5", "server", st_, sub, 1.0, rng, channels(), seq=7)
    assert len(envs) == 2
    dd = Deduplicator()
    assert [dd.accept(e) for e in envs] == [True, False]


# event queue ------------------------------------------------------------------

def test_empty_queue():
    assert poll_deliveries(EventQueue(), 100.0) == []


def test_tie_break_on_source():
    q = EventQueue()
    q.push(Envelope("b", "ST02", "server", 0.0, 1.0))
    q.push(Envelope("a", "ST01", "server", 0.0, 1.0))
    assert [e.src for e in poll_deliveries(q, 1.0)] == ["ST01", "ST02"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.sampled_from(["A", "B", "C"])), max_size=40))
def test_queue_matches_sort_oracle(items):
    q = EventQueue()
    envs = []
    for k, (rx, src) in enumerate(items):
        e = Envelope(k, src, "server", 0.0, rx / 10.0)
        envs.append((rx / 10.0, src, k, e))
        q.push(e)
    got = []
    for t in np.arange(0.0, 5.7, 0.7):
        got += poll_deliveries(q, float(t))
    assert [e.payload for e in got] == [e.payload for *_, e in sorted(envs, key=lambda r: r[:3])]
    assert poll_deliveries(q, 1e9) == []


def test_dropped_never_surface_and_accounting(rng):
    ch = ChannelModel("uplink4g", 0.05, jitter=0.01, loss_prob=0.3)
    q = EventQueue()
    for k in range(2000):
        q.push(transmit(ch, k, "ST01", k * 0.1, rng))
    out = poll_deliveries(q, 1e9)
    assert all(not e.dropped and e.rx_time >= e.tx_time for e in out)
    assert q.sent["uplink4g"] == q.delivered["uplink4g"] + q.dropped["uplink4g"] == 2000
    assert len({e.payload for e in out}) == len(out)


def test_queue_rejects_acausal():
    with pytest.raises(ValueError):
        EventQueue().push(Envelope("x", "A", "server", 2.0, 1.0))


# wire -------------------------------------------------------------------------

def test_object_list_roundtrip():
    objs = (DetectedObject("ST03", 0, "car", 10.5, 1.75, 4.0, 0.0, ((0.00390625, 0.0), (0.0, 0.00390625)), 0.875),
            DetectedObject("ST03", 1, "truck", 20.25, 5.25, 3.0, 0.5, ((0.25, 0.0), (0.0, 0.015625)), 0.5,
                           "camera"))
    msg = ObjectListMessage("ST03", 12.3, objs)
    buf = encode_object_list(msg)
    assert len(buf) == msg.payload_bytes == wire_size(msg) == 16 + 2 * 64
    back = decode_object_list(buf)
    assert back == msg


def test_twin_and_spat_roundtrip():
    buf = encode_twin_frame(FRAME)
    assert len(buf) == 16 + 64
    back = decode_twin_frame(buf)
    assert back.frame_time == 1.0 and back.tracks[0].x == 10.0 and back.tracks[0].global_id == 1
    fc = SpatForecast("S1", 4.0, (SpatPhase(SignalState.RED, 0.0, 30.0, 1.0),
                                  SpatPhase(SignalState.GREEN, 30.0, 60.0, 0.5)))
    assert decode_spat(encode_spat(fc)) == fc


def test_latency_log_roundtrip(tmp_path, rng):
    log = LatencyLog()
    ch = ChannelModel("uplink4g", 0.05, loss_prob=0.5)
    for k in range(20):
        log.add(transmit(ch, ObjectListMessage("ST01", k / 10, ()), "ST01", k / 10, rng))
    rows = read_latency_log(log.write(tmp_path / "lat.csv"))
    assert len(rows) == 20
    assert [r["rx_time"] for r in rows] == [r[4] for r in log.rows]
    assert {r["msg_type"] for r in rows} == {"objects"}
