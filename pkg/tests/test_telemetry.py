"""Wire framing, golden bytes, transports, and the chunked run log."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racestack.telemetry import (
    BASESTATION_FRAME_SIZE,
    CHUNK_HEADER_SIZE,
    DASHBOARD_FRAME_SIZE,
    RECORD_OVERHEAD,
    BasestationFrame,
    BasestationReceiver,
    DashboardFrame,
    DashboardReceiver,
    DecodeError,
    LogReader,
    LogWriter,
    LoopbackDatagram,
    UdpEndpoint,
    basestation_from_json,
    dashboard_to_json,
    decode_basestation,
    decode_dashboard,
    encode_basestation,
    encode_dashboard,
    join_stamp,
    split_stamp,
)

GOLDEN_DASH_ZERO = (
    "00000000000000000000000000000000000000000000000000000000000000000000000000"
    "00000000000000000000000000000000000000000000000000000000000000000000000000"
    "000000000000000000000000000000000000000000000000002500fd8e"
)
GOLDEN_BASE_ZERO = "00000000000000000000000000000000000000000000000000000000000000b0ac0969"
GOLDEN_DASH = (
    "0c0000000065cd1d03032a28000000000000f1fff2ff0ad7233c000000bf000020400000"
    "484200003e420000d8410ad7a33c0000c942000050c0000000000ad723be00000000c3f5"
    "c83f00003e42cdcc4cbe000000000000803f000080a24500002b436f66b3db"
)
GOLDEN_BASE = "0c00000080b2e60e0000544201000101010000000000000000000000000000361b4863"


def sample_dashboard():
    return DashboardFrame(
        stamp_sec=12,
        stamp_nsec=500000000,
        cmd_gear=3,
        actual_gear=3,
        cmd_throttle=42,
        actual_throttle=40,
        cmd_brake=0,
        actual_brake_front=0,
        actual_brake_rear=0,
        cmd_steering_degree=-15,
        actual_steering_degree=-14,
        heading_error=0.009999999776482582,
        cross_track_error=-0.5,
        velocity_error=2.5,
        target_velocity_mps=50.0,
        actual_velocity_mps=47.5,
        purepursuit_lookahead_distance=27.0,
        purepursuit_lookahead_angle_rad=0.019999999552965164,
        position_x=100.5,
        position_y=-3.25,
        position_z=0.0,
        position_r=-0.1599999964237213,
        position_p=0.0,
        position_yaw=1.5700000524520874,
        velocity_x=47.5,
        velocity_y=-0.20000000298023224,
        velocity_z=0.0,
        trust=1.0,
        status=0,
        engine_speed_rpm=5200.0,
        vehicle_speed_kmph=171.0,
    )


def sample_basestation():
    return BasestationFrame(
        stamp_sec=12,
        stamp_nsec=250000000,
        v_max=53.0,
        raceline_index=1,
        veh_flag=0,
        track_flag=1,
        enable_engine=True,
        enable_driving=True,
        enable_joystick_control=False,
        target_velocity=0.0,
        steering_cmd=0.0,
        brake_amount=0.0,
        throttle_lockout=False,
    )


# ---------------------------------------------------------------------------
# framing


def test_frame_sizes_are_constants():
    assert DASHBOARD_FRAME_SIZE == 103
    assert BASESTATION_FRAME_SIZE == 35
    assert len(encode_dashboard(DashboardFrame())) == 103
    assert len(encode_basestation(BasestationFrame())) == 35


def test_all_zero_dashboard_golden_bytes():
    assert encode_dashboard(DashboardFrame()).hex() == GOLDEN_DASH_ZERO
    assert decode_dashboard(bytes.fromhex(GOLDEN_DASH_ZERO)) == DashboardFrame()


def test_golden_bytes_regression_both_layouts():
    assert encode_dashboard(sample_dashboard()).hex() == GOLDEN_DASH
    assert encode_basestation(sample_basestation()).hex() == GOLDEN_BASE
    assert decode_dashboard(bytes.fromhex(GOLDEN_DASH)) == sample_dashboard()
    assert decode_basestation(bytes.fromhex(GOLDEN_BASE)) == sample_basestation()


def test_truncated_frame_raises_and_endpoint_counts_drop():
    data = encode_dashboard(sample_dashboard())[:-1]
    with pytest.raises(DecodeError):
        decode_dashboard(data)
    loop = LoopbackDatagram()
    a, b = loop.endpoint_a(), loop.endpoint_b()
    a.send(encode_dashboard(sample_dashboard())[:-1])
    a.send(encode_dashboard(sample_dashboard()))
    rx = DashboardReceiver(b)
    frames = rx.poll()
    assert len(frames) == 1
    assert rx.drop_count == 1


def test_corrupted_crc_rejected():
    data = bytearray(encode_basestation(sample_basestation()))
    data[5] ^= 0xFF
    with pytest.raises(DecodeError):
        decode_basestation(bytes(data))


f32 = st.floats(
    min_value=-1e6, max_value=1e6, allow_nan=False, width=32
)


@settings(max_examples=200, deadline=None)
@given(
    sec=st.integers(min_value=0, max_value=2**32 - 1),
    nsec=st.integers(min_value=0, max_value=999_999_999),
    gears=st.tuples(
        st.integers(min_value=-128, max_value=127),
        st.integers(min_value=-128, max_value=127),
    ),
    brakes=st.tuples(
        st.integers(min_value=-(2**15), max_value=2**15 - 1),
        st.integers(min_value=-(2**15), max_value=2**15 - 1),
    ),
    floats=st.lists(f32, min_size=17, max_size=17),
    status=st.integers(min_value=-128, max_value=127),
    tail=st.tuples(f32, f32),
)
def test_dashboard_roundtrip_property(sec, nsec, gears, brakes, floats, status, tail):
    frame = DashboardFrame(
        stamp_sec=sec,
        stamp_nsec=nsec,
        cmd_gear=gears[0],
        actual_gear=gears[1],
        cmd_throttle=gears[0],
        actual_throttle=gears[1],
        cmd_brake=brakes[0],
        actual_brake_front=brakes[1],
        actual_brake_rear=brakes[0],
        cmd_steering_degree=brakes[1],
        actual_steering_degree=brakes[0],
        heading_error=floats[0],
        cross_track_error=floats[1],
        velocity_error=floats[2],
        target_velocity_mps=floats[3],
        actual_velocity_mps=floats[4],
        purepursuit_lookahead_distance=floats[5],
        purepursuit_lookahead_angle_rad=floats[6],
        position_x=floats[7],
        position_y=floats[8],
        position_z=floats[9],
        position_r=floats[10],
        position_p=floats[11],
        position_yaw=floats[12],
        velocity_x=floats[13],
        velocity_y=floats[14],
        velocity_z=floats[15],
        trust=floats[16],
        status=status,
        engine_speed_rpm=tail[0],
        vehicle_speed_kmph=tail[1],
    )
    assert decode_dashboard(encode_dashboard(frame)) == frame


@settings(max_examples=200, deadline=None)
@given(
    v_max=f32,
    idx=st.integers(min_value=-128, max_value=127),
    flags=st.tuples(
        st.integers(min_value=-128, max_value=127),
        st.integers(min_value=-128, max_value=127),
    ),
    bools=st.tuples(st.booleans(), st.booleans(), st.booleans(), st.booleans()),
    cmds=st.tuples(f32, f32, f32),
)
def test_basestation_roundtrip_property(v_max, idx, flags, bools, cmds):
    frame = BasestationFrame(
        stamp_sec=1,
        stamp_nsec=2,
        v_max=v_max,
        raceline_index=idx,
        veh_flag=flags[0],
        track_flag=flags[1],
        enable_engine=bools[0],
        enable_driving=bools[1],
        enable_joystick_control=bools[2],
        target_velocity=cmds[0],
        steering_cmd=cmds[1],
        brake_amount=cmds[2],
        throttle_lockout=bools[3],
    )
    assert decode_basestation(encode_basestation(frame)) == frame


def test_out_of_range_field_rejected():
    with pytest.raises(ValueError):
        encode_dashboard(DashboardFrame(cmd_gear=200))


def test_stamp_split_join():
    for t in (0.0, 1.5, 12.25, 1234.999999999):
        sec, nsec = split_stamp(t)
        assert 0 <= nsec < 1_000_000_000
        assert join_stamp(sec, nsec) == pytest.approx(t, abs=1e-9)


def test_json_bridge_field_names_match_tables():
    import json

    d = json.loads(dashboard_to_json(sample_dashboard()))
    assert set(d.keys()) == set(DashboardFrame.__dataclass_fields__.keys())
    back = basestation_from_json(
        '{"v_max": 45.0, "track_flag": 1, "stamp_sec": 3, "stamp_nsec": 0}'
    )
    assert back.v_max == 45.0 and back.track_flag == 1


# ---------------------------------------------------------------------------
# receivers


def test_stale_stamped_inbound_frame_ignored():
    loop = LoopbackDatagram()
    base_side, car_side = loop.endpoint_a(), loop.endpoint_b()
    rx = BasestationReceiver(car_side)
    f_new = BasestationFrame(stamp_sec=10, v_max=45.0)
    f_old = BasestationFrame(stamp_sec=5, v_max=99.0)
    base_side.send(encode_basestation(f_new))
    assert [f.v_max for f in rx.poll()] == [45.0]
    base_side.send(encode_basestation(f_old))
    assert rx.poll() == []


def test_udp_endpoints_roundtrip():
    a = UdpEndpoint(("127.0.0.1", 0), ("127.0.0.1", 0))
    b = UdpEndpoint(("127.0.0.1", 0), a.sock.getsockname())
    a.peer = b.sock.getsockname()
    payload = encode_basestation(sample_basestation())
    a.send(payload)
    import time

    got = None
    for _ in range(100):
        got = b.recv()
        if got is not None:
            break
        time.sleep(0.005)
    assert got == payload
    a.close()
    b.close()


# ---------------------------------------------------------------------------
# chunked log


def test_chunk_count_matches_byte_arithmetic(tmp_path):
    budget = 4096
    payload = bytes(100)
    # oracle: capacity per chunk from header and per-record overhead
    capacity = (budget - CHUNK_HEADER_SIZE) // (RECORD_OVERHEAD + len(payload))
    expected_chunks = math.ceil(100 / capacity)
    writer = LogWriter(tmp_path, "t1", budget=budget)
    for i in range(100):
        writer.write("plant", i, payload)
    writer.close()
    chunks = LogReader(tmp_path, "t1").chunks()
    assert len(chunks) == expected_chunks == 3


def test_log_roundtrip_and_order(tmp_path):
    writer = LogWriter(tmp_path, "t2", budget=1 << 20)
    writer.write("a", 1, b"one")
    writer.write("b", 2, b"two")
    writer.write("a", 3, b"three")
    writer.close()
    records, gaps = LogReader(tmp_path, "t2").read()
    assert not gaps
    assert [(r.topic, r.stamp_ticks, r.payload) for r in records] == [
        ("a", 1, b"one"),
        ("b", 2, b"two"),
        ("a", 3, b"three"),
    ]


def test_zero_records_zero_chunks(tmp_path):
    writer = LogWriter(tmp_path, "t3", budget=4096)
    writer.close()
    assert LogReader(tmp_path, "t3").chunks() == []


def test_missing_chunk_reports_gap(tmp_path):
    writer = LogWriter(tmp_path, "t4", budget=256)
    for i in range(60):
        writer.write("x", i, bytes(50))
    writer.close()
    chunks = LogReader(tmp_path, "t4").chunks()
    assert len(chunks) >= 3
    chunks[1].unlink()
    records, gaps = LogReader(tmp_path, "t4").read()
    assert gaps
    assert records  # partial data still returned


# ---------------------------------------------------------------------------
# NDJSON console bridge


def test_ndjson_bridge_streams_frames_and_collects_commands():
    import json
    import socket
    import time

    from racestack.telemetry import NdjsonBridgeServer

    server = NdjsonBridgeServer(port=0)
    client = socket.create_connection((server.host, server.port), timeout=2)
    client.settimeout(2)
    try:
        server.broadcast(sample_dashboard())  # accepts the pending client
        server.broadcast(sample_dashboard())
        buf = b""
        deadline = time.time() + 2
        while b"\n" not in buf and time.time() < deadline:
            buf += client.recv(65536)
        line = buf.split(b"\n", 1)[0]
        doc = json.loads(line)
        assert doc["target_velocity_mps"] == pytest.approx(50.0)
        assert doc["cmd_gear"] == 3

        client.sendall(b'{"v_max": 45.0, "track_flag": 1}\n')
        got = []
        deadline = time.time() + 2
        while not got and time.time() < deadline:
            got = server.poll_commands()
            time.sleep(0.01)
        assert got and got[0]["v_max"] == 45.0
    finally:
        client.close()
        server.close()
