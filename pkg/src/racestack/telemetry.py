"""Bit-exact telemetry framing, datagram transports, the console JSON
bridge, and chunked run logging.

Wire protocol: little-endian packed fields in exact message-table order with
a trailing CRC-32 over the payload.  The dashboard frame (car to base) packs
30 fields in 99 bytes; the basestation frame (base to car) packs 12 fields in
31 bytes.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path


class DecodeError(Exception):
    pass


def split_stamp(t: float) -> tuple[int, int]:
    sec = int(t)
    nsec = int(round((t - sec) * 1e9))
    if nsec >= 1_000_000_000:
        sec += 1
        nsec -= 1_000_000_000
    return sec, nsec


def join_stamp(sec: int, nsec: int) -> float:
    return sec + nsec * 1e-9


@dataclass(frozen=True)
class DashboardFrame:
    stamp_sec: int = 0
    stamp_nsec: int = 0
    cmd_gear: int = 0
    actual_gear: int = 0
    cmd_throttle: int = 0
    actual_throttle: int = 0
    cmd_brake: int = 0
    actual_brake_front: int = 0
    actual_brake_rear: int = 0
    cmd_steering_degree: int = 0
    actual_steering_degree: int = 0
    heading_error: float = 0.0
    cross_track_error: float = 0.0
    velocity_error: float = 0.0
    target_velocity_mps: float = 0.0
    actual_velocity_mps: float = 0.0
    purepursuit_lookahead_distance: float = 0.0
    purepursuit_lookahead_angle_rad: float = 0.0
    position_x: float = 0.0
    position_y: float = 0.0
    position_z: float = 0.0
    position_r: float = 0.0
    position_p: float = 0.0
    position_yaw: float = 0.0
    velocity_x: float = 0.0
    velocity_y: float = 0.0
    velocity_z: float = 0.0
    trust: float = 0.0
    status: int = 0
    engine_speed_rpm: float = 0.0
    vehicle_speed_kmph: float = 0.0


@dataclass(frozen=True)
class BasestationFrame:
    stamp_sec: int = 0
    stamp_nsec: int = 0
    v_max: float = 0.0
    raceline_index: int = 0
    veh_flag: int = 0
    track_flag: int = 0
    enable_engine: bool = False
    enable_driving: bool = False
    enable_joystick_control: bool = False
    target_velocity: float = 0.0
    steering_cmd: float = 0.0
    brake_amount: float = 0.0
    throttle_lockout: bool = False


# struct layouts follow the dataclass field order exactly
_DASH_STRUCT = struct.Struct("<II4b5h17fb2f")
_BASE_STRUCT = struct.Struct("<IIf3b3B3fB")
_CRC_STRUCT = struct.Struct("<I")

DASHBOARD_FRAME_SIZE = _DASH_STRUCT.size + _CRC_STRUCT.size  # 103
BASESTATION_FRAME_SIZE = _BASE_STRUCT.size + _CRC_STRUCT.size  # 35

_DASH_FIELDS = [f.name for f in dc_fields(DashboardFrame)]
_BASE_FIELDS = [f.name for f in dc_fields(BasestationFrame)]


def _encode(frame, struct_obj, field_names) -> bytes:
    values = []
    for name in field_names:
        v = getattr(frame, name)
        values.append(bool(v) if isinstance(v, bool) else v)
    try:
        payload = struct_obj.pack(*values)
    except struct.error as exc:
        raise ValueError(f"frame field out of declared range: {exc}") from exc
    return payload + _CRC_STRUCT.pack(zlib.crc32(payload))


def _decode(data: bytes, struct_obj, field_names, cls):
    expected = struct_obj.size + _CRC_STRUCT.size
    if len(data) != expected:
        raise DecodeError(f"length {len(data)} != {expected}")
    payload, crc_bytes = data[: struct_obj.size], data[struct_obj.size :]
    (crc,) = _CRC_STRUCT.unpack(crc_bytes)
    if zlib.crc32(payload) != crc:
        raise DecodeError("crc mismatch")
    values = struct_obj.unpack(payload)
    kwargs = {}
    for name, value in zip(field_names, values):
        if cls.__dataclass_fields__[name].type == "bool":
            value = bool(value)
        kwargs[name] = value
    return cls(**kwargs)


def encode_dashboard(frame: DashboardFrame) -> bytes:
    return _encode(frame, _DASH_STRUCT, _DASH_FIELDS)


def decode_dashboard(data: bytes) -> DashboardFrame:
    return _decode(data, _DASH_STRUCT, _DASH_FIELDS, DashboardFrame)


def encode_basestation(frame: BasestationFrame) -> bytes:
    return _encode(frame, _BASE_STRUCT, _BASE_FIELDS)


def decode_basestation(data: bytes) -> BasestationFrame:
    return _decode(data, _BASE_STRUCT, _BASE_FIELDS, BasestationFrame)


def dashboard_to_json(frame: DashboardFrame) -> str:
    """One JSON object per frame; keys exactly the message-table names."""
    d = {name: getattr(frame, name) for name in _DASH_FIELDS}
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def basestation_from_json(line: str) -> BasestationFrame:
    d = json.loads(line)
    kwargs = {name: d[name] for name in _BASE_FIELDS if name in d}
    return BasestationFrame(**kwargs)


# ---------------------------------------------------------------------------
# Datagram transports


class LoopbackDatagram:
    """Deterministic in-process datagram pair for lockstep runs."""

    def __init__(self):
        self._a_to_b: list[bytes] = []
        self._b_to_a: list[bytes] = []

    def endpoint_a(self) -> "LoopbackEndpoint":
        return LoopbackEndpoint(self._a_to_b, self._b_to_a)

    def endpoint_b(self) -> "LoopbackEndpoint":
        return LoopbackEndpoint(self._b_to_a, self._a_to_b)


class LoopbackEndpoint:
    def __init__(self, tx: list[bytes], rx: list[bytes]):
        self._tx = tx
        self._rx = rx

    def send(self, data: bytes) -> None:
        self._tx.append(bytes(data))

    def recv(self) -> bytes | None:
        if self._rx:
            return self._rx.pop(0)
        return None

    def close(self) -> None:
        pass


class UdpEndpoint:
    """Non-blocking UDP endpoint bound to a local port with a fixed peer."""

    def __init__(self, bind: tuple[str, int], peer: tuple[str, int]):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.setblocking(False)
        self.peer = peer

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendto(data, self.peer)
        except OSError:
            pass  # transient socket failure never stops the stack

    def recv(self) -> bytes | None:
        try:
            data, _ = self.sock.recvfrom(65536)
            return data
        except BlockingIOError:
            return None
        except OSError:
            return None

    def close(self) -> None:
        self.sock.close()


class BasestationReceiver:
    """Decodes inbound basestation frames, dropping corrupt and stale ones."""

    def __init__(self, endpoint):
        self.endpoint = endpoint
        self.drop_count = 0
        self._last_stamp = -1.0

    def poll(self) -> list[BasestationFrame]:
        frames = []
        while True:
            data = self.endpoint.recv()
            if data is None:
                break
            try:
                frame = decode_basestation(data)
            except DecodeError:
                self.drop_count += 1
                continue
            stamp = join_stamp(frame.stamp_sec, frame.stamp_nsec)
            if stamp < self._last_stamp:
                continue  # out-of-order frame
            self._last_stamp = stamp
            frames.append(frame)
        return frames


class DashboardReceiver:
    def __init__(self, endpoint):
        self.endpoint = endpoint
        self.drop_count = 0

    def poll(self) -> list[DashboardFrame]:
        frames = []
        while True:
            data = self.endpoint.recv()
            if data is None:
                break
            try:
                frames.append(decode_dashboard(data))
            except DecodeError:
                self.drop_count += 1
        return frames


# ---------------------------------------------------------------------------
# Chunked run log

_CHUNK_MAGIC = b"RSLG"
_CHUNK_VERSION = 1
_HEADER = struct.Struct("<4sHI")  # magic, version, seq
_RECORD = struct.Struct("<HQI")  # topic id, stamp ticks, payload length
_FOOTER_TAIL = struct.Struct("<I4s")  # footer length, end magic
_END_MAGIC = b"RSEN"

CHUNK_HEADER_SIZE = _HEADER.size
RECORD_OVERHEAD = _RECORD.size


def chunk_path(directory: Path, run_id: str, seq: int) -> Path:
    return Path(directory) / f"run_{run_id}_{seq:04d}.log"


class LogWriter:
    """Size-budgeted chunk writer.  The budget covers header plus records
    (the index footer is bookkeeping appended at rotation)."""

    def __init__(self, directory, run_id: str, budget: int = 16 * 1024 * 1024):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.budget = budget
        self.seq = 0
        self.enabled = True
        self._topics: dict[str, int] = {}
        self._fh = None
        self._bytes = 0
        self._offsets: dict[int, list[int]] = {}

    def _topic_id(self, topic: str) -> int:
        if topic not in self._topics:
            self._topics[topic] = len(self._topics)
        return self._topics[topic]

    def _open_chunk(self) -> None:
        self._fh = open(chunk_path(self.directory, self.run_id, self.seq), "wb")
        self._fh.write(_HEADER.pack(_CHUNK_MAGIC, _CHUNK_VERSION, self.seq))
        self._bytes = _HEADER.size
        self._offsets = {}

    def write(self, topic: str, stamp_ticks: int, payload: bytes) -> None:
        if not self.enabled:
            return
        try:
            tid = self._topic_id(topic)
            record_size = _RECORD.size + len(payload)
            if self._fh is None:
                self._open_chunk()
            elif self._bytes + record_size > self.budget:
                self.rotate()
                self._open_chunk()
            self._offsets.setdefault(tid, []).append(self._bytes)
            self._fh.write(_RECORD.pack(tid, stamp_ticks, len(payload)))
            self._fh.write(payload)
            self._bytes += record_size
        except OSError:
            self.enabled = False  # recording is non-critical
            raise

    def rotate(self) -> None:
        if self._fh is None:
            return
        footer = json.dumps(
            {
                "topics": self._topics,
                "offsets": {str(k): v for k, v in self._offsets.items()},
            },
            sort_keys=True,
        ).encode()
        self._fh.write(footer)
        self._fh.write(_FOOTER_TAIL.pack(len(footer), _END_MAGIC))
        self._fh.close()
        self._fh = None
        self.seq += 1

    def close(self) -> None:
        self.rotate()


@dataclass(frozen=True)
class LogRecord:
    topic: str
    stamp_ticks: int
    payload: bytes


class LogReader:
    def __init__(self, directory, run_id: str):
        self.directory = Path(directory)
        self.run_id = run_id

    def chunks(self) -> list[Path]:
        return sorted(self.directory.glob(f"run_{self.run_id}_*.log"))

    def read(self) -> tuple[list[LogRecord], list[str]]:
        records: list[LogRecord] = []
        gaps: list[str] = []
        expected_seq = 0
        for path in self.chunks():
            data = path.read_bytes()
            magic, version, seq = _HEADER.unpack_from(data, 0)
            if magic != _CHUNK_MAGIC or version != _CHUNK_VERSION:
                gaps.append(f"{path.name}: bad header")
                continue
            if seq != expected_seq:
                gaps.append(f"missing chunk(s) before seq {seq}")
            expected_seq = seq + 1
            footer_len, end_magic = _FOOTER_TAIL.unpack_from(
                data, len(data) - _FOOTER_TAIL.size
            )
            if end_magic != _END_MAGIC:
                gaps.append(f"{path.name}: truncated footer")
                continue
            footer = json.loads(
                data[len(data) - _FOOTER_TAIL.size - footer_len : len(data) - _FOOTER_TAIL.size]
            )
            id_to_topic = {v: k for k, v in footer["topics"].items()}
            pos = _HEADER.size
            end = len(data) - _FOOTER_TAIL.size - footer_len
            while pos < end:
                tid, ticks, length = _RECORD.unpack_from(data, pos)
                pos += _RECORD.size
                payload = data[pos : pos + length]
                pos += length
                records.append(
                    LogRecord(
                        topic=id_to_topic.get(tid, f"topic{tid}"),
                        stamp_ticks=ticks,
                        payload=payload,
                    )
                )
        return records, gaps


# ---------------------------------------------------------------------------
# Console bridge (newline-delimited JSON over TCP)


class NdjsonBridgeServer:
    """Streams dashboard frames as NDJSON to connected consoles and collects
    NDJSON command lines (basestation field dicts) from them."""

    def __init__(self, host: str = "127.0.0.1", port: int = 7780):
        self.listener = socket.create_server((host, port))
        self.listener.setblocking(False)
        self.host, self.port = self.listener.getsockname()
        self.clients: list[socket.socket] = []
        self._buffers: dict[socket.socket, bytes] = {}
        self._lock = threading.Lock()
        self.commands: list[dict] = []

    def _accept(self) -> None:
        while True:
            try:
                conn, _ = self.listener.accept()
            except (BlockingIOError, OSError):
                return
            conn.setblocking(False)
            with self._lock:
                self.clients.append(conn)
                self._buffers[conn] = b""

    def broadcast(self, frame: DashboardFrame) -> None:
        self._accept()
        line = (dashboard_to_json(frame) + "\n").encode()
        dead = []
        with self._lock:
            for conn in self.clients:
                try:
                    conn.sendall(line)
                except OSError:
                    dead.append(conn)
            for conn in dead:
                self.clients.remove(conn)
                self._buffers.pop(conn, None)
                conn.close()

    def poll_commands(self) -> list[dict]:
        self._accept()
        out = []
        with self._lock:
            for conn in list(self.clients):
                try:
                    while True:
                        data = conn.recv(65536)
                        if not data:
                            break
                        self._buffers[conn] += data
                except BlockingIOError:
                    pass
                except OSError:
                    continue
                buf = self._buffers.get(conn, b"")
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    if line.strip():
                        try:
                            out.append(json.loads(line))
                        except json.JSONDecodeError:
                            pass
                self._buffers[conn] = buf
        self.commands.extend(out)
        return out

    def close(self) -> None:
        with self._lock:
            for conn in self.clients:
                conn.close()
            self.clients.clear()
        self.listener.close()
