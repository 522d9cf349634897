"""Live service over real sockets: ingestion, broadcast, control protocol,
stale repeats, backpressure, metrics, static serving, and the WebSocket path."""

import contextlib
import json
import socket
import struct
import threading
import time

import numpy as np
import pytest

from miencap.errors import ValidationError
from miencap.retarget import BlendshapeFrame, PipelineConfig
from miencap.service import (
    RetargetService,
    ServiceConfig,
    SessionMetrics,
    feed_frames,
    replay_through_pipeline,
    serve,
)
from miencap.wire import classify, parse_ack, parse_broadcast, parse_metrics

import miencap.service as service_mod
from conftest import make_pipeline, unit_rig, zero_model


def frames_from(values, t0=0.0, dt=1 / 24.0):
    return [BlendshapeFrame(t0 + i * dt, np.asarray(v, dtype=np.float64))
            for i, v in enumerate(values)]


@contextlib.contextmanager
def running_service(pipeline=None, metrics_interval=30.0, static_dir=None):
    pipe = pipeline or make_pipeline()
    cfg = ServiceConfig(ingest_port=0, control_port=0,
                        metrics_interval=metrics_interval,
                        static_dir=static_dir)
    svc = serve(pipe, cfg)
    try:
        yield svc
    finally:
        svc.shutdown()


class ControlClient:
    """Raw NDJSON control/broadcast connection."""

    def __init__(self, addr):
        self.sock = socket.create_connection(addr, timeout=5.0)
        self.buf = b""

    def send(self, line: str) -> None:
        self.sock.sendall(line.encode("utf-8") + b"\n")

    def read_line(self, timeout=5.0) -> str:
        deadline = time.monotonic() + timeout
        while b"\n" not in self.buf:
            self.sock.settimeout(max(0.05, deadline - time.monotonic()))
            data = self.sock.recv(65536)
            if not data:
                raise AssertionError("control connection closed")
            self.buf += data
        line, _, self.buf = self.buf.partition(b"\n")
        return line.decode("utf-8")

    def subscribe(self):
        self.send('{"kind":"subscribe","args":{}}')
        ack = parse_ack(self.read_line())
        assert ack.ok and ack.kind == "subscribe"
        return ack

    def read_broadcasts(self, n, timeout=10.0, stale_ok=True):
        out = []
        deadline = time.monotonic() + timeout
        while len(out) < n:
            line = self.read_line(timeout=max(0.05, deadline - time.monotonic()))
            if classify(line) != "broadcast":
                continue
            rec = parse_broadcast(line)
            if not stale_ok and rec.stale:
                continue
            out.append(rec)
        return out

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# ------------------------------------------------------------------ lifecycle

def test_start_and_shutdown_clean():
    with running_service() as svc:
        assert svc.ingest_addr[1] != 0
        assert svc.control_addr[1] != 0
        assert svc.ingest_addr[1] != svc.control_addr[1]
        assert svc.metrics.frames_in == 0
    # shutdown() returned; sockets closed
    with pytest.raises(OSError):
        socket.create_connection(svc.ingest_addr, timeout=0.5).close()


def test_config_validation():
    with pytest.raises(ValidationError):
        ServiceConfig(ingest_port=9470, control_port=9470)
    with pytest.raises(ValidationError):
        ServiceConfig(metrics_interval=0.0)


# ------------------------------------------------------------------- delivery

def test_ordered_delivery_240_frames():
    with running_service() as svc:
        client = ControlClient(svc.control_addr)
        client.subscribe()
        frames = frames_from(np.random.default_rng(5).uniform(0, 1, (240, 2)))
        sent = feed_frames(frames, *svc.ingest_addr, fps=500.0)
        assert sent == 240
        recs = [r for r in client.read_broadcasts(240) if not r.stale]
        while len(recs) < 240:
            recs.extend(r for r in client.read_broadcasts(240 - len(recs))
                        if not r.stale)
        ts = [r.t for r in recs]
        assert ts == sorted(ts)
        assert ts == pytest.approx([f.timestamp for f in frames])
        assert all(r.char == "hero" and len(r.v) == 3 for r in recs)
        client.close()


def test_malformed_frame_does_not_kill_stream():
    with running_service() as svc:
        client = ControlClient(svc.control_addr)
        client.subscribe()
        with socket.create_connection(svc.ingest_addr, timeout=5.0) as s:
            s.sendall(b"this is not json\n")
            s.sendall(b'{"t":0.5,"w":[0.25,0.75]}\n')
            s.sendall(b'{"t":0.5,"w":[0.1,0.2,0.3,0.4]}\n')  # channel drift
            s.sendall(b'{"t":1.5,"w":[0.5,0.5]}\n')
        recs = client.read_broadcasts(2, stale_ok=False)
        assert recs[0].t == 0.5 and recs[1].t == 1.5
        client.close()


# -------------------------------------------------------------------- control

def test_list_characters_and_set_character():
    secondaries = {"side": zero_model(2, 3)}
    rigs = {"side": unit_rig("side", 2)}
    pipe = make_pipeline(secondaries=secondaries, secondary_rigs=rigs)
    with running_service(pipe) as svc:
        client = ControlClient(svc.control_addr)
        client.subscribe()
        client.send('{"kind":"list_characters","args":{}}')
        ack = parse_ack(client.read_line())
        assert ack.ok and ack.data == {"characters": ["hero", "side"],
                                       "active": "hero"}
        client.send('{"kind":"set_character","args":{"char":"side"}}')
        ack = parse_ack(client.read_line())
        assert ack.ok
        feed_frames(frames_from(np.full((5, 2), 0.5)), *svc.ingest_addr, fps=0)
        recs = client.read_broadcasts(5, stale_ok=False)
        assert all(r.char == "side" and len(r.v) == 2 for r in recs)
        # switching to an unknown character fails without side effects
        client.send('{"kind":"set_character","args":{"char":"nobody"}}')
        ack = parse_ack(client.read_line())
        assert not ack.ok and "nobody" in ack.error
        assert svc.active_character == "side"
        client.close()


def test_character_switch_applies_between_frames():
    secondaries = {"side": zero_model(2, 3)}
    rigs = {"side": unit_rig("side", 2)}
    pipe = make_pipeline(secondaries=secondaries, secondary_rigs=rigs)
    with running_service(pipe) as svc:
        client = ControlClient(svc.control_addr)
        client.subscribe()
        frames = frames_from(np.full((120, 2), 0.5))
        feeder = threading.Thread(
            target=feed_frames, args=(frames, *svc.ingest_addr, 120.0),
            daemon=True)
        feeder.start()
        client.read_broadcasts(20, stale_ok=False)
        client.send('{"kind":"set_character","args":{"char":"side"}}')
        seen_after_ack = 0
        switched = False
        deadline = time.monotonic() + 5.0
        acked = False
        while time.monotonic() < deadline and not switched:
            line = client.read_line()
            fam = classify(line)
            if fam == "ack":
                acked = True
                continue
            if fam != "broadcast" or not acked:
                continue
            seen_after_ack += 1
            if parse_broadcast(line).char == "side":
                switched = True
        feeder.join()
        assert switched
        assert seen_after_ack <= 3  # applied between frames, not mid-stream
        client.close()


def test_recalibration_end_to_end():
    with running_service() as svc:
        client = ControlClient(svc.control_addr)
        client.subscribe()
        client.send('{"kind":"recalibrate","args":{"frames":10}}')
        ack = parse_ack(client.read_line())
        assert ack.ok and ack.data == {"frames": 10}
        neutral = np.array([0.3, 0.5])
        feed_frames(frames_from(np.tile(neutral, (10, 1))),
                    *svc.ingest_addr, fps=0)
        client.read_broadcasts(10, stale_ok=False)
        assert np.allclose(svc.pipeline.calibration.neutral_weights, neutral,
                           atol=1e-12)
        # a frame at the new neutral now maps to (calibrated) zero
        feed_frames([BlendshapeFrame(9.0, neutral)], *svc.ingest_addr, fps=0)
        rec = client.read_broadcasts(1, stale_ok=False)[0]
        assert np.max(np.abs(rec.values())) < 1e-12
        client.close()


def test_set_params_applies_to_pipeline():
    with running_service() as svc:
        client = ControlClient(svc.control_addr)
        client.send('{"kind":"set_params","args":{"target_fps":50.5,"stale_timeout":0.75}}')
        ack = parse_ack(client.read_line())
        assert ack.ok
        assert svc.pipeline.config.target_fps == 50.5
        assert svc.pipeline.config.stale_timeout == 0.75
        client.close()


def test_malformed_control_acked_not_fatal():
    with running_service() as svc:
        client = ControlClient(svc.control_addr)
        client.send('{"kind":"bogus","args":{}}')
        ack = parse_ack(client.read_line())
        assert not ack.ok and ack.kind == "invalid" and ack.seq == 1
        client.send("{broken json")
        ack = parse_ack(client.read_line())
        assert not ack.ok and ack.seq == 2
        client.send('{"kind":"list_characters","args":{}}')
        ack = parse_ack(client.read_line())
        assert ack.ok and ack.seq == 3
        client.close()


# ------------------------------------------------------------------ stale path

def test_stale_frames_flagged_and_repeat_last():
    pipe = make_pipeline(config=PipelineConfig(target_fps=50.0,
                                               stale_timeout=0.1))
    with running_service(pipe) as svc:
        client = ControlClient(svc.control_addr)
        client.subscribe()
        feed_frames(frames_from(np.full((4, 2), 0.5)), *svc.ingest_addr, fps=0)
        live = client.read_broadcasts(4, stale_ok=False)
        # source stops; stale repeats arrive flagged, with the same values
        stales = []
        deadline = time.monotonic() + 3.0
        while len(stales) < 3 and time.monotonic() < deadline:
            line = client.read_line()
            if classify(line) == "broadcast":
                rec = parse_broadcast(line)
                if rec.stale:
                    stales.append(rec)
        assert len(stales) == 3
        for rec in stales:
            assert np.array_equal(rec.values(), live[-1].values())
            assert rec.t > live[-1].t
        # timestamps advance on the target-fps grid
        deltas = np.diff([r.t for r in stales])
        assert np.allclose(deltas, 1.0 / 50.0, atol=1e-9)
        client.close()


# ---------------------------------------------------------------- backpressure

def test_slow_subscriber_disconnected(monkeypatch):
    monkeypatch.setattr(service_mod, "SUBSCRIBER_QUEUE_SIZE", 8)

    class StuckSock:
        def __init__(self, real):
            self.real = real

        def sendall(self, data):
            time.sleep(30.0)

        def shutdown(self, how):
            self.real.shutdown(how)

        def close(self):
            self.real.close()

    with running_service() as svc:
        healthy = ControlClient(svc.control_addr)
        healthy.subscribe()
        slow = ControlClient(svc.control_addr)
        slow.subscribe()
        deadline = time.monotonic() + 2.0
        while len(svc._subscribers) < 2 and time.monotonic() < deadline:
            time.sleep(0.01)
        slow_sub = svc._subscribers[-1]
        slow_sub.sock = StuckSock(slow_sub.sock)

        frames = frames_from(np.random.default_rng(1).uniform(0, 1, (40, 2)))
        feed_frames(frames, *svc.ingest_addr, fps=200.0)
        deadline = time.monotonic() + 5.0
        while slow_sub in svc._subscribers and time.monotonic() < deadline:
            time.sleep(0.02)
        assert slow_sub not in svc._subscribers
        assert not slow_sub.alive
        # the healthy subscriber kept receiving
        recs = healthy.read_broadcasts(40, stale_ok=False)
        assert len(recs) == 40
        healthy.close()
        slow.close()


def test_enqueue_drop_oldest_preserves_controls():
    svc = RetargetService(make_pipeline(), ServiceConfig(ingest_port=0,
                                                         control_port=0))
    # not started: the queue is ours to inspect
    for i in range(service_mod.INGEST_QUEUE_SIZE):
        svc._enqueue(("frame", i, 0.0))
    svc._enqueue(("control", "msg", None, 1))
    for i in range(10):
        svc._enqueue(("frame", 1000 + i, 0.0))
    items = []
    while not svc._pipeline_queue.empty():
        items.append(svc._pipeline_queue.get_nowait())
    assert len(items) == service_mod.INGEST_QUEUE_SIZE
    assert ("control", "msg", None, 1) in items
    # newest frames survived, oldest were dropped
    assert ("frame", 1009, 0.0) in items
    assert ("frame", 0, 0.0) not in items


# -------------------------------------------------------------------- metrics

def test_metrics_records_published():
    with running_service(metrics_interval=0.2) as svc:
        client = ControlClient(svc.control_addr)
        client.subscribe()
        frames = frames_from(np.random.default_rng(2).uniform(0, 1, (48, 2)))
        feed_frames(frames, *svc.ingest_addr, fps=100.0)
        snap = None
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            line = client.read_line()
            if classify(line) == "metrics":
                snap = parse_metrics(line)
                if snap["frames_in"] >= 48:
                    break
        assert snap is not None and snap["frames_in"] == 48
        assert snap["frames_out"] >= 48
        assert set(snap) == {"frames_in", "frames_out", "latency_mean_ms",
                             "latency_max_ms", "fps", "jitter"}
        assert 80.0 < snap["fps"] < 120.0
        assert snap["latency_mean_ms"] >= 0.0
        client.close()


def test_session_metrics_windows():
    m = SessionMetrics()
    frame = type("F", (), {"values": np.zeros(2)})()
    for i in range(10):
        m.record_in(i * 0.1)
        m.record_out(0.002, frame)
    snap = m.snapshot()
    assert snap["frames_in"] == 10 and snap["frames_out"] == 10
    assert abs(snap["fps"] - 10.0) < 1e-9
    assert abs(snap["latency_mean_ms"] - 2.0) < 1e-9
    assert abs(snap["latency_max_ms"] - 2.0) < 1e-9
    assert snap["jitter"] == 0.0


# ------------------------------------------------------------------- websocket

def ws_client_frame(opcode, payload, fin=True, mask=b"\xaa\xbb\xcc\xdd"):
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    b0 = (0x80 if fin else 0x00) | opcode
    n = len(payload)
    if n < 126:
        hdr = struct.pack("!BB", b0, 0x80 | n)
    elif n < 1 << 16:
        hdr = struct.pack("!BBH", b0, 0x80 | 126, n)
    else:
        hdr = struct.pack("!BBQ", b0, 0x80 | 127, n)
    masked = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    return hdr + mask + masked


class WSClient:
    def __init__(self, addr):
        self.sock = socket.create_connection(addr, timeout=5.0)
        self.buf = b""
        self.sock.sendall(
            b"GET / HTTP/1.1\r\nHost: t\r\nUpgrade: websocket\r\n"
            b"Connection: Upgrade\r\nSec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\n"
            b"Sec-WebSocket-Version: 13\r\n\r\n")
        head = b""
        while b"\r\n\r\n" not in head:
            head += self.sock.recv(4096)
        assert b"101 Switching Protocols" in head
        assert b"s3pPLMBiTxaQ9kYGzzhZRbK+xOo=" in head
        self.buf = head.split(b"\r\n\r\n", 1)[1]

    def send_text(self, text):
        self.sock.sendall(ws_client_frame(0x1, text))

    def next_frame(self, timeout=5.0):
        deadline = time.monotonic() + timeout
        while True:
            frame = self._try_parse()
            if frame is not None:
                return frame
            self.sock.settimeout(max(0.05, deadline - time.monotonic()))
            data = self.sock.recv(65536)
            if not data:
                raise AssertionError("websocket closed")
            self.buf += data

    def _try_parse(self):
        if len(self.buf) < 2:
            return None
        b0, b1 = self.buf[0], self.buf[1]
        length = b1 & 0x7F
        off = 2
        if length == 126:
            if len(self.buf) < 4:
                return None
            length = struct.unpack_from("!H", self.buf, 2)[0]
            off = 4
        elif length == 127:
            if len(self.buf) < 10:
                return None
            length = struct.unpack_from("!Q", self.buf, 2)[0]
            off = 10
        if len(self.buf) < off + length:
            return None
        payload = self.buf[off:off + length]
        self.buf = self.buf[off + length:]
        return b0 & 0x0F, bytes(payload)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def test_websocket_subscriber_path():
    with running_service() as svc:
        ws = WSClient(svc.control_addr)
        ws.send_text('{"kind":"subscribe","args":{}}')
        opcode, payload = ws.next_frame()
        assert opcode == 0x1
        ack = parse_ack(payload)
        assert ack.ok and ack.kind == "subscribe"
        frames = frames_from(np.full((10, 2), 0.25))
        feed_frames(frames, *svc.ingest_addr, fps=0)
        got = []
        while len(got) < 10:
            opcode, payload = ws.next_frame()
            assert opcode == 0x1
            if classify(payload) == "broadcast":
                rec = parse_broadcast(payload)
                if not rec.stale:
                    got.append(rec)
        assert [r.t for r in got] == pytest.approx([f.timestamp for f in frames])
        # ping/pong
        ws.sock.sendall(ws_client_frame(0x9, b"hi"))
        while True:
            opcode, payload = ws.next_frame()
            if opcode == 0xA:
                assert payload == b"hi"
                break
        # clean close handshake
        ws.sock.sendall(ws_client_frame(0x8, struct.pack("!H", 1000)))
        while True:
            opcode, payload = ws.next_frame()
            if opcode == 0x8:
                break
        ws.close()


# ---------------------------------------------------------------- static files

def http_get(addr, target, method="GET"):
    with socket.create_connection(addr, timeout=5.0) as s:
        s.sendall(f"{method} {target} HTTP/1.1\r\nHost: t\r\n\r\n".encode())
        data = b""
        while True:
            try:
                chunk = s.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            data += chunk
    head, _, body = data.partition(b"\r\n\r\n")
    status = head.split(b"\r\n")[0].decode()
    headers = dict(
        (k.strip().lower(), v.strip())
        for k, _, v in (h.partition(":") for h in head.decode().split("\r\n")[1:]))
    return status, headers, body


def test_static_dashboard_serving(tmp_path):
    (tmp_path / "index.html").write_text("<h1>console</h1>")
    (tmp_path / "app.js").write_text("export {};")
    secret = tmp_path.parent / "secret.txt"
    secret.write_text("keep out")
    with running_service(static_dir=str(tmp_path)) as svc:
        status, headers, body = http_get(svc.control_addr, "/")
        assert status.startswith("HTTP/1.1 200") and body == b"<h1>console</h1>"
        assert headers["content-type"].startswith("text/html")
        status, headers, body = http_get(svc.control_addr, "/app.js")
        assert status.startswith("HTTP/1.1 200") and body == b"export {};"
        assert headers["content-type"].startswith("text/javascript")
        status, _, _ = http_get(svc.control_addr, "/missing.css")
        assert status.startswith("HTTP/1.1 404")
        status, _, body = http_get(svc.control_addr, "/../secret.txt")
        assert status.startswith("HTTP/1.1 404")
        assert b"keep out" not in body
        status, _, _ = http_get(svc.control_addr, "/", method="POST")
        assert status.startswith("HTTP/1.1 405")


def test_static_disabled_by_default():
    with running_service() as svc:
        status, _, _ = http_get(svc.control_addr, "/")
        assert status.startswith("HTTP/1.1 404")


# --------------------------------------------------------------------- replays

def test_replay_pacing_and_throughput():
    pipe = make_pipeline()
    frames = frames_from(np.random.default_rng(3).uniform(0, 1, (60, 2)))
    got = []
    start = time.monotonic()
    n = replay_through_pipeline(frames, pipe, fps=60.0, emit=got.append)
    elapsed = time.monotonic() - start
    assert n == 60 and len(got) == 60
    assert 0.9 <= elapsed < 2.0
    # unpaced: nothing dropped, runs flat out
    pipe2 = make_pipeline()
    got2 = []
    start = time.monotonic()
    n = replay_through_pipeline(frames, pipe2, fps=0.0, emit=got2.append)
    assert n == 60 and time.monotonic() - start < 0.5
    assert [r.t for r in got2] == [f.timestamp for f in frames]
    assert all(r.char == "hero" and not r.stale for r in got2)


def test_replay_secondary_character():
    secondaries = {"side": zero_model(2, 3)}
    rigs = {"side": unit_rig("side", 2)}
    pipe = make_pipeline(secondaries=secondaries, secondary_rigs=rigs)
    frames = frames_from(np.full((5, 2), 0.5))
    got = []
    replay_through_pipeline(frames, pipe, fps=0.0, emit=got.append,
                            character="side")
    assert all(r.char == "side" and r.v == (0.0, 0.0) for r in got)
    with pytest.raises(ValidationError):
        replay_through_pipeline(frames, make_pipeline(), fps=0.0,
                                emit=got.append, character="nobody")
