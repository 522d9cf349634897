"""Live retargeting service.

Three sequential stages joined by bounded queues: socket ingestion, the
pipeline (sole owner of mutable pipeline state), and broadcast fan-out.
Control messages ride the pipeline queue so they apply between frames,
never mid-frame.

The control/broadcast port speaks three dialects, sniffed from the first
bytes of each connection: raw NDJSON (first byte ``{``), WebSocket (HTTP
Upgrade), or plain HTTP GET for the static dashboard bundle.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, MienCapError, ValidationError
from .retarget import RetargetPipeline, calibrate, jitter_metric
from .wire import (
    Ack,
    BroadcastRecord,
    ControlMessage,
    WSDecoder,
    encode_ack,
    encode_broadcast,
    encode_metrics,
    parse_control,
    parse_frame,
    ws_encode_close,
    ws_encode_pong,
    ws_encode_text,
    ws_handshake_response,
)

log = logging.getLogger("miencap.service")

INGEST_QUEUE_SIZE = 64
BROADCAST_QUEUE_SIZE = 256
SUBSCRIBER_QUEUE_SIZE = 256
METRICS_WINDOW = 48
RECAL_WINDOW = 30
_POLL = 0.02


def configure_logging() -> None:
    """Honor the MIENCAP_LOG env var (debug|info|warning|error)."""
    level = os.environ.get("MIENCAP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@dataclass
class ServiceConfig:
    ingest_host: str = "127.0.0.1"
    ingest_port: int = 9470
    control_host: str = "127.0.0.1"
    control_port: int = 9471
    metrics_interval: float = 1.0
    static_dir: str | None = None

    def __post_init__(self):
        if self.ingest_port == self.control_port and self.ingest_port != 0:
            raise ValidationError("ingest and control ports must differ")
        if self.metrics_interval <= 0.0:
            raise ValidationError("metrics interval must be > 0")


class SessionMetrics:
    """Counters plus sliding 48-frame latency/fps/jitter windows."""

    def __init__(self):
        self.frames_in = 0
        self.frames_out = 0
        self._latencies = deque(maxlen=METRICS_WINDOW)
        self._arrivals = deque(maxlen=METRICS_WINDOW)
        self._outputs = deque(maxlen=METRICS_WINDOW)

    def record_in(self, wall: float) -> None:
        self.frames_in += 1
        self._arrivals.append(wall)

    def record_out(self, latency_s: float, frame) -> None:
        self.frames_out += 1
        self._latencies.append(max(0.0, latency_s))
        self._outputs.append(frame)

    def snapshot(self) -> dict:
        lat = list(self._latencies)
        arr = list(self._arrivals)
        fps = 0.0
        if len(arr) >= 2 and arr[-1] > arr[0]:
            fps = (len(arr) - 1) / (arr[-1] - arr[0])
        jit = 0.0
        if len(self._outputs) >= 2:
            jit = jitter_metric(self._outputs)
        return {
            "frames_in": self.frames_in,
            "frames_out": self.frames_out,
            "latency_mean_ms": float(np.mean(lat) * 1e3) if lat else 0.0,
            "latency_max_ms": float(np.max(lat) * 1e3) if lat else 0.0,
            "fps": fps,
            "jitter": jit,
        }


class _Subscriber:
    """One outbound connection with its own bounded queue and writer thread."""

    _ids = 0

    def __init__(self, sock: socket.socket, transport: str):
        _Subscriber._ids += 1
        self.id = _Subscriber._ids
        self.sock = sock
        self.transport = transport  # "raw" | "ws"
        self.queue = queue.Queue(maxsize=SUBSCRIBER_QUEUE_SIZE)
        self.subscribed = False
        self.alive = True
        self.thread = threading.Thread(target=self._run, daemon=True,
                                       name=f"miencap-sub-{self.id}")
        self.thread.start()

    def send_line(self, line: str) -> bool:
        """Enqueue one record; False means the queue was full."""
        if not self.alive:
            return False
        try:
            self.queue.put_nowait(line)
            return True
        except queue.Full:
            return False

    def close(self) -> None:
        self.alive = False
        try:
            self.queue.put_nowait(None)
        except queue.Full:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def _run(self) -> None:
        while self.alive:
            try:
                line = self.queue.get(timeout=0.25)
            except queue.Empty:
                continue
            if line is None:
                break
            try:
                if self.transport == "ws":
                    self.sock.sendall(ws_encode_text(line))
                else:
                    self.sock.sendall(line.encode("utf-8") + b"\n")
            except OSError:
                self.alive = False
                break


class RetargetService:
    """Owns the sockets, queues, and worker threads of one live session."""

    def __init__(self, pipeline: RetargetPipeline, config: ServiceConfig):
        self.pipeline = pipeline
        self.config = config
        self.metrics = SessionMetrics()
        self.active_character = pipeline.primary_rig.id

        self._pipeline_queue = queue.Queue(maxsize=INGEST_QUEUE_SIZE)
        self._broadcast_queue = queue.Queue(maxsize=BROADCAST_QUEUE_SIZE)
        self._subscribers: list[_Subscriber] = []
        self._sub_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._ingest_sock: socket.socket | None = None
        self._control_sock: socket.socket | None = None
        self.ingest_addr: tuple | None = None
        self.control_addr: tuple | None = None

        # pipeline-thread-only state
        self._recal_frames: list = []
        self._recal_remaining = 0
        self._last_frame_wall: float | None = None
        self._last_out_t: float | None = None
        self._next_stale_wall: float | None = None

    # --- lifecycle ---

    def start(self) -> None:
        self._ingest_sock = self._listen(self.config.ingest_host, self.config.ingest_port)
        self.ingest_addr = self._ingest_sock.getsockname()
        self._control_sock = self._listen(self.config.control_host, self.config.control_port)
        self.control_addr = self._control_sock.getsockname()
        for target, name in (
            (self._accept_ingest, "miencap-ingest"),
            (self._accept_control, "miencap-control"),
            (self._run_pipeline, "miencap-pipeline"),
            (self._run_broadcast, "miencap-broadcast"),
        ):
            t = threading.Thread(target=target, daemon=True, name=name)
            t.start()
            self._threads.append(t)
        log.info("service up: ingest=%s control=%s", self.ingest_addr, self.control_addr)

    def shutdown(self) -> None:
        self._stop.set()
        for s in (self._ingest_sock, self._control_sock):
            if s is not None:
                # shutdown() wakes threads blocked in accept(); close() alone
                # leaves them holding the listener and able to take one more
                # connection
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                try:
                    s.close()
                except OSError:
                    pass
        with self._sub_lock:
            subs = list(self._subscribers)
        for sub in subs:
            sub.close()
        for t in self._threads:
            t.join(timeout=2.0)

    def run_forever(self) -> None:
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            log.info("interrupt: shutting down")
        finally:
            self.shutdown()

    @staticmethod
    def _listen(host: str, port: int) -> socket.socket:
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((host, port))
        s.listen(16)
        return s

    # --- stage 1: ingestion ---

    def _accept_ingest(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._ingest_sock.accept()
            except OSError:
                return
            log.info("ingest connection from %s", addr)
            t = threading.Thread(target=self._read_frames, args=(conn,),
                                 daemon=True, name="miencap-ingest-conn")
            t.start()

    def _read_frames(self, conn: socket.socket) -> None:
        buf = bytearray()
        with conn:
            while not self._stop.is_set():
                try:
                    data = conn.recv(65536)
                except OSError:
                    return
                if not data:
                    return
                buf.extend(data)
                while True:
                    nl = buf.find(b"\n")
                    if nl < 0:
                        break
                    line = bytes(buf[:nl]).strip()
                    del buf[:nl + 1]
                    if not line:
                        continue
                    try:
                        frame = parse_frame(line)
                    except (FormatError, ValidationError) as e:
                        log.warning("rejected malformed frame: %s", e)
                        continue
                    self._enqueue(("frame", frame, time.monotonic()))

    def _enqueue(self, cmd) -> None:
        """Drop-oldest backpressure keeps the live path fresh."""
        while True:
            try:
                self._pipeline_queue.put_nowait(cmd)
                return
            except queue.Full:
                try:
                    dropped = self._pipeline_queue.get_nowait()
                    if dropped[0] != "frame":
                        # never drop a control command; re-queue it ahead
                        self._pipeline_queue.put_nowait(dropped)
                except (queue.Empty, queue.Full):
                    pass

    # --- stage 2: pipeline ---

    def _run_pipeline(self) -> None:
        metrics_due = time.monotonic() + self.config.metrics_interval
        while not self._stop.is_set():
            try:
                cmd = self._pipeline_queue.get(timeout=_POLL)
            except queue.Empty:
                cmd = None
            now = time.monotonic()
            if cmd is not None:
                if cmd[0] == "frame":
                    self._handle_frame(cmd[1], cmd[2])
                else:
                    _, msg, sub, seq = cmd
                    self._handle_control(msg, sub, seq)
            else:
                self._maybe_repeat_stale(now)
            if now >= metrics_due:
                self._post(encode_metrics(self.metrics.snapshot()))
                metrics_due = now + self.config.metrics_interval

    def _handle_frame(self, frame, arrival_wall: float) -> None:
        self.metrics.record_in(arrival_wall)
        if self._recal_remaining > 0:
            self._recal_frames.append(frame)
            self._recal_remaining -= 1
            if self._recal_remaining == 0:
                try:
                    self.pipeline.recalibrate(self._recal_frames)
                    log.info("recalibrated from %d frames", len(self._recal_frames))
                except MienCapError as e:
                    log.warning("recalibration discarded: %s", e)
                self._recal_frames = []
        try:
            out = self.pipeline.retarget_step(frame)
        except MienCapError as e:
            log.warning("frame dropped by pipeline: %s", e)
            return
        self._emit(out, frame.timestamp, stale=False, arrival_wall=arrival_wall)
        self._last_frame_wall = time.monotonic()
        self._last_out_t = frame.timestamp
        self._next_stale_wall = None

    def _maybe_repeat_stale(self, now: float) -> None:
        if self._last_frame_wall is None:
            return
        timeout = self.pipeline.config.stale_timeout
        if now - self._last_frame_wall < timeout:
            return
        period = 1.0 / self.pipeline.config.target_fps
        if self._next_stale_wall is None:
            self._next_stale_wall = self._last_frame_wall + timeout
        if now < self._next_stale_wall:
            return
        self._next_stale_wall += period
        self._last_out_t += period
        out = self.pipeline.repeat_last(self._last_out_t)
        if out is not None:
            self._emit(out, self._last_out_t, stale=True, arrival_wall=now)

    def _emit(self, primary_out, t: float, stale: bool, arrival_wall: float) -> None:
        if self.active_character == self.pipeline.primary_rig.id:
            values = primary_out.values
        else:
            fan = self.pipeline.fan_out(primary_out)
            values = fan[self.active_character].values
        rec = BroadcastRecord(float(t), self.active_character,
                              tuple(float(x) for x in values), stale)
        self.metrics.record_out(time.monotonic() - arrival_wall, primary_out)
        self._post(encode_broadcast(rec))

    def _handle_control(self, msg: ControlMessage, sub: _Subscriber, seq: int) -> None:
        kind = msg.kind
        try:
            data = None
            if kind == "set_character":
                char = msg.args["char"]
                if char not in self.pipeline.character_ids:
                    raise ValidationError(f"unknown character {char!r}")
                self.active_character = char
            elif kind == "recalibrate":
                n = int(msg.args.get("frames", RECAL_WINDOW))
                self._recal_frames = []
                self._recal_remaining = n
                data = {"frames": n}
            elif kind == "set_params":
                if "target_fps" in msg.args:
                    self.pipeline.config.target_fps = float(msg.args["target_fps"])
                if "stale_timeout" in msg.args:
                    self.pipeline.config.stale_timeout = float(msg.args["stale_timeout"])
            elif kind == "subscribe":
                sub.subscribed = True
            elif kind == "list_characters":
                data = {"characters": self.pipeline.character_ids,
                        "active": self.active_character}
            sub.send_line(encode_ack(Ack(True, kind, seq, data=data)))
        except (MienCapError, KeyError, TypeError, ValueError) as e:
            sub.send_line(encode_ack(Ack(False, kind, seq, error=str(e))))

    def _post(self, line: str) -> None:
        while True:
            try:
                self._broadcast_queue.put_nowait(line)
                return
            except queue.Full:
                try:
                    self._broadcast_queue.get_nowait()
                except queue.Empty:
                    pass

    # --- stage 3: broadcast ---

    def _run_broadcast(self) -> None:
        while not self._stop.is_set():
            try:
                line = self._broadcast_queue.get(timeout=_POLL)
            except queue.Empty:
                continue
            with self._sub_lock:
                subs = list(self._subscribers)
            for sub in subs:
                if not sub.subscribed:
                    continue
                if not sub.alive or not sub.send_line(line):
                    log.warning("disconnecting slow subscriber %d", sub.id)
                    sub.close()
                    with self._sub_lock:
                        if sub in self._subscribers:
                            self._subscribers.remove(sub)

    # --- control-port connection handling ---

    def _accept_control(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._control_sock.accept()
            except OSError:
                return
            log.info("control connection from %s", addr)
            t = threading.Thread(target=self._speak_control, args=(conn,),
                                 daemon=True, name="miencap-control-conn")
            t.start()

    def _speak_control(self, conn: socket.socket) -> None:
        try:
            first = conn.recv(1, socket.MSG_PEEK)
        except OSError:
            conn.close()
            return
        if not first:
            conn.close()
            return
        if first == b"{":
            self._serve_raw(conn)
        else:
            self._serve_http(conn)

    def _register(self, sub: _Subscriber) -> None:
        with self._sub_lock:
            self._subscribers.append(sub)

    def _unregister(self, sub: _Subscriber) -> None:
        with self._sub_lock:
            if sub in self._subscribers:
                self._subscribers.remove(sub)
        sub.close()

    def _serve_raw(self, conn: socket.socket) -> None:
        sub = _Subscriber(conn, "raw")
        self._register(sub)
        seq = 0
        buf = bytearray()
        try:
            while not self._stop.is_set() and sub.alive:
                try:
                    data = conn.recv(65536)
                except OSError:
                    break
                if not data:
                    break
                buf.extend(data)
                while True:
                    nl = buf.find(b"\n")
                    if nl < 0:
                        break
                    line = bytes(buf[:nl]).strip()
                    del buf[:nl + 1]
                    if not line:
                        continue
                    seq += 1
                    self._dispatch_control_line(line, sub, seq)
        finally:
            self._unregister(sub)

    def _dispatch_control_line(self, line: bytes, sub: _Subscriber, seq: int) -> None:
        try:
            msg = parse_control(line)
        except (FormatError, ValidationError) as e:
            log.warning("rejected malformed control: %s", e)
            sub.send_line(encode_ack(Ack(False, "invalid", seq, error=str(e))))
            return
        self._enqueue(("control", msg, sub, seq))

    def _serve_http(self, conn: socket.socket) -> None:
        try:
            head = b""
            while b"\r\n\r\n" not in head and len(head) < 16384:
                data = conn.recv(4096)
                if not data:
                    break
                head += data
        except OSError:
            conn.close()
            return
        if b"\r\n\r\n" not in head:
            conn.close()
            return
        header_blob, _, rest = head.partition(b"\r\n\r\n")
        lines = header_blob.decode("latin-1").split("\r\n")
        request = lines[0].split()
        headers = {}
        for h in lines[1:]:
            k, _, v = h.partition(":")
            headers[k.strip().lower()] = v.strip()
        if len(request) < 2 or request[0] != "GET":
            conn.sendall(b"HTTP/1.1 405 Method Not Allowed\r\nContent-Length: 0\r\n\r\n")
            conn.close()
            return
        if headers.get("upgrade", "").lower() == "websocket":
            key = headers.get("sec-websocket-key", "")
            if not key:
                conn.sendall(b"HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\n\r\n")
                conn.close()
                return
            conn.sendall(ws_handshake_response(key))
            self._serve_ws(conn, rest)
            return
        self._serve_static(conn, request[1])

    def _serve_ws(self, conn: socket.socket, pending: bytes) -> None:
        sub = _Subscriber(conn, "ws")
        self._register(sub)
        decoder = WSDecoder()
        seq = 0
        try:
            data = pending
            while not self._stop.is_set() and sub.alive:
                if data:
                    try:
                        messages = decoder.feed(data)
                    except FormatError as e:
                        log.warning("websocket protocol error: %s", e)
                        break
                    for opcode, payload in messages:
                        if opcode == 0x8:
                            try:
                                conn.sendall(ws_encode_close())
                            except OSError:
                                pass
                            return
                        if opcode == 0x9:
                            try:
                                conn.sendall(ws_encode_pong(payload))
                            except OSError:
                                pass
                            continue
                        if opcode != 0x1:
                            continue
                        seq += 1
                        self._dispatch_control_line(payload, sub, seq)
                try:
                    data = conn.recv(65536)
                except OSError:
                    break
                if not data:
                    break
        finally:
            self._unregister(sub)

    _CONTENT_TYPES = {
        ".html": "text/html; charset=utf-8",
        ".js": "text/javascript; charset=utf-8",
        ".css": "text/css; charset=utf-8",
        ".json": "application/json",
        ".svg": "image/svg+xml",
        ".map": "application/json",
    }

    def _serve_static(self, conn: socket.socket, target: str) -> None:
        with conn:
            body, ctype, status = b"not found", "text/plain", "404 Not Found"
            if self.config.static_dir is not None:
                root = Path(self.config.static_dir).resolve()
                rel = target.split("?", 1)[0].lstrip("/") or "index.html"
                candidate = (root / rel).resolve()
                if root in candidate.parents or candidate == root:
                    if candidate.is_dir():
                        candidate = candidate / "index.html"
                    if candidate.is_file():
                        body = candidate.read_bytes()
                        ctype = self._CONTENT_TYPES.get(candidate.suffix,
                                                        "application/octet-stream")
                        status = "200 OK"
            head = (f"HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\n"
                    f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n")
            try:
                conn.sendall(head.encode("latin-1") + body)
            except OSError:
                pass


def serve(pipeline: RetargetPipeline, config: ServiceConfig) -> RetargetService:
    """Start a service; caller owns its lifetime (run_forever or shutdown)."""
    svc = RetargetService(pipeline, config)
    svc.start()
    return svc


def replay_through_pipeline(frames, pipeline: RetargetPipeline, fps: float,
                            emit, character: str | None = None) -> int:
    """Pace frames through a pipeline, calling emit(record) per output.

    fps = 0 runs as fast as possible. Record mode: nothing is ever dropped.
    """
    char = character or pipeline.primary_rig.id
    if char not in pipeline.character_ids:
        raise ValidationError(f"unknown character {char!r}")
    count = 0
    start = time.monotonic()
    for i, frame in enumerate(frames):
        if fps > 0:
            target = start + i / fps
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        out = pipeline.retarget_step(frame)
        if char != pipeline.primary_rig.id:
            out = pipeline.fan_out(out)[char]
        emit(BroadcastRecord(float(frame.timestamp), char,
                             tuple(float(x) for x in out.values), False))
        count += 1
    return count


def feed_frames(frames, host: str, port: int, fps: float) -> int:
    """Act as a tracker: send raw ingestion records to a service socket."""
    from .wire import encode_frame

    count = 0
    with socket.create_connection((host, port)) as s:
        start = time.monotonic()
        for i, frame in enumerate(frames):
            if fps > 0:
                target = start + i / fps
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            s.sendall(encode_frame(frame).encode("utf-8") + b"\n")
            count += 1
    return count
