"""Session host: one client per connection, LBWP framing over two
transports.

A connection runs three loops. The reader turns socket bytes into
messages and pushes them onto queues; the generation loop owns the
session, drains up to chunk_len actions per tick (hold-to-repeat when
starved), applies control messages only at chunk boundaries, and emits
FRAME messages; the writer drains the egress queues. Frames past a
64-frame egress budget drop oldest-first and are counted. The same port
accepts raw LBWP byte streams and WebSocket clients ('GET ' vs 'LBWP' in
the first bytes); the wire payload is identical either way.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

from lbw.checkpoint import load_module
from lbw.diffusion import TARGET_TS
from lbw.inference import (
    SessionConfig,
    pad_actions,
    reset_session,
    session_stats,
    start_session,
    stream_chunk,
    swap_prompt,
)
from lbw.model import WorldModel
from lbw import protocol as pr
from lbw.world import ActionState

log = logging.getLogger("lbw.server")

_WS_GUID = b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8765  # 0 binds an ephemeral port
    fps: float = 8.0
    cache_chunks: int | None = None
    prompt: str = ""
    seed: int = 0
    ts: tuple = TARGET_TS
    egress_budget: int = 64  # frames held for a slow client before dropping
    error_cap: int = 32  # malformed frames tolerated before disconnect


# ---------------------------------------------------------------------------
# transports: both deliver/accept raw LBWP bytes


class _RawTransport:
    def __init__(self, sock: socket.socket, preread: bytes):
        self.sock = sock
        self._pre = preread

    def recv(self) -> bytes:
        if self._pre:
            out, self._pre = self._pre, b""
            return out
        return self.sock.recv(65536)

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def close(self) -> None:
        self.sock.close()


class _WebSocketTransport:
    """Minimal RFC 6455 server endpoint carrying LBWP frames as binary
    messages. Client frames must be masked; fragmentation is reassembled;
    ping is answered; anything else textual is ignored."""

    def __init__(self, sock: socket.socket, preread: bytes):
        self.sock = sock
        self.buf = bytearray(preread)
        self.closed = False
        self._handshake()
        self._fragments = b""

    def _read_more(self) -> bool:
        data = self.sock.recv(65536)
        if not data:
            self.closed = True
            return False
        self.buf += data
        return True

    def _handshake(self) -> None:
        while b"\r\n\r\n" not in self.buf:
            if not self._read_more():
                raise ConnectionError("client left during websocket handshake")
        head, _, rest = bytes(self.buf).partition(b"\r\n\r\n")
        self.buf = bytearray(rest)
        key = None
        for line in head.split(b"\r\n")[1:]:
            name, _, value = line.partition(b":")
            if name.strip().lower() == b"sec-websocket-key":
                key = value.strip()
        if key is None:
            raise ConnectionError("websocket upgrade without a key")
        accept = base64.b64encode(hashlib.sha1(key + _WS_GUID).digest())
        self.sock.sendall(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n"
        )

    def _next_frame(self):
        """(opcode, payload) of the next complete frame, or None on EOF."""
        while True:
            if len(self.buf) >= 2:
                b0, b1 = self.buf[0], self.buf[1]
                masked = b1 & 0x80
                ln = b1 & 0x7F
                off = 2
                if ln == 126:
                    if len(self.buf) >= 4:
                        (ln,) = struct.unpack_from(">H", self.buf, 2)
                        off = 4
                    else:
                        ln = None
                elif ln == 127:
                    if len(self.buf) >= 10:
                        (ln,) = struct.unpack_from(">Q", self.buf, 2)
                        off = 10
                    else:
                        ln = None
                if ln is not None:
                    need = off + (4 if masked else 0) + ln
                    if len(self.buf) >= need:
                        if masked:
                            mask = self.buf[off:off + 4]
                            raw = bytes(b ^ mask[i % 4] for i, b in enumerate(self.buf[off + 4:need]))
                        else:
                            raw = bytes(self.buf[off:need])
                        del self.buf[:need]
                        return b0, raw
            if self.closed or not self._read_more():
                return None

    def recv(self) -> bytes:
        while True:
            got = self._next_frame()
            if got is None:
                return b""
            b0, payload = got
            op = b0 & 0x0F
            if op == 0x8:  # close
                self.closed = True
                return b""
            if op == 0x9:  # ping
                self.send_raw(0x0A, payload)
                continue
            if op in (0x0, 0x1, 0x2):
                self._fragments += payload
                if b0 & 0x80:  # FIN
                    out, self._fragments = self._fragments, b""
                    if out:
                        return out

    def send_raw(self, opcode: int, payload: bytes) -> None:
        head = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            head += bytes([n])
        elif n < 2**16:
            head += bytes([126]) + struct.pack(">H", n)
        else:
            head += bytes([127]) + struct.pack(">Q", n)
        self.sock.sendall(head + payload)

    def send(self, data: bytes) -> None:
        self.send_raw(0x2, data)

    def close(self) -> None:
        try:
            self.send_raw(0x8, b"")
        except OSError:
            pass
        self.sock.close()


# ---------------------------------------------------------------------------
# per-connection state machine


class _Connection:
    def __init__(self, student: WorldModel, cfg: ServeConfig, sock: socket.socket, stop: threading.Event):
        self.cfg = cfg
        self.server_stop = stop
        self.done = threading.Event()
        self.wake = threading.Condition()
        self.ingress = deque()  # ActionStates from the reader
        self.control = deque()  # Prompt / Reset / StatsRequest
        self.frames_out = deque(maxlen=cfg.egress_budget)
        self.control_out = deque()  # replies, never dropped
        self.dropped = 0
        self.errors = 0
        self.last_action = ActionState()
        sock.settimeout(0.2)
        preread = self._peek(sock)
        if preread.startswith(b"GET "):
            self.transport = _WebSocketTransport(sock, preread)
        else:
            self.transport = _RawTransport(sock, preread)
        scfg = SessionConfig(fps=cfg.fps, ts=cfg.ts, cache_chunks=cfg.cache_chunks)
        self.session = start_session(student, cfg.prompt, cfg.seed, scfg)

    def _peek(self, sock: socket.socket) -> bytes:
        # websocket clients open with an HTTP request; a raw client may
        # say nothing at all, so give up quickly and assume raw
        deadline = time.monotonic() + 1.0
        while not self.server_stop.is_set() and time.monotonic() < deadline:
            try:
                return sock.recv(4096)
            except socket.timeout:
                continue
        return b""

    def _emit_frames(self, frames, chunk_idx: int) -> None:
        with self.wake:
            for i in range(frames.shape[0]):
                if len(self.frames_out) == self.frames_out.maxlen:
                    self.dropped += 1
                msg = pr.Frame(chunk_idx, i, frames.shape[1], frames.shape[2], frames[i].tobytes())
                self.frames_out.append(pr.encode(msg))
            self.wake.notify()

    def _reply(self, msg) -> None:
        with self.wake:
            self.control_out.append(pr.encode(msg))
            self.wake.notify()

    def _stats_payload(self) -> dict:
        data = session_stats(self.session)
        data["dropped_frames"] = self.dropped
        data["protocol_errors"] = self.errors
        return data

    # reader: socket -> queues
    def _read_loop(self) -> None:
        dec = pr.Decoder()
        try:
            while not self.done.is_set() and not self.server_stop.is_set():
                try:
                    data = self.transport.recv()
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not data:
                    break
                try:
                    msgs = dec.feed(data)
                except pr.ProtocolError as e:
                    msgs = e.decoded
                    self.errors += 1
                    self._reply(pr.ErrorReply(e.code, e.detail))
                    if e.consumed == 0 or self.errors >= self.cfg.error_cap:
                        self._dispatch(msgs)
                        log.warning("dropping client after %d protocol errors (%s)", self.errors, e.code)
                        break
                self._dispatch(msgs)
        finally:
            self.done.set()
            with self.wake:
                self.wake.notify()

    def _dispatch(self, msgs) -> None:
        for msg in msgs:
            if isinstance(msg, pr.Action):
                try:
                    act = ActionState(msg.keys, msg.yaw_delta, msg.pitch_delta, msg.timestamp)
                except ValueError as e:
                    self.errors += 1
                    self._reply(pr.ErrorReply("bad_action", str(e)))
                    continue
                self.ingress.append(act)
            elif isinstance(msg, (pr.Prompt, pr.Reset, pr.StatsRequest)):
                self.control.append(msg)
            else:  # FRAME/STATS/ERROR flowing upstream makes no sense
                self.errors += 1
                self._reply(pr.ErrorReply("unexpected_type", type(msg).__name__))

    # generation loop: queues -> frames, control at chunk boundaries only
    def _generate_loop(self) -> None:
        chunk_len = self.session.student.cfg.chunk_len
        self._emit_frames(self.session.primer, 0)
        next_tick = time.perf_counter()
        while not self.done.is_set() and not self.server_stop.is_set():
            while self.control:
                msg = self.control.popleft()
                if isinstance(msg, pr.Prompt):
                    swap_prompt(self.session, msg.text)
                    self._reply(pr.Stats({"ack": "prompt", "prompt": msg.text}))
                elif isinstance(msg, pr.Reset):
                    reset_session(self.session)
                    self._reply(pr.Stats({"ack": "reset", "chunk": 0}))
                    self._emit_frames(self.session.primer, 0)
                    next_tick = time.perf_counter()
                else:
                    self._reply(pr.Stats(self._stats_payload()))
            acts = []
            while self.ingress and len(acts) < chunk_len:
                acts.append(self.ingress.popleft())
            if acts:
                self.last_action = acts[-1]
            else:
                acts = [self.last_action]  # starvation: hold the last input
            frames = stream_chunk(self.session, pad_actions(acts, chunk_len))
            self.session.queue_depth = len(self.ingress)
            self._emit_frames(frames, self.session.chunk_idx - 1)
            next_tick += chunk_len / self.cfg.fps
            delay = next_tick - time.perf_counter()
            if delay > 0:
                self.done.wait(delay)
            else:
                next_tick = time.perf_counter()  # behind schedule, no debt

    # writer: queues -> socket
    def _write_loop(self) -> None:
        try:
            while True:
                with self.wake:
                    while not (self.control_out or self.frames_out):
                        if self.done.is_set() or self.server_stop.is_set():
                            return
                        self.wake.wait(0.1)
                    batch = list(self.control_out) + list(self.frames_out)
                    self.control_out.clear()
                    self.frames_out.clear()
                for data in batch:
                    self.transport.send(data)
        except OSError:
            pass
        finally:
            self.done.set()

    def run(self) -> None:
        threads = [
            threading.Thread(target=self._read_loop, daemon=True),
            threading.Thread(target=self._generate_loop, daemon=True),
        ]
        for t in threads:
            t.start()
        try:
            self._write_loop()
        finally:
            self.done.set()
            for t in threads:
                t.join(timeout=2.0)
            self.transport.close()


# ---------------------------------------------------------------------------
# listener


class Server:
    """Accept loop owning the listening socket; one _Connection per client."""

    def __init__(self, source, config: ServeConfig | None = None):
        self.config = config or ServeConfig()
        if isinstance(source, WorldModel):
            self.student = source
        else:
            self.student, _ = load_module(source, expect_kind="student")
        self.student.eval()
        self.stop = threading.Event()
        self.sock = socket.create_server((self.config.host, self.config.port))
        self.sock.settimeout(0.2)
        self.port = self.sock.getsockname()[1]
        self.thread: threading.Thread | None = None

    def start(self) -> "Server":
        self.thread = threading.Thread(target=self.serve_forever, daemon=True)
        self.thread.start()
        return self

    def serve_forever(self) -> None:
        log.info("listening on %s:%d", self.config.host, self.port)
        try:
            while not self.stop.is_set():
                try:
                    client, addr = self.sock.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                log.info("client %s connected", addr)
                threading.Thread(target=self._run_client, args=(client,), daemon=True).start()
        finally:
            self.sock.close()

    def _run_client(self, client: socket.socket) -> None:
        try:
            _Connection(self.student, self.config, client, self.stop).run()
        except (ConnectionError, OSError) as e:
            log.info("client dropped: %s", e)
            client.close()

    def close(self) -> None:
        self.stop.set()
        if self.thread is not None:
            self.thread.join(timeout=3.0)
