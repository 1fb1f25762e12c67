"""Environment service over a length-prefixed binary protocol.

Frame: ``u32 length (little endian) | u8 opcode | payload``, where ``length``
counts the opcode byte plus the payload. See PROTOCOL.md for payload layouts
and worked examples. One episode per connection; every request gets exactly
one response.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import rle
from .episodes import HORIZON, Action, Dataset, step
from .render import Pose, render_frame

log = logging.getLogger(__name__)

RESET, STEP, TRUTH, CLOSE = 0x01, 0x02, 0x03, 0x04
OBS, ERR = 0x81, 0xFF

ERR_UNKNOWN_OPCODE = 1
ERR_UNKNOWN_EPISODE = 2
ERR_STEP_STATE = 3
ERR_MALFORMED = 4

MAX_FRAME = 1 << 20
_OBS_HEAD = struct.Struct("<HHHhhhhB")


class ProtocolError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(f"ERR {code}: {message}")
        self.code = code
        self.message = message


def encode(opcode: int, payload: bytes = b"") -> bytes:
    return struct.pack("<IB", 1 + len(payload), opcode) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_message(sock: socket.socket) -> tuple[int, bytes] | None:
    """Next (opcode, payload); None on clean EOF. Raises ProtocolError for a
    bad length field."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length == 0 or length > MAX_FRAME:
        raise ProtocolError(ERR_MALFORMED, f"frame length {length} out of range")
    body = _recv_exact(sock, length)
    if body is None:
        return None
    return body[0], body[1:]


def error_payload(code: int, message: str) -> bytes:
    return bytes([code]) + message.encode()


@dataclass
class Observation:
    t: int
    b0: tuple[int, int, int, int]
    done: bool
    rgb: np.ndarray

    def to_bytes(self) -> bytes:
        h, w, _ = self.rgb.shape
        return _OBS_HEAD.pack(self.t, h, w, *self.b0, int(self.done)) + np.ascontiguousarray(self.rgb, np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Observation":
        t, h, w, c0, r0, c1, r1, done = _OBS_HEAD.unpack_from(payload)
        raw = payload[_OBS_HEAD.size:]
        if len(raw) != h * w * 3:
            raise ProtocolError(ERR_MALFORMED, f"raster has {len(raw)} bytes, expected {h * w * 3}")
        return cls(t, (c0, r0, c1, r1), bool(done), np.frombuffer(raw, np.uint8).reshape(h, w, 3).copy())


class Session:
    """Per-connection state machine; pure apart from rendering."""

    def __init__(self, ds: Dataset, horizon: int = HORIZON, truth_splits=("train", "val")):
        self.ds = ds
        self.horizon = horizon
        self.truth_splits = set(truth_splits)
        self._index = {e.id: e for e in ds.episodes}
        self.episode = None
        self.pose: Pose | None = None
        self.t = 0

    @property
    def active(self) -> bool:
        return self.episode is not None and self.t < self.horizon

    def _episode_id(self, payload: bytes) -> str:
        try:
            eid = payload.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError(ERR_MALFORMED, "episode id is not UTF-8") from None
        if not eid:
            raise ProtocolError(ERR_MALFORMED, "empty episode id")
        return eid

    def _obs(self) -> bytes:
        frame = render_frame(self.ds.scenes[self.episode.scene_id], self.pose, self.ds.camera)
        return Observation(self.t, self.episode.b0, self.t >= self.horizon, frame.rgb).to_bytes()

    def handle(self, opcode: int, payload: bytes) -> tuple[int, bytes]:
        try:
            return self._dispatch(opcode, payload)
        except ProtocolError as e:
            return ERR, error_payload(e.code, e.message)

    def _dispatch(self, opcode: int, payload: bytes) -> tuple[int, bytes]:
        if opcode == RESET:
            eid = self._episode_id(payload)
            if self.active:
                raise ProtocolError(ERR_MALFORMED, f"episode {self.episode.id} still running at t={self.t}")
            ep = self._index.get(eid)
            if ep is None:
                raise ProtocolError(ERR_UNKNOWN_EPISODE, f"unknown episode {eid!r}")
            self.episode, self.pose, self.t = ep, ep.spawn, 0
            return OBS, self._obs()
        if opcode == STEP:
            if len(payload) != 1:
                raise ProtocolError(ERR_MALFORMED, f"STEP payload must be 1 byte, got {len(payload)}")
            if payload[0] >= len(Action):
                raise ProtocolError(ERR_MALFORMED, f"action code {payload[0]} out of range")
            if self.episode is None:
                raise ProtocolError(ERR_STEP_STATE, "no episode; send RESET first")
            if self.t >= self.horizon:
                raise ProtocolError(ERR_STEP_STATE, f"episode ended at t={self.t}")
            self.pose = step(self.pose, Action(payload[0]), self.ds.grid(self.episode.scene_id))
            self.t += 1
            return OBS, self._obs()
        if opcode == TRUTH:
            eid = self._episode_id(payload)
            ep = self._index.get(eid)
            if ep is None or ep.split not in self.truth_splits:
                raise ProtocolError(ERR_UNKNOWN_EPISODE, f"no truth available for {eid!r}")
            return TRUTH, json.dumps(truth_record(ep), sort_keys=True).encode()
        if opcode == CLOSE:
            if payload:
                raise ProtocolError(ERR_MALFORMED, "CLOSE takes no payload")
            self.episode, self.pose, self.t = None, None, 0
            return CLOSE, b""
        raise ProtocolError(ERR_UNKNOWN_OPCODE, f"unknown opcode 0x{opcode:02x}")


def truth_record(ep) -> dict:
    t = ep.truth
    return {
        "id": ep.id,
        "category": ep.category,
        "difficulty": ep.difficulty,
        "visibility": t.visibility,
        "amodal_box": list(t.amodal_box),
        "amodal_rle": rle.encode(t.amodal_mask),
        "visible_rle": rle.encode(t.visible_mask),
    }


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        session = Session(srv.dataset, srv.horizon, srv.truth_splits)
        sock = self.request
        while True:
            try:
                msg = read_message(sock)
            except ProtocolError as e:
                sock.sendall(encode(ERR, error_payload(e.code, e.message)))
                return  # framing is lost; drop the connection
            except OSError:
                return
            if msg is None:
                return
            op, reply = session.handle(*msg)
            try:
                sock.sendall(encode(op, reply))
            except OSError:
                return
            if op == CLOSE:
                return


class EnvServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, dataset: Dataset, address=("127.0.0.1", 0), horizon: int = HORIZON, expose_test_truth: bool = False):
        self.dataset = dataset
        self.horizon = horizon
        self.truth_splits = ("train", "val", "test") if expose_test_truth else ("train", "val")
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, daemon=True)
        th.start()
        return th


class EnvClient:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def request(self, opcode: int, payload: bytes = b"") -> tuple[int, bytes]:
        self.sock.sendall(encode(opcode, payload))
        msg = read_message(self.sock)
        if msg is None:
            raise ConnectionError("server closed the connection")
        return msg

    def _checked(self, opcode: int, payload: bytes = b"") -> tuple[int, bytes]:
        op, body = self.request(opcode, payload)
        if op == ERR:
            raise ProtocolError(body[0], body[1:].decode(errors="replace"))
        return op, body

    def reset(self, episode_id: str) -> Observation:
        return Observation.from_bytes(self._checked(RESET, episode_id.encode())[1])

    def step(self, action: int) -> Observation:
        return Observation.from_bytes(self._checked(STEP, bytes([int(action)]))[1])

    def truth(self, episode_id: str) -> dict:
        return json.loads(self._checked(TRUTH, episode_id.encode())[1])

    def close(self) -> None:
        try:
            self._checked(CLOSE)
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        try:
            self.close()
        except (OSError, ProtocolError, ConnectionError):
            self.sock.close()
