"""TCP referencing service: one framed request and one framed response per connection.

Frame layout (requests and responses alike)::

    b"REF1" | u32 LE header length | UTF-8 JSON header | N x 3 float32 LE

Request header keys: ``version`` (1), ``algorithm`` (icp | fourpcs |
slidebox), ``seed`` (px, py, pz, qx, qy, qz, qw), ``n_points`` and an
optional ``config`` mapping of parameter overrides. Response headers carry
``status`` (OK | ERROR), ``transform`` (16 row-major numbers), ``rms_mm``,
``error_code``, ``message``, ``server_time_ms`` and ``n_points`` = 0.

JSON floats are written with the shortest round-trip repr, so a transform
crosses the wire without losing a bit.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .bench import PARAMS, Algorithm, run_one
from .errors import BadFrame, EmptyCloud, ReferencingError
from .geom import PointCloud, RigidTransform
from .icp import SeedPose
from .scene_synth import robot_model_cloud

log = logging.getLogger(__name__)

MAGIC = b"REF1"
PROTOCOL_VERSION = 1
DEFAULT_PORT = 40411
MAX_HEADER = 1 << 20
MAX_POINTS = 10_000_000  # 120 MB payload cap per connection
READ_TIMEOUT_S = 30.0
DRAIN_TIMEOUT_S = 2.0
_LEN = struct.Struct("<I")


class Status(enum.Enum):
    OK = "OK"
    ERROR = "ERROR"


def seed_from_quaternion(values) -> SeedPose:
    """Position plus the heading of the quaternion's rotated x axis."""
    v = [float(x) for x in values]
    if len(v) != 7 or not all(math.isfinite(x) for x in v):
        raise BadFrame("seed must be 7 finite numbers")
    q = v[3:]
    if np.linalg.norm(q) == 0:
        raise BadFrame("seed quaternion is zero")
    R = Rotation.from_quat(q).as_matrix()
    return SeedPose(v[:3], float(np.arctan2(R[1, 0], R[0, 0])))


def seed_to_quaternion(seed: SeedPose) -> list[float]:
    h = 0.5 * seed.yaw
    return [*seed.position, 0.0, 0.0, math.sin(h), math.cos(h)]


@dataclass
class ReferenceRequest:
    algorithm: Algorithm
    seed: SeedPose
    cloud: PointCloud
    config: dict = field(default_factory=dict)
    version: int = PROTOCOL_VERSION

    def encode(self) -> bytes:
        pts = np.ascontiguousarray(self.cloud.points, dtype="<f4")
        header = {
            "version": self.version,
            "algorithm": self.algorithm.value,
            "seed": seed_to_quaternion(self.seed),
            "n_points": len(pts),
            "config": self.config,
        }
        return _frame(header, pts.tobytes())


@dataclass
class ReferenceResponse:
    status: Status
    transform: RigidTransform | None = None
    rms_mm: float = math.nan
    error_code: str = ""
    message: str = ""
    server_time_ms: float = 0.0

    def encode(self) -> bytes:
        header = {
            "status": self.status.value,
            "transform": None if self.transform is None else [float(x) for x in self.transform.matrix().ravel()],
            "rms_mm": self.rms_mm if math.isfinite(self.rms_mm) else None,
            "error_code": self.error_code,
            "message": self.message,
            "server_time_ms": self.server_time_ms,
            "n_points": 0,
        }
        return _frame(header, b"")

    @classmethod
    def from_header(cls, h: dict) -> "ReferenceResponse":
        t = h.get("transform")
        rms = h.get("rms_mm")
        return cls(
            Status(h["status"]),
            None if t is None else RigidTransform.from_matrix(np.array(t, dtype=np.float64)),
            math.nan if rms is None else float(rms),
            h.get("error_code", ""),
            h.get("message", ""),
            float(h.get("server_time_ms", 0.0)),
        )

    @classmethod
    def error(cls, exc: ReferencingError, elapsed_ms: float = 0.0) -> "ReferenceResponse":
        return cls(Status.ERROR, error_code=exc.code, message=str(exc), server_time_ms=elapsed_ms)


def _frame(header: dict, payload: bytes) -> bytes:
    h = json.dumps(header, allow_nan=False, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(h)) + h + payload


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise BadFrame(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[dict, bytes]:
    """Read one frame; returns ``(header, payload)``. Raises BadFrame on any defect."""
    try:
        if _read_exact(sock, 4) != MAGIC:
            raise BadFrame("bad magic")
        (hlen,) = _LEN.unpack(_read_exact(sock, 4))
        if hlen > MAX_HEADER:
            raise BadFrame(f"header of {hlen} bytes exceeds {MAX_HEADER}")
        try:
            header = json.loads(_read_exact(sock, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadFrame(f"header is not valid JSON: {exc}") from None
        if not isinstance(header, dict):
            raise BadFrame("header must be a JSON object")
        n = header.get("n_points", 0)
        if not isinstance(n, int) or isinstance(n, bool) or not 0 <= n <= MAX_POINTS:
            raise BadFrame("n_points must be an integer in range")
        return header, _read_exact(sock, 12 * n)
    except socket.timeout:
        raise BadFrame("timed out reading frame") from None


def decode_request(header: dict, payload: bytes, default_algorithm: Algorithm = Algorithm.ICP) -> ReferenceRequest:
    """Validate a request frame. A header without ``algorithm`` gets the server default."""
    if header.get("version") != PROTOCOL_VERSION:
        raise BadFrame(f"unsupported protocol version {header.get('version')!r}")
    try:
        alg = Algorithm(header.get("algorithm", default_algorithm.value))
    except ValueError:
        raise BadFrame(f"unknown algorithm {header.get('algorithm')!r}") from None
    seed = header.get("seed")
    if not isinstance(seed, list):
        raise BadFrame("seed must be a list of 7 numbers")
    try:
        pose = seed_from_quaternion(seed)
    except (TypeError, ValueError) as exc:
        raise BadFrame(f"bad seed: {exc}") from None
    cfg = header.get("config") or {}
    if not isinstance(cfg, dict):
        raise BadFrame("config must be a mapping")
    unknown = set(cfg) - set(PARAMS[alg])
    if unknown:
        raise BadFrame(f"unknown config keys for {alg.value}: {sorted(unknown)}")
    pts = np.frombuffer(payload, dtype="<f4").reshape(-1, 3).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise BadFrame("non-finite coordinates")
    return ReferenceRequest(alg, pose, PointCloud(pts), dict(cfg))


def process(req: ReferenceRequest, model: PointCloud, defaults: dict | None = None) -> ReferenceResponse:
    """Run the request in-process. Library errors become ERROR responses."""
    t0 = time.perf_counter()
    try:
        if len(req.cloud) == 0:
            raise EmptyCloud("request carries no points")
        p = dict(PARAMS[req.algorithm])
        p.update((defaults or {}).get(req.algorithm.value, {}))
        p.update(req.config)
        res = run_one(req.algorithm, p, req.cloud, model, req.seed)
    except ReferencingError as exc:
        return ReferenceResponse.error(exc, (time.perf_counter() - t0) * 1000.0)
    except (ValueError, TypeError, KeyError) as exc:
        # bad override values surface as configuration errors
        return ReferenceResponse(Status.ERROR, error_code="BadConfig", message=str(exc), server_time_ms=(time.perf_counter() - t0) * 1000.0)
    return ReferenceResponse(Status.OK, res.transform, float(res.rms_mm), server_time_ms=(time.perf_counter() - t0) * 1000.0)


class _Handler(socketserver.BaseRequestHandler):
    server: "ReferenceServer"

    def handle(self):
        sock: socket.socket = self.request
        sock.settimeout(READ_TIMEOUT_S)
        try:
            header, payload = read_frame(sock)
            req = decode_request(header, payload, self.server.algorithm)
        except BadFrame as exc:
            log.info("bad frame from %s: %s", self.client_address, exc)
            self._send(ReferenceResponse.error(exc))
            return
        self._send(process(req, self.server.model, self.server.defaults))

    def _send(self, resp: ReferenceResponse):
        sock: socket.socket = self.request
        try:
            sock.sendall(resp.encode())
            sock.shutdown(socket.SHUT_WR)
            # closing with unread input would reset the connection before the
            # client reads the reply, so drain until the client hangs up
            sock.settimeout(DRAIN_TIMEOUT_S)
            while sock.recv(1 << 16):
                pass
        except OSError:
            pass  # client went away or stopped sending


class ReferenceServer(socketserver.ThreadingTCPServer):
    """One thread per connection; ``server_close`` waits for in-flight requests."""

    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(
        self,
        address=("127.0.0.1", DEFAULT_PORT),
        model: PointCloud | None = None,
        defaults: dict | None = None,
        algorithm: Algorithm = Algorithm.ICP,
    ):
        self.model = model if model is not None else robot_model_cloud()
        self.defaults = defaults or {}
        self.algorithm = algorithm
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="hmdref-serve", daemon=True)
        t.start()
        return t

    def stop(self):
        self.shutdown()
        self.server_close()


def request(host: str, port: int, req: ReferenceRequest, timeout: float = 120.0) -> ReferenceResponse:
    """Client side: send ``req`` and wait for the response."""
    return send_raw(host, port, req.encode(), timeout)


def send_raw(host: str, port: int, data: bytes, timeout: float = 120.0) -> ReferenceResponse:
    with socket.create_connection((host, port), timeout=timeout) as s:
        try:
            s.sendall(data)
            s.shutdown(socket.SHUT_WR)
        except OSError:
            pass  # the server may reject a bad frame early; its reply is still readable
        header, _ = read_frame(s)
    return ReferenceResponse.from_header(header)
