import json
import socket
import struct
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from hmdref.bench import PARAMS, Algorithm, seed_pipeline_from_params
from hmdref.errors import BadFrame
from hmdref.geom import PointCloud
from hmdref.icp import SeedPose
from hmdref.pipeline import reference_from_seed
from hmdref.scene_synth import desk_scene, synthesize_scene, truth_seed
from hmdref.service import (
    MAGIC,
    ReferenceRequest,
    ReferenceServer,
    Status,
    decode_request,
    request,
    seed_from_quaternion,
    seed_to_quaternion,
    send_raw,
)


@pytest.fixture(scope="module")
def server(model):
    srv = ReferenceServer(("127.0.0.1", 0), model)
    srv.start_background()
    yield srv
    srv.stop()


@pytest.fixture(scope="module")
def scene():
    return synthesize_scene(desk_scene(0))


def in_process(cloud, model, seed):
    """What the server should compute: float32 points, seed decoded from the wire."""
    pts = np.asarray(cloud.points, dtype=np.float32).astype(np.float64)
    wire_seed = seed_from_quaternion(seed_to_quaternion(seed))
    return reference_from_seed(PointCloud(pts), model, wire_seed, seed_pipeline_from_params(PARAMS[Algorithm.ICP]))


def test_seed_quaternion_roundtrip():
    for yaw in np.linspace(-3.1, 3.1, 13):
        s = SeedPose((1.0, -2.0, 0.5), yaw)
        back = seed_from_quaternion(seed_to_quaternion(s))
        assert back.position == s.position
        assert abs(back.yaw - s.yaw) < 1e-12


def test_seed_quaternion_validation():
    with pytest.raises(BadFrame):
        seed_from_quaternion([0, 0, 0, 0, 0, 0, 0])
    with pytest.raises(BadFrame):
        seed_from_quaternion([0, 0, 0, 0, 0, 1])
    with pytest.raises(BadFrame):
        seed_from_quaternion([0, 0, float("nan"), 0, 0, 0, 1])


def test_frame_layout():
    cloud = PointCloud(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    data = ReferenceRequest(Algorithm.ICP, SeedPose(), cloud).encode()
    assert data[:4] == MAGIC == bytes.fromhex("52454631")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    assert header["n_points"] == 2 and header["version"] == 1 and len(header["seed"]) == 7
    payload = np.frombuffer(data[8 + hlen :], dtype="<f4")
    np.testing.assert_array_equal(payload, [1, 2, 3, 4, 5, 6])


def test_decode_rejects_bad_headers():
    ok = {"version": 1, "algorithm": "icp", "seed": [0, 0, 0, 0, 0, 0, 1], "n_points": 0}
    decode_request(ok, b"")
    for bad in (
        dict(ok, version=2),
        dict(ok, algorithm="sift"),
        dict(ok, seed="x"),
        dict(ok, config={"delta": 0.1}),
        dict(ok, config=[1]),
    ):
        with pytest.raises(BadFrame):
            decode_request(bad, b"")
    nan = np.array([[np.nan, 0, 0]], dtype="<f4").tobytes()
    with pytest.raises(BadFrame):
        decode_request(dict(ok, n_points=1), nan)


def test_roundtrip_matches_in_process(server, scene, model):
    cloud, truth = scene
    seed = truth_seed(truth)
    seed = SeedPose(np.asarray(seed.position) + [0.05, -0.04, 0.0], seed.yaw + 0.2)
    resp = request("127.0.0.1", server.port, ReferenceRequest(Algorithm.ICP, seed, cloud))
    assert resp.status is Status.OK
    ref = in_process(cloud, model, seed)
    assert np.array_equal(resp.transform.matrix(), ref.transform.matrix())
    assert resp.rms_mm == ref.rms_mm


def test_truncated_payload(server, scene):
    data = ReferenceRequest(Algorithm.ICP, SeedPose(), scene[0]).encode()
    resp = send_raw("127.0.0.1", server.port, data[: len(data) - 100])
    assert resp.status is Status.ERROR and resp.error_code == "BAD_FRAME"


@pytest.mark.parametrize(
    "data",
    [b"", b"GET / HTTP/1.1\r\n\r\n", MAGIC + struct.pack("<I", 5) + b"{nope", MAGIC + struct.pack("<I", 1 << 30)],
)
def test_junk_never_crashes(server, scene, model, data):
    resp = send_raw("127.0.0.1", server.port, data)
    assert resp.status is Status.ERROR and resp.error_code == "BAD_FRAME"
    # still serving
    ok = request("127.0.0.1", server.port, ReferenceRequest(Algorithm.ICP, truth_seed(scene[1]), scene[0]))
    assert ok.status is Status.OK


def test_empty_cloud(server):
    resp = request("127.0.0.1", server.port, ReferenceRequest(Algorithm.ICP, SeedPose(), PointCloud(np.empty((0, 3)))))
    assert resp.status is Status.ERROR and resp.error_code == "EmptyCloud"
    assert resp.transform is None


def test_library_error_code(server, scene):
    far = SeedPose((50.0, 50.0, 0.0), 0.0)
    resp = request("127.0.0.1", server.port, ReferenceRequest(Algorithm.ICP, far, scene[0]))
    assert resp.status is Status.ERROR and resp.error_code in ("EmptyCloud", "NoCorrespondences")


def test_bad_config_value(server, scene):
    req = ReferenceRequest(Algorithm.ICP, truth_seed(scene[1]), scene[0], {"max_iter": -3})
    resp = request("127.0.0.1", server.port, req)
    assert resp.status is Status.ERROR and resp.error_code == "BadConfig"


def test_concurrent_matches_serial(server, scene, model):
    cloud, truth = scene
    rng = np.random.default_rng(5)
    base = truth_seed(truth)
    seeds = [SeedPose(np.asarray(base.position) + rng.normal(0, 0.05, 3) * [1, 1, 0], base.yaw + rng.normal(0, 0.1)) for _ in range(8)]
    reqs = [ReferenceRequest(Algorithm.ICP, s, cloud) for s in seeds]
    serial = [request("127.0.0.1", server.port, r) for r in reqs]
    with ThreadPoolExecutor(8) as ex:
        parallel = list(ex.map(lambda r: request("127.0.0.1", server.port, r), reqs))
    for a, b in zip(serial, parallel):
        assert a.status is b.status is Status.OK
        assert np.array_equal(a.transform.matrix(), b.transform.matrix())


def test_graceful_stop_finishes_in_flight(model, scene):
    srv = ReferenceServer(("127.0.0.1", 0), model)
    srv.start_background()
    cloud, truth = scene
    with ThreadPoolExecutor(1) as ex:
        fut = ex.submit(request, "127.0.0.1", srv.port, ReferenceRequest(Algorithm.ICP, truth_seed(truth), cloud))
        # wait for the connection to be accepted before stopping
        time.sleep(0.2)
        srv.stop()
        assert fut.result(timeout=60).status is Status.OK
    with pytest.raises(OSError):
        socket.create_connection(("127.0.0.1", srv.port), timeout=1).close()
