"""Mock-sidecar equivalence: a refine run against /v1/grad must match the
engine's local analytic run at every checkpoint (float32 transport budget).

The engine is driven only through its external interfaces: the CLI, the
target-image files, and the checkpoint file format.
"""

import json
import socket
import struct
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import requests

CUBE_OBJ = """\
v -1 -1 -1
v 1 -1 -1
v 1 1 -1
v -1 1 -1
v -1 -1 1
v 1 -1 1
v 1 1 1
v -1 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def read_bdf(path):
    """Minimal reader for the engine's checkpoint format."""
    blob = Path(path).read_bytes()
    assert blob[:4] == b"BDF1"
    rx, ry, rz, flags = struct.unpack_from("<IIII", blob, 4)
    assert flags == 0
    nvox = rx * ry * rz
    off = 4 + 16 + 48
    density = np.frombuffer(blob, dtype="<f4", count=nvox, offset=off)
    color = np.frombuffer(blob, dtype="<f4", count=3 * nvox, offset=off + 4 * nvox)
    return density, color


def free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def wait_healthy(endpoint, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        try:
            resp = requests.get(f"{endpoint}/v1/health", timeout=2)
            if resp.status_code == 200:
                return resp.json()
        except requests.RequestException:
            pass
        time.sleep(0.2)
    raise RuntimeError("sidecar did not become healthy")


def run_engine(args, cwd):
    proc = subprocess.run(
        [sys.executable, "-m", "boostdream.cli", *args],
        capture_output=True, text=True, cwd=cwd, timeout=600,
    )
    assert proc.returncode == 0, f"engine failed:\n{proc.stdout}\n{proc.stderr}"
    return proc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("equiv")
    mesh = root / "cube.obj"
    mesh.write_text(CUBE_OBJ)

    # target views: float32-valued so both sides hold bit-identical targets
    targets = root / "targets"
    targets.mkdir()
    rng = np.random.default_rng(31)
    for i in range(4):
        view = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        np.save(targets / f"view_{i}.npy", view)

    cfg = {
        "mesh": str(mesh),
        "prompt": "an equivalence probe",
        "seed": 11,
        "resolution": 12,
        "per_view_size": 16,
        "n_samples": 12,
        "distill_iters": 2,
        "boost_iters": 6,
        "self_boost_iters": 6,
        "orient_weight": 0.0,
        "opacity_weight": 0.0,
        "turntable_frames": 1,
        "rig_mode": "fixed",
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    return root, cfg_path, targets


@pytest.fixture(scope="module")
def sidecar(workspace):
    root, _, targets = workspace
    port = free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "boostdream_sidecar",
         "--mode", "mock", "--target", str(targets), "--port", str(port)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE,
    )
    endpoint = f"http://127.0.0.1:{port}"
    try:
        info = wait_healthy(endpoint)
        assert info == {"status": "ok", "mode": "mock"}
        yield endpoint
    finally:
        proc.terminate()
        proc.wait(timeout=10)


class TestMockEquivalence:
    def test_checkpoints_match_local_run(self, workspace, sidecar):
        root, cfg_path, targets = workspace
        local_out = root / "local"
        remote_out = root / "remote"
        run_engine([
            "refine", "--config", str(cfg_path), "--backend", "analytic",
            "--target-dir", str(targets), "--out", str(local_out),
        ], cwd=root)
        run_engine([
            "refine", "--config", str(cfg_path), "--backend", "remote",
            "--endpoint", sidecar, "--out", str(remote_out),
        ], cwd=root)

        for tag in ("distilled", "boost", "final"):
            d_local, c_local = read_bdf(local_out / f"field_{tag}.bdf")
            d_remote, c_remote = read_bdf(remote_out / f"field_{tag}.bdf")
            assert np.abs(d_local.astype(np.float64) - d_remote).max() < 1e-6, tag
            assert np.abs(c_local.astype(np.float64) - c_remote).max() < 1e-6, tag

        # both runs log the same timesteps (same per-request seeds)
        def timesteps(out):
            lines = (out / "metrics.jsonl").read_text().splitlines()
            return [json.loads(l)["t_used"] for l in lines if json.loads(l)["stage"] != "distill"]

        assert timesteps(local_out) == timesteps(remote_out)

    def test_remote_run_required_sidecar(self, workspace):
        root, cfg_path, _ = workspace
        proc = subprocess.run(
            [sys.executable, "-m", "boostdream.cli", "refine",
             "--config", str(cfg_path), "--backend", "remote",
             "--endpoint", "http://127.0.0.1:9",
             "--out", str(root / "down")],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 1
