import numpy as np
import pytest
from fastapi.testclient import TestClient

from boostdream_sidecar import wire
from boostdream_sidecar.app import create_app
from boostdream_sidecar.mock import MockGuidance


@pytest.fixture
def target():
    return np.random.default_rng(0).uniform(0, 1, (8, 8, 3))


@pytest.fixture
def client(target):
    return TestClient(create_app(MockGuidance(target)))


def grad_body(image, normal=None, seed=0, t=None, w_mode="sigma2"):
    body = {
        "image": wire.encode(image),
        "normal": wire.encode(np.full_like(image, 0.5) if normal is None else normal),
        "prompt": "a toy",
        "lambda": 1.0,
        "s": 7.5,
        "seed": seed,
        "w_mode": w_mode,
    }
    if t is not None:
        body["t"] = t
    return body


class TestHealth:
    def test_ok_mock(self, client):
        resp = client.get("/v1/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "mode": "mock"}

    def test_unknown_route_404(self, client):
        assert client.get("/v1/nope").status_code == 404

    def test_loading_backend_is_503(self, target):
        class NotReady(MockGuidance):
            ready = False

        client = TestClient(create_app(NotReady(target)))
        assert client.get("/v1/health").status_code == 503


class TestEps:
    def test_ideal_denoiser_identity(self, client, target):
        # x_t built from the target itself: eps_cond must equal the draw
        backend = MockGuidance(target)
        t = 500
        ab = backend.alpha_bar[t - 1]
        eps = np.random.default_rng(3).standard_normal(target.shape)
        x_t = np.sqrt(ab) * (2 * target - 1) + np.sqrt(1 - ab) * eps
        resp = client.post("/v1/eps", json={
            "x_t": wire.encode(x_t), "t": t, "prompt": "",
            "lambda": 0.7, "control": wire.encode(np.zeros_like(target)),
            "seed": 1,
        })
        assert resp.status_code == 200
        eps_cond = wire.decode(resp.json()["eps_cond"], "eps_cond")
        assert np.abs(eps_cond - eps).max() < 1e-5  # f32 transport

    def test_control_is_ignored(self, client, target):
        x_t = np.random.default_rng(4).standard_normal(target.shape)
        out = []
        for fill in (0.0, 1.0):
            resp = client.post("/v1/eps", json={
                "x_t": wire.encode(x_t), "t": 300, "prompt": "",
                "lambda": 1.0, "control": wire.encode(np.full_like(target, fill)),
                "seed": 1,
            })
            assert resp.status_code == 200
            out.append(wire.decode(resp.json()["eps_cond"], "eps_cond"))
        assert np.array_equal(out[0], out[1])

    def test_cond_equals_uncond_in_mock(self, client, target):
        x_t = np.random.default_rng(5).standard_normal(target.shape)
        resp = client.post("/v1/eps", json={
            "x_t": wire.encode(x_t), "t": 200, "prompt": "p",
            "lambda": 1.0, "control": wire.encode(np.zeros_like(target)), "seed": 1,
        })
        body = resp.json()
        assert body["eps_cond"] == body["eps_uncond"]

    def test_t_out_of_range_422(self, client, target):
        resp = client.post("/v1/eps", json={
            "x_t": wire.encode(target), "t": 1001, "prompt": "",
            "lambda": 1.0, "control": wire.encode(target), "seed": 1,
        })
        assert resp.status_code == 422

    def test_missing_field_400(self, client, target):
        resp = client.post("/v1/eps", json={"x_t": wire.encode(target), "prompt": ""})
        assert resp.status_code == 400
        assert "t" in resp.json()["error"] or "control" in resp.json()["error"]


class TestGrad:
    def test_fixed_point_zero(self, client, target):
        resp = client.post("/v1/grad", json=grad_body(target.copy(), seed=9))
        assert resp.status_code == 200
        grad = wire.decode(resp.json()["grad"], "grad")
        assert not grad.any()

    def test_deterministic_given_seed(self, client, target):
        image = np.random.default_rng(6).uniform(0, 1, target.shape)
        a = client.post("/v1/grad", json=grad_body(image, seed=42)).json()
        b = client.post("/v1/grad", json=grad_body(image, seed=42)).json()
        assert a == b

    def test_explicit_t_used(self, client, target):
        image = np.random.default_rng(7).uniform(0, 1, target.shape)
        resp = client.post("/v1/grad", json=grad_body(image, t=123))
        assert resp.status_code == 200
        assert resp.json()["t"] == 123

    def test_shape_mismatch_400_names_field(self, client):
        image = np.zeros((8, 8, 3))
        body = grad_body(image)
        body["normal"] = wire.encode(np.zeros((4, 4, 3)))
        resp = client.post("/v1/grad", json=body)
        assert resp.status_code == 400
        assert "normal" in resp.json()["error"]

    def test_odd_composite_400(self, client, target):
        backend_target = np.zeros((7, 8, 3))
        client_odd = TestClient(create_app(MockGuidance(backend_target)))
        resp = client_odd.post("/v1/grad", json=grad_body(np.zeros((7, 8, 3))))
        assert resp.status_code == 400
        assert "even" in resp.json()["error"]

    def test_image_target_mismatch_400(self, client):
        resp = client.post("/v1/grad", json=grad_body(np.zeros((16, 16, 3))))
        assert resp.status_code == 400
        assert "target" in resp.json()["error"]

    def test_t_out_of_range_422(self, client, target):
        resp = client.post("/v1/grad", json=grad_body(target, t=0))
        assert resp.status_code == 422

    def test_uniform_w_mode(self, client, target):
        image = np.random.default_rng(8).uniform(0, 1, target.shape)
        resp = client.post("/v1/grad", json=grad_body(image, t=700, w_mode="uniform"))
        assert resp.json()["w"] == 1.0
