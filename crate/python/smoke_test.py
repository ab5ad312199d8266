"""Smoke test for the ecs_pinn extension module.

Build and install the module first, e.g.

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run ``python python/smoke_test.py``.
"""

import json
import math
import tempfile

import ecs_pinn


def check_peclet():
    pe = ecs_pinn.peclet(1.25e-4, 5.95e-2, 0.1)
    assert abs(pe - 47.60) < 0.01, pe
    assert ecs_pinn.classify_regime(pe) == "Advection"
    assert "regime=Advection" in ecs_pinn.analyze(3.11e-4, 1.57e-2, 0.1)
    assert ecs_pinn.classify_regime(0.0) == "Diffusion"


def check_tape():
    tape = ecs_pinn.Tape()
    x = tape.param([0.3, -0.7], [1, 2])
    w = tape.constant([1.5, -2.0], [2, 1])
    loss = tape.sum(tape.square(tape.tanh(tape.matmul(x, w))))
    grads = dict(tape.backward(loss))
    z = 0.3 * 1.5 + 0.7 * 2.0
    a = math.tanh(z)
    expected = [2 * a * (1 - a * a) * 1.5, 2 * a * (1 - a * a) * -2.0]
    for g, e in zip(grads[x], expected):
        assert abs(g - e) < 1e-12, (g, e)


def check_mlp():
    net = ecs_pinn.Mlp([2, 8, 8, 1], seed=3)
    pts = [[0.1, 0.2], [0.5, 0.9]]
    out = net.forward(pts)
    d = net.forward_with_derivs(pts)
    assert all(abs(a - b) < 1e-12 for a, b in zip(out, d["value"]))
    h = 1e-5
    for i, (x, t) in enumerate(pts):
        up, dn = net.forward([[x + h, t], [x - h, t]])
        fd = (up - dn) / (2 * h)
        assert abs(fd - d["grad"][0][i]) < 1e-6
        lap = (up - 2 * out[i] + dn) / (h * h)
        assert abs(lap - d["lap"][i]) < 1e-3 * max(1.0, abs(lap))
    with tempfile.TemporaryDirectory() as tmp:
        path = tmp + "/net.ckpt"
        net.save(path)
        assert ecs_pinn.Mlp.load(path).forward(pts) == out


def check_fd():
    n, dx = 64, 1.0 / 64
    c0 = [ecs_pinn.analytic_gaussian([(i + 0.5) * dx], 0.0, 1e-3, [0.5], [0.3], 1.0) for i in range(n)]
    frames = ecs_pinn.solve_ade_fd([n], [dx], c0, 1e-3, [0.5], 1e-3, 50)
    assert len(frames) == 50
    assert abs(sum(frames[-1]) - sum(c0)) < 1e-10 * sum(c0)


def check_training():
    spec = {
        "dims": [64],
        "spacing_mm": [1.0 / 64],
        "D_mm2_per_s": 1e-3,
        "v_mm_per_s": [0.5],
        "x0_mm": [0.25],
        "t_offset_s": 1.25,
        "frame_times_s": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        "seed": 7,
    }
    series, truth = ecs_pinn.generate_synthetic(json.dumps(spec))
    assert len(series) == 6 and series.dims == [64, 1, 1]
    assert json.loads(truth)["D"] == 1e-3
    with tempfile.TemporaryDirectory() as tmp:
        series.save(tmp)
        again = ecs_pinn.VoxelSeries.load(tmp)
        # The blob stores f32.
        for a, b in zip(again.frame(3), series.frame(3)):
            assert abs(a - b) <= 1e-6 * max(abs(b), 1e-30)
        again.save(tmp)
        assert ecs_pinn.VoxelSeries.load(tmp).frame(3) == again.frame(3)
    cfg = {"epochs": 60, "warmup_epochs": 10, "k_ade": 32, "k_data": 32, "seed": 1}
    result = ecs_pinn.train(series, json.dumps(cfg))
    assert len(result.losses) == 60
    assert all(math.isfinite(l) for l in result.losses)
    assert result.diffusion > 0
    pred = result.predict(series, [0.0])
    assert len(pred) == 1 and len(pred[0]) == 64
    assert result.to_csv().startswith("epoch,lr,loss")
    with tempfile.TemporaryDirectory() as tmp:
        result.save_model(tmp)
        d, v = ecs_pinn.load_model(tmp)
        assert d == result.diffusion and v == result.velocity


if __name__ == "__main__":
    for check in (check_peclet, check_tape, check_mlp, check_fd, check_training):
        check()
        print(f"ok  {check.__name__}")
