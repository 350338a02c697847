import numpy as np
import pytest
from hypothesis import given, strategies as st

from directreg.errors import EmptyInput, ShapeMismatch
from directreg.tensornet import (MlpSpec, ParamStore, adam_step, backprop, chamfer_batch,
                                 finite_difference_check, init_mlp, load_checkpoint, max_pool_backward,
                                 max_pool_rows, mlp_forward, save_checkpoint, unit_normalize)

seeds = st.integers(0, 2 ** 32 - 1)


def make_mlp(spec, seed=0, prefix="m"):
    store = ParamStore()
    init_mlp(spec, store, prefix, np.random.default_rng(seed))
    return store


def jitter(params, rng, scale=1e-3):
    return {k: v + scale * rng.normal(size=v.shape) for k, v in params.items()}


def test_zero_weights_relu_give_zero():
    spec = MlpSpec(3, (4, 2), ("relu", "relu"))
    store = make_mlp(spec)
    for k in store.keys():
        store[k] = np.zeros_like(store[k])
    y, _ = mlp_forward(spec, store, np.ones((5, 3)), "m")
    np.testing.assert_array_equal(y, 0.0)


def test_identity_linear_layer():
    spec = MlpSpec(3, (3,), ("none",))
    store = ParamStore({"m.0.W": np.eye(3), "m.0.b": np.zeros(3)})
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(mlp_forward(spec, store, x, "m")[0], x)


@given(seeds)
def test_forward_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(3, (5, 2), ("relu", "none"))
    store = make_mlp(spec, seed)
    x = rng.normal(size=(4, 3))
    y, _ = mlp_forward(spec, store, x, "m")
    w0, b0, w1, b1 = (store[k] for k in ("m.0.W", "m.0.b", "m.1.W", "m.1.b"))
    for r in range(4):
        hidden = [max(0.0, sum(x[r, i] * w0[i, j] for i in range(3)) + b0[j]) for j in range(5)]
        for o in range(2):
            expect = sum(hidden[j] * w1[j, o] for j in range(5)) + b1[o]
            assert abs(y[r, o] - expect) < 1e-12


def test_linear_gradient_is_outer_product():
    rng = np.random.default_rng(1)
    spec = MlpSpec(3, (2,), ("none",))
    store = make_mlp(spec)
    x = rng.normal(size=(1, 3))
    up = rng.normal(size=(1, 2))
    _, tape = mlp_forward(spec, store, x, "m")
    grads, dx = backprop(tape, up)
    np.testing.assert_allclose(grads["m.0.W"], np.outer(x[0], up[0]))
    np.testing.assert_allclose(grads["m.0.b"], up[0])
    np.testing.assert_allclose(dx, up @ store["m.0.W"].T)


def test_relu_blocks_negative_preactivation():
    spec = MlpSpec(1, (1,), ("relu",))
    store = ParamStore({"m.0.W": np.array([[1.0]]), "m.0.b": np.array([0.0])})
    _, tape = mlp_forward(spec, store, np.array([[-2.0]]), "m")
    grads, dx = backprop(tape, np.ones((1, 1)))
    assert grads["m.0.W"][0, 0] == 0.0 and dx[0, 0] == 0.0


def test_forward_is_deterministic():
    spec = MlpSpec(4, (8, 8, 3), ("relu", "relu", "none"), "unit")
    store = make_mlp(spec)
    x = np.random.default_rng(5).normal(size=(7, 4))
    a, _ = mlp_forward(spec, store, x, "m")
    b, _ = mlp_forward(spec, store, x, "m")
    assert np.array_equal(a, b)


def test_shape_mismatch():
    spec = MlpSpec(4, (2,), ("none",))
    with pytest.raises(ShapeMismatch):
        mlp_forward(spec, make_mlp(spec), np.zeros((2, 3)), "m")


def test_max_pool_examples():
    v, idx = max_pool_rows(np.array([[1.0, 5.0]]))
    np.testing.assert_array_equal(v, [1, 5])
    v, idx = max_pool_rows(np.array([[1.0, 5.0], [3.0, 2.0]]))
    np.testing.assert_array_equal(v, [3, 5])
    np.testing.assert_array_equal(idx, [1, 0])
    with pytest.raises(EmptyInput):
        max_pool_rows(np.zeros((0, 2)))


def test_max_pool_gradient_only_reaches_argmax(rng):
    x = rng.normal(size=(6, 4))
    _, idx = max_pool_rows(x)
    g = max_pool_backward(np.ones(4), idx, 6)
    mask = np.zeros_like(x, dtype=bool)
    mask[idx, np.arange(4)] = True
    assert np.all(g[~mask] == 0.0) and np.all(g[mask] == 1.0)


def test_max_pool_finite_differences(rng):
    w = rng.normal(size=(5, 3))

    def loss(p):
        v, idx = max_pool_rows(p["x"])
        return float(v @ w[0]), {"x": max_pool_backward(w[0], idx, 5)}

    rep = finite_difference_check(loss, {"x": rng.normal(size=(5, 3))})
    assert rep.passed, rep.rel_errors


def test_mlp_unit_norm_finite_differences(rng):
    spec = MlpSpec(3, (6, 4), ("relu", "none"), "unit")
    store = make_mlp(spec)
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 4))

    def loss(p):
        y, tape = mlp_forward(spec, p, p["x"], "m")
        grads, dx = backprop(tape, target)
        grads["x"] = dx
        return float(np.sum(y * target)), grads

    params = jitter(dict(store.items()), rng)
    params["x"] = x
    rep = finite_difference_check(loss, params)
    assert rep.passed, rep.rel_errors


def test_chamfer_batch_values_and_gradients(rng):
    from directreg.core3d import chamfer_distance
    x = rng.normal(size=(3, 7, 4))
    y = rng.normal(size=(3, 5, 4))
    val, _, _ = chamfer_batch(x, y)
    for b in range(3):
        assert val[b] == pytest.approx(chamfer_distance(x[b], y[b]), abs=1e-12)

    def loss(p):
        v, gx, gy = chamfer_batch(p["x"], p["y"])
        return float(v.sum()), {"x": gx, "y": gy}

    rep = finite_difference_check(loss, {"x": x, "y": y})
    assert rep.passed, rep.rel_errors


def test_unit_normalize_rows(rng):
    y, n = unit_normalize(rng.normal(size=(4, 3)))
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0)


def test_adam_zero_gradient_keeps_params():
    store = ParamStore({"w": np.array([1.0, -2.0])})
    adam_step(store, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(store["w"], [1.0, -2.0])


def test_adam_first_step_scalar():
    # m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected ratio is g / (|g| + eps).
    g, lr, eps = 0.5, 0.01, 1e-8
    store = ParamStore({"w": np.array([2.0])})
    adam_step(store, {"w": np.array([g])}, lr=lr, eps=eps)
    assert store["w"][0] == pytest.approx(2.0 - lr * g / (abs(g) + eps), abs=1e-15)


def test_adam_skips_missing_and_rejects_bad_shapes():
    store = ParamStore({"a": np.ones(2), "b": np.ones(3)})
    adam_step(store, {"a": np.ones(2)}, lr=0.1)
    np.testing.assert_array_equal(store["b"], np.ones(3))
    with pytest.raises(ShapeMismatch):
        adam_step(store, {"a": np.ones(3)}, lr=0.1)


def test_adam_runs_are_bitwise_deterministic():
    def run():
        spec = MlpSpec(2, (4, 1), ("relu", "none"))
        store = make_mlp(spec, seed=7)
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.normal(size=(8, 2))
            y, tape = mlp_forward(spec, store, x, "m")
            grads, _ = backprop(tape, 2 * y)
            adam_step(store, grads, 1e-2)
        return store

    a, b = run(), run()
    for k in a.keys():
        assert np.array_equal(a[k], b[k])


def test_fd_quadratic_exact():
    def loss(p):
        return 0.5 * float(np.sum(p["p"] ** 2)), {"p": p["p"].copy()}

    rep = finite_difference_check(loss, {"p": np.random.default_rng(0).normal(size=10)})
    assert rep.max_rel_error < 1e-10


def test_fd_catches_wrong_gradient():
    def loss(p):
        return float(np.sum(p["p"] ** 2)), {"p": p["p"].copy()}

    rep = finite_difference_check(loss, {"p": np.ones(3)})
    assert not rep.passed


def test_fd_non_finite_loss_fails():
    rep = finite_difference_check(lambda p: (float("nan"), {}), {"p": np.ones(2)})
    assert not rep.passed and not rep.finite


def test_checkpoint_round_trip(tmp_path):
    spec = MlpSpec(3, (4, 2), ("relu", "none"))
    store = make_mlp(spec, 3)
    save_checkpoint(tmp_path / "c.npz", store, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"note": "x"}
    for k in store.keys():
        assert np.array_equal(store[k], loaded[k])


def test_glorot_bounds():
    spec = MlpSpec(30, (50,), ("none",))
    store = make_mlp(spec)
    a = np.sqrt(6 / 80)
    assert np.abs(store["m.0.W"]).max() <= a
    np.testing.assert_array_equal(store["m.0.b"], 0.0)
