import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xaidetect import gradcore as gc
from xaidetect import models

ARCHS = ("arch-A", "arch-B")


def as64(model):
    m = model.copy()
    m.params = {k: v.astype(np.float64) for k, v in m.params.items()}
    return m


def loss64(model, x, loss):
    z, _ = gc.run_layers(model.layers, model.params, gc._to_internal(x))
    v, _ = gc.logit_loss(z, loss)
    return float(np.mean(v))


def analytic64(model, x, loss):
    """Same backward kernels, run in float64 so the oracle comparison is not float32-limited."""
    z, caches = gc.run_layers(model.layers, model.params, gc._to_internal(x))
    _, gz = gc.logit_loss(z, loss)
    gz = gz / x.shape[0]
    gx, gp = gc.backprop_layers(model.layers, model.params, caches, gz, want_params=True)
    return gc._to_external(gx), gp


def rel_err(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.mark.parametrize("arch", ARCHS)
def test_input_gradient_matches_central_differences(arch, rng):
    m = as64(models.build(arch, seed=1))
    x = rng.random((2, 3, 32, 32))
    loss = gc.LossSpec("cross_entropy", np.array([0, 1]))
    g, _ = analytic64(m, x, loss)
    floor = 1e-3 * np.abs(g).max()
    h = 1e-6
    for _ in range(32):
        i = tuple(int(rng.integers(0, s)) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (loss64(m, xp, loss) - loss64(m, xm, loss)) / (2 * h)
        assert rel_err(g[i], fd, floor) <= 1e-3


@pytest.mark.parametrize("arch", ARCHS)
def test_param_gradient_matches_central_differences(arch, rng):
    m = as64(models.build(arch, seed=2))
    x = rng.random((2, 3, 32, 32))
    loss = gc.LossSpec("cross_entropy", np.array([1, 0]))
    _, gp = analytic64(m, x, loss)
    names = sorted(gp)
    h = 1e-6
    for _ in range(32):
        k = names[int(rng.integers(len(names)))]
        i = tuple(int(rng.integers(0, s)) for s in m.params[k].shape)
        orig = m.params[k][i]
        m.params[k][i] = orig + h
        up = loss64(m, x, loss)
        m.params[k][i] = orig - h
        dn = loss64(m, x, loss)
        m.params[k][i] = orig
        fd = (up - dn) / (2 * h)
        assert rel_err(gp[k][i], fd, 1e-3 * np.abs(gp[k]).max()) <= 1e-3


@pytest.mark.parametrize("arch", ARCHS)
def test_float32_public_gradients_track_float64(arch, rng):
    m = models.build(arch, seed=3)
    x = rng.random((4, 3, 32, 32), dtype=np.float32)
    labels = np.array([0, 1, 1, 0])
    loss = gc.LossSpec("cross_entropy", labels)
    g32 = gc.input_gradient(m, x, loss)
    g64, p64 = analytic64(as64(m), x.astype(np.float64), loss)
    np.testing.assert_allclose(g32, g64, atol=1e-5 * np.abs(g64).max())
    p32 = gc.param_gradients(m, x, labels)
    for k in p32:
        np.testing.assert_allclose(p32[k], p64[k], atol=1e-5 * np.abs(p64[k]).max() + 1e-12)


def test_per_example_gradients_are_independent(rng):
    m = models.build("arch-B", seed=0)
    x = rng.random((3, 3, 32, 32), dtype=np.float32)
    _, _, g = gc.value_and_input_grad(m, x, gc.LossSpec("margin", gc.FAKE))
    for i in range(3):
        _, _, gi = gc.value_and_input_grad(m, x[i], gc.LossSpec("margin", gc.FAKE))
        np.testing.assert_allclose(g[i], gi, rtol=1e-5, atol=1e-7)


def test_output_shapes_and_single_input(rng):
    m = models.build("arch-A", seed=0)
    x = rng.random((5, 3, 32, 32), dtype=np.float32)
    assert gc.forward(m, x).shape == (5, 2)
    assert gc.forward(m, x[0]).shape == (2,)
    assert gc.input_gradient(m, x, gc.LossSpec("margin_real")).shape == x.shape


def test_shape_error_names_expected_shape():
    m = models.build("arch-A", seed=0)
    with pytest.raises(gc.ShapeError, match=r"\(3, 32, 32\)"):
        gc.forward(m, np.zeros((2, 3, 16, 16), np.float32))


def test_margin_loss_values():
    z = np.array([[3.0, 5.0], [5.0, 3.0], [4.0, 4.0]], np.float32)
    # hinge toward "real" penalises a fake-leaning gap; toward "fake" the mirror image
    v_real, _ = gc.logit_loss(z, gc.LossSpec("margin_real"))
    v_fake, _ = gc.logit_loss(z, gc.LossSpec("margin", gc.FAKE))
    np.testing.assert_array_equal(v_real, [2.0, 0.0, 0.0])
    np.testing.assert_array_equal(v_fake, [0.0, 2.0, 0.0])


@given(arrays(np.float64, (6, 2), elements=st.floats(-20, 20)))
def test_cross_entropy_logit_gradient_matches_softmax(z):
    t = np.array([0, 1, 0, 1, 1, 0])
    v, g = gc.logit_loss(z, gc.LossSpec("cross_entropy", t))
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    onehot = np.eye(2)[t]
    np.testing.assert_allclose(g, p - onehot, atol=1e-9)
    np.testing.assert_allclose(v, -np.log(np.clip(p[np.arange(6), t], 1e-300, None)), rtol=1e-6, atol=1e-9)


def test_guided_gradient_rejects_tanh():
    layers = (gc.Layer("dense", "w", 4, 2), gc.Layer("tanh"))
    rng = np.random.default_rng(0)
    m = gc.ModelBundle("t", layers, {"w.w": rng.normal(size=(4, 2)).astype(np.float32),
                                     "w.b": np.zeros(2, np.float32)}, (4,))
    with pytest.raises(ValueError, match="tanh"):
        gc.guided_input_gradient(m, np.ones(4, np.float32), 0)


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0], np.float32)}
    g = {"w": np.array([0.5, -4.0, 0.0], np.float32)}
    st_ = gc.AdamState.zeros_like(p)
    new = gc.adam_step(p, g, st_, lr=0.1)
    np.testing.assert_allclose(new["w"], [0.9, -1.9, 3.0], atol=1e-6)
    assert st_.t == 1


def test_adam_rejects_bad_gradients():
    p = {"w": np.zeros(3, np.float32)}
    with pytest.raises(gc.ShapeError):
        gc.adam_step(p, {"w": np.zeros(2, np.float32)}, gc.AdamState.zeros_like(p))
    with pytest.raises(FloatingPointError):
        gc.adam_step(p, {"w": np.array([0, np.nan, 0], np.float32)}, gc.AdamState.zeros_like(p))


@settings(max_examples=30)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 3)),
                              elements=st.floats(-1e6, 1e6, width=32)),
                       max_size=4))
def test_xadf_round_trip(tensors):
    buf = io.BytesIO()
    gc.write_xadf(buf, tensors)
    back = gc.read_xadf(buf.getvalue())
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_xadf_rejects_garbage_and_float64():
    with pytest.raises(ValueError):
        gc.read_xadf(b"NOPE" + b"\0" * 16)
    with pytest.raises(TypeError):
        gc.write_xadf(io.BytesIO(), {"x": np.zeros(2)})


# ---------------------------------------------------------------- closed forms


def _reference_forward(model, x):
    """Channels-first float64 forward by shift-and-accumulate, sharing no code with the engine."""
    a = x.astype(np.float64)
    for layer in model.layers:
        p = model.params
        if layer.kind == "conv":
            w, b = p[layer.name + ".w"].astype(np.float64), p[layer.name + ".b"].astype(np.float64)
            k, r = w.shape[2], w.shape[2] // 2
            n, c, h, wd = a.shape
            pad = np.zeros((n, c, h + 2 * r, wd + 2 * r))
            pad[:, :, r:r + h, r:r + wd] = a
            out = np.zeros((n, w.shape[0], h, wd)) + b[None, :, None, None]
            for i in range(k):
                for j in range(k):
                    out += np.einsum("nchw,oc->nohw", pad[:, :, i:i + h, j:j + wd], w[:, :, i, j])
            a = out
        elif layer.kind == "relu":
            a = np.where(a > 0, a, 0.0)
        elif layer.kind == "maxpool":
            n, c, h, wd = a.shape
            a = a.reshape(n, c, h // 2, 2, wd // 2, 2).max(axis=(3, 5))
        elif layer.kind == "gap":
            a = a.mean(axis=(2, 3))
        elif layer.kind == "flatten":
            a = a.reshape(len(a), -1)
        elif layer.kind == "dense":
            a = a @ p[layer.name + ".w"].astype(np.float64) + p[layer.name + ".b"]
    return a


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_matches_independent_reference(arch, rng):
    m = models.build(arch, seed=7)
    x = rng.random((2, 3, 32, 32), dtype=np.float32)
    np.testing.assert_allclose(gc.forward(m, x), _reference_forward(m, x), rtol=1e-4, atol=1e-5)


def _dense(w, b):
    w = np.asarray(w, np.float32)
    return gc.ModelBundle("dense", (gc.Layer("dense", "d", w.shape[0], w.shape[1]),),
                          {"d.w": w, "d.b": np.asarray(b, np.float32)}, (w.shape[0],))


def test_zero_weights_give_zero_logits(rng):
    m = models.build("arch-A", seed=0)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    np.testing.assert_array_equal(gc.forward(m, rng.random((2, 3, 32, 32), dtype=np.float32)), 0)


def test_single_dense_layer_by_hand():
    m = _dense([[1.0, -1.0]], [0.0, 0.0])
    np.testing.assert_array_equal(gc.forward(m, np.float32([2.0])), [2.0, -2.0])


def test_margin_gradient_closed_form_on_linear_model(rng):
    w = rng.normal(size=(5, 2)).astype(np.float32)
    x = rng.random(5, dtype=np.float32)
    spec = gc.LossSpec("margin_real")
    # fake bias large: hinge active, so the gradient is w_fake - w_real
    _, _, g = gc.value_and_input_grad(_dense(w, [0.0, 100.0]), x, spec)
    np.testing.assert_allclose(g, w[:, 1] - w[:, 0], rtol=1e-6)
    # real bias large: hinge inactive
    _, _, g = gc.value_and_input_grad(_dense(w, [100.0, 0.0]), x, spec)
    np.testing.assert_array_equal(g, 0)


def _relu_net(w1, w2):
    layers = (gc.Layer("dense", "a", 2, 2), gc.Layer("relu"), gc.Layer("dense", "b", 2, 2))
    p = {"a.w": np.float32(w1), "a.b": np.zeros(2, np.float32),
         "b.w": np.float32(w2), "b.b": np.zeros(2, np.float32)}
    return gc.ModelBundle("relu", layers, p, (2,))


def test_guided_rule_is_identity_when_nothing_is_gated():
    m = _relu_net([[1.0, 2.0], [0.5, 1.0]], [[1.0, 0.3], [2.0, 0.1]])
    x = np.float32([1.0, 1.0])  # positive activations, positive upstream weights into class 0
    plain, _ = gc.logit_input_gradient(m, x, 0)
    np.testing.assert_array_equal(gc.guided_input_gradient(m, x, 0), plain)


def test_guided_relu_single_unit_cases():
    # one hidden unit: z0 = s * relu(x)
    for x, s, expected in [(-1.0, 1.0, 0.0), (1.0, -1.0, 0.0), (1.0, 1.0, 1.0)]:
        m = _relu_net([[1.0, 0.0], [0.0, 0.0]], [[s, 0.0], [0.0, 0.0]])
        g = gc.guided_input_gradient(m, np.float32([x, 0.0]), 0)
        assert g[0] == expected
    # plain gradient keeps the negative upstream value
    plain, _ = gc.logit_input_gradient(_relu_net([[1.0, 0.0], [0.0, 0.0]], [[-1.0, 0.0], [0.0, 0.0]]),
                                       np.float32([1.0, 0.0]), 0)
    assert plain[0] == -1.0


def test_duplicate_batch_gradient_is_linear(rng):
    m = models.build("arch-B", seed=2)
    x = rng.random((1, 3, 32, 32), dtype=np.float32)
    one = gc.param_gradients(m, x, [1])
    two = gc.param_gradients(m, np.concatenate([x, x]), [1, 1])
    # gradients are mean-reduced, so the summed loss over the pair is 2 * two == 2 * one
    for k in one:
        np.testing.assert_allclose(2 * two[k], 2 * one[k], rtol=1e-5, atol=1e-8)


def test_dense_cross_entropy_gradient_by_hand(rng):
    w = rng.normal(size=(4, 2)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    x = rng.random((1, 4), dtype=np.float32)
    g = gc.param_gradients(_dense(w, b), x, [1])
    z = x[0].astype(np.float64) @ w + b
    p = np.exp(z - z.max())
    p /= p.sum()
    err = p - np.eye(2)[1]
    np.testing.assert_allclose(g["d.w"], np.outer(x[0], err), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(g["d.b"], err, rtol=1e-5, atol=1e-7)


def test_adam_zero_gradient_and_repeated_steps():
    p = {"w": np.float32([1.5])}
    st_ = gc.AdamState.zeros_like(p)
    same = gc.adam_step(p, {"w": np.float32([0.0])}, st_, lr=0.1)
    np.testing.assert_array_equal(same["w"], p["w"])
    assert st_.t == 1
    st_ = gc.AdamState.zeros_like(p)
    p1 = gc.adam_step(p, {"w": np.float32([0.3])}, st_, lr=0.01)
    p2 = gc.adam_step(p1, {"w": np.float32([0.3])}, st_, lr=0.01)
    first, second = float(p["w"][0] - p1["w"][0]), float(p1["w"][0] - p2["w"][0])
    assert abs(first - 0.01) <= 1e-6 * 0.01 + 1e-7  # float32 parameter storage
    assert abs(second - first) <= 1e-6
