import numpy as np
import pytest

from semiseg import model
from semiseg.exceptions import ModelError, OptimizerError


def conv3x3_oracle(x, w, b):
    """Naive six-loop direct convolution, zero padding 1."""
    cout, cin, _, _ = w.shape
    _, h, width = x.shape
    out = np.zeros((cout, h, width))
    for co in range(cout):
        for y in range(h):
            for xx in range(width):
                acc = b[co]
                for ci in range(cin):
                    for ky in range(3):
                        for kx in range(3):
                            sy, sx = y + ky - 1, xx + kx - 1
                            if 0 <= sy < h and 0 <= sx < width:
                                acc += w[co, ci, ky, kx] * x[ci, sy, sx]
                out[co, y, xx] = acc
    return out


def test_forward_matches_direct_convolution_oracle():
    rng = np.random.default_rng(0)
    params = model.init_params(3, 4, 5, 1)
    frame = rng.random((3, 5, 6))
    trace = model.forward(params, frame)

    a1 = np.maximum(conv3x3_oracle(frame, params["conv1.w"], params["conv1.b"]), 0)
    a2 = np.maximum(conv3x3_oracle(a1, params["conv2.w"], params["conv2.b"]), 0)
    logits = np.einsum("cw,whx->chx", params["cls.w"][:, :, 0, 0], a2) \
        + params["cls.b"][:, None, None]
    assert np.max(np.abs(trace.logits - logits)) < 1e-10
    assert np.max(np.abs(trace.a1 - a1)) < 1e-10


def test_all_zero_params_give_zero_outputs():
    params = {k: np.zeros_like(v) for k, v in model.init_params(4, 3, 5, 0).items()}
    trace = model.forward(params, np.random.default_rng(0).random((3, 4, 4)))
    assert np.all(trace.logits == 0.0)
    assert np.all(trace.raw_proj == 0.0)
    # zero raw projection maps to the zero vector, not NaN
    assert np.all(trace.embeddings == 0.0)


def test_bias_only_path():
    params = model.init_params(4, 3, 5, 0)
    for name in ("conv1.w", "conv2.w", "cls.w", "proj.w"):
        params[name] = np.zeros_like(params[name])
    params["cls.b"] = np.array([0.5, -1.0, 2.0])
    trace = model.forward(params, np.random.default_rng(0).random((3, 4, 4)))
    assert np.allclose(trace.logits, params["cls.b"][:, None, None])


def test_embedding_norms_unit():
    params = model.init_params(6, 4, 7, 3)
    params["proj.b"] = np.random.default_rng(4).random(7)
    trace = model.forward(params, np.random.default_rng(5).random((3, 8, 8)))
    assert np.max(np.abs(np.linalg.norm(trace.embeddings, axis=0) - 1.0)) < 1e-6


def test_forward_rejects_bad_shapes():
    params = model.init_params(4, 3, 5, 0)
    with pytest.raises(ModelError):
        model.forward(params, np.zeros((1, 8, 8)))
    with pytest.raises(ModelError):
        model.forward(params, np.zeros((3, 2, 2)))


def test_backward_zero_upstream_is_zero():
    params = model.init_params(4, 3, 5, 0)
    trace = model.forward(params, np.random.default_rng(1).random((3, 5, 5)))
    grads = model.backward(trace, None, None)
    assert all(np.all(g == 0.0) for g in grads.values())


def test_backward_logit_only_loss_has_zero_proj_grads():
    params = model.init_params(4, 3, 5, 0)
    trace = model.forward(params, np.random.default_rng(1).random((3, 5, 5)))
    grads = model.backward(trace, np.random.default_rng(2).random(trace.logits.shape), None)
    assert np.all(grads["proj.w"] == 0.0)
    assert np.all(grads["proj.b"] == 0.0)
    assert np.any(grads["cls.w"] != 0.0)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    params = model.init_params(3, 4, 5, 7)
    # random biases keep projection norms away from zero (better FD conditioning)
    params["proj.b"] = rng.uniform(0.5, 1.0, 5)
    frame = rng.random((3, 4, 4))
    dlog = rng.standard_normal((4, 4, 4))
    demb = rng.standard_normal((5, 4, 4))

    def loss_of(p):
        tr = model.forward(p, frame)
        return float(np.sum(tr.logits * dlog) + np.sum(tr.embeddings * demb))

    trace = model.forward(params, frame)
    grads = model.backward(trace, dlog, demb)
    h = 1e-3
    for name in params:
        flat = params[name].ravel()
        ga = grads[name].ravel()
        fd = np.empty_like(ga)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_of(params)
            flat[i] = orig - h
            lm = loss_of(params)
            flat[i] = orig
            fd[i] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(ga), np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(ga - fd) / denom < 1e-5, name


def test_softmax_uniform():
    assert np.allclose(model.softmax(np.zeros(4)), 0.25)


def test_softmax_stability():
    out = model.softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(out).all()
    assert abs(out[0] - 1.0) < 1e-12


def test_softmax_direct_value():
    out = model.softmax(np.array([1.0, 2.0, 3.0]))
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(out, e / e.sum(), atol=1e-12)
    assert np.allclose(out, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_shift_invariance_and_sum():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 6, 6))
    out = model.softmax(logits, axis=0)
    assert np.max(np.abs(out.sum(axis=0) - 1.0)) < 1e-12
    shifted = model.softmax(logits + 3.7, axis=0)
    assert np.max(np.abs(out - shifted)) < 1e-12


def _scalar_state(**kw):
    defaults = dict(m={"x": np.zeros(1)}, v={"x": np.zeros(1)}, t=0, lr=0.1,
                    beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
                    warmup_steps=0)
    defaults.update(kw)
    return model.OptimizerState(**defaults)


def test_adamw_hand_step_no_decay():
    p, _ = model.adamw_step({"x": np.array([1.0])}, {"x": np.array([1.0])},
                            _scalar_state())
    assert abs(p["x"][0] - 0.9) < 1e-7


def test_adamw_hand_step_with_decay():
    p, _ = model.adamw_step({"x": np.array([1.0])}, {"x": np.array([1.0])},
                            _scalar_state(weight_decay=0.05))
    assert abs(p["x"][0] - 0.895) < 1e-7


def test_adamw_zero_gradient_no_change():
    p, _ = model.adamw_step({"x": np.array([2.0])}, {"x": np.array([0.0])},
                            _scalar_state())
    assert p["x"][0] == 2.0


def test_adamw_linear_warmup():
    # warmup 10: first step uses lr/10
    st = _scalar_state(warmup_steps=10)
    p, st2 = model.adamw_step({"x": np.array([1.0])}, {"x": np.array([1.0])}, st)
    assert abs(p["x"][0] - (1.0 - 0.01)) < 1e-7
    assert st2.t == 1


def test_adamw_rejects_nonfinite_gradient():
    with pytest.raises(OptimizerError, match="x"):
        model.adamw_step({"x": np.array([1.0])}, {"x": np.array([np.nan])},
                         _scalar_state())


def test_init_deterministic_and_bounded():
    a = model.init_params(16, 5, 8, 3)
    b = model.init_params(16, 5, 8, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    bound = np.sqrt(6.0 / 27.0)
    assert np.all(np.abs(a["conv1.w"]) <= bound)
    assert np.all(a["conv1.b"] == 0.0)


def test_wider_model_has_more_parameters():
    teacher = model.init_params(32, 5, 8, 0)
    student = model.init_params(16, 5, 8, 0)
    assert model.num_parameters(teacher) > model.num_parameters(student)
