import numpy as np
import pytest

from semiseg import inference
from semiseg.exceptions import ParameterError, ValidationError
from semiseg.inference import TtaConfig, ensemble, hflip, resize_bilinear, tta_predict


def resize_oracle(arr, out_h, out_w):
    """Scalar-loop bilinear resize with half-pixel centers and edge clamping."""
    c, h, w = arr.shape
    out = np.zeros((c, out_h, out_w))
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for k in range(c):
                top = arr[k, y0, x0] * (1 - fx) + arr[k, y0, x1] * fx
                bot = arr[k, y1, x0] * (1 - fx) + arr[k, y1, x1] * fx
                out[k, oy, ox] = top * (1 - fy) + bot * fy
    return out


def test_resize_identity_is_bitwise_passthrough():
    rng = np.random.default_rng(0)
    arr = rng.random((3, 7, 9))
    out = resize_bilinear(arr, 7, 9)
    assert np.array_equal(out, arr)


def test_resize_constant_preserved():
    arr = np.full((2, 5, 5), 0.37)
    out = resize_bilinear(arr, 11, 3)
    assert np.max(np.abs(out - 0.37)) < 1e-14


def test_resize_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for out_h, out_w in [(4, 4), (9, 3), (2, 13), (12, 12)]:
        arr = rng.random((3, 6, 5))
        got = resize_bilinear(arr, out_h, out_w)
        assert np.max(np.abs(got - resize_oracle(arr, out_h, out_w))) < 1e-12


def test_resize_double_then_exact_grid():
    # 2x upscale of a linear ramp stays a linear ramp in the interior
    ramp = np.arange(8, dtype=np.float64)[None, None, :] * np.ones((1, 4, 1))
    up = resize_bilinear(ramp, 8, 16)
    inner = up[0, 0, 1:-1]
    diffs = np.diff(inner)
    assert np.max(np.abs(diffs - 0.5)) < 1e-12


def test_resize_value_bounds():
    rng = np.random.default_rng(2)
    arr = rng.random((2, 5, 7))
    out = resize_bilinear(arr, 13, 4)
    assert out.min() >= arr.min() - 1e-14 and out.max() <= arr.max() + 1e-14


def test_resize_rejects_empty_target():
    with pytest.raises(ParameterError):
        resize_bilinear(np.ones((1, 2, 2)), 0, 4)


def test_hflip_involution_and_value():
    rng = np.random.default_rng(3)
    arr = rng.random((3, 4, 5))
    assert np.array_equal(hflip(hflip(arr)), arr)
    assert np.array_equal(hflip(arr)[..., 0], arr[..., -1])


def test_tta_single_scale_no_flip_bitwise_passthrough():
    rng = np.random.default_rng(4)
    frame = rng.random((3, 8, 8))
    probs = rng.random((5, 8, 8))
    probs /= probs.sum(axis=0)

    calls = []

    def predict(x):
        calls.append(x.shape)
        return probs

    out = tta_predict(predict, frame, TtaConfig(scales=(1.0,), flip=False))
    assert out is probs or np.array_equal(out, probs)
    assert calls == [(3, 8, 8)]


def test_tta_flip_of_symmetric_predictor_matches_single_run():
    # an equivariant predictor makes the flipped run equal the plain run
    rng = np.random.default_rng(5)
    frame = rng.random((3, 6, 6))

    def predict(x):
        return np.stack([x[0], 1.0 - x[0]])

    plain = predict(frame)
    out = tta_predict(predict, frame, TtaConfig(scales=(1.0,), flip=True))
    assert np.max(np.abs(out - plain)) < 1e-14


def test_tta_mean_over_runs():
    frame = np.zeros((3, 4, 4))
    outputs = iter([np.full((2, 4, 4), 0.2), np.full((2, 4, 4), 0.6)])

    def predict(x):
        return next(outputs)

    out = tta_predict(predict, frame, TtaConfig(scales=(1.0,), flip=True))
    assert np.max(np.abs(out - 0.4)) < 1e-15


def test_tta_scale_floor_and_minimum_size():
    seen = []

    def predict(x):
        seen.append(x.shape[1:])
        return np.ones((2,) + x.shape[1:]) * 0.5

    frame = np.zeros((3, 10, 10))
    tta_predict(predict, frame, TtaConfig(scales=(0.75, 0.05), flip=False))
    assert seen == [(7, 7), (1, 1)]


def test_tta_rejects_empty_scales():
    with pytest.raises(ParameterError):
        tta_predict(lambda x: x, np.zeros((3, 4, 4)), TtaConfig(scales=()))


def test_tta_preserves_normalization():
    rng = np.random.default_rng(6)
    frame = rng.random((3, 9, 9))

    def predict(x):
        p = rng.random((4,) + x.shape[1:]) + 0.1
        return p / p.sum(axis=0)

    out = tta_predict(predict, frame, TtaConfig(scales=(0.5, 1.0), flip=True))
    assert np.max(np.abs(out.sum(axis=0) - 1.0)) < 1e-12


def test_ensemble_single_map_bitwise_passthrough():
    rng = np.random.default_rng(7)
    m = rng.random((4, 5, 5))
    assert np.array_equal(ensemble([m]), m)


def test_ensemble_identical_pair_bitwise_passthrough():
    rng = np.random.default_rng(8)
    m = rng.random((4, 5, 5))
    assert np.array_equal(ensemble([m, m.copy()]), m)


def test_ensemble_weighted_mean():
    a = np.full((2, 2, 2), 1.0)
    b = np.full((2, 2, 2), 3.0)
    out = ensemble([a, b], weights=[3.0, 1.0])
    assert np.max(np.abs(out - 1.5)) < 1e-15


def test_ensemble_weight_normalization_invariance():
    rng = np.random.default_rng(9)
    maps = [rng.random((3, 4, 4)) for _ in range(3)]
    a = ensemble(maps, weights=[1.0, 2.0, 3.0])
    b = ensemble(maps, weights=[10.0, 20.0, 30.0])
    assert np.max(np.abs(a - b)) < 1e-15


def test_ensemble_errors():
    with pytest.raises(ValidationError):
        ensemble([])
    with pytest.raises(ValidationError):
        ensemble([np.ones((2, 2, 2)), np.ones((2, 3, 3))])
    with pytest.raises(ValidationError):
        ensemble([np.ones((2, 2, 2))], weights=[-1.0])
    with pytest.raises(ValidationError):
        ensemble([np.ones((2, 2, 2))], weights=[0.0])


def test_full_scale_list():
    assert len(inference.FULL_SCALES) == 8
    assert 1.0 in inference.FULL_SCALES
    assert all(b > a for a, b in zip(inference.FULL_SCALES,
                                     inference.FULL_SCALES[1:]))
