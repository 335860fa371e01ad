import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgsasr.config import SaliencyConfig
from sgsasr.errors import ConfigError, InputError
from sgsasr.saliency import (LuminanceSaliency, OnnxSaliency, SaliencyPyramid, detect_saliency,
                             luminance_saliency, make_backend)


def test_black_and_white_images_give_empty_maps():
    for value in (0.0, 1.0):
        img = np.full((32, 32, 1), value, dtype=np.float32)
        s = detect_saliency(img, LuminanceSaliency())
        assert s.shape == (32, 32, 1)
        assert not s.any()


def test_bright_patch_is_exactly_salient():
    img = np.zeros((10, 10, 1))
    img[3:6, 4:7] = 1.0
    # oracle: threshold evaluated by hand with the population std
    mean = 9 / 100
    std = np.sqrt(9 / 100 - mean**2)
    tau = mean + 0.5 * std
    assert tau == pytest.approx(0.2331, abs=1e-4)
    expected = (img[..., 0] > tau).astype(float)
    s = luminance_saliency(img, 0.5)
    np.testing.assert_array_equal(s[..., 0], expected)
    assert s[3:6, 4:7].all() and s.sum() == 9


def test_half_split_k0():
    img = np.zeros((8, 8, 1))
    img[:, 4:] = 1.0
    s = luminance_saliency(img, 0.0)
    np.testing.assert_array_equal(s[..., 0], img[..., 0])


def test_matches_per_pixel_loop(rng):
    img = rng.random((17, 13, 3))
    k = 0.7
    lum = img.mean(axis=-1)
    tau = lum.mean() + k * lum.std()
    expected = np.zeros_like(lum)
    for i in range(lum.shape[0]):
        for j in range(lum.shape[1]):
            expected[i, j] = 1.0 if lum[i, j] > tau else 0.0
    np.testing.assert_array_equal(luminance_saliency(img, k)[..., 0], expected)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (9, 7, 3), elements=st.floats(0, 1)), st.permutations([0, 1, 2]),
       st.floats(0, 3))
def test_range_and_channel_permutation_invariance(img, perm, k):
    s = luminance_saliency(img, k)
    assert s.shape == (9, 7, 1)
    assert set(np.unique(s)) <= {0.0, 1.0}
    np.testing.assert_array_equal(s, luminance_saliency(img[..., perm], k))


def test_batched_tensor_is_per_image():
    a = torch.zeros(1, 1, 8, 8)
    a[..., :2, :2] = 1
    b = torch.full((1, 1, 8, 8), 0.3)
    s = luminance_saliency(torch.cat([a, b]), 0.5)
    assert s.shape == (2, 1, 8, 8)
    assert s[0].sum() == 4 and s[1].sum() == 0


def test_channel_count_validation():
    with pytest.raises(InputError):
        detect_saliency(np.zeros((8, 8, 2)), LuminanceSaliency())
    with pytest.raises(InputError):
        luminance_saliency(np.zeros((8, 8, 1)), -1)


def test_missing_model_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        make_backend(SaliencyConfig(backend="external", model_path=str(tmp_path / "nope.onnx")))
    bad = tmp_path / "bad.onnx"
    bad.write_bytes(b"not a model")
    with pytest.raises(ConfigError):
        OnnxSaliency(bad)


def _sigmoid_model(path):
    onnx = pytest.importorskip("onnx")
    from onnx import TensorProto, helper

    inp = helper.make_tensor_value_info("image", TensorProto.FLOAT, ["N", "C", "H", "W"])
    out = helper.make_tensor_value_info("saliency", TensorProto.FLOAT, ["N", 1, "H", "W"])
    axes = helper.make_tensor("axes", TensorProto.INT64, [1], [1])
    nodes = [
        helper.make_node("ReduceMean", ["image", "axes"], ["lum"], keepdims=1),
        helper.make_node("Sigmoid", ["lum"], ["saliency"]),
    ]
    graph = helper.make_graph(nodes, "lum_sigmoid", [inp], [out], initializer=[axes])
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 18)])
    model.ir_version = 9
    onnx.save(model, path)


def test_external_backend_runs_frozen(tmp_path):
    pytest.importorskip("onnxruntime")
    path = tmp_path / "sal.onnx"
    _sigmoid_model(str(path))
    backend = make_backend(SaliencyConfig(backend="external", model_path=str(path)))
    x = torch.rand(2, 3, 12, 10, requires_grad=True)
    s = detect_saliency(x, backend)
    assert s.shape == (2, 1, 12, 10)
    assert not s.requires_grad
    expected = torch.sigmoid(x.detach().mean(1, keepdim=True))
    torch.testing.assert_close(s, expected, atol=1e-6, rtol=0)
    assert 0 <= s.min() and s.max() <= 1


def test_pyramid_shapes():
    pyr = SaliencyPyramid([32, 64, 128, 256])
    feats = pyr(torch.rand(1, 1, 64, 64))
    assert [tuple(f.shape[1:]) for f in feats] == [(32, 64, 64), (64, 32, 32), (128, 16, 16), (256, 8, 8)]
    for a, b in zip(feats[:-1], feats[1:]):
        assert b.shape[-1] * 2 == a.shape[-1]
    single = SaliencyPyramid([8])(torch.rand(1, 1, 10, 6))
    assert len(single) == 1 and single[0].shape == (1, 8, 10, 6)


def test_pyramid_zero_weights_and_divisibility():
    pyr = SaliencyPyramid([4, 8, 16])
    for p in pyr.parameters():
        torch.nn.init.zeros_(p)
    assert all(not f.any() for f in pyr(torch.rand(1, 1, 16, 16)))
    with pytest.raises(InputError):
        pyr(torch.rand(1, 1, 18, 16))
