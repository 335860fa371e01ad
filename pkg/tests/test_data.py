import numpy as np
import pytest

from sgsasr.config import TrainConfig
from sgsasr.data import (ImageFolder, SampleStream, SynthSpec, bicubic_resize, cubic_kernel,
                         load_image_folder, make_training_sample, read_image, resize_weights,
                         synth_spacecraft_image, write_image)
from sgsasr.errors import DatasetError, InputError


def test_empty_scene_is_black():
    spec = SynthSpec(size=32, bodies=0, panel_pairs=0, antennas=0, noise_sigma=0)
    assert not synth_spacecraft_image(spec, np.random.default_rng(0)).any()


def test_synth_deterministic_and_in_range():
    spec = SynthSpec(size=48)
    a = synth_spacecraft_image(spec, np.random.default_rng(7))
    b = synth_spacecraft_image(spec, np.random.default_rng(7))
    assert np.array_equal(a, b)
    assert a.shape == (48, 48, 1) and a.dtype == np.float32
    assert 0 <= a.min() and a.max() <= 1
    assert synth_spacecraft_image(SynthSpec(size=16, channels=3), np.random.default_rng(0)).shape == (16, 16, 3)


def test_synth_background_fraction():
    spec = SynthSpec(size=64)
    for seed in range(100):
        img = synth_spacecraft_image(spec, np.random.default_rng(seed))
        assert np.mean(img < 0.05) >= 0.4, seed


def test_cubic_kernel_closed_form():
    a = -0.5
    # (a+2)|x|^3 - (a+3)|x|^2 + 1 on [0, 1]; a|x|^3 - 5a|x|^2 + 8a|x| - 4a on [1, 2)
    expected = {0.0: 1.0, 0.25: 1.5 / 64 - 2.5 / 16 + 1, 0.5: 1.5 / 8 - 2.5 / 4 + 1,
                1.5: a * 3.375 - 5 * a * 2.25 + 8 * a * 1.5 - 4 * a, 2.5: 0.0}
    for x, v in expected.items():
        assert cubic_kernel(x) == pytest.approx(v, abs=1e-15)
        assert cubic_kernel(-x) == pytest.approx(v, abs=1e-15)
    assert cubic_kernel(0.25) == 0.8671875 and cubic_kernel(0.5) == 0.5625


def test_resize_constant_and_identity(rng):
    const = np.full((37, 29, 1), 0.7)
    for size in [(5, 9), (37, 29), (80, 61)]:
        np.testing.assert_allclose(bicubic_resize(const, *size), 0.7, atol=1e-6)
    img = rng.random((21, 17, 3))
    np.testing.assert_allclose(bicubic_resize(img, 21, 17), img, atol=1e-6)
    assert bicubic_resize(rng.random((96, 96, 1)), 24, 24).shape == (24, 24, 1)
    np.testing.assert_allclose(resize_weights(30, 7).sum(1), 1.0)


def test_resize_weights_upsample_taps_follow_kernel():
    # x2 upsampling: output pixel j samples source position (j + 0.5) / 2 - 0.5
    w = resize_weights(10, 20)
    u = (5 + 0.5) / 2 - 0.5  # 2.25
    expected = np.zeros(10)
    for i in range(10):
        expected[i] = cubic_kernel(u - i)
    np.testing.assert_allclose(w[5], expected / expected.sum(), atol=1e-12)


def test_training_sample_scale_one_is_identity(rng):
    hr = rng.random((40, 40, 1)).astype(np.float32)
    s = make_training_sample(hr, (1.0, 1.0), 16, rng)
    y0, x0 = s.origin
    np.testing.assert_allclose(s.lr, hr[y0:y0 + 16, x0:x0 + 16], atol=1e-6)


def test_training_sample_shapes_and_targets(rng):
    hr = rng.random((200, 210, 3)).astype(np.float32)
    s = make_training_sample(hr, (1.0, 4.0), 48, rng, scale=4.0)
    assert s.hr_size == 192 and s.lr.shape == (48, 48, 3)
    assert s.coord.shape == (2304, 2) and s.gt.shape == (2304, 3)
    np.testing.assert_allclose(s.cell, 2 / 192)
    assert np.all(np.abs(s.coord) <= 1) and 0 <= s.gt.min() and s.gt.max() <= 1
    y0, x0 = s.origin
    crop = hr[y0:y0 + 192, x0:x0 + 192]
    for q in range(0, 2304, 97):
        r, c = divmod(int(s.index[q]), 192)
        np.testing.assert_array_equal(s.gt[q], crop[r, c])
        # the coordinate sits exactly on that pixel centre
        assert s.coord[q, 0] == np.float32(-1 + (2 * r + 1) / 192)
        assert s.coord[q, 1] == np.float32(-1 + (2 * c + 1) / 192)


def test_training_sample_too_small():
    with pytest.raises(InputError):
        make_training_sample(np.zeros((50, 50, 1)), (1, 4), 48, np.random.default_rng(0))


def test_sample_stream_is_replayable():
    imgs = [np.random.default_rng(i).random((40, 40, 1)).astype(np.float32) for i in range(5)]
    cfg = TrainConfig(batch_size=2, patch_size=8, scale_max=3)
    a, b = SampleStream(imgs, cfg, 3), SampleStream(imgs, cfg, 3)
    assert a.steps_per_epoch == 3
    for key in ("lr", "coord", "gt"):
        assert np.array_equal(a.batch(2, 1)[key].numpy(), b.batch(2, 1)[key].numpy())
    assert a.order_hash(4) == b.order_hash(4)
    assert a.order_hash(4) != SampleStream(imgs, cfg, 4).order_hash(4)
    assert a.batch(0, 2)["lr"].shape[0] == 1  # final partial batch


def test_image_folder(tmp_path, rng):
    for name in ("b.png", "a.png", "c.png"):
        write_image(tmp_path / name, rng.random((6, 5, 1)))
    ds = load_image_folder(tmp_path)
    assert len(ds) == 3 and [p.name for p in ds.files] == ["a.png", "b.png", "c.png"]
    assert len(list(ds)) == 3


def test_png_normalisation_and_round_trip(tmp_path, rng):
    white = np.ones((4, 4, 1))
    write_image(tmp_path / "w.png", white)
    assert read_image(tmp_path / "w.png").max() == 1.0
    img = rng.random((13, 11, 3))
    write_image(tmp_path / "r.png", img)
    back = read_image(tmp_path / "r.png")
    assert back.shape == (13, 11, 3)
    assert np.abs(back - img).max() <= 1 / 255


def test_folder_errors(tmp_path):
    with pytest.raises(DatasetError):
        ImageFolder(tmp_path)
    (tmp_path / "x.png").write_bytes(b"garbage")
    ds = ImageFolder(tmp_path)
    with pytest.raises(DatasetError, match="x.png"):
        ds[0]
    with pytest.raises(DatasetError):
        ImageFolder(tmp_path / "missing")
