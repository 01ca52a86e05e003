from types import SimpleNamespace

import numpy as np
import pytest
from helpers import ConvTapModel
from PIL import Image

from lret.autodiff import Tensor, ops, precision
from lret.autodiff.ops import softmax
from lret.data.images import read_image, to_float
from lret.explain import (
    COLORMAP_STOPS,
    ExplainError,
    colormap,
    explain,
    grad_cam,
    grad_cam_pp,
    normalize_map,
    overlay,
    quadrant_mass,
    read_grid_csv,
    save_overlay,
    score_cam,
    write_grid_csv,
)

METHODS = ("gradcam", "gradcampp", "scorecam")


def test_analytic_single_channel_gradcam_is_normalized_activation():
    model = ConvTapModel(channels=4)
    image = np.random.default_rng(1).random((8, 8, 3))
    hm = grad_cam(model, image, 0, 8)
    expected, _ = normalize_map(model.channel_map(image))
    np.testing.assert_allclose(hm.values, expected, atol=1e-12)
    assert hm.channel_weights[1:].tolist() == [0, 0, 0]
    assert hm.target == "logit" and hm.method == "gradcam" and hm.tap == "t"


def test_analytic_single_channel_gradcampp_is_normalized_activation():
    model = ConvTapModel(channels=4)
    image = np.random.default_rng(2).random((8, 8, 3))
    expected, _ = normalize_map(model.channel_map(image))
    np.testing.assert_allclose(grad_cam_pp(model, image, 0, 8).values, expected, atol=1e-12)


def test_all_methods_agree_on_single_channel_model():
    model = ConvTapModel(channels=1)
    image = np.random.default_rng(3).random((8, 8, 3))
    expected, _ = normalize_map(model.channel_map(image))
    maps = [explain(model, image, 0, 8, m) for m in METHODS]
    for hm in maps:
        assert hm.values.min() >= 0 and hm.values.max() == 1
        assert hm.upsampled.shape == (8, 8)
        np.testing.assert_allclose(hm.values, expected, atol=1e-12)
    assert len({int(np.argmax(hm.values)) for hm in maps}) == 1


def test_gradcampp_uniform_closed_form():
    hw, a, v = 16, 0.5, np.array([0.3, 1.2])

    class Uniform:
        def forward(self, batch, training=False):
            x = batch if isinstance(batch, Tensor) else Tensor(batch)
            scale = Tensor(np.ones(2), requires_grad=True)
            t = x * scale
            logits = ops.dense(ops.global_avg_pool(t), Tensor(np.stack([v, -v], axis=1)))
            return SimpleNamespace(logits=logits, probs=None, taps={"t": t})

    with precision(np.float64):
        hm = grad_cam_pp(Uniform(), np.full((4, 4, 2), a), 0, "t")
    g = v / hw
    alpha = 1 / (2 + hw * a * g)
    np.testing.assert_allclose(hm.channel_weights, hw * alpha * g, rtol=1e-12)
    np.testing.assert_array_equal(hm.values, np.ones((4, 4)))


class TwoChannelScoreModel:
    """Tap channel 0 covers the left half, channel 1 the right; class 0 evidence is brightness on the left."""

    tap_equivalents = {8: "t"}

    def forward(self, batch, training=False):
        x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        n, h, w, _ = x.shape
        a = np.zeros((n, h, w, 2))
        a[:, :, : w // 2, 0] = 1
        a[:, :, w // 2:, 1] = 1
        left = x[:, :, : w // 2].mean(axis=(1, 2, 3))
        logits = np.stack([4 * left, np.zeros(n)], axis=1)
        return SimpleNamespace(logits=Tensor(logits), probs=softmax(logits), taps={"t": Tensor(a)})


def test_scorecam_weights_evidence_channel():
    image = np.zeros((8, 8, 3))
    image[:, :4] = 1
    hm = score_cam(TwoChannelScoreModel(), image, 0, 8)
    assert np.argmax(hm.channel_weights) == 0
    assert hm.channel_weights[0] > hm.channel_weights[1]
    assert hm.values[:, :4].min() == 1 and hm.values[:, 4:].max() == 0
    assert hm.target == "softmax"


@pytest.fixture(scope="module")
def random_conv_model():
    return ConvTapModel(channels=6, classes=3, seed=5, head=np.array([0.7, -0.4, 0.1]))


def test_scorecam_channel_order_invariant(random_conv_model):
    image = np.random.default_rng(4).random((8, 8, 3))
    base = score_cam(random_conv_model, image, 1, 8)
    other = score_cam(random_conv_model, image, 1, 8, batch_size=1, order=list(range(6))[::-1])
    np.testing.assert_allclose(other.channel_weights, base.channel_weights, rtol=1e-12)
    np.testing.assert_allclose(other.values, base.values, atol=1e-12)


def test_scorecam_repeatable(random_conv_model):
    image = np.random.default_rng(5).random((8, 8, 3))
    a = score_cam(random_conv_model, image, 2, 8)
    b = score_cam(random_conv_model, image, 2, 8)
    np.testing.assert_array_equal(a.values, b.values)


def test_scorecam_rejects_bad_order(random_conv_model):
    with pytest.raises(ExplainError):
        score_cam(random_conv_model, np.zeros((8, 8, 3)), 0, 8, order=[0, 0, 1, 2, 3, 4])


def test_scorecam_channel_cost_warning(random_conv_model):
    with pytest.warns(RuntimeWarning):
        hm = score_cam(random_conv_model, np.ones((8, 8, 3)), 0, 8, channel_limit=4)
    assert "channel_cost_warning" in hm.flags


def test_all_zero_map_flagged():
    model = ConvTapModel(channels=2)
    model.kernel.data[...] = -1.0  # relu kills every activation
    hm = grad_cam(model, np.ones((6, 6, 3)), 0, 8)
    assert hm.all_zero and "all_zero_map" in hm.flags
    assert not hm.values.any()


@pytest.mark.parametrize("method", METHODS)
def test_range_and_upsampled_shape(random_conv_model, method):
    image = np.random.default_rng(6).random((8, 8, 3))
    hm = explain(random_conv_model, image, 0, 8, method)
    assert hm.values.shape == (8, 8) and hm.upsampled.shape == (8, 8)
    assert 0 <= hm.values.min() and hm.values.max() <= 1
    assert 0 <= hm.upsampled.min() and hm.upsampled.max() <= 1


def test_unknown_method_lists_choices(random_conv_model):
    with pytest.raises(ExplainError, match=r"\{gradcam, gradcampp, scorecam\}"):
        explain(random_conv_model, np.zeros((8, 8, 3)), 0, 8, "lime")


def test_unknown_layer(random_conv_model):
    with pytest.raises(ExplainError, match="no tap"):
        grad_cam(random_conv_model, np.zeros((8, 8, 3)), 0, 64)


def test_class_out_of_range(random_conv_model):
    with pytest.raises(ExplainError, match="out of range"):
        grad_cam(random_conv_model, np.zeros((8, 8, 3)), 3, 8)


def test_normalize_map_cases():
    np.testing.assert_array_equal(normalize_map(np.full((2, 2), 3.0))[0], np.ones((2, 2)))
    assert normalize_map(np.zeros((2, 2)))[1] is True
    v, flagged = normalize_map(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert not flagged and v.min() == 0 and v.max() == 1 and v[0, 1] == 0.5


def test_colormap_hits_stops():
    for pos, rgb in COLORMAP_STOPS:
        np.testing.assert_allclose(colormap(np.array(pos)), np.array(rgb) / 255)
    mid = colormap(np.array(0.25))  # halfway between the blue and cyan stops
    np.testing.assert_allclose(mid, [0, 0.5, 1.0])


def test_overlay_png(tmp_path, random_conv_model):
    image = np.random.default_rng(7).random((8, 8, 3))
    hm = grad_cam(random_conv_model, image, 0, 8)
    path = tmp_path / "o.png"
    save_overlay(path, image, hm)
    with Image.open(path) as im:
        assert im.size == (8, 8) and im.mode == "RGB"
    np.testing.assert_array_equal(read_image(path), overlay(image, hm.upsampled))


def test_grid_csv_round_trip(tmp_path):
    grid = np.random.default_rng(8).random((5, 7))
    write_grid_csv(tmp_path / "g.csv", grid)
    np.testing.assert_array_equal(read_grid_csv(tmp_path / "g.csv"), grid)


def test_quadrant_mass():
    heat = np.zeros((4, 4))
    heat[2:, 2:] = 1
    heat[0, 0] = 1
    assert quadrant_mass(heat, 3) == pytest.approx(0.8)
    assert quadrant_mass(heat, 0) == pytest.approx(0.2)
    assert quadrant_mass(np.zeros((4, 4)), 1) == 0.0


def test_gradients_cleared_after_cam(localized_model):
    model, manifest, _ = localized_model
    image = to_float(read_image(manifest.resolve(manifest.subset("test")[0])))
    grad_cam(model, image, 0, 32)
    assert all(not np.any(p.grad) for p in model.parameters())


def test_trained_model_localizes_evidence(localized_model):
    model, manifest, regions = localized_model
    masses = []
    for r in manifest.subset("test"):
        image = to_float(read_image(manifest.resolve(r)))
        hm = grad_cam(model, image, manifest.class_index[r.label], 32)
        assert hm.values.shape == (16, 16) and hm.upsampled.shape == (64, 64)
        masses.append(quadrant_mass(hm.upsampled, regions[r.path]))
    assert np.mean(masses) >= 0.6
