import json

import numpy as np
import pytest
from helpers import micro_model_gradient_errors, micro_model_spec

from lret.autodiff import NonFiniteError
from lret.layers import Dense
from lret.model import (
    BackboneSpec,
    ModelSpec,
    ShapeContractError,
    build_model,
    count_params,
    estimate_flops,
    hfe_model_spec,
)
from lret.resizers import GlrSpec, HfeSpec, StaticResizeSpec


def batch(n, size, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3)).astype(np.float32)


class TestGeometry:
    def test_reference_fen_contract(self):
        spec = ModelSpec((1024, 1024, 3), 74, resizer=HfeSpec((1024, 1024, 3), 256),
                         backbone=BackboneSpec(channels=(16, 32, 64, 64)), feature_map_size=(8, 8, 64))
        model = build_model(spec)
        assert model.fen_shape == (8, 8, 64)
        assert model.tap_shapes()["resizer"] == (256, 256, 8)

    def test_ablation_bottleneck(self):
        spec = ModelSpec((1024, 1024, 3), 4, resizer=None, backbone=BackboneSpec(input_channels=3))
        assert build_model(spec).fen_shape[:2] == (32, 32)

    def test_desk_head_input(self):
        model = build_model(hfe_model_spec(256, 64, 4))
        assert model.fen_shape == (2, 2, 64)
        assert model.head.hidden.weight.shape[0] == 64
        out = model.forward(batch(2, 256), training=False)
        assert out.taps["features"].shape == (2, 64)
        assert out.probs.shape == (2, 4)

    def test_tap_equivalents(self):
        model = build_model(hfe_model_spec(256, 64, 4))
        assert model.tap_equivalents == {8: "stage4", 16: "stage3", 32: "stage2", 64: "stage1"}
        shapes = model.tap_shapes()
        assert [shapes[model.tap_equivalents[r]][0] for r in (8, 16, 32, 64)] == [2, 4, 8, 16]

    def test_head_layer_params(self):
        assert count_params(Dense(512, 74, np.random.default_rng(0))) == 37962

    def test_flops_ratio(self):
        bb = BackboneSpec(input_channels=3)
        none = build_model(ModelSpec((256, 256, 3), 4, backbone=bb))
        hfe = build_model(hfe_model_spec(256, 64, 4))
        assert estimate_flops(none) > 2 * estimate_flops(hfe)


class TestContract:
    def test_channel_mismatch_names_layer(self):
        spec = ModelSpec((64, 64, 3), 4, resizer=HfeSpec((64, 64, 3), 32), backbone=BackboneSpec(input_channels=3))
        with pytest.raises(ShapeContractError, match="backbone.stem"):
            build_model(spec)

    def test_indivisible_input(self):
        spec = ModelSpec((48, 48, 3), 4, backbone=BackboneSpec(input_channels=3))
        with pytest.raises(ShapeContractError, match="backbone"):
            build_model(spec)

    def test_feature_map_contract(self):
        spec = hfe_model_spec(128, 64, 4)
        spec.feature_map_size = (8, 8, 64)
        with pytest.raises(ShapeContractError, match="feature_map_size"):
            build_model(spec)

    def test_resizer_input_mismatch(self):
        spec = ModelSpec((128, 128, 3), 4, resizer=HfeSpec((256, 256, 3), 64))
        with pytest.raises(ShapeContractError, match="resizer"):
            build_model(spec)

    def test_batch_shape_checked(self):
        model = build_model(hfe_model_spec(64, 32, 3))
        with pytest.raises(ShapeContractError):
            model.forward(batch(1, 128))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_activation_names_layer(self):
        model = build_model(hfe_model_spec(64, 32, 3))
        model.backbone.stages[1].blocks[0].bn1.running_var[0] = -1.0
        with pytest.raises(NonFiniteError, match="backbone.stages.1.blocks.0"):
            model.forward(batch(1, 64))
        x = batch(1, 64)
        x[0, 3, 3, 0] = np.inf
        with pytest.raises(NonFiniteError, match="resizer"):
            build_model(hfe_model_spec(64, 32, 3)).forward(x)


class TestForward:
    def test_probs_and_determinism(self):
        model = build_model(hfe_model_spec(64, 32, 3))
        x = batch(3, 64)
        a, b = model.forward(x), model.forward(x)
        np.testing.assert_array_equal(a.probs, b.probs)
        np.testing.assert_allclose(a.probs.sum(axis=1), 1, atol=1e-6)

    def test_training_dropout_is_seeded(self):
        x = batch(3, 64)
        a = build_model(hfe_model_spec(64, 32, 3), seed=4).forward(x, training=True)
        b = build_model(hfe_model_spec(64, 32, 3), seed=4).forward(x, training=True)
        np.testing.assert_array_equal(a.logits.data, b.logits.data)

    def test_same_seed_same_parameters(self):
        a = build_model(hfe_model_spec(64, 32, 3), seed=11)
        b = build_model(hfe_model_spec(64, 32, 3), seed=11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_parameter_names_unique_and_prefixed(self):
        model = build_model(hfe_model_spec(64, 32, 3))
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert "hfe.unit1.conv2.kernel" in names
        assert all(n.split(".")[0] in ("hfe", "backbone", "head") for n in names)
        assert all(p.name == n for n, p in model.named_parameters())

    def test_swap_resizer_keeps_head(self):
        hfe = build_model(hfe_model_spec(64, 32, 3))
        glr = build_model(ModelSpec((64, 64, 3), 3, resizer=GlrSpec((64, 64, 3), (32, 32), filters=4),
                                    backbone=BackboneSpec(input_channels=3), head_width=64))
        sa = {n: p.shape for n, p in hfe.named_parameters() if not n.startswith("hfe.")}
        sb = {n: p.shape for n, p in glr.named_parameters() if not n.startswith("glr.")}
        diff = {n for n in sa if sa[n] != sb[n]}
        assert diff == {"backbone.stem.kernel"}
        assert all(sa[n] == sb[n] for n in sa if n.startswith("head."))

    def test_static_resizer_has_no_parameters(self):
        spec = ModelSpec((128, 128, 3), 3, resizer=StaticResizeSpec((64, 64)), backbone=BackboneSpec(input_channels=3))
        model = build_model(spec)
        assert not any(n.startswith("static.") for n, _ in model.named_parameters())
        assert model.forward(batch(1, 128)).taps["resizer"].shape == (1, 64, 64, 3)

    def test_backward_reaches_every_parameter(self):
        model = build_model(micro_model_spec())
        from lret.autodiff import softmax_cross_entropy

        loss, _ = softmax_cross_entropy(model.forward(batch(2, 16), training=True).logits, [0, 1])
        loss.backward()
        for name, p in model.named_parameters():
            if not name.endswith("bias") or name.startswith("head"):
                assert np.abs(p.grad).sum() > 0, name


def test_spec_json_round_trip():
    spec = hfe_model_spec(256, 64, 4)
    spec.feature_map_size = (2, 2, 64)
    again = ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec
    none = ModelSpec((64, 64, 3), 2, backbone=BackboneSpec(input_channels=3))
    assert ModelSpec.from_dict(none.to_dict()).resizer is None


def test_end_to_end_gradients_float64():
    errors = micro_model_gradient_errors(np.float64)
    assert len(errors) == len(list(build_model(micro_model_spec()).named_parameters()))
    assert max(errors.values()) < 1e-2, errors


def test_end_to_end_gradients_float32():
    errors = micro_model_gradient_errors(np.float32, seed=1)
    assert max(errors.values()) < 1e-2, errors
