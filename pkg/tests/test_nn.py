import numpy as np
import pytest

from afa import nn
from afa.nn import Model, ModelSpec, forward, image_spec, load_checkpoint, project, save_checkpoint, synthetic_spec
from afa.tensor import ShapeError, Tensor


def _identity_model(dim=2, num_classes=2, projection_dim=2):
    spec = ModelSpec((dim,), ({"kind": "identity"},), num_classes, projection_dim, projection_hidden=dim)
    params = {"h.w": np.eye(dim, num_classes), "h.b": np.zeros(num_classes),
              "phi.1.w": np.eye(dim), "phi.1.b": np.zeros(dim),
              "phi.2.w": np.eye(dim, projection_dim), "phi.2.b": np.zeros(projection_dim)}
    return Model(spec, 0, params)


class TestSpec:
    def test_default_image_extractor(self):
        spec = image_spec()
        kinds = [layer["kind"] for layer in spec.extractor]
        assert kinds == ["conv", "relu", "pool", "conv", "relu", "pool", "flatten", "fc", "relu"]
        assert spec.feature_dim == 64
        assert spec.projection_dim == 128
        assert spec.hidden_dim == spec.feature_dim

    def test_json_round_trip(self):
        spec = image_spec(channels=(4, 8), hidden=16)
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_shapes_chain(self):
        spec = image_spec((8, 8, 3), channels=(4,), hidden=5)
        shapes = spec.param_shapes()
        assert shapes["g.1.w"] == (3, 3, 3, 4)
        assert shapes["h.w"] == (5, 10)


class TestForward:
    def test_zero_classifier_predicts_class_zero(self):
        model = Model(synthetic_spec(dim=3, num_classes=4))
        model.params["h.w"] = Tensor(np.zeros_like(model.params["h.w"].data))
        acts = forward(model, np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_array_equal(acts.logits.data, 0)
        np.testing.assert_array_equal(acts.prediction(), 0)

    def test_identity_model_prediction(self):
        model = _identity_model()
        assert model.predict(np.array([[0.2, 0.9]]))[0] == 1

    def test_capture_out_of_range(self):
        model = Model(synthetic_spec(widths=(4,)))
        with pytest.raises(ValueError):
            forward(model, np.zeros((1, 2)), capture={3})

    def test_capture_all_agrees_with_logits_only(self, rng):
        model = Model(image_spec((8, 8, 1), channels=(4,), hidden=8), seed=3)
        x = rng.random((3, 8, 8, 1))
        full = forward(model, x, capture="all")
        np.testing.assert_array_equal(full.logits.data, model.logits(x).data)
        assert len(full.layers) == model.spec.depth
        np.testing.assert_array_equal(full.penultimate.data, full.layers[model.spec.depth].data)

    def test_shape_mismatch(self):
        model = Model(synthetic_spec(dim=3))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 4)))

    def test_argmax_invariant_to_logit_shift(self, rng):
        model = Model(synthetic_spec(dim=2, num_classes=3), seed=1)
        x = rng.normal(size=(20, 2))
        before = model.predict(x)
        model.params["h.b"] = Tensor(model.params["h.b"].data + 7.5)
        np.testing.assert_array_equal(model.predict(x), before)


class TestProject:
    def test_unit_norm(self, rng):
        model = Model(synthetic_spec(dim=4), seed=2)
        z = model.embed(rng.normal(size=(10, 4)))
        norms = np.linalg.norm(z.data, axis=1)
        assert np.all((norms > 1 - 1e-5) & (norms < 1 + 1e-5))

    def test_identical_rows_give_identical_embeddings(self):
        model = Model(synthetic_spec(dim=2), seed=0)
        z = model.embed(np.array([[0.5, -0.1], [0.5, -0.1]])).data
        np.testing.assert_array_equal(z[0], z[1])

    def test_identity_head_hand_value(self):
        model = _identity_model()
        np.testing.assert_allclose(project(model, Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], rtol=1e-6)

    def test_width_mismatch(self):
        model = Model(synthetic_spec(dim=2, widths=(4,)))
        with pytest.raises(ValueError):
            project(model, Tensor(np.ones((1, 5))))


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        model = Model(image_spec((8, 8, 1), channels=(4,), hidden=8), seed=5)
        x = rng.random((4, 8, 8, 1)).astype(np.float32)
        path = tmp_path / "m.afa"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.spec == model.spec
        for k in model.params:
            assert np.array_equal(back.params[k].data, model.params[k].data)
        np.testing.assert_array_equal(back.logits(x).data, model.logits(x).data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.afa"
        save_checkpoint(Model(synthetic_spec()), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(nn.CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.afa"
        save_checkpoint(Model(synthetic_spec()), path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(nn.CheckpointVersionError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.afa"
        save_checkpoint(Model(synthetic_spec()), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(nn.CheckpointTruncatedError):
            load_checkpoint(path)

    def test_spec_mismatch(self, tmp_path):
        path = tmp_path / "m.afa"
        save_checkpoint(Model(synthetic_spec(dim=2)), path)
        with pytest.raises(nn.CheckpointShapeError):
            load_checkpoint(path, expected_spec=synthetic_spec(dim=3))

    def test_errors_are_distinct(self):
        kinds = {nn.CheckpointFormatError, nn.CheckpointVersionError, nn.CheckpointTruncatedError,
                 nn.CheckpointShapeError}
        assert len(kinds) == 4 and all(issubclass(k, nn.CheckpointError) for k in kinds)
