import math

import numpy as np
import pytest

from softproprio.geometry import chamfer_bidirectional
from softproprio.nn import (
    AdamState,
    ModelConfig,
    ModelError,
    ShapeReconstructor,
    Tensor,
    TrainConfig,
    adam_step,
    build_model,
    grad_cam,
    load_weights,
    save_weights,
    train,
)
from softproprio.nn.tensor import AutodiffError

SMALL = ModelConfig(image_size=16, conv_widths=(4, 8), latent_dim=16, point_hidden=16, decoder_hidden=16)


@pytest.fixture
def proto(rng):
    return rng.uniform(-10, 10, (20, 3)) + [0, 0, 50]


@pytest.fixture
def data(rng):
    images = (rng.random((6, 16, 16)) > 0.7).astype(np.uint8)
    clouds = rng.normal(0, 10, (6, 24, 3))
    return images, clouds


class TestModel:
    def test_output_shape(self, proto, data):
        model = build_model(SMALL, proto)
        out = model(data[0])
        assert out.shape == (6, 20, 3)
        assert model.last_conv.shape == (6, 8, 8, 8)

    def test_default_architecture(self):
        model = build_model(ModelConfig(image_size=64), np.zeros((5, 3)))
        shapes = {k: v.shape for k, v in model.params.items()}
        assert shapes["conv4.weight"] == (3, 3, 128, 256)
        assert shapes["fc.weight"] == (2 * 2 * 256, 512)
        assert shapes["fold1.weight"] == (3, 512)
        assert shapes["fold3.weight"] == (1024, 512)
        assert shapes["fold4.weight"] == (512, 3)

    def test_bad_image_size(self, proto):
        with pytest.raises(ModelError):
            ModelConfig(image_size=20, conv_widths=(4, 8, 16))
        model = build_model(SMALL, proto)
        with pytest.raises(ModelError):
            model(np.zeros((1, 32, 32)))

    def test_prototype_permutation_equivariance(self, proto, data):
        model = build_model(SMALL, proto, seed=3)
        perm = np.random.default_rng(1).permutation(len(proto))
        a = model.predict(data[0])
        model.prototype = proto[perm]
        b = model.predict(data[0])
        np.testing.assert_allclose(b, a[:, perm], atol=1e-4)

    def test_deterministic(self, proto, data):
        a = build_model(SMALL, proto, seed=5).predict(data[0])
        b = build_model(SMALL, proto, seed=5).predict(data[0])
        np.testing.assert_array_equal(a, b)

    def test_prototype_validation(self):
        with pytest.raises(ModelError):
            build_model(SMALL, np.zeros((0, 3)))


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.array([0.5, -4.0, 1e-3])
        adam_step([p], TrainConfig(learning_rate=0.1, weight_decay=0.0), AdamState())
        np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-5)
        assert p.grad is None

    def test_decoupled_decay_only(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.zeros(1)
        adam_step([p], TrainConfig(learning_rate=0.5, weight_decay=0.1), AdamState())
        np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.1 * 2.0])

    def test_two_steps_oracle(self):
        cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0)
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState()
        grads = [1.0, -3.0]
        m = v = 0.0
        x = 0.0
        for t, g in enumerate(grads, start=1):
            p.grad = np.array([g])
            adam_step([p], cfg, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, rel=1e-12)

    def test_missing_gradient(self):
        p = Tensor(np.ones(2), requires_grad=True, name="w")
        with pytest.raises(AutodiffError, match="w"):
            adam_step([p], TrainConfig(), AdamState())


class TestTraining:
    def test_zero_lr_keeps_weights(self, proto, data):
        model = build_model(SMALL, proto)
        before = model.state_dict()
        cfg = TrainConfig(batch_size=3, learning_rate=0.0, weight_decay=0.0, epochs=2)
        train(model, data, data, cfg)
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_history_deterministic(self, proto, data):
        cfg = TrainConfig(batch_size=2, learning_rate=1e-3, epochs=3, seed=4)
        _, h1 = train(build_model(SMALL, proto), data, data, cfg)
        _, h2 = train(build_model(SMALL, proto), data, data, cfg)
        assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
        assert h1.epochs == [1, 2, 3]

    def test_batch_larger_than_set(self, proto, data):
        with pytest.raises(ModelError):
            train(build_model(SMALL, proto), data, data, TrainConfig(batch_size=50, epochs=1))

    def test_overfit_single_sample(self, spec):
        from softproprio.simulator import LoadCase, simulate, surface_cloud, undeformed_mesh

        # full-resolution clouds: at 512 points the sample spacing alone keeps Chamfer above 1 mm
        proto = surface_cloud(undeformed_mesh(spec), 3174).points
        target = surface_cloud(simulate(spec, LoadCase(actuation_volume=15.0)), 3174).points
        image = np.zeros((1, 32, 32), dtype=np.uint8)
        image[0, 10:16, 10:16] = 1
        model = build_model(ModelConfig(image_size=32), proto, seed=0)
        cfg = TrainConfig(batch_size=1, learning_rate=1e-4, epochs=200)
        model, hist = train(model, (image, target[None]), (image, target[None]), cfg)
        assert chamfer_bidirectional(model.predict(image)[0], target) < 0.01 * spec.length
        assert hist.val_loss[hist.best_epoch - 1] == min(hist.val_loss)

    def test_history_csv(self, proto, data, tmp_path):
        _, h = train(build_model(SMALL, proto), data, data, TrainConfig(batch_size=3, epochs=2))
        h.write_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3


class TestWeights:
    def test_round_trip(self, proto, data, tmp_path):
        # stored prototypes are float32; start from one that is exactly representable
        model = build_model(SMALL, proto.astype(np.float32), seed=2)
        save_weights(model, tmp_path / "m.weights")
        back = load_weights(tmp_path / "m.weights")
        np.testing.assert_array_equal(back.predict(data[0]), model.predict(data[0]))
        assert back.config == model.config

    def test_truncated(self, proto, tmp_path):
        path = tmp_path / "m.weights"
        save_weights(build_model(SMALL, proto), path)
        raw = path.read_bytes()
        for cut in (5, 20, len(raw) - 3):
            path.write_bytes(raw[:cut])
            with pytest.raises(ModelError, match="unexpected end"):
                load_weights(path)

    def test_bad_magic_and_version(self, proto, tmp_path):
        path = tmp_path / "m.weights"
        save_weights(build_model(SMALL, proto), path)
        raw = path.read_bytes()
        path.write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(ModelError, match="magic"):
            load_weights(path)
        path.write_bytes(raw[:7] + b"9" + raw[8:])
        with pytest.raises(ModelError, match="version"):
            load_weights(path)

    def test_shape_mismatch_names_tensor(self, proto, tmp_path):
        import json
        import struct

        path = tmp_path / "m.weights"
        save_weights(build_model(SMALL, proto), path)
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + hlen])
        for t in header["tensors"]:
            if t["name"] == "fold4.bias":
                t["shape"] = [1, 3]
        blob = json.dumps(header).encode()
        path.write_bytes(raw[:8] + struct.pack("<I", len(blob)) + blob + raw[12 + hlen :])
        with pytest.raises(ModelError, match="fold4.bias"):
            load_weights(path)


class TestGradCam:
    def test_zero_image_zero_bias(self, proto):
        model = build_model(SMALL, proto)
        cam = grad_cam(model, np.zeros((16, 16), dtype=np.uint8), np.zeros((10, 3)))
        assert cam.heatmap.shape == (8, 8)
        assert not cam.heatmap.any()
        assert cam.overlay.shape == (16, 16)

    def test_range_and_normalisation(self, proto, data):
        model = build_model(SMALL, proto, seed=1)
        for img, cloud in zip(*data):
            cam = grad_cam(model, img, cloud)
            assert cam.heatmap.min() >= 0 and cam.heatmap.max() <= 1
            assert cam.heatmap.max() in (0.0, 1.0)

    def test_loss_scale_invariance(self, proto, data):
        model = build_model(SMALL, proto, seed=1)
        a = grad_cam(model, data[0][0], data[1][0])
        b = grad_cam(model, data[0][0], data[1][0], loss_scale=37.5)
        np.testing.assert_allclose(a.heatmap, b.heatmap, atol=1e-6)

    def test_leaves_no_gradients(self, proto, data):
        model = build_model(SMALL, proto)
        grad_cam(model, data[0][0], data[1][0])
        assert all(p.grad is None for p in model.parameters())

    def test_marker_ratio(self):
        from softproprio.nn import GradCamMap

        overlay = np.zeros((8, 8))
        overlay[2:4, 2:4] = 1.0
        overlay[6, 6] = 0.5
        image = np.zeros((8, 8), dtype=np.uint8)
        image[2:4, 2:4] = 1
        ratio = GradCamMap(overlay, overlay).marker_ratio(image, dilate=0)
        assert ratio == pytest.approx(1.0 / (0.5 / 60))


class TestEstimator:
    def test_fit_predict(self, proto, data):
        est = ShapeReconstructor(prototype=proto, conv_widths=(4, 8), batch_size=3, epochs=2, learning_rate=1e-3)
        assert est.get_params()["epochs"] == 2
        est.fit(*data)
        assert est.predict(data[0]).shape == (6, 20, 3)
        assert est.transform(data[0]).shape == (6, 512)
        assert est.score(*data) <= 0

    def test_input_validation(self, proto):
        est = ShapeReconstructor(prototype=proto)
        with pytest.raises(ValueError):
            est.fit(np.full((2, 16, 16), 3), np.zeros((2, 4, 3)))
        with pytest.raises(ValueError):
            est.fit(np.zeros((2, 16, 16)), np.zeros((3, 4, 3)))


def test_parameters_share_model_dtype(proto):
    model = build_model(SMALL, proto)
    assert {p.dtype for p in model.parameters()} == {np.dtype(np.float32)}


def test_adam_scalar_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step([p], TrainConfig(learning_rate=0.1, weight_decay=0.0), AdamState())
    assert abs(p.data[0] - 0.9) < 1e-6


def test_adam_zero_gradient_no_decay():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step([p], TrainConfig(weight_decay=0.0), AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("seed", range(5))
def test_adam_convex_quadratic(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 6))
    hess = a @ a.T + 0.5 * np.eye(6)
    target = rng.standard_normal(6)
    p = Tensor(np.zeros(6), requires_grad=True)
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0)
    state = AdamState()
    losses = []
    for _ in range(500):
        d = p.data - target
        losses.append(0.5 * d @ hess @ d)
        p.grad = hess @ d
        adam_step([p], cfg, state)
    assert np.all(np.diff(losses[10:]) < 0)
