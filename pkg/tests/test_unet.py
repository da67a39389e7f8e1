"""Model assembly, parameter counting, persistence, full-network gradients."""

import numpy as np
import pytest

from irrseg.errors import (
    BadMagicError,
    ConfigMismatchError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)
from irrseg.tensor import Tensor, gradient_check, masked_cross_entropy
from irrseg.unet import (
    UNetConfig,
    build,
    count_params,
    load_model,
    load_params,
    save_params,
)


def param_count_formula(in_channels, num_classes, base, depth):
    """Closed-form learnable-parameter count, independent of the model code."""
    total = 0

    def double_conv(cin, cout):
        # two 3x3 convs with bias, each followed by batchnorm (gamma + beta)
        return (9 * cin * cout + cout + 2 * cout) + (9 * cout * cout + cout + 2 * cout)

    ch = in_channels
    for s in range(depth):
        out = base * 2 ** s
        total += double_conv(ch, out)
        ch = out
    total += double_conv(ch, base * 2 ** depth)
    ch = base * 2 ** depth
    for s in reversed(range(depth)):
        skip = base * 2 ** s
        total += double_conv(skip + ch, skip)
        ch = skip
    total += ch * num_classes + num_classes  # 1x1 head
    return total


class TestBuildAndCount:
    def test_paper_scale_parameter_count(self):
        config = UNetConfig(in_channels=36, num_classes=3, base_filters=32, depth=4)
        model = build(config)
        n = model.param_count()
        assert 7.0e6 <= n <= 9.0e6
        assert n == param_count_formula(36, 3, 32, 4)
        assert n == count_params(config)

    def test_width_doubling_ratio(self):
        n32 = param_count_formula(36, 3, 32, 4)
        n64 = param_count_formula(36, 3, 64, 4)
        config64 = UNetConfig(in_channels=36, num_classes=3, base_filters=64, depth=4)
        model64 = build(config64)
        assert model64.param_count() == n64
        assert count_params(config64) == n64
        assert 3.7 <= n64 / n32 <= 4.0

    def test_count_params_matches_small_builds(self):
        for base, depth, cin in ((2, 1, 3), (4, 2, 7), (8, 3, 36)):
            config = UNetConfig(in_channels=cin, num_classes=3, base_filters=base, depth=depth)
            assert count_params(config) == build(config).param_count()

    def test_minimal_instance(self):
        model = build(UNetConfig(in_channels=1, num_classes=2, base_filters=1, depth=1))
        probs = model.forward(Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32)), "train")
        assert probs.shape == (1, 2, 16, 16)

    def test_single_1x1_conv_scale(self):
        # smallest double-conv model still counts head params 1*1*1 + 1 = 2
        model = build(UNetConfig(in_channels=1, num_classes=1, base_filters=1, depth=1))
        head = model.named_params()["head.weight"].size + model.named_params()["head.bias"].size
        assert head == 2

    def test_indivisible_tile_rejected(self):
        model = build(UNetConfig(in_channels=2, num_classes=3, base_filters=2, depth=2))
        with pytest.raises(ShapeError, match="divisible"):
            model.forward(Tensor(np.zeros((1, 2, 10, 12), dtype=np.float32)), "train")


class TestForward:
    @pytest.fixture()
    def small_model(self):
        model = build(UNetConfig(in_channels=4, num_classes=3, base_filters=4, depth=2, seed=9))
        # one train-mode pass seeds the running statistics for inference
        rng = np.random.default_rng(0)
        model.forward(Tensor(rng.standard_normal((2, 4, 16, 16)).astype(np.float32)), "train")
        return model

    def test_output_is_distribution(self, small_model):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
        probs = small_model.forward(x, "infer")
        assert np.abs(probs.data.sum(axis=1) - 1.0).max() < 1e-5
        assert (probs.data >= 0).all()

    def test_spatial_size_preserved(self, small_model):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((1, 4, 32, 16)).astype(np.float32))
        probs = small_model.forward(x, "infer")
        assert probs.shape == (1, 3, 32, 16)

    def test_infer_deterministic(self, small_model):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
        a = small_model.forward(x, "infer").data
        b = small_model.forward(x, "infer").data
        assert np.array_equal(a, b)

    def test_channel_mismatch(self, small_model):
        with pytest.raises(ShapeError, match="channels"):
            small_model.forward(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)), "infer")


class TestFullNetworkGradients:
    def test_tiny_unet_loss_gradcheck(self):
        """Directional derivatives of the full loss through the fd harness.

        Per-coordinate checks on a float32 forward drown tiny gradients in
        rounding and relu/pool kink noise; a random direction keeps the
        analytic value O(1) while still covering every backward wire (a
        mis-paired skip or dropped term shifts the directional sum).
        """
        rng = np.random.default_rng(99)
        config = UNetConfig(in_channels=2, num_classes=3, base_filters=2, depth=2, seed=7)
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        labels = rng.integers(1, 4, size=(1, 8, 8)).astype(np.uint8)

        model = build(config)
        names = list(model.named_params())
        theta0 = [model.named_params()[n].copy() for n in names]

        for trial in range(5):
            direction = [rng.standard_normal(p.shape).astype(np.float32) for p in theta0]

            def fn(params):
                (t,) = params
                for name, base, d in zip(names, theta0, direction):
                    model.set_param(name, (base + np.float32(t[0]) * d).astype(np.float32))
                probs = model.forward(Tensor(x), "train")
                loss, grad = masked_cross_entropy(probs, labels)
                grads = model.backward(grad)
                directional = sum(
                    float((grads[n].astype(np.float64) * d).sum())
                    for n, d in zip(names, direction)
                )
                return loss, [np.array([directional])]

            # eps balances truncation (direction spans every parameter) against
            # float32 rounding noise; two step sizes so a relu/pool kink sitting
            # exactly under one step cannot fail a correct gradient
            err = min(
                gradient_check(fn, [np.zeros(1)], eps=1e-4, samples=1, rng=rng),
                gradient_check(fn, [np.zeros(1)], eps=5e-5, samples=1, rng=rng),
            )
            assert err < 1e-2, f"direction {trial}: rel error {err}"  # 32-bit forward precision


class TestPersistence:
    def make_model(self, seed=5):
        model = build(UNetConfig(in_channels=3, num_classes=3, base_filters=2, depth=2, seed=seed))
        rng = np.random.default_rng(seed)
        model.forward(Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32)), "train")
        return model

    def test_roundtrip_byte_identical(self, tmp_path):
        model = self.make_model()
        p1, p2 = tmp_path / "a.unp", tmp_path / "b.unp"
        save_params(model, p1)
        reloaded = load_model(p1)
        save_params(reloaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_preserves_inference(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "m.unp"
        save_params(model, path)
        reloaded = load_model(path)
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
        assert np.array_equal(model.forward(x, "infer").data, reloaded.forward(x, "infer").data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.unp"
        save_params(self.make_model(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_params(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.unp"
        save_params(self.make_model(), path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_params(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "m.unp"
        save_params(self.make_model(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(TruncatedFileError):
            load_params(path)

    def test_config_mismatch_names_field(self, tmp_path):
        path = tmp_path / "m.unp"
        save_params(self.make_model(), path)
        with pytest.raises(ConfigMismatchError, match="base_filters"):
            load_model(path, expect=UNetConfig(in_channels=3, num_classes=3, base_filters=4, depth=2))

    def test_same_seed_same_init(self):
        a = build(UNetConfig(in_channels=2, num_classes=3, base_filters=2, depth=1, seed=42))
        b = build(UNetConfig(in_channels=2, num_classes=3, base_filters=2, depth=1, seed=42))
        for (na, va), (nb, vb) in zip(a.named_params().items(), b.named_params().items()):
            assert na == nb
            assert np.array_equal(va, vb)
