import numpy as np
import pytest

from attenlab import layers as L
from attenlab.errors import ConfigError, DimensionError, FormatError
from attenlab.model import (
    ModelConfig,
    PRESETS,
    StageSpec,
    build,
    forward,
    load_checkpoint,
    predict,
    preset,
    save_checkpoint,
)
from attenlab.tensor import grad_check


def tiny_config(**kw):
    base = dict(input_size=8, stages=(StageSpec(1, 4), StageSpec(1, 6, pool=False)), head_widths=(8, 6, 4))
    base.update(kw)
    return ModelConfig(**base)


def composite_config():
    """hienet-mini widths at 8x8 input; the last stage keeps a 2x2 map for attention."""
    return preset("hienet-mini", input_size=8, stages=(StageSpec(1, 16), StageSpec(1, 32), StageSpec(1, 64, pool=False)))


def randomise_statistics(model, rng):
    """Non-trivial running statistics so infer-mode batch norm is not the identity."""
    for name, value in model._named_state():
        if isinstance(value, tuple):
            bn, attr = value
            size = getattr(bn, attr).shape
            setattr(bn, attr, rng.uniform(-0.2, 0.2, size) if attr == "running_mean" else rng.uniform(0.5, 1.5, size))
        elif name.endswith(".gamma") or name.endswith(".beta"):
            value.data = rng.uniform(0.5, 1.5, value.shape) if name.endswith(".gamma") else rng.normal(0, 0.2, value.shape)


class TestConfig:
    def test_presets_validate(self):
        for cfg in PRESETS.values():
            cfg.validate()

    def test_mini_shapes(self):
        cfg = preset("hienet-mini")
        assert cfg.feature_side == 8
        assert cfg.head_input_size == 3 * 64 * (1 + 64)

    def test_full_preset_is_vgg_sized(self):
        cfg = preset("hienet-full")
        assert [s.convs for s in cfg.stages] == [2, 2, 3, 3, 3]
        assert cfg.feature_side == 7 and cfg.feature_channels == 512

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("resnet")

    def test_pooled_away(self):
        with pytest.raises(ConfigError):
            build(ModelConfig(input_size=4))

    def test_head_must_end_in_class_count(self):
        with pytest.raises(ConfigError):
            build(tiny_config(head_widths=(8, 6, 3)))

    def test_dict_round_trip_and_hash(self):
        cfg = tiny_config()
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()
        assert tiny_config(seed=8).config_hash() != cfg.config_hash()


class TestBuild:
    def test_same_seed_same_parameters(self):
        a, b = build(tiny_config()), build(tiny_config())
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a, b = build(tiny_config(seed=1)), build(tiny_config(seed=2))
        assert not np.array_equal(a.parameters()[0].data, b.parameters()[0].data)

    def test_ablation_has_no_attention_parameters(self):
        m = build(tiny_config(use_position_attention=False, use_channel_attention=False))
        names = [n for n, _ in m.named_parameters()]
        assert not any(n.startswith(("position", "channel")) for n in names)
        assert m.head[0][0].shape[0] == 6 * (1 + 16)


class TestForward:
    def test_mini_output_is_distribution(self):
        m = build(preset("hienet-mini"))
        x = np.random.default_rng(0).normal(size=(2, 64, 64, 3))
        out = forward(m, x, "infer")
        assert out.probs.shape == (2, 4)
        np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-6)
        assert set(out.probs.data.argmax(axis=1)) <= {0, 1, 2, 3}

    def test_infer_is_pure(self):
        m = build(tiny_config())
        x = np.random.default_rng(1).normal(size=(3, 8, 8, 3))
        np.testing.assert_array_equal(predict(m, x), predict(m, x))

    def test_infer_independent_of_batch_composition(self):
        m = build(tiny_config())
        x = np.random.default_rng(2).normal(size=(4, 8, 8, 3))
        # BLAS may block a 4-row product differently from a 1-row one
        np.testing.assert_allclose(predict(m, x)[:1], predict(m, x[:1]), rtol=0, atol=1e-12)

    def test_train_mode_updates_statistics(self):
        m = build(tiny_config())
        before = m.backbone[0][0].bn.running_mean.copy()
        forward(m, np.random.default_rng(3).normal(size=(2, 8, 8, 3)), "train")
        assert not np.array_equal(before, m.backbone[0][0].bn.running_mean)

    def test_exposes_maps(self):
        m = build(tiny_config())
        out = forward(m, np.zeros((1, 8, 8, 3)), "infer")
        assert out.features.shape == (1, 4, 4, 6)
        assert out.position.shape == out.channel.shape == out.features.shape
        assert out.merged.shape == (1, 4, 4, 18)

    def test_ablation_forward(self):
        m = build(tiny_config(use_position_attention=False, use_channel_attention=False))
        out = forward(m, np.zeros((1, 8, 8, 3)), "infer")
        assert out.position is None and out.channel is None
        assert out.merged.shape == (1, 4, 4, 6)

    def test_wrong_input_size(self):
        with pytest.raises(DimensionError):
            forward(build(tiny_config()), np.zeros((1, 9, 9, 3)))

    def test_composite_gradient_wrt_input(self):
        model = build(composite_config())
        randomise_statistics(model, np.random.default_rng(4))
        labels = np.array([1, 3])

        def loss(x):
            return L.cross_entropy(forward(model, x, "infer").probs, labels)

        x0 = np.random.default_rng(5).normal(size=(2, 8, 8, 3))
        assert grad_check(loss, x0, max_elems=96) <= 1e-3

    def test_composite_gradient_wrt_attention_kernel(self):
        model = build(composite_config())
        randomise_statistics(model, np.random.default_rng(6))
        x = np.random.default_rng(7).normal(size=(2, 8, 8, 3))
        conv = model.position.conv_q
        start = conv.kernel.data.copy()

        def loss(k):
            conv.kernel = k
            return L.cross_entropy(forward(model, x, "infer").probs, np.array([0, 2]))

        assert grad_check(loss, start, max_elems=64) <= 1e-3


class TestCheckpoint:
    def test_round_trip_equals_quantized_model(self, tmp_path):
        m = build(tiny_config())
        forward(m, np.random.default_rng(8).normal(size=(4, 8, 8, 3)), "train")
        save_checkpoint(m, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        x = np.random.default_rng(9).normal(size=(3, 8, 8, 3))
        np.testing.assert_array_equal(predict(loaded, x), predict(m.quantized(), x))

    def test_save_is_deterministic(self, tmp_path):
        m = build(tiny_config())
        save_checkpoint(m, tmp_path / "a.ckpt")
        save_checkpoint(m, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_header(self, tmp_path):
        save_checkpoint(build(tiny_config()), tmp_path / "m.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes().startswith(b"HIEN1\n{")

    def test_truncated_file(self, tmp_path):
        save_checkpoint(build(tiny_config()), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-10])
        with pytest.raises(FormatError, match="blob_bytes"):
            load_checkpoint(tmp_path / "t.ckpt")

    @pytest.mark.parametrize(
        "mutate,field",
        [
            (lambda r: b"JUNK" + r[4:], "magic"),
            (lambda r: r[:4] + b"2" + r[5:], "version"),
            (lambda r: r[:6] + b"not json" + r[r.index(b"\n", 6):], "manifest"),
            (lambda r: r[:8], "manifest"),
        ],
    )
    def test_corrupt_header_names_field(self, tmp_path, mutate, field):
        save_checkpoint(build(tiny_config()), tmp_path / "m.ckpt")
        (tmp_path / "bad.ckpt").write_bytes(mutate((tmp_path / "m.ckpt").read_bytes()))
        with pytest.raises(FormatError, match=field):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_config_hash_guard(self, tmp_path):
        save_checkpoint(build(tiny_config()), tmp_path / "m.ckpt")
        load_checkpoint(tmp_path / "m.ckpt", expected=tiny_config())
        with pytest.raises(FormatError, match="config_hash"):
            load_checkpoint(tmp_path / "m.ckpt", expected=tiny_config(use_channel_attention=False))

    def test_tampered_config_detected(self, tmp_path):
        save_checkpoint(build(tiny_config()), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "x.ckpt").write_bytes(raw.replace(b'"seed":7', b'"seed":9', 1))
        with pytest.raises(FormatError, match="config_hash"):
            load_checkpoint(tmp_path / "x.ckpt")
