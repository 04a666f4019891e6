import numpy as np
import pytest

from htmnet.fusion import BfmConfig
from htmnet.model import DecoderConfig, FusionConfig, HTMNet, ModelConfig, pad_to_multiple, tiny_config


def inputs(rng, n=1, h=32, w=32, dtype=np.float32):
    rgb = rng.uniform(size=(n, 3, h, w)).astype(dtype)
    depth = rng.uniform(0.5, 3, (n, 1, h, w)).astype(dtype)
    depth[..., : h // 4, : w // 4] = 0.0                # a dropped region
    return rgb, depth


def ablations():
    base = tiny_config
    out = {}
    for k in (2, 4, 6):
        cfg = base()
        cfg.bfm = BfmConfig(num_blocks=k)
        out[f"bfm{k}"] = cfg
    cfg = base()
    cfg.decoder.msfm = False
    out["no_msfm"] = cfg
    cfg = base()
    cfg.fusion = FusionConfig(bfm=False)
    out["no_bfm"] = cfg
    cfg = base()
    cfg.fusion = FusionConfig(mode="layerwise")
    out["layerwise"] = cfg
    return out


class TestResidualIdentity:
    def test_fresh_model_returns_input_depth(self, rng):
        rgb, depth = inputs(rng)
        out = HTMNet(tiny_config()).forward(rgb, depth).data
        assert out.tobytes() == depth.tobytes()

    def test_nonzero_head_changes_output(self, rng):
        model = HTMNet(tiny_config())
        model.decoder.head_out.weight.data[...] = 0.01
        rgb, depth = inputs(rng)
        assert not np.array_equal(model.forward(rgb, depth).data, depth)


class TestPredict:
    def test_clamped_to_depth_range(self, rng):
        model = HTMNet(tiny_config())
        model.decoder.head_out.bias.data[...] = 5.0     # residual of 50 m before the clamp
        rgb, depth = inputs(rng)
        out = model.predict(rgb, depth)
        assert out.max() == model.cfg.d_max and out.min() >= 0.0
        model.decoder.head_out.bias.data[...] = -5.0
        assert model.predict(rgb, depth).max() == 0.0

    @pytest.mark.parametrize("hw", [(40, 48), (33, 31), (64, 96)])
    def test_padding_crops_back(self, rng, hw):
        rgb, depth = inputs(rng, h=hw[0], w=hw[1])
        out = HTMNet(tiny_config()).predict(rgb, depth)
        assert out.shape == depth.shape
        np.testing.assert_array_equal(out, depth)


class TestPadding:
    def test_multiple_left_alone(self, rng):
        x = rng.uniform(size=(1, 32, 64))
        assert pad_to_multiple(x) is x

    def test_reflect(self):
        x = np.arange(30.0).reshape(1, 30)[None]
        padded = pad_to_multiple(np.broadcast_to(x, (1, 30, 30)).copy())
        assert padded.shape == (1, 32, 32)
        assert padded[0, 0, 30:].tolist() == [28.0, 27.0]


class TestAblations:
    @pytest.mark.parametrize("name", list(ablations()))
    def test_config_constructs_and_runs(self, rng, name):
        cfg = ablations()[name]
        model = HTMNet(cfg)
        rgb, depth = inputs(rng, n=2)
        assert model.forward(rgb, depth).shape == depth.shape

    def test_bfm_block_counts(self):
        for k in (2, 4, 6):
            assert len(HTMNet(ablations()[f"bfm{k}"]).bfm.blocks) == k

    def test_fusion_switches(self):
        assert HTMNet(ablations()["no_bfm"]).bfm is None
        layer = HTMNet(ablations()["layerwise"])
        assert layer.bfm is None and len(layer.layer_fusion) == 4

    def test_guidance_off(self, rng):
        cfg = tiny_config()
        cfg.decoder = DecoderConfig(guidance=False)
        rgb, depth = inputs(rng)
        assert HTMNet(cfg).forward(rgb, depth).shape == depth.shape

    def test_unknown_fusion_mode(self):
        with pytest.raises(ValueError):
            FusionConfig(mode="serial")


class TestSeeding:
    def test_same_seed_same_parameters(self):
        a, b = HTMNet(tiny_config(), seed=3), HTMNet(tiny_config(), seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()

    def test_parameter_names_unique(self):
        names = [n for n, _ in HTMNet(tiny_config()).named_parameters()]
        assert len(names) == len(set(names))


class TestModelConfig:
    def test_default_geometry(self):
        cfg = ModelConfig()
        assert cfg.encoder.stage_widths == [24, 48, 96, 192] and cfg.d_max == 10.0
