from dataclasses import replace

import numpy as np
import pytest

from dse_block import DseBlockSpec
from errors import AlignmentError, ArchitectureError, ConfigError
from model import ArchitectureSpec, build_model, count_params, count_undecomposed


# ── Architecture ────────────────────────────────────────────────────────────

class TestArchitecture:
    def test_feature_size(self, image_arch):
        # 8x8 -> pool 4x4 -> pool 2x2, 6 channels
        assert image_arch.feature_size() == 24

    def test_broken_channel_chain(self):
        arch = ArchitectureSpec((1, 8, 8), (DseBlockSpec(1, 4, 3, padding=1), DseBlockSpec(5, 4, 3, padding=1)))
        with pytest.raises(ArchitectureError, match="block1"):
            arch.feature_size()

    def test_spatial_collapse(self):
        arch = ArchitectureSpec.from_settings(channels=[4, 4, 4], pool=2, avgpool=0, input_shape=(1, 4, 4))
        with pytest.raises(ArchitectureError, match="collapses"):
            arch.feature_size()

    def test_flat_inputs_admit_no_blocks(self):
        with pytest.raises(ArchitectureError):
            ArchitectureSpec((16,), (DseBlockSpec(1, 4, 3),)).feature_size()

    def test_undecomposed_sets_expansion_one(self, image_arch):
        assert all(b.expansion == 1 for b in image_arch.undecomposed().blocks)


# ── Building and state ──────────────────────────────────────────────────────

class TestModel:
    def test_same_seed_same_weights(self, image_arch):
        a = build_model(image_arch, np.random.default_rng(5)).state_dict()
        b = build_model(image_arch, np.random.default_rng(5)).state_dict()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_head_init(self, image_arch):
        model = build_model(image_arch, np.random.default_rng(0))
        bound = np.sqrt(6.0 / 24)
        assert np.all(np.abs(model.head_weight.data) <= bound)
        np.testing.assert_array_equal(model.head_bias.data, 0.0)

    def test_duplicate_block_names(self, image_arch):
        blocks = tuple(replace(b, name="stem") for b in image_arch.blocks)
        with pytest.raises(ArchitectureError, match="stem"):
            build_model(replace(image_arch, blocks=blocks), np.random.default_rng(0))

    def test_block_named_head(self, image_arch):
        blocks = (replace(image_arch.blocks[0], name="head"),) + image_arch.blocks[1:]
        with pytest.raises(ArchitectureError):
            build_model(replace(image_arch, blocks=blocks), np.random.default_rng(0))

    def test_partition(self, image_arch):
        part = build_model(image_arch, np.random.default_rng(0)).partition
        assert part.personalized == {
            "block0.bn_dse.weight", "block0.bn_dse.bias", "block0.dse_conv.weight",
            "block1.bn_dse.weight", "block1.bn_dse.bias", "block1.dse_conv.weight",
        }
        assert "head.weight" in part.shared and "block1.bn_dfe.bias" in part.shared
        assert part.local_stats == {
            "block0.bn_dse.running_mean", "block0.bn_dse.running_var",
            "block1.bn_dse.running_mean", "block1.bn_dse.running_var",
        }
        assert part.kind("block0.bn_dfe.running_var") == "averaged_stats"
        with pytest.raises(AlignmentError):
            part.kind("block9.nothing")

    def test_load_state_roundtrip_and_partial(self, image_arch):
        model = build_model(image_arch, np.random.default_rng(0))
        other = build_model(image_arch, np.random.default_rng(1))
        other.load_state(model.state_dict())
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(other.state_dict()[name], value)
        other.load_state({"head.bias": np.full(3, 2.0)})
        np.testing.assert_array_equal(other.head_bias.data, 2.0)
        np.testing.assert_array_equal(other.head_weight.data, model.head_weight.data)

    def test_load_state_rejects_unknown_or_misshaped(self, image_arch):
        model = build_model(image_arch, np.random.default_rng(0))
        with pytest.raises(AlignmentError):
            model.load_state({"block0.extra.weight": np.zeros(1)})
        with pytest.raises(AlignmentError):
            model.load_state({"head.bias": np.zeros(4)})
        with pytest.raises(AlignmentError):
            model.load_state({"block0.bn_dfe.running_mean": np.zeros(7)})

    def test_clone_is_independent(self, image_arch):
        model = build_model(image_arch, np.random.default_rng(0))
        twin = model.clone()
        twin.head_bias.data[:] = 5.0
        twin.blocks[0].bn_dfe.running_mean[:] = 3.0
        np.testing.assert_array_equal(model.head_bias.data, 0.0)
        np.testing.assert_array_equal(model.blocks[0].bn_dfe.running_mean, 0.0)

    def test_forward_shapes_and_stats(self, image_arch, rng):
        model = build_model(image_arch, np.random.default_rng(0))
        logits, stats = model.forward_with_stats(rng.standard_normal((5, 1, 8, 8)), "train")
        assert logits.shape == (5, 3)
        assert [s.mean.shape for s in stats] == [(4,), (6,)]
        assert model(rng.standard_normal((2, 1, 8, 8))).shape == (2, 3)

    def test_no_stats_without_dse(self, image_arch, rng):
        model = build_model(image_arch.undecomposed(), np.random.default_rng(0))
        _, stats = model.forward_with_stats(rng.standard_normal((2, 1, 8, 8)), "train")
        assert stats == [] and not model.has_dse

    def test_flat_model_is_a_linear_classifier(self, flat_arch, rng):
        model = build_model(flat_arch, np.random.default_rng(0))
        x = rng.standard_normal((4, 16))
        expected = x @ model.head_weight.data.T + model.head_bias.data
        np.testing.assert_allclose(model(x).data, expected, rtol=1e-5, atol=1e-6)
        assert set(model.state_dict()) == {"head.weight", "head.bias"}

    def test_unknown_mode(self, image_arch):
        with pytest.raises(ConfigError):
            build_model(image_arch, np.random.default_rng(0)).forward(np.zeros((2, 1, 8, 8)), mode="test")


# ── Parameter counts ────────────────────────────────────────────────────────

class TestParamCounts:
    def test_default_architecture(self):
        arch = ArchitectureSpec.from_settings()
        counts = count_params(build_model(arch, np.random.default_rng(0)))
        assert counts.total == 12136
        assert counts.personalized == 528
        assert counts.per_block["block1"] == {"dfe_conv": 9216, "bn_dse": 64, "dse_conv": 288, "bn_dfe": 128}
        assert counts.per_block["head"] == {"weight": 2048, "bias": 8}
        assert count_undecomposed(arch).total == 20968

    def test_to_dict(self, image_arch):
        record = count_params(build_model(image_arch, np.random.default_rng(0))).to_dict()
        assert record["total"] == record["shared"] + record["personalized"]
