import numpy as np
import pytest

from gradrep import ops
from gradrep.autodiff import Tensor
from gradrep.errors import ConfigError, ShapeError
from gradrep.layers import BatchNorm2d, Conv2d
from gradrep.models import (
    PRESETS,
    CslaBlock,
    GhostStyleBlock,
    BlockInfo,
    ModelSpec,
    PlainBlock,
    RepVggStyleBlock,
    ResidualBlock,
    block_infos,
    build_csla,
    build_hypersearch,
    build_repghost_variant,
    build_repvgg,
    build_resnet_reference,
    build_target,
    build_target_equivalent_init,
    count_built_params,
    count_flops,
    count_params_inference,
    count_params_train,
    hs_init_value,
)

TINY = ModelSpec(stem_channels=3, stages=((1, 4), (1, 8)), num_classes=10, input_hw=32)
SMALL = ModelSpec(stem_channels=4, stages=((2, 4), (2, 8)), num_classes=10, input_hw=16)


def ones_scales(spec):
    return {i.block_id: (np.ones(i.c_out), np.ones(i.c_out)) for i in block_infos(spec)}


class TestSpecLayout:
    def test_first_block_of_each_stage_strided(self):
        infos = block_infos(SMALL)
        strides = [i.stride for i in infos]
        assert strides == [2, 1, 2, 1]

    def test_identity_iff_shape_preserving(self):
        for info in block_infos(PRESETS["b1"]):
            assert info.has_identity == (info.c_in == info.c_out and info.stride == 1)

    def test_stride2_block_never_identity(self):
        spec = ModelSpec(8, ((2, 8),), 10, 32)  # stem width equals stage width
        infos = block_infos(spec)
        assert not infos[0].has_identity and infos[1].has_identity

    def test_identity_depth_counts_within_stage(self):
        spec = ModelSpec(4, ((4, 8), (3, 8)), 10, 32)
        infos = block_infos(spec)
        assert [i.depth_l for i in infos if i.has_identity] == [1, 2, 3, 1, 2]

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            ModelSpec(0, ((1, 4),), 10, 32)
        with pytest.raises(ConfigError):
            ModelSpec(4, (), 10, 32)
        with pytest.raises(ConfigError):
            ModelSpec.from_stages_string("2x", 4, 10, 32)

    def test_stages_string_roundtrip(self):
        spec = ModelSpec.from_stages_string("4x128, 6x256", 64, 1000, 224)
        assert spec.stages == ((4, 128), (6, 256))


class TestAccounting:
    # published rows: (layers per stage fixed by preset, params M, flops G)
    ROWS = [("b1", 51.8e6, 11.9e9), ("b2", 80.3e6, 18.4e9),
            ("l1", 76.0e6, 21.0e9), ("l2", 118.1e6, 32.8e9)]

    @pytest.mark.parametrize("name,params,flops", ROWS)
    def test_preset_inference_params(self, name, params, flops):
        got = count_params_inference(PRESETS[name])
        assert abs(got - params) / params < 0.01

    @pytest.mark.parametrize("name,params,flops", ROWS)
    def test_preset_flops_at_224(self, name, params, flops):
        got = count_flops(PRESETS[name], input_hw=224)
        assert abs(got - flops) / flops < 0.02

    def test_repvgg_train_params_b1(self):
        got = count_params_train(PRESETS["b1"], "repvgg")
        assert abs(got - 57.4e6) / 57.4e6 < 0.01

    def test_tiny_closed_form(self):
        # stem 3->3, blocks 3->4 and 4->8, FC 8->10, all 3x3 convs:
        conv = 3 * 3 * 9 + 4 * 3 * 9 + 8 * 4 * 9
        bn = 2 * 3 + 2 * 4 + 2 * 8
        fc = 10 * 8 + 10
        assert count_params_train(TINY, "target") == conv + bn + fc

    @pytest.mark.parametrize("kind,builder", [
        ("target", lambda: build_target(SMALL, seed=0)),
        ("csla", lambda: build_csla(SMALL, ones_scales(SMALL), seed=0)),
        ("hs", lambda: build_hypersearch(SMALL, seed=0)),
        ("repvgg", lambda: build_repvgg(SMALL, seed=0)),
    ])
    def test_built_models_match_closed_form(self, kind, builder):
        assert count_built_params(builder()) == count_params_train(SMALL, kind)

    def test_branch_overhead_is_closed_form(self):
        infos = block_infos(SMALL)
        extra_csla = sum(i.c_out * i.c_in for i in infos) \
            + sum(i.c_out for i in infos if i.has_identity)
        extra_hs = extra_csla + 2 * sum(i.c_out for i in infos)
        base = count_params_train(SMALL, "target")
        assert count_params_train(SMALL, "csla") == base + extra_csla
        assert count_params_train(SMALL, "hs") == base + extra_hs


class TestBuilders:
    def test_families_shape_identical_outputs(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
        shapes = set()
        for model in (build_target(SMALL, seed=1),
                      build_csla(SMALL, ones_scales(SMALL), seed=1),
                      build_hypersearch(SMALL, seed=1)):
            shapes.add(model.forward(x, training=False).shape)
        assert shapes == {(2, 10)}

    def test_forward_deterministic(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
        a = build_target(SMALL, seed=3).forward(x).data
        b = build_target(SMALL, seed=3).forward(x).data
        assert a.tobytes() == b.tobytes()

    def test_csla_missing_block_record_errors(self):
        scales = ones_scales(SMALL)
        scales.pop("s2b1")
        with pytest.raises(ConfigError) as err:
            build_csla(SMALL, scales, seed=0)
        assert "s2b1" in str(err.value)

    def test_csla_channel_mismatch_errors(self):
        scales = ones_scales(SMALL)
        scales["s1b0"] = (np.ones(3), np.ones(3))
        with pytest.raises(ShapeError) as err:
            build_csla(SMALL, scales, seed=0)
        assert "s1b0" in str(err.value)

    def test_hs_scale_init_values(self):
        assert hs_init_value(2) == pytest.approx(1.0)
        assert hs_init_value(1) == pytest.approx(np.sqrt(2.0))
        assert hs_init_value(8) == pytest.approx(0.5)
        model = build_hypersearch(SMALL, seed=0)
        for block in model.blocks:
            want = hs_init_value(block.info.depth_l)
            np.testing.assert_allclose(block.scale3.values, want)
            np.testing.assert_allclose(block.scale1.values, want)
            if block.info.has_identity:
                np.testing.assert_allclose(block.gamma.values, 1.0)

    def test_hs_equals_csla_with_same_constants_at_init(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 16, 16))
        hs = build_hypersearch(SMALL, seed=5)
        consts = {
            b.info.block_id: (b.scale3.values.copy(), b.scale1.values.copy())
            for b in hs.blocks
        }
        csla = build_csla(SMALL, consts, seed=5)
        np.testing.assert_array_equal(hs.forward(x).data, csla.forward(x).data)

    def test_eval_csla_equals_equivalent_init_target(self):
        # the defining property of the equivalent kernel, end to end
        x = np.random.default_rng(2).normal(size=(2, 3, 16, 16))
        rng = np.random.default_rng(3)
        scales = {
            i.block_id: (rng.uniform(0.4, 1.4, i.c_out), rng.uniform(0.4, 1.4, i.c_out))
            for i in block_infos(SMALL)
        }
        csla = build_csla(SMALL, scales, seed=11)
        target = build_target_equivalent_init(SMALL, scales, seed=11)
        np.testing.assert_allclose(
            csla.forward(x).data, target.forward(x).data, atol=1e-12, rtol=0
        )

    def test_degenerate_csla_block_is_plain_conv(self):
        # s = 1, t = 0, no identity, zeroed 1x1 kernel
        info = BlockInfo(0, "b", 3, 4, 2, False, 1)
        rng_seed = 9
        from gradrep.rng import Rng

        block = CslaBlock(info, np.ones(4), np.zeros(4), False, rng=Rng(rng_seed))
        block.conv1.weight.data[:] = 0.0
        plain = PlainBlock(info, weight=block.conv3.weight.data.copy())
        x = np.random.default_rng(4).normal(size=(2, 3, 8, 8))
        np.testing.assert_allclose(
            block.forward(Tensor(x), training=False).data,
            plain.forward(Tensor(x), training=False).data,
            atol=1e-14,
        )

    def test_repvgg_reduces_to_plain_conv_when_extras_zeroed(self):
        info = BlockInfo(0, "b", 4, 4, 1, True, 1)
        from gradrep.rng import Rng

        block = RepVggStyleBlock(info, rng=Rng(2))
        eps = block.bn3.eps
        # main-branch BN becomes the exact identity map
        block.bn3.running_var = np.full(4, 1.0 - eps)
        # zero out the 1x1 and identity contributions
        block.conv1.weight.data[:] = 0.0
        block.bnid.gamma.data[:] = 0.0
        x = np.random.default_rng(5).normal(size=(2, 4, 8, 8))
        got = block.forward(Tensor(x), training=False).data
        want = ops.relu(
            ops.conv2d(Tensor(x), Tensor(block.conv3.weight.data), 1, 1)
        ).data
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_ghost_block_without_identity_is_plain_1x1(self):
        from gradrep.rng import Rng

        block = GhostStyleBlock(4, np.ones(4), False, rng=Rng(3), with_identity=False)
        x = np.random.default_rng(6).normal(size=(2, 4, 6, 6))
        got = block.forward(Tensor(x), training=False).data
        conv = ops.conv2d(Tensor(x), Tensor(block.conv1.weight.data))
        bn = BatchNorm2d(4)
        want = ops.relu(bn.forward(conv, training=False)).data
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_repghost_model_builds_and_runs(self):
        model = build_repghost_variant(SMALL, seed=0)
        x = np.random.default_rng(7).normal(size=(2, 3, 16, 16))
        assert model.forward(x).shape == (2, 10)

    def test_resnet_reference_structure(self):
        model = build_resnet_reference([4, 6, 16], seed=0)
        residual = [b for b in model.blocks if isinstance(b, ResidualBlock)]
        assert len(model.blocks) == 26 and len(residual) == 23

    def test_zero_residual_branch_is_identity(self):
        from gradrep.rng import Rng

        block = ResidualBlock(4, rng=Rng(1))
        block.conv_b.weight.data[:] = 0.0
        x = np.abs(np.random.default_rng(8).normal(size=(2, 4, 6, 6)))
        out = block.forward(Tensor(x), training=False).data
        np.testing.assert_allclose(out, x, atol=1e-14)

    def test_gr_managed_params_are_block_kernels(self):
        model = build_target(SMALL, seed=0)
        names = model.gr_managed_params()
        assert names == [f"blocks.{i}.conv.weight" for i in range(4)]
        all_names = dict(model.named_parameters())
        assert set(names) <= set(all_names)
