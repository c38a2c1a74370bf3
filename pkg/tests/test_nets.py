import numpy as np
import pytest
import torch
from torch import nn

from fd_oracle import relative_fd_error
from parkgen.checkpoint import load_checkpoint, save_checkpoint
from parkgen.errors import DataError, StructureError
from parkgen.nets import (
    ArchSpec,
    DiffusionBlock,
    DiffusionUNet,
    PatchDiscriminator,
    ResnetBlock,
    ResnetGenerator,
    UNetGenerator,
    build,
    forward,
    make_module,
    module_from_weights,
    output_shape,
    param_count,
    receptive_field,
)


def conv_output(n, k, s, p):
    return (n + 2 * p - k) // s + 1


class TestArchSpec:
    def test_rejects_unknown_kind(self):
        with pytest.raises(StructureError):
            ArchSpec(kind="mlp")

    def test_rejects_bad_depth(self):
        with pytest.raises(StructureError):
            ArchSpec(kind="unet_gen", depth=0)

    def test_time_embedding_rules(self):
        with pytest.raises(StructureError):
            ArchSpec(kind="diffusion_unet")  # needs time_embedding_dim
        with pytest.raises(StructureError):
            ArchSpec(kind="unet_gen", time_embedding_dim=8)
        ArchSpec(kind="diffusion_unet", time_embedding_dim=8)


class TestBuildDeterminism:
    @pytest.mark.parametrize(
        "spec",
        [
            ArchSpec("unet_gen", base_width=4, depth=2),
            ArchSpec("resnet_gen", base_width=4, depth=2),
            ArchSpec("patch_disc", base_width=4, depth=3),
            ArchSpec("diffusion_unet", base_width=4, depth=2, time_embedding_dim=8),
        ],
    )
    def test_same_seed_same_weights(self, spec):
        a, b = build(spec, 99), build(spec, 99)
        assert a.tensors.keys() == b.tensors.keys()
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name]), name

    def test_different_seed_differs(self):
        spec = ArchSpec("unet_gen", base_width=4, depth=2)
        a, b = build(spec, 1), build(spec, 2)
        assert any(not np.array_equal(a.tensors[n], b.tensors[n]) for n in a.tensors)


class TestParamCount:
    def test_single_conv_formula(self):
        # 3 -> 8 channels, 4x4 kernel with bias
        conv = nn.Conv2d(3, 8, 4)
        assert sum(p.numel() for p in conv.parameters()) == 3 * 8 * 16 + 8 == 392

    def test_one_layer_disc_closed_form(self):
        spec = ArchSpec("patch_disc", in_channels=3, depth=1)
        assert param_count(spec) == 4 * 4 * 3 * 1 + 1

    def test_five_layer_disc_hand_count(self):
        # independent layer-by-layer count: channels 4,8,16,32 then 1,
        # strides 2,2,2,1,1, norm on middle layers (instance: no params)
        b = 4
        expected = (
            (16 * 3 * b + b)
            + (16 * b * 2 * b)
            + (16 * 2 * b * 4 * b)
            + (16 * 4 * b * 8 * b)
            + (16 * 8 * b * 1 + 1)
        )
        spec = ArchSpec("patch_disc", base_width=b, depth=5)
        assert param_count(spec) == expected

    @pytest.mark.parametrize(
        "spec",
        [
            ArchSpec("unet_gen", base_width=4, depth=2),
            ArchSpec("unet_gen", base_width=8, depth=3, norm="none"),
            ArchSpec("unet_gen", base_width=4, depth=4, norm="batch"),
            ArchSpec("resnet_gen", base_width=4, depth=3),
            ArchSpec("resnet_gen", base_width=4, depth=1, norm="batch"),
            ArchSpec("patch_disc", base_width=4, depth=1),
            ArchSpec("patch_disc", base_width=4, depth=2),
            ArchSpec("patch_disc", base_width=4, depth=4, norm="batch"),
            ArchSpec("patch_disc", base_width=4, depth=5),
            ArchSpec("diffusion_unet", base_width=4, depth=2, time_embedding_dim=8),
            ArchSpec("diffusion_unet", base_width=4, depth=3, norm="none", time_embedding_dim=4),
        ],
    )
    def test_built_weights_match_closed_form(self, spec):
        weights = build(spec, 0)
        assert sum(a.size for a in weights.tensors.values()) == param_count(spec)


class TestReceptiveField:
    def test_recurrence_oracle_five_layers(self):
        rf, jump = 1, 1
        for s in (2, 2, 2, 1, 1):
            rf += (4 - 1) * jump
            jump *= s
        assert rf == 70
        assert receptive_field(ArchSpec("patch_disc", depth=5)) == 70

    def test_single_layer(self):
        assert receptive_field(ArchSpec("patch_disc", depth=1)) == 4

    def test_rejected_for_generators(self):
        with pytest.raises(StructureError):
            receptive_field(ArchSpec("unet_gen"))


class TestForwardShapes:
    def test_unet_preserves_shape(self):
        spec = ArchSpec("unet_gen", base_width=4, depth=3)
        out = forward(build(spec, 0), np.random.default_rng(0).random((2, 64, 64, 3)))
        assert out.shape == (2, 64, 64, 3)

    def test_unet_divisibility_error(self):
        spec = ArchSpec("unet_gen", base_width=4, depth=3)
        with pytest.raises(StructureError, match="divisible"):
            forward(build(spec, 0), np.zeros((1, 60, 60, 3)))

    def test_disc_score_map_256(self):
        spec = ArchSpec("patch_disc", base_width=4, depth=5)
        n = 256
        for s in (2, 2, 2, 1, 1):
            n = conv_output(n, 4, s, 1)
        assert n == 30
        out = forward(build(spec, 0), np.zeros((1, 256, 256, 3)))
        assert out.shape == (1, 30, 30)

    def test_generator_output_bounded(self):
        spec = ArchSpec("resnet_gen", base_width=4, depth=2)
        out = forward(build(spec, 3), np.random.default_rng(1).random((2, 16, 16, 3)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_diffusion_constant_bias_output(self):
        spec = ArchSpec("diffusion_unet", base_width=4, depth=2, time_embedding_dim=8)
        weights = build(spec, 0)
        for name in weights.tensors:
            weights.tensors[name] = np.zeros_like(weights.tensors[name])
        weights.tensors["head.bias"] = np.array([0.25, -0.5, 1.5], dtype=np.float32)
        out = forward(weights, np.random.default_rng(0).random((2, 16, 16, 3)), t=np.array(3))
        assert np.allclose(out, np.array([0.25, -0.5, 1.5]), atol=1e-6)

    def test_timestep_requirements(self):
        gen = build(ArchSpec("unet_gen", base_width=4, depth=2), 0)
        with pytest.raises(StructureError, match="timestep"):
            forward(gen, np.zeros((1, 8, 8, 3)), t=np.array(1))
        diff = build(ArchSpec("diffusion_unet", base_width=4, depth=2, time_embedding_dim=8), 0)
        with pytest.raises(StructureError, match="timestep"):
            forward(diff, np.zeros((1, 8, 8, 3)))

    def test_channel_mismatch_reports_shapes(self):
        gen = build(ArchSpec("unet_gen", in_channels=6, base_width=4, depth=2), 0)
        with pytest.raises(StructureError, match=r"\(N, H, W, 6\)"):
            forward(gen, np.zeros((1, 8, 8, 3)))

    @pytest.mark.parametrize("size", [16, 32, 64])
    @pytest.mark.parametrize(
        "spec",
        [
            ArchSpec("unet_gen", base_width=4, depth=2),
            ArchSpec("resnet_gen", base_width=4, depth=1),
            ArchSpec("patch_disc", base_width=4, depth=3),
            ArchSpec("diffusion_unet", base_width=4, depth=2, time_embedding_dim=8),
        ],
    )
    def test_shape_algebra_matches_calculator(self, spec, size):
        x = np.random.default_rng(0).random((1, size, size, 3))
        t = np.array(5) if spec.kind == "diffusion_unet" else None
        out = forward(build(spec, 0), x, t=t)
        c, h, w = output_shape(spec, (size, size))
        if spec.kind == "patch_disc":
            assert out.shape == (1, h, w)
        else:
            assert out.shape == (1, h, w, c)

    def test_forward_deterministic(self):
        spec = ArchSpec("unet_gen", base_width=4, depth=2)
        w = build(spec, 5)
        x = np.random.default_rng(2).random((1, 16, 16, 3))
        assert np.array_equal(forward(w, x), forward(w, x))


class TestGradientChecks:
    """Every differentiable block vs central finite differences (float64)."""

    TOL = 1e-3

    def _check(self, module_factory, input_factory, n_trials=5):
        for seed in range(n_trials):
            torch.manual_seed(1000 + seed)
            module = module_factory()
            err = relative_fd_error(module, input_factory, seed=seed)
            assert err < self.TOL, f"seed {seed}: relative error {err:.2e}"

    def test_unet_generator(self):
        spec = ArchSpec("unet_gen", base_width=3, depth=2)
        self._check(lambda: make_module(spec), lambda: [torch.rand(1, 3, 8, 8)])

    def test_resnet_generator(self):
        spec = ArchSpec("resnet_gen", base_width=3, depth=1)
        self._check(lambda: make_module(spec), lambda: [torch.rand(1, 3, 8, 8)])

    def test_resnet_block(self):
        self._check(lambda: ResnetBlock(4, "instance"), lambda: [torch.randn(1, 4, 6, 6)])

    def test_patch_discriminator(self):
        spec = ArchSpec("patch_disc", base_width=3, depth=3)
        self._check(lambda: make_module(spec), lambda: [torch.rand(1, 3, 10, 10)])

    def test_diffusion_block(self):
        class WithTime(nn.Module):
            def __init__(self):
                super().__init__()
                self.block = DiffusionBlock(3, 5, 8, "instance")

            def forward(self, x, emb):
                return self.block(x, emb)

        self._check(lambda: WithTime(), lambda: [torch.randn(1, 3, 6, 6), torch.randn(1, 8)])

    def test_diffusion_unet(self):
        spec = ArchSpec("diffusion_unet", base_width=3, depth=2, time_embedding_dim=8)

        class FixedT(nn.Module):
            def __init__(self):
                super().__init__()
                self.net = make_module(spec)

            def forward(self, x):
                return self.net(x, torch.tensor([7]))

        self._check(lambda: FixedT(), lambda: [torch.randn(1, 3, 8, 8)])

    def test_norm_variants(self):
        for norm in ("batch", "none"):
            spec = ArchSpec("unet_gen", base_width=3, depth=2, norm=norm)
            self._check(lambda: make_module(spec), lambda: [torch.rand(2, 3, 8, 8)])


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = ArchSpec("resnet_gen", base_width=4, depth=2)
        weights = build(spec, 123)
        p = tmp_path / "g.ckpt"
        save_checkpoint(p, weights, extra={"task": "demo", "epochs": 3})
        loaded, extra = load_checkpoint(p)
        assert loaded.spec == spec and loaded.seed == 123
        assert extra == {"task": "demo", "epochs": "3"}
        for name in weights.tensors:
            assert loaded.tensors[name].dtype == np.float32
            assert np.array_equal(loaded.tensors[name], weights.tensors[name])

    def test_versioned_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"SOMETHING ELSE\n:binary:\n")
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        spec = ArchSpec("patch_disc", base_width=4, depth=2)
        p = tmp_path / "d.ckpt"
        save_checkpoint(p, build(spec, 0))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(DataError, match="payload"):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_weights_spec_mismatch(self, tmp_path):
        spec = ArchSpec("unet_gen", base_width=4, depth=2)
        weights = build(spec, 0)
        weights.tensors.pop(next(iter(weights.tensors)))
        with pytest.raises(StructureError, match="missing"):
            module_from_weights(weights)

    def test_loaded_checkpoint_runs(self, tmp_path):
        spec = ArchSpec("unet_gen", base_width=4, depth=2)
        weights = build(spec, 4)
        p = tmp_path / "g.ckpt"
        save_checkpoint(p, weights)
        loaded, _ = load_checkpoint(p)
        x = np.random.default_rng(0).random((1, 8, 8, 3))
        assert np.allclose(forward(weights, x), forward(loaded, x))
