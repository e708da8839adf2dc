"""Tests for adaptive fusion, deformable refinement blocks and the stack."""

import math

import pytest
import torch
import torch.nn.functional as F
from torch import nn

from dimdet.align import TemporalAlignment
from dimdet.refine import (
    AdaptiveFusion,
    AgdfBlock,
    FeatureRefinement,
    fuse_offset_pyramid,
)


class TestFuseOffsetPyramid:
    def test_constant_coarse_adds_twice_its_value(self):
        fine = torch.randn(6, 8, 8, dtype=torch.float64)
        coarse = torch.full((6, 4, 4), 0.75, dtype=torch.float64)
        out = fuse_offset_pyramid(fine, coarse)
        assert torch.allclose(out, fine + 1.5, atol=1e-12)

    def test_batched_shapes(self):
        fine = torch.zeros(2, 4, 6, 6)
        coarse = torch.zeros(2, 4, 3, 3)
        assert fuse_offset_pyramid(fine, coarse).shape == (2, 4, 6, 6)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            fuse_offset_pyramid(torch.zeros(4, 6, 6), torch.zeros(3, 3, 3))

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="size"):
            fuse_offset_pyramid(torch.zeros(4, 6, 6), torch.zeros(4, 4, 4))


class TestAdaptiveFusion:
    def make(self, channels=16, num_frames=5):
        torch.manual_seed(0)
        return AdaptiveFusion(channels=channels, num_frames=num_frames)

    def test_weight_count_and_range(self):
        af = self.make()
        frames = [torch.rand(16, 6, 6) for _ in range(5)]
        w = af.fusion_weights(frames)
        assert w.shape == (5, 1, 1)
        assert bool((w > 0).all()) and bool((w < 1).all())
        batched = [torch.rand(3, 16, 6, 6) for _ in range(5)]
        wb = af.fusion_weights(batched)
        assert wb.shape == (3, 5, 1, 1)

    def test_identical_frames_equal_weights_reduce_to_bottleneck(self):
        af = self.make()
        f = torch.rand(16, 5, 5)
        aligned = [f.clone() for _ in range(4)]
        w = torch.full((5, 1, 1), 0.3)
        with torch.no_grad():
            out = af(aligned, f.clone(), weights=w)
            direct = F.leaky_relu(
                F.conv2d(
                    torch.cat([0.3 * f] * 5, dim=0).unsqueeze(0),
                    af.bottleneck.weight,
                    af.bottleneck.bias,
                )[0],
                negative_slope=0.1,
            )
        assert torch.allclose(out, direct, atol=1e-6)

    def test_permuting_identical_inputs_is_a_no_op(self):
        af = self.make()
        f = torch.rand(16, 5, 5)
        w = torch.full((5, 1, 1), 0.7)
        with torch.no_grad():
            a = af([f.clone() for _ in range(4)], f.clone(), weights=w)
            b = af([f.clone() for _ in range(4)][::-1], f.clone(), weights=w)
        assert torch.equal(a, b)

    def test_scale_frame_inverse_scale_weight_cancels(self):
        af = self.make()
        aligned = [torch.rand(16, 4, 4) for _ in range(4)]
        ref = torch.rand(16, 4, 4)
        w = torch.rand(5, 1, 1) * 0.8 + 0.1
        with torch.no_grad():
            base = af(aligned, ref, weights=w)
        alpha = 3.0
        scaled = [a.clone() for a in aligned]
        scaled[1] = scaled[1] * alpha  # frame index 1 in temporal order
        w2 = w.clone()
        w2[1] /= alpha
        with torch.no_grad():
            out = af(scaled, ref, weights=w2)
        assert torch.allclose(out, base, atol=1e-6)

    def test_wrong_frame_count_rejected(self):
        af = self.make()
        with pytest.raises(ValueError, match="aligned frames"):
            af([torch.rand(16, 4, 4)] * 3, torch.rand(16, 4, 4))

    def test_matches_hand_stepped_miniature(self):
        # 2-channel 2x2 features, 3 frames, all parameters pinned; walk the
        # fusion arithmetic (reduce, pool, gate MLP, modulate, bottleneck)
        # with explicit scalar operations
        gen = torch.Generator().manual_seed(77)
        af = AdaptiveFusion(channels=2, num_frames=3).double()
        params = {}
        with torch.no_grad():
            for name, p in af.named_parameters():
                vals = torch.rand(p.shape, generator=gen, dtype=torch.float64) - 0.5
                p.copy_(vals)
                params[name] = vals
        a0 = torch.rand(2, 2, 2, generator=gen, dtype=torch.float64)
        a1 = torch.rand(2, 2, 2, generator=gen, dtype=torch.float64)
        ref = torch.rand(2, 2, 2, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            out = af([a0, a1], ref)

        def leaky(v):
            return v if v >= 0 else 0.1 * v

        frames = [a0, ref, a1]
        stacked = torch.cat(frames, dim=0)  # 6x2x2
        # reduce 1x1 conv to 2 channels, then leaky relu
        reduced = [[[0.0] * 2 for _ in range(2)] for _ in range(2)]
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    acc = float(params["reduce.bias"][c])
                    for k in range(6):
                        acc += float(params["reduce.weight"][c, k, 0, 0]) * float(
                            stacked[k, i, j]
                        )
                    reduced[c][i][j] = leaky(acc)
        pooled = [sum(reduced[c][i][j] for i in range(2) for j in range(2)) / 4 for c in range(2)]
        hidden = []
        for c in range(2):
            acc = float(params["weight_fc1.bias"][c])
            for k in range(2):
                acc += float(params["weight_fc1.weight"][c, k, 0, 0]) * pooled[k]
            hidden.append(leaky(acc))
        weights = []
        for f in range(3):
            acc = float(params["weight_fc2.bias"][f])
            for k in range(2):
                acc += float(params["weight_fc2.weight"][f, k, 0, 0]) * hidden[k]
            weights.append(1.0 / (1.0 + math.exp(-acc)))
        modulated = torch.cat(
            [frames[f] * weights[f] for f in range(3)], dim=0
        )  # 6x2x2
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    acc = float(params["bottleneck.bias"][c])
                    for k in range(6):
                        acc += float(
                            params["bottleneck.weight"][c, k, 0, 0]
                        ) * float(modulated[k, i, j])
                    assert float(out[c, i, j]) == pytest.approx(leaky(acc), abs=1e-12)


class TestAgdfBlock:
    def make(self, channels=16, deform_groups=2):
        torch.manual_seed(1)
        return AgdfBlock(channels=channels, deform_groups=deform_groups)

    def test_shape_preserved_at_full_width(self):
        torch.manual_seed(2)
        block = AgdfBlock(channels=64, deform_groups=32)
        x = torch.rand(64, 68, 68)
        assert block(x).shape == (64, 68, 68)

    def test_param_channel_counts(self):
        torch.manual_seed(3)
        block = AgdfBlock(channels=64, deform_groups=32)
        field = block.predict_params(torch.rand(64, 8, 8))
        assert field.offsets.shape == (576, 8, 8)
        assert field.masks.shape == (288, 8, 8)

    def test_zero_init_heads_give_null_offsets(self):
        block = self.make()
        field = block.predict_params(torch.rand(16, 6, 6))
        assert torch.equal(field.offsets, torch.zeros_like(field.offsets))
        assert torch.equal(field.masks, torch.full_like(field.masks, 0.5))

    def test_masks_bounded_with_trained_heads(self):
        block = self.make()
        with torch.no_grad():
            block.fine_head.weight.normal_(std=0.5)
            block.fine_head.bias.normal_(std=0.5)
            block.coarse_head.weight.normal_(std=0.5)
        field = block.predict_params(torch.rand(16, 6, 6) * 4)
        assert bool((field.masks >= 0).all()) and bool((field.masks <= 1).all())

    def test_odd_size_rejected(self):
        block = self.make()
        with pytest.raises(ValueError, match="even"):
            block(torch.rand(16, 7, 8))

    def test_output_finite(self):
        block = self.make()
        out = block(torch.randn(2, 16, 8, 8) * 3)
        assert bool(torch.isfinite(out).all())


class TestFeatureRefinement:
    def test_full_stack_shape_and_finiteness(self):
        torch.manual_seed(4)
        fr = FeatureRefinement(channels=16, num_frames=5, num_blocks=2, deform_groups=2)
        aligned = [torch.rand(16, 8, 8) for _ in range(4)]
        out = fr(aligned, torch.rand(16, 8, 8))
        assert out.shape == (16, 8, 8)
        assert bool(torch.isfinite(out).all())

    def test_plain_fusion_variant(self):
        torch.manual_seed(5)
        fr = FeatureRefinement(
            channels=16, num_frames=5, num_blocks=2, deform_groups=2,
            use_adaptive_fusion=False,
        )
        assert isinstance(fr.fusion, nn.Sequential)
        assert fr.fusion[0].weight.shape == (16, 80, 1, 1)
        out = fr([torch.rand(16, 8, 8) for _ in range(4)], torch.rand(16, 8, 8))
        assert out.shape == (16, 8, 8)

    def test_plain_block_variant_is_eight_convs(self):
        torch.manual_seed(6)
        fr = FeatureRefinement(
            channels=64, num_frames=5, use_agdf=False,
        )
        convs = [m for m in fr.blocks if isinstance(m, nn.Conv2d)]
        assert len(convs) == 8
        for conv in convs:
            assert conv.weight.shape == (64, 64, 3, 3)
        out = fr([torch.rand(64, 8, 8) for _ in range(4)], torch.rand(64, 8, 8))
        assert out.shape == (64, 8, 8)


class TestAlignmentBlockParameterParity:
    def test_dilated_blocks_match_plain_conv_control_within_ten_percent(self):
        # the published ablation swaps the four dilated-attention blocks for
        # eight plain 3x3 convolutions of the same width and reports the
        # module's parameter count as essentially unchanged; check that claim
        # on the whole alignment module
        ta = TemporalAlignment(channels=64, num_blocks=4)
        total = sum(p.numel() for p in ta.parameters())
        block_params = sum(p.numel() for p in ta.blocks.parameters())
        control = nn.Sequential(
            *[nn.Conv2d(64, 64, 3, padding=1) for _ in range(8)]
        )
        control_params = sum(p.numel() for p in control.parameters())
        swapped_total = total - block_params + control_params
        ratio = total / swapped_total
        assert abs(ratio - 1.0) < 0.10
