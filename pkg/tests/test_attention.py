import math

import numpy as np
import pytest
import torch

from dragvid.attention import ShapeError, all_to_first, per_frame_self_attention


def rand_qkv(shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randn(shape, generator=g, dtype=dtype),
        torch.randn(shape, generator=g, dtype=dtype),
        torch.randn(shape, generator=g, dtype=dtype),
    )


class TestAllToFirst:
    def test_single_spatial_token_returns_first_frame_value(self):
        q, k, v = rand_qkv((2, 3, 1, 1, 4), seed=1)
        out = all_to_first(q, k, v, heads=2)
        for n in range(3):
            torch.testing.assert_close(out[:, n], v[:, 0], rtol=0, atol=0)

    def test_single_frame_equals_self_attention(self):
        q, k, v = rand_qkv((2, 1, 4, 4, 8), seed=2)
        a = all_to_first(q, k, v, heads=2)
        b = per_frame_self_attention(q, k, v, heads=2)
        torch.testing.assert_close(a, b)

    def test_hand_computed_softmax_case(self):
        # Two spatial tokens, one channel: logits (0, ln 3) after the 1/sqrt(D)
        # scale give weights (0.25, 0.75) and output 0.25*v0 + 0.75*v1.
        q = torch.ones(1, 2, 1, 2, 1)
        k = torch.zeros(1, 2, 1, 2, 1)
        k[0, 0, 0, 1, 0] = math.log(3.0)
        v = torch.zeros(1, 2, 1, 2, 1)
        v[0, 0, 0, 0, 0] = 1.0
        v[0, 0, 0, 1, 0] = 2.0
        out, weights = all_to_first(q, k, v, heads=1, return_weights=True)
        expected = 0.25 * 1.0 + 0.75 * 2.0
        torch.testing.assert_close(weights[0, 1, 0, 0], torch.tensor([0.25, 0.75]))
        assert out[0, 1, 0, 0, 0].item() == pytest.approx(expected, abs=1e-6)
        assert out[0, 1, 0, 1, 0].item() == pytest.approx(expected, abs=1e-6)

    def test_row_stochastic_weights(self):
        q, k, v = rand_qkv((2, 3, 4, 4, 8), seed=3)
        _, w = all_to_first(q, k, v, heads=2, return_weights=True)
        assert (w >= 0).all()
        torch.testing.assert_close(
            w.sum(dim=-1), torch.ones_like(w.sum(dim=-1)), rtol=0, atol=1e-6
        )

    def test_first_frame_fixed_point(self):
        q, k, v = rand_qkv((2, 4, 3, 3, 8), seed=4)
        a = all_to_first(q, k, v, heads=4)
        b = per_frame_self_attention(q, k, v, heads=4)
        torch.testing.assert_close(a[:, 0], b[:, 0])

    def test_output_in_convex_hull_of_first_frame_values(self):
        q, k, v = rand_qkv((2, 3, 4, 4, 8), seed=5)
        heads = 2
        out = all_to_first(q, k, v, heads=heads)
        b, n, s1, s2, c = out.shape
        d = c // heads
        v0 = v[:, 0].reshape(b, s1 * s2, heads, d)
        lo = v0.amin(dim=1)  # (B, heads, D)
        hi = v0.amax(dim=1)
        o = out.reshape(b, n * s1 * s2, heads, d)
        assert (o >= lo[:, None] - 1e-6).all()
        assert (o <= hi[:, None] + 1e-6).all()

    def test_ignores_non_first_keys_and_values(self):
        q, k, v = rand_qkv((1, 3, 2, 2, 4), seed=6)
        k2, v2 = k.clone(), v.clone()
        k2[:, 1:] = 99.0
        v2[:, 1:] = -99.0
        torch.testing.assert_close(
            all_to_first(q, k, v, heads=2), all_to_first(q, k2, v2, heads=2)
        )

    def test_shape_mismatch_raises(self):
        q, k, v = rand_qkv((1, 2, 2, 2, 4), seed=7)
        with pytest.raises(ShapeError):
            all_to_first(q, k, v[:, :, :1], heads=2)
        with pytest.raises(ShapeError):
            all_to_first(q, k, v, heads=3)
        with pytest.raises(ShapeError):
            all_to_first(q[0], k[0], v[0], heads=2)


class TestPerFrameSelfAttention:
    def test_constant_values_are_preserved(self):
        q, k, _ = rand_qkv((2, 3, 3, 3, 4), seed=8)
        v = torch.zeros(2, 3, 3, 3, 4)
        for n in range(3):
            v[:, n] = float(n) + 1.0
        out = per_frame_self_attention(q, k, v, heads=2)
        for n in range(3):
            torch.testing.assert_close(out[:, n], v[:, n], rtol=1e-6, atol=1e-5)

    def test_row_stochastic_weights(self):
        q, k, v = rand_qkv((2, 2, 3, 3, 4), seed=9)
        _, w = per_frame_self_attention(q, k, v, heads=2, return_weights=True)
        assert (w >= 0).all()
        torch.testing.assert_close(
            w.sum(dim=-1), torch.ones_like(w.sum(dim=-1)), rtol=0, atol=1e-6
        )

    def test_fused_and_explicit_paths_agree(self):
        q, k, v = rand_qkv((2, 3, 4, 4, 8), seed=10)
        fused = per_frame_self_attention(q, k, v, heads=2)
        explicit, _ = per_frame_self_attention(q, k, v, heads=2, return_weights=True)
        torch.testing.assert_close(fused, explicit, rtol=1e-5, atol=1e-6)
        fused_a = all_to_first(q, k, v, heads=2)
        explicit_a, _ = all_to_first(q, k, v, heads=2, return_weights=True)
        torch.testing.assert_close(fused_a, explicit_a, rtol=1e-5, atol=1e-6)


def central_difference_grad(fn, x, step=1e-3):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * step)
    return grad


class TestGradients:
    @pytest.mark.parametrize("op", [all_to_first, per_frame_self_attention])
    def test_matches_finite_differences(self, op):
        g = torch.Generator().manual_seed(11)
        shape = (1, 2, 1, 2, 2)
        q = torch.randn(shape, generator=g, dtype=torch.float64, requires_grad=True)
        k = torch.randn(shape, generator=g, dtype=torch.float64, requires_grad=True)
        v = torch.randn(shape, generator=g, dtype=torch.float64, requires_grad=True)
        coeff = torch.randn(shape, generator=g, dtype=torch.float64)

        def loss_fn():
            return (op(q, k, v, heads=1) * coeff).sum()

        loss = loss_fn()
        loss.backward()
        for tensor in (q, k, v):
            with torch.no_grad():
                fd = central_difference_grad(loss_fn, tensor.data)
            denom = fd.abs().max().clamp(min=1e-8)
            rel = (tensor.grad - fd).abs().max() / denom
            assert rel < 1e-2, f"relative gradient error {rel:.3e}"
