import numpy as np
import pytest
import torch

from dragvid.attention import ShapeError
from dragvid.denoiser import (
    CheckpointError,
    DenoiserConfig,
    DenoiserState,
    DragVideoDenoiser,
    ema_update,
    encode_for_levels,
    load_checkpoint,
    predict_noise,
    save_checkpoint,
)
from dragvid.types import DragSet, Resolution, ValidationError

from conftest import random_drag_set


CFG = DenoiserConfig(
    height=16,
    width=16,
    frame_count=2,
    channels=3,
    level_widths=(8, 16),
    blocks_per_level=1,
    heads=1,
    k_max=5,
)


def make_inputs(cfg=CFG, batch=2, seed=0, k=2):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, cfg.frame_count, cfg.channels, cfg.height, cfg.width, generator=g)
    t = torch.randn(batch, generator=g)
    y = torch.randn(batch, cfg.channels, cfg.height, cfg.width, generator=g)
    rng = np.random.default_rng(seed)
    drag_sets = [
        random_drag_set(rng, cfg.resolution, cfg.frame_count, k, cfg.k_max)
        for _ in range(batch)
    ]
    return z, t, y, drag_sets


class TestForward:
    def test_output_shape_matches_input(self, tiny_state, tiny_config):
        cfg = tiny_state.config
        z, t, y, ds = make_inputs(cfg, batch=1)
        out = predict_noise(z, t, y, ds, tiny_state)
        assert out.shape == z.shape

    def test_zero_init_drag_invariance_is_bit_identical(self):
        torch.manual_seed(0)
        state = DenoiserState.create(CFG, seed=3)
        # Give the output head nonzero weights so the check is not vacuous;
        # the conditioning heads stay zero-initialized.
        with torch.no_grad():
            state.model.head.weight.add_(torch.randn_like(state.model.head.weight) * 0.1)
        z, t, y, _ = make_inputs(batch=2, seed=1)
        rng = np.random.default_rng(2)
        ds_a = [random_drag_set(rng, CFG.resolution, 2, 3) for _ in range(2)]
        ds_b = [random_drag_set(rng, CFG.resolution, 2, 1) for _ in range(2)]
        out_a = predict_noise(z, t, y, ds_a, state)
        out_b = predict_noise(z, t, y, ds_b, state)
        assert torch.equal(out_a, out_b)
        assert out_a.abs().max() > 0

    def test_forward_is_deterministic(self):
        state = DenoiserState.create(CFG, seed=4)
        z, t, y, ds = make_inputs(batch=2, seed=5)
        a = predict_noise(z, t, y, ds, state)
        b = predict_noise(z, t, y, ds, state)
        assert torch.equal(a, b)

    def test_batch_permutation_equivariance(self):
        state = DenoiserState.create(CFG, seed=6)
        with torch.no_grad():
            state.model.head.weight.add_(torch.randn_like(state.model.head.weight) * 0.1)
        z, t, y, ds = make_inputs(batch=3, seed=7, k=2)
        out = predict_noise(z, t, y, ds, state)
        perm = [2, 0, 1]
        out_p = predict_noise(
            z[perm], t[perm], y[perm], [ds[i] for i in perm], state
        )
        torch.testing.assert_close(out_p, out[perm], rtol=0, atol=0)

    def test_rejects_bad_shapes_and_nonfinite(self):
        state = DenoiserState.create(CFG, seed=8)
        z, t, y, ds = make_inputs(batch=1, seed=9)
        with pytest.raises(ShapeError):
            predict_noise(z[:, :1], t, y, ds, state)
        with pytest.raises(ShapeError):
            predict_noise(z, t, y, [], state)
        bad = z.clone()
        bad[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(ValidationError):
            predict_noise(bad, t, y, ds, state)

    def test_encode_for_levels_shapes(self):
        rng = np.random.default_rng(10)
        ds = [random_drag_set(rng, CFG.resolution, 2, 2) for _ in range(2)]
        encs = encode_for_levels(ds, CFG, device="cpu")
        assert set(encs) == {16, 8}
        assert encs[16].shape == (2, 2, 16, 16, 30)
        assert encs[8].shape == (2, 2, 8, 8, 30)


class TestParameterCount:
    def test_deterministic(self):
        a = DenoiserState.create(CFG, seed=0).parameter_count()
        b = DenoiserState.create(CFG, seed=99).parameter_count()
        assert a == b

    def test_k_max_changes_only_conditioning_widths(self):
        import dataclasses

        cfg3 = dataclasses.replace(CFG, k_max=3)
        m5 = DragVideoDenoiser(CFG)
        m3 = DragVideoDenoiser(cfg3)
        count = lambda m, cond: sum(  # noqa: E731
            p.numel() for n, p in m.named_parameters() if ("embedder" in n) == cond
        )
        assert count(m5, cond=False) == count(m3, cond=False)
        assert count(m5, cond=True) > count(m3, cond=True)


class TestEma:
    def test_fixed_point(self):
        state = DenoiserState.create(CFG, seed=11)
        before = {k: v.clone() for k, v in state.ema.items()}
        ema_update(state, 0.5)  # shadow == live at creation
        for k in before:
            torch.testing.assert_close(state.ema[k], before[k], rtol=0, atol=0)

    def test_hand_arithmetic(self):
        state = DenoiserState.create(CFG, seed=12)
        name, param = next(iter(state.model.named_parameters()))
        with torch.no_grad():
            param.fill_(1.0)
        state.ema[name].fill_(0.0)
        ema_update(state, 0.9999)
        assert state.ema[name].flatten()[0].item() == pytest.approx(1e-4, rel=1e-6)

    def test_geometric_convergence(self):
        state = DenoiserState.create(CFG, seed=13)
        name, param = next(iter(state.model.named_parameters()))
        with torch.no_grad():
            param.fill_(1.0)
        state.ema[name].fill_(0.0)
        decay, k = 0.9, 20
        for _ in range(k):
            ema_update(state, decay)
        expected = 1.0 - decay**k
        assert state.ema[name].flatten()[0].item() == pytest.approx(expected, rel=1e-5)

    def test_decay_bounds(self):
        state = DenoiserState.create(CFG, seed=14)
        with pytest.raises(ValidationError):
            ema_update(state, 0.0)
        with pytest.raises(ValidationError):
            ema_update(state, 1.0)

    def test_shape_mismatch_between_shadow_and_live(self):
        state = DenoiserState.create(CFG, seed=15)
        name = next(iter(state.ema))
        state.ema[name] = torch.zeros(3)
        with pytest.raises(ShapeError):
            ema_update(state, 0.5)

    def test_ema_model_uses_shadow_weights(self):
        state = DenoiserState.create(CFG, seed=16)
        for k in state.ema:
            state.ema[k] = torch.zeros_like(state.ema[k])
        ema = state.ema_model()
        for p in ema.parameters():
            assert (p == 0).all()


class TestGradientCheck:
    def test_sampled_parameters_match_finite_differences(self):
        cfg = DenoiserConfig(
            height=8,
            width=8,
            frame_count=2,
            channels=2,
            level_widths=(8,),
            blocks_per_level=1,
            heads=1,
            k_max=2,
        )
        state = DenoiserState.create(cfg, seed=17)
        model = state.model.double()
        # Nudge all zero-initialized heads so every path carries gradient.
        with torch.no_grad():
            for p in model.parameters():
                if (p == 0).all():
                    p.add_(torch.randn_like(p) * 0.05)
        g = torch.Generator().manual_seed(18)
        z = torch.randn(1, 2, 2, 8, 8, generator=g, dtype=torch.float64)
        t = torch.randn(1, generator=g, dtype=torch.float64)
        y = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
        rng = np.random.default_rng(19)
        ds = [random_drag_set(rng, cfg.resolution, 2, 1, k_max=2)]
        encs = encode_for_levels(ds, cfg, "cpu", torch.float64)
        target = torch.randn(1, 2, 2, 8, 8, generator=g, dtype=torch.float64)

        def loss_fn():
            return ((model(z, t, y, ds, encs) - target) ** 2).mean()

        loss = loss_fn()
        loss.backward()

        params = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
        rng2 = np.random.default_rng(20)
        checked = 0
        for pick in rng2.permutation(len(params)):
            name, p = params[pick]
            if checked >= 10:
                break
            flat = p.data.view(-1)
            gflat = p.grad.view(-1)
            idx = int(np.argmax(np.abs(gflat.detach().numpy())))
            if abs(gflat[idx].item()) < 1e-7:
                continue
            step = 1e-3
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                plus = loss_fn().item()
                flat[idx] = orig - step
                minus = loss_fn().item()
                flat[idx] = orig
            fd = (plus - minus) / (2 * step)
            rel = abs(fd - gflat[idx].item()) / max(abs(fd), 1e-9)
            assert rel < 2e-2, f"{name}: rel grad error {rel:.3e}"
            checked += 1
        assert checked == 10


class TestCheckpoint:
    def test_roundtrip_preserves_outputs_and_ema(self, tmp_path):
        state = DenoiserState.create(CFG, seed=21)
        ema_update(state, 0.5)
        path = tmp_path / "ck.pt"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert loaded.config == state.config
        z, t, y, ds = make_inputs(batch=1, seed=22)
        torch.testing.assert_close(
            predict_noise(z, t, y, ds, state),
            predict_noise(z, t, y, ds, loaded),
            rtol=0,
            atol=0,
        )
        for k in state.ema:
            torch.testing.assert_close(loaded.ema[k], state.ema[k], rtol=0, atol=0)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"format_version": 1, "config": {}}, path)
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        state = DenoiserState.create(CFG, seed=23)
        path = tmp_path / "ck.pt"
        save_checkpoint(state, path)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_unreadable_file_rejected(self, tmp_path):
        path = tmp_path / "junk.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestConfigValidation:
    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            DenoiserConfig(height=16, width=32)

    def test_width_head_divisibility(self):
        with pytest.raises(ValidationError):
            DenoiserConfig(height=16, width=16, level_widths=(6,), heads=4)

    def test_decreasing_widths_rejected(self):
        with pytest.raises(ValidationError):
            DenoiserConfig(height=16, width=16, level_widths=(16, 8))

    def test_resolutions_halve_per_level(self):
        cfg = DenoiserConfig(height=16, width=16, level_widths=(8, 8, 16))
        assert cfg.level_resolutions == (16, 8, 4)
