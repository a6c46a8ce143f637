import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flare_ssm.checkpoint import load_module, save_module
from flare_ssm.config import MaeConfig
from flare_ssm.mae import (SparseMAE, mask_counts, masked_mse, patchify, rank_patches_by_std, round_half_away,
                           two_phase_mask, unpatchify)


def _cfg(**kw):
    base = dict(patch=8, height=64, width=64, channels=2, dim=8, heads=2, enc_layers=1, dec_layers=1)
    base.update(kw)
    return MaeConfig(**base)


def _oracle_counts(n, alpha, r_l, r_h, r_f):
    # exact decimal rounding, halves away from zero
    from decimal import ROUND_HALF_UP, Decimal

    def rnd(x):
        return int(Decimal(x).quantize(Decimal(1), rounding=ROUND_HALF_UP))

    k_high = rnd(Decimal(str(alpha)) / 100 * n)
    high = rnd(Decimal(str(r_l)) * k_high)
    low = rnd(Decimal(str(r_h)) * (n - k_high))
    feat = rnd(Decimal(str(r_f)) * (n - high - low))
    return k_high, high, low, feat


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, 2.4999, 12.8)] == [1, 2, 3, -1, 2, 13]


def test_mask_counts_worked_example():
    c = mask_counts(64, _cfg(alpha=20, r_l=0.3, r_h=0.5))
    assert (c["k_high"], c["high_masked"], c["low_masked"], c["spatial_masked"]) == (13, 4, 26, 30)
    assert c["feature_masked"] == 17


GRID = list(itertools.product((4, 8, 16), (0, 10, 20, 35, 50), (0.0, 0.1, 0.3, 0.45), (0.5, 0.75, 0.9)))


def test_mask_counts_grid_against_decimal_oracle():
    rng = np.random.default_rng(0)
    for patch, alpha, r_l, r_h in GRID:
        cfg = _cfg(patch=patch, alpha=alpha, r_l=r_l, r_h=r_h, r_f=0.5)
        n = cfg.grid[0] * cfg.grid[1]
        k_high, high, low, feat = _oracle_counts(n, alpha, r_l, r_h, 0.5)
        plan = two_phase_mask(rng.standard_normal((2, 64, 64)), cfg, rng)
        assert plan.high_var_ids.size == k_high
        assert np.intersect1d(plan.spatial_masked_ids, plan.high_var_ids).size == high
        assert plan.spatial_masked_ids.size == high + low
        assert plan.feature_masked_ids.size == feat
        assert np.intersect1d(plan.feature_masked_ids, plan.spatial_masked_ids).size == 0


def test_zero_ratios_give_empty_masks():
    plan = two_phase_mask(np.random.default_rng(0).standard_normal((2, 64, 64)), _cfg(r_l=0, r_h=0, r_f=0), 3)
    assert plan.spatial_masked_ids.size == 0 and plan.feature_masked_ids.size == 0


def test_mask_determinism():
    v = np.random.default_rng(0).standard_normal((2, 64, 64))
    a, b, c = (two_phase_mask(v, _cfg(), s) for s in (7, 7, 8))
    assert np.array_equal(a.spatial_masked_ids, b.spatial_masked_ids)
    assert np.array_equal(a.feature_masked_ids, b.feature_masked_ids)
    assert not (np.array_equal(a.spatial_masked_ids, c.spatial_masked_ids)
                and np.array_equal(a.feature_masked_ids, c.feature_masked_ids))


def test_rank_constant_image_is_index_order():
    order, stds = rank_patches_by_std(np.ones((3, 32, 32)), 8)
    assert np.array_equal(order, np.arange(16)) and np.all(stds == 0)


def test_rank_bright_blob_first():
    v = np.zeros((2, 32, 32))
    v[0, 8:12, 8:12] = 5.0  # patch row 1, col 1 -> index 5
    order, _ = rank_patches_by_std(v, 8)
    assert order[0] == 5


def test_rank_matches_patch_std_oracle():
    v = np.random.default_rng(3).standard_normal((3, 24, 16))
    order, stds = rank_patches_by_std(v, 8)
    ref = [v[:, i * 8 : i * 8 + 8, j * 8 : j * 8 + 8].std() for i in range(3) for j in range(2)]
    assert np.array_equal(stds, np.array(ref))
    assert list(order) == sorted(range(6), key=lambda i: (-ref[i], i))
    with pytest.raises(ValueError):
        rank_patches_by_std(np.zeros((1, 10, 16)), 8)


def test_patchify_round_trip():
    v = torch.randn(2, 3, 16, 24)
    p = patchify(v, 8)
    assert p.shape == (2, 6, 3 * 64)
    assert torch.equal(unpatchify(p, 8, 3, 16, 24), v)
    # patch 4 = row 1, col 1
    assert torch.equal(p[0, 4].reshape(3, 8, 8), v[0, :, 8:16, 8:16])


def test_masked_mse_matches_pixel_oracle():
    cfg = _cfg()
    rng = np.random.default_rng(1)
    v = torch.from_numpy(rng.standard_normal((2, 64, 64)))
    v_hat = torch.from_numpy(rng.standard_normal((2, 64, 64)))
    plan = two_phase_mask(v.numpy(), cfg, 0)
    acc, n = 0.0, 0
    for pid in plan.loss_ids:
        r, c = divmod(int(pid), 8)
        diff = (v_hat - v).numpy()[:, r * 8 : r * 8 + 8, c * 8 : c * 8 + 8]
        acc += float((diff ** 2).sum())
        n += diff.size
    assert abs(float(masked_mse(v, v_hat, plan, 8)) - acc / n) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_masked_loss_ignores_visible_pixels(seed, shift):
    cfg = _cfg()
    rng = np.random.default_rng(seed)
    v = torch.from_numpy(rng.standard_normal((2, 64, 64)))
    v_hat = torch.from_numpy(rng.standard_normal((2, 64, 64)))
    plan = two_phase_mask(v.numpy(), cfg, rng)
    keep = np.setdiff1d(np.arange(64), plan.loss_ids)
    bumped = patchify(v_hat, 8).clone()
    bumped[keep] += shift
    assert float(masked_mse(v, unpatchify(bumped, 8, 2, 64, 64), plan, 8)) == float(masked_mse(v, v_hat, plan, 8))
    exact = patchify(v_hat, 8).clone()
    exact[plan.loss_ids] = patchify(v, 8)[plan.loss_ids]
    assert float(masked_mse(v, unpatchify(exact, 8, 2, 64, 64), plan, 8)) == 0.0


def _model():
    torch.manual_seed(0)
    return SparseMAE(_cfg(height=32, width=32))


def test_mae_step_shapes_and_support():
    model = _model()
    v = torch.randn(3, 2, 32, 32)
    plans = [two_phase_mask(v[i].numpy(), model.cfg, i) for i in range(3)]
    v_hat, loss = model.step(v, plans)
    assert v_hat.shape == v.shape and loss.ndim == 0 and torch.isfinite(loss)


def test_feature_mask_changes_decoder_input():
    model = _model().double()
    v = torch.randn(1, 2, 32, 32, dtype=torch.float64)
    plan = two_phase_mask(v[0].numpy(), model.cfg, 0)
    base = model.reconstruct(v, [plan])
    with torch.no_grad():
        model.feature_mask.add_(1.0)
    assert not torch.allclose(model.reconstruct(v, [plan]), base)


def test_encode_sequence_is_per_timestep():
    model = _model()
    x = torch.randn(8, 2, 32, 32)
    x[5] = x[2]
    f = model.encode_sequence(x, chunk=3)
    assert f.shape == (8, 8)
    assert torch.allclose(f[5], f[2], atol=1e-6)
    assert torch.allclose(model.encode(x[:1])[0], f[0], atol=1e-6)


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = _model()
    x = torch.randn(4, 2, 32, 32)
    feats = model.encode(x)
    save_module(tmp_path / "m.smae", model, b"SMAE", {"epoch": 3})
    other = SparseMAE(_cfg(height=32, width=32))
    assert load_module(tmp_path / "m.smae", other, b"SMAE") == {"epoch": 3}
    assert torch.equal(other.encode(x), feats)
    assert (tmp_path / "m.smae").read_bytes()[:4] == b"SMAE"
    with pytest.raises(ValueError, match="magic"):
        load_module(tmp_path / "m.smae", other, b"DSWM")
