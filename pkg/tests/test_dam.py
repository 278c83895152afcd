import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from fsvad.dam import (
    AdaptConfig,
    DegenerateWarpError,
    EmptyDatasetError,
    MemoryBank,
    NoValidShiftError,
    TripletConfig,
    WarpSpec,
    adapt,
    fixed_objective,
    infonce_loss,
    make_triplet,
    random_homography,
    rotation_warp,
    spatial_warp,
    temporal_shift,
    valid_shifts,
)
from fsvad.encoder import build_encoder, module_checksum
from fsvad.synthdata import ClipSpec, VideoConfig, VideoSample, make_target_video

from .fdcheck import check_tensor_grad


def _ramp_video(T, H=8, W=8):
    frames = (np.arange(T)[:, None, None, None] * np.ones((1, H, W, 3))).astype(np.uint8)
    return VideoSample(frames, 0, "", "target_normal")


# ---------------------------------------------------------------------------
# warps


def test_identity_warp_is_exact_copy():
    clip = np.random.default_rng(0).random((3, 9, 7, 3))
    out = spatial_warp(clip, WarpSpec())
    np.testing.assert_array_equal(out, clip)
    assert out is not clip


@pytest.mark.parametrize("r,c", [(0, 0), (1, 5), (3, 3), (6, 2)])
def test_quarter_turn_moves_single_pixel(r, c):
    clip = np.zeros((1, 7, 7, 1))
    clip[0, r, c, 0] = 1.0
    out = spatial_warp(clip, rotation_warp(90.0))
    # output (x, y) reads input (-y, x) about the center, so (r, c) lands on (6 - c, r)
    expected = np.zeros_like(clip)
    expected[0, 6 - c, r, 0] = 1.0
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_degenerate_warp_rejected():
    with pytest.raises(DegenerateWarpError):
        spatial_warp(np.zeros((1, 8, 8, 3)), rotation_warp(0.0, scale=0.4))
    with pytest.raises(DegenerateWarpError):
        spatial_warp(np.zeros((1, 8, 8, 3)), WarpSpec((-1.0, 0, 0, 0, 1.0, 0, 0, 0)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_warp_is_linear_in_pixels(seed, a, b):
    rng = np.random.default_rng(seed)
    warp = random_homography(rng)
    x = rng.random((2, 10, 12, 3))
    y = rng.random((2, 10, 12, 3))
    lhs = spatial_warp(a * x + b * y, warp)
    rhs = a * spatial_warp(x, warp) + b * spatial_warp(y, warp)
    assert np.abs(lhs - rhs).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_random_homography_respects_bound(seed):
    assert random_homography(np.random.default_rng(seed)).linear_det > 0.25


# ---------------------------------------------------------------------------
# shifts and triplets


def test_shift_requires_a_second_start():
    with pytest.raises(NoValidShiftError):
        temporal_shift(_ramp_video(8), ClipSpec(0, 8, 1), 0)


def test_shift_enumerates_both_alternatives():
    seen = set()
    for seed in range(1000):
        clip = temporal_shift(_ramp_video(10), ClipSpec(0, 8, 1), seed)
        seen.add(int(clip[0, 0, 0, 0] * 255 + 0.5))
    assert seen == {1, 2}


def test_min_shift_prefers_far_starts_then_falls_back():
    assert valid_shifts(40, ClipSpec(10, 8, 1), 8) == [0, 1, 2] + list(range(18, 33))
    # no start is 8 away in a 12-frame video, so the farthest ones are used
    assert valid_shifts(12, ClipSpec(1, 8, 1), 8) == [4]


@settings(max_examples=40, deadline=None)
@given(T=st.integers(9, 60), start=st.integers(0, 51), m=st.integers(1, 12))
def test_valid_shifts_never_include_base(T, start, m):
    if start > T - 8:
        return
    shifts = valid_shifts(T, ClipSpec(start, 8, 1), m)
    assert shifts and start not in shifts
    assert all(0 <= s <= T - 8 for s in shifts)


def test_triplet_shapes_and_determinism():
    v = make_target_video(0, 3, "", VideoConfig())
    a = make_triplet(v, TripletConfig(), 11)
    b = make_triplet(v, TripletConfig(), 11)
    for x, y in zip((a.anchor, a.positive, a.negative), (b.anchor, b.positive, b.negative)):
        assert x.shape == (8, 32, 32, 3)
        np.testing.assert_array_equal(x, y)
    assert a.specs[0].start_frame == a.specs[1].start_frame


def test_triplet_negative_is_shifted_in_time():
    v = _ramp_video(40)
    cfg = TripletConfig(rotation_deg=0, crop_scale=(1.0, 1.0), jitter=0.0, warp_strength=0.0)
    for seed in range(20):
        t = make_triplet(v, cfg, seed)
        # with all augmentation off the center pixel carries the frame index
        anchor_t0 = round(t.anchor[0, 4, 4, 0] * 255)
        neg_t0 = round(t.negative[0, 4, 4, 0] * 255)
        assert abs(anchor_t0 - neg_t0) >= 8
        np.testing.assert_array_equal(t.anchor, t.positive)


def test_triplet_on_too_short_video():
    with pytest.raises(NoValidShiftError):
        make_triplet(_ramp_video(8), TripletConfig(), 0)


# ---------------------------------------------------------------------------
# memory bank


def test_bank_fifo_order():
    bank = MemoryBank(3, 2, torch.float64)
    rows = F.normalize(torch.arange(1, 11, dtype=torch.float64).reshape(5, 2), dim=-1)
    bank.push(rows[:2])
    assert len(bank) == 2
    torch.testing.assert_close(bank.contents(), rows[:2])
    bank.push(rows[2:4])
    torch.testing.assert_close(bank.contents(), rows[1:4])
    bank.push(rows[4:])
    torch.testing.assert_close(bank.contents(), rows[2:5])
    assert len(bank) == 3


@settings(max_examples=40, deadline=None)
@given(cap=st.integers(0, 6), pushes=st.lists(st.integers(0, 5), max_size=8))
def test_bank_keeps_latest_entries(cap, pushes):
    bank = MemoryBank(cap, 1, torch.float64)
    history = []
    for n in pushes:
        batch = torch.arange(len(history), len(history) + n, dtype=torch.float64)[:, None]
        history.extend(batch[:, 0].tolist())
        bank.push(batch)
    expected = history[len(history) - min(cap, len(history)):]
    assert bank.contents()[:, 0].tolist() == expected


def test_bank_entries_detached():
    bank = MemoryBank(2, 2, torch.float64)
    z = torch.tensor([[1.0, 0.0]], dtype=torch.float64, requires_grad=True)
    bank.push(z)
    assert not bank.contents().requires_grad


# ---------------------------------------------------------------------------
# InfoNCE


def _unit(*rows):
    return F.normalize(torch.tensor(rows, dtype=torch.float64), dim=-1)


def test_symmetric_case_is_log_two():
    for c in (-0.5, 0.0, 0.3, 0.9):
        s = math.sqrt(1 - c * c)
        z_a = _unit([1.0, 0.0, 0.0])
        z_p = _unit([c, s, 0.0])
        z_n = _unit([c, 0.0, s])
        loss = infonce_loss(z_a, z_p, z_n)
        assert abs(loss.item() - math.log(2)) < 1e-12


def test_closed_form_with_one_bank_entry():
    z_a = _unit([1.0, 0.0, 0.0])
    loss = infonce_loss(z_a, z_a.clone(), _unit([0.0, 1.0, 0.0]), _unit([0.0, 0.0, 1.0]))
    expected = -math.log(math.e / (math.e + 2))
    assert abs(loss.item() - expected) < 1e-12
    assert abs(expected - 0.5514) < 1e-4


@pytest.mark.parametrize("K", [0, 1, 5, 31])
def test_uniform_similarities_give_log_k_plus_two(K):
    z = _unit([1.0, 0.0])
    bank = z.repeat(K, 1)
    loss = infonce_loss(z, z, z, bank if K else None)
    assert abs(loss.item() - math.log(K + 2)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(0, 8), temp=st.floats(0.05, 2.0))
def test_loss_bounds(seed, K, temp):
    g = torch.Generator().manual_seed(seed)
    z = F.normalize(torch.randn(3 + K, 4, generator=g, dtype=torch.float64), dim=-1)
    loss = infonce_loss(z[0], z[1], z[2], z[3:], temperature=temp).item()
    assert loss >= 0
    assert loss <= math.log(K + 2) + 4 / temp + 1e-9


def test_unnormalized_input_rejected():
    z = _unit([1.0, 0.0])
    with pytest.raises(ValueError):
        infonce_loss(z * 1.01, z, z)
    with pytest.raises(ValueError):
        infonce_loss(z, z, z, torch.tensor([[2.0, 0.0]], dtype=torch.float64))


def test_infonce_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    raw = [torch.randn(4, 6, generator=g, dtype=torch.float64).requires_grad_() for _ in range(3)]
    bank = F.normalize(torch.randn(5, 6, generator=g, dtype=torch.float64), dim=-1)

    def loss():
        a, p, n = (F.normalize(r, dim=-1) for r in raw)
        return infonce_loss(a, p, n, bank, temperature=0.5)

    for k, t in enumerate(raw):
        assert max(check_tensor_grad(loss, t, n_coords=10, seed=k)) < 1e-4


# ---------------------------------------------------------------------------
# adaptation loop


def test_adapt_zero_epochs_and_no_mutation():
    enc = build_encoder(0, widths=(4, 4, 4), feature_dim=8)
    vids = [make_target_video(0, i, "", VideoConfig()) for i in range(3)]
    before = module_checksum(enc)
    res = adapt(enc, vids, AdaptConfig(epochs=0))
    assert module_checksum(res.encoder) == before
    res = adapt(enc, vids, AdaptConfig(epochs=1, batch_size=2))
    assert module_checksum(enc) == before
    assert module_checksum(res.encoder) != before
    assert len(res.bank) == 3


def test_adapt_rejects_short_and_abnormal_videos():
    enc = build_encoder(0, widths=(4, 4, 4), feature_dim=8)
    with pytest.raises(EmptyDatasetError):
        adapt(enc, [_ramp_video(8), _ramp_video(5)], AdaptConfig(epochs=1))
    with pytest.raises(ValueError):
        adapt(enc, [make_target_video(0, 0, "stop", VideoConfig())], AdaptConfig(epochs=1))


def test_fixed_objective_uniform_encoder():
    enc = build_encoder(0, widths=(4, 4, 4), feature_dim=8)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
        enc.proj.bias.fill_(1.0)
    vids = [make_target_video(0, i, "", VideoConfig()) for i in range(5)]
    # a constant feature makes every similarity equal
    value = fixed_objective(enc, vids, AdaptConfig(bank_size=7))
    assert abs(value - math.log(9)) < 1e-5


def test_adapt_desk_scale_loss_decreases():
    vids = [make_target_video(0, i, "", VideoConfig()) for i in range(50)]
    cfg = AdaptConfig(epochs=20, seed=0)
    enc = build_encoder(0)
    res = adapt(enc, vids, cfg)
    assert len(res.losses) == 20
    # epoch 0 runs with a partly empty bank; from epoch 1 on the bank is full
    assert res.losses[-1] < res.losses[1]
    assert fixed_objective(res.encoder, vids, cfg) < fixed_objective(enc, vids, cfg)
