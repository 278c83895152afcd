"""Contrastive adaptation of a clip encoder on normal target videos.

Each normal video yields a triplet: an augmented anchor, a spatially warped
positive (same motion, different geometry) and a temporally shifted negative
(same scene, different motion). Anchors are pushed into a FIFO memory bank
whose entries act as extra negatives in the InfoNCE objective.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import ClipEncoder, check_finite, epoch_rng, make_optimizer
from .synthdata import ClipSpec, VideoSample, clip_start, extract_clip

log = logging.getLogger(__name__)


class DegenerateWarpError(ValueError):
    pass


class NoValidShiftError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometry


@dataclass
class WarpSpec:
    """Backward homography in center-origin pixel coordinates ``(x=col, y=row)``.

    An output pixel at ``(x, y)`` samples the input at ``H @ (x, y, 1)``
    (dehomogenized), with ``H = [[a, b, c], [d, e, f], [g, h, 1]]``.
    """

    coeffs: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)

    @property
    def matrix(self) -> np.ndarray:
        a, b, c, d, e, f, g, h = self.coeffs
        return np.array([[a, b, c], [d, e, f], [g, h, 1.0]])

    @property
    def linear_det(self) -> float:
        a, b, _, d, e, *_ = self.coeffs
        return a * e - b * d

    def is_identity(self) -> bool:
        return tuple(self.coeffs) == WarpSpec().coeffs

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "WarpSpec":
        m = np.asarray(m, dtype=float) / m[2, 2]
        return cls(tuple(float(v) for v in m.reshape(-1)[:8]))


def rotation_warp(degrees: float, scale: float = 1.0, shift=(0.0, 0.0)) -> WarpSpec:
    """Sample from a rotated, scaled and shifted window; ``shift`` is ``(dx, dy)``."""
    t = math.radians(degrees)
    c, s = math.cos(t) * scale, math.sin(t) * scale
    return WarpSpec((c, -s, shift[0], s, c, shift[1], 0.0, 0.0))


def random_homography(rng: np.random.Generator, strength: float = 0.15,
                      perspective: float = 0.004, max_tries: int = 100) -> WarpSpec:
    for _ in range(max_tries):
        lin = np.eye(2) + rng.uniform(-strength, strength, size=(2, 2))
        trans = rng.uniform(-2.0, 2.0, size=2)
        persp = rng.uniform(-perspective, perspective, size=2)
        w = WarpSpec((lin[0, 0], lin[0, 1], trans[0], lin[1, 0], lin[1, 1], trans[1], persp[0], persp[1]))
        if w.linear_det > 0.25:
            return w
    raise DegenerateWarpError("could not draw a warp satisfying the determinant bound")


def bilinear_sample(frames: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``frames [T, H, W, C]`` at fractional ``rows, cols [H, W]``; zeros outside."""
    T, H, W, C = frames.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros((T, H, W, C), dtype=np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W) & (wgt != 0)
        vals = frames[:, np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)]
        out += np.where(valid[None, :, :, None], vals * wgt[None, :, :, None], 0.0)
    return out


def spatial_warp(clip: np.ndarray, warp: WarpSpec) -> np.ndarray:
    """Apply the same homography to every frame of ``clip [T, H, W, C]``."""
    if clip.size == 0:
        raise ValueError("empty clip")
    if warp.linear_det <= 0.25:
        raise DegenerateWarpError(f"linear determinant {warp.linear_det:.3f} <= 0.25")
    if warp.is_identity():
        return np.array(clip, dtype=np.float64, copy=True)
    T, H, W, C = clip.shape
    ys, xs = np.meshgrid(np.arange(H) - (H - 1) / 2.0, np.arange(W) - (W - 1) / 2.0, indexing="ij")
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ warp.matrix.T
    src_x = pts[..., 0] / pts[..., 2] + (W - 1) / 2.0
    src_y = pts[..., 1] / pts[..., 2] + (H - 1) / 2.0
    return bilinear_sample(np.asarray(clip, dtype=np.float64), src_y, src_x)


# ---------------------------------------------------------------------------
# triplets


@dataclass
class TripletConfig:
    clip_len: int = 8
    frame_rate: int = 1
    rotation_deg: float = 15.0
    crop_scale: tuple[float, float] = (0.7, 1.0)
    jitter: float = 0.2
    warp_strength: float = 0.15
    warp_perspective: float = 0.004
    # draw c1/c2/c3 at independent temporal positions instead of one shared window
    independent_crops: bool = False
    # preferred minimum offset (frames) between the anchor and the shifted negative
    min_shift: int = 8
    # one augmentation draw for all three views, so the warp and the time shift
    # are the only differences the encoder can latch onto
    shared_augment: bool = True


@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    specs: tuple[ClipSpec, ClipSpec, ClipSpec] = field(default=None, repr=False)


@dataclass(frozen=True)
class AugmentParams:
    warp: WarpSpec
    contrast: float = 1.0
    brightness: float = 1.0


def draw_augment(rng: np.random.Generator, cfg: TripletConfig, H: int, W: int) -> AugmentParams:
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    scale = rng.uniform(*cfg.crop_scale)
    slack = 1.0 - scale
    shift = (rng.uniform(-slack, slack) * (W - 1) / 2.0, rng.uniform(-slack, slack) * (H - 1) / 2.0)
    warp = rotation_warp(angle, scale, shift)
    if cfg.jitter <= 0:
        return AugmentParams(warp)
    contrast = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    brightness = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    return AugmentParams(warp, contrast, brightness)


def apply_augment(clip: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = spatial_warp(clip, params.warp)
    if params.contrast != 1.0 or params.brightness != 1.0:
        mean = out.mean()
        out = np.clip(((out - mean) * params.contrast + mean) * params.brightness, 0.0, 1.0)
    return out


def basic_augment(clip: np.ndarray, rng: np.random.Generator, cfg: TripletConfig) -> np.ndarray:
    """Random rotation, random crop (resized back) and brightness/contrast jitter."""
    T, H, W, C = clip.shape
    return apply_augment(clip, draw_augment(rng, cfg, H, W))


def valid_shifts(n_frames: int, base: ClipSpec, min_shift: int = 1) -> list[int]:
    """Start frames at least ``min_shift`` away from ``base``.

    Videos too short for that fall back to the farthest available starts.
    """
    others = [s for s in range(n_frames - base.span + 1) if s != base.start_frame]
    far = [s for s in others if abs(s - base.start_frame) >= min_shift]
    if far or not others:
        return far
    best = max(abs(s - base.start_frame) for s in others)
    return [s for s in others if abs(s - base.start_frame) == best]


def temporal_shift(video: VideoSample, base: ClipSpec, seed: int, min_shift: int = 1) -> np.ndarray:
    """Clip of the same duration starting elsewhere, preferably ``min_shift`` or more frames away."""
    starts = valid_shifts(video.n_frames, base, min_shift)
    if not starts:
        raise NoValidShiftError(f"{video.n_frames}-frame video admits no shifted start")
    start = starts[int(np.random.default_rng(seed).integers(len(starts)))]
    return extract_clip(video.frames, ClipSpec(start, base.clip_len, base.frame_rate, base.policy))


def make_triplet(video: VideoSample, cfg: TripletConfig, seed: int) -> Triplet:
    rng = np.random.default_rng(seed)
    T = video.n_frames
    if T - cfg.clip_len * cfg.frame_rate < 1:
        raise NoValidShiftError(f"{T}-frame video admits no shifted start")
    n_starts = 3 if cfg.independent_crops else 1
    starts = [clip_start(T, "random", cfg.clip_len, cfg.frame_rate, rng) for _ in range(n_starts)]
    if not cfg.independent_crops:
        starts = starts * 3
    specs = tuple(ClipSpec(s, cfg.clip_len, cfg.frame_rate) for s in starts)
    c1, c2 = (extract_clip(video.frames, s) for s in specs[:2])
    c3 = temporal_shift(video, specs[2], int(rng.integers(1 << 31)), cfg.min_shift)
    H, W = video.frames.shape[1:3]
    if cfg.shared_augment:
        aug = [draw_augment(rng, cfg, H, W)] * 3
    else:
        aug = [draw_augment(rng, cfg, H, W) for _ in range(3)]
    anchor = apply_augment(c1, aug[0])
    positive = spatial_warp(
        apply_augment(c2, aug[1]),
        random_homography(rng, cfg.warp_strength, cfg.warp_perspective) if cfg.warp_strength > 0 else WarpSpec(),
    )
    negative = apply_augment(c3, aug[2])
    return Triplet(anchor, positive, negative, specs)


# ---------------------------------------------------------------------------
# memory bank and loss


class MemoryBank:
    """Ring buffer of L2-normalized features; oldest entries are overwritten first."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.size = 0

    def push(self, feats: torch.Tensor) -> None:
        feats = feats.detach().to(self.buffer.dtype)
        if self.capacity == 0:
            return
        for row in feats[-self.capacity:]:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + len(feats), self.capacity)

    def contents(self) -> torch.Tensor:
        """Entries oldest first."""
        if self.size < self.capacity:
            return self.buffer[: self.size].clone()
        return torch.cat([self.buffer[self.cursor:], self.buffer[: self.cursor]])

    def __len__(self) -> int:
        return self.size


def _check_unit(z: torch.Tensor, name: str, tol: float = 1e-6) -> None:
    if z.numel() and (z.norm(dim=-1) - 1).abs().max() > tol:
        raise ValueError(f"{name} must be L2-normalized")


def infonce_loss(z_a: torch.Tensor, z_p: torch.Tensor, z_n: torch.Tensor, bank=None,
                 temperature: float = 1.0) -> torch.Tensor:
    """Mean over the batch of ``-log softmax`` of the positive among {positive, negative, bank}."""
    if z_a.ndim == 1:
        z_a, z_p, z_n = z_a[None], z_p[None], z_n[None]
    if len(z_a) == 0:
        raise ValueError("empty batch")
    if isinstance(bank, MemoryBank):
        bank = bank.contents()
    if bank is None:
        bank = z_a.new_zeros(0, z_a.shape[-1])
    for name, z in (("z_a", z_a), ("z_p", z_p), ("z_n", z_n), ("bank", bank)):
        _check_unit(z, name)
    bank = bank.to(z_a.dtype).detach()
    s_p = (z_a * z_p).sum(-1, keepdim=True)
    s_n = (z_a * z_n).sum(-1, keepdim=True)
    s_b = z_a @ bank.T
    logits = torch.cat([s_p, s_n, s_b], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


# ---------------------------------------------------------------------------
# adaptation loop


@dataclass
class AdaptConfig:
    epochs: int = 20
    batch_size: int = 16
    bank_size: int = 32
    optimizer: str = "adam"
    lr: float = 0.0001
    momentum: float = 0.9
    temperature: float = 0.1
    seed: int = 0
    triplet: TripletConfig = field(default_factory=TripletConfig)


@dataclass
class AdaptResult:
    encoder: ClipEncoder
    losses: list[float] = field(default_factory=list)
    bank: MemoryBank | None = None


def _usable(normals: list[VideoSample], cfg: AdaptConfig) -> list[VideoSample]:
    if any(v.label != 0 for v in normals):
        raise ValueError("adaptation set must contain only normal videos")
    span = cfg.triplet.clip_len * cfg.triplet.frame_rate
    usable = [v for v in normals if v.n_frames > span]
    if not usable:
        raise EmptyDatasetError("no video is long enough for a temporally shifted negative")
    return usable


def _embed(encoder: ClipEncoder, clips: list[np.ndarray], batch_size: int = 32) -> torch.Tensor:
    out = [encoder(torch.as_tensor(np.stack(clips[i:i + batch_size]), dtype=encoder.dtype))
           for i in range(0, len(clips), batch_size)]
    return F.normalize(torch.cat(out), dim=-1)


@torch.no_grad()
def fixed_objective(encoder: ClipEncoder, normals: list[VideoSample], cfg: AdaptConfig, seed: int = 0) -> float:
    """InfoNCE of ``encoder`` on one fixed draw of triplets.

    The bank is filled to capacity with the encoder's own anchors from a second
    draw, so values for different encoders are directly comparable (the per-epoch
    training loss is not, since the bank starts empty).
    """
    usable = _usable(normals, cfg)
    seeds = np.random.default_rng(seed).integers(0, 1 << 31, size=(2, len(usable)))
    trips = [make_triplet(v, cfg.triplet, int(s)) for v, s in zip(usable, seeds[0])]
    z_a = _embed(encoder, [t.anchor for t in trips])
    z_p = _embed(encoder, [t.positive for t in trips])
    z_n = _embed(encoder, [t.negative for t in trips])
    picks = [int(i) for i in np.arange(cfg.bank_size) % len(usable)]
    bank = _embed(encoder, [make_triplet(usable[i], cfg.triplet, int(seeds[1][i])).anchor for i in picks]) \
        if cfg.bank_size else None
    return infonce_loss(z_a, z_p, z_n, bank, cfg.temperature).item()


def adapt(encoder: ClipEncoder, normals: list[VideoSample], cfg: AdaptConfig) -> AdaptResult:
    """Adapt a copy of ``encoder`` on normal videos; the input encoder is not modified."""
    usable = _usable(normals, cfg)
    encoder = copy.deepcopy(encoder)
    bank = MemoryBank(cfg.bank_size, encoder.feature_dim, encoder.dtype)
    result = AdaptResult(encoder, bank=bank)
    if cfg.epochs == 0:
        return result
    opt = make_optimizer(encoder.parameters(), cfg.optimizer, cfg.lr, cfg.momentum)
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, 2, epoch)
        order = rng.permutation(len(usable))
        seeds = rng.integers(0, 1 << 31, size=len(usable))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            trips = [make_triplet(usable[j], cfg.triplet, int(seeds[j])) for j in idx]
            x = torch.as_tensor(
                np.stack([t.anchor for t in trips] + [t.positive for t in trips] + [t.negative for t in trips]),
                dtype=encoder.dtype,
            )
            z = F.normalize(encoder(x), dim=-1)
            z_a, z_p, z_n = z.split(len(idx))
            loss = infonce_loss(z_a, z_p, z_n, bank, cfg.temperature)
            check_finite(loss, "adapt")
            opt.zero_grad()
            loss.backward()
            opt.step()
            bank.push(z_a)
            total += loss.item() * len(idx)
        result.losses.append(total / len(usable))
        log.info("adapt epoch %d loss %.4f", epoch, result.losses[-1])
    return result
