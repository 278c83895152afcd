"""Synthetic moving-sprite video corpora and clip sampling.

Source videos are Gaussian blobs on a dark, flat background; each class is a
motion family (smooth orbit, back-and-forth, stop-and-go, zig-zag, ...).
Target videos are boxes over a textured static scene. Normal target videos
move smoothly along an elliptical path; abnormal ones disrupt that motion
inside a random time window while keeping the same visual style.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensorio import DatasetManifest, ManifestEntry, read_tensor, save_manifest, write_tensor

SOURCE_FAMILIES = ("smooth", "oscillate", "stop_go", "zigzag", "pulse", "jitter")
ANOMALY_TYPES = ("stop", "reversal", "swerve", "speedup", "jitter")

_DOMAIN_STREAM = {"source": 0, "target_normal": 1, "target_abnormal": 2}


@dataclass
class VideoConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    n_frames_range: tuple[int, int] = (24, 128)
    sprite_count_range: tuple[int, int] = (1, 2)
    noise_std: float = 0.01
    speed_range: tuple[float, float] = (1.0, 1.8)
    anomaly_len_range: tuple[int, int] = (16, 32)
    scene_count: int = 2
    sprite_scale: float = 1.6
    # per-video camera exposure in the target domain: contrast gain, brightness offset
    contrast_range: tuple[float, float] = (0.5, 1.5)
    brightness_range: tuple[float, float] = (-0.15, 0.15)

    def __post_init__(self):
        for name in ("n_frames_range", "sprite_count_range", "speed_range", "anomaly_len_range",
                     "contrast_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} > max {hi}")
            setattr(self, name, (lo, hi))
        if self.height < 8 or self.width < 8:
            raise ValueError("frame dimensions must be >= 8")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0.0 <= self.noise_std <= 1.0:
            raise ValueError("noise_std must lie in [0, 1]")
        if self.n_frames_range[0] < 1 or self.sprite_count_range[0] < 1:
            raise ValueError("ranges must be positive")
        if self.sprite_scale <= 0:
            raise ValueError("sprite_scale must be positive")
        if self.scene_count < 1:
            raise ValueError("scene_count must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "VideoConfig":
        doc = dict(doc)
        for k in ("n_frames_range", "sprite_count_range", "speed_range", "anomaly_len_range",
                  "contrast_range", "brightness_range"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class VideoSample:
    frames: np.ndarray  # [T, H, W, C] uint8
    label: int
    anomaly_type: str = ""
    domain_tag: str = "source"
    # frame range of the injected anomaly; known only for freshly generated videos
    anomaly_window: tuple[int, int] | None = None

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class ClipSpec:
    start_frame: int
    clip_len: int = 8
    frame_rate: int = 1
    policy: str = "random"

    @property
    def span(self) -> int:
        return self.clip_len * self.frame_rate

    def indices(self) -> np.ndarray:
        return self.start_frame + self.frame_rate * np.arange(self.clip_len)


class ClipError(ValueError):
    pass


def video_rng(seed: int, domain_tag: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _DOMAIN_STREAM[domain_tag], index]))


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class _Path:
    center: np.ndarray
    radii: np.ndarray
    tilt: float
    phase0: float
    direction: float

    def at(self, phase: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Position and unit normal along the ellipse at the given arc phases."""
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        rot = np.array([[c, -s], [s, c]])
        local = np.stack([self.radii[0] * np.cos(phase), self.radii[1] * np.sin(phase)], -1)
        tangent = np.stack([-self.radii[0] * np.sin(phase), self.radii[1] * np.cos(phase)], -1)
        tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
        normal = np.stack([-tangent[:, 1], tangent[:, 0]], -1)
        return self.center + local @ rot.T, normal @ rot.T


def _random_path(rng, cfg: VideoConfig, margin: float) -> _Path:
    half = np.array([cfg.height, cfg.width], dtype=float) / 2.0
    reach = half - margin
    radii = rng.uniform(0.55, 0.9, size=2) * (reach - 1.0)
    center = half + rng.uniform(-1.0, 1.0, size=2) * np.maximum(reach - radii.max(), 0.0)
    return _Path(center, radii, rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi),
                 rng.choice([-1.0, 1.0]))


def _triangle(t: np.ndarray, period: float) -> np.ndarray:
    """Triangle wave in [-1, 1] with sharp corners."""
    x = (t / period) % 1.0
    return 4.0 * np.abs(x - 0.5) - 1.0


def _trajectory(rng, cfg: VideoConfig, T: int, pattern: str, window: tuple[int, int] | None,
                speed_scale: float = 1.0, margin: float = 4.5) -> np.ndarray:
    """Positions [T, 2] (row, col) for one sprite.

    ``pattern`` applies over the whole clip when ``window`` is None, otherwise
    only to frames inside ``window`` with smooth motion elsewhere.
    """
    margin = margin * cfg.sprite_scale
    path = _random_path(rng, cfg, margin)
    speed = rng.uniform(*cfg.speed_range) * speed_scale
    mean_r = float(path.radii.mean())
    step = np.full(T, speed / mean_r) * path.direction
    offset = np.zeros(T)
    jump = np.zeros((T, 2))
    t = np.arange(T, dtype=float)
    active = np.ones(T, bool)
    if window is not None:
        active[:] = False
        active[window[0]:window[1]] = True

    if pattern == "smooth":
        pass
    elif pattern in ("stop", "stop_go"):
        if pattern == "stop_go":
            period = rng.integers(4, 7)
            frozen = (np.arange(T) + rng.integers(0, period)) % period < period // 2
        else:
            frozen = np.ones(T, bool)
        step[active & frozen] = 0.0
    elif pattern in ("reversal", "oscillate"):
        period = rng.integers(3, 6)
        flips = ((np.arange(T) + rng.integers(0, period)) // period) % 2 == 1
        step[active & flips] *= -1.0
    elif pattern in ("swerve", "zigzag"):
        period = rng.uniform(4.0, 6.0)
        amp = rng.uniform(2.0, 3.0)
        offset = np.where(active, amp * _triangle(t + rng.uniform(0, period), period), 0.0)
    elif pattern in ("speedup", "pulse"):
        if pattern == "pulse":
            period = rng.uniform(5.0, 8.0)
            factor = 1.0 + 1.5 * (np.sin(2 * math.pi * t / period) > 0)
        else:
            factor = np.full(T, 2.5)
        step = np.where(active, step * factor, step)
    elif pattern == "jitter":
        j = rng.normal(0.0, 1.6, size=(T, 2))
        jump = np.where(active[:, None], j, 0.0)
    else:
        raise ValueError(f"unknown motion pattern {pattern!r}")

    phase = path.phase0 + np.concatenate([[0.0], np.cumsum(step[:-1])])
    pos, normal = path.at(phase)
    pos = pos + offset[:, None] * normal + jump
    lo = margin - 1.0
    hi = np.array([cfg.height, cfg.width]) - margin + 1.0
    return np.clip(pos, lo, hi)


# ---------------------------------------------------------------------------
# rendering


def _box_coverage(coords: np.ndarray, centers: np.ndarray, size: float) -> np.ndarray:
    """Exact pixel coverage of an axis-aligned box, per frame. [T, N]"""
    lo = centers[:, None] - size / 2.0
    hi = centers[:, None] + size / 2.0
    return np.clip(np.minimum(coords[None] + 0.5, hi) - np.maximum(coords[None] - 0.5, lo), 0.0, 1.0)


def scene_background(seed: int, scene: int, cfg: VideoConfig) -> np.ndarray:
    """Static textured backdrop shared by every target video filmed in ``scene``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3, scene]))
    H, W, C = cfg.height, cfg.width, cfg.channels
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    bg = np.zeros((H, W, C))
    for c in range(C):
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            ph = rng.uniform(0, 2 * math.pi)
            bg[..., c] += rng.uniform(0.3, 1.0) * np.sin(2 * math.pi * (fy * yy + fx * xx) + ph)
    bg -= bg.mean(axis=(0, 1), keepdims=True)
    bg *= 0.12 / max(bg.std(), 1e-8)
    return bg + 0.35


def _render_target(cfg: VideoConfig, bg: np.ndarray, trajectories, looks) -> np.ndarray:
    H, W, C = cfg.height, cfg.width, cfg.channels
    frames = np.broadcast_to(bg, (len(trajectories[0]), H, W, C)).copy()
    rows = np.arange(H, dtype=float)
    cols = np.arange(W, dtype=float)
    for traj, (size, color) in zip(trajectories, looks):
        cov = _box_coverage(rows, traj[:, 0], size)[:, :, None] * _box_coverage(cols, traj[:, 1], size)[:, None, :]
        cov = cov[..., None]
        frames = frames * (1.0 - cov) + color * cov
    return frames


def _render_source(rng, cfg: VideoConfig, trajectories, T: int) -> np.ndarray:
    H, W, C = cfg.height, cfg.width, cfg.channels
    frames = np.full((T, H, W, C), rng.uniform(0.03, 0.12))
    rows = np.arange(H, dtype=float)[None, :, None]
    cols = np.arange(W, dtype=float)[None, None, :]
    for traj in trajectories:
        sigma = rng.uniform(1.2, 2.0) * cfg.sprite_scale
        color = np.zeros(C)
        color[rng.integers(0, C)] = 1.0
        color = 0.35 + 0.6 * color if C > 1 else np.ones(1)
        d2 = (rows - traj[:, 0, None, None]) ** 2 + (cols - traj[:, 1, None, None]) ** 2
        blob = np.exp(-d2 / (2 * sigma ** 2))[..., None]
        frames = np.maximum(frames, blob * color)
    return frames


def _quantize(rng, frames: np.ndarray, noise_std: float) -> np.ndarray:
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
    return np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)


def _exposure(seed: int, index: int, cfg: VideoConfig, levels: int = 10) -> tuple[float, float]:
    """Camera gain and offset cycling through ``levels`` strata by video index.

    Normal and abnormal corpora walk the same cycle, so any block of ``levels``
    consecutive videos has the same exposure mix and exposure cannot leak the label.
    """
    jitter = np.random.default_rng(np.random.SeedSequence([seed, 4, index])).random(2)
    u = (np.array([(3 * index) % levels, (7 * index + 4) % levels]) + 0.2 + 0.6 * jitter) / levels
    lo_c, hi_c = cfg.contrast_range
    lo_b, hi_b = cfg.brightness_range
    return lo_c + u[0] * (hi_c - lo_c), lo_b + u[1] * (hi_b - lo_b)


def make_source_video(seed: int, index: int, label: int, cfg: VideoConfig) -> VideoSample:
    rng = video_rng(seed, "source", index)
    T = int(rng.integers(cfg.n_frames_range[0], cfg.n_frames_range[1] + 1))
    n_sprites = int(rng.integers(cfg.sprite_count_range[0], cfg.sprite_count_range[1] + 1))
    family = SOURCE_FAMILIES[label % len(SOURCE_FAMILIES)]
    speed_scale = 1.0 + 0.5 * (label // len(SOURCE_FAMILIES))
    trajs = [_trajectory(rng, cfg, T, family, None, speed_scale) for _ in range(n_sprites)]
    frames = _render_source(rng, cfg, trajs, T)
    return VideoSample(_quantize(rng, frames, cfg.noise_std / 2), label, "", "source")


def make_target_video(seed: int, index: int, anomaly_type: str, cfg: VideoConfig) -> VideoSample:
    """Normal video when ``anomaly_type`` is empty, otherwise one disrupted sprite.

    Appearance (length, scene, sprites, exposure) depends only on ``(seed, index)``,
    so the abnormal video at an index is a look-alike of the normal one and only
    the dynamics tell them apart.
    """
    tag = "target_abnormal" if anomaly_type else "target_normal"
    look = np.random.default_rng(np.random.SeedSequence([seed, 5, index]))
    T = int(look.integers(cfg.n_frames_range[0], cfg.n_frames_range[1] + 1))
    n_sprites = int(look.integers(cfg.sprite_count_range[0], cfg.sprite_count_range[1] + 1))
    bg = scene_background(seed, int(look.integers(cfg.scene_count)), cfg) * look.uniform(0.9, 1.1)
    looks = [(look.uniform(4.5, 5.5) * cfg.sprite_scale, look.uniform(0.7, 0.9, size=cfg.channels))
             for _ in range(n_sprites)]

    rng = video_rng(seed, tag, index)
    window = None
    if anomaly_type:
        if anomaly_type not in ANOMALY_TYPES:
            raise ValueError(f"unknown anomaly type {anomaly_type!r}; choose from {ANOMALY_TYPES}")
        w = min(int(rng.integers(cfg.anomaly_len_range[0], cfg.anomaly_len_range[1] + 1)), T)
        t0 = int(rng.integers(0, T - w + 1))
        window = (t0, t0 + w)
    trajs = [_trajectory(rng, cfg, T, anomaly_type if (anomaly_type and s == 0) else "smooth",
                         window if s == 0 else None)
             for s in range(n_sprites)]
    frames = _render_target(cfg, bg, trajs, looks)
    gain, offset = _exposure(seed, index, cfg)
    frames = (frames - 0.35) * gain + 0.35 + offset
    return VideoSample(_quantize(rng, frames, cfg.noise_std), int(bool(anomaly_type)), anomaly_type, tag, window)


# ---------------------------------------------------------------------------
# corpora on disk


class TargetManifests(NamedTuple):
    normal: DatasetManifest
    abnormal: DatasetManifest


def _write_videos(out_dir: Path, prefix: str, videos) -> list[ManifestEntry]:
    vid_dir = out_dir / "videos"
    vid_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(videos):
        rel = f"videos/{prefix}_{i:05d}.actf"
        write_tensor(out_dir / rel, v.frames)
        entries.append(ManifestEntry(rel, v.label, v.anomaly_type, v.n_frames))
    return entries


def gen_source_dataset(seed: int, n_classes: int, n_per_class: int, cfg: VideoConfig,
                       out_dir) -> DatasetManifest:
    """Write ``n_classes * n_per_class`` labeled source videos and ``source.json``."""
    if n_classes < 2:
        raise ValueError("source corpus needs at least 2 classes")
    out_dir = Path(out_dir)
    labels = [k for k in range(n_classes) for _ in range(n_per_class)]
    videos = (make_source_video(seed, i, lab, cfg) for i, lab in enumerate(labels))
    entries = _write_videos(out_dir, "src", videos)
    gen_cfg = {"kind": "source", "n_classes": n_classes, "n_per_class": n_per_class,
               "video": cfg.to_dict()}
    m = DatasetManifest("source", entries, seed, gen_cfg, out_dir.resolve())
    save_manifest(out_dir / "source.json", m)
    return m


def gen_target_dataset(seed: int, anomaly_types: list[str], n_normal: int, n_per_type: int,
                       cfg: VideoConfig, out_dir) -> TargetManifests:
    """Write normal and abnormal target corpora (``target_normal.json``, ``target_abnormal.json``)."""
    if not anomaly_types:
        raise ValueError("need at least one anomaly type")
    if n_normal < n_per_type:
        raise ValueError("n_normal must be >= n_per_type")
    for a in anomaly_types:
        if a not in ANOMALY_TYPES:
            raise ValueError(f"unknown anomaly type {a!r}; choose from {ANOMALY_TYPES}")
    out_dir = Path(out_dir)
    gen_cfg = {"kind": "target", "anomaly_types": list(anomaly_types), "n_normal": n_normal,
               "n_per_type": n_per_type, "video": cfg.to_dict()}
    normals = (make_target_video(seed, i, "", cfg) for i in range(n_normal))
    types = [a for a in anomaly_types for _ in range(n_per_type)]
    abnormals = (make_target_video(seed, i, a, cfg) for i, a in enumerate(types))
    m_norm = DatasetManifest("target_normal", _write_videos(out_dir, "normal", normals), seed,
                             gen_cfg, out_dir.resolve())
    m_abn = DatasetManifest("target_abnormal", _write_videos(out_dir, "abnormal", abnormals), seed,
                            gen_cfg, out_dir.resolve())
    save_manifest(out_dir / "target_normal.json", m_norm)
    save_manifest(out_dir / "target_abnormal.json", m_abn)
    return TargetManifests(m_norm, m_abn)


def load_videos(manifest: DatasetManifest) -> list[VideoSample]:
    return [
        VideoSample(read_tensor(manifest.resolve(e)), e.label, e.anomaly_type, manifest.domain_tag)
        for e in manifest.entries
    ]


# ---------------------------------------------------------------------------
# clip sampling


def clip_start(n_frames: int, policy: str, clip_len: int, frame_rate: int,
               rng: np.random.Generator | None = None) -> int:
    span = clip_len * frame_rate
    if n_frames < span:
        raise ClipError(f"video of {n_frames} frames too short for a clip spanning {span}")
    if policy == "middlemost":
        return (n_frames - span) // 2
    if policy == "random":
        if rng is None:
            raise ValueError("random policy needs an rng")
        return int(rng.integers(0, n_frames - span + 1))
    raise ValueError(f"unknown clip policy {policy!r}")


def extract_clip(frames: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Float clip [clip_len, H, W, C] scaled to [0, 1]."""
    if spec.start_frame < 0 or spec.start_frame + spec.span > frames.shape[0]:
        raise ClipError(f"clip {spec} out of range for {frames.shape[0]} frames")
    return frames[spec.indices()].astype(np.float64) / 255.0


def sample_clip(video: VideoSample, policy: str, clip_len: int = 8, frame_rate: int = 1,
                seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed) if policy == "random" else None
    start = clip_start(video.n_frames, policy, clip_len, frame_rate, rng)
    return extract_clip(video.frames, ClipSpec(start, clip_len, frame_rate, policy))


def wrap_frames(frames: np.ndarray, min_len: int) -> np.ndarray:
    """Repeat from the beginning until at least ``min_len`` frames exist."""
    T = frames.shape[0]
    if T >= min_len:
        return frames
    return frames[np.arange(min_len) % T]


def clip_sequence_starts(n_frames: int, clip_len: int, stride: int, min_len: int,
                         max_len: int) -> list[int]:
    usable = min(max(n_frames, min_len), max_len)
    return list(range(0, usable - clip_len + 1, stride))


def sample_clip_sequence(video: VideoSample, clip_len: int = 8, stride: int = 4,
                         min_len: int = 20, max_len: int = 124) -> np.ndarray:
    """Strided clips from the start of the video, ``[L, clip_len, H, W, C]`` floats in [0, 1]."""
    if min_len < clip_len:
        raise ValueError("min_len must be >= clip_len")
    frames = wrap_frames(video.frames, min_len)[:max_len]
    starts = clip_sequence_starts(video.n_frames, clip_len, stride, min_len, max_len)
    idx = np.asarray(starts)[:, None] + np.arange(clip_len)[None, :]
    return frames[idx].astype(np.float64) / 255.0
