"""Factorized (2+1)D clip encoder, classifier heads and supervised source pretraining."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthdata import ClipSpec, VideoSample, clip_start, extract_clip
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class Factorized3d(nn.Module):
    """Spatial 3x3 conv (stride 2) then temporal 3-tap conv, each followed by ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.spatial = nn.Conv3d(in_channels, out_channels, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        self.temporal = nn.Conv3d(out_channels, out_channels, (3, 1, 1), padding=(1, 0, 0))

    def forward(self, x):
        return F.relu(self.temporal(F.relu(self.spatial(x))))


class ClipEncoder(nn.Module):
    """Maps clips ``[B, T, H, W, C]`` to feature vectors ``[B, feature_dim]``."""

    # fixed input standardization for pixel values in [0, 1]
    input_mean = 0.3
    input_std = 0.3

    def __init__(self, widths=(16, 32, 64), feature_dim: int = 64, in_channels: int = 3):
        super().__init__()
        self.widths = tuple(widths)
        self.feature_dim = feature_dim
        self.in_channels = in_channels
        chans = (in_channels,) + self.widths
        self.blocks = nn.ModuleList(Factorized3d(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.proj = nn.Linear(self.widths[-1], feature_dim)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def config(self) -> dict:
        return {"widths": list(self.widths), "feature_dim": self.feature_dim, "in_channels": self.in_channels}

    @property
    def dtype(self) -> torch.dtype:
        return self.proj.weight.dtype

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.ndim != 5 or clips.shape[-1] != self.in_channels:
            raise ValueError(f"expected clips [B, T, H, W, {self.in_channels}], got {tuple(clips.shape)}")
        x = ((clips - self.input_mean) / self.input_std).permute(0, 4, 1, 2, 3)
        for block in self.blocks:
            x = block(x)
        return self.proj(x.mean(dim=(2, 3, 4)))


def build_encoder(seed: int, widths=(16, 32, 64), feature_dim: int = 64, in_channels: int = 3,
                  dtype: str = "float32") -> ClipEncoder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = ClipEncoder(widths, feature_dim, in_channels)
    return enc.to(DTYPES[dtype])


class ClassifierHead(nn.Module):
    """Linear (``fc``) or temperature-scaled cosine head over ``d`` features."""

    def __init__(self, dim: int, n_classes: int, kind: str = "fc", temperature: float = 10.0):
        super().__init__()
        if kind not in ("fc", "cosine"):
            raise ValueError(f"unknown head kind {kind!r}")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.kind = kind
        self.temperature = temperature
        self.weight = nn.Parameter(torch.empty(dim, n_classes))
        self.bias = nn.Parameter(torch.zeros(n_classes)) if kind == "fc" else None
        nn.init.normal_(self.weight, std=dim ** -0.5)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"feature dim {z.shape[-1]} != head dim {self.weight.shape[0]}")
        if self.kind == "fc":
            return z @ self.weight + self.bias
        # zero-norm features map to zero logits
        zn = F.normalize(z, dim=-1, eps=1e-12)
        wn = F.normalize(self.weight, dim=0, eps=1e-12)
        return self.temperature * (zn @ wn)


def build_head(seed: int, dim: int, n_classes: int, kind: str = "fc", temperature: float = 10.0,
               dtype: str = "float32") -> ClassifierHead:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        head = ClassifierHead(dim, n_classes, kind, temperature)
    return head.to(DTYPES[dtype])


def _as_batch(clips, dtype) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(clips), dtype=dtype)
    return t.unsqueeze(0) if t.ndim == 4 else t


def encode_clip(encoder: ClipEncoder, clip) -> torch.Tensor:
    """Feature of one clip ``[T, H, W, C]`` (or a batch); differentiable when inputs require grad."""
    if isinstance(clip, torch.Tensor):
        x = clip.unsqueeze(0) if clip.ndim == 4 else clip
        out = encoder(x)
    else:
        out = encoder(_as_batch(clip, encoder.dtype))
    return out[0] if (clip.ndim == 4) else out


@torch.no_grad()
def encode_clips(encoder: ClipEncoder, clips: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched inference over ``[N, T, H, W, C]`` clips."""
    outs = []
    for i in range(0, len(clips), batch_size):
        outs.append(encoder(_as_batch(clips[i:i + batch_size], encoder.dtype)).double().numpy())
    if not outs:
        return np.zeros((0, encoder.feature_dim))
    return np.concatenate(outs)


def classify(head: ClassifierHead, z) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(logits, probabilities)``."""
    if not isinstance(z, torch.Tensor):
        z = torch.as_tensor(np.asarray(z), dtype=head.weight.dtype)
    logits = head(z)
    return logits, torch.softmax(logits, dim=-1)


# ---------------------------------------------------------------------------
# supervised pretraining


@dataclass
class PretrainConfig:
    epochs: int = 20
    optimizer: str = "adam"
    lr: float = 0.003
    momentum: float = 0.9
    batch_size: int = 16
    clip_len: int = 8
    frame_rate: int = 1
    seed: int = 0


@dataclass
class PretrainResult:
    encoder: ClipEncoder
    head: ClassifierHead
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def make_optimizer(params, kind: str, lr: float, momentum: float = 0.9) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer {kind!r}")


def epoch_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss in {where}")


def pretrain_source(encoder: ClipEncoder, head: ClassifierHead, videos: list[VideoSample],
                    cfg: PretrainConfig) -> PretrainResult:
    """Cross-entropy training on one random clip per video per epoch.

    Works on copies; the passed modules are left untouched.
    """
    if len({v.label for v in videos}) < 2:
        raise ValueError("source pretraining needs at least two classes")
    encoder = copy.deepcopy(encoder)
    head = copy.deepcopy(head)
    result = PretrainResult(encoder, head)
    if cfg.epochs == 0:
        return result
    params = list(encoder.parameters()) + list(head.parameters())
    opt = make_optimizer(params, cfg.optimizer, cfg.lr, cfg.momentum)
    labels = np.array([v.label for v in videos])
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, 1, epoch)
        clips = np.stack([
            extract_clip(v.frames, ClipSpec(clip_start(v.n_frames, "random", cfg.clip_len, cfg.frame_rate, rng),
                                            cfg.clip_len, cfg.frame_rate))
            for v in videos
        ])
        order = rng.permutation(len(videos))
        total, correct = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = torch.as_tensor(clips[idx], dtype=encoder.dtype)
            y = torch.as_tensor(labels[idx])
            logits = head(encoder(x))
            loss = F.cross_entropy(logits, y)
            check_finite(loss, "pretrain_source")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(-1) == y).sum())
        result.losses.append(total / len(videos))
        result.accuracies.append(correct / len(videos))
        log.info("pretrain epoch %d loss %.4f acc %.3f", epoch, result.losses[-1], result.accuracies[-1])
    return result


# ---------------------------------------------------------------------------
# serialization: a directory of TensorFiles plus index.json


def save_module(module: nn.Module, directory, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"meta": meta or {}, "tensors": {}}
    for name, t in module.state_dict().items():
        fname = name.replace(".", "_") + ".actf"
        arr = t.detach().cpu().numpy()
        write_tensor(directory / fname, arr.reshape(arr.shape or (1,)))
        index["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
    with open(directory / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)


def load_state(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    with open(directory / "index.json") as f:
        index = json.load(f)
    state = {}
    for name, info in index["tensors"].items():
        arr = read_tensor(directory / info["file"]).reshape(info["shape"])
        state[name] = torch.from_numpy(arr)
    return state, index["meta"]


def save_encoder(encoder: ClipEncoder, directory) -> None:
    save_module(encoder, directory, {"kind": "encoder", **encoder.config()})


def load_encoder(directory) -> ClipEncoder:
    state, meta = load_state(directory)
    enc = ClipEncoder(meta["widths"], meta["feature_dim"], meta["in_channels"])
    dtype = next(iter(state.values())).dtype
    enc = enc.to(dtype)
    enc.load_state_dict(state)
    return enc


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
