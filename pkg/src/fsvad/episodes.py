"""Episodic 2-way K-shot meta-testing, baselines and summary statistics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import DTYPES, ClipEncoder, check_finite, encode_clips, make_optimizer
from .mcpm import MCPMConfig, pad_sequences, predict_batch, train_graph_batch, video_clip_features
from .synthdata import ClipSpec, VideoSample, clip_start, extract_clip
from .tensorio import write_tensor

log = logging.getLogger(__name__)


class PoolError(ValueError):
    pass


@dataclass
class EpisodeConfig:
    n_way: int = 2
    k_shots: int = 5
    q_queries: int = 15
    n_episodes: int = 200
    type_filter: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.n_way != 2:
            raise ValueError("only 2-way episodes are supported")
        if self.k_shots < 1 or self.q_queries < 1 or self.n_episodes < 1:
            raise ValueError("k_shots, q_queries and n_episodes must be positive")


@dataclass
class MetaTestPool:
    videos: list[VideoSample]
    type_filter: str = "all"

    @property
    def labels(self) -> np.ndarray:
        return np.array([v.label for v in self.videos])

    @property
    def normal_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)

    @property
    def abnormal_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    def __len__(self) -> int:
        return len(self.videos)


def build_meta_test_pool(normals: Sequence[VideoSample], abnormals: Sequence[VideoSample],
                         type_filter: str = "all", cfg: EpisodeConfig | None = None) -> MetaTestPool:
    """All normal videos plus the abnormal videos matching ``type_filter``."""
    if type_filter == "all":
        chosen = list(abnormals)
    else:
        chosen = [v for v in abnormals if v.anomaly_type == type_filter]
        if not chosen:
            known = sorted({v.anomaly_type for v in abnormals})
            raise PoolError(f"unknown anomaly type {type_filter!r}; pool has {known}")
    pool = MetaTestPool(list(normals) + chosen, type_filter)
    if cfg is not None:
        check_pool(pool, cfg)
    return pool


def check_pool(pool: MetaTestPool, cfg: EpisodeConfig) -> None:
    need = cfg.k_shots + cfg.q_queries
    for name, idx in (("normal", pool.normal_idx), ("abnormal", pool.abnormal_idx)):
        if len(idx) < need:
            raise PoolError(f"pool has {len(idx)} {name} videos, episodes need {need}")


@dataclass
class Episode:
    index: int
    support_idx: np.ndarray
    support_labels: np.ndarray
    query_idx: np.ndarray
    query_labels: np.ndarray
    seed: int

    @property
    def support(self) -> list[tuple[int, int]]:
        return list(zip(self.support_idx.tolist(), self.support_labels.tolist()))

    @property
    def query(self) -> list[tuple[int, int]]:
        return list(zip(self.query_idx.tolist(), self.query_labels.tolist()))


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0] >> 1)


def sample_episode(pool: MetaTestPool, cfg: EpisodeConfig, episode_index: int) -> Episode:
    check_pool(pool, cfg)
    s = episode_seed(cfg.seed, episode_index)
    rng = np.random.default_rng(s)
    K, Q = cfg.k_shots, cfg.q_queries
    norm = rng.choice(pool.normal_idx, size=K + Q, replace=False)
    abn = rng.choice(pool.abnormal_idx, size=K + Q, replace=False)
    return Episode(
        index=episode_index,
        support_idx=np.concatenate([norm[:K], abn[:K]]),
        support_labels=np.repeat([0, 1], K),
        query_idx=np.concatenate([norm[K:], abn[K:]]),
        query_labels=np.repeat([0, 1], Q),
        seed=s,
    )


def sample_episodes(pool: MetaTestPool, cfg: EpisodeConfig) -> list[Episode]:
    return [sample_episode(pool, cfg, i) for i in range(cfg.n_episodes)]


# ---------------------------------------------------------------------------
# results


@dataclass
class EvalResult:
    per_episode_accuracy: list[float]
    mean: float
    std: float
    config: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], config: dict | None = None) -> "EvalResult":
        a = np.asarray(accs, dtype=float)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        return cls([float(x) for x in a], float(a.mean()), std, dict(config or {}))

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_episode": self.per_episode_accuracy,
                "config": self.config}

    @classmethod
    def from_json(cls, doc: dict) -> "EvalResult":
        return cls(list(doc["per_episode"]), doc["mean"], doc["std"], doc.get("config", {}))

    def cell(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}"


def episode_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float((pred == truth).mean())


Predictor = Callable[[list[Episode]], list[np.ndarray]]


def evaluate(predict: Predictor, episodes: list[Episode], config: dict | None = None) -> EvalResult:
    """Score a predictor that maps episodes to predicted query labels."""
    preds = predict(episodes)
    accs = [episode_accuracy(p, ep.query_labels) for p, ep in zip(preds, episodes)]
    return EvalResult.from_accuracies(accs, config)


# ---------------------------------------------------------------------------
# feature caches over a frozen encoder


class ClipFeatureCache:
    """Memoized single-clip features keyed by ``(video index, start frame)``."""

    def __init__(self, encoder: ClipEncoder, videos: Sequence[VideoSample], clip_len: int = 8,
                 frame_rate: int = 1):
        self.encoder = encoder
        self.videos = videos
        self.clip_len = clip_len
        self.frame_rate = frame_rate
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def start(self, vid: int, policy: str, rng=None) -> int:
        return clip_start(self.videos[vid].n_frames, policy, self.clip_len, self.frame_rate, rng)

    def features(self, keys: Sequence[tuple[int, int]]) -> np.ndarray:
        missing = sorted({k for k in keys if k not in self._cache})
        if missing:
            clips = np.stack([
                extract_clip(self.videos[v].frames, ClipSpec(s, self.clip_len, self.frame_rate))
                for v, s in missing
            ])
            for key, f in zip(missing, encode_clips(self.encoder, clips)):
                self._cache[key] = f
        return np.stack([self._cache[k] for k in keys])


def sequence_table(encoder: ClipEncoder, videos: Sequence[VideoSample], cfg: MCPMConfig):
    """Padded clip-sequence features ``[N, Lmax, d]`` and mask for every video."""
    seqs = [video_clip_features(encoder, v, cfg) for v in videos]
    return pad_sequences(seqs)


# ---------------------------------------------------------------------------
# methods


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def mcpm_predictor(table: np.ndarray, mask: np.ndarray, cfg: MCPMConfig, chunk: int = 100) -> Predictor:
    """Per-episode graph + head training on the support set, then query prediction."""

    def predict(episodes: list[Episode]) -> list[np.ndarray]:
        out = []
        for group in _chunks(episodes, chunk):
            trained = train_graph_batch(
                table, mask,
                np.stack([e.support_idx for e in group]),
                np.stack([e.support_labels for e in group]),
                [e.seed for e in group], cfg,
            )
            probs = predict_batch(trained.model, table, mask, np.stack([e.query_idx for e in group]))
            out.extend(p.argmax(-1) for p in probs)
        return out

    return predict


@dataclass
class HeadConfig:
    kind: str = "cosine"
    temperature: float = 10.0
    optimizer: str = "adam"
    lr: float = 0.01
    epochs: int = 100
    clip_len: int = 8
    frame_rate: int = 1
    dtype: str = "float32"


def train_heads(support: np.ndarray, labels: np.ndarray, seeds: Sequence[int], cfg: HeadConfig):
    """Full-batch training of one linear/cosine head per episode; ``support [E, S, d]``."""
    E, S, d = support.shape
    dt = DTYPES[cfg.dtype]
    ws = []
    for s in seeds:
        gen = torch.Generator().manual_seed(int(s) % (1 << 63))
        ws.append(torch.randn(d, 2, generator=gen, dtype=torch.float64) * d ** -0.5)
    W = torch.nn.Parameter(torch.stack(ws).to(dt))
    b = torch.nn.Parameter(torch.zeros(E, 1, 2, dtype=dt))
    X = torch.as_tensor(support, dtype=dt)
    y = torch.as_tensor(labels, dtype=torch.long)

    def logits(x):
        if cfg.kind == "fc":
            return x @ W + b
        return cfg.temperature * (F.normalize(x, dim=-1, eps=1e-12) @ F.normalize(W, dim=1, eps=1e-12))

    params = [W, b] if cfg.kind == "fc" else [W]
    opt = make_optimizer(params, cfg.optimizer, cfg.lr)
    for _ in range(cfg.epochs):
        out = logits(X)
        loss = F.cross_entropy(out.reshape(-1, 2), y.reshape(-1), reduction="none").reshape(E, S).mean(1).sum()
        check_finite(loss, "head-only baseline")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return logits


def head_only_predictor(cache: ClipFeatureCache, cfg: HeadConfig, chunk: int = 200) -> Predictor:
    """Random support clip / middlemost query clip features with a per-episode head."""

    def predict(episodes: list[Episode]) -> list[np.ndarray]:
        out = []
        for group in _chunks(episodes, chunk):
            sup, qry = [], []
            for e in group:
                rng = np.random.default_rng(np.random.SeedSequence([e.seed, 11]))
                sup.append(cache.features([(v, cache.start(v, "random", rng)) for v in e.support_idx]))
                qry.append(cache.features([(v, cache.start(v, "middlemost")) for v in e.query_idx]))
            logits = train_heads(np.stack(sup), np.stack([e.support_labels for e in group]),
                                 [e.seed for e in group], cfg)
            with torch.no_grad():
                q = logits(torch.as_tensor(np.stack(qry), dtype=DTYPES[cfg.dtype]))
            out.extend(q.argmax(-1).numpy())
        return out

    return predict


def evaluate_pipeline(encoder: ClipEncoder, pool: MetaTestPool, ep_cfg: EpisodeConfig,
                      mcpm_cfg: MCPMConfig, table=None, chunk: int = 100) -> EvalResult:
    """Meta-test with per-episode graph training on a frozen encoder."""
    check_pool(pool, ep_cfg)
    if table is None:
        table = sequence_table(encoder, pool.videos, mcpm_cfg)
    episodes = sample_episodes(pool, ep_cfg)
    cfg = {"method": "mcpm", "episodes": asdict(ep_cfg), "mcpm": asdict(mcpm_cfg)}
    return evaluate(mcpm_predictor(*table, mcpm_cfg, chunk), episodes, cfg)


def baseline_head_only(encoder: ClipEncoder, pool: MetaTestPool, ep_cfg: EpisodeConfig,
                       head_cfg: HeadConfig, cache: ClipFeatureCache | None = None) -> EvalResult:
    check_pool(pool, ep_cfg)
    if cache is None:
        cache = ClipFeatureCache(encoder, pool.videos, head_cfg.clip_len, head_cfg.frame_rate)
    episodes = sample_episodes(pool, ep_cfg)
    cfg = {"method": f"head_only_{head_cfg.kind}", "episodes": asdict(ep_cfg), "head": asdict(head_cfg)}
    return evaluate(head_only_predictor(cache, head_cfg), episodes, cfg)


# ---------------------------------------------------------------------------
# one-class hypersphere baseline


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Radius maximizing accuracy of ``score > r => abnormal``; smallest radius wins ties.

    Candidates are midpoints between consecutive distinct sorted scores plus
    one value below the minimum and one above the maximum.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if len(scores) == 0:
        raise ValueError("empty validation set")
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    order = np.argsort(scores, kind="stable")
    s_sorted, y_sorted = scores[order], labels[order]
    # normals at or below r count as correct, abnormals above r count as correct
    below = np.searchsorted(s_sorted, cands, side="right")
    normals_below = np.concatenate([[0], np.cumsum(y_sorted == 0)])[below]
    abn_above = (y_sorted == 1).sum() - np.concatenate([[0], np.cumsum(y_sorted == 1)])[below]
    acc = (normals_below + abn_above) / len(scores)
    best = int(np.argmax(acc))
    return float(cands[best]), float(acc[best])


def balanced_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    per_class = [float((pred[truth == c] == c).mean()) for c in (0, 1) if (truth == c).any()]
    return float(np.mean(per_class))


@dataclass
class OneClassResult:
    accuracy: float
    radius: float
    validation_accuracy: float
    center: np.ndarray = field(repr=False)


def middle_features(encoder: ClipEncoder, videos: Sequence[VideoSample], clip_len: int = 8,
                    frame_rate: int = 1) -> np.ndarray:
    clips = np.stack([
        extract_clip(v.frames, ClipSpec(clip_start(v.n_frames, "middlemost", clip_len, frame_rate),
                                        clip_len, frame_rate))
        for v in videos
    ])
    return encode_clips(encoder, clips)


def one_class_from_features(train: np.ndarray, val: np.ndarray, val_labels, test: np.ndarray,
                            test_labels) -> OneClassResult:
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise ValueError("one-class baseline needs non-empty train, validation and test splits")
    center = train.mean(axis=0)
    score = lambda f: ((f - center) ** 2).sum(-1)
    r, val_acc = best_threshold(score(val), np.asarray(val_labels))
    pred = (score(test) > r).astype(int)
    return OneClassResult(balanced_accuracy(pred, np.asarray(test_labels)), r, val_acc, center)


def baseline_one_class(encoder: ClipEncoder, train_normals: Sequence[VideoSample],
                       validation: Sequence[VideoSample], test: Sequence[VideoSample],
                       clip_len: int = 8, frame_rate: int = 1) -> OneClassResult:
    """Hypersphere around the mean normal feature; radius tuned on the validation split."""
    for name, split in (("train", train_normals), ("validation", validation), ("test", test)):
        if not split:
            raise ValueError(f"empty {name} split")
    if any(v.label != 0 for v in train_normals):
        raise ValueError("one-class training set must be normal-only")
    feats = lambda vs: middle_features(encoder, vs, clip_len, frame_rate)
    return one_class_from_features(
        feats(train_normals), feats(validation), [v.label for v in validation],
        feats(test), [v.label for v in test],
    )


# ---------------------------------------------------------------------------
# export


def export_features(encoder: ClipEncoder, videos: Sequence[VideoSample], out_path, clip_len: int = 8,
                    frame_rate: int = 1) -> np.ndarray:
    """One middlemost-clip feature row per video: ``out_path`` TensorFile + ``.json`` sidecar."""
    out_path = Path(out_path)
    feats = middle_features(encoder, videos, clip_len, frame_rate)
    write_tensor(out_path, feats)
    sidecar = {
        "rows": len(videos),
        "dim": int(feats.shape[1]),
        "labels": [int(v.label) for v in videos],
        "anomaly_types": [v.anomaly_type for v in videos],
        "clip_len": clip_len,
        "frame_rate": frame_rate,
    }
    with open(out_path.with_suffix(out_path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=2)
    return feats
