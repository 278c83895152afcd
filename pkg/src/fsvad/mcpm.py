"""Semantic-temporal graph over clip features, with a max readout and a classifier head.

Every tensor op here accepts arbitrary leading batch axes, and the trainable
parameters carry a leading *episode* axis ``E``. Training many independent
episodes at once is then a single forward/backward: the total loss is a sum
of per-episode losses over disjoint parameter slices, and Adam updates are
elementwise, so each slice follows its own trajectory. Padded nodes are
masked out before every convolution so padding never leaks into real nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import DTYPES, ClipEncoder, check_finite, encode_clips, make_optimizer
from .synthdata import VideoSample, sample_clip_sequence

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# graph construction


def build_temporal_edges(n_nodes: int) -> list[tuple[int, int]]:
    if n_nodes < 1:
        raise ValueError("graph needs at least one node")
    edges = []
    for i in range(n_nodes - 1):
        edges += [(i, i + 1), (i + 1, i)]
    return edges


def build_semantic_edges(Z: torch.Tensor, k: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Directed kNN adjacency ``[..., L, L]`` by Euclidean distance, ties to the lower index.

    ``mask [..., L]`` marks real nodes; padded nodes neither send nor receive edges.
    """
    Z = torch.as_tensor(Z)
    L = Z.shape[-2]
    if L < 1:
        raise ValueError("graph needs at least one node")
    if k < 0:
        raise ValueError("k must be >= 0")
    with torch.no_grad():
        diff = Z.unsqueeze(-2) - Z.unsqueeze(-3)
        dist = (diff * diff).sum(-1)
        blocked = torch.eye(L, dtype=torch.bool).expand_as(dist).clone()
        if mask is not None:
            blocked |= ~mask.bool().unsqueeze(-2)
        dist = dist.masked_fill(blocked, float("inf"))
        kk = min(k, L - 1)
        A = torch.zeros(dist.shape, dtype=Z.dtype)
        if kk > 0:
            order = torch.sort(dist, dim=-1, stable=True).indices[..., :kk]
            chosen = torch.gather(dist, -1, order).isfinite().to(Z.dtype)
            A.scatter_(-1, order, chosen)
        if mask is not None:
            A = A * mask.to(Z.dtype).unsqueeze(-1)
    return A


# ---------------------------------------------------------------------------
# node updates


def conv1d_nodes(Z: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Same-padded 1-D convolution along the node axis.

    ``weight [..., k*d_in, d_out]`` stacks taps from left to right; ``k`` is odd.
    """
    taps = weight.shape[-2] // Z.shape[-1]
    if taps * Z.shape[-1] != weight.shape[-2] or taps % 2 == 0:
        raise ValueError(f"kernel {tuple(weight.shape)} incompatible with features {tuple(Z.shape)}")
    if taps == 1:
        cols = Z
    else:
        half = taps // 2
        L = Z.shape[-2]
        padded = F.pad(Z, (0, 0, half, half))
        cols = torch.cat([padded[..., i:i + L, :] for i in range(taps)], dim=-1)
    return cols @ weight + bias.unsqueeze(-2)


def _masked(Z: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    return Z if mask is None else Z * mask.to(Z.dtype).unsqueeze(-1)


@dataclass
class TemporalPath:
    weights: list[torch.Tensor]
    biases: list[torch.Tensor]


def temporal_update(Z: torch.Tensor, params: TemporalPath, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Three convolutions along the node axis with ReLU between them."""
    h = _masked(Z, mask)
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = conv1d_nodes(h, w, b)
        if i < n - 1:
            h = F.relu(h)
        h = _masked(h, mask)
    return h


def semantic_update(Z: torch.Tensor, A: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Edge convolution: row i becomes ``[z_i, sum_{j in N(i)} z_j - z_i] @ W``."""
    if A.shape[-1] != Z.shape[-2] or W.shape[-2] != 2 * Z.shape[-1]:
        raise ValueError("shape mismatch in semantic update")
    return torch.cat([Z, A @ Z - Z], dim=-1) @ W


def fuse(Z: torch.Tensor, Z_t: torch.Tensor, Z_s: torch.Tensor) -> torch.Tensor:
    if not (Z.shape == Z_t.shape == Z_s.shape):
        raise ValueError(f"cannot fuse shapes {Z.shape}, {Z_t.shape}, {Z_s.shape}")
    return F.relu(Z + Z_t + Z_s)


def readout(Z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-dimension maximum over nodes."""
    if Z.shape[-2] == 0:
        raise ValueError("empty graph")
    if mask is not None:
        Z = Z.masked_fill(~mask.bool().unsqueeze(-1), float("-inf"))
    return Z.amax(dim=-2)


# ---------------------------------------------------------------------------
# parameters


def _uniform(gen: torch.Generator, shape, fan_in: int, dtype) -> torch.Tensor:
    bound = fan_in ** -0.5
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


class STGCN(nn.Module):
    """Graph network parameters (plus classifier head) for ``E`` independent episodes."""

    def __init__(self, seeds: list[int], d_in: int, d_graph: int = 32, k: int = 3,
                 lift_kernel: int = 1, temporal_kernel: int = 3, head_kind: str = "cosine",
                 temperature: float = 10.0, n_classes: int = 2, dtype: str = "float32"):
        super().__init__()
        self.k = k
        self.d_in = d_in
        self.d_graph = d_graph
        self.head_kind = head_kind
        self.temperature = temperature
        dt = DTYPES[dtype]
        per_episode = [self._init_one(s, d_in, d_graph, lift_kernel, temporal_kernel, n_classes, dt) for s in seeds]
        for name in per_episode[0]:
            self.register_parameter(name, nn.Parameter(torch.stack([p[name] for p in per_episode])))

    @staticmethod
    def _init_one(seed, d_in, d_g, lift_k, t_k, n_classes, dtype) -> dict:
        gen = torch.Generator().manual_seed(int(seed) % (1 << 63))
        p = {
            "lift_w": _uniform(gen, (lift_k * d_in, d_g), lift_k * d_in, dtype),
            "lift_b": _uniform(gen, (d_g,), lift_k * d_in, dtype),
        }
        for i in range(3):
            p[f"t{i}_w"] = _uniform(gen, (t_k * d_g, d_g), t_k * d_g, dtype)
            p[f"t{i}_b"] = _uniform(gen, (d_g,), t_k * d_g, dtype)
        p["sem_w"] = _uniform(gen, (2 * d_g, d_g), 2 * d_g, dtype)
        p["head_w"] = _uniform(gen, (d_g, n_classes), d_g, dtype)
        p["head_b"] = torch.zeros(n_classes, dtype=dtype)
        return p

    @property
    def n_episodes(self) -> int:
        return self.lift_w.shape[0]

    @property
    def temporal(self) -> TemporalPath:
        return TemporalPath([self.t0_w, self.t1_w, self.t2_w], [self.t0_b, self.t1_b, self.t2_b])

    def _ep(self, t: torch.Tensor, extra: int) -> torch.Tensor:
        # [E, ...] -> [E, 1 x extra, ...] to broadcast over the video batch
        return t.reshape(t.shape[:1] + (1,) * extra + t.shape[1:])

    def video_features(self, X: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``X [E, B, L, d_in]`` clip features -> video features ``[E, B, d_graph]``."""
        ep = lambda t: self._ep(t, X.ndim - 3)
        Z = _masked(F.relu(conv1d_nodes(_masked(X, mask), ep(self.lift_w), ep(self.lift_b))), mask)
        A = build_semantic_edges(Z.detach(), self.k, mask)
        Z_t = temporal_update(Z, TemporalPath([ep(w) for w in self.temporal.weights],
                                              [ep(b) for b in self.temporal.biases]), mask)
        Z_s = _masked(semantic_update(Z, A, ep(self.sem_w)), mask)
        return readout(fuse(Z, Z_t, Z_s), mask)

    def logits(self, f: torch.Tensor) -> torch.Tensor:
        ep = lambda t: self._ep(t, f.ndim - 3)
        if self.head_kind == "fc":
            return f @ ep(self.head_w) + ep(self.head_b).unsqueeze(-2)
        zn = F.normalize(f, dim=-1, eps=1e-12)
        wn = F.normalize(self.head_w, dim=-2, eps=1e-12)
        return self.temperature * (zn @ ep(wn))

    def forward(self, X: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.logits(self.video_features(X, mask))

    def graph_state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.state_dict().items() if not k.startswith("head")}

    def head_state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.state_dict().items() if k.startswith("head")}


# ---------------------------------------------------------------------------
# features, forward and training


@dataclass
class MCPMConfig:
    clip_len: int = 8
    stride: int = 4
    min_len: int = 20
    max_len: int = 124
    d_graph: int = 32
    k: int = 3
    lift_kernel: int = 1
    head: str = "cosine"
    temperature: float = 10.0
    optimizer: str = "adam"
    lr: float = 0.001
    batch_size: int = 4
    epochs: int = 60
    dtype: str = "float32"


def video_clip_features(encoder: ClipEncoder, video: VideoSample, cfg: MCPMConfig) -> np.ndarray:
    """Clip features ``[L, d]`` of the strided clip sequence."""
    clips = sample_clip_sequence(video, cfg.clip_len, cfg.stride, cfg.min_len, cfg.max_len)
    return encode_clips(encoder, clips)


def pad_sequences(seqs: list[np.ndarray], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``[L_i, d]`` arrays into ``[N, Lmax, d]`` plus a boolean mask ``[N, Lmax]``."""
    length = length or max(len(s) for s in seqs)
    d = seqs[0].shape[-1]
    out = np.zeros((len(seqs), length, d))
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def forward_video(encoder: ClipEncoder, graph: STGCN, video: VideoSample, cfg: MCPMConfig,
                  episode: int = 0) -> torch.Tensor:
    """Class probabilities of one video; differentiable w.r.t. graph and head parameters."""
    clips = sample_clip_sequence(video, cfg.clip_len, cfg.stride, cfg.min_len, cfg.max_len)
    feats = encoder(torch.as_tensor(clips, dtype=encoder.dtype))
    X = feats.to(graph.lift_w.dtype)[None, None].expand(graph.n_episodes, 1, -1, -1)
    return torch.softmax(graph(X), dim=-1)[episode, 0]


@dataclass
class TrainedGraph:
    model: STGCN
    losses: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # [epochs, E]


def train_graph_batch(table: np.ndarray, mask: np.ndarray, support_idx: np.ndarray,
                      support_labels: np.ndarray, seeds: list[int], cfg: MCPMConfig) -> TrainedGraph:
    """Train ``E`` episodes at once.

    ``table [N, Lmax, d]`` / ``mask [N, Lmax]`` hold padded clip features of every
    video; ``support_idx [E, S]`` indexes into it with labels ``support_labels [E, S]``.
    """
    support_idx = np.asarray(support_idx)
    support_labels = np.asarray(support_labels)
    E, S = support_idx.shape
    for e in range(E):
        if len(set(support_labels[e].tolist())) < 2:
            raise ValueError("support set must contain both classes")
    dt = DTYPES[cfg.dtype]
    model = STGCN(seeds, table.shape[-1], cfg.d_graph, cfg.k, cfg.lift_kernel,
                  head_kind=cfg.head, temperature=cfg.temperature, dtype=cfg.dtype)
    X_all = torch.as_tensor(table, dtype=dt)
    M_all = torch.as_tensor(mask)
    y_all = torch.as_tensor(support_labels, dtype=torch.long)
    losses = np.zeros((cfg.epochs, E))
    if cfg.epochs == 0:
        return TrainedGraph(model, losses)
    opt = make_optimizer(model.parameters(), cfg.optimizer, cfg.lr)
    rngs = [np.random.default_rng(np.random.SeedSequence([int(s) % (1 << 63), 7])) for s in seeds]
    for epoch in range(cfg.epochs):
        perms = np.stack([r.permutation(S) for r in rngs])
        for start in range(0, S, cfg.batch_size):
            cols = perms[:, start:start + cfg.batch_size]
            vid = torch.as_tensor(np.take_along_axis(support_idx, cols, 1))
            y = torch.gather(y_all, 1, torch.as_tensor(cols))
            logits = model(X_all[vid], M_all[vid])
            per_ep = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1),
                                     reduction="none").reshape(E, -1).mean(1)
            loss = per_ep.sum()
            check_finite(loss, "train_mcpm")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses[epoch] += per_ep.detach().double().numpy() * cols.shape[1] / S
    return TrainedGraph(model, losses)


@torch.no_grad()
def predict_batch(model: STGCN, table: np.ndarray, mask: np.ndarray, query_idx: np.ndarray) -> np.ndarray:
    """Probabilities ``[E, Q, n_classes]`` for ``query_idx [E, Q]``."""
    dt = model.lift_w.dtype
    vid = torch.as_tensor(np.asarray(query_idx))
    logits = model(torch.as_tensor(table, dtype=dt)[vid], torch.as_tensor(mask)[vid])
    return torch.softmax(logits, dim=-1).double().numpy()


def train_mcpm(encoder: ClipEncoder, support: list[tuple[VideoSample, int]], cfg: MCPMConfig,
               seed: int = 0) -> TrainedGraph:
    """Train graph and head for one episode on a frozen encoder."""
    if len({lab for _, lab in support}) < 2:
        raise ValueError("support set must contain both classes")
    seqs = [video_clip_features(encoder, v, cfg) for v, _ in support]
    table, mask = pad_sequences(seqs)
    idx = np.arange(len(support))[None]
    labels = np.array([[lab for _, lab in support]])
    return train_graph_batch(table, mask, idx, labels, [seed], cfg)
