"""Stage orchestration: data, source pretraining, adaptation, meta-testing, ablations."""

from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dam, encoder as enc_mod, episodes as ep_mod, mcpm, synthdata
from .config import stage_seed, variant_name
from .tensorio import load_manifest

log = logging.getLogger(__name__)


@dataclass
class Corpora:
    source: list
    normals: list
    abnormals: list
    adapt: list | None = None

    @property
    def adaptation_set(self) -> list:
        return self.normals if self.adapt is None else self.adapt


def video_config(cfg: dict) -> synthdata.VideoConfig:
    return synthdata.VideoConfig.from_dict(cfg["data"]["video"])


def generate_corpora(cfg: dict) -> Corpora:
    """In-memory corpora; identical to what :func:`gen_data` writes to disk."""
    d, seed, vcfg = cfg["data"], cfg["seed"], video_config(cfg)
    labels = [k for k in range(d["source_classes"]) for _ in range(d["source_per_class"])]
    source = [synthdata.make_source_video(seed, i, lab, vcfg) for i, lab in enumerate(labels)]
    normals = [synthdata.make_target_video(seed, i, "", vcfg) for i in range(d["n_normal"])]
    types = [a for a in d["anomaly_types"] for _ in range(d["n_per_type"])]
    abnormals = [synthdata.make_target_video(seed, i, a, vcfg) for i, a in enumerate(types)]
    return Corpora(source, normals, abnormals)


def gen_data(cfg: dict, data_dir) -> dict:
    data_dir = Path(data_dir)
    d, seed, vcfg = cfg["data"], cfg["seed"], video_config(cfg)
    src = synthdata.gen_source_dataset(seed, d["source_classes"], d["source_per_class"], vcfg, data_dir)
    tgt = synthdata.gen_target_dataset(seed, d["anomaly_types"], d["n_normal"], d["n_per_type"], vcfg, data_dir)
    return {"source": len(src), "target_normal": len(tgt.normal), "target_abnormal": len(tgt.abnormal)}


def load_corpora(cfg: dict, data_dir) -> Corpora:
    data_dir = Path(data_dir)
    load = lambda name: synthdata.load_videos(load_manifest(data_dir / name))
    corpora = Corpora(load("source.json"), load("target_normal.json"), load("target_abnormal.json"))
    if cfg["data"].get("adapt_manifest"):
        m = load_manifest(cfg["data"]["adapt_manifest"])
        corpora.adapt = synthdata.load_videos(m)
        for v in corpora.adapt:
            v.label = 0
    return corpora


# ---------------------------------------------------------------------------
# stages


def initial_encoder(cfg: dict) -> enc_mod.ClipEncoder:
    e = cfg["encoder"]
    return enc_mod.build_encoder(stage_seed(cfg["seed"], "encoder_init"), e["widths"], e["feature_dim"],
                                 cfg["data"]["video"]["channels"], cfg["dtype"])


def pretrain_stage(cfg: dict, corpora: Corpora) -> enc_mod.PretrainResult:
    encoder = initial_encoder(cfg)
    head = enc_mod.build_head(stage_seed(cfg["seed"], "source_head"), encoder.feature_dim,
                              cfg["data"]["source_classes"], "fc", dtype=cfg["dtype"])
    pcfg = enc_mod.PretrainConfig(**cfg["pretrain"], seed=stage_seed(cfg["seed"], "pretrain"))
    return enc_mod.pretrain_source(encoder, head, corpora.source, pcfg)


def adapt_config(cfg: dict) -> dam.AdaptConfig:
    d = dict(cfg["dam"])
    trip = dict(d.pop("triplet"))
    trip["crop_scale"] = tuple(trip["crop_scale"])
    return dam.AdaptConfig(**d, seed=stage_seed(cfg["seed"], "dam"), triplet=dam.TripletConfig(**trip))


def adapt_stage(cfg: dict, encoder, corpora: Corpora) -> dam.AdaptResult:
    return dam.adapt(encoder, corpora.adaptation_set, adapt_config(cfg))


def mcpm_config(cfg: dict) -> mcpm.MCPMConfig:
    return mcpm.MCPMConfig(**cfg["mcpm"], dtype=cfg["dtype"])


def head_config(cfg: dict) -> ep_mod.HeadConfig:
    return ep_mod.HeadConfig(**cfg["head"], dtype=cfg["dtype"])


def episode_config(cfg: dict, type_filter: str, k_shots: int | None = None) -> ep_mod.EpisodeConfig:
    e = cfg["episodes"]
    return ep_mod.EpisodeConfig(
        n_way=e["n_way"], k_shots=k_shots or e["k_shots"], q_queries=e["q_queries"],
        n_episodes=e["n_episodes"], type_filter=type_filter, seed=stage_seed(cfg["seed"], "episodes"),
    )


class FeatureStore:
    """Per-encoder feature caches over the meta-test videos."""

    def __init__(self, encoder, videos, cfg: dict):
        self.encoder = encoder
        self.videos = videos
        self.cfg = cfg
        self._table = None
        h = cfg["head"]
        self.cache = ep_mod.ClipFeatureCache(encoder, videos, h["clip_len"], h["frame_rate"])

    @property
    def table(self):
        if self._table is None:
            self._table = ep_mod.sequence_table(self.encoder, self.videos, mcpm_config(self.cfg))
        return self._table


class _SubsetCache:
    """View of a feature cache through a pool-index -> video-index map."""

    def __init__(self, base: ep_mod.ClipFeatureCache, keep: list[int]):
        self.base, self.keep = base, keep

    def start(self, vid: int, policy: str, rng=None) -> int:
        return self.base.start(self.keep[vid], policy, rng)

    def features(self, keys):
        return self.base.features([(self.keep[v], s) for v, s in keys])


def _subset_table(table, idx):
    return table[0][idx], table[1][idx]


def meta_test(cfg: dict, store: FeatureStore, corpora: Corpora, use_mcpm: bool,
              type_filter: str, k_shots: int | None = None) -> ep_mod.EvalResult:
    """Evaluate one method on one anomaly-type filter using cached features."""
    ep_cfg = episode_config(cfg, type_filter, k_shots)
    n_norm = len(corpora.normals)
    keep = list(range(n_norm)) + [
        n_norm + i for i, v in enumerate(corpora.abnormals) if type_filter == "all" or v.anomaly_type == type_filter
    ]
    pool = ep_mod.build_meta_test_pool(corpora.normals, corpora.abnormals, type_filter, ep_cfg)
    if use_mcpm:
        return ep_mod.evaluate_pipeline(store.encoder, pool, ep_cfg, mcpm_config(cfg),
                                        table=_subset_table(store.table, keep))
    return ep_mod.baseline_head_only(store.encoder, pool, ep_cfg, head_config(cfg),
                                     cache=_SubsetCache(store.cache, keep))


def one_class_stage(cfg: dict, encoder, corpora: Corpora) -> ep_mod.OneClassResult:
    """Hypersphere baseline on middle-clip features.

    The first half of the target normals defines the center, a labeled corpus
    drawn with a sibling seed tunes the radius, and the remaining normals plus
    every abnormal video form the test split.
    """
    oc, vcfg = cfg["one_class"], video_config(cfg)
    half = len(corpora.normals) // 2
    sibling = stage_seed(cfg["seed"], "one_class_validation")
    types = [a for a in cfg["data"]["anomaly_types"] for _ in range(oc["val_per_type"])]
    validation = [synthdata.make_target_video(sibling, i, "", vcfg) for i in range(oc["val_normal"])]
    validation += [synthdata.make_target_video(sibling, i, a, vcfg) for i, a in enumerate(types)]
    h = cfg["head"]
    return ep_mod.baseline_one_class(encoder, corpora.normals[:half], validation,
                                     corpora.normals[half:] + corpora.abnormals, h["clip_len"], h["frame_rate"])


def report_config(cfg: dict) -> dict:
    """Config echo for reports; where the run was written is not part of the experiment."""
    return {k: v for k, v in cfg.items() if k != "output_dir"}


def environment() -> dict:
    return {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__,
            "machine": platform.machine()}


# ---------------------------------------------------------------------------
# full run (one variant) and ablations (several variants sharing stages)


@dataclass
class RunOutput:
    report: dict
    timings: dict = field(default_factory=dict)
    encoder: object = None


def run_pipeline(cfg: dict, corpora: Corpora, pretrained=None, adapted=None) -> RunOutput:
    """Execute the variant selected by ``cfg['ablation']`` and build a report."""
    ab = cfg["ablation"]
    timings, stages = {}, {}
    t0 = time.perf_counter()
    if ab["use_pretrain"]:
        res = pretrained or pretrain_stage(cfg, corpora)
        encoder = res.encoder
        stages["pretrain"] = {"losses": res.losses, "accuracies": res.accuracies}
    else:
        encoder = initial_encoder(cfg)
    timings["pretrain"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if ab["use_dam"]:
        res = adapted or adapt_stage(cfg, encoder, corpora)
        encoder = res.encoder
        stages["dam"] = {"losses": res.losses}
    timings["dam"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    store = FeatureStore(encoder, corpora.normals + corpora.abnormals, cfg)
    results = {}
    for tf in cfg["episodes"]["type_filters"]:
        results[tf] = meta_test(cfg, store, corpora, ab["use_mcpm"], tf).to_json()
    timings["meta_test"] = time.perf_counter() - t0
    baselines = {}
    if cfg["one_class"]["enabled"]:
        t0 = time.perf_counter()
        oc = one_class_stage(cfg, encoder, corpora)
        baselines["one_class"] = {"accuracy": oc.accuracy, "radius": oc.radius,
                                  "validation_accuracy": oc.validation_accuracy}
        timings["one_class"] = time.perf_counter() - t0
    report = {
        "variant": variant_name(ab),
        "method": "mcpm" if ab["use_mcpm"] else f"head_only_{cfg['head']['kind']}",
        "results": results,
        "stages": stages,
        "baselines": baselines,
        "config": report_config(cfg),
        "environment": environment(),
    }
    return RunOutput(report, timings, encoder)


def write_report(out: RunOutput, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    with open(path, "w") as f:
        json.dump(out.report, f, indent=2, sort_keys=True)
    # wall-clock times vary run to run, so they live outside the report
    with open(out_dir / "timings.json", "w") as f:
        json.dump(out.timings, f, indent=2, sort_keys=True)
    return path


ABLATION_VARIANTS = {
    "pretrain+dam+mcpm": {"use_pretrain": True, "use_dam": True, "use_mcpm": True},
    "pretrain+dam": {"use_pretrain": True, "use_dam": True, "use_mcpm": False},
    "pretrain": {"use_pretrain": True, "use_dam": False, "use_mcpm": False},
    "dam+mcpm": {"use_pretrain": False, "use_dam": True, "use_mcpm": True},
    "pretrain+mcpm": {"use_pretrain": True, "use_dam": False, "use_mcpm": True},
}


def run_ablation(cfg: dict, seeds: list[int], variants: list[str], shots=None,
                 type_filter: str = "all") -> dict:
    """Mean accuracy per (variant, shots, seed), reusing stages shared between variants.

    ``shots`` is a list of shot counts for every variant or a ``{variant: list}``
    mapping; missing entries use the configured ``k_shots``.
    Returns ``{variant: {k_shots: {seed: EvalResult}}}`` plus a ``"_timings"`` entry.
    """
    default = [cfg["episodes"]["k_shots"]]
    if isinstance(shots, dict):
        plan = {v: list(shots.get(v) or default) for v in variants}
    else:
        plan = {v: list(shots or default) for v in variants}
    out: dict = {v: {k: {} for k in plan[v]} for v in variants}
    timings: dict = {}
    for seed in seeds:
        c = dict(cfg, seed=seed)
        t0 = time.perf_counter()
        corpora = generate_corpora(c)
        timings[f"{seed}/data"] = time.perf_counter() - t0
        encoders: dict = {}

        def encoder_for(ab):
            key = (ab["use_pretrain"], ab["use_dam"])
            if key in encoders:
                return encoders[key]
            t = time.perf_counter()
            if ab["use_pretrain"]:
                if (True, False) not in encoders:
                    encoders[(True, False)] = FeatureStore(pretrain_stage(c, corpora).encoder,
                                                           corpora.normals + corpora.abnormals, c)
                base = encoders[(True, False)].encoder
            else:
                base = initial_encoder(c)
            enc = adapt_stage(c, base, corpora).encoder if ab["use_dam"] else base
            encoders[key] = FeatureStore(enc, corpora.normals + corpora.abnormals, c)
            timings[f"{seed}/encoder{key}"] = time.perf_counter() - t
            return encoders[key]

        for v in variants:
            ab = ABLATION_VARIANTS[v]
            store = encoder_for(ab)
            for k in plan[v]:
                t = time.perf_counter()
                res = meta_test(c, store, corpora, ab["use_mcpm"], type_filter, k_shots=k)
                timings[f"{seed}/{v}/{k}"] = time.perf_counter() - t
                out[v][k][seed] = res
                log.info("seed %d %s k=%d: %.3f", seed, v, k, res.mean)
    out["_timings"] = timings
    return out


def summarize_ablation(results: dict) -> dict:
    """``{variant: {k: mean of per-seed means}}``."""
    summary = {}
    for v, by_k in results.items():
        if v.startswith("_"):
            continue
        summary[v] = {k: float(np.mean([r.mean for r in by_seed.values()])) for k, by_seed in by_k.items()}
    return summary
