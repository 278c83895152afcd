"""Command-line entry point: ``fsvad <subcommand> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import ConfigError, load_config, save_config, variant_name
from .dam import EmptyDatasetError, NoValidShiftError
from .encoder import NumericError, load_encoder, save_encoder
from .episodes import EvalResult, PoolError, export_features
from .report import ReportError, make_report, plot_bars
from .synthdata import ClipError
from .tensorio import ManifestError, TensorFileError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("fsvad")


class DataError(RuntimeError):
    pass


def data_root(cfg: dict) -> Path:
    return Path(cfg["data"]["root"] or Path(cfg["output_dir"]) / "data")


def out_dir(cfg: dict) -> Path:
    return Path(cfg["output_dir"])


def _corpora(cfg: dict) -> pipeline.Corpora:
    root = data_root(cfg)
    if not (root / "source.json").exists():
        raise DataError(f"no manifests under {root}; run gen-data first")
    return pipeline.load_corpora(cfg, root)


def _encoder_dir(cfg: dict, stage: str) -> Path:
    return out_dir(cfg) / f"encoder_{stage}"


def _load_stage_encoder(path: Path):
    if not (path / "index.json").exists():
        raise DataError(f"missing stage artifact {path}")
    return load_encoder(path)


def _current_encoder(cfg: dict, override: str | None):
    """Encoder selected by the ablation flags, or an explicit directory."""
    if override:
        return _load_stage_encoder(Path(override))
    ab = cfg["ablation"]
    if ab["use_dam"]:
        return _load_stage_encoder(_encoder_dir(cfg, "adapted"))
    if ab["use_pretrain"]:
        return _load_stage_encoder(_encoder_dir(cfg, "pretrained"))
    return pipeline.initial_encoder(cfg)


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, args) -> None:
    counts = pipeline.gen_data(cfg, data_root(cfg))
    print(json.dumps({"data_root": str(data_root(cfg)), **counts}, sort_keys=True))


def cmd_pretrain(cfg: dict, args) -> None:
    corpora = _corpora(cfg)
    res = pipeline.pretrain_stage(cfg, corpora)
    path = _encoder_dir(cfg, "pretrained")
    save_encoder(res.encoder, path)
    _dump({"losses": res.losses, "accuracies": res.accuracies}, path / "history.json")
    print(json.dumps({"encoder": str(path), "final_loss": res.losses[-1] if res.losses else None}))


def cmd_adapt(cfg: dict, args) -> None:
    corpora = _corpora(cfg)
    if args.encoder:
        base = _load_stage_encoder(Path(args.encoder))
    elif cfg["ablation"]["use_pretrain"]:
        base = _load_stage_encoder(_encoder_dir(cfg, "pretrained"))
    else:
        base = pipeline.initial_encoder(cfg)
    res = pipeline.adapt_stage(cfg, base, corpora)
    path = _encoder_dir(cfg, "adapted")
    save_encoder(res.encoder, path)
    _dump({"losses": res.losses}, path / "history.json")
    print(json.dumps({"encoder": str(path), "final_loss": res.losses[-1] if res.losses else None}))


def cmd_meta_test(cfg: dict, args) -> None:
    corpora = _corpora(cfg)
    encoder = _current_encoder(cfg, args.encoder)
    store = pipeline.FeatureStore(encoder, corpora.normals + corpora.abnormals, cfg)
    use_mcpm = cfg["ablation"]["use_mcpm"]
    results = {tf: pipeline.meta_test(cfg, store, corpora, use_mcpm, tf).to_json()
               for tf in cfg["episodes"]["type_filters"]}
    report = {
        "variant": variant_name(cfg["ablation"]),
        "method": "mcpm" if use_mcpm else f"head_only_{cfg['head']['kind']}",
        "results": results,
        "stages": {},
        "baselines": {},
        "config": pipeline.report_config(cfg),
        "environment": pipeline.environment(),
    }
    _dump(report, out_dir(cfg) / "report.json")
    _print_results(report)


def cmd_run(cfg: dict, args) -> None:
    out = pipeline.run_pipeline(cfg, _corpora(cfg))
    pipeline.write_report(out, out_dir(cfg))
    _print_results(out.report)


def cmd_export_features(cfg: dict, args) -> None:
    corpora = _corpora(cfg)
    encoder = _current_encoder(cfg, args.encoder)
    videos = {"source": corpora.source, "normal": corpora.normals, "abnormal": corpora.abnormals,
              "target": corpora.normals + corpora.abnormals}[args.split]
    path = Path(args.out or out_dir(cfg) / f"features_{args.split}.actf")
    path.parent.mkdir(parents=True, exist_ok=True)
    feats = export_features(encoder, videos, path, cfg["head"]["clip_len"], cfg["head"]["frame_rate"])
    print(json.dumps({"features": str(path), "rows": int(feats.shape[0]), "dim": int(feats.shape[1])}))


def cmd_report(cfg: dict, args) -> None:
    csv_path, png_path = make_report(args.runs, args.out or out_dir(cfg) / "report")
    print(csv_path.read_text(encoding="utf-8"), end="")
    print(json.dumps({"table": str(csv_path), "chart": str(png_path)}))


def cmd_ablate(cfg: dict, args) -> None:
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in pipeline.ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {sorted(pipeline.ABLATION_VARIANTS)}")
    shots = [int(k) for k in args.shots.split(",")] if args.shots else None
    res = pipeline.run_ablation(cfg, seeds, variants, shots, args.type_filter)
    timings = res.pop("_timings")
    doc = {v: {str(k): {str(s): r.to_json() for s, r in by_seed.items()} for k, by_seed in by_k.items()}
           for v, by_k in res.items()}
    target = out_dir(cfg) / "ablation"
    _dump({"seeds": seeds, "type_filter": args.type_filter, "results": doc, "config": cfg},
          target / "ablation.json")
    _dump(timings, target / "timings.json")
    rows = []
    for v, by_k in res.items():
        for k, by_seed in by_k.items():
            means = [r.mean for r in by_seed.values()]
            summary = EvalResult.from_accuracies(means)
            rows.append((v, k, summary))
    with open(target / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "k_shots", "seed_mean±std"])
        for v, k, s in rows:
            w.writerow([v, k, s.cell()])
    cols = [f"K={k}" for k in sorted({k for _, k, _ in rows})]
    plot_bars(target / "ablation.png", list(res), cols, {(v, f"K={k}"): s for v, k, s in rows},
              title=f"Ablation over seeds {args.seeds}")
    print((target / "ablation.csv").read_text(encoding="utf-8"), end="")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic source and target corpora"),
    "pretrain": (cmd_pretrain, "supervised pretraining on the source corpus"),
    "adapt": (cmd_adapt, "contrastive adaptation on normal target videos"),
    "meta-test": (cmd_meta_test, "episodic evaluation with the stage encoders on disk"),
    "run": (cmd_run, "all stages selected by the ablation flags, end to end"),
    "export-features": (cmd_export_features, "write middle-clip features as a tensor file"),
    "report": (cmd_report, "combine run reports into a table and bar chart"),
    "ablate": (cmd_ablate, "several variants over several seeds, sharing stages"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsvad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set episodes.k_shots=10")
        p.add_argument("--jobs", type=int, default=None, help="CPU threads for batched episode training")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("adapt", "meta-test", "export-features"):
            p.add_argument("--encoder", help="encoder directory overriding the stage default")
        if name == "export-features":
            p.add_argument("--split", choices=("source", "normal", "abnormal", "target"), default="target")
            p.add_argument("--out", help="output tensor file")
        if name == "report":
            p.add_argument("runs", nargs="+", help="run directories or report.json files")
            p.add_argument("--out", help="output directory")
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2,3,4")
            p.add_argument("--variants", default=",".join(pipeline.ABLATION_VARIANTS))
            p.add_argument("--shots", default=None, help="comma-separated shot counts")
            p.add_argument("--type-filter", default="all")
    return parser


def _print_results(report: dict) -> None:
    for tf, res in report["results"].items():
        print(f"{report['variant']},{tf},{res['mean']:.4f},{res['std']:.4f}")


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg["jobs"] = args.jobs
        torch.set_num_threads(int(cfg["jobs"]))
        if args.command in ("run", "meta-test", "pretrain", "adapt"):
            save_config(cfg, out_dir(cfg) / "config.json")
        COMMANDS[args.command][0](cfg, args)
    except (ConfigError, ReportError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (DataError, TensorFileError, ManifestError, PoolError, ClipError, EmptyDatasetError,
            NoValidShiftError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (TypeError, ValueError) as exc:
        # malformed config values usually surface here (wrong types, bad ranges)
        return _fail(EXIT_CONFIG, "config", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
