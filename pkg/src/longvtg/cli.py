"""Command-line entry point: synth, validate, train, ground, eval, ablate, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every output file gets a ``<name>.meta.json`` sidecar holding the resolved
configuration and seeds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datastore
from .adapter import read_adapter, write_adapter
from .bench import bench_csv, bench_pipeline, linearity_check, scoring_points
from .config import ConfigError, PipelineConfig, load_config, parse_config_text
from .core import GroundingError, Span
from .evaluation import ablation_csv, evaluate, run_ablation, sweep_csv, sweep_window_length
from .pipeline import ground_all, resolve_threads
from .ranking import dump_predictions, load_predictions
from .scorer import ScorerParams, read_external_rows, read_scorer, write_scorer
from .training import train_models

log = logging.getLogger("longvtg")

ADAPTER_FILE = "adapter.ckpt"
SCORER_FILE = "scorer.ckpt"


class UsageError(Exception):
    pass


SEED_STAGES = ("adapter", "scorer")


def write_meta(path, command: str, cfg: PipelineConfig | None = None, **extra) -> None:
    meta = {"command": command, **extra}
    if cfg is not None:
        meta["config"] = cfg.to_dict()
        meta["seeds"] = {"root": cfg.seed, **{s: cfg.stage_seed(s) for s in SEED_STAGES}}
    Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _config(args) -> PipelineConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides.update(parse_config_text(f"{key} = {value}"))
    for key in ("lambda_con", "top_k_windows", "window_length", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "config", None):
        _require_file(args.config, "config file")
    return load_config(getattr(args, "config", None), **overrides)


def _load_synth_spec(path) -> datastore.SynthSpec:
    text = _require_file(path, "synth spec").read_text()
    values = {}
    types = {f: type(v) for f, v in vars(datastore.SynthSpec()).items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise datastore.InvalidSpec(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise datastore.InvalidSpec(f"unknown synth key {key!r}")
        try:
            if types[key] is tuple:
                lo, hi = (int(x) for x in raw.split(","))
                values[key] = (lo, hi)
            else:
                values[key] = types[key](raw)
        except ValueError as exc:
            raise datastore.InvalidSpec(f"bad value for {key}: {raw!r}") from exc
    spec = datastore.SynthSpec(**values)
    spec.validate()
    return spec


def _instances(path, cfg: PipelineConfig):
    return datastore.read_manifest(_require_file(path, "manifest"), normalize=cfg.normalize_features)


def _load_checkpoints(directory, cfg: PipelineConfig):
    d = Path(directory)
    scorer = read_scorer(_require_file(d / SCORER_FILE, "scorer checkpoint"))
    adapter = None
    if cfg.use_adapter and (d / ADAPTER_FILE).is_file():
        adapter = read_adapter(d / ADAPTER_FILE)
    return adapter, scorer


def cmd_synth(args) -> int:
    spec = _load_synth_spec(args.spec)
    corpus = datastore.synthesize_corpus(spec)
    manifest = datastore.write_corpus(corpus, args.out)
    spec_dict = vars(spec) | {"moment_length_features": list(spec.moment_length_features)}
    write_meta(manifest, "synth", synth_spec=spec_dict, seeds={"noise_seed": spec.noise_seed})
    print(f"wrote {len(corpus.records)} instances to {manifest}")
    return 0


def cmd_validate(args) -> int:
    cfg = _config(args)
    instances = _instances(args.manifest, cfg)
    videos = {i.video_id for i in instances}
    print(f"{len(instances)} instances over {len(videos)} videos: ok")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    instances = _instances(args.manifest, cfg)
    adapter, scorer = train_models(instances, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if adapter is not None:
        write_adapter(out / ADAPTER_FILE, adapter)
        write_meta(out / ADAPTER_FILE, "train", cfg)
    write_scorer(out / SCORER_FILE, scorer)
    write_meta(out / SCORER_FILE, "train", cfg)
    print(f"wrote checkpoints to {out}")
    return 0


def cmd_ground(args) -> int:
    cfg = _config(args)
    instances = _instances(args.manifest, cfg)
    threads = resolve_threads(args.threads)
    if args.external_scores:
        rows = read_external_rows(_require_file(args.external_scores, "external scores"))
        by_query: dict[str, list] = {}
        for row in rows:
            by_query.setdefault(row.get("query_id"), []).append(row)
        adapter = None
        if args.checkpoints and (Path(args.checkpoints) / ADAPTER_FILE).is_file() and cfg.use_adapter:
            adapter = read_adapter(Path(args.checkpoints) / ADAPTER_FILE)
        outputs = ground_all(instances, cfg, None, adapter, external_rows=by_query, threads=threads)
    else:
        if not args.checkpoints:
            raise UsageError("ground needs --checkpoints or --external-scores")
        adapter, scorer = _load_checkpoints(args.checkpoints, cfg)
        outputs = ground_all(instances, cfg, scorer, adapter, threads=threads)
    Path(args.out).write_text(dump_predictions(p for out in outputs for p in out.predictions))
    write_meta(args.out, "ground", cfg, external_scores=bool(args.external_scores))
    print(f"wrote predictions for {len(outputs)} queries to {args.out}")
    return 0


def read_predictions(path) -> dict[str, list[Span]]:
    ranked: dict[str, list] = {}
    for p in load_predictions(_require_file(path, "predictions")):
        ranked.setdefault(p.query_id, []).append(p)
    return {q: [p.span for p in sorted(items, key=lambda p: p.rank)] for q, items in ranked.items()}


def cmd_eval(args) -> int:
    cfg = _config(args)
    records = datastore.read_manifest_records(_require_file(args.manifest, "manifest"))
    gts = {r["query_id"]: Span(float(r["gt_start_sec"]), float(r["gt_end_sec"])) for r in records}
    report = evaluate(read_predictions(args.predictions), gts, strict=cfg.strict_iou)
    out = Path(args.out)
    out.write_text(report.to_json(cfg.to_dict()))
    out.with_suffix(".csv").write_text(report.to_csv())
    write_meta(out, "eval", cfg)
    write_meta(out.with_suffix(".csv"), "eval", cfg)
    for (k, theta), v in sorted(report.recalls.items()):
        print(f"R{k}@{theta}: {v:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    train = _instances(args.train_manifest, cfg)
    test = _instances(args.test_manifest, cfg) if args.test_manifest else train
    threads = resolve_threads(args.threads)
    if args.window_lengths:
        lengths = [int(x) for x in args.window_lengths.split(",")]
        text = sweep_csv(sweep_window_length(train, test, cfg, lengths, threads))
    else:
        text = ablation_csv(run_ablation(train, test, cfg, threads=threads))
    Path(args.out).write_text(text)
    write_meta(args.out, "ablate", cfg)
    sys.stdout.write(text)
    return 0


def _parse_k_sweep(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if part == "all":
            out.append(None)
        else:
            try:
                out.append(int(part))
            except ValueError as exc:
                raise UsageError(f"bad k value {part!r}") from exc
    return out


def cmd_bench(args) -> int:
    cfg = _config(args)
    instances = _instances(args.manifest, cfg)
    if args.checkpoints:
        adapter, scorer = _load_checkpoints(args.checkpoints, cfg)
    else:
        adapter, scorer = None, ScorerParams.zeros(instances[0].video.dim)
    rows = bench_pipeline(
        instances, _parse_k_sweep(args.k_sweep), cfg, scorer, adapter, args.repetitions, args.warmup
    )
    text = bench_csv(rows)
    Path(args.out).write_text(text)
    extra = {"repetitions": args.repetitions, "warmup": args.warmup, "threads": resolve_threads(args.threads, 1)}
    try:
        slope, intercept, r2 = linearity_check(scoring_points(rows))
        extra["linearity"] = {"slope_ns_per_window": slope, "intercept_ns": intercept, "r_squared": r2}
    except GroundingError:
        pass
    write_meta(args.out, "bench", cfg, **extra)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longvtg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--window-length", dest="window_length", type=int)
        p.add_argument("--top-k", dest="top_k_windows", type=int)
        p.add_argument("--threads", type=int)
        return p

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("spec")
    p.add_argument("out")
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("validate", help="check a manifest and its feature files"))
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = with_config(sub.add_parser("train", help="train adapter and scorer checkpoints"))
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--lambda-con", dest="lambda_con", type=float)
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("ground", help="write ranked predictions JSONL"))
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--checkpoints")
    p.add_argument("--external-scores")
    p.set_defaults(func=cmd_ground)

    p = with_config(sub.add_parser("eval", help="Recall@k at IoU thresholds"))
    p.add_argument("manifest")
    p.add_argument("predictions")
    p.add_argument("out", help="report JSON; a CSV is written next to it")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="ablation table or window-length sweep"))
    p.add_argument("train_manifest")
    p.add_argument("out")
    p.add_argument("--test-manifest")
    p.add_argument("--window-lengths", help="comma-separated lengths; runs the sweep instead")
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("bench", help="runtime versus selected window count"))
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--checkpoints")
    p.add_argument("--k-sweep", default="1,5,10,all")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, datastore.InvalidSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GroundingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
