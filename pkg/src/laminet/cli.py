"""Command-line front end: dataset generation, training, evaluation,
saliency export, manifest cropping, and the full region-discovery pipeline.

One JSON config file drives everything; command-line flags beat environment
variables (LAMINET_*), which beat the file.  Every run directory receives
the exact resolved config before any work starts, and artifact filenames
embed a content hash so identical runs produce identical trees.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics
from .augment import (CropAugParams, CropBox, ElasticParams,
                      heuristic_onh_box)
from .diagfind import DiagFindConfig, run_pipeline
from .errors import (AxisError, BoxError, ClassError, ConfigError, DataError,
                     FormatError, LabelError, LaminetError, NonFiniteError,
                     PairingError, ShapeError)
from .network import NetworkConfig, build, load_checkpoint, save_checkpoint
from .optim import TrainConfig, score_dataset, train
from .phantom import (ClassAnatomy, DatasetManifest, PhantomParams, generate,
                      lc_neutral, load_split, manifest_load, manifest_save,
                      read_volume)
from .saliency import export_slices, grad_cam, region_report

SCHEMA_VERSION = 1

EXIT_CODES = (
    (ConfigError, 2),
    (DataError, 3),
    (FormatError, 4),
    (ShapeError, 5),
    (AxisError, 5),
    (LabelError, 6),
    (ClassError, 6),
    (PairingError, 6),
    (BoxError, 7),
    (NonFiniteError, 8),
    (LaminetError, 10),
)


def exit_code_for(exc: Exception) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    raise exc


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:10]


# ---------------------------------------------------------------------------
# Config parsing


def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")


def _pair(v, where):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"{where} must be a two-element list")
    return tuple(v)


def _triple(v, where):
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ConfigError(f"{where} must be a three-element list")
    return tuple(int(e) for e in v)


def parse_network(d: dict) -> NetworkConfig:
    _check_keys(d, ("growth", "input_shape", "in_channels",
                    "norm_groups_base"), "network")
    kwargs = {"growth": 2, "input_shape": (16, 32, 32), "norm_groups_base": 1}
    kwargs.update(d)
    kwargs["input_shape"] = _triple(kwargs["input_shape"],
                                    "network.input_shape")
    return NetworkConfig(**kwargs)


def parse_train(train_d: dict, augment_d: dict, seed: int) -> TrainConfig:
    _check_keys(train_d, ("epochs", "batch_size", "lr", "weight_decay",
                          "betas", "eps", "pos_weight", "val_every",
                          "early_stop_train_loss"), "train")
    _check_keys(augment_d, ("flip", "flip_axes", "elastic", "crop"),
                "augment")
    kwargs = {"epochs": 10, "batch_size": 8}
    kwargs.update(train_d)
    if "betas" in kwargs:
        kwargs["betas"] = _pair(kwargs["betas"], "train.betas")
    if "flip" in augment_d:
        kwargs["flip"] = bool(augment_d["flip"])
    if "flip_axes" in augment_d:
        kwargs["flip_axes"] = tuple(augment_d["flip_axes"])
    if augment_d.get("elastic") is not None:
        e = dict(augment_d["elastic"])
        _check_keys(e, ("spacing", "alpha", "seed"), "augment.elastic")
        kwargs["elastic"] = ElasticParams(**e)
    if augment_d.get("crop") is not None:
        c = dict(augment_d["crop"])
        _check_keys(c, ("p_prior", "jitter", "f_min", "seed"), "augment.crop")
        kwargs["crop"] = CropAugParams(**c)
    return TrainConfig(seed=seed, **kwargs)


def parse_phantom(d: dict) -> tuple[PhantomParams, int]:
    _check_keys(d, ("n_patients", "lc_neutral", "shape", "normal", "glaucoma",
                    "band_intensity", "background", "noise", "lc_box_size",
                    "lc_base_gain", "lc_z0", "eyes_per_patient",
                    "scans_per_eye", "class_balance", "seed"), "phantom")
    kwargs = dict(d)
    n_patients = int(kwargs.pop("n_patients", 40))
    neutral = bool(kwargs.pop("lc_neutral", False))
    if "shape" in kwargs:
        kwargs["shape"] = _triple(kwargs["shape"], "phantom.shape")
    if "lc_box_size" in kwargs:
        kwargs["lc_box_size"] = _triple(kwargs["lc_box_size"],
                                        "phantom.lc_box_size")
    for key in ("eyes_per_patient", "scans_per_eye"):
        if key in kwargs:
            kwargs[key] = tuple(int(e) for e in
                                _pair(kwargs[key], f"phantom.{key}"))
    for cls_key in ("normal", "glaucoma"):
        if cls_key in kwargs:
            c = dict(kwargs[cls_key])
            _check_keys(c, ("band_thickness", "band_top", "cup_radius",
                            "cup_depth", "lc_contrast", "lc_shift"),
                        f"phantom.{cls_key}")
            for pair_key in ("band_thickness", "band_top", "cup_radius",
                             "cup_depth", "lc_contrast"):
                if pair_key in c:
                    c[pair_key] = _pair(c[pair_key],
                                        f"phantom.{cls_key}.{pair_key}")
            kwargs[cls_key] = ClassAnatomy(**c)
    params = PhantomParams(**kwargs)
    if neutral:
        params = lc_neutral(params)
    return params, n_patients


def parse_box(v) -> CropBox:
    """Accept either a dict with z/y/x pairs or a 'z0:z1,y0:y1,x0:x1' string."""
    if isinstance(v, dict):
        return CropBox.from_dict(v)
    try:
        parts = [tuple(int(b) for b in p.split(":")) for p in v.split(",")]
        z, y, x = parts
    except (ValueError, AttributeError) as e:
        raise ConfigError(f"cannot parse box {v!r}; "
                          "expected z0:z1,y0:y1,x0:x1") from e
    return CropBox(z=z, y=y, x=x)


def parse_diagfind(d: dict, train_cfg: TrainConfig,
                   crop_aug: CropAugParams) -> DiagFindConfig:
    _check_keys(d, ("target_layer", "mass_threshold", "region_box",
                    "baseline_auc", "verdict_auc", "verdict_p"), "diagfind")
    kwargs = dict(d)
    if kwargs.get("region_box") is not None:
        kwargs["region_box"] = parse_box(kwargs["region_box"])
    return DiagFindConfig(train=train_cfg, crop_aug=crop_aug, **kwargs)


@dataclass
class RunConfig:
    resolved: dict
    run_dir: Path
    seeds: list[int]
    network: NetworkConfig
    phantom_params: PhantomParams
    n_patients: int
    diagfind: DiagFindConfig

    def train_for_seed(self, seed: int) -> TrainConfig:
        return replace(self.diagfind.train, seed=seed)


def _env(name: str):
    return os.environ.get(f"LAMINET_{name}")


def resolve_config(args) -> RunConfig:
    """Merge file, environment and flags (flags win) into one RunConfig."""
    file_cfg: dict = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(file_cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(file_cfg, ("schema_version", "run_dir", "seeds", "network",
                           "train", "augment", "phantom", "diagfind"),
                "config")
    version = file_cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}; "
                          f"this build reads version {SCHEMA_VERSION}")

    run_dir = args.run_dir or _env("RUN_DIR") or file_cfg.get("run_dir")
    if run_dir is None:
        raise ConfigError("no run directory: pass --run-dir, set "
                          "LAMINET_RUN_DIR, or put run_dir in the config")

    if args.seeds:
        seeds = args.seeds
    elif _env("SEEDS"):
        try:
            seeds = [int(s) for s in _env("SEEDS").split(",")]
        except ValueError as e:
            raise ConfigError(f"bad LAMINET_SEEDS value {_env('SEEDS')!r}") from e
    else:
        seeds = list(file_cfg.get("seeds", [0]))
    if not seeds:
        raise ConfigError("seed list is empty")

    network = parse_network(file_cfg.get("network", {}))
    train_cfg = parse_train(file_cfg.get("train", {}),
                            file_cfg.get("augment", {}), seed=seeds[0])
    phantom_params, n_patients = parse_phantom(file_cfg.get("phantom", {}))
    crop_aug = train_cfg.crop if train_cfg.crop is not None else CropAugParams()
    diagfind = parse_diagfind(file_cfg.get("diagfind", {}), train_cfg,
                              crop_aug)

    # Only result-determining settings go into the serialized config, so
    # identical experiments produce identical trees wherever they run.
    resolved = {k: v for k, v in file_cfg.items() if k != "run_dir"}
    resolved["schema_version"] = SCHEMA_VERSION
    resolved["seeds"] = seeds
    return RunConfig(resolved=resolved, run_dir=Path(run_dir), seeds=seeds,
                     network=network, phantom_params=phantom_params,
                     n_patients=n_patients, diagfind=diagfind)


def resolve_threads(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    if getattr(args, "threads", None):
        return args.threads
    if _env("THREADS"):
        try:
            return int(_env("THREADS"))
        except ValueError as e:
            raise ConfigError(f"bad LAMINET_THREADS value "
                              f"{_env('THREADS')!r}") from e
    if _env("DETERMINISTIC") == "1":
        return 1
    return 0  # leave library defaults alone


def apply_threads(n: int):
    if n <= 0:
        return contextlib.nullcontext()
    import threadpoolctl
    return threadpoolctl.threadpool_limits(limits=n)


def write_resolved_config(cfg: RunConfig) -> Path:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.run_dir / "config.json"
    path.write_text(json.dumps(cfg.resolved, sort_keys=True, indent=1) + "\n")
    return path


def hashed_name(stem: str, data: bytes, suffix: str) -> str:
    return f"{stem}_{content_hash(data)}{suffix}"


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    write_resolved_config(cfg)
    out = cfg.run_dir / "data"
    manifest = generate(cfg.phantom_params, cfg.n_patients, out)
    from .phantom import split_by_patient
    manifest = split_by_patient(manifest, seed=cfg.phantom_params.seed)
    manifest_save(manifest, out / "manifest.jsonl")
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} scans to {out} "
          f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
    return 0


def _load_sets(manifest_path):
    manifest = manifest_load(manifest_path)
    base = Path(manifest_path).parent
    return manifest, base


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    write_resolved_config(cfg)
    manifest, base = _load_sets(args.manifest)
    tr = load_split(manifest, "train", base)
    va = load_split(manifest, "val", base)
    net = build(cfg.network)
    artifacts = {}
    for seed in cfg.seeds:
        result = train(net, tr, va, cfg.train_for_seed(seed))
        tmp = cfg.run_dir / f".ckpt_seed{seed}.tmp"
        save_checkpoint(tmp, net, result.params)
        data = tmp.read_bytes()
        name = hashed_name(f"model_seed{seed}", data, ".ckpt")
        tmp.replace(cfg.run_dir / name)
        artifacts[f"checkpoint_seed{seed}"] = name
        val_note = ("none" if result.best_val_auc is None
                    else f"{result.best_val_auc:.4f}")
        print(f"seed {seed}: {result.steps} steps, best val AUC {val_note}, "
              f"checkpoint {name}")
    (cfg.run_dir / "artifacts.json").write_text(
        json.dumps(artifacts, sort_keys=True, indent=1) + "\n")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    write_resolved_config(cfg)
    manifest, base = _load_sets(args.manifest)
    split = args.split
    data = load_split(manifest, split, base)
    if len(data) == 0:
        raise DataError(f"split {split!r} is empty")
    reports = []
    for ck in args.checkpoint:
        net, params = load_checkpoint(ck)
        scores = score_dataset(net, params, data)
        reports.append(metrics.evaluate(
            metrics.ScoredSet(scores, data.labels)))
    agg = metrics.aggregate_runs(reports)
    lines = [f"AUC {metrics.format_metric(agg.auc, agg.std['auc'])}",
             f"sensitivity {metrics.format_metric(agg.sensitivity, agg.std['sensitivity'])}",
             f"specificity {metrics.format_metric(agg.specificity, agg.std['specificity'])}",
             f"F1 {metrics.format_metric(agg.f1, agg.std['f1'])}"]
    text = "\n".join(lines)
    print(text)
    name = hashed_name("eval", text.encode(), ".json")
    (cfg.run_dir / name).write_text(
        json.dumps(agg.to_dict(), sort_keys=True, indent=1) + "\n")
    return 0


def cmd_saliency(args) -> int:
    cfg = resolve_config(args)
    write_resolved_config(cfg)
    manifest, base = _load_sets(args.manifest)
    net, params = load_checkpoint(args.checkpoint)
    if args.scan:
        record = manifest.by_id(args.scan)
    else:
        test = manifest.split("test")
        if not test:
            raise DataError("manifest has no test split and no --scan given")
        record = test[0]
    volume = read_volume(base / record.path)
    layer = args.layer or cfg.diagfind.target_layer
    smap = grad_cam(net, params, volume, target_layer=layer)
    box = record.crop_box or heuristic_onh_box(volume)
    report = region_report(record.scan_id, smap, box,
                           cfg.diagfind.mass_threshold)
    payload = {"scan_id": record.scan_id, "layer": smap.layer,
               "peak": smap.peak, "predicted": smap.predicted,
               "probability": smap.probability, "flat": smap.flat,
               "region": report.to_dict()}
    data = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    out_dir = cfg.run_dir / hashed_name(f"saliency_{record.scan_id}",
                                        data.encode(), "")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "map.json").write_text(data)
    mid = volume.shape[0] // 2
    export_slices(smap, volume, axis=0, indices=[mid], out_dir=out_dir)
    print(f"scan {record.scan_id}: predicted {smap.predicted} "
          f"p={smap.probability:.4f} mass {report.mass_fraction:.4f} "
          f"-> {out_dir}")
    return 0


def cmd_crop(args) -> int:
    cfg = resolve_config(args)
    write_resolved_config(cfg)
    manifest, base = _load_sets(args.manifest)
    from .diagfind import replace_box
    records = []
    for r in manifest.records:
        if args.box:
            box = parse_box(args.box)
        else:
            box = heuristic_onh_box(read_volume(base / r.path))
        records.append(replace_box(r, box))
    out = DatasetManifest(records)
    out_path = cfg.run_dir / "manifest_cropped.jsonl"
    manifest_save(out, out_path)
    print(f"wrote {out_path} ({len(records)} records with crop boxes)")
    return 0


def cmd_diagfind(args) -> int:
    cfg = resolve_config(args)
    write_resolved_config(cfg)
    manifest, base = _load_sets(args.manifest)
    report = run_pipeline(cfg.run_dir / "diagfind", manifest, base,
                          cfg.network, cfg.diagfind)
    print(f"cropped AUC without augmentation {report.cropped_auc_without:.4f}")
    print(f"cropped AUC with augmentation    {report.cropped_auc_with:.4f}")
    print(f"permutation p-value {report.delong_p:.4f}")
    print(f"verdict: region {'carries' if report.verdict else 'does not carry'}"
          " diagnostic signal")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laminet")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--run-dir", help="output directory")
        sp.add_argument("--seed", "--seeds", dest="seeds", type=int,
                        nargs="+", help="override the seed list")
        sp.add_argument("--threads", type=int,
                        help="cap BLAS threads (0 = library default)")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bitwise-reproducible mode")

    sp = sub.add_parser("generate", help="synthesize a phantom dataset")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train one model per seed")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints on a split")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True, nargs="+")
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("saliency", help="export an evidence map")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scan", help="scan id (default: first test scan)")
    sp.add_argument("--layer", help="target unit name")
    sp.set_defaults(func=cmd_saliency)

    sp = sub.add_parser("crop", help="attach crop boxes to a manifest")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--box", help="explicit box z0:z1,y0:y1,x0:x1")
    sp.set_defaults(func=cmd_crop)

    sp = sub.add_parser("diagfind", help="run the region-discovery pipeline")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_diagfind)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        with apply_threads(resolve_threads(args)):
            return args.func(args)
    except LaminetError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 9


if __name__ == "__main__":
    sys.exit(main())
