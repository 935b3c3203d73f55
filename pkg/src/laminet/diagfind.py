"""End-to-end loop that finds where a trained classifier looks, crops scans
to that region, retrains with crop augmentation, and decides whether the
region alone carries diagnostic signal.

Six steps, each persisted in the working directory so a crashed or partial
run picks up where it stopped:

  1. train a base model (no crop augmentation)      -> step1.ckpt
  2. aggregate saliency into a candidate region     -> region.json
  3. attach the region as a crop box to eval scans  -> manifest_cropped.jsonl
  4. retrain with crop-to-region augmentation       -> step4.ckpt
  5. score both models on the cropped eval scans    -> eval.json
  6. compare against a permuted-label null          -> report.json
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .augment import CropAugParams, CropBox, apply_crop
from .errors import DataError
from .network import NetworkConfig, build, load_checkpoint, save_checkpoint
from .optim import (LabeledVolumes, TrainConfig, assert_patient_disjoint,
                    score_dataset, train)
from .phantom import DatasetManifest, load_split, manifest_load, manifest_save
from .saliency import RegionReport, grad_cam, region_mass


@dataclass(frozen=True)
class DiagFindConfig:
    train: TrainConfig
    crop_aug: CropAugParams = CropAugParams()
    target_layer: str = "s2u6"
    mass_threshold: float = 0.5
    region_box: CropBox | None = None  # skip discovery when given
    baseline_auc: float = 0.5
    verdict_auc: float = 0.65
    verdict_p: float = 0.05


@dataclass
class RegionSummary:
    box: CropBox
    reports: list[RegionReport]
    highlight_rates: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(),
                "reports": [r.to_dict() for r in self.reports],
                "highlight_rates": self.highlight_rates}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSummary":
        return cls(box=CropBox.from_dict(d["box"]),
                   reports=[RegionReport.from_dict(r) for r in d["reports"]],
                   highlight_rates=d["highlight_rates"])


@dataclass
class DiagFindReport:
    baseline: metrics.EvalReport
    region: RegionSummary
    cropped_auc_without: float
    cropped_auc_with: float
    delong_p: float
    verdict: bool
    baseline_auc_ref: float = 0.5

    def to_dict(self) -> dict:
        return {"baseline": self.baseline.to_dict(),
                "region": self.region.to_dict(),
                "cropped_auc_without": self.cropped_auc_without,
                "cropped_auc_with": self.cropped_auc_with,
                "delong_p": self.delong_p, "verdict": self.verdict,
                "baseline_auc_ref": self.baseline_auc_ref}

    @classmethod
    def from_dict(cls, d: dict) -> "DiagFindReport":
        return cls(baseline=metrics.EvalReport.from_dict(d["baseline"]),
                   region=RegionSummary.from_dict(d["region"]),
                   cropped_auc_without=d["cropped_auc_without"],
                   cropped_auc_with=d["cropped_auc_with"],
                   delong_p=d["delong_p"], verdict=d["verdict"],
                   baseline_auc_ref=d["baseline_auc_ref"])


# ---------------------------------------------------------------------------
# Region discovery


def top_mass_box(values: np.ndarray, size: tuple[int, int, int]) -> CropBox:
    """Box of the given size holding the most map mass (first-found on ties)."""
    d, h, w = values.shape
    bd, bh, bw = size
    if bd > d or bh > h or bw > w:
        raise DataError(f"window {size} exceeds map shape {values.shape}")
    s = np.zeros((d + 1, h + 1, w + 1))
    s[1:, 1:, 1:] = values.cumsum(0).cumsum(1).cumsum(2)
    # Inclusion-exclusion over the eight corners, for every window start.
    z1, z0 = slice(bd, d + 1), slice(0, d - bd + 1)
    y1, y0 = slice(bh, h + 1), slice(0, h - bh + 1)
    x1, x0 = slice(bw, w + 1), slice(0, w - bw + 1)
    sums = (s[z1, y1, x1] - s[z0, y1, x1] - s[z1, y0, x1] - s[z1, y1, x0]
            + s[z0, y0, x1] + s[z0, y1, x0] + s[z1, y0, x0] - s[z0, y0, x0])
    z0, y0, x0 = (int(i) for i in
                  np.unravel_index(int(np.argmax(sums)), sums.shape))
    return CropBox(z=(z0, z0 + bd), y=(y0, y0 + bh), x=(x0, x0 + bw))


def default_window(shape) -> tuple[int, int, int]:
    """Same footprint the runtime crop heuristic uses: posterior depth half,
    a third of each transverse extent."""
    d, h, w = shape
    return (d - d // 2, max(1, round(h / 3)), max(1, round(w / 3)))


def discover_region(net, params, data: LabeledVolumes,
                    target_layer: str = "s2u6",
                    mass_threshold: float = 0.5) -> RegionSummary:
    """Per-case saliency boxes plus their componentwise-median aggregate."""
    if len(data) == 0:
        raise DataError("cannot discover a region from an empty dataset")
    shape = data.volumes.shape[1:]
    window = default_window(shape)
    reports, starts, predicted = [], [], []
    for i in range(len(data)):
        smap = grad_cam(net, params, data.volumes[i], target_layer)
        box = top_mass_box(smap.values, window)
        mass = region_mass(smap, box)
        sid = data.scan_ids[i] if data.scan_ids else f"case{i}"
        reports.append(RegionReport(scan_id=sid, box=box, mass_fraction=mass,
                                    highlighted=mass >= mass_threshold))
        starts.append([box.z[0], box.y[0], box.x[0]])
        predicted.append(smap.predicted)
    starts = np.array(starts)
    med = [int(round(float(np.median(starts[:, k])))) for k in range(3)]
    agg = CropBox(z=(med[0], med[0] + window[0]),
                  y=(med[1], med[1] + window[1]),
                  x=(med[2], med[2] + window[2]))
    agg.check_within(shape)
    predicted = np.array(predicted)
    rates: dict[str, float | None] = {}
    for cls, key in ((0, "predicted_normal"), (1, "predicted_glaucoma")):
        mask = predicted == cls
        if mask.any():
            rates[key] = float(np.mean([r.highlighted for r, m
                                        in zip(reports, mask) if m]))
        else:
            rates[key] = None
    return RegionSummary(box=agg, reports=reports, highlight_rates=rates)


# ---------------------------------------------------------------------------
# Pipeline


def cropped_volumes(data: LabeledVolumes, boxes) -> LabeledVolumes:
    """Copy of the dataset with everything outside each scan's box zeroed."""
    vols = data.volumes.copy()
    for i, box in enumerate(boxes):
        vols[i] = apply_crop(vols[i], box)
    return replace(data, volumes=vols)


def _write_json(path, payload) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    tmp.replace(path)


def permuted_scores(scores: np.ndarray, seed: int) -> np.ndarray:
    """Scores shuffled against their labels: the no-association null."""
    rng = np.random.default_rng([seed, 41])
    return scores[rng.permutation(len(scores))]


def run_pipeline(work_dir, manifest: DatasetManifest, base_dir,
                 net_config: NetworkConfig, config: DiagFindConfig,
                 eval_split: str = "test") -> DiagFindReport:
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    tr = load_split(manifest, "train", base_dir)
    va = load_split(manifest, "val", base_dir)
    ev = load_split(manifest, eval_split, base_dir)
    if 0 in (len(tr), len(va), len(ev)):
        raise DataError("pipeline needs non-empty train, val and eval splits")
    assert_patient_disjoint(tr, va, ev)

    # Step 1: base model.
    ck1 = work / "step1.ckpt"
    if ck1.exists():
        net, params1 = load_checkpoint(ck1)
    else:
        net = build(net_config)
        res = train(net, tr, va, config.train)
        params1 = res.params
        save_checkpoint(ck1, net, params1)
    scores_full = score_dataset(net, params1, ev)
    baseline = metrics.evaluate(metrics.ScoredSet(scores_full, ev.labels),
                                seed=config.train.seed)

    # Step 2: candidate region.
    region_path = work / "region.json"
    if region_path.exists():
        region = RegionSummary.from_dict(json.loads(region_path.read_text()))
    else:
        if config.region_box is not None:
            shape = ev.volumes.shape[1:]
            config.region_box.check_within(shape)
            region = RegionSummary(box=config.region_box, reports=[],
                                   highlight_rates={})
        else:
            region = discover_region(net, params1, ev, config.target_layer,
                                     config.mass_threshold)
        _write_json(region_path, region.to_dict())

    # Step 3: record the crop on the eval scans.
    cropped_manifest_path = work / "manifest_cropped.jsonl"
    if cropped_manifest_path.exists():
        cropped_manifest = manifest_load(cropped_manifest_path)
    else:
        records = []
        for r in manifest.records:
            r2 = replace_box(r, region.box) if r.split == eval_split else r
            records.append(r2)
        cropped_manifest = DatasetManifest(records)
        manifest_save(cropped_manifest, cropped_manifest_path)
    boxes = [r.crop_box for r in cropped_manifest.records
             if r.split == eval_split]
    ev_cropped = cropped_volumes(ev, boxes)

    # Step 4: crop-augmented retraining.
    ck4 = work / "step4.ckpt"
    if ck4.exists():
        _, params4 = load_checkpoint(ck4)
    else:
        net4 = build(net_config)
        cfg4 = replace(config.train, crop=config.crop_aug)
        # Select the retrained checkpoint on the cropped view of the val
        # split.  Full-volume val AUC saturates on the dominant cue within a
        # couple of evals, so it cannot rank checkpoints by how well they
        # read the region the crop keeps.
        va_cropped = cropped_volumes(va, [region.box] * len(va))
        res4 = train(net4, tr, va_cropped, cfg4)
        params4 = res4.params
        save_checkpoint(ck4, net4, params4)

    # Step 5: cropped evaluation of both models.
    eval_path = work / "eval.json"
    if eval_path.exists():
        ev_payload = json.loads(eval_path.read_text())
        auc_without = ev_payload["cropped_auc_without"]
        auc_with = ev_payload["cropped_auc_with"]
        scores_with = np.array(ev_payload["scores_with"])
    else:
        scores_without = score_dataset(net, params1, ev_cropped)
        scores_with = score_dataset(net, params4, ev_cropped)
        auc_without = metrics.auc(metrics.ScoredSet(scores_without, ev.labels))
        auc_with = metrics.auc(metrics.ScoredSet(scores_with, ev.labels))
        _write_json(eval_path, {"cropped_auc_without": auc_without,
                                "cropped_auc_with": auc_with,
                                "scores_without": list(map(float, scores_without)),
                                "scores_with": list(map(float, scores_with))})

    # Step 6: verdict against the permuted-label null.
    null_scores = permuted_scores(scores_with, config.train.seed)
    cmp = metrics.delong_paired(
        metrics.ScoredSet(scores_with, ev.labels),
        metrics.ScoredSet(null_scores, ev.labels))
    verdict = bool(cmp.p_value < config.verdict_p and auc_with > cmp.auc_b) \
        or auc_with >= config.verdict_auc
    report = DiagFindReport(baseline=baseline, region=region,
                            cropped_auc_without=float(auc_without),
                            cropped_auc_with=float(auc_with),
                            delong_p=float(cmp.p_value), verdict=verdict,
                            baseline_auc_ref=config.baseline_auc)
    _write_json(work / "report.json", report.to_dict())
    return report


def replace_box(r, box: CropBox):
    from .phantom import ScanRecord
    return ScanRecord(patient=r.patient, eye=r.eye, scan_id=r.scan_id,
                      label=r.label, path=r.path, split=r.split, crop_box=box,
                      anatomy=r.anatomy, meta=dict(r.meta))
