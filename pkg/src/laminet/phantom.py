"""Synthetic scan volumes with ground-truth anatomy, plus dataset plumbing.

Each phantom is a (D, H, W) volume: a bright anterior band (nerve-fiber
proxy) over a dark background, a radial cup that suppresses the band
around a per-eye centre, and a textured posterior box standing in for the
lamina cribrosa.  Disease expression is threefold and independently
tunable: thinner band, larger and deeper cup, stronger LC texture shifted
one voxel posterior.  Every record stores the generating anatomy, so tests
can ablate or localize structures exactly.

Also here: the binary volume file format, the line-delimited manifest,
patient-level splitting, block-mean downsampling, and loading splits into
in-memory training sets.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import CropBox
from .errors import ConfigError, DataError, FormatError
from .network import min_input_shape
from .optim import LabeledVolumes

LABEL_NAMES = ("TrueNormal", "TrueGlaucoma")

VOLUME_MAGIC = b"OCTV"
VOLUME_VERSION = 1

BAND_SAG = 1.0  # peripheral droop of the band, voxels


# ---------------------------------------------------------------------------
# Parameters and anatomy


@dataclass(frozen=True)
class ClassAnatomy:
    """Sampling distributions (mean, sd) for one diagnostic class."""

    band_thickness: tuple[float, float]
    band_top: tuple[float, float]
    cup_radius: tuple[float, float]
    cup_depth: tuple[float, float]  # suppression strength in (0, 1]
    lc_contrast: tuple[float, float]
    lc_shift: float = 0.0  # posterior displacement of the LC box, voxels


@dataclass(frozen=True)
class PhantomParams:
    shape: tuple[int, int, int] = (16, 32, 32)
    normal: ClassAnatomy = ClassAnatomy(
        band_thickness=(4.0, 0.45), band_top=(1.5, 0.25), cup_radius=(3.5, 0.5),
        cup_depth=(0.5, 0.08), lc_contrast=(0.12, 0.04), lc_shift=0.0)
    glaucoma: ClassAnatomy = ClassAnatomy(
        band_thickness=(2.6, 0.45), band_top=(1.5, 0.25), cup_radius=(5.5, 0.6),
        cup_depth=(0.75, 0.08), lc_contrast=(0.19, 0.05), lc_shift=1.0)
    band_intensity: float = 0.85
    background: float = 0.15
    noise: float = 0.05
    lc_box_size: tuple[int, int, int] = (5, 8, 8)
    lc_base_gain: float = 0.05
    lc_z0: int = 10
    eyes_per_patient: tuple[int, int] = (1, 2)
    scans_per_eye: tuple[int, int] = (1, 2)
    class_balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo = min_input_shape()
        if any(e < m for e, m in zip(self.shape, lo)):
            raise ConfigError(f"extents {self.shape} below the pooling minimum {lo}")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError("class_balance must be strictly between 0 and 1")
        effects = (abs(self.normal.band_thickness[0] - self.glaucoma.band_thickness[0])
                   + abs(self.normal.cup_radius[0] - self.glaucoma.cup_radius[0])
                   + abs(self.normal.lc_contrast[0] - self.glaucoma.lc_contrast[0]))
        if effects == 0:
            raise ConfigError("classes are identical: no effect size configured")
        for rng_pair in (self.eyes_per_patient, self.scans_per_eye):
            if not 1 <= rng_pair[0] <= rng_pair[1]:
                raise ConfigError(f"count range {rng_pair} invalid")


def lc_neutral(params: PhantomParams) -> PhantomParams:
    """Copy of the parameters with all LC class contrast removed.

    The band and cup still separate the classes, but the posterior box
    carries no label information; cropped evaluation on such phantoms
    should hover at chance.
    """
    neutral = replace(params.glaucoma,
                      lc_contrast=params.normal.lc_contrast,
                      lc_shift=params.normal.lc_shift)
    return replace(params, glaucoma=neutral)


@dataclass(frozen=True)
class Anatomy:
    band_top: float
    band_thickness: float
    cup_center: tuple[float, float]  # (y, x)
    cup_radius: float
    cup_depth: float
    lc_box: CropBox
    lc_contrast: float

    def to_dict(self) -> dict:
        return {"band_top": self.band_top, "band_thickness": self.band_thickness,
                "cup_center": list(self.cup_center), "cup_radius": self.cup_radius,
                "cup_depth": self.cup_depth, "lc_box": self.lc_box.to_dict(),
                "lc_contrast": self.lc_contrast}

    @classmethod
    def from_dict(cls, d: dict) -> "Anatomy":
        return cls(band_top=d["band_top"], band_thickness=d["band_thickness"],
                   cup_center=tuple(d["cup_center"]), cup_radius=d["cup_radius"],
                   cup_depth=d["cup_depth"], lc_box=CropBox.from_dict(d["lc_box"]),
                   lc_contrast=d["lc_contrast"])


@dataclass
class ScanRecord:
    patient: str
    eye: str
    scan_id: str
    label: int
    path: str
    split: str | None = None
    crop_box: CropBox | None = None
    anatomy: Anatomy | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.patient or not self.scan_id:
            raise DataError("patient and scan ids must be non-empty")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")

    def to_dict(self) -> dict:
        d = {"patient": self.patient, "eye": self.eye, "scan_id": self.scan_id,
             "label": LABEL_NAMES[self.label], "path": self.path}
        if self.split is not None:
            d["split"] = self.split
        if self.crop_box is not None:
            d["crop_box"] = self.crop_box.to_dict()
        if self.anatomy is not None:
            d["anatomy"] = self.anatomy.to_dict()
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanRecord":
        label = d["label"]
        if label in LABEL_NAMES:
            label = LABEL_NAMES.index(label)
        box = d.get("crop_box")
        anatomy = d.get("anatomy")
        return cls(patient=d["patient"], eye=d["eye"], scan_id=d["scan_id"],
                   label=label, path=d["path"], split=d.get("split"),
                   crop_box=CropBox.from_dict(box) if box else None,
                   anatomy=Anatomy.from_dict(anatomy) if anatomy else None,
                   meta=d.get("meta", {}))


@dataclass
class DatasetManifest:
    records: list[ScanRecord]

    def __post_init__(self):
        ids = [r.scan_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate scan ids: {dupes[:5]}")
        patient_split: dict[str, str] = {}
        for r in self.records:
            if r.split is None:
                continue
            seen = patient_split.setdefault(r.patient, r.split)
            if seen != r.split:
                raise DataError(f"patient {r.patient} appears in splits "
                                f"{seen} and {r.split}")

    def split(self, name: str) -> list[ScanRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self, scan_id: str) -> ScanRecord:
        for r in self.records:
            if r.scan_id == scan_id:
                return r
        raise DataError(f"unknown scan id {scan_id!r}")


def manifest_save(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as f:
        for r in manifest.records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def manifest_load(path) -> DatasetManifest:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(ScanRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise FormatError(f"{path}:{lineno}: bad manifest record: {e}") from e
    return DatasetManifest(records)


# ---------------------------------------------------------------------------
# Volume synthesis


def _sample_anatomy(cls_params: ClassAnatomy, params: PhantomParams,
                    rng: np.random.Generator, eye: str) -> Anatomy:
    d, h, w = params.shape
    thickness = max(1.0, rng.normal(*cls_params.band_thickness))
    top = max(0.5, rng.normal(*cls_params.band_top))
    # Confine the band (including sag) to the anterior half, so posterior
    # crops are guaranteed band-free.
    top = min(top, d / 2.0 - thickness - BAND_SAG)
    radius = max(1.5, rng.normal(*cls_params.cup_radius))
    depth = float(np.clip(rng.normal(*cls_params.cup_depth), 0.05, 1.0))
    side = 3 if eye == "L" else -3
    cy = h / 2.0 + rng.integers(-2, 3)
    cx = w / 2.0 + side + rng.integers(-2, 3)
    contrast = max(0.0, rng.normal(*cls_params.lc_contrast))
    bd, bh, bw = params.lc_box_size
    z0 = int(np.clip(round(params.lc_z0 + cls_params.lc_shift), 0, d - bd))
    y0 = int(np.clip(round(cy - bh / 2.0), 0, h - bh))
    x0 = int(np.clip(round(cx - bw / 2.0), 0, w - bw))
    lc_box = CropBox(z=(z0, z0 + bd), y=(y0, y0 + bh), x=(x0, x0 + bw))
    return Anatomy(band_top=float(top), band_thickness=float(thickness),
                   cup_center=(float(cy), float(cx)), cup_radius=float(radius),
                   cup_depth=depth, lc_box=lc_box, lc_contrast=float(contrast))


def synthesize(anatomy: Anatomy, params: PhantomParams,
               rng: np.random.Generator) -> np.ndarray:
    """Render one volume from its anatomy; rng drives speckle and texture."""
    d, h, w = params.shape
    v = params.background + rng.normal(scale=params.noise, size=(d, h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = anatomy.cup_center
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    # Sharp-edged radial suppression of the band: the cup.
    suppression = anatomy.cup_depth * np.exp(-((r2 / anatomy.cup_radius ** 2) ** 2))
    band_level = params.band_intensity * (1.0 - suppression)
    # Gentle parabolic sag so the band is not a flat slab.
    top = anatomy.band_top + BAND_SAG * r2 / ((h / 2.0) ** 2 + (w / 2.0) ** 2)
    bottom = top + anatomy.band_thickness
    zz = np.arange(d, dtype=np.float64)[:, None, None]
    cover = np.clip(np.minimum(zz + 1.0, bottom) - np.maximum(zz, top), 0.0, 1.0)
    v += cover * (band_level - params.background)
    sl = anatomy.lc_box.slices()
    v[sl] += params.lc_base_gain
    v[sl] += anatomy.lc_contrast * rng.standard_normal(anatomy.lc_box.shape())
    return v.astype(np.float32)


def anatomy_onh_box(anatomy: Anatomy, shape) -> CropBox:
    """Ground-truth posterior nerve-head box: same geometry as the runtime
    heuristic (footprint a third of H and W around the cup, posterior depth
    half) but centred on the true cup."""
    d, h, w = shape
    side_y = max(1, round(h / 3))
    side_x = max(1, round(w / 3))
    cy, cx = anatomy.cup_center
    y0 = int(np.clip(round(cy - side_y / 2.0), 0, h - side_y))
    x0 = int(np.clip(round(cx - side_x / 2.0), 0, w - side_x))
    return CropBox(z=(d // 2, d), y=(y0, y0 + side_y), x=(x0, x0 + side_x))


def generate(params: PhantomParams, n_patients: int, out_dir) -> DatasetManifest:
    """Write one volume file per scan plus a manifest; pure in (params, seed)."""
    if n_patients < 1:
        raise ConfigError("need at least one patient")
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_patients):
        rng = np.random.default_rng([params.seed, 11, i])
        label = int(rng.random() < (1.0 - params.class_balance))
        cls = params.glaucoma if label else params.normal
        n_eyes = int(rng.integers(params.eyes_per_patient[0],
                                  params.eyes_per_patient[1] + 1))
        for e in range(n_eyes):
            eye = "LR"[e % 2]
            anatomy = _sample_anatomy(cls, params, rng, eye)
            n_scans = int(rng.integers(params.scans_per_eye[0],
                                       params.scans_per_eye[1] + 1))
            for s in range(n_scans):
                scan_id = f"p{i:04d}{eye}{s}"
                rel = f"volumes/{scan_id}.octv"
                write_volume(out_dir / rel, synthesize(anatomy, params, rng))
                records.append(ScanRecord(patient=f"p{i:04d}", eye=eye,
                                          scan_id=scan_id, label=label, path=rel,
                                          anatomy=anatomy))
    manifest = DatasetManifest(records)
    manifest_save(manifest, out_dir / "manifest.jsonl")
    return manifest


def ablate_rnfl(v: np.ndarray, record: ScanRecord, fraction: float,
                seed: int = 0) -> np.ndarray:
    """Replace the anterior part of the bright band with background noise.

    The given fraction of the band's depth range (from the anterior side)
    is overwritten with draws matching the volume's own pre-band statistics;
    the LC box is never touched.  fraction 0 returns an exact copy.
    """
    if record.anatomy is None:
        raise DataError(f"scan {record.scan_id} has no ground-truth anatomy")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}")
    out = np.array(v, copy=True)
    if fraction == 0.0:
        return out
    a = record.anatomy
    d = v.shape[0]
    z0 = int(np.floor(a.band_top))
    z1 = int(np.ceil(a.band_top + a.band_thickness)) + 2  # cover the sag
    z1 = min(d, z1)
    zcut = z0 + max(1, round(fraction * (z1 - z0)))
    # Background statistics from above the band.
    ref = v[:max(1, z0), :, :]
    mu, sd = float(ref.mean()), float(max(ref.std(), 1e-6))
    rng = np.random.default_rng([seed, 17])
    repl = rng.normal(mu, sd, size=out[z0:zcut].shape).astype(out.dtype)
    mask = np.ones(out.shape, bool)
    mask[a.lc_box.slices()] = False
    region = mask[z0:zcut]
    out[z0:zcut][region] = repl[region]
    return out


# ---------------------------------------------------------------------------
# Splitting


def split_by_patient(manifest: DatasetManifest, fractions=(0.6, 0.2, 0.2),
                     seed: int = 0,
                     names=("train", "val", "test")) -> DatasetManifest:
    """Assign whole patients to splits, greedily matching scan-count targets."""
    if len(fractions) != len(names):
        raise ConfigError("one fraction per split name")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    patients: dict[str, list[ScanRecord]] = {}
    for r in manifest.records:
        patients.setdefault(r.patient, []).append(r)
    if len(patients) < len(names):
        raise DataError(f"only {len(patients)} patients for {len(names)} splits")
    order = sorted(patients)
    rng = np.random.default_rng([seed, 23])
    rng.shuffle(order)
    total = len(manifest.records)
    deficits = [f * total for f in fractions]
    assignment: dict[str, str] = {}
    for pid in order:
        k = int(np.argmax(deficits))  # ties go to the earliest split
        assignment[pid] = names[k]
        deficits[k] -= len(patients[pid])
    new_records = [replace_split(r, assignment[r.patient]) for r in manifest.records]
    return DatasetManifest(new_records)


def replace_split(r: ScanRecord, split: str) -> ScanRecord:
    return ScanRecord(patient=r.patient, eye=r.eye, scan_id=r.scan_id, label=r.label,
                      path=r.path, split=split, crop_box=r.crop_box,
                      anatomy=r.anatomy, meta=dict(r.meta))


# ---------------------------------------------------------------------------
# Volume file I/O


def write_volume(path, v: np.ndarray) -> None:
    v = np.asarray(v)
    if v.ndim != 3:
        raise FormatError(f"volume must be 3D, got shape {v.shape}")
    header = VOLUME_MAGIC + struct.pack("<HIII", VOLUME_VERSION, *v.shape)
    data = np.ascontiguousarray(v, dtype="<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header + data)
    os.replace(tmp, path)


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 18:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume file (bad magic)")
    version, d, h, w = struct.unpack("<HIII", raw[4:18])
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported volume version {version}")
    want = 18 + 4 * d * h * w
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=18).astype(np.float32).reshape(d, h, w)


def downsample(v: np.ndarray, factors: tuple[int, int, int]) -> np.ndarray:
    """Block-mean pooling by integer factors; trailing remainders dropped."""
    if any(int(f) != f or f < 1 for f in factors):
        raise ConfigError(f"factors must be integers >= 1, got {factors}")
    fd, fh, fw = (int(f) for f in factors)
    d, h, w = (ext // f * f for ext, f in zip(v.shape, (fd, fh, fw)))
    if 0 in (d, h, w):
        raise ConfigError(f"factors {factors} larger than volume {v.shape}")
    t = v[:d, :h, :w].reshape(d // fd, fd, h // fh, fh, w // fw, fw)
    return t.mean(axis=(1, 3, 5))


# ---------------------------------------------------------------------------
# Loading into memory


def load_split(manifest: DatasetManifest, split: str, base_dir) -> LabeledVolumes:
    base = Path(base_dir)
    records = manifest.split(split)
    vols, labels, patients, scans = [], [], [], []
    for r in records:
        p = base / r.path
        if not p.exists():
            raise DataError(f"volume file missing for scan {r.scan_id}: {p}")
        vols.append(read_volume(p))
        labels.append(r.label)
        patients.append(r.patient)
        scans.append(r.scan_id)
    if not vols:
        return LabeledVolumes(np.zeros((0, 1, 1, 1), np.float32), np.zeros(0),
                              (), ())
    return LabeledVolumes(np.stack(vols), np.array(labels), tuple(patients),
                          tuple(scans))


# ---------------------------------------------------------------------------
# Planted-signal volumes for saliency localization checks


def octant_signal_set(n_per_class: int, shape=(16, 32, 32), octant=(1, 0, 1),
                      amplitude: float = 0.6, seed: int = 0) -> LabeledVolumes:
    """Noise volumes where positives carry a bright smooth blob confined to
    one spatial octant; the label depends on nothing else."""
    d, h, w = shape
    rng = np.random.default_rng([seed, 31])
    centers = []
    for bit, ext in zip(octant, shape):
        lo, hi = (ext // 2, ext) if bit else (0, ext // 2)
        centers.append((lo, hi))
    zz, yy, xx = np.mgrid[0:d, 0:h, 0:w].astype(np.float64)
    vols, labels, patients = [], [], []
    for i in range(2 * n_per_class):
        label = i % 2
        v = rng.normal(scale=0.1, size=shape)
        if label:
            cz = rng.uniform(centers[0][0] + d / 8, centers[0][1] - d / 8)
            cy = rng.uniform(centers[1][0] + h / 8, centers[1][1] - h / 8)
            cx = rng.uniform(centers[2][0] + w / 8, centers[2][1] - w / 8)
            r2 = (((zz - cz) / (d / 8.0)) ** 2 + ((yy - cy) / (h / 8.0)) ** 2
                  + ((xx - cx) / (w / 8.0)) ** 2)
            v += amplitude * np.exp(-r2)
        vols.append(v.astype(np.float32))
        labels.append(label)
        patients.append(f"oct{i}")
    return LabeledVolumes(np.stack(vols), np.array(labels), tuple(patients),
                          tuple(f"oct{i}s" for i in range(2 * n_per_class)))
