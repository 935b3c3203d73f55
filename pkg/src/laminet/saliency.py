"""Class-evidence localization maps and their export.

Builds gradient-weighted activation maps from any named network unit,
measures how much map mass falls inside a box, and writes overlay slice
images in binary netpbm form for eyeballing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import CropBox
from .errors import BoxError, ShapeError
from .layers import sigmoid_forward
from .tensor import resample_trilinear

DEFAULT_TARGET = "head"
DEFAULT_MASS_THRESHOLD = 0.5


@dataclass(frozen=True)
class SaliencyMap:
    """Non-negative evidence map over the input grid, peak-normalized.

    peak is the pre-normalization maximum; flat is True when the raw map
    was identically zero (values are then all zeros, not NaN).
    """

    values: np.ndarray
    layer: str
    peak: float
    predicted: int
    probability: float
    flat: bool

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"map must be 3D, got shape {self.values.shape}")


@dataclass(frozen=True)
class RegionReport:
    scan_id: str
    box: CropBox
    mass_fraction: float
    highlighted: bool

    def to_dict(self) -> dict:
        return {"scan_id": self.scan_id, "box": self.box.to_dict(),
                "mass_fraction": self.mass_fraction,
                "highlighted": self.highlighted}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionReport":
        return cls(scan_id=d["scan_id"], box=CropBox.from_dict(d["box"]),
                   mass_fraction=d["mass_fraction"],
                   highlighted=d["highlighted"])


def grad_cam(net, params, volume: np.ndarray,
             target_layer: str = DEFAULT_TARGET) -> SaliencyMap:
    """Evidence map for one volume from the given unit's activations.

    The explained score is the logit for the predicted class: the raw
    logit when the disease probability is at least one half, its negation
    otherwise, so the map always highlights what drove the decision that
    was actually made.  Channel weights are spatial gradient means; the
    weighted activation sum is rectified, resampled to the input grid,
    and scaled so its maximum is one.
    """

    v = np.asarray(volume, dtype=np.float32)
    if v.ndim != 3:
        raise ShapeError(f"expected a single (D, H, W) volume, got {v.shape}")
    x = v[None, ..., None]
    logits, state = net.forward(params, x, capture=(target_layer,))
    prob = float(sigmoid_forward(logits)[0])
    predicted = int(prob >= 0.5)
    sign = 1.0 if predicted else -1.0
    activation = state.captured[target_layer][0]  # (d, h, w, C)
    _, _, captured_grads = net.backward(
        params, state, np.array([sign]), capture=(target_layer,))
    grad = captured_grads[target_layer][0]
    alpha = grad.mean(axis=(0, 1, 2))
    cam = np.maximum((activation * alpha).sum(axis=-1), 0.0)
    cam = resample_trilinear(cam, v.shape).astype(np.float64)
    cam = np.maximum(cam, 0.0)  # interpolation cannot add mass below zero
    peak = float(cam.max())
    if peak > 0.0:
        cam = cam / peak
    return SaliencyMap(values=cam, layer=target_layer, peak=peak,
                       predicted=predicted, probability=prob,
                       flat=peak == 0.0)


def mass_split(smap: SaliencyMap, box: CropBox) -> tuple[float, float]:
    """(inside, outside) map mass; the two always add up to the total."""
    box.check_within(smap.values.shape)
    inside_mask = np.zeros(smap.values.shape, dtype=bool)
    inside_mask[box.slices()] = True
    inside = float(smap.values[inside_mask].sum(dtype=np.float64))
    outside = float(smap.values[~inside_mask].sum(dtype=np.float64))
    return inside, outside


def region_mass(smap: SaliencyMap, box: CropBox) -> float:
    """Fraction of total map mass inside the box; zero for an empty map."""
    inside, outside = mass_split(smap, box)
    total = inside + outside
    if total == 0.0:
        return 0.0
    return inside / total


def region_report(scan_id: str, smap: SaliencyMap, box: CropBox,
                  threshold: float = DEFAULT_MASS_THRESHOLD) -> RegionReport:
    mass = region_mass(smap, box)
    return RegionReport(scan_id=scan_id, box=box, mass_fraction=mass,
                        highlighted=mass >= threshold)


def argmax_index(smap: SaliencyMap) -> tuple[int, int, int]:
    flat = int(np.argmax(smap.values))
    return tuple(int(i) for i in np.unravel_index(flat, smap.values.shape))


# ---------------------------------------------------------------------------
# Slice export


def _slice2d(a: np.ndarray, axis: int, index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise BoxError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < a.shape[axis]:
        raise IndexError(f"index {index} out of range for axis {axis} "
                         f"with extent {a.shape[axis]}")
    return np.take(a, index, axis=axis)


def export_slices(smap: SaliencyMap, volume: np.ndarray, axis: int,
                  indices, out_dir) -> list[Path]:
    """Write one P6 overlay image per slice index; returns the paths.

    The volume renders as grayscale (global min-max scaled); map values
    blend toward pure red.  A flat map therefore produces grayscale
    images whose three channels are identical.  Bytes depend only on the
    inputs, never on time or environment.
    """

    v = np.asarray(volume, dtype=np.float64)
    if v.shape != smap.values.shape:
        raise ShapeError(f"volume shape {v.shape} does not match map "
                         f"shape {smap.values.shape}")
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else 1.0
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for index in indices:
        gray = (_slice2d(v, axis, index) - lo) / span
        m = _slice2d(smap.values, axis, index)
        r = np.rint(255.0 * ((1.0 - m) * gray + m)).astype(np.uint8)
        gb = np.rint(255.0 * (1.0 - m) * gray).astype(np.uint8)
        rgb = np.stack([r, gb, gb], axis=-1)
        h, w = gray.shape
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        path = out_dir / f"slice_a{axis}_{index:04d}.ppm"
        with open(path, "wb") as f:
            f.write(header + rgb.tobytes())
        written.append(path)
    return written
