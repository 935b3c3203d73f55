"""Training-time volume augmentations and crop-box handling.

Volumes here are single scans shaped (D, H, W): axis 0 is depth (anterior
to posterior), axis 1 the slow en-face axis, axis 2 the fast one.  Every
transform is deterministic given its seed and never changes shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import BoxError, ConfigError, ShapeError
from .tensor import resample_trilinear


@dataclass(frozen=True)
class CropBox:
    """Half-open voxel intervals [z0,z1) x [y0,y1) x [x0,x1)."""

    z: tuple[int, int]
    y: tuple[int, int]
    x: tuple[int, int]

    def __post_init__(self):
        for axis, (lo, hi) in zip("zyx", (self.z, self.y, self.x)):
            if not (0 <= lo < hi):
                raise BoxError(f"box axis {axis} must satisfy 0 <= lo < hi, got [{lo}, {hi})")

    def slices(self) -> tuple[slice, slice, slice]:
        return (slice(*self.z), slice(*self.y), slice(*self.x))

    def shape(self) -> tuple[int, int, int]:
        return (self.z[1] - self.z[0], self.y[1] - self.y[0], self.x[1] - self.x[0])

    def center(self) -> tuple[float, float, float]:
        return tuple((lo + hi - 1) / 2.0 for lo, hi in (self.z, self.y, self.x))

    def check_within(self, shape) -> None:
        for axis, (lo, hi), extent in zip("zyx", (self.z, self.y, self.x), shape):
            if hi > extent:
                raise BoxError(f"box axis {axis} interval [{lo}, {hi}) exceeds extent {extent}")

    def to_dict(self) -> dict:
        return {"z": list(self.z), "y": list(self.y), "x": list(self.x)}

    @classmethod
    def from_dict(cls, d: dict) -> "CropBox":
        try:
            return cls(z=tuple(d["z"]), y=tuple(d["y"]), x=tuple(d["x"]))
        except (KeyError, TypeError) as e:
            raise BoxError(f"malformed box record: {d!r}") from e


@dataclass(frozen=True)
class ElasticParams:
    """Coarse random displacement field, trilinearly upsampled to dense."""

    spacing: float = 8.0
    alpha: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.spacing < 2:
            raise ConfigError(f"control-point spacing must be >= 2, got {self.spacing}")
        if self.alpha < 0:
            raise ConfigError("displacement amplitude must be >= 0")
        if self.alpha >= self.spacing:
            raise ConfigError(f"amplitude {self.alpha} must stay below spacing "
                              f"{self.spacing} to avoid folding")


@dataclass(frozen=True)
class CropAugParams:
    p_prior: float = 0.5
    jitter: int = 4
    f_min: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_prior <= 1.0:
            raise ConfigError("p_prior must be in [0, 1]")
        if not 0.0 < self.f_min <= 1.0:
            raise ConfigError("f_min must be in (0, 1]")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")


def _check_volume(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ShapeError(f"expected a (D, H, W) volume, got shape {v.shape}")
    return v


def random_flip(v: np.ndarray, axes=(1,), seed: int = 0) -> np.ndarray:
    """Flip each listed axis independently with probability one half."""
    v = _check_volume(v)
    rng = np.random.default_rng(seed)
    for axis in axes:
        if rng.random() < 0.5:
            v = np.flip(v, axis=axis)
    return np.ascontiguousarray(v)


def elastic_deform(v: np.ndarray, p: ElasticParams) -> np.ndarray:
    """Warp by a smooth random displacement field; zero fill outside.

    The field is i.i.d. uniform [-alpha, alpha] per axis on a coarse grid
    with roughly ``spacing`` voxels between control points, upsampled
    trilinearly, and the warped volume reads input position x + u(x) with
    trilinear interpolation.  alpha = 0 reproduces the input exactly.
    """
    v = _check_volume(v)
    rng = np.random.default_rng(p.seed)
    coarse_shape = tuple(max(2, math.ceil((e - 1) / p.spacing) + 1) for e in v.shape)
    coarse = rng.uniform(-p.alpha, p.alpha, size=(3, *coarse_shape))
    grids = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in v.shape), indexing="ij")
    coords = [grids[ax] + resample_trilinear(coarse[ax], v.shape) for ax in range(3)]
    return map_coordinates(v, coords, order=1, mode="constant", cval=0.0)


def heuristic_onh_box(v: np.ndarray, fraction: float = 1.0 / 3.0) -> CropBox:
    """Guess the nerve-head region: en-face footprint around the darkest
    centroid, posterior depth half.

    The cup appears dark in the depth-averaged en-face view, so the
    centroid of the darkest decile inside the central 60% of the footprint
    estimates the cup centre.  A constant volume falls back to the centre.
    """
    v = _check_volume(v)
    d, h, w = v.shape
    enface = v.mean(axis=0)
    y0, y1 = int(h * 0.2), max(int(h * 0.2) + 1, int(math.ceil(h * 0.8)))
    x0, x1 = int(w * 0.2), max(int(w * 0.2) + 1, int(math.ceil(w * 0.8)))
    central = enface[y0:y1, x0:x1]
    if central.max() == central.min():
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    else:
        dark = central <= np.quantile(central, 0.1)
        ys, xs = np.nonzero(dark)
        cy, cx = y0 + ys.mean(), x0 + xs.mean()
    side_y = max(1, round(h * fraction))
    side_x = max(1, round(w * fraction))
    ylo = int(np.clip(round(cy - side_y / 2.0), 0, h - side_y))
    xlo = int(np.clip(round(cx - side_x / 2.0), 0, w - side_x))
    return CropBox(z=(d // 2, d), y=(ylo, ylo + side_y), x=(xlo, xlo + side_x))


def apply_crop(v: np.ndarray, box: CropBox) -> np.ndarray:
    """Zero every voxel outside the box; inside voxels pass through unchanged."""
    v = _check_volume(v)
    box.check_within(v.shape)
    out = np.zeros_like(v)
    sl = box.slices()
    out[sl] = v[sl]
    return out


def crop_to_zero(v: np.ndarray, p: CropAugParams) -> tuple[np.ndarray, CropBox]:
    """Crop-to-zero augmentation with prioritized heuristic region sampling.

    With probability ``p_prior`` the heuristic nerve-head box is used,
    shifted by an integer jitter per axis (size preserved, kept in
    bounds); otherwise a uniform random box with per-axis side fraction in
    [f_min, 1].  Draws consume the seeded stream in a fixed order: branch,
    then per-axis jitters or per-axis (fraction, start) pairs.
    """
    v = _check_volume(v)
    rng = np.random.default_rng(p.seed)
    if rng.random() < p.p_prior:
        base = heuristic_onh_box(v)
        intervals = []
        for (lo, hi), extent in zip((base.z, base.y, base.x), v.shape):
            side = hi - lo
            shift = int(rng.integers(-p.jitter, p.jitter + 1)) if p.jitter else 0
            new_lo = int(np.clip(lo + shift, 0, extent - side))
            intervals.append((new_lo, new_lo + side))
        box = CropBox(*intervals)
    else:
        intervals = []
        for extent in v.shape:
            frac = rng.uniform(p.f_min, 1.0)
            side = max(1, round(frac * extent))
            start = int(rng.integers(0, extent - side + 1))
            intervals.append((start, start + side))
        box = CropBox(*intervals)
    return apply_crop(v, box), box
