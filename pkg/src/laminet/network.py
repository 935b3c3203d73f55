"""Dense-concatenation 3D convolutional classifier.

The network is a fixed sequence of units parameterized by a single growth
rate ``g``.  Three unit kinds appear:

* ``conv``: Conv3D -> GroupNorm -> ReLU, output width replaces the input
  (the 5x5x5 stem, the 1x1x1 stage transitions, and the 1x1x1 head).
* ``grow``: Conv3D -> GroupNorm -> ReLU, then the unit's output is
  concatenated onto its input along channels, so width accumulates.
  In-plane units use a (1, 3, 3) kernel, through-plane units (3, 1, 1).
* ``pool``: max pooling, stride 2 along any axis whose window exceeds 1.

After the last unit a global average pool and a single-output affine layer
produce one logit per volume.  Activations are (B, D, H, W, C).

Checkpoints are a little-endian binary format: magic ``LAMN``, format
version, growth rate, norm grouping base, expected input extents, then each
named parameter tensor as float32.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .layers import (ConvSpec, GroupNormSpec, PoolSpec, conv3d_backward,
                     conv3d_forward, dense_backward, dense_forward,
                     global_avg_pool_backward, global_avg_pool_forward,
                     groupnorm_backward, groupnorm_forward, groups_for,
                     maxpool3d_backward, maxpool3d_forward, relu_backward,
                     relu_forward)

PLANE = (1, 3, 3)
DEPTH = (3, 1, 1)
POINT = (1, 1, 1)

# (name, kind, width multiple of g, kernel or pool window).  For "grow" the
# multiple is the growth of that unit; for "conv" it is the output width.
ARCHITECTURE: tuple[tuple[str, str, int, tuple[int, int, int]], ...] = (
    ("stem", "conv", 1, (5, 5, 5)),
    ("s1u1", "grow", 1, PLANE),
    ("s1u2", "grow", 2, PLANE),
    ("pool1", "pool", 0, (1, 3, 3)),
    ("s1u3", "grow", 3, PLANE),
    ("s1u4", "grow", 4, PLANE),
    ("s1u5", "grow", 5, DEPTH),
    ("s1u6", "grow", 6, PLANE),
    ("s1u7", "grow", 7, PLANE),
    ("s1u8", "grow", 8, DEPTH),
    ("pool2", "pool", 0, (3, 3, 3)),
    ("t2", "conv", 2, POINT),
    ("s2u1", "grow", 2, PLANE),
    ("s2u2", "grow", 3, PLANE),
    ("s2u3", "grow", 4, DEPTH),
    ("s2u4", "grow", 5, PLANE),
    ("s2u5", "grow", 6, PLANE),
    ("s2u6", "grow", 7, DEPTH),
    ("pool3", "pool", 0, (3, 3, 3)),
    ("t3", "conv", 4, POINT),
    ("s3u1", "grow", 4, PLANE),
    ("s3u2", "grow", 5, PLANE),
    ("s3u3", "grow", 6, DEPTH),
    ("s3u4", "grow", 7, PLANE),
    ("s3u5", "grow", 8, PLANE),
    ("s3u6", "grow", 9, DEPTH),
    ("pool4", "pool", 0, (3, 3, 3)),
    ("t4", "conv", 8, POINT),
    ("s4u1", "grow", 8, PLANE),
    ("s4u2", "grow", 9, PLANE),
    ("s4u3", "grow", 10, DEPTH),
    ("s4u4", "grow", 11, PLANE),
    ("s4u5", "grow", 12, PLANE),
    ("s4u6", "grow", 13, DEPTH),
    ("head", "conv", 10, POINT),
)

CHECKPOINT_MAGIC = b"LAMN"
CHECKPOINT_VERSION = 1


def channel_width_table(growth: int) -> list[tuple[str, int]]:
    """Output channel count after every unit, in order."""
    widths = []
    c = 0
    for name, kind, mult, _ in ARCHITECTURE:
        if kind == "pool":
            pass
        elif kind == "conv":
            c = mult * growth
        else:
            c = c + mult * growth
        widths.append((name, c))
    return widths


def min_input_shape() -> tuple[int, int, int]:
    """Smallest (D, H, W) whose every pooling step still fits its window."""
    extents = [1, 1, 1]
    for _, kind, _, window in reversed(ARCHITECTURE):
        if kind != "pool":
            continue
        spec = PoolSpec(window)
        for ax in range(3):
            w, s = window[ax], spec.stride[ax]
            extents[ax] = s * (extents[ax] - 1) + w
    return tuple(extents)


@dataclass(frozen=True)
class NetworkConfig:
    growth: int
    input_shape: tuple[int, int, int]
    in_channels: int = 1
    norm_groups_base: int = 8

    def __post_init__(self):
        if self.growth < 1:
            raise ConfigError(f"growth rate must be >= 1, got {self.growth}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.norm_groups_base < 1:
            raise ConfigError("norm_groups_base must be >= 1")
        if len(self.input_shape) != 3 or any(e < 1 for e in self.input_shape):
            raise ConfigError(f"input_shape must be three positive extents, got {self.input_shape}")


@dataclass(frozen=True)
class Unit:
    name: str
    kind: str  # "conv" | "grow" | "pool"
    conv: ConvSpec | None = None
    norm: GroupNormSpec | None = None
    pool: PoolSpec | None = None

    @property
    def concat(self) -> bool:
        return self.kind == "grow"


@dataclass
class ForwardState:
    steps: list
    gap_shape: tuple
    pooled: np.ndarray
    captured: dict[str, np.ndarray] = field(default_factory=dict)


class Network:
    """Compiled unit sequence with explicit forward/backward passes."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.units: list[Unit] = []
        self.unit_channels: dict[str, int] = {}
        self.unit_spatial: dict[str, tuple[int, int, int]] = {}
        c = config.in_channels
        spatial = tuple(config.input_shape)
        for name, kind, mult, kernel in ARCHITECTURE:
            if kind == "pool":
                spec = PoolSpec(kernel)
                for ax in range(3):
                    if spatial[ax] < kernel[ax]:
                        raise ConfigError(
                            f"input shape {config.input_shape} too small: axis {ax} has "
                            f"extent {spatial[ax]} at {name}, window is {kernel[ax]} "
                            f"(minimum input shape is {min_input_shape()})")
                spatial = tuple(spec.out_extent(spatial[ax], ax) for ax in range(3))
                self.units.append(Unit(name, kind, pool=spec))
            else:
                out = mult * config.growth
                conv = ConvSpec(c, out, kernel)
                norm = GroupNormSpec(out, groups_for(out, config.norm_groups_base))
                self.units.append(Unit(name, kind, conv=conv, norm=norm))
                c = c + out if kind == "grow" else out
            self.unit_channels[name] = c
            self.unit_spatial[name] = spatial
        self.out_channels = c  # 10 * growth
        self.out_spatial = spatial

    # -- parameters ---------------------------------------------------------

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for u in self.units:
            if u.kind == "pool":
                continue
            out = u.conv.out_channels
            shapes[f"{u.name}.conv.w"] = u.conv.weight_shape
            shapes[f"{u.name}.conv.b"] = (out,)
            shapes[f"{u.name}.norm.scale"] = (out,)
            shapes[f"{u.name}.norm.shift"] = (out,)
        shapes["fc.w"] = (self.out_channels, 1)
        shapes["fc.b"] = (1,)
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())

    def init_parameters(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Fan-in scaled uniform weights, zero biases, identity norm affine."""
        params: dict[str, np.ndarray] = {}
        for u in self.units:
            if u.kind == "pool":
                continue
            fan_in = int(np.prod(u.conv.kernel)) * u.conv.in_channels
            a = math.sqrt(3.0 / fan_in)
            out = u.conv.out_channels
            params[f"{u.name}.conv.w"] = rng.uniform(
                -a, a, size=u.conv.weight_shape).astype(np.float32)
            params[f"{u.name}.conv.b"] = np.zeros(out, np.float32)
            params[f"{u.name}.norm.scale"] = np.ones(out, np.float32)
            params[f"{u.name}.norm.shift"] = np.zeros(out, np.float32)
        a = math.sqrt(3.0 / self.out_channels)
        params["fc.w"] = rng.uniform(-a, a, size=(self.out_channels, 1)).astype(np.float32)
        params["fc.b"] = np.zeros(1, np.float32)
        return params

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        want = (self.config.input_shape[0], self.config.input_shape[1],
                self.config.input_shape[2], self.config.in_channels)
        if x.ndim != 5 or x.shape[1:] != want:
            raise ShapeError(f"expected input (B, {', '.join(map(str, want))}), got {x.shape}")

    def _check_capture(self, capture) -> None:
        known = set(self.unit_channels)
        for name in capture:
            if name not in known:
                raise ConfigError(f"unknown unit name for capture: {name!r}")

    def forward(self, params: dict[str, np.ndarray], x: np.ndarray,
                capture=()) -> tuple[np.ndarray, ForwardState]:
        """Compute per-volume logits; capture named unit outputs on request."""
        self._check_input(x)
        self._check_capture(capture)
        acts = x
        steps = []
        captured: dict[str, np.ndarray] = {}
        for u in self.units:
            if u.kind == "pool":
                y, cache = maxpool3d_forward(acts, u.pool)
                steps.append((u, cache))
            else:
                z = conv3d_forward(acts, u.conv, params[f"{u.name}.conv.w"],
                                   params[f"{u.name}.conv.b"])
                h, gn_cache = groupnorm_forward(z, u.norm, params[f"{u.name}.norm.scale"],
                                                params[f"{u.name}.norm.shift"])
                a, mask = relu_forward(h)
                y = np.concatenate([acts, a], axis=-1) if u.concat else a
                steps.append((u, (acts, gn_cache, mask)))
            if u.name in capture:
                captured[u.name] = y
            acts = y
        pooled, gap_shape = global_avg_pool_forward(acts)
        logits = dense_forward(pooled, params["fc.w"], params["fc.b"])[:, 0]
        return logits, ForwardState(steps, gap_shape, pooled, captured)

    def backward(self, params: dict[str, np.ndarray], state: ForwardState,
                 dlogits: np.ndarray, capture=()):
        """Gradients of a scalar objective given d(objective)/d(logits).

        Returns ``(grads, dx, captured)`` where ``captured`` maps requested
        unit names to the gradient at that unit's output.
        """
        self._check_capture(capture)
        dl = np.asarray(dlogits, dtype=state.pooled.dtype).reshape(-1, 1)
        dpool, fc_g = dense_backward(state.pooled, params["fc.w"], dl)
        grads = {"fc.w": fc_g["w"], "fc.b": fc_g["b"]}
        dy = global_avg_pool_backward(state.gap_shape, dpool)
        captured: dict[str, np.ndarray] = {}
        for u, cache in reversed(state.steps):
            if u.name in capture:
                captured[u.name] = dy
            if u.kind == "pool":
                dy = maxpool3d_backward(cache, dy)
                continue
            x_in, gn_cache, mask = cache
            if u.concat:
                cin = x_in.shape[-1]
                d_skip, d_act = dy[..., :cin], dy[..., cin:]
            else:
                d_skip, d_act = None, dy
            dh = relu_backward(mask, d_act)
            dz, gn_g = groupnorm_backward(gn_cache, dh)
            grads[f"{u.name}.norm.scale"] = gn_g["scale"]
            grads[f"{u.name}.norm.shift"] = gn_g["shift"]
            dx, conv_g = conv3d_backward(x_in, u.conv, params[f"{u.name}.conv.w"], dz)
            grads[f"{u.name}.conv.w"] = conv_g["w"]
            grads[f"{u.name}.conv.b"] = conv_g["b"]
            dy = dx + d_skip if d_skip is not None else dx
        return grads, dy, captured


def build(config: NetworkConfig) -> Network:
    return Network(config)


# ---------------------------------------------------------------------------
# Checkpoint serialization


def save_checkpoint(path, network: Network, params: dict[str, np.ndarray]) -> None:
    cfg = network.config
    if cfg.in_channels != 1:
        raise ConfigError("checkpoint format stores single-channel networks only")
    shapes = network.parameter_shapes()
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise FormatError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    out = [CHECKPOINT_MAGIC,
           struct.pack("<HHH", CHECKPOINT_VERSION, cfg.growth, cfg.norm_groups_base),
           struct.pack("<III", *cfg.input_shape),
           struct.pack("<I", len(shapes))]
    for name, shape in shapes.items():
        value = np.asarray(params[name])
        if value.shape != shape:
            raise FormatError(f"parameter {name} has shape {value.shape}, expected {shape}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    data = b"".join(out)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                              f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[Network, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, growth, groups_base = r.unpack("<HHH")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    input_shape = r.unpack("<III")
    (count,) = r.unpack("<I")
    try:
        network = build(NetworkConfig(growth=growth, input_shape=input_shape,
                                      norm_groups_base=groups_base))
    except ConfigError as e:
        raise FormatError(f"checkpoint header describes an invalid network: {e}") from e
    shapes = network.parameter_shapes()
    if count != len(shapes):
        raise FormatError(f"checkpoint lists {count} parameters, architecture has {len(shapes)}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("corrupt parameter name") from e
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        if name not in shapes:
            raise FormatError(f"unknown parameter {name!r} in checkpoint")
        if name in params:
            raise FormatError(f"duplicate parameter {name!r} in checkpoint")
        if shape != shapes[name]:
            raise FormatError(f"parameter {name} has shape {shape}, expected {shapes[name]}")
        n = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * n)
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after last parameter")
    return network, params
