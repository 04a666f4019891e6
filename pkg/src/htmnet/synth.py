"""Procedural RGB-D scenes with transparent-object depth corruption.

Scenes are analytic primitives (spheres, axis-aligned boxes, vertical
cylinders) in front of a slanted background plane, ray cast through a
pinhole camera at the origin looking down +z. Ray directions have unit z
component, so the ray parameter at a hit is its depth.

Two sensor failure modes are simulated on pixels whose nearest hit is a
transparent object: ``drop`` (depth reads 0) and ``background`` (depth
reads the nearest opaque surface behind it).

Randomness: each scene ``i`` of a dataset with seed ``s`` draws from a
PCG64 generator seeded with ``SeedSequence([s, i])``; uniforms are built
directly from the raw 64-bit outputs (top 53 bits), so streams do not
depend on numpy's distribution code.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, List

import numpy as np

from . import formats

KINDS = ("sphere", "box", "cylinder")
MODES = ("drop", "background")
MIN_DEPTH = 0.3
LIGHT = np.array([0.3, -0.5, -1.0]) / np.linalg.norm([0.3, -0.5, -1.0])


@dataclass
class Primitive:
    kind: str
    center: tuple
    size: tuple              # sphere (r,), box (hx, hy, hz), cylinder (r, half_height)
    color: tuple = (0.7, 0.7, 0.7)
    transparent: bool = False
    mode: str = "drop"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if len(self.size) != expected or min(self.size) <= 0:
            raise ValueError(f"degenerate {self.kind}: size {self.size} must be {expected} positive values")


@dataclass
class SceneSpec:
    height: int
    width: int
    background_depth: float = 2.0
    plane_slope: tuple = (0.0, 0.0)
    objects: List[Primitive] = field(default_factory=list)
    focal: float = 0.0       # 0 -> equal to the image width
    seed: int = 0


@dataclass
class Sample:
    rgb: np.ndarray          # 3 x H x W uint8
    depth_raw: np.ndarray    # H x W float32, meters
    depth_gt: np.ndarray     # H x W float32, meters
    mask: np.ndarray         # H x W uint8, 1 = transparent

    def equals(self, other: "Sample") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) and
                   getattr(self, k).dtype == getattr(other, k).dtype
                   for k in ("rgb", "depth_raw", "depth_gt", "mask"))


def _rays(spec: SceneSpec):
    f = spec.focal or float(spec.width)
    v, u = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    dx = (u + 0.5 - spec.width / 2) / f
    dy = (v + 0.5 - spec.height / 2) / f
    return dx, dy


def _hit_sphere(p: Primitive, dx, dy):
    c = np.asarray(p.center, float)
    r = p.size[0]
    dd = dx * dx + dy * dy + 1.0
    dc = dx * c[0] + dy * c[1] + c[2]
    disc = dc * dc - dd * (c @ c - r * r)
    t = (dc - np.sqrt(np.maximum(disc, 0))) / dd
    hit = (disc >= 0) & (t > 0)
    pts = np.stack([t * dx, t * dy, t], -1)
    return np.where(hit, t, np.inf), (pts - c) / r


def _hit_box(p: Primitive, dx, dy):
    c = np.asarray(p.center, float)
    half = np.asarray(p.size, float)
    d = np.stack([dx, dy, np.ones_like(dx)], -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (c - half) / d
        t2 = (c + half) / d
    lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    t_near, t_far = lo.max(-1), hi.min(-1)
    hit = (t_near <= t_far) & (t_near > 0)
    axis = lo.argmax(-1)
    normal = np.zeros(d.shape)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
    np.put_along_axis(normal, axis[..., None], sign[..., None], -1)
    return np.where(hit, t_near, np.inf), normal


def _hit_cylinder(p: Primitive, dx, dy):
    cx, cy, cz = p.center
    r, hh = p.size
    a = dx * dx + 1.0
    b = dx * cx + cz
    disc = b * b - a * (cx * cx + cz * cz - r * r)
    t_side = (b - np.sqrt(np.maximum(disc, 0))) / a
    y_side = t_side * dy
    side = (disc >= 0) & (t_side > 0) & (np.abs(y_side - cy) <= hh)
    t = np.where(side, t_side, np.inf)
    nx, nz = (t_side * dx - cx) / r, (t_side - cz) / r
    normal = np.stack([nx, np.zeros_like(nx), nz], -1)
    for cap_y, ny in ((cy - hh, -1.0), (cy + hh, 1.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cap = cap_y / dy
        inside = (t_cap * dx - cx) ** 2 + (t_cap - cz) ** 2 <= r * r
        cap = np.isfinite(t_cap) & (t_cap > 0) & inside & (t_cap < t)
        t = np.where(cap, t_cap, t)
        normal = np.where(cap[..., None], np.array([0.0, ny, 0.0]), normal)
    return t, normal


_HIT = {"sphere": _hit_sphere, "box": _hit_box, "cylinder": _hit_cylinder}


def _shade(color, normal) -> np.ndarray:
    lam = np.clip(-(normal @ LIGHT), 0.0, 1.0)
    return np.asarray(color)[None, None, :] * (0.35 + 0.65 * lam)[..., None]


def render(spec: SceneSpec) -> Sample:
    for p in spec.objects:
        p.validate()
    dx, dy = _rays(spec)
    gx, gy = spec.plane_slope
    # background plane z = z0 + gx * x + gy * y
    t_bg = spec.background_depth / (1.0 - gx * dx - gy * dy)
    checker = ((np.floor(t_bg * dx / 0.15) + np.floor(t_bg * dy / 0.15)) % 2)[..., None]
    bg_color = np.where(checker > 0, [0.55, 0.5, 0.45], [0.8, 0.78, 0.72])

    nearest = t_bg.copy()
    nearest_id = np.full(t_bg.shape, -1)
    opaque = t_bg.copy()
    opaque_color = bg_color.copy()
    colors = []
    for i, p in enumerate(spec.objects):
        t, normal = _HIT[p.kind](p, dx, dy)
        shaded = _shade(p.color, normal)
        colors.append(shaded)
        closer = t < nearest
        nearest = np.where(closer, t, nearest)
        nearest_id = np.where(closer, i, nearest_id)
        if not p.transparent:
            closer_opaque = t < opaque
            opaque = np.where(closer_opaque, t, opaque)
            opaque_color = np.where(closer_opaque[..., None], shaded, opaque_color)

    rgb = opaque_color.copy()
    raw = nearest.copy()
    mask = np.zeros(t_bg.shape, dtype=np.uint8)
    for i, p in enumerate(spec.objects):
        if not p.transparent:
            continue
        on = nearest_id == i
        mask[on] = 1
        raw[on] = 0.0 if p.mode == "drop" else opaque[on]
        rgb[on] = 0.4 * colors[i][on] + 0.6 * opaque_color[on]

    rgb8 = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).transpose(2, 0, 1)
    return Sample(rgb=np.ascontiguousarray(rgb8), depth_raw=raw.astype(np.float32),
                  depth_gt=nearest.astype(np.float32), mask=mask)


class _Stream:
    """Uniform draws from raw PCG64 output."""

    def __init__(self, seed: int, index: int):
        self._bits = np.random.PCG64(np.random.SeedSequence([seed, index]))

    def uniform(self, lo: float, hi: float) -> float:
        x = int(self._bits.random_raw())
        return lo + (hi - lo) * ((x >> 11) * 2.0 ** -53)

    def integer(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi]."""
        return min(hi, lo + int(self.uniform(0, hi - lo + 1)))


def random_scene(seed: int, index: int, size, max_objects: int = 5) -> SceneSpec:
    h, w = (size, size) if isinstance(size, int) else size
    s = _Stream(seed, index)
    z0 = s.uniform(1.6, 3.0)
    slope = (s.uniform(-0.15, 0.15), s.uniform(-0.15, 0.15))
    half_fov_x, half_fov_y = 0.5, 0.5 * h / w
    objects = []
    for k in range(s.integer(1, max_objects)):
        kind = KINDS[s.integer(0, 2)]
        z = s.uniform(0.7, 0.62 * z0)
        scale = z * s.uniform(0.1, 0.2)
        center = (s.uniform(-0.7, 0.7) * half_fov_x * z, s.uniform(-0.7, 0.7) * half_fov_y * z, z)
        if kind == "sphere":
            dims = (scale,)
        elif kind == "box":
            dims = (scale * s.uniform(0.6, 1.0), scale * s.uniform(0.6, 1.0), scale * s.uniform(0.6, 1.0))
        else:
            dims = (scale * s.uniform(0.6, 1.0), scale * s.uniform(0.8, 1.4))
        color = (s.uniform(0.1, 1.0), s.uniform(0.1, 1.0), s.uniform(0.1, 1.0))
        transparent = k == 0 or s.uniform(0, 1) < 0.5
        mode = MODES[s.integer(0, 1)]
        objects.append(Primitive(kind, center, dims, color, transparent, mode))
    return SceneSpec(height=h, width=w, background_depth=z0, plane_slope=slope, objects=objects, seed=seed)


def dataset(seed: int, count: int, size) -> Iterator[Sample]:
    """Deterministic stream of rendered scenes, in index order."""
    if count < 1:
        raise ValueError("dataset count must be >= 1")
    for i in range(count):
        yield render(random_scene(seed, i, size))


def verify_sample(sample: Sample, d_max: float = 10.0) -> List[str]:
    """Return the list of violated sample invariants (empty when valid)."""
    problems = []
    gt, raw, mask = sample.depth_gt, sample.depth_raw, sample.mask.astype(bool)
    if not (gt > 0).all():
        problems.append("ground truth has non-positive depth")
    if gt.min() < MIN_DEPTH or gt.max() > d_max:
        problems.append(f"depth range [{gt.min():.3f}, {gt.max():.3f}] outside [{MIN_DEPTH}, {d_max}]")
    if not np.array_equal(raw[~mask], gt[~mask]):
        problems.append("raw depth differs from ground truth off the mask")
    on_raw, on_gt = raw[mask], gt[mask]
    if not ((on_raw == 0) | (on_raw >= on_gt)).all():
        problems.append("masked raw depth is neither dropped nor background")
    if not set(np.unique(sample.mask)) <= {0, 1}:
        problems.append("mask values outside {0, 1}")
    return problems


SAMPLE_FILES = ("rgb.ppm", "depth_raw.f32r", "depth_gt.f32r", "mask.u8r")


def write_sample(directory, sample: Sample) -> None:
    formats.ensure_dir(directory)
    formats.write_ppm(os.path.join(directory, "rgb.ppm"), sample.rgb.transpose(1, 2, 0))
    formats.write_f32r(os.path.join(directory, "depth_raw.f32r"), sample.depth_raw)
    formats.write_f32r(os.path.join(directory, "depth_gt.f32r"), sample.depth_gt)
    formats.write_u8r(os.path.join(directory, "mask.u8r"), sample.mask)


def read_sample(directory) -> Sample:
    rgb = formats.read_ppm(os.path.join(directory, "rgb.ppm"))
    return Sample(
        rgb=np.ascontiguousarray(rgb.transpose(2, 0, 1)),
        depth_raw=formats.read_f32r(os.path.join(directory, "depth_raw.f32r")),
        depth_gt=formats.read_f32r(os.path.join(directory, "depth_gt.f32r")),
        mask=formats.read_u8r(os.path.join(directory, "mask.u8r")),
    )


def scene_dir(root, index: int) -> str:
    return os.path.join(root, "scene_%06d" % index)


def write_dataset(root, samples) -> int:
    n = 0
    for i, sample in enumerate(samples):
        write_sample(scene_dir(root, i), sample)
        n += 1
    return n


def load_dataset(root) -> List[Sample]:
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory {root} not found")
    names = sorted(d for d in os.listdir(root) if d.startswith("scene_"))
    if not names:
        raise FileNotFoundError(f"no scene_* directories under {root}")
    return [read_sample(os.path.join(root, d)) for d in names]
