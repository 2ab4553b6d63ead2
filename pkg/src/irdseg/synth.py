"""Synthetic IR-D scenes built from layered geometric primitives.

Every primitive carries a class id and a planar depth profile, either
fronto-parallel or tilted (a ramp). Object classes differ in silhouette
(``class_shapes``) and in albedo. IR follows
an inverse-square falloff scaled by a per-class albedo,

    ir = ir_gain * albedo[class] * (depth_min / depth)^2 + noise,

so inside one object IR and depth vary together in shape while their
ordering is reversed. Primitives live in disjoint depth slots separated by
``min_separation``, which makes every class boundary a depth step too.

ToF-style dropouts are circular holes punched into the raw depth; half of
them are centered near a class boundary.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from irdseg import tomlio
from irdseg.pnm import ImageFormatError, read_pfm, read_pgm, write_pfm, write_pgm
from irdseg.rng import SplitMix64

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
KINDS = ("rect", "ellipse", "ramp")
# silhouette per object class; bars are elongated rects, disks small circles
SHAPES = ("ellipse", "rect", "hbar", "vbar", "disk")


@dataclass
class SceneConfig:
    h: int = 64
    w: int = 64
    n_classes: int = 6
    min_primitives: int = 2
    max_primitives: int = 5
    depth_min: float = 0.5
    depth_max: float = 4.0
    albedo: list = field(default_factory=lambda: [0.5, 0.95, 0.3, 0.75, 0.6, 0.4])
    ir_gain: float = 60000.0
    ir_noise: float = 150.0
    min_holes: int = 1
    max_holes: int = 4
    min_hole_radius: float = 1.0
    max_hole_radius: float = 3.0
    min_separation: float = 0.15
    min_size: int = 6
    class_shapes: list = field(default_factory=lambda: list(SHAPES))
    tilt_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.h < 16 or self.w < 16:
            raise ValueError(f"scene must be at least 16x16, got {self.h}x{self.w}")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.albedo) != self.n_classes:
            raise ValueError(f"albedo has {len(self.albedo)} entries for {self.n_classes} classes")
        bad = [k for k in self.class_shapes if k not in SHAPES]
        if bad or not self.class_shapes:
            raise ValueError(f"class_shapes must be a nonempty list drawn from {SHAPES}, got {self.class_shapes}")
        if not 0.0 <= self.tilt_prob <= 1.0:
            raise ValueError("tilt_prob must lie in [0, 1]")
        if not 0 <= self.min_primitives <= self.max_primitives:
            raise ValueError("primitive count range is empty")
        if not 0 <= self.min_holes <= self.max_holes:
            raise ValueError("hole count range is empty")
        # background slot plus one slot per primitive must fit the depth range
        slot = (self.depth_max - self.depth_min) / (self.max_primitives + 1)
        if slot <= self.min_separation:
            raise ValueError("depth range too narrow for min_separation at max_primitives")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Primitive:
    kind: str
    class_id: int
    cy: float
    cx: float
    hy: float
    hx: float
    depth: float
    grad_y: float = 0.0
    grad_x: float = 0.0

    def region(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = (yy - self.cy) / self.hy, (xx - self.cx) / self.hx
        if self.kind == "ellipse":
            return dy * dy + dx * dx <= 1.0
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)

    def depth_at(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        return self.depth + self.grad_y * (yy - self.cy) + self.grad_x * (xx - self.cx)


@dataclass
class ImageSample:
    ir: np.ndarray
    depth_raw: np.ndarray
    depth_filled_gt: np.ndarray
    labels: np.ndarray
    mask_missing: np.ndarray


def render_scene(config: SceneConfig, primitives: list, background_depth: float):
    """Painter's-order render, far to near. Returns (labels, depth, noise-free IR)."""
    yy, xx = np.mgrid[0 : config.h, 0 : config.w].astype(np.float64)
    labels = np.zeros((config.h, config.w), dtype=np.int64)
    depth = np.full((config.h, config.w), float(background_depth))
    for prim in sorted(primitives, key=lambda p: -p.depth):
        inside = prim.region(yy, xx)
        labels[inside] = prim.class_id
        depth[inside] = prim.depth_at(yy, xx)[inside]
    albedo = np.asarray(config.albedo, dtype=np.float64)[labels]
    ir = config.ir_gain * albedo * (config.depth_min / depth) ** 2
    return labels, depth, ir


def _shape_extent(config: SceneConfig, shape: str, rng: SplitMix64):
    """(kind, half height, half width) for a class silhouette.

    Scales do not overlap, so a local patch is never ambiguous. Bars are
    1 to 1.5 * min_size thick with aspect >= 2.5. Disks are 1.7 to
    2.2 * min_size across, thicker than any bar. Compact ellipses and
    rects span at least 3 * min_size with aspect <= 1.5.
    """
    small = config.min_size / 2
    big = max(3 * small, min(config.h, config.w) / 4)
    if shape in ("hbar", "vbar"):
        thin = rng.scalar(small, small * 1.5)
        long = rng.scalar(thin * 2.5, max(thin * 2.5, min(config.h, config.w) / 3))
        return ("rect", thin, long) if shape == "hbar" else ("rect", long, thin)
    if shape == "disk":
        r = rng.scalar(small * 1.7, small * 2.2)
        return "ellipse", r, r
    a = rng.scalar(3 * small, big)
    b = a * rng.scalar(1.0, 1.5)
    hy, hx = (a, b) if rng.scalar() < 0.5 else (b, a)
    return shape, hy, hx


def _sample_primitives(config: SceneConfig, rng: SplitMix64):
    n = rng.integer(config.min_primitives, config.max_primitives)
    sep = config.min_separation
    span = config.depth_max - config.depth_min
    slot = span / (config.max_primitives + 1)
    # background takes the farthest slot, primitives the n slots nearest the camera
    bg = rng.scalar(config.depth_max - slot + sep / 2, config.depth_max)
    prims = []
    for k in range(n):
        lo = config.depth_min + k * slot + sep / 2
        hi = lo + slot - sep
        class_id = rng.integer(1, config.n_classes - 1)
        shape = config.class_shapes[(class_id - 1) % len(config.class_shapes)]
        kind, hy, hx = _shape_extent(config, shape, rng)
        cy = rng.scalar(hy / 2, config.h - 1 - hy / 2)
        cx = rng.scalar(hx / 2, config.w - 1 - hx / 2)
        if rng.scalar() < config.tilt_prob:
            kind = "ramp" if kind == "rect" else kind
            amp = rng.scalar(0.2, 0.9) * (hi - lo)
            share = rng.scalar(0.0, 1.0)
            sy = 1.0 if rng.scalar() < 0.5 else -1.0
            sx = 1.0 if rng.scalar() < 0.5 else -1.0
            center = rng.scalar(lo + amp / 2, hi - amp / 2)
            # |grad_y| * hy + |grad_x| * hx == amp / 2 keeps the ramp inside its slot
            prims.append(Primitive(kind, class_id, cy, cx, hy, hx, center, sy * share * amp / 2 / hy, sx * (1 - share) * amp / 2 / hx))
        else:
            prims.append(Primitive(kind, class_id, cy, cx, hy, hx, rng.scalar(lo, hi)))
    return prims, bg


def class_boundary(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbor of a different class."""
    edge = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:] != labels[:-1]
    dh = labels[:, 1:] != labels[:, :-1]
    edge[1:] |= dv
    edge[:-1] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def _punch_holes(config: SceneConfig, labels: np.ndarray, rng: SplitMix64) -> np.ndarray:
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    edge = class_boundary(labels)
    near = np.zeros_like(edge)
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            near[max(0, dy) : h + min(0, dy), max(0, dx) : w + min(0, dx)] |= edge[
                max(0, -dy) : h + min(0, -dy), max(0, -dx) : w + min(0, -dx)
            ]
    candidates = np.argwhere(near)
    holes = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integer(config.min_holes, config.max_holes)):
        radius = rng.scalar(config.min_hole_radius, config.max_hole_radius)
        use_edge = rng.scalar() < 0.5
        pick = rng.integer(0, max(len(candidates) - 1, 0))
        cy0, cx0 = rng.integer(0, h - 1), rng.integer(0, w - 1)
        if use_edge and len(candidates):
            cy0, cx0 = candidates[pick]
        holes |= (yy - cy0) ** 2 + (xx - cx0) ** 2 <= radius * radius
    return holes


def generate_scene(config: SceneConfig, index: int) -> ImageSample:
    """Pure function of (config, index)."""
    rng = SplitMix64(config.seed).spawn(index)
    prims, bg = _sample_primitives(config, rng)
    labels, depth, ir_clean = render_scene(config, prims, bg)
    noise = rng.normal(config.h * config.w).reshape(config.h, config.w)
    ir = np.clip(ir_clean + config.ir_noise * noise, 0.0, 65535.0)
    holes = _punch_holes(config, labels, rng)
    raw = np.where(holes, 0.0, depth)
    return ImageSample(ir, raw, depth, labels, holes.astype(np.float64))


def _worker_count() -> int:
    env = os.environ.get("IRDSEG_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Order-preserving map over a thread pool capped by IRDSEG_THREADS."""
    items = list(items)
    workers = min(_worker_count(), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def sample_dir_name(index: int) -> str:
    return f"sample_{index:05d}"


def write_sample(sample: ImageSample, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    write_pgm(path / "ir.pgm", sample.ir, 65535)
    write_pgm(path / "depth.pgm", sample.depth_raw * 1000.0, 65535)
    write_pgm(path / "labels.pgm", sample.labels, 255)
    write_pfm(path / "depth_filled.pfm", sample.depth_filled_gt)


def read_sample(path: Path) -> ImageSample:
    path = Path(path)
    ir = read_pgm(path / "ir.pgm")
    raw = read_pgm(path / "depth.pgm") / 1000.0
    labels = read_pgm(path / "labels.pgm").astype(np.int64)
    filled = read_pfm(path / "depth_filled.pfm")
    if not (ir.shape == raw.shape == labels.shape == filled.shape):
        raise ImageFormatError(f"{path}: image extents disagree")
    return ImageSample(ir, raw, filled, labels, (raw == 0).astype(np.float64))


def write_dataset(config: SceneConfig, count: int, out_dir, start: int = 0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(i):
        p = out / sample_dir_name(i)
        write_sample(generate_scene(config, i), p)
        return p

    paths = parallel_map(one, range(start, start + count))
    manifest = {"format_version": FORMAT_VERSION, "count": count, "start": start, "scene": config.to_dict()}
    (out / MANIFEST).write_text(tomlio.dumps(manifest))
    return paths


def read_dataset(directory) -> list[ImageSample]:
    d = Path(directory)
    dirs = sorted(p for p in d.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    return parallel_map(read_sample, dirs)
