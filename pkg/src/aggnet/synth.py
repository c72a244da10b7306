"""Deterministic synthetic RGB-D scenes with sensor-style depth holes.

Scenes are a tilted background plane plus fronto-parallel rectangles and
ellipses. Holes come from three generators: per-pixel speckle, shadow bands
along depth discontinuities, and large random-walk blobs.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netpbm
from .rng import SplitMix64, derive_seed

DIM_MULTIPLE = 16


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 6
    depth_min: float = 0.5
    depth_max: float = 10.0
    speckle_weight: float = 0.2
    edge_shadow_weight: float = 0.3
    blob_weight: float = 0.5
    hole_fraction: float = 0.2
    texture: float = 0.15
    edge_threshold: float = 0.25
    shadow_radius: int = 2

    def __post_init__(self):
        if self.height % DIM_MULTIPLE or self.width % DIM_MULTIPLE:
            raise ValueError(f"dims must be divisible by {DIM_MULTIPLE}, got {self.height}x{self.width}")
        weights = (self.speckle_weight, self.edge_shadow_weight, self.blob_weight)
        if min(weights) < 0 or sum(weights) <= 0:
            raise ValueError("hole weights must be non-negative with a positive sum")
        if not 0.0 <= self.hole_fraction <= 0.9:
            raise ValueError(f"hole_fraction must be in [0, 0.9], got {self.hole_fraction}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 0 < self.depth_min < self.depth_max <= netpbm.MAX_DEPTH_M:
            raise ValueError("bad depth range")
        if self.shadow_radius < 0:
            raise ValueError("shadow_radius must be >= 0")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed):
        d = asdict(self)
        d["seed"] = int(seed)
        return SceneSpec(**d)


@dataclass
class RgbdSample:
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    gt_depth: np.ndarray  # (H, W) metres, dense
    raw_depth: np.ndarray  # (H, W) metres, 0 at holes
    hole_mask: np.ndarray  # (H, W) bool
    objects: list = field(default_factory=list)

    @property
    def valid_mask(self):
        return ~self.hole_mask


# --------------------------------------------------------------------------
# scene rendering


def background_plane(spec, rng):
    h, w = spec.height, spec.width
    span = spec.depth_max - spec.depth_min
    base = rng.uniform(spec.depth_min + 0.5 * span, spec.depth_min + 0.85 * span)
    gy, gx = rng.uniform(-0.15 * span, 0.15 * span, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    plane = base + gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    return np.clip(plane, spec.depth_min, spec.depth_max)


def object_mask(obj, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    dy = (yy - obj["cy"]) / obj["ry"]
    dx = (xx - obj["cx"]) / obj["rx"]
    if obj["kind"] == "rect":
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
    return dy * dy + dx * dx <= 1.0


def _random_objects(spec, rng, far):
    h, w = spec.height, spec.width
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objs = []
    for _ in range(count):
        objs.append({
            "kind": "rect" if rng.random() < 0.5 else "ellipse",
            "cy": float(rng.uniform(0, h)),
            "cx": float(rng.uniform(0, w)),
            "ry": float(rng.uniform(h / 12, h / 4)),
            "rx": float(rng.uniform(w / 12, w / 4)),
            "z": float(rng.uniform(spec.depth_min, max(spec.depth_min + 0.1, far - 0.5))),
            "color": rng.uniform(0.05, 0.95, size=3),
            "stripe_freq": float(rng.uniform(0.2, 1.2)),
            "stripe_angle": float(rng.uniform(0, np.pi)),
        })
    return objs


def generate_scene(spec: SceneSpec) -> RgbdSample:
    rng = SplitMix64(spec.seed)
    h, w = spec.height, spec.width
    plane = background_plane(spec, rng)
    objs = _random_objects(spec, rng.spawn("objects"), float(plane.min()))

    gt = plane.copy()
    ids = np.zeros((h, w), dtype=np.int64)
    for j, obj in enumerate(objs, start=1):
        cover = object_mask(obj, h, w) & (obj["z"] < gt)
        gt[cover] = obj["z"]
        ids[cover] = j

    trng = rng.spawn("texture")
    yy, xx = np.mgrid[0:h, 0:w]
    bg_color = trng.uniform(0.2, 0.8, size=3)
    colors = np.vstack([bg_color] + [o["color"] for o in objs])
    rgb = colors[ids].transpose(2, 0, 1).copy()
    rgb *= (0.85 + 0.15 * (yy / h))[None]
    # stripes give colour variation on surfaces of constant depth
    for j, obj in enumerate(objs, start=1):
        sel = ids == j
        phase = obj["stripe_freq"] * (xx * np.cos(obj["stripe_angle"]) + yy * np.sin(obj["stripe_angle"]))
        rgb[:, sel] += 0.5 * spec.texture * np.sin(phase[sel])
    rgb += spec.texture * (trng.random((3, h, w)) - 0.5)
    rgb = np.clip(rgb, 0.0, 1.0)

    raw, mask = carve_holes(gt, rgb, spec)
    return RgbdSample(rgb, gt, raw, mask, objs)


# --------------------------------------------------------------------------
# holes


def discontinuities(gt, threshold):
    """Pixels on either side of a jump larger than ``threshold`` metres."""
    edge = np.zeros(gt.shape, dtype=bool)
    jump_v = np.abs(np.diff(gt, axis=0)) > threshold
    jump_h = np.abs(np.diff(gt, axis=1)) > threshold
    edge[:-1] |= jump_v
    edge[1:] |= jump_v
    edge[:, :-1] |= jump_h
    edge[:, 1:] |= jump_h
    return edge


def _disk_offsets(radius):
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy * dy + dx * dx <= radius * radius
    return dy[keep], dx[keep]


def _paint(mask, ys, xs, radius):
    h, w = mask.shape
    dy, dx = _disk_offsets(radius)
    py = (np.asarray(ys)[:, None] + dy[None]).ravel()
    px = (np.asarray(xs)[:, None] + dx[None]).ravel()
    ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
    mask[py[ok], px[ok]] = True


def speckle_holes(shape, probability, rng):
    if probability <= 0:
        return np.zeros(shape, dtype=bool)
    return rng.random(shape) < probability


def edge_shadow_holes(gt, budget_pixels, threshold, radius, rng):
    """Disks of ``radius`` around randomly ordered discontinuity pixels,
    added until the budget is met."""
    mask = np.zeros(gt.shape, dtype=bool)
    if budget_pixels <= 0:
        return mask
    ys, xs = np.nonzero(discontinuities(gt, threshold))
    if ys.size == 0:
        return mask
    order = rng.permutation(ys.size)
    chunk = 8
    for start in range(0, order.size, chunk):
        sel = order[start : start + chunk]
        _paint(mask, ys[sel], xs[sel], radius)
        if mask.sum() >= budget_pixels:
            break
    return mask


def blob_holes(existing, target_pixels, rng, max_blobs=64):
    """Random-walk blobs painted until ``existing | blobs`` reaches the target."""
    h, w = existing.shape
    mask = np.zeros_like(existing)
    union = existing.copy()
    moves = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    for _ in range(max_blobs):
        if union.sum() >= target_pixels:
            break
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
        steps = moves[rng.integers(0, 4, size=4 * (h + w))]
        path = np.cumsum(steps, axis=0) + [y, x]
        path[:, 0] = np.clip(path[:, 0], 0, h - 1)
        path[:, 1] = np.clip(path[:, 1], 0, w - 1)
        for start in range(0, len(path), 4):
            seg = path[start : start + 4]
            _paint(mask, seg[:, 0], seg[:, 1], 1.5)
            union |= mask
            if union.sum() >= target_pixels:
                break
    return mask


def carve_holes(gt, rgb, spec: SceneSpec):
    """Returns (raw depth with zeros at holes, hole mask).

    ``rgb`` is accepted for interface symmetry; hole placement depends only on
    geometry and ``spec.seed``.
    """
    gt = np.asarray(gt, dtype=np.float64)
    shape = gt.shape
    total = shape[0] * shape[1]
    if spec.hole_fraction <= 0:
        return gt.copy(), np.zeros(shape, dtype=bool)
    rng = SplitMix64(derive_seed(spec.seed, "holes"))
    weights = np.array([spec.speckle_weight, spec.edge_shadow_weight, spec.blob_weight])
    budgets = spec.hole_fraction * weights / weights.sum()

    mask = speckle_holes(shape, budgets[0], rng.spawn("speckle"))
    mask |= edge_shadow_holes(gt, budgets[1] * total, spec.edge_threshold,
                              spec.shadow_radius, rng.spawn("edge"))
    if budgets[2] > 0:
        mask |= blob_holes(mask, spec.hole_fraction * total, rng.spawn("blob"))
    raw = np.where(mask, 0.0, gt)
    return raw, mask


# --------------------------------------------------------------------------
# dataset files


def sample_paths(split_dir, index):
    stem = os.path.join(split_dir, f"{index:05d}")
    return stem + "_rgb.ppm", stem + "_raw.pgm", stem + "_gt.pgm"


def sample_seed(base_seed, split, index):
    return derive_seed(base_seed, split, index)


def write_split(out_dir, split, count, spec: SceneSpec):
    """Generate ``count`` samples into ``out_dir/split``; returns hole fractions.

    A partially written split directory is removed on failure.
    """
    split_dir = os.path.join(out_dir, split)
    created = not os.path.exists(split_dir)
    os.makedirs(split_dir, exist_ok=True)
    fractions = []
    try:
        lines = []
        for i in range(count):
            seed = sample_seed(spec.seed, split, i)
            s = generate_scene(spec.with_seed(seed))
            notes = (f"seed={seed}", f"spec={spec.digest()}")
            rgb_p, raw_p, gt_p = sample_paths(split_dir, i)
            netpbm.write_rgb(rgb_p, s.rgb, notes)
            netpbm.write_depth(raw_p, s.raw_depth, notes)
            netpbm.write_depth(gt_p, s.gt_depth, notes)
            fractions.append(float(s.hole_mask.mean()))
            lines.append(f"{i:05d} {seed}")
        with open(os.path.join(split_dir, "manifest.txt"), "w") as fh:
            fh.write(f"# spec={spec.digest()} base_seed={spec.seed}\n")
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    except BaseException:
        if created:
            shutil.rmtree(split_dir, ignore_errors=True)
        raise
    return fractions


@dataclass
class Dataset:
    rgb: np.ndarray  # (N, 3, H, W)
    raw: np.ndarray  # (N, H, W)
    gt: np.ndarray  # (N, H, W)
    seeds: np.ndarray  # (N,) uint64

    def __len__(self):
        return len(self.gt)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.rgb[idx], self.raw[idx], self.gt[idx], self.seeds[idx])

    @classmethod
    def from_samples(cls, samples, seeds=None):
        seeds = np.arange(len(samples), dtype=np.uint64) if seeds is None else seeds
        return cls(
            np.stack([s.rgb for s in samples]),
            np.stack([s.raw_depth for s in samples]),
            np.stack([s.gt_depth for s in samples]),
            np.asarray(seeds, dtype=np.uint64),
        )


def generate_dataset(spec: SceneSpec, split, count):
    """In-memory equivalent of ``write_split`` + ``read_split`` (unquantized)."""
    seeds = [sample_seed(spec.seed, split, i) for i in range(count)]
    return Dataset.from_samples([generate_scene(spec.with_seed(s)) for s in seeds], seeds)


def read_split(split_dir):
    manifest = os.path.join(split_dir, "manifest.txt")
    entries = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                idx, seed = line.split()
                entries.append((int(idx), int(seed)))
    if not entries:
        raise ValueError(f"empty dataset split {split_dir}")
    rgb, raw, gt = [], [], []
    for idx, _ in entries:
        rgb_p, raw_p, gt_p = sample_paths(split_dir, idx)
        rgb.append(netpbm.read_rgb(rgb_p))
        raw.append(netpbm.read_depth(raw_p))
        gt.append(netpbm.read_depth(gt_p))
    seeds = np.array([s for _, s in entries], dtype=np.uint64)
    return Dataset(np.stack(rgb), np.stack(raw), np.stack(gt), seeds)
