"""Synthetic fused visuo-tactile images with exact labels.

A scene is two layers composited per pixel:

* the *visual* layer: a textured object silhouette seen through a gel, whose
  opacity and footprint grow with press depth;
* the *marker* layer: a grid of dark pins, displaced around the contact
  point by a Gaussian-attenuated radial field (plus a twist proportional to
  rotation), both linear in press depth.

``fused = visual * (1 - alpha) + MARKER_COLOR * alpha`` where ``alpha`` is the
marker coverage. ``visual_only`` drops the marker layer; ``marker_only``
composites the same markers over the plain gel color.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

IMAGE_SIZE = 128
PX_PER_MM = 3.5
SHAPES = ("circle", "square", "triangle", "hexagon", "cross", "annulus", "edge")
N_TEXTURES = 6
TASKS = ("shape", "texture", "edge_pose", "contact_point", "force")
MODES = ("fused", "visual_only", "marker_only")
SCHEMA_VERSION = 1

X_RANGE = (-8.0, 8.0)
DEPTH_RANGE = (0.0, 3.0)
ROT_RANGE = (-45.0, 45.0)
CONTACT_RANGE = (-6.0, 6.0)

GEL_COLOR = np.array([0.78, 0.74, 0.70])
MARKER_COLOR = np.array([0.08, 0.08, 0.10])
OBJECT_RADIUS_PX = 17.0
MARKER_SIGMA_PX = 14.0
RADIAL_GAIN = 1.6   # px of peak-scale radial shift per mm of depth
TWIST_GAIN = 0.8    # px per mm of depth at 45 degrees of rotation
STIFFNESS = np.array([[0.15, 0.0, 0.02],
                      [0.0, 0.15, 0.0],
                      [0.0, 0.0, 1.20]])  # N per (mm, mm, mm)
NOISE_STD = 0.01

_TEXTURE_PERIODS = (4.0, 7.0, 11.0)
_TEXTURE_ANGLES = (0.0, 60.0)
_TINTS = np.array([[0.85, 0.35, 0.30], [0.30, 0.55, 0.85], [0.35, 0.75, 0.40],
                   [0.85, 0.75, 0.30], [0.65, 0.40, 0.80], [0.40, 0.75, 0.80],
                   [0.60, 0.60, 0.60]])


class DatasetTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class MarkerGrid:
    rows: int = 11
    cols: int = 11
    spacing_px: float = 10.0
    marker_radius_px: float = 2.2


@dataclass(frozen=True)
class SceneSpec:
    shape_class: int
    x_offset: float = 0.0
    press_depth: float = 1.0
    rotation: float = 0.0
    contact_point: tuple[float, float, float] = (0.0, 0.0, 1.0)
    texture_id: int = 0
    marker_grid: MarkerGrid = field(default_factory=MarkerGrid)
    noise_seed: int = 0

    def validate(self):
        def check(name, v, lo, hi):
            if not (lo <= v <= hi) or not math.isfinite(v):
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        if not 0 <= self.shape_class < len(SHAPES):
            raise ValueError(f"unknown shape_class {self.shape_class}")
        if not 0 <= self.texture_id < N_TEXTURES:
            raise ValueError(f"unknown texture_id {self.texture_id}")
        check("x_offset", self.x_offset, *X_RANGE)
        check("press_depth", self.press_depth, *DEPTH_RANGE)
        check("rotation", self.rotation, *ROT_RANGE)
        px, py, pz = self.contact_point
        check("px", px, *CONTACT_RANGE)
        check("py", py, *CONTACT_RANGE)
        check("pz", pz, *DEPTH_RANGE)
        g = self.marker_grid
        if g.rows < 1 or g.cols < 1 or g.spacing_px <= 0 or g.marker_radius_px <= 0:
            raise ValueError("degenerate marker grid")
        if (max(g.rows, g.cols) - 1) * g.spacing_px + 2 * g.marker_radius_px > IMAGE_SIZE:
            raise ValueError("marker grid does not fit in the frame")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> SceneSpec:
        d = dict(d)
        d["contact_point"] = tuple(d["contact_point"])
        d["marker_grid"] = MarkerGrid(**d["marker_grid"])
        return cls(**d)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    labels: dict


def contact_center_px(spec: SceneSpec) -> np.ndarray:
    """Pixel ``(row, col)`` of the contact / object center."""
    px, py, _ = spec.contact_point
    c = (IMAGE_SIZE - 1) / 2
    return np.array([c + py * PX_PER_MM, c + (px + spec.x_offset) * PX_PER_MM])


def reference_markers(grid: MarkerGrid) -> np.ndarray:
    c = (IMAGE_SIZE - 1) / 2
    rr = (np.arange(grid.rows) - (grid.rows - 1) / 2) * grid.spacing_px + c
    cc = (np.arange(grid.cols) - (grid.cols - 1) / 2) * grid.spacing_px + c
    return np.stack(np.meshgrid(rr, cc, indexing="ij"), axis=-1).reshape(-1, 2)


def marker_positions(spec: SceneSpec) -> np.ndarray:
    """Displaced marker centers ``(rows*cols, 2)`` in pixel ``(row, col)``."""
    ref = reference_markers(spec.marker_grid)
    d = ref - contact_center_px(spec)
    atten = np.exp(-np.sum(d * d, axis=1, keepdims=True) / (2 * MARKER_SIGMA_PX ** 2))
    radial = RADIAL_GAIN * spec.press_depth * d / MARKER_SIGMA_PX * atten
    tangent = np.stack([-d[:, 1], d[:, 0]], axis=1)
    twist = TWIST_GAIN * spec.press_depth * (spec.rotation / 45.0) * tangent / MARKER_SIGMA_PX * atten
    return ref + radial + twist


def marker_alpha(spec: SceneSpec) -> np.ndarray:
    """Anti-aliased marker coverage in ``[0, 1]``."""
    alpha = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    r = spec.marker_grid.marker_radius_px
    reach = int(math.ceil(r + 1))
    for y, x in marker_positions(spec):
        r0, r1 = max(int(y) - reach, 0), min(int(y) + reach + 2, IMAGE_SIZE)
        c0, c1 = max(int(x) - reach, 0), min(int(x) + reach + 2, IMAGE_SIZE)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        dist = np.hypot(yy - y, xx - x)
        cov = np.clip(r + 0.5 - dist, 0.0, 1.0)
        alpha[r0:r1, c0:c1] = np.maximum(alpha[r0:r1, c0:c1], cov)
    return alpha


def _polygon_sd(u, v, n_sides, apothem, phase=0.0):
    d = None
    for k in range(n_sides):
        a = phase + 2 * math.pi * k / n_sides
        h = u * math.cos(a) + v * math.sin(a) - apothem
        d = h if d is None else np.maximum(d, h)
    return d


def _shape_sd(name, u, v):
    """Approximate signed distance in object-radius units (negative inside)."""
    if name == "circle":
        return np.hypot(u, v) - 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) - 0.85
    if name == "triangle":
        return _polygon_sd(u, v, 3, 0.6, phase=math.pi / 2)
    if name == "hexagon":
        return _polygon_sd(u, v, 6, 0.9)
    if name == "cross":
        arm1 = np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.33)
        arm2 = np.maximum(np.abs(u) - 0.33, np.abs(v) - 1.0)
        return np.minimum(arm1, arm2)
    if name == "annulus":
        return np.abs(np.hypot(u, v) - 0.7) - 0.3
    if name == "edge":
        # half-plane edge limited to a wide contact patch
        return np.maximum(u, np.hypot(u, v) - 2.2)
    raise ValueError(name)


def visual_layer(spec: SceneSpec) -> np.ndarray:
    n = IMAGE_SIZE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = contact_center_px(spec)
    th = math.radians(spec.rotation)
    dy, dx = yy - cy, xx - cx
    # object frame: u along the rotated x axis
    u = dx * math.cos(th) + dy * math.sin(th)
    v = -dx * math.sin(th) + dy * math.cos(th)
    radius = OBJECT_RADIUS_PX * (0.8 + 0.1 * spec.press_depth)
    sd = _shape_sd(SHAPES[spec.shape_class], u / radius, v / radius) * radius
    cover = np.clip(0.5 - sd, 0.0, 1.0)
    period = _TEXTURE_PERIODS[spec.texture_id % 3]
    phi = math.radians(_TEXTURE_ANGLES[spec.texture_id // 3])
    grating = 0.5 + 0.5 * np.sin(2 * math.pi * (u * math.cos(phi) + v * math.sin(phi)) / period)
    rng = np.random.default_rng(spec.noise_seed)
    # tint is a nuisance factor, independent of every label
    tint = _TINTS[rng.integers(len(_TINTS))]
    color = tint * (0.55 + 0.45 * grating)[..., None]
    opacity = 0.45 + 0.15 * spec.press_depth
    a = (cover * opacity)[..., None]
    gel = np.broadcast_to(GEL_COLOR, (n, n, 3))
    noise = rng.normal(0.0, NOISE_STD, (n, n, 3))
    return np.clip(gel * (1 - a) + color * a + noise, 0.0, 1.0)


def composite(base, alpha):
    a = alpha[..., None]
    return base * (1 - a) + MARKER_COLOR * a


def quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


def labels_of(spec: SceneSpec) -> dict:
    px, py, pz = spec.contact_point
    cx = px + spec.x_offset
    force = STIFFNESS @ np.array([cx, py, spec.press_depth])
    return {
        "shape_class": spec.shape_class,
        "texture_id": spec.texture_id,
        "edge_pose": (spec.x_offset, spec.press_depth, spec.rotation),
        "contact_point": (px, py, pz),
        "force": tuple(float(f) for f in force),
    }


def modality_toggle(spec: SceneSpec, mode: str = "fused") -> LabeledImage:
    """Render ``spec`` with both layers, or only one of them."""
    if mode not in MODES:
        raise ValueError(f"unknown modality {mode!r}")
    spec.validate()
    if mode == "visual_only":
        img = visual_layer(spec)
    elif mode == "marker_only":
        base = np.broadcast_to(GEL_COLOR, (IMAGE_SIZE, IMAGE_SIZE, 3))
        img = composite(base, marker_alpha(spec))
    else:
        img = composite(visual_layer(spec), marker_alpha(spec))
    return LabeledImage(quantize(img), labels_of(spec))


def generate_sample(spec: SceneSpec) -> LabeledImage:
    return modality_toggle(spec, "fused")


# -- datasets ---------------------------------------------------------------

TASK_INFO = {
    "shape": ("classify", 6),
    "texture": ("classify", N_TEXTURES),
    "edge_pose": ("regress", 3),
    "contact_point": ("regress", 3),
    "force": ("regress", 3),
}


def sample_spec(task: str, rng: np.random.Generator, cls: int | None = None) -> SceneSpec:
    """Draw a scene for ``task``; ``cls`` fixes the class for classification tasks."""
    if task not in TASK_INFO:
        raise ValueError(f"unknown task {task!r}")
    u = rng.uniform
    shape = int(rng.integers(6))
    texture = int(rng.integers(N_TEXTURES))
    depth = float(u(0.5, 3.0))
    rot = float(u(*ROT_RANGE))
    px, py, x_off = float(u(-4, 4)), float(u(-4, 4)), 0.0
    if task == "shape":
        shape = shape if cls is None else cls
    elif task == "texture":
        texture = texture if cls is None else cls
    elif task == "edge_pose":
        shape = SHAPES.index("edge")
        depth = float(u(*DEPTH_RANGE))
        x_off = float(u(-6, 6))
        px = py = 0.0
    elif task in ("contact_point", "force"):
        depth = float(u(*DEPTH_RANGE))
        px, py = float(u(*CONTACT_RANGE)), float(u(*CONTACT_RANGE))
    return SceneSpec(shape, x_off, depth, rot, (px, py, depth), texture,
                     MarkerGrid(), int(rng.integers(2**31 - 1))).validate()


def task_target(task: str, labels: dict):
    if task == "shape":
        return labels["shape_class"]
    if task == "texture":
        return labels["texture_id"]
    return tuple(labels[task])


@dataclass
class Dataset:
    task: str
    images: np.ndarray          # (N, H, W, 3) uint8
    targets: np.ndarray         # (N,) int or (N, 3) float
    split: np.ndarray           # (N,) of "train" / "val" / "test"
    specs: list = field(default_factory=list)
    modality: str = "fused"

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = np.flatnonzero(self.split == name)
        return self.images[idx], self.targets[idx]

    def pixels(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float64) / 255

    def __len__(self):
        return len(self.images)


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    return n_train, n_val, n - n_train - n_val


def make_dataset(task: str, n_samples: int, seed: int, modality: str = "fused") -> Dataset:
    """Render ``n_samples`` scenes for ``task`` with disjoint 70/15/15 splits.

    Classification splits cycle through classes, so each class count within a
    split differs by at most one. Every sample draws from its own child seed of
    ``seed``.
    """
    if task not in TASK_INFO:
        raise ValueError(f"unknown task {task!r}")
    if n_samples < 20:
        raise DatasetTooSmallError("need at least 20 samples")
    kind, n_classes = TASK_INFO[task]
    sizes = split_sizes(n_samples)
    if kind == "classify" and min(sizes) < n_classes:
        raise DatasetTooSmallError(f"{n_samples} samples cannot cover {n_classes} classes in every split")
    children = np.random.SeedSequence(seed).spawn(n_samples)
    split, specs = [], []
    k = 0
    for name, size in zip(("train", "val", "test"), sizes):
        for i in range(size):
            rng = np.random.default_rng(children[k])
            cls = i % n_classes if kind == "classify" else None
            specs.append(sample_spec(task, rng, cls))
            split.append(name)
            k += 1
    images = np.empty((n_samples, IMAGE_SIZE, IMAGE_SIZE, 3), np.uint8)
    targets = []
    for i, spec in enumerate(specs):
        li = modality_toggle(spec, modality)
        images[i] = np.round(li.pixels * 255).astype(np.uint8)
        targets.append(task_target(task, li.labels))
    dtype = np.int64 if kind == "classify" else np.float64
    return Dataset(task, images, np.asarray(targets, dtype=dtype), np.asarray(split), specs, modality)


def make_pretrain_pool(n_samples: int, seed: int, modality: str = "fused") -> Dataset:
    """Unlabeled pool: train and val images of every task, test splits held out."""
    per_task = int(math.ceil(n_samples / (len(TASKS) * 0.85)))
    parts = []
    children = np.random.SeedSequence(seed).spawn(len(TASKS))
    for task, child in zip(TASKS, children):
        ds = make_dataset(task, max(per_task, 40), int(child.generate_state(1)[0]), modality)
        keep = ds.split != "test"
        parts.append((ds.images[keep], [s for s, k in zip(ds.specs, keep) if k]))
    images = np.concatenate([p[0] for p in parts])[:n_samples]
    specs = [s for p in parts for s in p[1]][:n_samples]
    return Dataset("pool", images, np.zeros(len(images)), np.full(len(images), "train"),
                   specs, modality)


# -- persistence ------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir) -> Path:
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, img in enumerate(ds.images):
        name = f"images/{i:06d}.png"
        Image.fromarray(img).save(out / name)
        spec = ds.specs[i]
        lines.append(json.dumps({
            "schema_version": SCHEMA_VERSION, "file": name, "task": ds.task,
            "modality": ds.modality, "split": str(ds.split[i]),
            "target": np.asarray(ds.targets[i]).tolist(),
            "labels": {k: list(v) if isinstance(v, tuple) else v for k, v in labels_of(spec).items()},
            "spec": spec.to_dict(),
        }))
    tmp = out / "manifest.jsonl.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(out / "manifest.jsonl")
    return out


def load_dataset(path) -> Dataset:
    from PIL import Image

    root = Path(path)
    recs = [json.loads(l) for l in (root / "manifest.jsonl").read_text().splitlines() if l.strip()]
    if not recs:
        raise ValueError(f"empty manifest in {root}")
    for r in recs:
        if r.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"manifest schema {r.get('schema_version')} != {SCHEMA_VERSION}")
    images = np.stack([np.asarray(Image.open(root / r["file"]).convert("RGB")) for r in recs])
    task = recs[0]["task"]
    kind = TASK_INFO.get(task, ("regress", 0))[0]
    targets = np.asarray([r["target"] for r in recs], dtype=np.int64 if kind == "classify" else np.float64)
    return Dataset(task, images, targets, np.asarray([r["split"] for r in recs]),
                   [SceneSpec.from_dict(r["spec"]) for r in recs], recs[0]["modality"])
