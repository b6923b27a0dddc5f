"""Dataset ingestion, synthetic shape generation, augmentation and batching.

Images are held as float arrays [3, H, W] in [0, 1].  All randomness is
seeded; augmentation draws are keyed by sample index so producer order never
affects the result.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

_IMAGE_EXTS = {".ppm", ".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class Sample:
    image: np.ndarray          # [3, H, W], values in [0, 1]
    label: int
    source_id: str


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass
class AugmentPolicy:
    rotation_max_deg: float = 15.0
    zoom_range: tuple = (0.9, 1.1)
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.zoom_range
        if not (lo <= 1.0 <= hi):
            raise ValueError(f"zoom range must bracket 1.0, got {self.zoom_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0,1]")


@dataclass
class LabeledBatch:
    images: np.ndarray         # [B, 3, H, W]
    labels: np.ndarray         # [B]
    source_ids: list[str]


class LoadError(ValueError):
    pass


# -- resampling helpers ----------------------------------------------------------


def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resize [C,H,W] to [C,Ht,Wt] with the engine's bilinear sampler."""
    C, H, W = image.shape
    Ht, Wt = target
    rows = (np.arange(Ht) + 0.5) * (H / Ht) - 0.5
    cols = (np.arange(Wt) + 0.5) * (W / Wt) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=-1)[None]
    out = T.bilinear_sample(Tensor(image[None]), Tensor(coords))
    return out.data.reshape(C, Ht, Wt)


def warp_rotate_zoom(image: np.ndarray, angle_deg: float, zoom: float) -> np.ndarray:
    """Rotate about the center and zoom, via inverse-mapped bilinear sampling."""
    C, H, W = image.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    th = math.radians(angle_deg)
    cos_t, sin_t = math.cos(th), math.sin(th)
    yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: target -> source
    sy = cy + (cos_t * dy - sin_t * dx) / zoom
    sx = cx + (sin_t * dy + cos_t * dx) / zoom
    coords = np.stack([sy.reshape(-1), sx.reshape(-1)], axis=-1)[None]
    out = T.bilinear_sample(Tensor(image[None]), Tensor(coords))
    return out.data.reshape(C, H, W)


def augment(sample: Sample, policy: AugmentPolicy, draw_seed: int) -> Sample:
    rng = np.random.default_rng([policy.seed, int(draw_seed)])
    angle = rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg)
    zoom = rng.uniform(*policy.zoom_range)
    flip = rng.random() < policy.hflip_prob
    img = sample.image
    if angle != 0.0 or zoom != 1.0:
        img = warp_rotate_zoom(img, angle, zoom)
    if flip:
        img = img[:, :, ::-1].copy()
    return Sample(image=np.clip(img, 0.0, 1.0), label=sample.label,
                  source_id=sample.source_id)


# -- synthetic shapes --------------------------------------------------------------


def _render_shape(cls: int, res: int, rng: np.random.Generator) -> np.ndarray:
    # dark random-tinted background, light random-tinted foreground: colors
    # vary sample-to-sample (so pixels alone do not separate the classes) but
    # the silhouette stays high-contrast, which is what the network must learn
    bg = rng.uniform(0.0, 0.30, size=3)
    fg = rng.uniform(0.70, 1.0, size=3)
    img = np.empty((3, res, res))
    img[:] = bg[:, None, None]
    img += rng.normal(0.0, 0.02, size=img.shape)

    cy = res / 2 + rng.uniform(-res / 8, res / 8)
    cx = res / 2 + rng.uniform(-res / 8, res / 8)
    size = rng.uniform(res * 0.22, res * 0.34)
    yy, xx = np.meshgrid(np.arange(res, dtype=float),
                         np.arange(res, dtype=float), indexing="ij")
    if cls == 0:  # triangle
        rot = rng.uniform(-0.3, 0.3)
        verts = []
        for a in (0.0, 2.0, 4.0):
            ang = a * math.pi / 3.0 + rot - math.pi / 2.0
            verts.append((cy + size * math.sin(ang), cx + size * math.cos(ang)))
        mask = np.ones((res, res), dtype=bool)
        for i in range(3):
            (y1, x1), (y2, x2) = verts[i], verts[(i + 1) % 3]
            mask &= ((x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)) >= 0
    elif cls == 1:  # disk
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    else:  # rectangle
        ar = rng.uniform(0.5, 0.8)
        mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size * ar)
    img[:, mask] = fg[:, None] + rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
    return np.clip(img, 0.0, 1.0)


def synth_shapes(per_class: int, resolution: int = 32, seed: int = 0,
                 num_classes: int = 3) -> Dataset:
    """Deterministic synthetic dataset of filled triangles/disks/rectangles."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    if num_classes != 3:
        raise ValueError("synth_shapes renders exactly 3 shape classes")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(per_class * num_classes):
        cls = i % num_classes
        img = _render_shape(cls, resolution, rng)
        samples.append(Sample(image=img, label=cls, source_id=f"synth-{i:05d}"))
    return Dataset(samples=samples, num_classes=num_classes)


# -- GTSRB-style directory loader ---------------------------------------------------


def _read_annotations(csv_path: Path) -> dict[str, dict]:
    rows: dict[str, dict] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=";")
        for row in reader:
            name = row.get("Filename")
            if not name:
                raise LoadError(f"{csv_path}: row without Filename")
            if name in rows:
                raise LoadError(f"{csv_path}: duplicate annotation row for {name!r}")
            rows[name] = row
    return rows


def load_gtsrb_dir(root, target_resolution: int) -> Dataset:
    """Load a GTSRB-style tree: per-class subdirectories with images and
    semicolon-delimited CSV annotations (ROI box + class id)."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"dataset root {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise LoadError(f"dataset root {root} contains no class directories")
    samples = []
    skipped = 0
    for label, cdir in enumerate(class_dirs):
        csv_files = sorted(cdir.glob("*.csv")) + sorted(cdir.glob("*.CSV"))
        ann = {}
        for cf in csv_files:
            ann.update(_read_annotations(cf))
        images = sorted(p for p in cdir.iterdir()
                        if p.suffix.lower() in _IMAGE_EXTS)
        if ann:
            missing = [p.name for p in images if p.name not in ann]
            if missing:
                raise LoadError(
                    f"{cdir}: images without annotation rows: {missing[:4]}")
        for path in images:
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except Exception as exc:  # unreadable image: skip, keep loading
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            row = ann.get(path.name)
            if row is not None and "Roi.X1" in row:
                x1, y1 = int(row["Roi.X1"]), int(row["Roi.Y1"])
                x2, y2 = int(row["Roi.X2"]), int(row["Roi.Y2"])
                arr = arr[y1:y2 + 1, x1:x2 + 1]
            chw = arr.transpose(2, 0, 1)
            chw = resize_bilinear(chw, (target_resolution, target_resolution))
            samples.append(Sample(image=np.clip(chw, 0.0, 1.0), label=label,
                                  source_id=f"{cdir.name}/{path.name}"))
    if skipped:
        log.warning("skipped %d unreadable images", skipped)
    if not samples:
        raise LoadError(f"dataset root {root} yielded zero samples")
    return Dataset(samples=samples, num_classes=len(class_dirs))


# -- splits and batching -------------------------------------------------------------


@dataclass
class SplitManifest:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for section in ("train", "val", "test"):
                fh.write(f"[{section}]\n")
                for sid in getattr(self, section):
                    fh.write(sid + "\n")

    @staticmethod
    def read(path) -> "SplitManifest":
        manifest = SplitManifest()
        current = None
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    current = line[1:-1]
                    if current not in ("train", "val", "test"):
                        raise LoadError(f"{path}: unknown section {current!r}")
                elif current is None:
                    raise LoadError(f"{path}: id before any section header")
                else:
                    getattr(manifest, current).append(line)
        return manifest


def make_split(dataset: Dataset, seed: int, val_fraction: float = 0.2
               ) -> tuple[Dataset, Dataset, SplitManifest]:
    """Seeded, disjoint train/val split covering the whole dataset."""
    ids = [s.source_id for s in dataset.samples]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(round(len(ids) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [dataset.samples[i] for i in range(len(ids)) if i not in val_idx]
    val = [dataset.samples[i] for i in sorted(val_idx)]
    manifest = SplitManifest(train=[s.source_id for s in train],
                             val=[s.source_id for s in val])
    return (Dataset(train, dataset.num_classes),
            Dataset(val, dataset.num_classes), manifest)


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None):
    """One epoch of batches; seeded shuffle, final short batch included."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = (np.random.default_rng(shuffle_seed).permutation(n)
             if shuffle_seed is not None else np.arange(n))
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        samples = [dataset.samples[i] for i in idx]
        yield LabeledBatch(
            images=np.stack([s.image for s in samples]),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            source_ids=[s.source_id for s in samples])


def nearest_centroid_accuracy(train: Dataset, eval_ds: Dataset) -> float:
    """Raw-pixel nearest-centroid baseline accuracy."""
    k = train.num_classes
    dim = train.samples[0].image.size
    centroids = np.zeros((k, dim))
    counts = np.zeros(k)
    for s in train.samples:
        centroids[s.label] += s.image.reshape(-1)
        counts[s.label] += 1
    centroids /= np.maximum(counts, 1)[:, None]
    correct = 0
    for s in eval_ds.samples:
        d = np.linalg.norm(centroids - s.image.reshape(-1)[None], axis=1)
        correct += int(np.argmin(d)) == s.label
    return correct / len(eval_ds)
