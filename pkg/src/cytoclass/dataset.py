"""Dataset enumeration, stratified 8:1:1 splitting, preprocessing and
augmentation, plus a synthetic fixture generator for tests and demos."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ClassTooSmall, EmptyDataset, InvalidConfig, ManifestError, MissingClassDirectory
from .imaging import ImageBuffer, center_crop, encode_bmp, read_image, resize_bilinear, to_plane
from .rng import SplitMix64

CLASS_NAMES = (
    "Koilocytotic",
    "Dyskeratotic",
    "Metaplastic",
    "Parabasal",
    "Superficial-Intermediate",
)
N_CLASSES = len(CLASS_NAMES)
DEFAULT_CLASS_DIRS = {name: f"im_{name}" for name in CLASS_NAMES}
IMAGE_SUFFIXES = {".bmp", ".png"}
SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    root: Path
    records: list  # (relative posix path, class_id)
    class_names: tuple = CLASS_NAMES

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.records], dtype=np.int64)

    def class_counts(self) -> list:
        return np.bincount(self.labels, minlength=N_CLASSES).tolist()


@dataclass
class SplitManifest:
    root: Path
    records: list  # (relative posix path, class_id, split)
    seed: int | None = None
    ratios: tuple = (0.8, 0.1, 0.1)

    def subset(self, split: str) -> list:
        return [r for r in self.records if r[2] == split]

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r[2] == split], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r[1] for r in self.records], dtype=np.int64)

    def path(self, record) -> Path:
        return self.root / record[0]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "class_id", "split"])
        for path, cid, split in self.records:
            w.writerow([path, cid, split])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        from .store import atomic_write

        atomic_write(path, self.to_csv_text().encode("utf-8"))

    @classmethod
    def read_csv(cls, path, root=None) -> "SplitManifest":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "class_id", "split"]:
                raise ManifestError(f"{path}: expected header 'path,class_id,split'")
            records = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 3 or row[2] not in SPLITS:
                    raise ManifestError(f"{path}:{lineno}: malformed manifest row")
                try:
                    cid = int(row[1])
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: class_id {row[1]!r} is not an integer") from None
                if not 0 <= cid < N_CLASSES:
                    raise ManifestError(f"{path}:{lineno}: class_id {cid} out of range")
                records.append((row[0], cid, row[2]))
        if not records:
            raise EmptyDataset(f"{path}: manifest has no records")
        return cls(Path(root) if root is not None else path.parent, records)


def _class_files(class_dir: Path) -> list:
    files = [p for p in class_dir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    # Kaggle SIPaKMeD keeps the cell crops under CROPPED/ next to the
    # whole-cluster images; only the crops are classification samples.
    cropped = [p for p in files if any(part.upper() == "CROPPED" for part in p.parent.parts)]
    return cropped or files


def scan_dataset(root, class_map: dict | None = None) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise MissingClassDirectory(f"dataset root {root} does not exist")
    class_map = dict(DEFAULT_CLASS_DIRS if class_map is None else class_map)
    records = []
    for cid, name in enumerate(CLASS_NAMES):
        if name not in class_map:
            raise MissingClassDirectory(f"class map has no entry for {name!r}")
        cdir = root / class_map[name]
        if not cdir.is_dir():
            raise MissingClassDirectory(f"class directory {cdir} missing")
        for p in _class_files(cdir):
            records.append((p.relative_to(root).as_posix(), cid))
    if not records:
        raise EmptyDataset(f"no BMP/PNG images under {root}")
    records.sort()
    return DatasetManifest(root, records)


def stratified_split(m: DatasetManifest, seed: int) -> SplitManifest:
    by_class = [[] for _ in range(N_CLASSES)]
    for i, (_, cid) in enumerate(m.records):
        by_class[cid].append(i)
    assignment = {}
    for cid, idx in enumerate(by_class):
        n = len(idx)
        if n < 3:
            raise ClassTooSmall(f"class {CLASS_NAMES[cid]} has {n} records, need >= 3")
        order = list(idx)
        SplitMix64.derived(seed, cid).shuffle(order)
        n_hold = n // 10
        for rank, i in enumerate(order):
            assignment[i] = "test" if rank < n_hold else "val" if rank < 2 * n_hold else "train"
    records = [(p, c, assignment[i]) for i, (p, c) in enumerate(m.records)]
    return SplitManifest(m.root, records, seed)


# -- preprocessing --------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    side: int = 64
    pad: int = 8

    def __post_init__(self):
        if self.side < 1 or self.pad < 0:
            raise InvalidConfig("side must be >= 1 and pad >= 0")


@dataclass(frozen=True)
class AugmentConfig:
    h_flip_prob: float = 0.5
    v_flip_prob: float = 0.5
    noise_sigma: float = 0.02
    contrast_range: tuple = (0.8, 1.2)

    def __post_init__(self):
        for p in (self.h_flip_prob, self.v_flip_prob):
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig("flip probabilities must lie in [0, 1]")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise InvalidConfig("contrast_range needs 0 < low <= high")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be >= 0")


@dataclass(frozen=True)
class Normalization:
    mean: float = 0.0
    std: float = 1.0


def preprocess_image(img: ImageBuffer, cfg: PreprocessConfig) -> np.ndarray:
    """grayscale -> resize to side+pad -> center crop to side; values in [0,1]."""
    big = cfg.side + cfg.pad
    plane = resize_bilinear(to_plane(img), big, big)
    return center_crop(plane, cfg.side, cfg.side)


def augment_plane(plane: np.ndarray, aug: AugmentConfig, rng: SplitMix64) -> np.ndarray:
    # Draw order is fixed regardless of which operations are no-ops.
    factor = rng.uniform(*aug.contrast_range)
    noise = rng.normal(plane.size, aug.noise_sigma).reshape(plane.shape)
    flip_h = rng.random() < aug.h_flip_prob
    flip_v = rng.random() < aug.v_flip_prob
    out = plane
    if factor != 1.0:
        out = (out - 0.5) * factor + 0.5
    if aug.noise_sigma > 0:
        out = out + noise
    out = np.clip(out, 0.0, 1.0)
    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def normalize(plane: np.ndarray, stats: Normalization | None) -> np.ndarray:
    if stats is None:
        return plane
    return (plane - stats.mean) / stats.std


def load_example(path, cfg: PreprocessConfig, augment: AugmentConfig | None = None,
                 rng: SplitMix64 | None = None, stats: Normalization | None = None) -> np.ndarray:
    plane = preprocess_image(read_image(path), cfg)
    if augment is not None:
        if rng is None:
            raise ValueError("augmentation needs an rng stream")
        plane = augment_plane(plane, augment, rng)
    return normalize(plane, stats)


def load_planes(split: SplitManifest, cfg: PreprocessConfig, which: str | None = None) -> np.ndarray:
    """Unaugmented, unnormalized planes for the records of one split (or all)."""
    recs = split.records if which is None else split.subset(which)
    out = np.empty((len(recs), cfg.side, cfg.side))
    for i, r in enumerate(recs):
        out[i] = preprocess_image(read_image(split.path(r)), cfg)
    return out


def channel_stats(planes: np.ndarray) -> Normalization:
    planes = np.asarray(planes, dtype=np.float64)
    return Normalization(float(planes.mean()), max(float(planes.std()), 1e-6))


def compute_channel_stats(split: SplitManifest, cfg: PreprocessConfig) -> Normalization:
    if not split.subset("train"):
        raise EmptyDataset("train split is empty")
    return channel_stats(load_planes(split, cfg, "train"))


# -- synthetic fixture ----------------------------------------------------

FIXTURE_SIDE = 80


def _fixture_image(cid: int, rng: SplitMix64) -> ImageBuffer:
    n = FIXTURE_SIDE
    theta = math.radians(cid * 36.0 + rng.uniform(-4.0, 4.0))
    period = 8.0 + rng.uniform(-0.5, 0.5)
    phase = rng.uniform(0.0, 2 * math.pi)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    v = 0.55 + 0.25 * np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period + phase)
    cx = n / 2 + rng.uniform(-3.0, 3.0)
    cy = n / 2 + rng.uniform(-3.0, 3.0)
    radius = 6.0 + 4.0 * cid
    r = np.hypot(xx - cx, yy - cy)
    blob = 1.0 / (1.0 + np.exp((r - radius) / 1.5))
    v = v * (1 - blob) + 0.15 * blob
    v = np.clip(v + rng.normal(n * n, 0.03).reshape(n, n), 0.0, 1.0)
    rgb = np.stack([v * 0.95 + 0.05, v * 0.85, v * 0.9 + 0.05], axis=-1)
    return ImageBuffer.from_array(np.round(rgb * 255).astype(np.uint8))


def generate_fixture_dataset(root, per_class: int, seed: int) -> DatasetManifest:
    """Write ``per_class`` synthetic 24-bit BMPs for each class under ``root``.

    Each class is a sinusoidal grating at its own orientation (36 degrees
    apart) with a dark central blob of class-specific radius.
    """
    if per_class < 3:
        raise ClassTooSmall("fixture needs per_class >= 3")
    root = Path(root)
    for cid, name in enumerate(CLASS_NAMES):
        cdir = root / DEFAULT_CLASS_DIRS[name]
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = _fixture_image(cid, SplitMix64.derived(seed, cid, i))
            tmp = cdir / f".{name}_{i:04d}.bmp.tmp"
            tmp.write_bytes(encode_bmp(img))
            os.replace(tmp, cdir / f"{name}_{i:04d}.bmp")
    return scan_dataset(root)
