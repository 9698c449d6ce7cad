"""
Dataset Toolkit for Foreground-Masked Classification
Netpbm image/mask I/O, binarization, the foreground masking transform,
object-centric dataset construction (black-out, square crop, resize, class
selection), manifests, synthetic shape datasets and dataset statistics.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image as PILImage

MANIFEST_HEADER = "MBMANIFEST 1"
SHAPE_CLASSES = ["square", "disk", "cross", "triangle"]

PathLike = Union[str, Path]
BBox = Tuple[int, int, int, int]  # x (column), y (row), width, height


class ManifestError(ValueError):
    """Malformed manifest line"""

    def __init__(self, path, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    mask_path: Optional[str]
    label: int


@dataclass
class DatasetManifest:
    records: List[ManifestRecord] = field(default_factory=list)
    label_names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def has_masks(self) -> bool:
        return all(r.mask_path for r in self.records)


@dataclass
class SynthConfig:
    n_samples: int = 1000
    side: int = 32
    n_classes: int = 2
    amplitude: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.side < 8:
            raise ValueError(f"Synthetic image side must be >= 8, got {self.side}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"Clutter amplitude must lie in [0, 1], got {self.amplitude}")
        if not 2 <= self.n_classes <= len(SHAPE_CLASSES):
            raise ValueError(f"Synthetic class count must be 2-{len(SHAPE_CLASSES)}, got {self.n_classes}")
        if self.n_samples < 0:
            raise ValueError(f"Sample count must be non-negative, got {self.n_samples}")


# --- Netpbm I/O -------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)


def read_image(path: PathLike) -> np.ndarray:
    """Netpbm P6 or P5 file as an H x W x C float array in [0, 1]"""
    with PILImage.open(path) as im:
        if im.mode not in ("RGB", "L"):
            raise ValueError(f"{path}: unsupported image mode {im.mode}")
        data = np.asarray(im, dtype=np.float64) / 255.0
    return data if data.ndim == 3 else data[:, :, None]


def write_image(path: PathLike, img: np.ndarray) -> None:
    """3-channel images are written as P6, single-channel ones as P5 (maxval 255)"""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    mode = "RGB" if img.ndim == 3 else "L"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_bytes(img), mode).save(path, format="PPM")


def read_mask(path: PathLike) -> np.ndarray:
    with PILImage.open(path) as im:
        data = np.asarray(im.convert("L"))
    return data >= 128


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8), "L").save(path, format="PPM")


# --- Pixel transforms ---------------------------------------------------------

def binarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where pixel >= threshold, else 0"""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"Binarization threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(img) >= threshold).astype(np.float64)


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep foreground pixels (all channels), zero everything else"""
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if img.shape[:2] != mask.shape:
        raise ValueError(f"Mask {mask.shape} does not match image {img.shape[:2]}")
    keep = mask[:, :, None] if img.ndim == 3 else mask
    return np.where(keep, img, 0.0)


def mask_batch(batch: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """apply_mask over an N x C x H x W batch with N x H x W masks"""
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (batch.shape[0],) + batch.shape[2:]:
        raise ValueError(f"Masks {masks.shape} do not match batch {batch.shape}")
    return np.where(masks[:, None, :, :], batch, 0.0)


def crop_window(bbox: BBox, height: int, width: int) -> Tuple[int, int, int]:
    """(row0, col0, side) of the square crop around a bbox, translated to fit the image"""
    x, y, w, h = bbox
    if w <= 0 or h <= 0 or x >= width or y >= height or x + w <= 0 or y + h <= 0:
        raise ValueError(f"Bounding box {bbox} does not intersect a {height}x{width} image")
    side = min(max(w, h), height, width)
    cx, cy = x + w / 2, y + h / 2
    col0 = min(max(int(math.floor(cx - side / 2)), 0), width - side)
    row0 = min(max(int(math.floor(cy - side / 2)), 0), height - side)
    return row0, col0, side


def crop_square(img: np.ndarray, bbox: BBox) -> np.ndarray:
    row0, col0, side = crop_window(bbox, img.shape[0], img.shape[1])
    return img[row0:row0 + side, col0:col0 + side].copy()


def blackout_regions(img: np.ndarray, boxes: Iterable[BBox]) -> np.ndarray:
    out = np.array(img, dtype=np.float64, copy=True)
    height, width = out.shape[:2]
    for x, y, w, h in boxes:
        r0, r1 = max(y, 0), min(y + h, height)
        c0, c1 = max(x, 0), min(x + w, width)
        if r1 > r0 and c1 > c0:
            out[r0:r1, c0:c1] = 0.0
    return out


def resize_nn(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest neighbour: source index = floor((i + 0.5) * in / out); works for masks too"""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"Output size must be positive, got {out_h}x{out_w}")
    in_h, in_w = img.shape[:2]
    rows = ((2 * np.arange(out_h) + 1) * in_h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * in_w) // (2 * out_w)
    return img[rows][:, cols].copy()


def boxes_overlap(a: BBox, b: BBox) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def select_classes(freq: Dict[str, int], k: int, exclude: Optional[Set[str]] = None) -> List[str]:
    """Top-k non-excluded labels by count, ties broken by name"""
    exclude = exclude or set()
    candidates = [(label, count) for label, count in freq.items() if label not in exclude]
    if k < 0 or k > len(candidates):
        raise ValueError(f"Cannot select {k} classes from {len(candidates)} candidates")
    ranked = sorted(candidates, key=lambda item: (-item[1], item[0]))
    return [label for label, _ in ranked[:k]]


# --- Manifests ----------------------------------------------------------------

def _check_field(kind: str, value: str) -> None:
    if "," in value or "\n" in value or "\r" in value:
        raise ValueError(f"{kind} {value!r} cannot contain commas or line breaks")


def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    """Refuses anything read_manifest could not parse back to an equal manifest"""
    for name in manifest.label_names:
        if not name:
            raise ValueError("Label names cannot be empty")
        _check_field("Label name", name)
    lines = [MANIFEST_HEADER, ",".join(manifest.label_names)]
    for record in manifest.records:
        if not 0 <= record.label < len(manifest.label_names):
            raise ValueError(f"Record label {record.label} outside {len(manifest.label_names)} names")
        if not record.image_path:
            raise ValueError("Record image path cannot be empty")
        _check_field("Image path", record.image_path)
        if record.mask_path is not None:
            if not record.mask_path:
                raise ValueError(f"Record {record.image_path} has an empty mask path; use None")
            _check_field("Mask path", record.mask_path)
        lines.append(f"{record.image_path},{record.mask_path or ''},{record.label}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: PathLike) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(path, 1, f"expected header '{MANIFEST_HEADER}'")
    if len(lines) < 2:
        raise ManifestError(path, 2, "missing label-name line")
    label_names = lines[1].split(",") if lines[1] else []

    records = []
    for line_number, line in enumerate(lines[2:], start=3):
        fields = line.split(",")
        if len(fields) != 3:
            raise ManifestError(path, line_number, f"expected 3 comma-separated fields, got {len(fields)}")
        image_path, mask_path, label_text = fields
        if not image_path:
            raise ManifestError(path, line_number, "empty image path")
        try:
            label = int(label_text)
        except ValueError:
            raise ManifestError(path, line_number, f"label '{label_text}' is not an integer")
        if not 0 <= label < len(label_names):
            raise ManifestError(path, line_number, f"label {label} outside [0, {len(label_names)})")
        records.append(ManifestRecord(image_path, mask_path or None, label))
    return DatasetManifest(records, label_names)


def load_arrays(manifest: DatasetManifest, root: PathLike, need_masks: bool = False
                ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Stack a manifest into (N x C x H x W images, labels, N x H x W masks or None)"""
    if not manifest.records:
        raise ValueError("Manifest has no records")
    root = Path(root)
    if need_masks and not manifest.has_masks:
        missing = next(r.image_path for r in manifest.records if not r.mask_path)
        raise ValueError(f"Masks required but record {missing} has none")
    images = np.stack([read_image(root / r.image_path).transpose(2, 0, 1) for r in manifest.records])
    labels = np.array([r.label for r in manifest.records], dtype=np.int64)
    masks = None
    if manifest.has_masks:
        masks = np.stack([read_mask(root / r.mask_path) for r in manifest.records])
        if masks.shape[1:] != images.shape[2:]:
            raise ValueError(f"Mask size {masks.shape[1:]} does not match image size {images.shape[2:]}")
    return images, labels, masks


# --- Object-centric dataset construction --------------------------------------

def load_annotations(path: PathLike) -> List[Dict]:
    """
    Normalized annotation file (JSON):
        {"images": [{"image": "a.ppm",
                     "objects": [{"mask": "a_0.pgm", "bbox": [x, y, w, h], "label": "car"}]}]}
    Paths are relative to the annotation file.
    """
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    images = data.get("images") if isinstance(data, dict) else None
    if not isinstance(images, list):
        raise ValueError(f"{path}: expected an object with an 'images' list")
    return images


def build_dataset(annotations_path: PathLike, out_dir: PathLike, k: int = 10,
                  exclude: Optional[Set[str]] = None, size: int = 32, threads: int = 1) -> Dict:
    """
    One (image, mask, label) record per annotated object of a selected class:
    other objects whose boxes overlap are blacked out, the object is square-cropped
    and image and mask are resized to size x size.
    """
    exclude = set(exclude or ())
    annotations_path = Path(annotations_path)
    root = annotations_path.parent
    out_dir = Path(out_dir)
    entries = load_annotations(annotations_path)

    freq: Dict[str, int] = {}
    for entry in entries:
        for obj in entry.get("objects", []):
            freq[obj["label"]] = freq.get(obj["label"], 0) + 1
    label_names = select_classes(freq, k, exclude)
    label_index = {name: i for i, name in enumerate(label_names)}

    jobs = []
    filtered = 0
    for entry in entries:
        objects = entry.get("objects", [])
        for index, obj in enumerate(objects):
            if obj["label"] not in label_index:
                filtered += 1
                continue
            jobs.append((entry["image"], objects, index))

    def work(job):
        image_rel, objects, index = job
        target = objects[index]
        try:
            image = read_image(root / image_rel)
            mask = read_mask(root / target["mask"])
            if mask.shape != image.shape[:2]:
                raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
            bbox = tuple(int(v) for v in target["bbox"])
            others = [tuple(int(v) for v in o["bbox"]) for i, o in enumerate(objects) if i != index]
            image = blackout_regions(image, [b for b in others if boxes_overlap(b, bbox)])
            row0, col0, side = crop_window(bbox, image.shape[0], image.shape[1])
            image = resize_nn(image[row0:row0 + side, col0:col0 + side], size, size)
            mask = resize_nn(mask[row0:row0 + side, col0:col0 + side], size, size)
            return image, mask, None
        except Exception as e:
            return None, None, f"{image_rel} object {index}: {e}"

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, jobs))

    records, unreadable, empty = [], [], 0
    for (image_rel, objects, index), (image, mask, error) in zip(jobs, results):
        if error:
            logging.warning(f"Skipping {error}")
            unreadable.append(error)
            continue
        if not mask.any():
            logging.warning(f"Skipping {image_rel} object {index}: mask empty after resize")
            empty += 1
            continue
        n = len(records)
        image_out, mask_out = f"images/{n:06d}.ppm", f"masks/{n:06d}.pgm"
        write_image(out_dir / image_out, image)
        write_mask(out_dir / mask_out, mask)
        records.append(ManifestRecord(image_out, mask_out, label_index[objects[index]["label"]]))

    if not records:
        raise ValueError(f"No records could be built from {annotations_path}")
    manifest = DatasetManifest(records, label_names)
    write_manifest(out_dir / "manifest.txt", manifest)
    logging.info(f"Built {len(records)} records over {len(label_names)} classes "
                 f"({len(unreadable)} unreadable, {empty} empty, {filtered} filtered)")
    return {
        "manifest": manifest,
        "emitted": len(records),
        "skipped_unreadable": len(unreadable),
        "skipped_empty": empty,
        "filtered_label": filtered,
        "errors": unreadable,
    }


# --- Synthetic shapes ---------------------------------------------------------

SIZE_RANGE = {
    "square": (0.2, 0.4),
    "disk": (0.2, 0.4),
    "cross": (0.2, 0.4),
    "triangle": (0.25, 0.45),
}


def shape_mask(shape: str, side: int, half_size: float) -> np.ndarray:
    """Support of a shape centred on the image, sampled at pixel centres"""
    c = (side - 1) / 2
    dy, dx = np.mgrid[0:side, 0:side] - c
    r = half_size
    if shape == "square":
        return (np.abs(dy) < r) & (np.abs(dx) < r)
    if shape == "disk":
        return dy ** 2 + dx ** 2 < r ** 2
    if shape == "cross":
        return ((np.abs(dx) < r / 2) & (np.abs(dy) < r)) | ((np.abs(dy) < r / 2) & (np.abs(dx) < r))
    if shape == "triangle":
        return (dy >= -r) & (dy < r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(f"Unknown shape '{shape}'")


def synth_sample(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray, int]:
    label = int(rng.integers(cfg.n_classes))
    shape = SHAPE_CLASSES[label]
    lo, hi = SIZE_RANGE[shape]
    half_size = rng.uniform(lo, hi) * cfg.side
    color = rng.uniform(0.5, 1.0, size=3)
    background = cfg.amplitude * rng.uniform(0.0, 1.0, size=(cfg.side, cfg.side, 3))
    mask = shape_mask(shape, cfg.side, half_size)
    image = np.where(mask[:, :, None], color, background)
    return image, mask, label


def synth_generate(cfg: SynthConfig, out_dir: PathLike) -> DatasetManifest:
    """Noise background plus one centred, randomly coloured and sized shape; class = shape type"""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for i in range(cfg.n_samples):
        image, mask, label = synth_sample(rng, cfg)
        image_rel, mask_rel = f"images/{i:06d}.ppm", f"masks/{i:06d}.pgm"
        write_image(out_dir / image_rel, image)
        write_mask(out_dir / mask_rel, mask)
        records.append(ManifestRecord(image_rel, mask_rel, label))
    manifest = DatasetManifest(records, SHAPE_CLASSES[:cfg.n_classes])
    write_manifest(out_dir / "manifest.txt", manifest)
    logging.info(f"Generated {cfg.n_samples} synthetic samples in {out_dir}")
    return manifest


def split_manifest(manifest: DatasetManifest, test_fraction: float) -> Tuple[DatasetManifest, DatasetManifest]:
    """Leading records for training, trailing ones for testing"""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"Test fraction must lie in (0, 1), got {test_fraction}")
    n_test = max(1, int(round(len(manifest.records) * test_fraction)))
    n_train = len(manifest.records) - n_test
    if n_train < 1:
        raise ValueError(f"Not enough records ({len(manifest.records)}) to split")
    names = list(manifest.label_names)
    return (DatasetManifest(manifest.records[:n_train], names),
            DatasetManifest(manifest.records[n_train:], list(names)))


def dataset_stats(manifest: DatasetManifest, root: PathLike) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Per-sample foreground fractions and a per-class summary
    (record count and mean foreground fraction).
    """
    root = Path(root)
    rows = []
    for record in manifest.records:
        fraction = float(read_mask(root / record.mask_path).mean()) if record.mask_path else float("nan")
        rows.append({
            "image": record.image_path,
            "label": manifest.label_names[record.label],
            "foreground_fraction": fraction,
        })
    samples = pd.DataFrame(rows, columns=["image", "label", "foreground_fraction"])
    per_class = (samples.groupby("label", sort=True)["foreground_fraction"]
                 .agg(count="size", mean_foreground="mean").reset_index())
    return samples, per_class
