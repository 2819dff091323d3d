"""Dataset ingestion, RLE mask codec, synthetic data generation, checkpoints."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Box
from .tensor import Tensor


class DatasetError(ValueError):
    """Raised for malformed dataset trees, annotations or rasters."""


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


@dataclass
class DatasetRecord:
    """One image with its ground truth."""

    name: str
    image: np.ndarray  # [H,W,3] uint8
    mask: np.ndarray  # [H,W] bool, all-zero when defect-free
    boxes: list[Box] = field(default_factory=list)
    classes: list[int] = field(default_factory=list)  # one per box, >= 1 (0 = background)
    split: str = "train"
    source: str = "synthetic"
    path: str | None = None

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise DatasetError(
                f"{self.name}: mask {self.mask.shape} does not match image {self.image.shape[:2]}"
            )

    @property
    def has_defect(self) -> bool:
        return bool(self.mask.any())

    @property
    def defect_fraction(self) -> float:
        return float(self.mask.mean())


# -- raster I/O -----------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"unreadable raster {path}: {exc}") from exc


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"unreadable mask {path}: {exc}") from exc


def write_image(path: str | Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8)) * 255).save(path)


# -- run-length codec (column-major, 1-indexed start/length pairs) ---------------


def rle_encode(mask: np.ndarray) -> str:
    """Binary mask -> 'start length ...' in column-major, 1-indexed pixel order."""
    flat = np.asarray(mask).astype(np.uint8).flatten(order="F")
    padded = np.concatenate([[0], flat, [0]])
    edges = np.flatnonzero(padded[1:] != padded[:-1]) + 1
    starts = edges[::2]
    lengths = edges[1::2] - starts
    return " ".join(f"{s} {l}" for s, l in zip(starts, lengths))


def rle_decode(encoding: str, height: int, width: int) -> np.ndarray:
    """Inverse of rle_encode; rejects malformed input instead of clipping."""
    tokens = encoding.split()
    if len(tokens) % 2 != 0:
        raise DatasetError("run-length text must hold start/length pairs")
    flat = np.zeros(height * width, dtype=bool)
    prev_end = 0  # exclusive, 1-indexed
    prev_start = 0
    for i in range(0, len(tokens), 2):
        try:
            start, length = int(tokens[i]), int(tokens[i + 1])
        except ValueError as exc:
            raise DatasetError(f"non-integer run token: {tokens[i]!r} {tokens[i + 1]!r}") from exc
        if start < 1 or length < 1:
            raise DatasetError(f"runs must be positive, got start={start} length={length}")
        if start <= prev_start:
            raise DatasetError(f"run starts must be strictly increasing at start={start}")
        if start < prev_end:
            raise DatasetError(f"overlapping run at start={start}")
        if start - 1 + length > flat.size:
            raise DatasetError(f"run start={start} length={length} exceeds {height}x{width} mask")
        flat[start - 1 : start - 1 + length] = True
        prev_start = start
        prev_end = start + length
    return flat.reshape((height, width), order="F")


# -- ground-truth boxes from masks ----------------------------------------------

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def mask_to_boxes(mask: np.ndarray, min_side: int = 1) -> list[Box]:
    """Bounding boxes of 8-connected mask components, in pixel coordinates."""
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        ys, xs = sl
        box = Box(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop))
        if box.width >= min_side and box.height >= min_side:
            boxes.append(box)
    return boxes


# -- dataset layouts --------------------------------------------------------------

LAYOUTS = ("kolektor", "severstal", "cplid", "synthetic")


def load_dataset(root: str | Path, layout: str) -> list[DatasetRecord]:
    """Read a dataset tree into records. Defect-free images get all-zero masks.

    Layouts:
      kolektor  - per-part folders of <stem>.png + <stem>_label.png pairs
      severstal - images/ folder + annotations.csv (ImageId,ClassId,EncodedPixels)
      cplid     - normal/ and defect/ folders, masks in defect_masks/
      synthetic - manifest.json + images/ + masks/ written by the generator
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not root.exists():
        raise DatasetError(f"dataset root {root} does not exist")
    loader = {
        "kolektor": _load_kolektor,
        "severstal": _load_severstal,
        "cplid": _load_cplid,
        "synthetic": _load_synthetic,
    }[layout]
    return loader(root)


def _finish_record(name, image, mask, split, source, path) -> DatasetRecord:
    boxes = mask_to_boxes(mask)
    return DatasetRecord(
        name=name,
        image=image,
        mask=mask,
        boxes=boxes,
        classes=[1] * len(boxes),
        split=split,
        source=source,
        path=str(path),
    )


def _load_kolektor(root: Path) -> list[DatasetRecord]:
    records = []
    for part in sorted(p for p in root.iterdir() if p.is_dir()):
        for img_path in sorted(part.glob("*.png")):
            if img_path.stem.endswith("_label"):
                continue
            mask_path = part / f"{img_path.stem}_label.png"
            if not mask_path.exists():
                raise DatasetError(f"missing mask for {img_path}")
            image = read_image(img_path)
            mask = read_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise DatasetError(f"{img_path.name}: mask/image size mismatch")
            records.append(
                _finish_record(f"{part.name}/{img_path.stem}", image, mask, "train", "kolektor", img_path)
            )
    return records


def _load_severstal(root: Path) -> list[DatasetRecord]:
    ann_path = root / "annotations.csv"
    by_image: dict[str, list[tuple[int, str]]] = {}
    if ann_path.exists():
        with open(ann_path, newline="") as fh:
            for row in csv.DictReader(fh):
                enc = (row.get("EncodedPixels") or "").strip()
                if enc:
                    by_image.setdefault(row["ImageId"], []).append(
                        (int(row.get("ClassId") or 1), enc)
                    )
    records = []
    img_dir = root / "images"
    if not img_dir.exists():
        return []
    for img_path in sorted(img_dir.glob("*.png")):
        image = read_image(img_path)
        h, w = image.shape[:2]
        mask = np.zeros((h, w), dtype=bool)
        for _cls, enc in by_image.get(img_path.name, []):
            # multi-class annotations collapse to a single defect mask
            mask |= rle_decode(enc, h, w)
        records.append(_finish_record(img_path.stem, image, mask, "train", "severstal", img_path))
    return records


def _load_cplid(root: Path) -> list[DatasetRecord]:
    records = []
    for img_path in sorted((root / "normal").glob("*.png")) if (root / "normal").exists() else []:
        image = read_image(img_path)
        mask = np.zeros(image.shape[:2], dtype=bool)
        records.append(_finish_record(f"normal/{img_path.stem}", image, mask, "train", "cplid", img_path))
    defect_dir = root / "defect"
    for img_path in sorted(defect_dir.glob("*.png")) if defect_dir.exists() else []:
        mask_path = root / "defect_masks" / img_path.name
        if not mask_path.exists():
            raise DatasetError(f"missing mask for {img_path}")
        image = read_image(img_path)
        mask = read_mask(mask_path)
        if mask.shape != image.shape[:2]:
            raise DatasetError(f"{img_path.name}: mask/image size mismatch")
        records.append(_finish_record(f"defect/{img_path.stem}", image, mask, "train", "cplid", img_path))
    return records


def _load_synthetic(root: Path) -> list[DatasetRecord]:
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    records = []
    for entry in manifest["records"]:
        img_path = root / "images" / entry["image"]
        mask_path = root / "masks" / entry["mask"]
        if not mask_path.exists():
            raise DatasetError(f"missing mask for {img_path}")
        records.append(
            _finish_record(
                entry["name"], read_image(img_path), read_mask(mask_path),
                entry.get("split", "train"), "synthetic", img_path,
            )
        )
    return records


# -- synthetic defect imagery ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic defect-image generator."""

    image_size: tuple[int, int] = (256, 256)  # (H, W)
    noise_amplitude: float = 0.03
    gradient_amplitude: float = 0.10
    defect_count: tuple[int, int] = (1, 3)  # inclusive range
    shapes: tuple[str, ...] = ("rectangle", "scratch")
    area_fraction: float = 0.05
    contrast: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if self.area_fraction > 0.9:
            raise ValueError(f"area fraction {self.area_fraction} infeasible (> 0.9)")
        if self.area_fraction < 0.0:
            raise ValueError("area fraction must be non-negative")
        bad = set(self.shapes) - {"rectangle", "scratch", "blob"}
        if bad:
            raise ValueError(f"unknown defect shapes: {sorted(bad)}")
        if self.defect_count[0] < 0 or self.defect_count[1] < self.defect_count[0]:
            raise ValueError(f"bad defect count range {self.defect_count}")


def _rect_mask(rng, h, w, area) -> np.ndarray:
    aspect = rng.uniform(0.5, 2.0)
    rw = int(np.clip(round(math.sqrt(area * aspect)), 4, w - 2))
    rh = int(np.clip(round(area / max(rw, 1)), 4, h - 2))
    x0 = int(rng.integers(1, max(2, w - rw)))
    y0 = int(rng.integers(1, max(2, h - rh)))
    m = np.zeros((h, w), dtype=bool)
    m[y0 : y0 + rh, x0 : x0 + rw] = True
    return m


def _scratch_mask(rng, h, w, area) -> np.ndarray:
    # thick polyline: total length*width ~ area
    width = float(rng.uniform(4.0, 8.0))
    length = max(12.0, area / width)
    segs = int(rng.integers(2, 4))
    pts = [np.array([rng.uniform(0.15, 0.85) * w, rng.uniform(0.15, 0.85) * h])]
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(segs):
        angle += rng.uniform(-0.7, 0.7)
        step = length / segs
        pts.append(pts[-1] + step * np.array([math.cos(angle), math.sin(angle)]))
    yy, xx = np.mgrid[0:h, 0:w]
    m = np.zeros((h, w), dtype=bool)
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-9:
            continue
        t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0.0, 1.0)
        dx = xx - (a[0] + t * ab[0])
        dy = yy - (a[1] + t * ab[1])
        m |= dx * dx + dy * dy <= (width / 2) ** 2
    return m


def _blob_mask(rng, h, w, area) -> np.ndarray:
    r = math.sqrt(area / math.pi)
    ry = r * rng.uniform(0.6, 1.4)
    rx = max(area / math.pi / max(ry, 1e-6), 2.0)
    cy = rng.uniform(ry + 1, h - ry - 1) if h > 2 * ry + 2 else h / 2
    cx = rng.uniform(rx + 1, w - rx - 1) if w > 2 * rx + 2 else w / 2
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    return (u / max(rx, 1.0)) ** 2 + (v / max(ry, 1.0)) ** 2 <= 1.0


_SHAPE_FNS = {"rectangle": _rect_mask, "scratch": _scratch_mask, "blob": _blob_mask}


def generate_synthetic(spec: SyntheticSpec, count: int) -> list[DatasetRecord]:
    """Deterministic synthetic dataset: textured background plus contrasting
    defects whose per-image area fraction lands within 20% of the target."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    records = []
    for idx in range(count):
        image, mask = _generate_one(rng, spec)
        boxes = mask_to_boxes(mask)
        records.append(
            DatasetRecord(
                name=f"syn{idx:05d}",
                image=image,
                mask=mask,
                boxes=boxes,
                classes=[1] * len(boxes),
                split="train",
                source="synthetic",
            )
        )
    return records


def _generate_one(rng: np.random.Generator, spec: SyntheticSpec):
    h, w = spec.image_size
    base = 0.55 + rng.uniform(-0.05, 0.05)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (xx * math.cos(angle) + yy * math.sin(angle)) / max(h, w)
    canvas = base + spec.gradient_amplitude * (ramp - ramp.mean())
    canvas = canvas + rng.normal(0.0, spec.noise_amplitude, size=(h, w))

    mask = np.zeros((h, w), dtype=bool)
    n_defects = int(rng.integers(spec.defect_count[0], spec.defect_count[1] + 1))
    target = spec.area_fraction * h * w
    if n_defects > 0 and target > 0:
        lo, hi = 0.85 * target, 1.15 * target
        shares = rng.dirichlet(np.ones(n_defects) * 4.0) * target
        for share in shares:
            mask = _place_defect(rng, spec, mask, share, hi)
        tries = 0
        while mask.sum() < lo and tries < 50:
            mask = _place_defect(rng, spec, mask, max(lo - mask.sum(), 0.02 * target), hi)
            tries += 1
    if mask.any():
        sign = -1.0 if rng.random() < 0.7 else 1.0
        depth = spec.contrast * rng.uniform(0.8, 1.2)
        texture = rng.normal(0.0, spec.noise_amplitude * 2.0, size=(h, w))
        canvas = np.where(mask, canvas + sign * depth + texture, canvas)
    gray = np.clip(canvas, 0.0, 1.0)
    image = np.repeat((gray * 255.0).round().astype(np.uint8)[:, :, None], 3, axis=2)
    return image, mask


def _place_defect(rng, spec: SyntheticSpec, mask: np.ndarray, share: float, cap: float) -> np.ndarray:
    h, w = mask.shape
    shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
    for _ in range(24):
        candidate = _SHAPE_FNS[shape](rng, h, w, max(share, 16.0))
        new = candidate & ~mask
        if new.sum() == 0:
            continue
        if mask.sum() + new.sum() <= cap:
            return mask | candidate
        share *= 0.7  # overshoot: retry smaller
    return mask


def write_synthetic_dataset(records: list[DatasetRecord], out_dir: str | Path, spec: SyntheticSpec) -> dict:
    """Persist records as images/ + masks/ + manifest.json; returns the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        img_name = f"{rec.name}.png"
        write_image(out / "images" / img_name, rec.image)
        write_mask(out / "masks" / img_name, rec.mask)
        entries.append(
            {
                "name": rec.name,
                "image": img_name,
                "mask": img_name,
                "split": rec.split,
                "defect_fraction": rec.defect_fraction,
                "n_defects": len(rec.boxes),
            }
        )
    fractions = [e["defect_fraction"] for e in entries]
    manifest = {
        "seed": spec.seed,
        "image_size": list(spec.image_size),
        "area_fraction_target": spec.area_fraction,
        "count": len(records),
        "stats": {
            "mean_defect_fraction": float(np.mean(fractions)) if fractions else 0.0,
            "min_defect_fraction": float(np.min(fractions)) if fractions else 0.0,
            "max_defect_fraction": float(np.max(fractions)) if fractions else 0.0,
        },
        "records": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# -- checkpoint serialization -------------------------------------------------------

_MAGIC = b"DFCK"
_VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path: str | Path) -> None:
    """Self-describing binary container of named float64 arrays (bit-exact)."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(params)))
    for name, tensor in params.items():
        blob = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        buf.write(struct.pack("<H", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def take(n: int, what: str) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return chunk

    if take(4, "magic") != _MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {_VERSION})")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "entry name length"))
        name = take(name_len, "entry name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "entry rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "entry shape"))
        n_items = int(np.prod(shape)) if ndim else 1
        payload = take(8 * n_items, f"entry {name!r} payload")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        params[name] = Tensor(arr)
    if view.read(1):
        raise CheckpointError("unknown trailing bytes after final entry")
    return params
