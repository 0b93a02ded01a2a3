"""Point-annotated counting datasets: loading, synthetic generation, splits, baseline.

On-disk layout (one directory per dataset)::

    img_<id>.png            image (8/16-bit grayscale or RGB)
    img_<id>.dots.csv       annotation, header ``x,y``, zero-based pixel coords
    img_<id>.dots.png       ...or a dot image: pixel value = number of objects
    dataset.json            manifest: name, channels, annotation format, items
    generator.json          generator settings (synthetic datasets only)

``generator.json`` holds the :class:`GeneratorConfig` fields verbatim plus
``n_images`` and ``seed``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .countmap import DotAnnotation

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
MANIFEST = "dataset.json"
GENERATOR_RECORD = "generator.json"


@dataclass
class LoadReport:
    out_of_bounds: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    duplicates: dict[str, list[tuple[int, int, int]]] = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return not self.out_of_bounds and not self.duplicates


@dataclass
class CountingDataset:
    """Images ``(C, H, W)`` in ``[0, 1]`` paired with their point annotations."""

    name: str
    images: list[np.ndarray]
    annotations: list[DotAnnotation]
    ids: list[str] = field(default_factory=list)
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        if len(self.images) != len(self.annotations):
            raise ValueError("images and annotations differ in number")
        if not self.ids:
            self.ids = [f"{i:04d}" for i in range(len(self.images))]
        chans = set()
        for img, ann, ident in zip(self.images, self.annotations, self.ids):
            if img.ndim != 3:
                raise ValueError(f"image {ident} must be (C, H, W), got {img.shape}")
            if (ann.height, ann.width) != img.shape[1:]:
                raise ValueError(f"image {ident} is {img.shape[1:]} but annotation is {(ann.height, ann.width)}")
            chans.add(img.shape[0])
        if len(chans) > 1:
            raise ValueError(f"mixed channel counts {sorted(chans)}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images[0].shape[0] if self.images else 1

    def counts(self) -> np.ndarray:
        return np.array([a.count for a in self.annotations], dtype=np.int64)

    def subset(self, indices) -> "CountingDataset":
        idx = [int(i) for i in indices]
        return CountingDataset(
            name=self.name,
            images=[self.images[i] for i in idx],
            annotations=[self.annotations[i] for i in idx],
            ids=[self.ids[i] for i in idx],
        )


# ------------------------------------------------------------------------ synthetic


@dataclass
class GeneratorConfig:
    """Synthetic fluorescence-cell images: bright elliptical blobs on a dark field."""

    image_size: int = 96
    count_mean: float = 50.0
    count_spread: float = 15.0
    radius_range: tuple[float, float] = (3.0, 6.0)
    ellipticity_range: tuple[float, float] = (1.0, 1.6)
    blur_range: tuple[float, float] = (0.5, 2.0)
    intensity_range: tuple[float, float] = (0.35, 0.8)
    background: float = 0.05
    noise_level: float = 0.02
    overlap: bool = True

    def __post_init__(self):
        for name in ("radius_range", "ellipticity_range", "blur_range", "intensity_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive (low, high) range, got {(lo, hi)}")
        if self.ellipticity_range[0] < 1:
            raise ValueError("ellipticity is a major/minor axis ratio and must be >= 1")
        if self.image_size < 1 or self.count_mean < 0 or self.count_spread < 0 or self.noise_level < 0:
            raise ValueError("image_size must be positive; count_mean, count_spread, noise_level >= 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})


def _draw_count(cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    if cfg.count_spread == 0:
        return int(round(cfg.count_mean))
    return max(0, int(round(rng.normal(cfg.count_mean, cfg.count_spread))))


def _draw_centers(n: int, radii: np.ndarray, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    if cfg.overlap:
        return rng.integers(0, size, size=(n, 2))
    centers: list[tuple[int, int]] = []
    for i in range(n):
        for _ in range(1000):
            c = rng.integers(0, size, size=2)
            if all(math.dist(c, p) >= radii[i] + radii[j] for j, p in enumerate(centers)):
                centers.append((int(c[0]), int(c[1])))
                break
        else:
            raise RuntimeError(f"could not place {n} non-overlapping cells in a {size}px image")
    return np.array(centers, dtype=np.int64).reshape(-1, 2)


def render_cell(canvas: np.ndarray, cx: float, cy: float, radius: float, ellipticity: float,
                angle: float, blur: float, intensity: float) -> None:
    """Add one elliptical Gaussian blob, widened by an isotropic blur, onto ``canvas``."""
    sa = radius / 2.0
    sb = radius / (2.0 * ellipticity)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([sa * sa, sb * sb]) @ rot.T + (blur * blur) * np.eye(2)
    inv = np.linalg.inv(cov)
    reach = int(math.ceil(4.0 * math.sqrt(np.linalg.eigvalsh(cov).max())))
    h, w = canvas.shape
    y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    q = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
    canvas[y0:y1, x0:x1] += intensity * np.exp(-0.5 * q)


def generate_image(cfg: GeneratorConfig, rng: np.random.Generator) -> tuple[np.ndarray, DotAnnotation]:
    n = _draw_count(cfg, rng)
    radii = rng.uniform(*cfg.radius_range, size=n)
    centers = _draw_centers(n, radii, cfg, rng)
    ellip = rng.uniform(*cfg.ellipticity_range, size=n)
    angles = rng.uniform(0.0, math.pi, size=n)
    blurs = rng.uniform(*cfg.blur_range, size=n)
    peaks = rng.uniform(*cfg.intensity_range, size=n)
    canvas = np.full((cfg.image_size, cfg.image_size), cfg.background, dtype=np.float64)
    for i in range(n):
        render_cell(canvas, centers[i, 0], centers[i, 1], radii[i], ellip[i], angles[i], blurs[i], peaks[i])
    if cfg.noise_level > 0:
        canvas += rng.normal(0.0, cfg.noise_level, size=canvas.shape)
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)[None]
    ann = DotAnnotation(width=cfg.image_size, height=cfg.image_size, points=centers)
    return image, ann


def generate_synthetic(config: GeneratorConfig, n_images: int, seed: int = 0, name: str = "synthetic") -> CountingDataset:
    """``n_images`` independent images; image ``i`` depends only on ``(config, seed, i)``."""
    children = np.random.SeedSequence(seed).spawn(n_images)
    images, anns = [], []
    for child in children:
        img, ann = generate_image(config, np.random.default_rng(child))
        images.append(img)
        anns.append(ann)
    return CountingDataset(name=name, images=images, annotations=anns,
                           ids=[f"{i:04d}" for i in range(n_images)])


# ---------------------------------------------------------------------------- disk I/O


def read_image(path) -> np.ndarray:
    """Image file to float32 ``(C, H, W)`` in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        scaled = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32) or arr.dtype == np.dtype(">u2"):
        scaled = arr.astype(np.float32) / 65535.0
    elif arr.dtype == bool:
        scaled = arr.astype(np.float32)
    else:
        scaled = arr.astype(np.float32)
    if scaled.ndim == 2:
        return scaled[None]
    if scaled.ndim == 3:
        if scaled.shape[2] == 4:
            scaled = scaled[:, :, :3]
        return np.ascontiguousarray(scaled.transpose(2, 0, 1))
    raise OSError(f"unsupported image layout {arr.shape} in {path}")


def write_image(path, image: np.ndarray) -> None:
    """Float ``(C, H, W)`` in ``[0, 1]`` to PNG: 16-bit for one channel, 8-bit RGB for three."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.shape[0] == 1:
        Image.fromarray(np.round(img[0] * 65535).astype(np.uint16)).save(path)
    elif img.shape[0] == 3:
        Image.fromarray(np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path)
    else:
        raise ValueError("only 1- or 3-channel images can be written")


def _read_dot_image(path) -> np.ndarray:
    """Per-pixel point multiplicities from a dot image.

    An 8-bit image whose nonzero pixels are all 255 is a binary mask (one
    point per marked pixel, any colour channel); otherwise the pixel value is
    the number of coincident points.
    """
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    if arr.dtype == np.uint8 and arr.any() and (arr[arr > 0] == 255).all():
        return (arr > 0).astype(np.int64)
    return arr.astype(np.int64)


def save_dataset(dataset: CountingDataset, root, annotation_format: str = "csv-dots",
                 generator: dict | None = None, force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} is not empty; pass force=True to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    items = []
    for img, ann, ident in zip(dataset.images, dataset.annotations, dataset.ids):
        image_name = f"img_{ident}.png"
        write_image(root / image_name, img)
        if annotation_format == "csv-dots":
            ann_name = f"img_{ident}.dots.csv"
            ann.to_csv(root / ann_name)
        elif annotation_format == "dot-image":
            ann_name = f"img_{ident}.dots.png"
            dots = ann.dot_map()
            if dots.max(initial=0) > 65535:
                raise ValueError("too many coincident points for a 16-bit dot image")
            Image.fromarray(dots.astype(np.uint16)).save(root / ann_name)
        else:
            raise ValueError(f"unknown annotation format {annotation_format!r}")
        items.append({"id": ident, "image": image_name, "annotation": ann_name, "count": ann.count})
    manifest = {"name": dataset.name, "channels": dataset.channels, "annotation_format": annotation_format,
                "items": items}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2))
    if generator is not None:
        (root / GENERATOR_RECORD).write_text(json.dumps(generator, indent=2, sort_keys=True))
    return root


def _scan(root: Path) -> list[tuple[str, Path]]:
    found = []
    for p in sorted(root.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS and p.name.startswith("img_") and ".dots." not in p.name:
            found.append((p.name[len("img_"):-len(p.suffix)], p))
    return found


def _annotation_path(root: Path, ident: str, fmt: str) -> Path | None:
    if fmt in ("csv-dots", "auto"):
        p = root / f"img_{ident}.dots.csv"
        if p.exists():
            return p
    if fmt in ("dot-image", "auto"):
        for ext in IMAGE_EXTS:
            p = root / f"img_{ident}.dots{ext}"
            if p.exists():
                return p
    return None


def load_dataset(root, format: str = "auto") -> CountingDataset:
    """Load a dataset directory; bad dots are dropped and listed in ``dataset.report``.

    ``format`` is ``"csv-dots"``, ``"dot-image"`` or ``"auto"`` (try both).
    """
    root = Path(root)
    if format not in ("auto", "csv-dots", "dot-image"):
        raise ValueError(f"unknown annotation format {format!r}")
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    manifest_path = root / MANIFEST
    name = root.name
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        name = manifest.get("name", name)
        entries = [(it["id"], root / it["image"], root / it["annotation"]) for it in manifest["items"]]
    else:
        entries = [(ident, p, _annotation_path(root, ident, format)) for ident, p in _scan(root)]
    if not entries:
        raise FileNotFoundError(f"no images found in {root}")

    report = LoadReport()
    images, anns, ids = [], [], []
    for ident, img_path, ann_path in entries:
        if ann_path is None or not Path(ann_path).exists():
            raise FileNotFoundError(f"missing annotation for image {img_path.name}")
        img = read_image(img_path)
        h, w = img.shape[1:]
        if ann_path.suffix.lower() == ".csv":
            ann = _load_csv_checked(ann_path, w, h, ident, report)
        else:
            dots = _read_dot_image(ann_path)
            if dots.shape != (h, w):
                raise ValueError(f"dot image {ann_path.name} is {dots.shape}, image is {(h, w)}")
            ann = DotAnnotation.from_dot_map(dots)
        dup = ann.duplicates()
        if dup:
            report.duplicates[ident] = dup
        images.append(img)
        anns.append(ann)
        ids.append(ident)
    if not report.clean:
        log.warning("%s: %d image(s) with out-of-bounds dots, %d with duplicate dots",
                    name, len(report.out_of_bounds), len(report.duplicates))
    return CountingDataset(name=name, images=images, annotations=anns, ids=ids, report=report)


def _load_csv_checked(path: Path, w: int, h: int, ident: str, report: LoadReport) -> DotAnnotation:
    import csv

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected a header with columns x,y")
        pts = [(int(float(row["x"])), int(float(row["y"]))) for row in reader]
    keep = [(x, y) for x, y in pts if 0 <= x < w and 0 <= y < h]
    bad = [(x, y) for x, y in pts if not (0 <= x < w and 0 <= y < h)]
    if bad:
        report.out_of_bounds[ident] = bad
    return DotAnnotation(width=w, height=h, points=np.array(keep, dtype=np.int64).reshape(-1, 2))


def center_crop(dataset: CountingDataset, height: int | None = None, width: int | None = None) -> CountingDataset:
    """Crop every image (and its dots) to a common size, by default the smallest present."""
    height = height or min(img.shape[1] for img in dataset.images)
    width = width or min(img.shape[2] for img in dataset.images)
    images, anns = [], []
    for img, ann in zip(dataset.images, dataset.annotations):
        h, w = img.shape[1:]
        if h < height or w < width:
            raise ValueError(f"image {img.shape[1:]} is smaller than the crop {(height, width)}")
        y0, x0 = (h - height) // 2, (w - width) // 2
        images.append(np.ascontiguousarray(img[:, y0:y0 + height, x0:x0 + width]))
        pts = ann.points - np.array([x0, y0])
        inside = (pts[:, 0] >= 0) & (pts[:, 0] < width) & (pts[:, 1] >= 0) & (pts[:, 1] < height)
        anns.append(DotAnnotation(width=width, height=height, points=pts[inside]))
    return CountingDataset(name=dataset.name, images=images, annotations=anns, ids=list(dataset.ids))


# ------------------------------------------------------------------ splits & baseline


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    test_size: int
    seed: int = 0


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "val", "test")))


def default_test_size(n_images: int) -> int:
    """Half the dataset (100 of the usual 200-image benchmark)."""
    return n_images // 2


def make_splits(dataset, spec: SplitSpec, n_repeats: int = 10) -> list[Split]:
    """Random (train, val, test) partitions; the test set is drawn first, fixed in size.

    ``dataset`` is a :class:`CountingDataset` or just its length. Repeat ``i``
    uses the ``i``-th child of ``SeedSequence(spec.seed)``.
    """
    n = dataset if isinstance(dataset, int) else len(dataset)
    need = spec.n_train + spec.n_val + spec.test_size
    if min(spec.n_train, spec.n_val, spec.test_size) < 1 or need > n:
        raise ValueError(f"split ({spec.n_train}, {spec.n_val}, {spec.test_size}) is infeasible for {n} images")
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    splits = []
    for child in np.random.SeedSequence(spec.seed).spawn(n_repeats):
        perm = np.random.default_rng(child).permutation(n)
        test = np.sort(perm[:spec.test_size])
        train = np.sort(perm[spec.test_size:spec.test_size + spec.n_train])
        val = np.sort(perm[spec.test_size + spec.n_train:need])
        splits.append(Split(train=train, val=val, test=test))
    return splits


@dataclass(frozen=True)
class AverageCountPredictor:
    """Predicts the mean training count for every image."""

    mean_count: float

    def predict_count(self, image=None) -> float:
        return self.mean_count

    def __call__(self, image=None) -> float:
        return self.mean_count


def baseline_average_count(train) -> AverageCountPredictor:
    """``train`` is a dataset, a list of annotations, or a sequence of counts."""
    if isinstance(train, CountingDataset):
        counts = train.counts()
    else:
        train = list(train)
        counts = np.array([t.count if isinstance(t, DotAnnotation) else t for t in train], dtype=np.float64)
    if len(counts) == 0:
        raise ValueError("the training split is empty")
    return AverageCountPredictor(float(np.mean(counts)))
