"""Dataset ingestion and image preprocessing.

The pipeline mirrors the deployment preprocessing: decode, convert to
grayscale, resize to 48x48 with bilinear interpolation, keep pixels in
[0, 1].  Edge detection (Sobel magnitude, thresholded) is the optional
sparsifying step applied before spike encoding.

Binary PGM (P5) is decoded natively.  Other formats go through a pluggable
decoder table; when Pillow is importable it is registered automatically as
the fallback so the core stays dependency-light.

A parametric 7-class synthetic corpus stands in for the licensed expression
dataset in tests and demos: each class overlays a distinct large-scale
pattern (bars, rings, blobs, a cross) on a smooth illuminated background,
with per-sample jitter.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RandomStream

CLASS_NAMES = ("anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise")
TARGET_SIZE = 48

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    pass


class IngestError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray  # (48, 48) float64 in [0, 1]
    label: int
    source_id: str


@dataclass
class IngestReport:
    loaded: int = 0
    skipped: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    samples: list[ImageSample]
    split: str = "all"
    class_names: tuple[str, ...] = CLASS_NAMES
    report: IngestReport | None = None

    def __len__(self):
        return len(self.samples)

    def as_arrays(self):
        x = np.stack([s.pixels for s in self.samples])[..., None]
        y = np.array([s.label for s in self.samples], dtype=np.int64)
        return x, y

    def map_pixels(self, fn) -> "Dataset":
        """New dataset with fn applied to every sample's pixels."""
        samples = [
            ImageSample(pixels=fn(s.pixels), label=s.label, source_id=s.source_id)
            for s in self.samples
        ]
        return Dataset(samples, split=self.split, class_names=self.class_names)


# ---------------------------------------------------------------------------
# Decoding


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5), 8 or 16 bit, as floats in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PGM header {fields}") from exc
    if not (0 < maxval < 65536):
        raise ImageFormatError(f"{path}: bad PGM maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else ">u2"
    count = width * height
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if data.size < count:
        raise ImageFormatError(f"{path}: truncated PGM pixel data")
    return data.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _pillow_decoder(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


_DECODERS: dict[str, object] = {".pgm": read_pgm}


def register_decoder(extension: str, fn) -> None:
    """Register fn(path) -> float array (H, W) or (H, W, 3) in [0, 1]."""
    _DECODERS[extension.lower()] = fn


def decode_image(path) -> np.ndarray:
    ext = Path(path).suffix.lower()
    fn = _DECODERS.get(ext)
    if fn is None:
        try:
            import PIL  # noqa: F401
        except ImportError:
            raise ImageFormatError(f"no decoder registered for {ext!r}") from None
        fn = _pillow_decoder
    return fn(path)


# ---------------------------------------------------------------------------
# Transforms


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luminance-weighted conversion of an (H, W, 3) image."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageFormatError(f"to_grayscale expects (H, W, 3), got {rgb.shape}")
    r, g, b = GRAY_WEIGHTS
    return r * rgb[:, :, 0] + g * rgb[:, :, 1] + b * rgb[:, :, 2]


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ImageFormatError(f"resize_bilinear expects a 2-D image, got {img.shape}")
    h, w = img.shape
    if h < 2 or w < 2:
        raise ImageFormatError(f"cannot resize a degenerate {h}x{w} image")

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_coords(h, out_h)
    x0, x1, wx = axis_coords(w, out_w)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def edge_detect(image: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Sobel gradient magnitude, max-normalized to [0, 1], with values below
    the threshold zeroed exactly.  Border handling is edge replication."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ImageFormatError(f"edge_detect expects a 2-D image, got {img.shape}")
    pad = np.pad(img, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3))
    gx = np.einsum("ijab,ab->ij", win, _SOBEL_X)
    gy = np.einsum("ijab,ab->ij", win, _SOBEL_X.T)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    mag[mag < threshold] = 0.0
    return mag


def preprocess(image: np.ndarray) -> np.ndarray:
    """Grayscale if needed, resize to 48x48, clamp to [0, 1].  Idempotent."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[:, :, 0]
        else:
            img = to_grayscale(img)
    if img.shape != (TARGET_SIZE, TARGET_SIZE):
        img = resize_bilinear(img, TARGET_SIZE, TARGET_SIZE)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Ingestion and splitting


@dataclass
class SplitConfig:
    test_fraction: float = 0.2
    seed: int = 0


def ingest(dir_path, split_config: SplitConfig | None = None, class_names=CLASS_NAMES):
    """Load `<root>/<class_name>/*` into preprocessed train/test datasets.

    The split is stratified per class and deterministic under the seed.
    Unreadable files are skipped with a warning and counted in the report
    attached to both datasets.
    """
    cfg = split_config or SplitConfig()
    root = Path(dir_path)
    if not root.is_dir():
        raise IngestError(f"dataset root {root} is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subdirs:
        raise IngestError(f"dataset root {root} has no class directories")
    unknown = [p.name for p in subdirs if p.name not in class_names]
    if unknown:
        raise IngestError(
            f"unknown class directories {unknown}; expected names from {list(class_names)}"
        )
    report = IngestReport()
    rng = RandomStream(cfg.seed)
    train_samples: list[ImageSample] = []
    test_samples: list[ImageSample] = []
    for sub in subdirs:
        label = class_names.index(sub.name)
        files = sorted(p for p in sub.iterdir() if p.is_file())
        samples = []
        for f in files:
            try:
                img = preprocess(decode_image(f))
            except (ImageFormatError, OSError) as exc:
                warnings.warn(f"skipping unreadable image {f}: {exc}", stacklevel=2)
                report.skipped.append(str(f))
                continue
            samples.append(ImageSample(pixels=img, label=label, source_id=f"{sub.name}/{f.name}"))
        report.loaded += len(samples)
        order = rng.permutation(len(samples))
        n_test = int(round(cfg.test_fraction * len(samples)))
        test_idx = set(order[:n_test].tolist())
        for i, s in enumerate(samples):
            (test_samples if i in test_idx else train_samples).append(s)
    train = Dataset(train_samples, split="train", class_names=tuple(class_names), report=report)
    test = Dataset(test_samples, split="test", class_names=tuple(class_names), report=report)
    return train, test


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split of an in-memory dataset."""
    rng = RandomStream(seed)
    by_label: dict[int, list[ImageSample]] = {}
    for s in dataset.samples:
        by_label.setdefault(s.label, []).append(s)
    train_samples, test_samples = [], []
    for label in sorted(by_label):
        samples = by_label[label]
        order = rng.permutation(len(samples))
        n_test = int(round(test_fraction * len(samples)))
        test_idx = set(order[:n_test].tolist())
        for i, s in enumerate(samples):
            (test_samples if i in test_idx else train_samples).append(s)
    return (
        Dataset(train_samples, split="train", class_names=dataset.class_names),
        Dataset(test_samples, split="test", class_names=dataset.class_names),
    )


def write_split_manifest(path, *datasets: Dataset) -> None:
    """CSV manifest `source_id,split,label` over one or more datasets."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_id", "split", "label"])
        for ds in datasets:
            for s in ds.samples:
                writer.writerow([s.source_id, ds.split, s.label])


# ---------------------------------------------------------------------------
# Synthetic corpus

_YY, _XX = np.mgrid[0:TARGET_SIZE, 0:TARGET_SIZE].astype(np.float64)


def _background(rng: RandomStream) -> np.ndarray:
    cx = 23.5 + rng.uniform(-3, 3)
    cy = 23.5 + rng.uniform(-3, 3)
    r = np.hypot(_XX - cx, _YY - cy)
    bg = 0.45 - 0.25 * (r / r.max())
    tilt_x = rng.uniform(-0.08, 0.08)
    tilt_y = rng.uniform(-0.08, 0.08)
    bg = bg + tilt_x * (_XX / TARGET_SIZE - 0.5) + tilt_y * (_YY / TARGET_SIZE - 0.5)
    return bg


def _bars(coord: np.ndarray, rng: RandomStream) -> np.ndarray:
    period = rng.uniform(12.0, 16.0)
    phase = rng.uniform(0.0, period)
    stripes = 0.5 * (1.0 + np.sin(2.0 * np.pi * (coord + phase) / period))
    return 0.55 * stripes**3  # sharpened crests, distinct edges


def _rings(rng: RandomStream) -> np.ndarray:
    cx = 23.5 + rng.uniform(-3, 3)
    cy = 23.5 + rng.uniform(-3, 3)
    r = np.hypot(_XX - cx, _YY - cy)
    period = rng.uniform(10.0, 14.0)
    phase = rng.uniform(0.0, period)
    return 0.55 * (0.5 * (1.0 + np.sin(2.0 * np.pi * (r + phase) / period))) ** 3


def _blob(cx, cy, sigma) -> np.ndarray:
    return np.exp(-(((_XX - cx) ** 2 + (_YY - cy) ** 2) / (2.0 * sigma**2)))


def _pattern(label: int, rng: RandomStream) -> np.ndarray:
    if label == 0:  # horizontal bars
        return _bars(_YY, rng)
    if label == 1:  # vertical bars
        return _bars(_XX, rng)
    if label == 2:  # diagonal stripes
        return _bars((_XX + _YY) / np.sqrt(2.0), rng)
    if label == 3:  # concentric rings
        return _rings(rng)
    if label == 4:  # single central blob
        return 0.6 * _blob(23.5 + rng.uniform(-4, 4), 23.5 + rng.uniform(-4, 4), rng.uniform(7, 9))
    if label == 5:  # four corner blobs
        off = rng.uniform(9, 13)
        sig = rng.uniform(4.0, 5.5)
        out = np.zeros_like(_XX)
        for cx in (off, TARGET_SIZE - 1 - off):
            for cy in (off, TARGET_SIZE - 1 - off):
                out += _blob(cx, cy, sig)
        return 0.6 * out
    if label == 6:  # plus / cross
        cx = 23.5 + rng.uniform(-3, 3)
        cy = 23.5 + rng.uniform(-3, 3)
        width = rng.uniform(3.0, 4.5)
        horiz = np.exp(-(((_YY - cy) / width) ** 4))
        vert = np.exp(-(((_XX - cx) / width) ** 4))
        return 0.55 * np.maximum(horiz, vert)
    raise ValueError(f"no pattern for label {label}")


def make_synthetic_dataset(n_per_class: int, seed: int = 0) -> Dataset:
    """Deterministic 7-class corpus of jittered parametric patterns.

    Images are dense (a smooth illuminated background everywhere) so that
    edge detection meaningfully sparsifies them.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = RandomStream(seed)
    samples = []
    for label in range(len(CLASS_NAMES)):
        for i in range(n_per_class):
            img = _background(rng) + _pattern(label, rng)
            img = img + rng.normal((TARGET_SIZE, TARGET_SIZE), scale=0.02)
            img = np.clip(img, 0.0, 1.0)
            samples.append(
                ImageSample(
                    pixels=img,
                    label=label,
                    source_id=f"synthetic/{CLASS_NAMES[label]}/{i:04d}",
                )
            )
    return Dataset(samples, split="all")
