"""Datasets: procedural shapes with known factors, defect textures, IDX digits
and MVTec-style folder trees, plus deterministic augmentation and resizing.

Every generator is a pure function of its arguments and seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .exceptions import DegenerateRenderError, FormatError, PairingError
from .validation import check_mask

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    mask: np.ndarray | None = None
    label: str | int = "normal"
    source_id: str = ""
    defect: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3:
            raise ValueError(f"pixels must be H x W x C, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        if self.mask is not None:
            object.__setattr__(self, "mask", check_mask(self.mask, px.shape[:2]))

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    samples: tuple[ImageSample, ...]
    category: str = ""
    resolution: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        shapes = {s.pixels.shape[:2] for s in self.samples}
        if len(shapes) > 1:
            raise ValueError(f"manifest mixes resolutions: {sorted(shapes)}")
        if self.resolution is None and shapes:
            object.__setattr__(self, "resolution", shapes.pop())

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def images(self) -> np.ndarray:
        """Stack pixels into an ``(N, H, W, C)`` array."""
        if not self.samples:
            h, w = self.resolution or (0, 0)
            return np.zeros((0, h, w, 1), dtype=np.float32)
        return np.stack([s.pixels for s in self.samples])

    def masks(self) -> np.ndarray:
        missing = [s.source_id for s in self.samples if s.mask is None]
        if missing:
            raise PairingError(f"samples without masks: {missing[:5]}")
        return np.stack([s.mask for s in self.samples])

    def labels(self) -> list:
        return [s.label for s in self.samples]

    def filter(self, label) -> "DatasetManifest":
        keep = tuple(s for s in self.samples if s.label == label)
        return DatasetManifest(self.split, keep, self.category, self.resolution)

    @property
    def n_abnormal(self) -> int:
        return sum(1 for s in self.samples if s.label == "abnormal")


# ---------------------------------------------------------------------------
# Shapes with ground-truth generative factors

SHAPE_FACTORS = ("shape", "scale", "orientation", "pos_x", "pos_y")
SHAPE_CARDINALITIES = (3, 6, 40, 32, 32)
# Max half-extent of a shape as a fraction of the image side.
_EXTENT = 0.16


@dataclass(frozen=True)
class FactorSpec:
    names: tuple[str, ...] = SHAPE_FACTORS
    cardinalities: tuple[int, ...] = SHAPE_CARDINALITIES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if len(self.names) != len(self.cardinalities):
            raise ValueError("need one cardinality per factor name")
        if any(c < 1 for c in self.cardinalities):
            raise ValueError("factor cardinalities must be >= 1")

    @property
    def n_factors(self) -> int:
        return len(self.cardinalities)

    @property
    def size(self) -> int:
        return int(np.prod(self.cardinalities, dtype=np.int64))

    def to_factors(self, ordinals) -> np.ndarray:
        """Mixed-radix decode, last factor fastest. Returns ``(N, n_factors)``."""
        ordinals = np.asarray(ordinals, dtype=np.int64)
        if ordinals.size and (ordinals.min() < 0 or ordinals.max() >= self.size):
            raise IndexError("ordinal out of range")
        return np.stack(np.unravel_index(ordinals, self.cardinalities), axis=-1)

    def to_ordinals(self, factors) -> np.ndarray:
        factors = np.asarray(factors, dtype=np.int64)
        return np.ravel_multi_index(tuple(np.moveaxis(factors, -1, 0)), self.cardinalities)


def _factor_grid(n, lo, hi):
    return np.array([hi]) if n == 1 else np.linspace(lo, hi, n)


def _shape_membership(kind, u, v):
    if kind == 0:  # square
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if kind == 1:  # ellipse, 2:1 axes
        return u ** 2 + (v / 0.5) ** 2 <= 1.0
    # heart: implicit curve, flipped so the point faces +v (down the rows)
    x = 1.15 * u
    y = -1.15 * v + 0.1
    return (x ** 2 + y ** 2 - 1.0) ** 3 - x ** 2 * y ** 3 <= 0.0


class FactorDataset:
    """Binary shape images over the Cartesian product of generative factors.

    Images are rendered on demand; nothing is materialised until asked for,
    so the full 737,280-image grid costs no memory.
    """

    def __init__(self, spec: FactorSpec, resolution: int = 64, seed: int = 0,
                 scale_range=(0.5, 1.0)):
        self.spec = spec
        self.resolution = int(resolution)
        self.seed = seed
        n_shape, n_scale, n_orient, n_x, n_y = spec.cardinalities
        self._scales = _factor_grid(n_scale, *scale_range)
        self._angles = 2.0 * np.pi * np.arange(n_orient) / n_orient
        margin = _EXTENT * self.resolution
        self._pos_x = _factor_grid(n_x, margin, self.resolution - margin)
        self._pos_y = _factor_grid(n_y, margin, self.resolution - margin)
        if n_x == 1:
            self._pos_x = np.array([self.resolution / 2.0])
        if n_y == 1:
            self._pos_y = np.array([self.resolution / 2.0])
        centre = np.arange(self.resolution, dtype=np.float32) + 0.5
        self._grid_y, self._grid_x = np.meshgrid(centre, centre, indexing="ij")
        # float32 rasterization is ~2x cheaper and resolves the same edges
        for name in ("_scales", "_angles", "_pos_x", "_pos_y"):
            setattr(self, name, getattr(self, name).astype(np.float32))

    def __len__(self):
        return self.spec.size

    def __getitem__(self, ordinal):
        return self.images([ordinal])[0]

    @property
    def n_factors(self):
        return self.spec.n_factors

    def render(self, factors) -> np.ndarray:
        """Render ``(N, 5)`` factor tuples into ``(N, R, R, 1)`` binary images."""
        factors = np.atleast_2d(np.asarray(factors, dtype=np.int64))
        out = np.zeros((len(factors), self.resolution, self.resolution), dtype=np.float32)
        r = _EXTENT * self.resolution * self._scales[factors[:, 1]]
        th = self._angles[factors[:, 2]]
        cx = self._pos_x[factors[:, 3]]
        cy = self._pos_y[factors[:, 4]]
        dx = self._grid_x[None] - cx[:, None, None]
        dy = self._grid_y[None] - cy[:, None, None]
        cos, sin = np.cos(th)[:, None, None], np.sin(th)[:, None, None]
        u = (cos * dx + sin * dy) / r[:, None, None]
        v = (-sin * dx + cos * dy) / r[:, None, None]
        for kind in range(3):
            sel = factors[:, 0] == kind
            if sel.any():
                out[sel] = _shape_membership(kind, u[sel], v[sel])
        return out[..., None]

    def images(self, ordinals) -> np.ndarray:
        return self.render(self.spec.to_factors(ordinals))

    def factors(self, ordinals) -> np.ndarray:
        return self.spec.to_factors(ordinals)

    def random_ordinals(self, n, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        if n >= len(self):
            return np.arange(len(self))
        return np.sort(rng.choice(len(self), size=n, replace=False))

    def sample_factors(self, n, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        return np.stack([rng.integers(0, c, size=n) for c in self.spec.cardinalities], axis=-1)

    def sample_fixed(self, n, factor_index, rng):
        """Draw ``n`` images sharing one random value of ``factor_index``."""
        rng = np.random.default_rng(rng)
        factors = self.sample_factors(n, rng)
        factors[:, factor_index] = rng.integers(0, self.spec.cardinalities[factor_index])
        return self.render(factors), factors


def gen_shapes_dataset(cardinalities: Sequence[int] = SHAPE_CARDINALITIES,
                       resolution: int = 64, seed: int = 0,
                       scale_range=(0.5, 1.0)) -> FactorDataset:
    """Build the shapes factor grid after checking every shape renders.

    ``scale_range`` gives the smallest and largest shape size relative to the
    default extent.
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ValueError("scale_range must satisfy 0 < min <= max")
    spec = FactorSpec(SHAPE_FACTORS, tuple(cardinalities))
    ds = FactorDataset(spec, resolution, seed, scale_range)
    # smallest scale, every shape and orientation, centred: must be visible
    probe = np.array([(s, 0, o, 0, 0)
                      for s in range(spec.cardinalities[0])
                      for o in range(spec.cardinalities[2])])
    areas = ds.render(probe).sum(axis=(1, 2, 3))
    if (areas == 0).any():
        raise DegenerateRenderError(
            f"shape {tuple(probe[np.argmin(areas)])} renders empty at {resolution}px"
        )
    return ds


# ---------------------------------------------------------------------------
# Synthetic one-class defect textures

DEFECT_KINDS = ("blob", "scratch", "occlusion")


def _texture(rng, shape, sigma, contrast):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    noise = (noise - noise.mean()) / (noise.std() + 1e-12)
    return np.clip(0.5 + contrast * noise, 0.0, 1.0)


def _ellipse_mask(rng, h, w, area_band):
    lo, hi = area_band
    for _ in range(1000):
        target = rng.uniform(lo, hi) * h * w
        ratio = rng.uniform(0.5, 1.0)
        a = np.sqrt(target / (np.pi * ratio))
        b = a * ratio
        if a >= min(h, w) / 2 - 1:
            continue
        cy = rng.uniform(a + 1, h - a - 1)
        cx = rng.uniform(a + 1, w - a - 1)
        th = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        dx, dy = xx - cx, yy - cy
        u = np.cos(th) * dx + np.sin(th) * dy
        v = -np.sin(th) * dx + np.cos(th) * dy
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask
    raise ValueError(f"cannot place a blob with area fraction in {area_band}")


def _scratch_mask(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    length = rng.uniform(0.3, 0.6) * min(h, w)
    th = rng.uniform(0, np.pi)
    d = np.array([np.cos(th), np.sin(th)])
    half = 0.5 * length * np.abs(d)
    cx = rng.uniform(half[0] + 1, w - half[0] - 1)
    cy = rng.uniform(half[1] + 1, h - half[1] - 1)
    px, py = xx - cx, yy - cy
    t = np.clip(px * d[0] + py * d[1], -length / 2, length / 2)
    dist = np.hypot(px - t * d[0], py - t * d[1])
    return dist <= rng.uniform(0.8, 1.5)


def _occlusion_mask(rng, h, w, area_band):
    area = rng.uniform(*area_band) * h * w
    aspect = rng.uniform(0.5, 2.0)
    rh = int(np.clip(round(np.sqrt(area / aspect)), 1, h - 2))
    rw = int(np.clip(round(area / rh), 1, w - 2))
    y0 = rng.integers(0, h - rh)
    x0 = rng.integers(0, w - rw)
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y0 + rh, x0:x0 + rw] = True
    return mask


def _insert_defect(rng, img, kind, area_band, strength, polarity):
    h, w = img.shape
    sign = {"bright": 1.0, "dark": -1.0}.get(polarity) or rng.choice([-1.0, 1.0])
    if kind == "blob":
        mask = _ellipse_mask(rng, h, w, area_band)
        patch = img + sign * rng.uniform(*strength)
    elif kind == "scratch":
        mask = _scratch_mask(rng, h, w)
        patch = np.full_like(img, 0.5 + sign * 0.45)
    elif kind == "occlusion":
        mask = _occlusion_mask(rng, h, w, area_band)
        patch = np.full_like(img, rng.uniform(0.0, 1.0))
    else:
        raise ValueError(f"unknown defect kind {kind!r}; expected one of {DEFECT_KINDS}")
    out = img.copy()
    out[mask] = np.clip(patch[mask], 0.0, 1.0)
    # a pixel only belongs to the mask if inserting the defect changed it
    mask &= out != img
    return out, mask


def gen_defect_dataset(n_normal: int, n_abnormal: int, resolution: int = 64,
                       defect_kind: str = "blob", seed: int = 0, *,
                       n_test_normal: int = 0, area_band=(0.01, 0.06),
                       texture_sigma: float = 2.0, contrast: float = 0.15,
                       strength=(0.1, 0.2), polarity: str = "both",
                       category: str | None = None):
    """Normal-only training textures and a defect test split with exact masks."""
    if n_normal < 1 or n_abnormal < 1:
        raise ValueError("n_normal and n_abnormal must be >= 1")
    if defect_kind not in DEFECT_KINDS:
        raise ValueError(f"unknown defect kind {defect_kind!r}; expected one of {DEFECT_KINDS}")
    lo, hi = area_band
    if not 0 < lo <= hi < 1:
        raise ValueError("area_band must satisfy 0 < min <= max < 1")
    category = category or f"synthetic_{defect_kind}"
    rng = np.random.default_rng(seed)
    shape = (resolution, resolution)

    train = [ImageSample(_texture(rng, shape, texture_sigma, contrast), None, "normal",
                         f"train/good/{i:04d}")
             for i in range(n_normal)]
    test = []
    for i in range(n_abnormal):
        for _ in range(100):
            img, mask = _insert_defect(rng, _texture(rng, shape, texture_sigma, contrast),
                                       defect_kind, area_band, strength, polarity)
            if mask.any():
                break
        test.append(ImageSample(img, mask, "abnormal", f"test/{defect_kind}/{i:04d}",
                                defect_kind))
    for i in range(n_test_normal):
        test.append(ImageSample(_texture(rng, shape, texture_sigma, contrast),
                                np.zeros(shape, np.uint8), "normal", f"test/good/{i:04d}"))
    return (DatasetManifest("train", train, category, shape),
            DatasetManifest("test", test, category, shape))


# ---------------------------------------------------------------------------
# Stroke-rendered digits (MNIST-format stand-in)

_SEGMENTS = {
    "top": ((0.3, 0.2), (0.7, 0.2)),
    "mid": ((0.3, 0.5), (0.7, 0.5)),
    "bot": ((0.3, 0.8), (0.7, 0.8)),
    "ul": ((0.3, 0.2), (0.3, 0.5)),
    "ur": ((0.7, 0.2), (0.7, 0.5)),
    "ll": ((0.3, 0.5), (0.3, 0.8)),
    "lr": ((0.7, 0.5), (0.7, 0.8)),
    "stem": ((0.5, 0.2), (0.5, 0.8)),
    "diag": ((0.7, 0.2), (0.42, 0.8)),
}
_DIGIT_STROKES = {
    0: ("top", "bot", "ul", "ur", "ll", "lr"),
    1: ("stem",),
    2: ("top", "ur", "mid", "ll", "bot"),
    3: ("top", "ur", "mid", "lr", "bot"),
    4: ("ul", "ur", "mid", "lr"),
    5: ("top", "ul", "mid", "lr", "bot"),
    6: ("top", "ul", "mid", "ll", "lr", "bot"),
    7: ("top", "diag"),
    8: ("top", "mid", "bot", "ul", "ur", "ll", "lr"),
    9: ("top", "ul", "ur", "mid", "lr", "bot"),
}


def render_digits(labels: Iterable[int], resolution: int = 28, seed: int = 0) -> np.ndarray:
    """Jittered stroke digits as uint8 ``(N, R, R)`` arrays, IDX-ready."""
    rng = np.random.default_rng(seed)
    labels = list(labels)
    centre = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(centre, centre, indexing="ij")
    out = np.zeros((len(labels), resolution, resolution), dtype=np.uint8)
    for n, digit in enumerate(labels):
        shift = rng.uniform(-0.05, 0.05, size=2)
        slant = rng.uniform(-0.1, 0.1)
        width = rng.uniform(0.05, 0.08)
        img = np.zeros((resolution, resolution))
        for name in _DIGIT_STROKES[int(digit)]:
            (x0, y0), (x1, y1) = _SEGMENTS[name]
            p0 = np.array([x0 + slant * (0.5 - y0), y0]) + shift
            p1 = np.array([x1 + slant * (0.5 - y1), y1]) + shift
            d = p1 - p0
            t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
            dist = np.hypot(xx - p0[0] - t * d[0], yy - p0[1] - t * d[1])
            img = np.maximum(img, np.clip(1.5 - dist / width, 0.0, 1.0))
        out[n] = np.round(255 * np.clip(img, 0, 1)).astype(np.uint8)
    return out


def gen_digit_dataset(n_per_class: int, classes: Sequence[int] = tuple(range(10)),
                      resolution: int = 28, seed: int = 0, split: str = "train"):
    labels = [c for c in classes for _ in range(n_per_class)]
    pixels = render_digits(labels, resolution, seed) / np.float32(255.0)
    samples = [ImageSample(p, None, int(c), f"{split}/{c}/{i:05d}")
               for i, (p, c) in enumerate(zip(pixels, labels))]
    return DatasetManifest(split, samples, "digits", (resolution, resolution))


# ---------------------------------------------------------------------------
# IDX byte format

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expected_magic):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < count:
        raise FormatError(f"{path}: truncated payload ({len(data) - header} of {count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array in IDX layout (magic ``0x000008<ndim>``)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx_images(images_path, labels_path=None, split="test", category="idx") -> DatasetManifest:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    pixels = images.astype(np.float32) / np.float32(255.0)
    samples = [ImageSample(p, None, int(labels[i]) if labels is not None else "normal",
                           f"{Path(images_path).name}:{i}")
               for i, p in enumerate(pixels)]
    return DatasetManifest(split, samples, category, tuple(images.shape[1:3]))


# ---------------------------------------------------------------------------
# Folder trees: root/category/{train/good, test/<defect>, ground_truth/<defect>}

def _read_image(path, channels):
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float32) / np.float32(255.0)
    return arr[..., None] if arr.ndim == 2 else arr


def _read_mask(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def _list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _find_mask(gt_dir, stem, suffix):
    for ext in IMAGE_EXTENSIONS:
        candidate = gt_dir / f"{stem}{suffix}{ext}"
        if candidate.exists():
            return candidate
    return None


def load_folder_dataset(root, category, *, size=None, channels=1, mask_suffix="_mask"):
    """Load one category of an MVTec-style tree as ``(train, test)`` manifests.

    ``size`` resizes images bilinearly and masks by nearest neighbour.
    """
    base = Path(root) / category
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise FileNotFoundError(f"{base} lacks train/good or test directories")

    def finish(sample):
        if size is None:
            return sample
        return resize(sample, size[0], size[1])

    train = [finish(ImageSample(_read_image(p, channels), None, "normal", f"train/good/{p.stem}"))
             for p in _list_images(train_dir)]

    test, unpaired = [], []
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        defect = defect_dir.name
        for p in _list_images(defect_dir):
            pixels = _read_image(p, channels)
            if defect == "good":
                mask, label = np.zeros(pixels.shape[:2], np.uint8), "normal"
            else:
                mpath = _find_mask(base / "ground_truth" / defect, p.stem, mask_suffix)
                if mpath is None:
                    unpaired.append(str(p))
                    continue
                mask, label = _read_mask(mpath), "abnormal"
            test.append(finish(ImageSample(pixels, mask, label, f"test/{defect}/{p.stem}",
                                           None if defect == "good" else defect)))
    if unpaired:
        raise PairingError("no ground-truth mask for: " + ", ".join(unpaired))
    res = tuple(size) if size is not None else None
    return (DatasetManifest("train", train, category, res),
            DatasetManifest("test", test, category, res))


def _to_png(pixels):
    arr = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    return Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)


def export_folder_dataset(root, train: DatasetManifest, test: DatasetManifest, category=None):
    """Write manifests as an MVTec-style tree; returns the category directory."""
    category = category or train.category or test.category
    base = Path(root) / category
    (base / "train" / "good").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(train):
        _to_png(s.pixels).save(base / "train" / "good" / f"{i:04d}.png")
    for i, s in enumerate(test):
        defect = s.defect if s.label == "abnormal" else "good"
        defect = defect or "defect"
        (base / "test" / defect).mkdir(parents=True, exist_ok=True)
        _to_png(s.pixels).save(base / "test" / defect / f"{i:04d}.png")
        if defect != "good":
            (base / "ground_truth" / defect).mkdir(parents=True, exist_ok=True)
            Image.fromarray(s.mask * np.uint8(255)).save(
                base / "ground_truth" / defect / f"{i:04d}_mask.png")
    return base


# ---------------------------------------------------------------------------
# Augmentation and resizing

def augment_pixels(px, rng, *, rotations=(0, 90, 180, 270), mirror_prob=0.5,
                   arbitrary=False):
    """Mirror/rotate one ``(H, W, C)`` array using draws from ``rng``."""
    if rng.random() < mirror_prob:
        px = px[:, ::-1]
    angle = float(rotations[rng.integers(len(rotations))]) if len(rotations) else 0.0
    if angle % 90 == 0:
        px = np.rot90(px, k=int(angle // 90) % 4, axes=(0, 1))
    elif arbitrary:
        px = np.clip(ndimage.rotate(px, angle, axes=(1, 0), reshape=False, order=1,
                                    mode="reflect"), 0.0, 1.0)
    else:
        raise ValueError(f"rotation {angle} is not a multiple of 90; pass arbitrary=True")
    return np.ascontiguousarray(px)


def augment(sample: ImageSample, seed, *, rotations=(0, 90, 180, 270),
            mirror_prob=0.5, arbitrary=False) -> ImageSample:
    """Random horizontal mirror and rotation, fully determined by ``seed``.

    Right-angle rotations are exact; with ``arbitrary=True`` the angle set may
    hold any values and pixels are resampled with reflection padding.
    """
    if sample.mask is not None:
        raise ValueError("augment is for training samples, which carry no mask")
    px = augment_pixels(sample.pixels, np.random.default_rng(seed), rotations=rotations,
                        mirror_prob=mirror_prob, arbitrary=arbitrary)
    return ImageSample(px, None, sample.label, sample.source_id, sample.defect)


def resize_array(pixels, h, w, method="bilinear"):
    """Resize ``(H, W, C)`` pixels; bilinear output is clipped to [0, 1]."""
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.shape[:2] == (h, w):
        return pixels
    t = torch.from_numpy(np.ascontiguousarray(np.moveaxis(pixels, -1, 0)))[None]
    if method == "nearest":
        t = F.interpolate(t, size=(h, w), mode="nearest")
    elif method == "bilinear":
        t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    else:
        raise ValueError(f"unknown resize method {method!r}")
    return np.clip(np.moveaxis(t[0].numpy(), 0, -1), 0.0, 1.0)


def resize(sample: ImageSample, h: int, w: int, method="bilinear") -> ImageSample:
    if sample.pixels.shape[:2] == (h, w):
        return sample
    mask = None
    if sample.mask is not None:
        mask = resize_array(sample.mask[..., None].astype(np.float32), h, w, "nearest")
        mask = mask[..., 0].astype(np.uint8)
    return ImageSample(resize_array(sample.pixels, h, w, method), mask, sample.label,
                       sample.source_id, sample.defect)

