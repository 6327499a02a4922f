"""Dataset handling: ingestion, augmentation transforms, preprocessing and a
synthetic furnace-scene generator with ground-truth highlight masks.

Raw images live on the [0, 1] scale as (H, W, C) float arrays; augmentation
operates there.  preprocess() maps to the [-1, 1] scale the network consumes.
Masks are (H, W) arrays of {0, 1}.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DimensionError
from .numerics import RngStream, bilinear_resize

CLASS_NAMES = ("normal", "underburn", "overheating", "exhaust")


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray              # (H, W, C) float
    label: int
    mask: np.ndarray | None = None  # (H, W) {0,1}, optional annotation


@dataclass(frozen=True)
class Dataset:
    samples: tuple = field(default_factory=tuple)
    class_names: tuple = CLASS_NAMES
    split: str = "train"

    def __post_init__(self):
        if len(self.samples) == 0:
            raise DataError("dataset must contain at least one sample")
        shape = self.samples[0].image.shape
        m = len(self.class_names)
        for i, s in enumerate(self.samples):
            if s.image.shape != shape:
                raise DataError(
                    f"sample {i} has shape {s.image.shape}, expected {shape}")
            if not 0 <= s.label < m:
                raise DataError(f"sample {i} label {s.label} outside [0, {m})")
            if s.mask is not None and s.mask.shape != shape[:2]:
                raise DataError(
                    f"sample {i} mask shape {s.mask.shape} != image {shape[:2]}")

    def __len__(self):
        return len(self.samples)

    @property
    def n_classes(self):
        return len(self.class_names)

    def image_stack(self):
        """All images as one (N, H, W, C) array."""
        return np.stack([s.image for s in self.samples])

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def one_hot(self):
        y = np.zeros((len(self.samples), self.n_classes))
        y[np.arange(len(self.samples)), self.labels()] = 1.0
        return y


def flip_horizontal(img):
    """Mirror the image left-right: out(x, y) = in(w-x-1, y)."""
    return np.asarray(img)[:, ::-1, :].copy()


def adjust_contrast(img):
    """Contrast/brightness push on [0,1] images: 1.5*(v-0.5)+0.5, clamped."""
    return np.clip(1.5 * (np.asarray(img, dtype=np.float64) - 0.5) + 0.5, 0.0, 1.0)


def add_gaussian_noise(img, eta, rng):
    """Add N(0, eta^2) pixel noise (Box-Muller draws), clamped to [0,1]."""
    if eta < 0:
        raise ConfigError(f"noise level must be >= 0, got {eta}")
    img = np.asarray(img, dtype=np.float64)
    if eta == 0:
        return img.copy()
    noise = rng.normals(img.size).reshape(img.shape)
    return np.clip(img + eta * noise, 0.0, 1.0)


def preprocess(img, crop, resize):
    """Center-crop to crop x crop, bilinear-resize to resize x resize,
    then map [0,1] -> [-1,1]."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    crop, resize = int(crop), int(resize)
    if crop > min(h, w):
        raise DimensionError(f"crop {crop} larger than image {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    window = img[top:top + crop, left:left + crop]
    out = np.stack(
        [bilinear_resize(window[:, :, c], resize, resize)
         for c in range(window.shape[2])], axis=2)
    return out * 2.0 - 1.0


def _preprocess_mask(mask, crop, resize):
    h, w = mask.shape
    top, left = (h - crop) // 2, (w - crop) // 2
    window = mask[top:top + crop, left:left + crop].astype(np.float64)
    if crop == resize:
        return (window > 0.5).astype(np.float64)
    return (bilinear_resize(window, resize, resize) > 0.5).astype(np.float64)


def preprocess_dataset(ds, crop=None, resize=None):
    """preprocess() every sample; masks follow the same crop/resize window."""
    h, w = ds.samples[0].image.shape[:2]
    crop = int(crop) if crop else min(h, w)
    resize = int(resize) if resize else crop
    out = []
    for s in ds.samples:
        mask = None if s.mask is None else _preprocess_mask(s.mask, crop, resize)
        out.append(LabeledSample(preprocess(s.image, crop, resize), s.label, mask))
    return Dataset(tuple(out), ds.class_names, ds.split)


def augment_dataset(ds, eta, rng):
    """Quadruple the dataset: original + flipped + contrast + noised variants.

    Variants are not composed with each other.  Flipping is geometric so the
    mask flips with it; contrast and noise are photometric and leave the
    annotated region untouched.
    """
    out = []
    for s in ds.samples:
        flipped_mask = None if s.mask is None else s.mask[:, ::-1].copy()
        out.append(s)
        out.append(LabeledSample(flip_horizontal(s.image), s.label, flipped_mask))
        out.append(LabeledSample(adjust_contrast(s.image), s.label, s.mask))
        out.append(LabeledSample(add_gaussian_noise(s.image, eta, rng), s.label, s.mask))
    return Dataset(tuple(out), ds.class_names, ds.split)


def _disk(size, cx, cy, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2


def _ellipse(size, cx, cy, ax, ay):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _rect(size, x0, x1, y0, y1):
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)


def generate_synthetic(n_per_class, size, rng, split="train"):
    """Four furnace-like working conditions on a dark noisy background.

    class 0 normal      - small centered bright blob
    class 1 underburn   - bright patch on the left wall
    class 2 overheating - large high-intensity centered blob
    class 3 exhaust     - vertical streak below center

    Mask marks the pixels of the generating bright region.  Geometry,
    intensity and background level are jittered per sample, with the
    intensity ranges of the classes deliberately overlapping so that no
    single global statistic separates them; deterministic per stream.
    """
    size = int(size)
    if size < 32:
        raise ConfigError(f"synthetic size must be >= 32, got {size}")
    samples = []
    for label in range(4):
        for _ in range(int(n_per_class)):
            bg = rng.uniform(0.08, 0.18)
            base = bg + 0.03 * rng.normals(size * size).reshape(size, size)
            jx = rng.uniform(-0.10, 0.10) * size
            jy = rng.uniform(-0.10, 0.10) * size
            if label == 0:
                region = _disk(size, 0.5 * size + jx, 0.5 * size + jy,
                               rng.uniform(0.06, 0.12) * size)
                level = rng.uniform(0.55, 0.85)
            elif label == 1:
                cy = 0.5 * size + rng.uniform(-0.2, 0.2) * size
                region = _ellipse(size, 0.13 * size + 0.5 * jx, cy,
                                  rng.uniform(0.06, 0.11) * size,
                                  rng.uniform(0.14, 0.24) * size)
                level = rng.uniform(0.6, 0.9)
            elif label == 2:
                region = _disk(size, 0.5 * size + jx, 0.5 * size + jy,
                               rng.uniform(0.17, 0.27) * size)
                level = rng.uniform(0.7, 0.98)
            else:
                x0 = 0.5 * size + jx - rng.uniform(0.02, 0.045) * size
                x1 = 0.5 * size + jx + rng.uniform(0.02, 0.045) * size
                region = _rect(size, x0, x1,
                               0.5 * size + jy + rng.uniform(0, 0.08) * size,
                               rng.uniform(0.85, 0.95) * size)
                level = rng.uniform(0.6, 0.9)
            texture = 0.05 * rng.normals(size * size).reshape(size, size)
            img = np.where(region, level + texture, base)
            img = np.clip(img, 0.0, 1.0)[:, :, None]
            samples.append(LabeledSample(img, label, region.astype(np.float64)))
    return Dataset(tuple(samples), CLASS_NAMES, split)


def _load_png(path):
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64)
    except OSError as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr / 255.0


def load_image_folder(root, split="train"):
    """Read root/<class>/*.png with optional root/<class>_mask/*.png masks.

    Class indices follow sorted class-directory order; mask pixels > 127
    count as annotated.  Missing mask directories or files simply leave
    mask=None on the affected samples.
    """
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(
        d for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d)) and not d.endswith("_mask"))
    if not class_dirs:
        raise DataError(f"no class subdirectories found under {root}")
    samples = []
    for label, name in enumerate(class_dirs):
        cdir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(cdir) if f.lower().endswith(".png"))
        if not files:
            raise DataError(f"class directory {cdir} contains no .png files")
        mask_dir = os.path.join(root, name + "_mask")
        for fname in files:
            img = _load_png(os.path.join(cdir, fname))
            mask = None
            mpath = os.path.join(mask_dir, fname)
            if os.path.isdir(mask_dir) and os.path.isfile(mpath):
                marr = _load_png(mpath)
                mask = (marr[:, :, 0] > 127.0 / 255.0).astype(np.float64)
                if mask.shape != img.shape[:2]:
                    raise DataError(
                        f"mask {mpath} has shape {mask.shape}, "
                        f"image is {img.shape[:2]}")
            samples.append(LabeledSample(img, label, mask))
    return Dataset(tuple(samples), tuple(class_dirs), split)


def write_dataset(ds, root):
    """Write PNGs in the load_image_folder layout (masks as 0/255 images)."""
    counters = {}
    for s in ds.samples:
        name = ds.class_names[s.label]
        idx = counters.get(name, 0)
        counters[name] = idx + 1
        cdir = os.path.join(root, name)
        os.makedirs(cdir, exist_ok=True)
        arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        if arr.shape[2] == 1:
            Image.fromarray(arr[:, :, 0], mode="L").save(
                os.path.join(cdir, f"{idx:05d}.png"))
        else:
            Image.fromarray(arr, mode="RGB").save(
                os.path.join(cdir, f"{idx:05d}.png"))
        if s.mask is not None:
            mdir = os.path.join(root, name + "_mask")
            os.makedirs(mdir, exist_ok=True)
            Image.fromarray((s.mask > 0.5).astype(np.uint8) * 255, mode="L").save(
                os.path.join(mdir, f"{idx:05d}.png"))
    return counters
