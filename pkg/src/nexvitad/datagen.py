"""Procedural multi-class texture corpus with injected defects.

Twelve parameterised texture families stand in for industrial product
classes. Every sample is a pure function of ``(master seed, class id,
index, split)`` and pixel values are quantised to 8 bits so a PNG round trip
is lossless.
"""

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, ParameterError

N_CLASSES = 12
DEFECT_KINDS = ("scratch", "blob", "patch_swap")
CLASS_NAMES = (
    "stripes", "checker", "blobnoise", "woodgrain", "dots", "brick",
    "hatch", "weave", "grain", "cells", "plaid", "zigzag",
)

# two endpoint colours per class; the pattern field blends between them
_PALETTES = np.array([
    [[0.85, 0.20, 0.15], [0.95, 0.55, 0.40]],
    [[0.10, 0.15, 0.45], [0.35, 0.45, 0.85]],
    [[0.15, 0.45, 0.15], [0.45, 0.75, 0.30]],
    [[0.45, 0.28, 0.12], [0.75, 0.52, 0.28]],
    [[0.80, 0.80, 0.75], [0.45, 0.40, 0.35]],
    [[0.60, 0.20, 0.45], [0.85, 0.60, 0.75]],
    [[0.20, 0.55, 0.60], [0.05, 0.25, 0.30]],
    [[0.90, 0.80, 0.25], [0.60, 0.45, 0.05]],
    [[0.30, 0.30, 0.30], [0.55, 0.55, 0.55]],
    [[0.50, 0.70, 0.90], [0.20, 0.35, 0.65]],
    [[0.70, 0.35, 0.10], [0.30, 0.10, 0.05]],
    [[0.40, 0.85, 0.65], [0.10, 0.50, 0.35]],
])


@dataclass
class ImageSample:
    image: np.ndarray
    mask: np.ndarray | None
    class_id: int
    split: str
    is_defective: bool
    index: int = 0
    defect_kind: str | None = None

    def __post_init__(self):
        if self.mask is not None and bool(self.mask.any()) != self.is_defective:
            raise DataError("is_defective disagrees with the mask")


@dataclass
class TargetImage:
    """A target-domain training image; it has no mask attribute by design."""

    image: np.ndarray
    class_id: int
    index: int


@dataclass
class SplitConfig:
    source_classes: tuple
    target_classes: tuple
    seed: int = 0
    n_classes: int = N_CLASSES

    def __post_init__(self):
        self.source_classes = tuple(sorted(int(c) for c in self.source_classes))
        self.target_classes = tuple(sorted(int(c) for c in self.target_classes))

    @classmethod
    def random(cls, n_source, n_classes=N_CLASSES, seed=0):
        """Randomly choose ``n_source`` source classes; the rest are targets."""
        perm = np.random.default_rng(seed).permutation(n_classes)
        return cls(tuple(perm[:n_source]), tuple(perm[n_source:]), seed, n_classes)

    @property
    def label(self):
        return f"{len(self.source_classes)}/{len(self.target_classes)}"

    def validate(self):
        s, t = set(self.source_classes), set(self.target_classes)
        if s & t:
            raise ParameterError(f"source and target classes overlap: {sorted(s & t)}")
        if s | t != set(range(self.n_classes)) or len(s) + len(t) != self.n_classes:
            raise ParameterError(f"split must partition {self.n_classes} classes, got {sorted(s)} / {sorted(t)}")
        if not s or not t:
            raise ParameterError("split needs at least one source and one target class")

    def to_dict(self):
        return {"source_classes": list(self.source_classes), "target_classes": list(self.target_classes),
                "seed": self.seed, "n_classes": self.n_classes}


@dataclass
class DomainDataset:
    samples: list
    size: int
    seed: int
    split_config: SplitConfig | None = None

    def by_class(self, class_id, split=None):
        return [s for s in self.samples if s.class_id == class_id and (split is None or s.split == split)]


@dataclass
class DomainSplit:
    source: list
    target_train: list
    target_test: list
    bank: dict = field(default_factory=dict)
    config: SplitConfig | None = None

    @property
    def normal_bank_candidates(self):
        return [im for c in sorted(self.bank) for im in self.bank[c]]


# --------------------------------------------------------------------------
# texture families


def _child_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def _smooth_noise(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _pattern(class_id, rng, size):
    """Scalar field in [0, 1] for one texture family (size-relative geometry)."""
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    if class_id == 0:  # stripes
        th = rng.normal(0, 0.08)
        period = rng.uniform(7.0, 9.0) * s
        f = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / period + phase)
    elif class_id == 1:  # checker
        cell = rng.uniform(7.0, 9.0) * s
        ox, oy = rng.uniform(0, cell, 2)
        f = ((np.floor((xx + ox) / cell) + np.floor((yy + oy) / cell)) % 2).astype(float)
        f = ndimage.gaussian_filter(f, 0.7 * s)
    elif class_id == 2:  # blob noise
        f = 0.5 + 0.25 * _smooth_noise(rng, size, 3.0 * s)
    elif class_id == 3:  # wood grain: distorted rings around a far centre
        cx, cy = rng.uniform(-2 * size, -size), rng.uniform(0, size)
        r = np.hypot(xx - cx, yy - cy) + 4.0 * s * _smooth_noise(rng, size, 6.0 * s)
        f = 0.5 + 0.5 * np.sin(2 * np.pi * r / (rng.uniform(5.0, 7.0) * s) + phase)
    elif class_id == 4:  # dot grid
        sp = rng.uniform(9.0, 11.0) * s
        ox, oy = rng.uniform(0, sp, 2)
        dx = (xx + ox) % sp - sp / 2
        dy = (yy + oy) % sp - sp / 2
        f = np.exp(-(dx ** 2 + dy ** 2) / (2 * (0.22 * sp) ** 2))
    elif class_id == 5:  # brick
        bh = rng.uniform(7.0, 9.0) * s
        bw = 2.2 * bh
        oy = rng.uniform(0, bh)
        row = np.floor((yy + oy) / bh)
        ox = rng.uniform(0, bw) + (row % 2) * bw / 2
        edge = np.minimum((yy + oy) % bh, ((xx + ox) % bw))
        f = (edge > 1.5 * s).astype(float)
        f = ndimage.gaussian_filter(f, 0.6 * s)
    elif class_id == 6:  # cross hatch
        p = rng.uniform(6.0, 8.0) * s
        f = 0.25 * (2 + np.sin(2 * np.pi * (xx + yy) / p + phase) + np.sin(2 * np.pi * (xx - yy) / p - phase))
    elif class_id == 7:  # weave: alternating horizontal / vertical threads
        p = rng.uniform(7.0, 9.0) * s
        ox, oy = rng.uniform(0, 2 * p, 2)
        block = (np.floor((xx + ox) / p) + np.floor((yy + oy) / p)) % 2
        thread_h = 0.5 + 0.5 * np.sin(2 * np.pi * (yy + oy) / (p / 2))
        thread_v = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + ox) / (p / 2))
        f = np.where(block == 0, thread_h, thread_v)
    elif class_id == 8:  # fine grain over slow shading
        f = 0.5 + 0.18 * _smooth_noise(rng, size, 0.8 * s) + 0.12 * _smooth_noise(rng, size, 8.0 * s)
    elif class_id == 9:  # cells: distance to scattered seeds
        n = int(rng.integers(14, 20))
        pts = rng.uniform(0, size, (n, 2))
        d = np.full((size, size), np.inf)
        for py, px in pts:
            for oy in (-size, 0, size):
                for ox in (-size, 0, size):
                    d = np.minimum(d, np.hypot(yy - py - oy, xx - px - ox))
        f = np.clip(d / (size / np.sqrt(n) * 0.7), 0, 1)
    elif class_id == 10:  # plaid
        p1, p2 = rng.uniform(10, 14) * s, rng.uniform(5, 7) * s
        f = 0.25 * (2 + np.sign(np.sin(2 * np.pi * xx / p1 + phase)) * 0.6 + np.sin(2 * np.pi * yy / p2) * 0.8
                    + 0.4 * np.sin(2 * np.pi * (xx + yy) / (3 * p2)))
    elif class_id == 11:  # zigzag triangle wave
        p = rng.uniform(9.0, 11.0) * s
        amp = rng.uniform(3.0, 5.0) * s
        tri = np.abs(((xx / p + phase) % 1.0) - 0.5) * 2 * amp
        f = 0.5 + 0.5 * np.sin(2 * np.pi * (yy + tri) / (rng.uniform(6.0, 8.0) * s))
    else:
        raise ParameterError(f"unknown class_id {class_id}")
    return np.clip(f, 0.0, 1.0)


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_texture(class_id, rng, size):
    """One normal image of the given family, ``(size, size, 3)`` in [0, 1]."""
    f = _pattern(class_id, rng, size)
    c1, c2 = _PALETTES[class_id] + rng.normal(0, 0.015, (2, 3))
    img = c1 * (1 - f[..., None]) + c2 * f[..., None]
    img = img * rng.uniform(0.95, 1.05) + rng.normal(0, 0.015, img.shape)
    return _quantize(img)


# --------------------------------------------------------------------------
# defects


def _shift_region(image, region, delta):
    """Push every channel by ``delta`` (> 0), reflecting away from 1 so each pixel changes."""
    out = image.copy()
    sub = image[region]
    up = sub + delta
    out[region] = np.where(up <= 1.0, up, sub - delta)
    return _quantize_changed(image, out, region)


def _quantize_changed(orig, new, region):
    q = _quantize(new)
    # quantisation must not round a change back to the original value
    same = np.all(q == orig, axis=-1) & region
    if same.any():
        q[same] = _quantize(np.where(orig[same] < 0.5, orig[same] + 2 / 255, orig[same] - 2 / 255))
    return q


# defect geometry in pixels at 64x64, scaled with image size; every kind
# stays between 0.5% and 10% of the image area
BLOB_RADIUS = (8.5, 11.0)
SCRATCH_LENGTH = (36.0, 48.0)
SCRATCH_WIDTH = (5.0, 7.0)
PATCH_SIDE = (15.0, 20.0)


def _disk(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def inject_defect(sample, kind, seed, radius=None):
    """Return a defective copy of a normal ``sample`` and its exact mask."""
    if sample.is_defective:
        raise ParameterError("defects are injected into normal samples only")
    if kind not in DEFECT_KINDS:
        raise ParameterError(f"unknown defect kind {kind!r}")
    img = sample.image
    size = img.shape[0]
    s = size / 64.0
    rng = _child_rng(seed, 7, sample.class_id, sample.index, DEFECT_KINDS.index(kind))
    if kind == "blob":
        r = rng.uniform(*BLOB_RADIUS) * s if radius is None else float(radius)
        m = int(np.ceil(r)) + 1
        cy, cx = rng.uniform(m, size - m, 2)
        region = _disk(size, cy, cx, r)
        delta = rng.uniform(0.25, 0.4, 3)
        delta[rng.integers(3)] = rng.uniform(0.4, 0.5)
        new = _shift_region(img, region, delta)
    elif kind == "scratch":
        length = rng.uniform(*SCRATCH_LENGTH) * s
        width = rng.uniform(*SCRATCH_WIDTH) * s
        ang = rng.uniform(0, np.pi)
        dy, dx = np.sin(ang), np.cos(ang)
        ext_y = abs(dy) * length / 2 + abs(dx) * width / 2 + 1
        ext_x = abs(dx) * length / 2 + abs(dy) * width / 2 + 1
        cy = rng.uniform(ext_y, size - ext_y)
        cx = rng.uniform(ext_x, size - ext_x)
        yy, xx = np.mgrid[0:size, 0:size].astype(float)
        along = (yy - cy) * dy + (xx - cx) * dx
        across = -(yy - cy) * dx + (xx - cx) * dy
        region = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
        delta = (rng.uniform(0.35, 0.45) + rng.uniform(0, 0.08, img.shape))[region]
        out = img.copy()
        sub = img[region]
        up = sub + delta
        out[region] = np.where(up <= 1.0, up, sub - delta)
        new = _quantize_changed(img, out, region)
    else:  # patch_swap: a transposed patch from elsewhere, contrast-shifted
        side = int(round(rng.uniform(*PATCH_SIDE) * s))
        y0, x0 = rng.integers(1, size - side - 1, 2)
        while True:
            y1, x1 = rng.integers(0, size - side, 2)
            if abs(int(y1) - int(y0)) >= side or abs(int(x1) - int(x0)) >= side:
                break
        region = np.zeros((size, size), dtype=bool)
        region[y0:y0 + side, x0:x0 + side] = True
        swapped = img.copy()
        swapped[y0:y0 + side, x0:x0 + side] = img[y1:y1 + side, x1:x1 + side].transpose(1, 0, 2)[::-1]
        delta = rng.uniform(0.18, 0.28, 3)
        up = swapped[region] + delta
        out = img.copy()
        out[region] = np.where(up <= 1.0, up, swapped[region] - delta)
        new = _quantize_changed(img, out, region)
    mask = np.any(new != img, axis=-1).astype(np.uint8)
    return ImageSample(new, mask, sample.class_id, sample.split, True, sample.index, kind)


# --------------------------------------------------------------------------
# corpus


def synth_class(class_id, seed, n_train, n_test, size=64, train_defect_fraction=0.0, test_defect_fraction=0.5):
    """Generate ``n_train + n_test`` samples for one texture class.

    Defective samples cycle through the defect kinds. Pass
    ``train_defect_fraction=0`` for target classes so their training split
    is entirely normal.
    """
    if not 0 <= class_id < N_CLASSES:
        raise ParameterError(f"unknown class_id {class_id}; valid ids are 0..{N_CLASSES - 1}")
    if size < 32:
        raise ParameterError(f"image size must be >= 32, got {size}")
    out = []
    for split, n, frac, code in (("train", n_train, train_defect_fraction, 0), ("test", n_test, test_defect_fraction, 1)):
        n_def = int(round(n * frac))
        for i in range(n):
            rng = _child_rng(seed, class_id, code, i)
            img = render_texture(class_id, rng, size)
            sample = ImageSample(img, np.zeros((size, size), np.uint8), class_id, split, False, i)
            # defective samples are spread evenly through the index range
            if n_def and (i * n_def) // n != ((i + 1) * n_def) // n:
                kind = DEFECT_KINDS[((i * n_def) // n) % len(DEFECT_KINDS)]
                sample = inject_defect(sample, kind, int(_child_rng(seed, class_id, code, i, 99).integers(2**31)))
            out.append(sample)
    return out


def synth_dataset(split_config, n_train=40, n_test=20, size=64, source_train_defect_fraction=0.5,
                  test_defect_fraction=0.5):
    """All classes of ``split_config``; target-class training images are normal."""
    split_config.validate()
    samples = []
    for c in range(split_config.n_classes):
        frac = source_train_defect_fraction if c in split_config.source_classes else 0.0
        samples += synth_class(c, split_config.seed, n_train, n_test, size, frac, test_defect_fraction)
    return DomainDataset(samples, size, split_config.seed, split_config)


def make_split(dataset, config, n_bank=10):
    """Partition ``dataset`` into source / target-train / target-test / bank images."""
    config.validate()
    source = [s for s in dataset.samples if s.class_id in config.source_classes and s.split == "train"]
    target_train, target_test, bank = [], [], {}
    for c in config.target_classes:
        train = [s for s in dataset.samples if s.class_id == c and s.split == "train"]
        if any(s.is_defective for s in train):
            raise DataError(f"target class {c} has defective training images")
        target_train += [TargetImage(s.image, s.class_id, s.index) for s in train]
        target_test += [s for s in dataset.samples if s.class_id == c and s.split == "test"]
        if n_bank > len(train):
            raise ParameterError(f"bank needs {n_bank} normal images, class {c} has {len(train)}")
        pick = np.sort(_child_rng(config.seed, 31, c).permutation(len(train))[:n_bank])
        bank[c] = [train[i].image for i in pick]
    return DomainSplit(source, target_train, target_test, bank, config)


# --------------------------------------------------------------------------
# on-disk layout


def _to_png(arr, path):
    a = np.asarray(arr)
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)).save(path)


def _from_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_dataset(dataset, out_dir):
    """Write class directories of PNGs plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    cfg = dataset.split_config
    records = []
    for s in dataset.samples:
        d = out / f"class_{s.class_id:02d}" / s.split
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{s.index:04d}"
        _to_png(s.image, d / f"{stem}.png")
        target = cfg is not None and s.class_id in cfg.target_classes
        rec = {"path": str((d / f"{stem}.png").relative_to(out)), "class_id": s.class_id, "split": s.split,
               "is_defective": bool(s.is_defective), "index": s.index,
               "domain": "target" if target else "source"}
        if s.defect_kind:
            rec["defect_kind"] = s.defect_kind
        # target-domain training images never carry a mask on disk
        if not (target and s.split == "train"):
            _to_png(s.mask.astype(float), d / f"{stem}_mask.png")
            rec["mask_path"] = str((d / f"{stem}_mask.png").relative_to(out))
        records.append(rec)
    header = {"kind": "nexvitad-dataset", "size": dataset.size, "seed": dataset.seed,
              "split": cfg.to_dict() if cfg else None, "split_label": cfg.label if cfg else None}
    path = out / "manifest.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("kind") != "nexvitad-dataset":
        raise DataError(f"{path} is not a dataset manifest")
    return header, [json.loads(line) for line in lines[1:] if line.strip()]


def load_dataset(path):
    """Inverse of :func:`save_dataset`."""
    path = Path(path)
    header, records = read_manifest(path)
    root = path.parent
    cfg = SplitConfig(**header["split"]) if header.get("split") else None
    samples = []
    for r in records:
        img = _from_png(root / r["path"])
        if "mask_path" in r:
            mask = (_from_png(root / r["mask_path"]) > 0.5).astype(np.uint8)
        else:
            mask = np.zeros(img.shape[:2], np.uint8)
        samples.append(ImageSample(img, mask, r["class_id"], r["split"], r["is_defective"], r["index"],
                                   r.get("defect_kind")))
    return DomainDataset(samples, header["size"], header["seed"], cfg)
