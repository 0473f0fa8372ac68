"""Attribute-labelled image datasets split into user / attacker / test parts.

Images are float32 arrays of shape (C, H, W) with values in [0, 1].  Every
sample carries a desired label ``y`` and a sensitive label ``z``.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, SchemaError, SizeError, SplitAccessError

DEFAULT_PROPORTIONS = (0.45, 0.40, 0.15)

_training = contextvars.ContextVar("splitguard_training", default=False)


@contextlib.contextmanager
def training_context():
    """Mark the enclosed code as training; guarded splits refuse to serve data inside it."""
    token = _training.set(True)
    try:
        yield
    finally:
        _training.reset(token)


def in_training_context() -> bool:
    return _training.get()


class Split:
    """An immutable collection of samples.

    ``guarded`` splits (the test split) raise :class:`SplitAccessError` when
    their data is read from inside :func:`training_context`.
    """

    def __init__(self, name, images, y, z, ids, guarded=False):
        self.name = name
        self._images = np.ascontiguousarray(images, dtype=np.float32)
        self._y = np.asarray(y, dtype=np.int64)
        self._z = np.asarray(z, dtype=np.int64)
        self._ids = np.asarray(ids)
        self.guarded = guarded
        for a in (self._images, self._y, self._z, self._ids):
            a.setflags(write=False)
        n = len(self._y)
        if not (len(self._images) == len(self._z) == len(self._ids) == n):
            raise ConfigError(f"split {name!r}: inconsistent lengths")

    def _check(self):
        if self.guarded and in_training_context():
            raise SplitAccessError(f"split {self.name!r} may not be read during training")

    @property
    def images(self):
        self._check()
        return self._images

    @property
    def y(self):
        self._check()
        return self._y

    @property
    def z(self):
        self._check()
        return self._z

    @property
    def ids(self):
        # identifiers are metadata, readable anywhere
        return self._ids

    def __len__(self):
        return len(self._y)

    def __repr__(self):
        return f"Split({self.name!r}, n={len(self)}, guarded={self.guarded})"


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    shape: tuple
    sizes: tuple


@dataclass(frozen=True)
class DatasetBundle:
    user_train: Split
    attacker_train: Split
    test: Split
    k_desired: int
    k_sensitive: int
    descriptor: DatasetDescriptor

    @property
    def splits(self):
        return {"user_train": self.user_train, "attacker_train": self.attacker_train, "test": self.test}

    @property
    def shape(self):
        return tuple(self.descriptor.shape)


# ---------------------------------------------------------------------------
# synthetic shapes

DESIRED_FACTORS = ("orientation", "shape")
MAX_ORIENTATIONS = 4
SHAPES = ("hbar", "vbar", "disk", "cross", "ring", "square", "triangle", "diamond")

# Chromatic offsets added to a grey level; every row sums to zero so hue never
# changes the channel sum.
HUE_OFFSETS = np.array(
    [
        [+2.0, -1.0, -1.0],  # red
        [-1.0, -1.0, +2.0],  # blue
        [-1.0, +2.0, -1.0],  # green
        [+1.0, +1.0, -2.0],  # yellow
        [+1.0, -2.0, +1.0],  # magenta
        [-2.0, +1.0, +1.0],  # cyan
    ],
    dtype=np.float64,
) / 3.0


@dataclass(frozen=True)
class SyntheticAttributeSpec:
    """Coloured geometry on a smooth random background.

    The desired label selects the geometry: the direction of a thick bar
    through the image centre (``desired_factor="orientation"``) or the outline
    of ``n_objects`` shapes (``"shape"``).  The foreground is always brighter
    than the background, so the desired label moves mean luminance around the
    image.  The sensitive label selects the hue of the foreground.
    Hue offsets sum to zero over channels, so luma carries no hue.
    ``correlation`` is the probability that ``z`` is copied from ``y``
    (mod ``k_sensitive``) instead of drawn independently.
    """

    image_size: int = 32
    k_desired: int = 2
    k_sensitive: int = 2
    desired_factor: str = "orientation"
    sensitive_factor: str = "hue"
    correlation: float = 0.0
    seed: int = 7
    desired_prior: tuple | None = None
    sensitive_prior: tuple | None = None
    saturation: float = 0.2
    contrast: float = 0.25
    pixel_noise: float = 0.02
    n_objects: int = 1
    # object radius range as a fraction of the image size
    object_scale: tuple = (0.26, 0.36)
    # bar width range and centre jitter as fractions of the image size
    bar_width: tuple = (0.25, 0.35)
    bar_jitter: float = 0.1

    def validate(self):
        if self.k_desired < 2 or self.k_desired > len(SHAPES):
            raise ConfigError(f"k_desired must be in [2, {len(SHAPES)}], got {self.k_desired}")
        if self.k_sensitive < 2 or self.k_sensitive > len(HUE_OFFSETS):
            raise ConfigError(f"k_sensitive must be in [2, {len(HUE_OFFSETS)}], got {self.k_sensitive}")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if self.desired_factor not in DESIRED_FACTORS or self.sensitive_factor != "hue":
            raise ConfigError(f"desired_factor must be one of {DESIRED_FACTORS} and sensitive_factor 'hue'")
        if self.desired_factor == "orientation" and self.k_desired > MAX_ORIENTATIONS:
            raise ConfigError(f"orientation supports at most {MAX_ORIENTATIONS} classes")
        if not 0 < self.bar_width[0] <= self.bar_width[1]:
            raise ConfigError("bar_width must be an increasing pair of positive fractions")
        if not 0.0 <= self.bar_jitter < 0.5:
            raise ConfigError("bar_jitter must lie in [0, 0.5)")
        if self.n_objects < 1:
            raise ConfigError("n_objects must be at least 1")
        if not 0.0 <= self.correlation <= 1.0:
            raise ConfigError("correlation must lie in [0, 1]")
        for prior, k in ((self.desired_prior, self.k_desired), (self.sensitive_prior, self.k_sensitive)):
            if prior is not None:
                p = np.asarray(prior, dtype=float)
                if len(p) != k or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                    raise ConfigError(f"class prior {prior} is not a distribution over {k} classes")


def _shape_mask(kind, xx, yy, cx, cy, r, angle):
    # rotate coordinates into the shape frame
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        return u**2 + v**2 <= r**2
    if kind == "square":
        return (np.abs(u) <= 0.85 * r) & (np.abs(v) <= 0.85 * r)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.15 * r
    if kind == "ring":
        d2 = u**2 + v**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(u) <= 1.1 * r) & (np.abs(v) <= 0.3 * r)
    if kind == "vbar":
        return (np.abs(u) <= 0.3 * r) & (np.abs(v) <= 1.1 * r)
    if kind == "cross":
        w = 0.35 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if kind == "triangle":
        # equilateral, circumradius r
        return (v >= -0.5 * r) & (np.sqrt(3) * u + v <= r) & (-np.sqrt(3) * u + v <= r)
    raise ConfigError(f"unknown shape {kind!r}")


def _smooth_background(rng, size, grid=4):
    coarse = rng.uniform(0.25, 0.75, size=(grid, grid))
    # bilinear upsampling of the coarse grid
    t = np.linspace(0, grid - 1, size)
    i0 = np.clip(np.floor(t).astype(int), 0, grid - 2)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _draw_labels(rng, spec, n):
    py = spec.desired_prior
    y = rng.choice(spec.k_desired, size=n, p=None if py is None else np.asarray(py, float))
    pz = spec.sensitive_prior
    z_indep = rng.choice(spec.k_sensitive, size=n, p=None if pz is None else np.asarray(pz, float))
    copy = rng.random(n) < spec.correlation
    z = np.where(copy, y % spec.k_sensitive, z_indep)
    return y.astype(np.int64), z.astype(np.int64)


def _bar_mask(rng, k, xx, yy, size, n_classes, width_range, jitter):
    # class k sets the bar direction; width and centre offset are nuisance
    spread = min(0.3, 0.4 * np.pi / n_classes)
    angle = k * np.pi / n_classes + rng.uniform(-spread, spread)
    cx, cy = size / 2 + rng.uniform(-jitter, jitter, size=2) * size
    w = rng.uniform(*width_range) * size
    dist = np.abs((yy - cy) * np.cos(angle) - (xx - cx) * np.sin(angle))
    return dist < w / 2


def render_sample(rng, spec, y, z):
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    bg = _smooth_background(rng, s)
    grey = np.clip(bg.mean() + spec.contrast, 0.0, 1.0)
    colour = grey + spec.saturation * HUE_OFFSETS[z] * rng.uniform(0.8, 1.2)
    img = np.repeat(bg[None], 3, axis=0)
    if spec.desired_factor == "orientation":
        mask = _bar_mask(rng, y, xx, yy, s, spec.k_desired, spec.bar_width, spec.bar_jitter)
        img[:, mask] = colour[:, None]
    else:
        lo, hi = spec.object_scale
        for _ in range(spec.n_objects):
            r = rng.uniform(lo, hi) * s
            cx, cy = rng.uniform(0.5 * r, s - 0.5 * r, size=2)
            mask = _shape_mask(SHAPES[y], xx, yy, cx, cy, r, rng.uniform(-0.3, 0.3))
            img[:, mask] = colour[:, None]
    img += rng.normal(0.0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _split_sizes(sizes):
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise ConfigError(f"sizes must be three positive integers, got {sizes}")
    return sizes


def generate_synthetic(spec: SyntheticAttributeSpec, sizes=(2000, 2000, 1000)) -> DatasetBundle:
    """Deterministic synthetic bundle; the same ``(spec, sizes)`` gives identical bytes."""
    spec.validate()
    sizes = _split_sizes(sizes)
    n = sum(sizes)
    rng = np.random.default_rng(spec.seed)
    y, z = _draw_labels(rng, spec, n)
    images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.float32)
    for i in range(n):
        images[i] = render_sample(rng, spec, y[i], z[i])
    ids = np.array([f"syn{spec.seed}_{i:06d}" for i in range(n)])
    cuts = np.cumsum((0,) + sizes)
    parts = [slice(cuts[i], cuts[i + 1]) for i in range(3)]
    names = ("user_train", "attacker_train", "test")
    splits = [Split(nm, images[p], y[p], z[p], ids[p], guarded=(nm == "test")) for nm, p in zip(names, parts)]
    desc = DatasetDescriptor("synthetic-shapes", (3, spec.image_size, spec.image_size), sizes)
    return DatasetBundle(*splits, spec.k_desired, spec.k_sensitive, desc)


# ---------------------------------------------------------------------------
# external attribute tables


def _read_attribute_table(table_path):
    with open(table_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{table_path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    return header, body


def _binary_column(header, body, name, table_path):
    if name not in header[1:]:
        raise SchemaError(f"attribute {name!r} not found in {table_path}; columns: {header[1:]}")
    col = header.index(name)
    raw = np.array([int(float(r[col])) for r in body])
    bad = set(np.unique(raw)) - {-1, 0, 1}
    if bad:
        raise SchemaError(f"attribute {name!r} has values {sorted(bad)} outside {{-1,0,1}}")
    return (raw > 0).astype(np.int64)


def load_external(
    path,
    desired_attr: str,
    sensitive_attr: str,
    sizes=None,
    *,
    seed: int = 0,
    image_size: int = 64,
    table: str = "attributes.csv",
    mean=None,
    std=None,
) -> DatasetBundle:
    """Load an image folder plus an attribute CSV.

    The CSV's first column is the image filename, the remaining columns are
    attributes valued in {-1, 1} or {0, 1}.  Images are resized to
    ``image_size`` squared, scaled to [0, 1] and optionally normalised per
    channel with ``mean``/``std``.
    """
    table_path = path if str(path).endswith(".csv") else os.path.join(path, table)
    root = os.path.dirname(table_path)
    header, body = _read_attribute_table(table_path)
    y_all = _binary_column(header, body, desired_attr, table_path)
    z_all = _binary_column(header, body, sensitive_attr, table_path)
    files = [r[0] for r in body]
    n_avail = len(files)
    if sizes is None:
        sizes = tuple(int(p * n_avail) for p in DEFAULT_PROPORTIONS)
    sizes = _split_sizes(sizes)
    if sum(sizes) > n_avail:
        raise SizeError(f"requested {sum(sizes)} samples but {table_path} has {n_avail}")
    order = np.random.default_rng(seed).permutation(n_avail)[: sum(sizes)]

    def load(i):
        with Image.open(os.path.join(root, files[i])) as im:
            im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        if mean is not None:
            arr = (arr - np.asarray(mean, np.float32)[:, None, None]) / np.asarray(std, np.float32)[:, None, None]
        return arr

    images = np.stack([load(i) for i in order])
    ids = np.array(files)[order]
    cuts = np.cumsum((0,) + sizes)
    names = ("user_train", "attacker_train", "test")
    splits = []
    for k, nm in enumerate(names):
        sel = slice(cuts[k], cuts[k + 1])
        splits.append(Split(nm, images[sel], y_all[order][sel], z_all[order][sel], ids[sel], guarded=(nm == "test")))
    desc = DatasetDescriptor(os.path.basename(os.path.abspath(root)), (3, image_size, image_size), sizes)
    return DatasetBundle(*splits, 2, 2, desc)


def save_bundle(bundle: DatasetBundle, out_dir, desired_name="desired", sensitive_name="sensitive"):
    """Write every sample as PNG plus ``attributes.csv`` (integer labels) and ``splits.json``."""
    os.makedirs(out_dir, exist_ok=True)
    rows, membership = [], {}
    for name, split in bundle.splits.items():
        images, y, z = split._images, split._y, split._z
        membership[name] = [str(i) for i in split.ids]
        for k, sid in enumerate(split.ids):
            fname = f"{sid}.png"
            arr = (np.clip(images[k], 0, 1).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
            Image.fromarray(arr).save(os.path.join(out_dir, fname))
            rows.append([fname, int(y[k]), int(z[k])])
    with open(os.path.join(out_dir, "attributes.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", desired_name, sensitive_name])
        w.writerows(rows)
    with open(os.path.join(out_dir, "splits.json"), "w") as fh:
        json.dump({"descriptor": asdict(bundle.descriptor), "splits": membership}, fh, indent=1)


def trivial_classifier(bundle: DatasetBundle, which: str = "desired") -> float:
    """Test accuracy of always predicting the user-train majority class (ties -> lower index)."""
    if which not in ("desired", "sensitive"):
        raise ConfigError("which must be 'desired' or 'sensitive'")
    k = bundle.k_desired if which == "desired" else bundle.k_sensitive
    train = bundle.user_train.y if which == "desired" else bundle.user_train.z
    test = bundle.test.y if which == "desired" else bundle.test.z
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("trivial_classifier needs non-empty user_train and test splits")
    # argmax returns the first (lowest) index on ties
    majority = int(np.argmax(np.bincount(train, minlength=k)))
    return float(np.mean(test == majority))
