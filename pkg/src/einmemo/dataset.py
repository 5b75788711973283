"""Image/mask pair datasets: loading, folds, subsets and a synthetic shape task."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

DEFAULT_CELL = 111
SPLITS = ("train", "test")

SHAPE_FAMILIES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "ellipse",
    "lshape",
    "bar",
)


class DataError(ValueError):
    """Raised for malformed datasets, manifests or masks."""


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: np.ndarray  # float32, (3, H, W), values in [0, 1]
    mask: np.ndarray  # uint8, (H, W), values in {0, 1}
    category_id: int

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be 3xHxW, got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(
                f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.id}: mask is not binary")
        self.image.setflags(write=False)
        self.mask.setflags(write=False)


@dataclass(frozen=True, eq=False)
class TaskDataset:
    samples: tuple[Sample, ...]
    split: str = "train"
    category_partition: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise DataError("dataset has no samples")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("sample ids are not unique")
        partition = dict(self.category_partition) or default_partition(
            {s.category_id for s in self.samples}
        )
        missing = {s.category_id for s in self.samples} - set(partition)
        if missing:
            raise DataError(f"categories {sorted(missing)} missing from partition")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "category_partition", partition)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def categories(self) -> list[int]:
        return sorted({s.category_id for s in self.samples})

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: str) -> Sample:
        lookup = self.__dict__.get("_by_id")
        if lookup is None:
            lookup = {s.id: s for s in self.samples}
            object.__setattr__(self, "_by_id", lookup)
        return lookup[sample_id]

    def select(self, samples: Iterable[Sample]) -> "TaskDataset":
        """New dataset over ``samples`` keeping split and partition."""
        return TaskDataset(tuple(samples), self.split, self.category_partition)

    def of_categories(self, categories: Iterable[int]) -> "TaskDataset":
        keep = set(categories)
        return self.select(s for s in self.samples if s.category_id in keep)


def default_partition(categories: Iterable[int], k: int = 4) -> dict[int, int]:
    """Contiguous blocks of sorted categories, ``k`` folds at most."""
    cats = sorted(categories)
    k = max(1, min(k, len(cats)))
    return {c: i * k // len(cats) for i, c in enumerate(cats)}


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int


def render_bbox_mask(box: BBox, h: int, w: int) -> np.ndarray:
    """Filled rectangle mask; pixels with x_min <= x < x_max and y_min <= y < y_max."""
    if not (0 <= box.x_min < box.x_max <= w and 0 <= box.y_min < box.y_max <= h):
        raise DataError(f"invalid box {box} for a {h}x{w} frame")
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[box.y_min : box.y_max, box.x_min : box.x_max] = 1
    return mask


def mask_to_bbox(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DataError("empty mask has no bounding box")
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# --------------------------------------------------------------------------- io


def resize_image(image: np.ndarray, cell: int) -> np.ndarray:
    """Bilinear resize of a (3, H, W) float image to (3, cell, cell)."""
    if image.shape[1:] == (cell, cell):
        return image.astype(np.float32)
    chans = [
        np.asarray(
            Image.fromarray(c.astype(np.float32), mode="F").resize(
                (cell, cell), Image.BILINEAR
            )
        )
        for c in image
    ]
    return np.clip(np.stack(chans), 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, cell: int) -> np.ndarray:
    if mask.shape == (cell, cell):
        return mask.astype(np.uint8)
    out = Image.fromarray(mask.astype(np.uint8)).resize((cell, cell), Image.NEAREST)
    return np.asarray(out, dtype=np.uint8)


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _read_mask(path: Path, sample_id: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    values = set(np.unique(arr).tolist())
    if values <= {0, 1}:
        return arr.astype(np.uint8)
    if values <= {0, 255}:
        return (arr == 255).astype(np.uint8)
    raise DataError(f"mask for {sample_id} is not binary (values {sorted(values)[:6]})")


def read_manifest(manifest: Path) -> list[tuple[str, str, str, int, str]]:
    """Parse a manifest: ``id<TAB>image<TAB>mask<TAB>category_id<TAB>split`` per line."""
    records = []
    for lineno, line in enumerate(Path(manifest).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{manifest}:{lineno}: expected 5 tab-separated fields")
        sid, img, msk, cat, split = parts
        if split not in SPLITS:
            raise DataError(f"{manifest}:{lineno}: unknown split {split!r}")
        records.append((sid, img, msk, int(cat), split))
    return records


def load_pairs(
    root_dir: str | Path,
    manifest: str | Path | None = None,
    split: str = "train",
    cell: int = DEFAULT_CELL,
    folds: int = 4,
) -> TaskDataset:
    """Load the ``split`` records of a manifest under ``root_dir``.

    Images are resized bilinearly and masks with nearest neighbour, both to
    ``cell`` x ``cell``. The manifest defaults to ``root_dir/manifest.tsv``.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    manifest = Path(manifest) if manifest is not None else root / "manifest.tsv"
    if not manifest.is_file():
        raise DataError(f"manifest {manifest} does not exist")
    records = read_manifest(manifest)
    missing = [
        sid
        for sid, img, msk, _, sp in records
        if sp == split and not ((root / img).is_file() and (root / msk).is_file())
    ]
    if missing:
        raise DataError(f"missing image or mask for ids: {', '.join(missing)}")
    all_cats = {cat for *_, cat, _ in records}
    samples = []
    for sid, img, msk, cat, sp in records:
        if sp != split:
            continue
        image = resize_image(_read_image(root / img), cell)
        mask = resize_mask(_read_mask(root / msk, sid), cell)
        samples.append(Sample(sid, image, mask, cat))
    if not samples:
        raise DataError(f"no {split} samples in {manifest}")
    return TaskDataset(tuple(samples), split, default_partition(all_cats, folds))


def write_pairs(root_dir: str | Path, datasets: Sequence[TaskDataset]) -> Path:
    """Write datasets in the ``images/``, ``masks/``, ``manifest.tsv`` layout."""
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["# id\timage\tmask\tcategory_id\tsplit"]
    for ds in datasets:
        for s in ds:
            img = f"images/{s.id}.png"
            msk = f"masks/{s.id}.png"
            rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(rgb).save(root / img)
            Image.fromarray(s.mask * 255).save(root / msk)
            lines.append(f"{s.id}\t{img}\t{msk}\t{s.category_id}\t{ds.split}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------- folds/subsets


def make_folds(
    ds: TaskDataset, k: int, test: TaskDataset | None = None
) -> list[tuple[TaskDataset, TaskDataset]]:
    """Category-disjoint folds: fold i holds the i-th block of sorted categories.

    Each fold pairs ``ds`` restricted to the fold's categories (the retrieval
    and training set) with ``test`` restricted to the same categories. Without
    ``test`` the fold's own samples serve as queries too.
    """
    if k <= 0:
        raise DataError(f"fold count must be positive, got {k}")
    cats = ds.categories
    if len(cats) % k:
        raise DataError(f"{len(cats)} categories cannot be split into {k} folds")
    per = len(cats) // k
    partition = {c: i // per for i, c in enumerate(cats)}
    folds = []
    for i in range(k):
        fold_cats = cats[i * per : (i + 1) * per]
        train = TaskDataset(
            tuple(s for s in ds if s.category_id in fold_cats), ds.split, partition
        )
        queries = test if test is not None else ds
        test_fold = TaskDataset(
            tuple(s for s in queries if s.category_id in fold_cats),
            queries.split,
            partition,
        )
        folds.append((train, test_fold))
    return folds


def _by_category(ds: TaskDataset) -> dict[int, list[Sample]]:
    groups: dict[int, list[Sample]] = defaultdict(list)
    for s in ds:
        groups[s.category_id].append(s)
    return dict(sorted(groups.items()))


def subset_per_class(ds: TaskDataset, m: int, seed: int = 0) -> TaskDataset:
    """At most ``m`` samples per category, drawn without replacement."""
    if m < 1:
        raise DataError(f"per-class count must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    keep = set()
    for _, group in _by_category(ds).items():
        if len(group) <= m:
            keep.update(s.id for s in group)
        else:
            idx = rng.choice(len(group), size=m, replace=False)
            keep.update(group[i].id for i in idx)
    return ds.select(s for s in ds if s.id in keep)


def subset_fraction(ds: TaskDataset, p: float, seed: int = 0) -> TaskDataset:
    """``ceil(p * n)`` samples, allocated across categories by largest remainder."""
    if not 0 < p <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {p}")
    n = len(ds)
    # guard against 0.1 * 200 = 20.000000000000004
    target = math.ceil(round(p * n, 9))
    if target >= n:
        return ds
    groups = _by_category(ds)
    shares = {c: target * len(g) / n for c, g in groups.items()}
    alloc = {c: int(math.floor(v)) for c, v in shares.items()}
    leftover = target - sum(alloc.values())
    order = sorted(groups, key=lambda c: (-(shares[c] - alloc[c]), c))
    for c in order[:leftover]:
        alloc[c] += 1
    rng = np.random.default_rng(seed)
    keep = set()
    for c, group in groups.items():
        idx = rng.choice(len(group), size=alloc[c], replace=False)
        keep.update(group[i].id for i in idx)
    return ds.select(s for s in ds if s.id in keep)


# -------------------------------------------------------------------- synthetic


def _value_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    """Perlin-style fractal value noise in [0, 1]."""
    out = np.zeros((size, size), dtype=np.float64)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        res = 2 ** (o + 2)
        grid = rng.random((res + 1, res + 1))
        up = Image.fromarray(grid.astype(np.float32), mode="F").resize(
            (size, size), Image.BICUBIC
        )
        out += amp * np.asarray(up, dtype=np.float64)
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-9)


def _stripes(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(6, 14)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    base = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * u))
    return 0.8 * base + 0.2 * rng.random((size, size))


def _shape_mask(family: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    scale = rng.uniform(0.22, 0.38)
    cx, cy = rng.uniform(0.5 - 0.45 + scale, 0.5 + 0.45 - scale, size=2)
    theta = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    s = scale
    if family == "circle":
        m = dx**2 + dy**2 <= s**2
    elif family == "square":
        m = (np.abs(u) <= 0.8 * s) & (np.abs(v) <= 0.8 * s)
    elif family == "triangle":
        # equilateral triangle of circumradius s
        angles = theta + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + np.pi / 2
        m = np.ones_like(dx, dtype=bool)
        for a in angles:
            m &= np.cos(a) * dx + np.sin(a) * dy <= 0.5 * s
    elif family == "cross":
        w = 0.3 * s
        m = ((np.abs(u) <= s) & (np.abs(v) <= w)) | ((np.abs(v) <= s) & (np.abs(u) <= w))
    elif family == "ring":
        r2 = dx**2 + dy**2
        m = (r2 <= s**2) & (r2 >= (0.55 * s) ** 2)
    elif family == "ellipse":
        m = (u / s) ** 2 + (v / (0.5 * s)) ** 2 <= 1
    elif family == "lshape":
        w = 0.4 * s
        m = ((u >= -s) & (u <= s) & (v >= -s) & (v <= -s + w)) | (
            (u >= -s) & (u <= -s + w) & (v >= -s) & (v <= s)
        )
    elif family == "bar":
        m = (np.abs(u) <= 1.2 * s) & (np.abs(v) <= 0.3 * s)
    else:
        raise DataError(f"unknown shape family {family!r}")
    return m.astype(np.uint8)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    import colorsys

    return np.array(colorsys.hsv_to_rgb(h, s, v), dtype=np.float64)


def synth_sample(
    rng: np.random.Generator,
    category: int,
    cell: int = DEFAULT_CELL,
    background: str = "noise",
) -> tuple[np.ndarray, np.ndarray]:
    """One colored shape of the category's family over a textured background."""
    family = SHAPE_FAMILIES[category % len(SHAPE_FAMILIES)]
    while True:
        mask = _shape_mask(family, rng, cell)
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            break
    if background == "noise":
        tex = _value_noise(rng, cell)
    elif background == "stripes":
        tex = _stripes(rng, cell)
    else:
        raise DataError(f"unknown background {background!r}")
    tint = _hsv_to_rgb(rng.random(), rng.uniform(0.0, 0.25), 1.0)
    lo, hi = sorted(rng.uniform(0.1, 0.7, size=2))
    hi = max(hi, lo + 0.2)
    bg = (lo + (hi - lo) * tex)[None] * tint[:, None, None]
    # hue band per wrap-around so >8 categories stay distinguishable
    band = (category // len(SHAPE_FAMILIES)) * 0.37
    color = _hsv_to_rgb((rng.random() + band) % 1.0, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0))
    shade = 1.0 - 0.15 * _value_noise(rng, cell, octaves=2)
    fg = color[:, None, None] * shade[None]
    image = np.where(mask[None].astype(bool), fg, bg)
    return np.clip(image, 0, 1).astype(np.float32), mask


def synth_task(
    seed: int,
    categories: int = 8,
    per_class: int = 50,
    cell: int = DEFAULT_CELL,
    test_per_class: int | None = None,
    background: str = "noise",
    folds: int = 4,
) -> tuple[TaskDataset, TaskDataset]:
    """Deterministic synthetic segmentation task; returns (train, test)."""
    if categories < 2:
        raise DataError(f"need at least 2 categories, got {categories}")
    if per_class < 4:
        raise DataError(f"need at least 4 samples per class, got {per_class}")
    test_per_class = per_class if test_per_class is None else test_per_class
    partition = default_partition(range(categories), folds)
    out = []
    for split_idx, (split, count) in enumerate((("train", per_class), ("test", test_per_class))):
        samples = []
        for c in range(categories):
            rng = np.random.default_rng([seed, split_idx, c])
            for i in range(count):
                image, mask = synth_sample(rng, c, cell, background)
                samples.append(Sample(f"{split}_c{c}_{i:04d}", image, mask, c))
        out.append(TaskDataset(tuple(samples), split, partition))
    return out[0], out[1]
