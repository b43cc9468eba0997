"""Synthetic histology-like patches and the on-disk dataset layout.

Positives hold five or more dark, elongated "tumour" nuclei; negatives hold
none, only small round pink distractors.  Every blob the generator draws is
kept in a placement log so later analyses know which pixels are tumour.
"""

import csv
import io as _io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ConfigError, DataError, LoadError
from .io import atomic_write_bytes, atomic_write_text, decode_tensor, encode_tensor
from .utils import check_binary_labels, make_rng

TUMOUR = "tumour"
DISTRACTOR = "distractor"

_BACKGROUND = np.array([232.0, 196.0, 218.0])
_TUMOUR_RGB = np.array([78.0, 38.0, 118.0])
_DISTRACTOR_RGB = np.array([214.0, 96.0, 128.0])


@dataclass(frozen=True)
class Blob:
    kind: str
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float

    def mask(self, h, w):
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        c, s = np.cos(self.angle), np.sin(self.angle)
        dy, dx = yy - self.cy, xx - self.cx
        u = (dx * c + dy * s) / self.rx
        v = (-dx * s + dy * c) / self.ry
        return u * u + v * v


@dataclass
class LabeledPatch:
    image: np.ndarray
    label: int
    id: str
    blobs: tuple = ()

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.image.ndim != 3:
            raise DataError(f"patch {self.id}: image must be [C,H,W], got {self.image.shape}")
        if self.label not in (0, 1):
            raise DataError(f"patch {self.id}: label must be 0 or 1, got {self.label}")
        self.label = int(self.label)

    def tumour_mask(self):
        """Boolean ``[H,W]`` mask of pixels covered by logged tumour blobs."""
        h, w = self.image.shape[1:]
        m = np.zeros((h, w), dtype=bool)
        for b in self.blobs:
            if b.kind == TUMOUR:
                m |= b.mask(h, w) <= 1.0
        return m

    def n_tumour(self):
        return sum(1 for b in self.blobs if b.kind == TUMOUR)


@dataclass
class Dataset:
    patches: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.id for p in self.patches]
        if len(set(ids)) != len(ids):
            raise DataError("patch ids must be unique")

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    def __iter__(self):
        return iter(self.patches)

    @property
    def labels(self):
        return np.array([p.label for p in self.patches], dtype=np.int64)

    @property
    def ids(self):
        return [p.id for p in self.patches]

    def arrays(self):
        if not self.patches:
            return np.zeros((0, 3, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
        return np.stack([p.image for p in self.patches]), self.labels

    def subset(self, indices, note=None):
        prov = dict(self.provenance)
        if note:
            prov["subset"] = note
        return Dataset([self.patches[int(i)] for i in indices], prov)

    def positives(self):
        return self.subset(np.flatnonzero(self.labels == 1), "positives")


@dataclass
class SynthConfig:
    size: int = 32
    n_positive: int = 240
    n_negative: int = 180
    radius_range: tuple = (1.5, 2.8)
    tumour_count_range: tuple = (5, 8)
    distractor_count_range: tuple = (2, 6)
    noise: float = 10.0
    seed: int = 0

    def validate(self):
        problems = []
        if self.size < 8:
            problems.append(f"patch size must be >= 8, got {self.size}")
        if self.n_positive < 0 or self.n_negative < 0:
            problems.append("class counts must be non-negative")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            problems.append(f"radius range must satisfy 1 <= min <= max, got {self.radius_range}")
        tlo, thi = self.tumour_count_range
        if tlo < 5:
            problems.append(f"positives need at least 5 tumour blobs, got minimum {tlo}")
        if thi < tlo:
            problems.append(f"tumour count range is empty: {self.tumour_count_range}")
        dlo, dhi = self.distractor_count_range
        if dlo < 0 or dhi < dlo:
            problems.append(f"distractor count range is invalid: {self.distractor_count_range}")
        if self.noise < 0:
            problems.append(f"noise amplitude must be >= 0, got {self.noise}")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        return {
            "size": self.size,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "radius_range": list(self.radius_range),
            "tumour_count_range": list(self.tumour_count_range),
            "distractor_count_range": list(self.distractor_count_range),
            "noise": self.noise,
            "seed": self.seed,
        }


def _smooth_noise(rng, size, cells=4):
    coarse = rng.normal(size=(cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _place(rng, kind, placed, size, lo, hi):
    for _ in range(200):
        if kind == TUMOUR:
            ry = rng.uniform(lo, hi)
            rx = ry * rng.uniform(1.25, 1.6)
        else:
            ry = rng.uniform(1.0, max(1.0, lo))
            rx = ry
        m = int(np.ceil(max(rx, ry))) + 1
        cy, cx = rng.uniform(m, size - 1 - m, size=2)
        ok = all(np.hypot(cy - b.cy, cx - b.cx) > 0.5 * (b.rx + b.ry + rx + ry) + 0.5 for b in placed)
        if ok:
            return Blob(kind, float(cy), float(cx), float(ry), float(rx), float(rng.uniform(0, np.pi)))
    raise DataError(f"could not place {len(placed) + 1} blobs without overlap in a {size}px patch")


def _render(rng, blobs, size, noise):
    img = _BACKGROUND[:, None, None] + 8.0 * _smooth_noise(rng, size)[None] * np.array([1.0, 1.4, 1.0])[:, None, None]
    for b in blobs:
        d = b.mask(size, size)
        alpha = np.clip(1.5 - d, 0.0, 1.0)[None]
        rgb = _TUMOUR_RGB if b.kind == TUMOUR else _DISTRACTOR_RGB
        tone = rng.uniform(-12, 12)
        img = img * (1 - alpha) + (rgb + tone)[:, None, None] * alpha
    img = img + rng.normal(scale=noise, size=img.shape)
    return np.clip(img, 0.0, 255.0).astype(np.float32)


def generate(config=None):
    """Generate a deterministic labelled patch set from ``config``."""
    config = (config or SynthConfig()).validate()
    rng = make_rng(config.seed, "synth")
    labels = np.array([1] * config.n_positive + [0] * config.n_negative)
    labels = labels[rng.permutation(len(labels))]
    lo, hi = config.radius_range
    patches = []
    for i, label in enumerate(labels):
        placed = []
        if label == 1:
            n_t = int(rng.integers(config.tumour_count_range[0], config.tumour_count_range[1] + 1))
            for _ in range(n_t):
                placed.append(_place(rng, TUMOUR, placed, config.size, lo, hi))
            n_d = int(rng.integers(0, max(1, config.distractor_count_range[0]) + 1))
        else:
            n_d = int(rng.integers(config.distractor_count_range[0], config.distractor_count_range[1] + 1))
        for _ in range(n_d):
            placed.append(_place(rng, DISTRACTOR, placed, config.size, lo, hi))
        img = _render(rng, placed, config.size, config.noise)
        patches.append(LabeledPatch(img, int(label), f"syn-{i:05d}", tuple(placed)))
    return Dataset(patches, {"synthetic": config.to_dict()})


def split(dataset, fraction, seed=0):
    """Stratified ``(train, test)`` split; ``fraction`` of each class goes to train."""
    if not 0 < fraction < 1:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = make_rng(seed, "split")
    labels = dataset.labels
    train = []
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        train.extend(idx[: int(round(fraction * len(idx)))].tolist())
    mask = np.zeros(len(dataset), dtype=bool)
    mask[train] = True
    return dataset.subset(np.flatnonzero(mask), "train"), dataset.subset(np.flatnonzero(~mask), "test")


# ----------------------------------------------------------------------------
# directory layout: labels.csv + one image per patch
# ----------------------------------------------------------------------------

FORMATS = ("quantized-8bit", "float-raw")


def quantize(img):
    """Round half up to 8-bit, clipping to [0, 255]."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def encode_png(img):
    buf = _io.BytesIO()
    Image.fromarray(quantize(img).transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_dir(dataset, path, format="quantized-8bit"):
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ext = ".png" if format == "quantized-8bit" else ".advt"
    rows = _io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    writer.writerow(["id", "filename", "label"])
    for p in dataset:
        fname = f"{p.id}{ext}"
        if p.image.shape[0] != 3 and format == "quantized-8bit":
            raise DataError(f"patch {p.id}: 8-bit export needs 3 channels")
        blob = encode_png(p.image) if format == "quantized-8bit" else encode_tensor(p.image)
        atomic_write_bytes(path / fname, blob)
        writer.writerow([p.id, fname, p.label])
    atomic_write_text(path / "labels.csv", rows.getvalue())
    return path


def _load_image(file):
    if file.suffix.lower() == ".advt":
        return decode_tensor(file.read_bytes(), str(file))
    with Image.open(file) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1)


def load_dir(path):
    """Load a dataset directory written by :func:`save_dir` (or by hand)."""
    path = Path(path)
    csv_path = path / "labels.csv"
    try:
        text = csv_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"{csv_path}: {exc.strerror or exc}") from exc
    reader = csv.reader(_io.StringIO(text))
    patches = []
    header = next(reader, None)
    if header is None:
        return Dataset([], {"source": str(path)})
    if [h.strip() for h in header] != ["id", "filename", "label"]:
        raise LoadError(f"{csv_path}:1: expected header id,filename,label, got {header}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise LoadError(f"{csv_path}:{lineno}: expected 3 columns, got {len(row)}")
        pid, fname, label = (c.strip() for c in row)
        if label not in ("0", "1"):
            raise LoadError(f"{csv_path}:{lineno}: label must be 0 or 1, got {label!r}")
        file = path / fname
        if not file.is_file():
            raise LoadError(f"{csv_path}:{lineno}: image file {fname} not found")
        try:
            img = _load_image(file)
        except LoadError:
            raise
        except Exception as exc:
            raise LoadError(f"{file}: cannot read image ({exc})") from exc
        if np.any(img < 0) or np.any(img > 255) or not np.all(np.isfinite(img)):
            raise LoadError(f"{file}: pixel values outside [0, 255]")
        patches.append(LabeledPatch(img, int(label), pid))
    try:
        return Dataset(patches, {"source": str(path)})
    except DataError as exc:
        raise LoadError(f"{csv_path}: {exc}") from exc


def from_arrays(X, y, ids=None):
    y = check_binary_labels(y, len(X))
    ids = ids or [f"img-{i:05d}" for i in range(len(X))]
    return Dataset([LabeledPatch(x, int(lab), pid) for x, lab, pid in zip(X, y, ids)], {"source": "arrays"})
