"""Datasets, corruption synthesis and IDX ingestion.

Every example carries a provenance code so the clean set and the atypical
set can be recovered exactly after corruption.
"""

import csv
import gzip
import hashlib
import importlib.util
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import IdxFormatError, ShapeError
from .rng import Xoshiro256

log = logging.getLogger(__name__)

CLEAN = 0
FLIPPED = 1
OOD = 2
PROVENANCE_NAMES = {CLEAN: "clean", FLIPPED: "flipped_label", OOD: "injected_ood"}

LABEL_FLIP = "flip"
OOD_INJECT = "ood"


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (n, d), values in [0, 1] for image data
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = "dataset"
    provenance: np.ndarray = None  # (n,) int8, CLEAN / FLIPPED / OOD
    original_labels: np.ndarray = None  # label before flipping, -1 otherwise
    image_shape: tuple = None  # (h, w) or (h, w, c) when rows are images
    ood_source: str = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) == 0:
            raise ShapeError(f"features must be a nonempty (n, d) array, got {x.shape}")
        if y.shape != (len(x),):
            raise ShapeError(f"{len(x)} feature rows but labels of shape {y.shape}")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        prov = np.zeros(len(x), np.int8) if self.provenance is None else np.asarray(self.provenance, np.int8)
        orig = np.full(len(x), -1, np.int64) if self.original_labels is None else np.asarray(self.original_labels, np.int64)
        if np.any((prov == FLIPPED) & (orig == y)):
            raise ValueError("a flipped example kept its original label")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "provenance", prov)
        object.__setattr__(self, "original_labels", orig)
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def corrupted(self):
        return self.provenance != CLEAN

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            provenance=self.provenance[idx],
            original_labels=self.original_labels[idx],
        )

    def content_hash(self):
        h = hashlib.sha256()
        h.update(json.dumps(self._header(), sort_keys=True).encode())
        h.update(self.features.astype("<f8").tobytes())
        return h.hexdigest()

    def _header(self):
        return {
            "format": "bnmem-dataset-v1",
            "name": self.name,
            "num_classes": int(self.num_classes),
            "n": len(self),
            "dim": self.dim,
            "image_shape": list(self.image_shape) if self.image_shape else None,
            "ood_source": self.ood_source,
            "labels": self.labels.tolist(),
            "provenance": self.provenance.tolist(),
            "original_labels": self.original_labels.tolist(),
        }

    def save(self, path):
        """Write ``<path>.json`` (header) and ``<path>.bin`` (LE float64 features)."""
        path = Path(path)
        path.with_suffix(".json").write_text(json.dumps(self._header(), sort_keys=True) + "\n")
        path.with_suffix(".bin").write_bytes(self.features.astype("<f8").tobytes())
        return [path.with_suffix(".json"), path.with_suffix(".bin")]

    @classmethod
    def load(cls, path):
        path = Path(path)
        head = json.loads(path.with_suffix(".json").read_text())
        x = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        if x.size != head["n"] * head["dim"]:
            raise ShapeError(f"feature blob has {x.size} values, header expects {head['n'] * head['dim']}")
        return cls(
            features=x.reshape(head["n"], head["dim"]).astype(np.float64),
            labels=np.array(head["labels"]),
            num_classes=head["num_classes"],
            name=head["name"],
            provenance=np.array(head["provenance"]),
            original_labels=np.array(head["original_labels"]),
            image_shape=tuple(head["image_shape"]) if head["image_shape"] else None,
            ood_source=head["ood_source"],
        )

    def write_provenance_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["example_index", "label", "provenance", "original_label"])
            for i in range(len(self)):
                w.writerow([i, int(self.labels[i]), PROVENANCE_NAMES[int(self.provenance[i])], int(self.original_labels[i])])


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    ratio: float
    seed: int = 0
    ood_source: Dataset = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (LABEL_FLIP, OOD_INJECT):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.ratio < 1:
            raise ValueError("corruption ratio must lie in [0, 1)")
        if self.kind == OOD_INJECT and self.ratio > 0 and self.ood_source is None:
            raise ValueError("OOD injection needs an ood_source dataset")


def corruption_count(n, ratio):
    return int(math.floor(n * ratio + 1e-9))


def flip_labels(d, spec):
    """Give ``floor(|D| k)`` examples a label drawn uniformly from the other classes."""
    if spec.kind != LABEL_FLIP:
        raise ValueError("flip_labels needs a label-flip spec")
    if d.num_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    if (d.provenance == FLIPPED).any():
        raise ValueError(f"dataset {d.name!r} already has flipped labels; corrupt the clean source instead")
    delta = corruption_count(len(d), spec.ratio)
    if delta == 0:
        if spec.ratio > 0:
            log.warning("ratio %g on %d examples flips nothing", spec.ratio, len(d))
        return d
    rng = Xoshiro256(spec.seed)
    chosen = rng.sample_without_replacement(len(d), delta)
    draws = rng.integers(d.num_classes - 1, delta)
    labels = d.labels.copy()
    prov = d.provenance.copy()
    orig = d.original_labels.copy()
    old = labels[chosen]
    new = np.where(draws >= old, draws + 1, draws)  # skip the original class
    orig[chosen] = old
    labels[chosen] = new
    prov[chosen] = FLIPPED
    return replace(d, labels=labels, provenance=prov, original_labels=orig)


def _to_grayscale_square(img, side):
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = img[top:top + s, left:left + s]
    # nearest-neighbour resample of an s x s image onto side x side
    src = np.minimum((np.arange(side) * s) // side, s - 1)
    return img[np.ix_(src, src)]


def reconcile_features(source, target_dim, target_shape=None):
    """Map the source's rows onto ``target_dim`` features.

    Image rows are averaged to grayscale, center-cropped to a square and
    nearest-resized to the target side length.
    """
    if source.dim == target_dim and (target_shape is None or source.image_shape in (None, target_shape)):
        return source.features
    if source.image_shape is None:
        raise ShapeError(f"OOD source has {source.dim} features, target needs {target_dim}, and no image shape to resize")
    if target_shape is None:
        side = int(round(math.sqrt(target_dim)))
        target_shape = (side, side)
    if len(target_shape) != 2 or target_shape[0] != target_shape[1] or target_shape[0] ** 2 != target_dim:
        raise ShapeError(f"cannot reconcile OOD images onto target shape {target_shape}")
    imgs = source.features.reshape((len(source),) + source.image_shape)
    return np.stack([_to_grayscale_square(im, target_shape[0]).ravel() for im in imgs])


def inject_ood(d, spec):
    """Append ``floor(|D| k)`` source rows (with replacement) under one random label."""
    if spec.kind != OOD_INJECT:
        raise ValueError("inject_ood needs an OOD spec")
    delta = corruption_count(len(d), spec.ratio)
    if delta == 0:
        return d
    src = spec.ood_source
    feats = reconcile_features(src, d.dim, d.image_shape if d.image_shape and len(d.image_shape) == 2 else None)
    rng = Xoshiro256(spec.seed)
    label = rng.integers(d.num_classes)
    picks = rng.integers(len(src), delta)
    return replace(
        d,
        features=np.vstack([d.features, feats[picks]]),
        labels=np.concatenate([d.labels, np.full(delta, label, np.int64)]),
        provenance=np.concatenate([d.provenance, np.full(delta, OOD, np.int8)]),
        original_labels=np.concatenate([d.original_labels, np.full(delta, -1, np.int64)]),
        ood_source=src.name,
    )


def corrupt(d, spec):
    return flip_labels(d, spec) if spec.kind == LABEL_FLIP else inject_ood(d, spec)


# -- IDX ---------------------------------------------------------------------

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_idx(path, expect_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0)
    ndim = magic & 0xFF
    head_end = 4 + 4 * ndim
    if len(raw) < head_end:
        raise IdxFormatError(f"{path}: truncated header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:head_end])
    need = int(np.prod(dims))
    if len(raw) - head_end < need:
        raise IdxFormatError(f"{path}: truncated data, expected {need} bytes", len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=head_end)
    return data.reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, name=None):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    imgs = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if len(imgs) != len(labels):
        raise IdxFormatError(f"{len(imgs)} images but {len(labels)} labels", 4)
    num_classes = num_classes or int(labels.max()) + 1
    return Dataset(
        features=imgs.reshape(len(imgs), -1) / 255.0,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        name=name or Path(images_path).stem,
        image_shape=imgs.shape[1:],
    )


def write_idx(d, images_path, labels_path):
    """Export as IDX; features are rounded back to unsigned bytes."""
    shape = d.image_shape or (d.dim,)
    if len(shape) != 2:
        raise ShapeError("IDX export needs 2-D grayscale images")
    pix = np.clip(np.rint(d.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, len(d), *shape))
        f.write(pix.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, len(d)))
        f.write(d.labels.astype(np.uint8).tobytes())


# -- built-in data -----------------------------------------------------------

def mnist5k_path():
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("the 5000-example MNIST subset ships with mlxtend; pip install 'mlxtend<0.24'")
    return Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"


def load_mnist5k(subset=None, seed=0):
    """The 5000-image MNIST subset (500 per class) bundled with mlxtend."""
    with gzip.open(mnist5k_path(), "rt") as f:
        arr = np.loadtxt(f, delimiter=",")
    d = Dataset(arr[:, :-1] / 255.0, arr[:, -1].astype(np.int64), 10, name="mnist5k", image_shape=(28, 28))
    if subset is not None and subset < len(d):
        d = d.subset(np.sort(Xoshiro256.derived(seed, "subset").sample_without_replacement(len(d), subset)))
    return d


def synth_blobs(num_classes, per_class, dim, separation, seed):
    """Unit-variance Gaussian clusters with class means ``separation`` apart along axis 0."""
    if min(num_classes, per_class, dim) <= 0 or separation <= 0:
        raise ValueError("all blob parameters must be positive")
    rng = Xoshiro256(seed)
    means = np.zeros((num_classes, dim))
    means[:, 0] = separation * np.arange(num_classes)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + rng.normal((len(labels), dim))
    return Dataset(x, labels, num_classes, name=f"blobs{num_classes}x{per_class}")


def split_for_shadows(n, num_models, seed):
    """Per-model ``(in_indices, out_indices)`` from independent fair coins per example."""
    if num_models < 2:
        raise ValueError("need at least two shadow models")
    n = len(n) if isinstance(n, Dataset) else int(n)
    splits = []
    for m in range(num_models):
        coin = Xoshiro256.derived(seed, "shadow-split", m).coins(n)
        splits.append((np.flatnonzero(coin), np.flatnonzero(~coin)))
    return splits
