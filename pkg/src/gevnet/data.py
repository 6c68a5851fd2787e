"""MNIST ingestion, projection onto icospheres, rotation augmentation and mixup."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .container import read_container, write_container
from .errors import ContractViolation, FormatError, ShapeMismatchError
from .geometry import IcosphereGrid, build_icosphere, build_rotation_plan, random_rotation, vertex_areas
from .network import rotate_field
from .steerable import RHO0

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CAP_ANGLE = np.pi / 3
NUM_CLASSES = 10
DATASET_KIND = "dataset"


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) != count:
        raise FormatError(f"{path}: payload has {len(body)} bytes, header promises {count}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= NUM_CLASSES:
        raise FormatError("label outside 0..9")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` or labels ``(n,)`` in IDX format."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ContractViolation("IDX writer expects uint8 data")
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}.get(array.ndim)
    if magic is None:
        raise ContractViolation("IDX writer supports 1-D labels or 3-D images")
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def cap_mask(grid: IcosphereGrid) -> np.ndarray:
    return grid.vertices[:, 2] >= np.cos(CAP_ANGLE) - 1e-12


def _pixel_coords(grid: IcosphereGrid, shape) -> tuple[np.ndarray, np.ndarray]:
    inside = cap_mask(grid)
    p = grid.vertices[inside]
    half = np.tan(CAP_ANGLE)  # the image square circumscribes the cap's gnomonic disk
    X, Y = p[:, 0] / p[:, 2], p[:, 1] / p[:, 2]
    rows, cols = shape
    col = (X + half) / (2 * half) * cols - 0.5
    row = (half - Y) / (2 * half) * rows - 0.5
    return inside, np.stack([row, col])


def project_to_sphere(image: np.ndarray, grid: IcosphereGrid) -> np.ndarray:
    """Gnomonic projection from the north-pole tangent plane; zero outside the cap.

    Returns a ``(V,)`` field.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatchError("expected a single 2-D image")
    inside, coords = _pixel_coords(grid, image.shape)
    out = np.zeros(grid.num_vertices)
    out[inside] = map_coordinates(image, coords, order=1, mode="nearest")
    return out


def project_images(images: np.ndarray, grid: IcosphereGrid) -> np.ndarray:
    """Project a stack ``(n, rows, cols)`` to fields ``(n, V)``."""
    images = np.asarray(images, dtype=np.float64)
    inside, coords = _pixel_coords(grid, images.shape[1:])
    out = np.zeros((images.shape[0], grid.num_vertices))
    for i, img in enumerate(images):
        out[i, inside] = map_coordinates(img, coords, order=1, mode="nearest")
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class SphericalDataset:
    fields: np.ndarray  # (n, V, 1)
    labels: np.ndarray  # (n, 10) soft labels
    level: int
    rotated: bool = False
    mixed: bool = False

    def __post_init__(self):
        if self.fields.ndim != 3 or self.fields.shape[2] != 1:
            raise ShapeMismatchError("dataset fields must be (n, V, 1)")
        if self.fields.shape[0] != self.labels.shape[0]:
            raise ShapeMismatchError("fields and labels differ in length")
        if self.fields.shape[1] != 10 * 4**self.level + 2:
            raise ShapeMismatchError("vertex count does not match level")
        if np.max(np.abs(self.labels.sum(axis=1) - 1.0), initial=0.0) > 1e-12:
            raise ContractViolation("soft labels must sum to 1")

    def __len__(self) -> int:
        return self.fields.shape[0]

    @property
    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, idx) -> "SphericalDataset":
        return SphericalDataset(self.fields[idx], self.labels[idx], self.level, self.rotated, self.mixed)


def make_dataset(images: np.ndarray, labels: np.ndarray, level: int) -> SphericalDataset:
    grid = build_icosphere(level)
    fields = project_images(images, grid)[..., None]
    return SphericalDataset(fields, one_hot(labels), level)


def stratified_subset(labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Indices of a seeded, label-balanced subset of size ``n`` (sorted)."""
    labels = np.asarray(labels)
    if n >= len(labels):
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per = np.full(len(classes), n // len(classes))
    per[: n - per.sum()] += 1
    picks = []
    for c, k in zip(classes, per):
        idx = np.nonzero(labels == c)[0]
        if k > len(idx):
            raise ContractViolation(f"class {c} has only {len(idx)} samples, {k} requested")
        picks.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(picks))


def random_rotation_augment(dataset: SphericalDataset, seed: int, force_identity: bool = False) -> SphericalDataset:
    """Apply an independent Haar-random rotation to every sample."""
    rng = np.random.default_rng(seed)
    grid = build_icosphere(dataset.level)
    out = np.empty_like(dataset.fields)
    for i in range(len(dataset)):
        R = random_rotation(rng)
        if force_identity:
            R = np.eye(3)
        op = build_rotation_plan(R, grid)
        out[i] = rotate_field(op, dataset.fields[i][:, :, None], RHO0)[:, :, 0]
    return SphericalDataset(out, dataset.labels, dataset.level, True, dataset.mixed)


def field_mass(fields: np.ndarray, level: int) -> np.ndarray:
    """Area-weighted integral of scalar fields ``(..., V[, 1])`` over the sphere."""
    fields = np.asarray(fields)
    if fields.ndim >= 2 and fields.shape[-1] == 1:
        fields = fields[..., 0]
    return fields @ vertex_areas(build_icosphere(level))


def mixup_batch(x1, y1, x2, y2, lam: float):
    """Convex combination of two batches and their soft labels."""
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation("mixup weight must lie in [0, 1]")
    x1, x2, y1, y2 = map(np.asarray, (x1, x2, y1, y2))
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ShapeMismatchError("mixup operands differ in shape")
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


def save_datasets(path, train: SphericalDataset, test: SphericalDataset, meta: dict | None = None) -> None:
    m = {
        "kind": DATASET_KIND,
        "level": train.level,
        "train_rotated": train.rotated,
        "test_rotated": test.rotated,
    }
    m.update(meta or {})
    write_container(
        path,
        m,
        {"train_x": train.fields, "train_y": train.labels, "test_x": test.fields, "test_y": test.labels},
    )


def load_datasets(path) -> tuple[SphericalDataset, SphericalDataset, dict]:
    meta, arrays = read_container(path)
    if meta.get("kind") != DATASET_KIND:
        raise FormatError(f"{path}: not a dataset container")
    try:
        level = int(meta["level"])
        train = SphericalDataset(arrays["train_x"], arrays["train_y"], level, bool(meta["train_rotated"]))
        test = SphericalDataset(arrays["test_x"], arrays["test_y"], level, bool(meta["test_rotated"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing entry {exc}") from exc
    return train, test, meta


def prepare_datasets(
    train_images, train_labels, test_images, test_labels,
    level: int, regime: str = "NR", test_regime: str | None = None,
    n_train: int = 5000, n_test: int = 1000, seed: int = 0,
) -> tuple[SphericalDataset, SphericalDataset]:
    """Stratified subsets, projection and optional rotation (``"R"``)."""
    test_regime = test_regime or regime
    for r in (regime, test_regime):
        if r not in ("NR", "R"):
            raise ContractViolation(f"regime must be NR or R, got {r!r}")
    tr = stratified_subset(train_labels, n_train, seed)
    te = stratified_subset(test_labels, n_test, seed + 1)
    train = make_dataset(train_images[tr], train_labels[tr], level)
    test = make_dataset(test_images[te], test_labels[te], level)
    if regime == "R":
        train = random_rotation_augment(train, seed + 2)
    if test_regime == "R":
        test = random_rotation_augment(test, seed + 3)
    return train, test
