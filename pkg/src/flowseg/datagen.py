"""Synthetic datasets with known ground truth.

Two generators are provided:

* chainshapes: binary label maps whose four quadrants are filled by a
  4-state Markov chain over {empty, square, plus, dot}.  The pixel
  covariance of the foreground channel is exactly enumerable (256 chain
  configurations), which makes it usable as a ground-truth oracle.
* multirater: a conditional task pairing a smooth random intensity image
  with several annotator masks obtained by thresholding the image at
  rater-specific levels.

Datasets are written as a JSON manifest plus raw little-endian C-order
binary arrays (float32 images, uint8 one-hot labels).
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

QUADRANT_STATES = ("empty", "square", "plus", "dot")
# Fixed traversal order of the chain: top-left, top-right, bottom-left, bottom-right.
QUADRANT_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))

MANIFEST_NAME = "manifest.json"
IMAGES_FILE = "images.bin"
LABELS_FILE = "labels.bin"
FORMAT_VERSION = 1

_ROW_TOL = 1e-12


class DatasetFormatError(Exception):
    """Base class for on-disk dataset errors."""


class ManifestError(DatasetFormatError):
    """Manifest missing, unparsable, or containing inconsistent fields."""


class TruncatedDataError(DatasetFormatError):
    """A referenced binary file is shorter or longer than the manifest claims."""


class DtypeMismatchError(DatasetFormatError):
    """A manifest declares an element dtype the reader does not support."""


@dataclass(frozen=True)
class TransitionMatrix:
    """Doubly stochastic 4x4 transition matrix between quadrant states."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.shape != (4, 4):
            raise ValueError(f"transition matrix must be 4x4, got {entries.shape}")
        if np.any(entries < 0.0) or np.any(entries > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        row = entries.sum(axis=1)
        col = entries.sum(axis=0)
        if np.any(np.abs(row - 1.0) > _ROW_TOL):
            raise ValueError(f"rows must sum to 1 within {_ROW_TOL}, got {row}")
        if np.any(np.abs(col - 1.0) > _ROW_TOL):
            raise ValueError(f"columns must sum to 1 within {_ROW_TOL}, got {col}")
        object.__setattr__(self, "entries", entries)


def default_transition() -> TransitionMatrix:
    """Default doubly stochastic transition matrix between quadrant states."""
    return TransitionMatrix(
        np.array(
            [
                [1 / 4, 1 / 4, 1 / 4, 1 / 4],
                [1 / 4, 3 / 40, 27 / 80, 27 / 80],
                [1 / 4, 27 / 80, 3 / 40, 27 / 80],
                [1 / 4, 27 / 80, 27 / 80, 3 / 40],
            ]
        )
    )


def uniform_init() -> np.ndarray:
    return np.full(4, 0.25)


@dataclass(frozen=True)
class ShapeAtlas:
    """Binary q x q templates for the three shapes; the empty state is all-zero.

    The stacked (shape - empty) difference vectors must be linearly
    independent so that each quadrant contributes exactly 3 covariance
    dimensions (12 in total over the four quadrants).
    """

    quadrant_size: int
    templates: np.ndarray  # (3, q, q) uint8, order (square, plus, dot)

    def __post_init__(self):
        q = int(self.quadrant_size)
        tmpl = np.asarray(self.templates, dtype=np.uint8)
        if q < 2:
            raise ValueError("quadrant_size must be >= 2")
        if tmpl.shape != (3, q, q):
            raise ValueError(f"templates must have shape (3, {q}, {q}), got {tmpl.shape}")
        if not np.isin(tmpl, (0, 1)).all():
            raise ValueError("templates must be binary")
        flat = tmpl.reshape(3, -1).astype(np.float64)
        if np.linalg.matrix_rank(flat) != 3:
            raise ValueError("shape templates are not affinely independent of the empty state")
        object.__setattr__(self, "quadrant_size", q)
        object.__setattr__(self, "templates", tmpl)

    def state_pixels(self, state: int) -> np.ndarray:
        """q x q binary pixels for a state index (0 = empty)."""
        if state == 0:
            return np.zeros((self.quadrant_size, self.quadrant_size), dtype=np.uint8)
        return self.templates[state - 1]


def default_atlas(quadrant_size: int = 8) -> ShapeAtlas:
    """Centred square / plus / dot templates scaled to the quadrant size.

    square: filled (q-2)x(q-2) block; plus: two crossing bars of length q-2
    (2 pixels wide for q >= 6, else 1); dot: small centre block.
    """
    q = int(quadrant_size)
    if q < 4:
        raise ValueError("default templates need quadrant_size >= 4")
    square = np.zeros((q, q), dtype=np.uint8)
    square[1 : q - 1, 1 : q - 1] = 1

    bar = 2 if q >= 6 else 1
    lo = (q - bar) // 2
    plus = np.zeros((q, q), dtype=np.uint8)
    plus[lo : lo + bar, 1 : q - 1] = 1
    plus[1 : q - 1, lo : lo + bar] = 1

    dot_size = 2 if q >= 6 else 1
    dlo = (q - dot_size) // 2
    dot = np.zeros((q, q), dtype=np.uint8)
    dot[dlo : dlo + dot_size, dlo : dlo + dot_size] = 1

    return ShapeAtlas(q, np.stack([square, plus, dot]))


@dataclass(frozen=True)
class LabelMap:
    """One-hot category field over a pixel grid, stored as (k, d)."""

    values: np.ndarray
    classes: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.uint8)
        if values.ndim != 2 or values.shape[0] != self.classes:
            raise ValueError(f"expected ({self.classes}, d) one-hot array, got {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("label map entries must be 0/1")
        if not np.array_equal(values.sum(axis=0), np.ones(values.shape[1], dtype=np.uint64)):
            raise ValueError("each pixel column must sum to exactly 1")
        object.__setattr__(self, "values", values)


def _check_init(init) -> np.ndarray:
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (4,):
        raise ValueError("initial state distribution must have 4 entries")
    if np.any(init < 0.0):
        raise ValueError("initial state probabilities must be nonnegative")
    if abs(init.sum() - 1.0) > 1e-9:
        raise ValueError(f"initial state distribution must sum to 1 within 1e-9, got {init.sum()}")
    return init


def sample_state_chains(rng: np.random.Generator, trans: TransitionMatrix, init, count: int) -> np.ndarray:
    """Draw `count` chains of 4 quadrant states, vectorised over the batch."""
    init = _check_init(init)
    cum_init = np.cumsum(init)
    cum_rows = np.cumsum(trans.entries, axis=1)
    states = np.empty((count, 4), dtype=np.int64)
    u = rng.random(count)
    states[:, 0] = np.minimum(np.searchsorted(cum_init, u, side="right"), 3)
    for t in range(1, 4):
        u = rng.random(count)
        rows = cum_rows[states[:, t - 1]]
        states[:, t] = np.minimum((u[:, None] >= rows).sum(axis=1), 3)
    return states


def states_to_foreground(states: np.ndarray, atlas: ShapeAtlas) -> np.ndarray:
    """Render (count, 4) state chains into (count, 2q, 2q) binary images."""
    q = atlas.quadrant_size
    count = states.shape[0]
    # Lookup table: per-state quadrant pixels, empty first.
    lut = np.concatenate([np.zeros((1, q, q), dtype=np.uint8), atlas.templates])
    out = np.zeros((count, 2 * q, 2 * q), dtype=np.uint8)
    for pos, (r, c) in enumerate(QUADRANT_ORDER):
        out[:, r * q : (r + 1) * q, c * q : (c + 1) * q] = lut[states[:, pos]]
    return out


def foreground_to_onehot(fg: np.ndarray) -> np.ndarray:
    """(..., h, w) binary foreground -> (..., 2, h, w) one-hot (background, foreground)."""
    fg = np.asarray(fg, dtype=np.uint8)
    return np.stack([1 - fg, fg], axis=-3)


def chainshapes_sample(rng: np.random.Generator, trans: TransitionMatrix, atlas: ShapeAtlas, init) -> LabelMap:
    """Draw a single label map from the quadrant Markov chain."""
    states = sample_state_chains(rng, trans, init, 1)
    fg = states_to_foreground(states, atlas)[0]
    onehot = foreground_to_onehot(fg)
    return LabelMap(onehot.reshape(2, -1), classes=2)


def chainshapes_enumerate(trans: TransitionMatrix, init) -> list[tuple[tuple[int, int, int, int], float]]:
    """All 256 quadrant-state configurations with their exact probabilities."""
    init = _check_init(init)
    entries = trans.entries
    out = []
    for cfg in itertools.product(range(4), repeat=4):
        p = init[cfg[0]]
        for a, b in zip(cfg[:-1], cfg[1:]):
            p *= entries[a, b]
        out.append((cfg, float(p)))
    return out


def chainshapes_exact_covariance(
    trans: TransitionMatrix, init, atlas: ShapeAtlas
) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of the flattened binary foreground channel.

    Enumerates all 256 configurations; the returned covariance is symmetric
    PSD up to roundoff.
    """
    configs = chainshapes_enumerate(trans, init)
    states = np.array([cfg for cfg, _ in configs], dtype=np.int64)
    probs = np.array([p for _, p in configs])
    pixels = states_to_foreground(states, atlas).reshape(len(configs), -1).astype(np.float64)
    mean = probs @ pixels
    centred = pixels - mean
    cov = (centred * probs[:, None]).T @ centred
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def empirical_foreground_covariance(fg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean/covariance of flattened binary foreground images (n, h, w)."""
    flat = fg.reshape(fg.shape[0], -1).astype(np.float64)
    mean = flat.mean(axis=0)
    centred = flat - mean
    cov = centred.T @ centred / flat.shape[0]
    return mean, 0.5 * (cov + cov.T)


def quadrant_invalid_fraction(fg: np.ndarray, atlas: ShapeAtlas, max_hamming: int = 2) -> float:
    """Fraction of quadrants farther than `max_hamming` flips from every template.

    `fg` is (n, 2q, 2q) binary foreground; each of the 4n quadrants is
    compared against the empty template and the three shapes.
    """
    q = atlas.quadrant_size
    fg = np.asarray(fg, dtype=np.uint8)
    lut = np.concatenate([np.zeros((1, q, q), dtype=np.uint8), atlas.templates]).reshape(4, -1)
    invalid = 0
    total = 0
    for r, c in QUADRANT_ORDER:
        quad = fg[:, r * q : (r + 1) * q, c * q : (c + 1) * q].reshape(fg.shape[0], -1)
        dist = (quad[:, None, :] != lut[None, :, :]).sum(axis=2).min(axis=1)
        invalid += int((dist > max_hamming).sum())
        total += fg.shape[0]
    return invalid / total


# ----------------------------------------------------------------------------
# On-disk dataset format
# ----------------------------------------------------------------------------

_SUPPORTED_DTYPES = {"float32": np.float32, "uint8": np.uint8}


@dataclass
class DatasetManifest:
    name: str
    image_count: int
    image_shape: tuple[int, int, int]
    label_shape: tuple[int, int, int]
    annotators_per_image: int
    rng_seed: int
    files: list[dict] = field(default_factory=list)
    generator: dict = field(default_factory=dict)
    byte_order: str = "little"
    array_order: str = "C"
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        payload = {
            "format_version": self.format_version,
            "name": self.name,
            "image_count": self.image_count,
            "image_shape": list(self.image_shape),
            "label_shape": list(self.label_shape),
            "annotators_per_image": self.annotators_per_image,
            "byte_order": self.byte_order,
            "array_order": self.array_order,
            "rng_seed": self.rng_seed,
            "files": self.files,
            "generator": self.generator,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str, path: str = "<memory>") -> "DatasetManifest":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: manifest is not valid JSON: {exc}") from exc
        try:
            manifest = DatasetManifest(
                name=payload["name"],
                image_count=int(payload["image_count"]),
                image_shape=tuple(payload["image_shape"]),
                label_shape=tuple(payload["label_shape"]),
                annotators_per_image=int(payload["annotators_per_image"]),
                rng_seed=int(payload["rng_seed"]),
                files=payload["files"],
                generator=payload.get("generator", {}),
                byte_order=payload.get("byte_order", "little"),
                array_order=payload.get("array_order", "C"),
                format_version=int(payload.get("format_version", FORMAT_VERSION)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: manifest missing or malformed field: {exc}") from exc
        if manifest.annotators_per_image < 1:
            raise ManifestError(f"{path}: annotators_per_image must be >= 1")
        if manifest.byte_order != "little" or manifest.array_order != "C":
            raise ManifestError(f"{path}: only little-endian C-order data is supported")
        return manifest


def _file_entry(name: str, dtype: str, shape: tuple[int, ...]) -> dict:
    return {"name": name, "dtype": dtype, "shape": list(shape), "offset": 0}


def write_dataset(
    out_dir: str,
    name: str,
    images: np.ndarray,
    labels: np.ndarray,
    rng_seed: int,
    generator: dict | None = None,
) -> DatasetManifest:
    """Write images (n, c, h, w) float32 and labels (n, r, k, h, w) uint8 plus manifest."""
    os.makedirs(out_dir, exist_ok=True)
    images = np.ascontiguousarray(images, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 4 or labels.ndim != 5 or images.shape[0] != labels.shape[0]:
        raise ValueError(f"bad dataset arrays: images {images.shape}, labels {labels.shape}")
    for fname, arr in ((IMAGES_FILE, images), (LABELS_FILE, labels)):
        path = os.path.join(out_dir, fname)
        try:
            with open(path, "wb") as fh:
                fh.write(arr.tobytes(order="C"))
        except OSError as exc:
            raise DatasetFormatError(f"failed to write {path}: {exc}") from exc
    manifest = DatasetManifest(
        name=name,
        image_count=images.shape[0],
        image_shape=tuple(images.shape[1:]),
        label_shape=tuple(labels.shape[2:]),
        annotators_per_image=labels.shape[1],
        rng_seed=rng_seed,
        files=[
            _file_entry(IMAGES_FILE, "float32", images.shape),
            _file_entry(LABELS_FILE, "uint8", labels.shape),
        ],
        generator=generator or {},
    )
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json() + "\n")
    return manifest


def chainshapes_generate(
    out_dir: str,
    seed: int,
    count: int,
    quadrant_size: int = 8,
    trans: TransitionMatrix | None = None,
    init=None,
) -> DatasetManifest:
    """Generate a quadrant-chain dataset on disk; deterministic given the seed.

    The stored image is the foreground channel as float32, so unconditional
    models can ignore it while plotting tools still have pixels to show.
    """
    trans = trans or default_transition()
    init = uniform_init() if init is None else np.asarray(init, dtype=np.float64)
    atlas = default_atlas(quadrant_size)
    rng = np.random.default_rng(seed)
    states = sample_state_chains(rng, trans, init, count)
    fg = states_to_foreground(states, atlas)
    labels = foreground_to_onehot(fg)[:, None]  # one annotator
    images = fg[:, None].astype(np.float32)
    generator = {
        "kind": "chainshapes",
        "quadrant_size": quadrant_size,
        "transition": trans.entries.tolist(),
        "init": init.tolist(),
        "templates": atlas.templates.tolist(),
    }
    return write_dataset(out_dir, "chainshapes", images, labels, seed, generator)


def atlas_from_manifest(manifest: DatasetManifest) -> ShapeAtlas:
    gen = manifest.generator
    if gen.get("kind") != "chainshapes":
        raise ManifestError("manifest does not describe a quadrant-chain dataset")
    return ShapeAtlas(int(gen["quadrant_size"]), np.asarray(gen["templates"], dtype=np.uint8))


def transition_from_manifest(manifest: DatasetManifest) -> tuple[TransitionMatrix, np.ndarray]:
    gen = manifest.generator
    if gen.get("kind") != "chainshapes":
        raise ManifestError("manifest does not describe a quadrant-chain dataset")
    return TransitionMatrix(np.asarray(gen["transition"])), np.asarray(gen["init"], dtype=np.float64)


def _smooth_field(rng: np.random.Generator, h: int, w: int, coarse: int = 4) -> np.ndarray:
    """Smooth random blob field in roughly [0, 1], via upsampled coarse noise."""
    grid = rng.standard_normal((coarse, coarse))
    fld = ndimage.zoom(grid, (h / coarse, w / coarse), order=3, mode="reflect", grid_mode=True)
    fld = ndimage.gaussian_filter(fld, sigma=min(h, w) / 16.0, mode="reflect")
    lo, hi = fld.min(), fld.max()
    return (fld - lo) / (hi - lo + 1e-12)

def multirater_generate(
    out_dir: str,
    seed: int,
    count: int,
    image_shape: tuple[int, int, int] = (1, 32, 32),
    rater_count: int = 4,
    threshold_spread: float = 0.10,
) -> DatasetManifest:
    """Generate the conditional multi-annotator task on disk.

    Each image is a smooth random blob field; each rater thresholds it at a
    level drawn around a per-image base level, so annotator masks are nested
    whenever their levels are ordered.
    """
    if rater_count < 2:
        raise ValueError("rater_count must be >= 2")
    c, h, w = image_shape
    if c != 1:
        raise ValueError("multirater images are single-channel")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 1, h, w), dtype=np.float32)
    labels = np.empty((count, rater_count, 2, h, w), dtype=np.uint8)
    for i in range(count):
        fld = _smooth_field(rng, h, w)
        base = rng.uniform(0.40, 0.60)
        offsets = rng.normal(0.0, threshold_spread, size=rater_count)
        levels = np.clip(base + offsets, 0.05, 0.95)
        thresholds = np.quantile(fld, levels)
        masks = (fld[None] > thresholds[:, None, None]).astype(np.uint8)
        images[i, 0] = fld.astype(np.float32)
        labels[i] = foreground_to_onehot(masks)
    generator = {
        "kind": "multirater",
        "rater_count": rater_count,
        "threshold_spread": threshold_spread,
    }
    return write_dataset(out_dir, "multirater", images, labels, seed, generator)


def load_manifest(manifest_path: str) -> DatasetManifest:
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    return DatasetManifest.from_json(text, manifest_path)


def _load_file(dirname: str, entry: dict) -> np.ndarray:
    dtype_name = entry.get("dtype")
    if dtype_name not in _SUPPORTED_DTYPES:
        raise DtypeMismatchError(
            f"{entry.get('name')}: unsupported element dtype {dtype_name!r}; "
            f"expected one of {sorted(_SUPPORTED_DTYPES)}"
        )
    dtype = np.dtype(_SUPPORTED_DTYPES[dtype_name]).newbyteorder("<")
    shape = tuple(int(s) for s in entry["shape"])
    path = os.path.join(dirname, entry["name"])
    expected = int(np.prod(shape)) * dtype.itemsize
    try:
        actual = os.path.getsize(path)
    except OSError as exc:
        raise TruncatedDataError(f"{path}: missing data file: {exc}") from exc
    if actual != expected:
        raise TruncatedDataError(f"{path}: expected {expected} bytes, found {actual}")
    data = np.fromfile(path, dtype=dtype, offset=int(entry.get("offset", 0)))
    return data.reshape(shape)


def load_arrays(manifest_path: str) -> tuple[DatasetManifest, np.ndarray, np.ndarray]:
    """Load and validate the full dataset: (manifest, images, labels)."""
    manifest = load_manifest(manifest_path)
    dirname = manifest_path if os.path.isdir(manifest_path) else os.path.dirname(manifest_path)
    by_name = {entry["name"]: entry for entry in manifest.files}
    for required in (IMAGES_FILE, LABELS_FILE):
        if required not in by_name:
            raise ManifestError(f"manifest file list is missing {required}")
    images = _load_file(dirname, by_name[IMAGES_FILE])
    labels = _load_file(dirname, by_name[LABELS_FILE])
    expected_images = (manifest.image_count, *manifest.image_shape)
    expected_labels = (manifest.image_count, manifest.annotators_per_image, *manifest.label_shape)
    if images.shape != expected_images:
        raise ManifestError(f"images shape {images.shape} does not match manifest {expected_images}")
    if labels.shape != expected_labels:
        raise ManifestError(f"labels shape {labels.shape} does not match manifest {expected_labels}")
    return manifest, images, labels


def dataset_read(manifest_path: str):
    """Yield (image, labels) pairs; labels has shape (annotators, k, h, w)."""
    _, images, labels = load_arrays(manifest_path)
    for img, lab in zip(images, labels):
        yield img, lab
