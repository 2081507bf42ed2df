"""Dataset loading, synthesis and split planning.

Produces the three-way target/shadow/probe splits and the sampled updating
sets every downstream stage consumes. Image benchmarks are read from disk;
two seeded synthetic generators (weekly check-in profiles, rendered digit
glyphs) cover environments without the benchmark files.
"""

from __future__ import annotations

import gzip
import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DatasetIOError, UsageError

CHECKIN_FEATURE_DIM = 24 * 7  # hourly counts over one week


@dataclass
class LabeledDataset:
    """A fixed set of feature arrays with class labels in ``[0, num_classes)``.

    Image samples are channel-first floats in ``[0, 1]``; tabular samples are
    flat float vectors in the same range. ``source_indices`` track where each
    sample sits in the dataset it was sliced from, so split manifests stay
    small and disjointness is checkable on indices.
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    source_indices: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise UsageError(
                f"samples ({len(self.samples)}) and labels ({len(self.labels)}) differ in length")
        if self.num_classes <= 0:
            raise UsageError("num_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise UsageError("label index outside [0, num_classes)")
        if len(self.samples) and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise UsageError("feature values must lie in [0, 1]")
        if self.source_indices is not None:
            self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
            if len(self.source_indices) != len(self.samples):
                raise UsageError("source_indices length mismatch")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, indices: np.ndarray | list[int], name: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        src = self.source_indices[indices] if self.source_indices is not None else indices
        return LabeledDataset(
            samples=self.samples[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            name=name if name is not None else self.name,
            source_indices=src,
        )


@dataclass(frozen=True)
class SplitPlan:
    """Sizes and seed for the disjoint target/shadow/probe split."""

    target_size: int
    shadow_size: int
    probe_size: int = 100
    seed: int = 0


@dataclass
class UpdatingSetBatch:
    """m sampled updating sets, each an index list into one source pool."""

    sets: np.ndarray  # (m, cardinality) indices into the pool
    cardinality: int

    def __post_init__(self) -> None:
        self.sets = np.asarray(self.sets, dtype=np.int64)
        if self.sets.ndim != 2 or self.sets.shape[1] != self.cardinality:
            raise UsageError("each updating set must have exactly `cardinality` members")

    def __len__(self) -> int:
        return len(self.sets)


# ---------------------------------------------------------------------------
# benchmark image loading

_IDX_IMAGE_MAGIC = 2051
_IDX_LABEL_MAGIC = 2049


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            header = fh.read(4)
            if len(header) != 4:
                raise DatasetIOError(f"truncated IDX file: {path}")
            magic = int.from_bytes(header, "big")
            if magic == _IDX_IMAGE_MAGIC:
                ndim = 3
            elif magic == _IDX_LABEL_MAGIC:
                ndim = 1
            else:
                raise DatasetIOError(f"corrupt IDX file (magic {magic}): {path}")
            dims = [int.from_bytes(fh.read(4), "big") for _ in range(ndim)]
            data = np.frombuffer(fh.read(), dtype=np.uint8)
    except OSError as exc:
        if isinstance(exc, DatasetIOError):
            raise
        raise DatasetIOError(f"cannot read IDX file: {path}: {exc}") from exc
    expected = int(np.prod(dims))
    if data.size != expected:
        raise DatasetIOError(f"corrupt IDX file (size mismatch): {path}")
    return data.reshape(dims)


def _find_file(candidates: list[Path]) -> Path:
    for cand in candidates:
        if cand.is_file():
            return cand
    raise DatasetIOError(f"dataset file not found: {candidates[0]}")


def _load_mnist(root: Path) -> LabeledDataset:
    dirs = [root, root / "MNIST" / "raw", root / "mnist"]
    parts = []
    labels = []
    for stem_img, stem_lab in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ]:
        img_path = _find_file([d / n for d in dirs for n in (stem_img, stem_img + ".gz")])
        lab_path = _find_file([d / n for d in dirs for n in (stem_lab, stem_lab + ".gz")])
        parts.append(_read_idx(img_path))
        labels.append(_read_idx(lab_path))
    images = np.concatenate(parts).astype(np.float32) / 255.0
    return LabeledDataset(
        samples=images[:, None, :, :],
        labels=np.concatenate(labels),
        num_classes=10,
        name="mnist",
    )


def _load_cifar10(root: Path) -> LabeledDataset:
    dirs = [root / "cifar-10-batches-py", root]
    names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    samples = []
    labels = []
    for n in names:
        path = _find_file([d / n for d in dirs])
        try:
            with open(path, "rb") as fh:
                batch = pickle.load(fh, encoding="bytes")
            raw = np.asarray(batch[b"data"], dtype=np.uint8)
            labs = np.asarray(batch[b"labels"], dtype=np.int64)
        except (OSError, pickle.UnpicklingError, KeyError, ValueError) as exc:
            raise DatasetIOError(f"corrupt CIFAR-10 batch: {path}: {exc}") from exc
        samples.append(raw.reshape(-1, 3, 32, 32))
        labels.append(labs)
    images = np.concatenate(samples).astype(np.float32) / 255.0
    return LabeledDataset(samples=images, labels=np.concatenate(labels),
                          num_classes=10, name="cifar10")


def load_image_dataset(name: str, root: str | Path) -> LabeledDataset:
    """Load a benchmark image dataset (``mnist`` or ``cifar10``) from ``root``.

    Pixel values are scaled to ``[0, 1]``; train and test portions are
    concatenated into one pool that split planning carves up.
    """
    root = Path(root)
    if name == "mnist":
        return _load_mnist(root)
    if name == "cifar10":
        return _load_cifar10(root)
    raise UsageError(f"unknown image dataset {name!r}; supported: mnist, cifar10")


# ---------------------------------------------------------------------------
# synthetic check-in surrogate

def synthesize_checkin_dataset(num_locations: int, num_classes: int, seed: int,
                               noise_scale: float = 0.08,
                               bumps_per_class: tuple[int, int] = (2, 4)) -> LabeledDataset:
    """Generate location check-in profiles: 168 hourly counts per location.

    Each class owns a fixed mixture of Gaussian bumps over the week (drawn
    once from ``seed``); locations jitter that profile in phase and gain,
    add noise, clip at zero and max-normalize, giving features in [0, 1]
    with class-conditional temporal structure.
    """
    if num_locations <= 0:
        raise UsageError("num_locations must be positive")
    if num_classes < 2:
        raise UsageError("num_classes must be at least 2")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC0FFEE])))
    lo, hi = bumps_per_class
    hours = np.arange(CHECKIN_FEATURE_DIM, dtype=np.float64)

    class_bumps = []
    for _ in range(num_classes):
        n_bumps = int(rng.integers(lo, hi + 1))
        centers = rng.uniform(0, CHECKIN_FEATURE_DIM, n_bumps)
        widths = rng.uniform(3.0, 12.0, n_bumps)
        amps = rng.uniform(0.5, 1.5, n_bumps)
        class_bumps.append((centers, widths, amps))

    labels = np.arange(num_locations, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    samples = np.zeros((num_locations, CHECKIN_FEATURE_DIM), dtype=np.float64)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        centers, widths, amps = class_bumps[c]
        shifts = rng.normal(0.0, 2.0, idx.size)
        gains = rng.uniform(0.7, 1.3, idx.size)
        # (n, hours, bumps) Gaussian mixture with per-location phase shift
        t = hours[None, :, None] - shifts[:, None, None]
        prof = (amps[None, None, :]
                * np.exp(-0.5 * ((t - centers[None, None, :]) / widths[None, None, :]) ** 2))
        block = gains[:, None] * prof.sum(axis=2)
        block += rng.normal(0.0, noise_scale, block.shape)
        samples[idx] = block
    samples = np.clip(samples, 0.0, None)
    peaks = samples.max(axis=1, keepdims=True)
    peaks[peaks == 0.0] = 1.0
    samples /= peaks
    return LabeledDataset(samples=samples.astype(np.float32), labels=labels,
                          num_classes=num_classes, name="checkin")


# ---------------------------------------------------------------------------
# synthetic digit surrogate (stand-in when MNIST files are unavailable)

_GLYPHS = {
    0: (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    1: ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    2: (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    3: (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    4: ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    5: ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    6: (".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."),
    7: ("#####", "....#", "...#.", "...#.", "..#..", "..#..", "..#.."),
    8: (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    9: (".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."),
}

_GLYPH_ARRAYS = {
    d: np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows], dtype=np.float64)
    for d, rows in _GLYPHS.items()
}


def _render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    canvas = np.zeros((28, 28), dtype=np.float64)
    glyph = np.kron(_GLYPH_ARRAYS[digit], np.ones((3, 3)))  # 21 x 15
    canvas[3:24, 6:21] = glyph
    angle = np.deg2rad(rng.uniform(-22.0, 22.0))
    scale = rng.uniform(0.85, 1.15)
    shift = rng.uniform(-2.5, 2.5, size=2)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    fwd = scale * np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    inv = np.linalg.inv(fwd)
    center = np.array([13.5, 13.5])
    offset = center - inv @ (center + shift)
    img = ndimage.affine_transform(canvas, inv, offset=offset, order=1, mode="constant")
    img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.5, 0.9))
    img *= rng.uniform(0.75, 1.0)
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize_digits_dataset(num_samples: int, seed: int) -> LabeledDataset:
    """Render a 10-class, 1x28x28 handwritten-style digit dataset.

    Glyph templates go through per-sample rotation, scaling, shift, blur and
    noise, so classes keep intra-class variation. Deterministic given seed.
    """
    if num_samples <= 0:
        raise UsageError("num_samples must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD161])))
    labels = np.arange(num_samples, dtype=np.int64) % 10
    rng.shuffle(labels)
    samples = np.empty((num_samples, 1, 28, 28), dtype=np.float32)
    for i, lab in enumerate(labels):
        samples[i, 0] = _render_digit(int(lab), rng)
    return LabeledDataset(samples=samples, labels=labels, num_classes=10, name="digits")


# ---------------------------------------------------------------------------
# splits

def split_three_way(ds: LabeledDataset, plan: SplitPlan
                    ) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Carve disjoint target/shadow/probe subsets, deterministic in the seed."""
    total = plan.target_size + plan.shadow_size + plan.probe_size
    if total > len(ds):
        raise ConfigurationError(
            f"split sizes sum to {total} but dataset has only {len(ds)} samples")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([plan.seed, 0x5917])))
    perm = rng.permutation(len(ds))
    t_idx = perm[:plan.target_size]
    s_idx = perm[plan.target_size:plan.target_size + plan.shadow_size]
    p_idx = perm[plan.target_size + plan.shadow_size:total]
    return (ds.subset(t_idx, name=f"{ds.name}/target"),
            ds.subset(s_idx, name=f"{ds.name}/shadow"),
            ds.subset(p_idx, name=f"{ds.name}/probe"))


def split_train_update(ds: LabeledDataset, train_size: int
                       ) -> tuple[LabeledDataset, LabeledDataset]:
    """Split one side's pool into a training slice and an update pool."""
    if train_size >= len(ds):
        raise ConfigurationError(
            f"train_size {train_size} leaves no update pool in a {len(ds)}-sample split")
    idx = np.arange(len(ds))
    return (ds.subset(idx[:train_size], name=f"{ds.name}/train"),
            ds.subset(idx[train_size:], name=f"{ds.name}/update-pool"))


def sample_updating_sets(pool: LabeledDataset, cardinality: int, m: int,
                         seed: int) -> UpdatingSetBatch:
    """Draw m updating sets of `cardinality` indices, uniform without
    replacement within each set. Sets may overlap one another."""
    if m < 1:
        raise UsageError("m must be at least 1")
    if cardinality < 1:
        raise UsageError("cardinality must be at least 1")
    if cardinality > len(pool):
        raise ConfigurationError(
            f"cardinality {cardinality} exceeds pool size {len(pool)}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5E75])))
    sets = np.stack([rng.choice(len(pool), size=cardinality, replace=False)
                     for _ in range(m)])
    return UpdatingSetBatch(sets=sets, cardinality=cardinality)


# ---------------------------------------------------------------------------
# split manifests

def save_split_manifest(path: str | Path, dataset_name: str, seed: int,
                        target_indices: np.ndarray, shadow_indices: np.ndarray,
                        probe_indices: np.ndarray,
                        extra: dict | None = None) -> None:
    """Persist a three-way split as JSON: dataset name, seed, three index arrays."""
    doc = {
        "dataset": dataset_name,
        "seed": seed,
        "target_indices": np.asarray(target_indices).tolist(),
        "shadow_indices": np.asarray(shadow_indices).tolist(),
        "probe_indices": np.asarray(probe_indices).tolist(),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_split_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"split manifest not found: {path}")
    doc = json.loads(path.read_text())
    for key in ("target_indices", "shadow_indices", "probe_indices"):
        doc[key] = np.asarray(doc[key], dtype=np.int64)
    return doc
