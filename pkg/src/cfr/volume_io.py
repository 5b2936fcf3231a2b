"""Volume/label persistence, dataset manifests and the synthetic phantom generator.

All volumes live on disk in the "CFRV" container (see `write_volume`), a
deliberately tiny format so the pipeline has zero imaging dependencies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CFRV"
VERSION = 1
DTYPE_IMAGE = 0   # little-endian float32
DTYPE_LABEL = 1   # uint8 class ids

_HEADER = struct.Struct("<4sBBBBIIII")  # magic, version, dtype, 2 reserved, H, W, D, K

# refuse headers claiming more voxels than this (corrupt / hostile files)
_MAX_VOXELS = 2 ** 33

SPLIT_LABELED = "labeled-train"
SPLIT_UNLABELED = "unlabeled-train"
SPLIT_TEST = "test"


class VolumeFormatError(ValueError):
    """Raised when a CFRV file fails to parse."""


class PhantomGenerationError(RuntimeError):
    """Raised when ellipsoid placement fails after bounded retries."""


@dataclass
class Volume3D:
    """H x W x D scalar intensity volume, H == W, finite float32 values."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        h, w, d = self.data.shape
        if min(h, w, d) < 1:
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        if h != w:
            raise ValueError(f"volume slices must be square, got H={h}, W={w}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite intensities")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """H x W x D integer class-id volume with values in {0..num_classes-1}."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"label volume must be integer, got {data.dtype}")
        if data.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"label dims must be positive, got {data.shape}")
        if not 2 <= self.num_classes <= 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        lo, hi = int(data.min()), int(data.max())
        if lo < 0 or hi >= self.num_classes:
            raise ValueError(
                f"label values [{lo}, {hi}] out of range for K={self.num_classes}"
            )
        self.data = data.astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def write_volume(path, vol: Volume3D | LabelVolume) -> None:
    """Serialize a volume to a CFRV file (bit-exact round trip with `read_volume`)."""
    path = Path(path)
    if isinstance(vol, Volume3D):
        dtype, k = DTYPE_IMAGE, 0
        payload = vol.data.astype("<f4").tobytes(order="C")
    elif isinstance(vol, LabelVolume):
        dtype, k = DTYPE_LABEL, vol.num_classes
        payload = vol.data.astype(np.uint8).tobytes(order="C")
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    h, w, d = vol.dims
    header = _HEADER.pack(MAGIC, VERSION, dtype, 0, 0, h, w, d, k)
    path.write_bytes(header + payload)


def read_volume(path) -> Volume3D | LabelVolume:
    """Parse a CFRV file back into a Volume3D or LabelVolume."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dtype, _, _, h, w, d, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if min(h, w, d) < 1:
        raise VolumeFormatError(f"{path}: zero dimension in header ({h}x{w}x{d})")
    n_voxels = h * w * d
    if n_voxels > _MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims overflow ({h}x{w}x{d})")
    if dtype == DTYPE_IMAGE:
        itemsize = 4
    elif dtype == DTYPE_LABEL:
        itemsize = 1
    else:
        raise VolumeFormatError(f"{path}: unknown dtype code {dtype}")
    expected = _HEADER.size + n_voxels * itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: truncated payload (expected {expected} bytes, got {len(raw)})"
        )
    body = raw[_HEADER.size:]
    if dtype == DTYPE_IMAGE:
        arr = np.frombuffer(body, dtype="<f4").reshape(h, w, d)
        return Volume3D(arr.copy())
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, d)
    if k < 2:
        raise VolumeFormatError(f"{path}: label file with K={k}")
    return LabelVolume(arr.copy(), num_classes=k)


# ---------------------------------------------------------------------------
# synthetic phantoms

_AXIS_FRAC = (0.14, 0.30)         # ellipsoid semi-axis as a fraction of each dim
_MIN_CLASS_FRAC = 0.005           # every foreground class covers >= 0.5% voxels
_PLACEMENT_RETRIES = 100

# per-class mean intensities are spaced evenly across this range
_INTENSITY_LO = 0.2
_INTENSITY_HI = 0.9


def class_mean_intensities(num_classes: int) -> np.ndarray:
    return np.linspace(_INTENSITY_LO, _INTENSITY_HI, num_classes, dtype=np.float64)


def generate_phantom(
    seed: int,
    dims: tuple[int, int, int],
    num_classes: int,
    noise_sigma: float = 0.05,
) -> tuple[Volume3D, LabelVolume]:
    """Generate one synthetic volume: K-1 disjoint ellipsoids on background.

    Pure function of (seed, dims, num_classes, noise_sigma). Class c voxels get
    mean intensity spaced in [0.2, 0.9] plus Gaussian noise.
    """
    h, w, d = dims
    if min(h, w, d) < 4:
        raise ValueError(f"dims too small for phantom generation: {dims}")
    if h != w:
        raise ValueError(f"phantom slices must be square, got H={h}, W={w}")
    if num_classes < 2:
        raise ValueError(f"need at least one foreground class, got K={num_classes}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    label = np.zeros(dims, dtype=np.uint8)
    grid = np.stack(
        np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij"), axis=-1
    ).astype(np.float64)
    min_voxels = _MIN_CLASS_FRAC * h * w * d

    for cls in range(1, num_classes):
        for attempt in range(_PLACEMENT_RETRIES):
            axes = np.array(
                [rng.uniform(_AXIS_FRAC[0] * s, _AXIS_FRAC[1] * s) for s in dims]
            )
            center = np.array([rng.uniform(a, s - a) for a, s in zip(axes, dims)])
            dist2 = (((grid - center) / axes) ** 2).sum(axis=-1)
            mask = dist2 <= 1.0
            if mask.sum() < min_voxels:
                continue
            if np.any(label[mask] != 0):
                continue
            label[mask] = cls
            break
        else:
            raise PhantomGenerationError(
                f"could not place ellipsoid for class {cls} after "
                f"{_PLACEMENT_RETRIES} attempts (dims={dims}, K={num_classes})"
            )

    means = class_mean_intensities(num_classes)
    image = means[label] + rng.normal(0.0, noise_sigma, size=dims)
    return Volume3D(image.astype(np.float32)), LabelVolume(label, num_classes=num_classes)


# ---------------------------------------------------------------------------
# manifests and splits

@dataclass
class ManifestEntry:
    image: str
    label: str | None
    split: str


@dataclass
class DatasetManifest:
    dims: tuple[int, int, int]
    num_classes: int
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.root = Path(self.root)
        for e in self.entries:
            if e.split not in (SPLIT_LABELED, SPLIT_UNLABELED, SPLIT_TEST):
                raise ValueError(f"unknown split {e.split!r}")
            if e.split in (SPLIT_LABELED, SPLIT_TEST) and e.label is None:
                raise ValueError(f"{e.split} entry {e.image} must carry a label path")

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "dims": list(manifest.dims),
        "num_classes": manifest.num_classes,
        "seed": manifest.seed,
        "entries": [
            {"image": e.image, "label": e.label, "split": e.split}
            for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = [
        ManifestEntry(image=e["image"], label=e.get("label"), split=e["split"])
        for e in doc["entries"]
    ]
    return DatasetManifest(
        dims=tuple(doc["dims"]),
        num_classes=int(doc["num_classes"]),
        seed=int(doc["seed"]),
        entries=entries,
        root=path.parent,
    )


def split_dataset(manifest: DatasetManifest, m: int, seed: int) -> DatasetManifest:
    """Reassign train-pool entries into m labeled + (pool - m) unlabeled.

    Test entries are untouched. Deterministic for a fixed seed; the three
    partitions stay disjoint and exhaustive over the pool.
    """
    pool = [e for e in manifest.entries if e.split != SPLIT_TEST]
    if m < 1:
        raise ValueError(f"need at least one labeled volume, got m={m}")
    if m > len(pool):
        raise ValueError(f"m={m} exceeds train pool of {len(pool)}")
    order = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF).permutation(len(pool))
    labeled_idx = set(order[:m].tolist())
    new_entries = []
    pool_pos = 0
    for e in manifest.entries:
        if e.split == SPLIT_TEST:
            new_entries.append(ManifestEntry(e.image, e.label, SPLIT_TEST))
            continue
        split = SPLIT_LABELED if pool_pos in labeled_idx else SPLIT_UNLABELED
        new_entries.append(ManifestEntry(e.image, e.label, split))
        pool_pos += 1
    return DatasetManifest(
        dims=manifest.dims,
        num_classes=manifest.num_classes,
        seed=manifest.seed,
        entries=new_entries,
        root=manifest.root,
    )


def generate_dataset(
    out_dir,
    dims: tuple[int, int, int],
    num_classes: int,
    n_train: int,
    n_test: int,
    m_labeled: int,
    seed: int,
    noise_sigma: float = 0.05,
) -> DatasetManifest:
    """Write a full phantom dataset (volumes + manifest.json) under out_dir."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    vol_seeds = master.integers(0, 2 ** 62, size=n_train + n_test)

    entries = []
    for i in range(n_train + n_test):
        vol, lab = generate_phantom(int(vol_seeds[i]), dims, num_classes, noise_sigma)
        img_rel = f"volumes/vol_{i:03d}.cfrv"
        lab_rel = f"volumes/lab_{i:03d}.cfrv"
        write_volume(out_dir / img_rel, vol)
        write_volume(out_dir / lab_rel, lab)
        split = SPLIT_TEST if i >= n_train else SPLIT_UNLABELED
        entries.append(ManifestEntry(image=img_rel, label=lab_rel, split=split))

    manifest = DatasetManifest(
        dims=dims, num_classes=num_classes, seed=seed, entries=entries, root=out_dir
    )
    manifest = split_dataset(manifest, m_labeled, seed)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
