"""Invertible slice-to-grid transform and its ablation perturbations.

A depth-D volume is tiled slice by slice into a d x d grid (d = ceil(sqrt(D)),
row-major, zero-padded) so a 2D segmenter can see the whole volume at once.
The transform is an exact bijection on the non-pad cells, so predictions on the
grid can be folded back into a volume without loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .volume_io import LabelVolume, Volume3D

PERTURB_MODES = ("shuffle_slices", "rotflip_slices", "mix_natural")


def _ceil_sqrt(n: int) -> int:
    return math.isqrt(n - 1) + 1 if n > 0 else 0


@dataclass(frozen=True)
class GridLayout:
    """Tiling descriptor: slice k goes to cell (k // d, k % d), row-major."""

    d: int
    depth: int
    slice_h: int
    slice_w: int

    def __post_init__(self):
        if self.d != _ceil_sqrt(self.depth):
            raise ValueError(f"d={self.d} must equal ceil(sqrt({self.depth}))")
        if min(self.slice_h, self.slice_w, self.depth) < 1:
            raise ValueError("layout dims must be positive")

    @property
    def pad_slices(self) -> int:
        return self.d * self.d - self.depth

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.slice_h * self.d, self.slice_w * self.d)


@dataclass
class GridImage:
    """A tiled 2D image (or label map) plus the layout that produced it."""

    data: np.ndarray
    layout: GridLayout
    kind: str  # "image" | "label"
    num_classes: int | None = None  # label grids only

    def __post_init__(self):
        if self.kind not in ("image", "label"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.kind == "label" and self.num_classes is None:
            raise ValueError("label grids must carry num_classes")


def grid_layout(h: int, w: int, depth: int) -> GridLayout:
    """Layout for an H x W x D volume: d = ceil(sqrt(D)), pad = d^2 - D."""
    if min(h, w, depth) < 1:
        raise ValueError(f"dims must be positive, got ({h}, {w}, {depth})")
    return GridLayout(d=_ceil_sqrt(depth), depth=depth, slice_h=h, slice_w=w)


def concatenate(vol: Volume3D | LabelVolume, layout: GridLayout) -> GridImage:
    """Tile the volume's slices into a (H*d) x (W*d) grid, zero-padding cells k >= D."""
    h, w, depth = vol.dims
    if (h, w, depth) != (layout.slice_h, layout.slice_w, layout.depth):
        raise ValueError(
            f"volume dims {vol.dims} do not match layout "
            f"({layout.slice_h}, {layout.slice_w}, {layout.depth})"
        )
    d = layout.d
    padded = np.zeros((h, w, d * d), dtype=vol.data.dtype)
    padded[:, :, :depth] = vol.data
    # (H, W, d*d) -> (d, d, H, W) blocks -> (d*H, d*W) pixels
    grid = (
        padded.transpose(2, 0, 1)
        .reshape(d, d, h, w)
        .transpose(0, 2, 1, 3)
        .reshape(d * h, d * w)
    )
    if isinstance(vol, Volume3D):
        return GridImage(data=grid.copy(), layout=layout, kind="image")
    return GridImage(
        data=grid.copy(), layout=layout, kind="label", num_classes=vol.num_classes
    )


def inverse_concatenate(grid: GridImage, layout: GridLayout) -> Volume3D | LabelVolume:
    """Exact left inverse of `concatenate`; pad cells are discarded."""
    h, w, d = layout.slice_h, layout.slice_w, layout.d
    if grid.data.shape != (h * d, w * d):
        raise ValueError(
            f"grid shape {grid.data.shape} does not match layout {layout.grid_shape}"
        )
    stack = (
        grid.data.reshape(d, h, d, w)
        .transpose(0, 2, 1, 3)
        .reshape(d * d, h, w)
        .transpose(1, 2, 0)
    )
    vol = stack[:, :, : layout.depth].copy()
    if grid.kind == "image":
        return Volume3D(vol)
    return LabelVolume(vol, num_classes=grid.num_classes)


# ---------------------------------------------------------------------------
# perturbations used by the slice-continuity / contextual-integrity ablations

def perturb(
    vol: Volume3D,
    mode: str,
    seed: int,
    extra: dict | None = None,
) -> tuple[Volume3D, dict]:
    """Disrupt slice continuity or contextual integrity of a volume.

    shuffle_slices  permutes slice order (slice multiset preserved)
    rotflip_slices  independent uniform rot90 x flip per slice
    mix_natural     replaces the k outermost slices with supplied 2D images

    Deterministic per seed. Returns the perturbed volume and a record of what
    was done (permutation / per-slice ops / replaced indices).
    """
    if mode not in PERTURB_MODES:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    data = vol.data
    depth = data.shape[2]

    if mode == "shuffle_slices":
        perm = rng.permutation(depth)
        out = data[:, :, perm]
        return Volume3D(out.copy()), {"mode": mode, "permutation": perm.tolist()}

    if mode == "rotflip_slices":
        rots = rng.integers(0, 4, size=depth)
        flips = rng.integers(0, 2, size=depth)
        out = np.empty_like(data)
        for k in range(depth):
            sl = np.rot90(data[:, :, k], k=int(rots[k]))
            if flips[k]:
                sl = np.fliplr(sl)
            out[:, :, k] = sl
        return Volume3D(out), {
            "mode": mode,
            "rotations": rots.tolist(),
            "flips": flips.tolist(),
        }

    extra = extra or {}
    k = int(extra.get("count", 0))
    images = extra.get("images", [])
    if k > depth:
        raise ValueError(f"cannot replace {k} slices of a depth-{depth} volume")
    if k > len(images):
        raise ValueError(f"need {k} replacement images, got {len(images)}")
    front = (k + 1) // 2
    idx = list(range(front)) + list(range(depth - (k - front), depth))
    out = data.copy()
    for j, slice_idx in enumerate(idx):
        repl = np.asarray(images[j], dtype=np.float32)
        if repl.shape != data.shape[:2]:
            raise ValueError(
                f"replacement image {j} has shape {repl.shape}, want {data.shape[:2]}"
            )
        out[:, :, slice_idx] = repl
    return Volume3D(out), {"mode": mode, "replaced": idx}


def perturb_pair(
    vol: Volume3D, lab: LabelVolume, mode: str, seed: int, extra: dict | None = None
) -> tuple[Volume3D, LabelVolume]:
    """Apply a perturbation to an image and keep its label volume consistent.

    Slice reordering is mirrored on the labels; rotations/flips are mirrored
    geometrically; mix_natural leaves replaced slices labeled background.
    """
    out, record = perturb(vol, mode, seed, extra)
    lab_data = lab.data
    if mode == "shuffle_slices":
        lab_data = lab.data[:, :, record["permutation"]].copy()
    elif mode == "rotflip_slices":
        lab_data = np.empty_like(lab.data)
        for k, (rot, flip) in enumerate(zip(record["rotations"], record["flips"])):
            sl = np.rot90(lab.data[:, :, k], k=int(rot))
            if flip:
                sl = np.fliplr(sl)
            lab_data[:, :, k] = sl
    else:
        lab_data = lab.data.copy()
        for slice_idx in record["replaced"]:
            lab_data[:, :, slice_idx] = 0
    return out, LabelVolume(lab_data, num_classes=lab.num_classes)


def synthetic_natural_images(count: int, h: int, w: int, seed: int) -> list[np.ndarray]:
    """Smooth random textures standing in for natural photographs."""
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    images = []
    for _ in range(count):
        coarse = rng.uniform(0.0, 1.0, size=(4, 4)).astype(np.float32)
        t = torch.from_numpy(coarse)[None, None]
        img = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
        images.append(img[0, 0].numpy())
    return images


# ---------------------------------------------------------------------------
# resolution matching to the 2D model input

def _resize_plane(data: np.ndarray, shape: tuple[int, int], mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
    out = F.interpolate(
        t[None, None],
        size=tuple(shape),
        mode=mode,
        **({"align_corners": False} if mode == "bilinear" else {}),
    )
    return out[0, 0].numpy()


def resize_grid(grid: GridImage, target: int) -> GridImage:
    """Resize to target x target: bilinear for images, nearest for labels.

    Resizing to the grid's own size is an exact identity; nearest-neighbor on
    labels never invents class ids.
    """
    if target < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    shape = (target, target)
    if grid.data.shape == shape:
        out = grid.data.copy()
    elif grid.kind == "image":
        out = _resize_plane(grid.data, shape, "bilinear")
    else:
        out = _resize_plane(grid.data, shape, "nearest").astype(grid.data.dtype)
    return GridImage(
        data=out, layout=grid.layout, kind=grid.kind, num_classes=grid.num_classes
    )


def unresize_grid(grid: GridImage) -> GridImage:
    """Resize a grid back to its layout's native (H*d, W*d) shape."""
    h, w = grid.layout.grid_shape
    if grid.data.shape == (h, w):
        out = grid.data.copy()
    elif grid.kind == "image":
        out = _resize_plane(grid.data, (h, w), "bilinear")
    else:
        out = _resize_plane(grid.data, (h, w), "nearest").astype(grid.data.dtype)
    return GridImage(
        data=out, layout=grid.layout, kind=grid.kind, num_classes=grid.num_classes
    )


def resize_logits(logits: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize a (K, h, w) logit stack to (K, *shape)."""
    if logits.shape[1:] == tuple(shape):
        return np.array(logits, dtype=np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(logits, dtype=np.float32))
    out = F.interpolate(t[None], size=tuple(shape), mode="bilinear", align_corners=False)
    return out[0].numpy()
