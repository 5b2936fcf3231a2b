"""Hard 3D pseudo-labels: tile, segment in 2D, un-resize logits, un-tile.

The fine-tuned 2D model never sees the volume directly; its grid prediction is
folded back into a volume and argmaxed into class ids, which the 3D stage then
consumes as training targets for unlabeled data.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import grid as gridmod
from .checkpoint import file_hash
from .seg2d import Seg2D, forward_2d
from .volume_io import (
    SPLIT_UNLABELED,
    DatasetManifest,
    LabelVolume,
    Volume3D,
    read_volume,
    write_volume,
)

log = logging.getLogger(__name__)


def pseudo_label(model: Seg2D, vol: Volume3D) -> LabelVolume:
    """Predict a hard class-id volume for `vol` with the fine-tuned 2D model.

    Composition: concatenate -> resize to model input -> 2D logits -> bilinear
    un-resize of the logits back to grid scale -> argmax -> inverse
    concatenate. Ties argmax toward the lower class id; deterministic.
    """
    h, w, depth = vol.dims
    layout = gridmod.grid_layout(h, w, depth)
    tiled = gridmod.concatenate(vol, layout)
    resized = gridmod.resize_grid(tiled, model.config.input_size)
    with torch.no_grad():
        logits = forward_2d(model, resized.data).numpy()
    logits = gridmod.resize_logits(logits, layout.grid_shape)
    labels2d = np.argmax(logits, axis=0).astype(np.uint8)
    label_grid = gridmod.GridImage(
        data=labels2d,
        layout=layout,
        kind="label",
        num_classes=model.config.num_classes,
    )
    return gridmod.inverse_concatenate(label_grid, layout)


def write_pseudo_cache(
    model: Seg2D,
    manifest: DatasetManifest,
    cache_dir,
    checkpoint_path=None,
) -> dict:
    """Pseudo-label every unlabeled volume into `cache_dir` as CFRV files.

    The cache index records which checkpoint produced the labels so stale
    caches are detectable.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index = {
        "checkpoint_hash": file_hash(checkpoint_path) if checkpoint_path else None,
        "entries": {},
    }
    for e in manifest.by_split(SPLIT_UNLABELED):
        vol = read_volume(manifest.resolve(e.image))
        if not isinstance(vol, Volume3D):
            raise ValueError(f"{e.image} is not an intensity volume")
        lab = pseudo_label(model, vol)
        rel = f"pseudo_{Path(e.image).stem}.cfrv"
        write_volume(cache_dir / rel, lab)
        index["entries"][e.image] = rel
    (cache_dir / "cache.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d pseudo-labels to %s", len(index["entries"]), cache_dir)
    return index


def load_pseudo_cache(cache_dir) -> dict[str, LabelVolume]:
    """Read a pseudo-label cache back as {manifest image path: LabelVolume}."""
    cache_dir = Path(cache_dir)
    index = json.loads((cache_dir / "cache.json").read_text())
    out = {}
    for image_rel, pseudo_rel in index["entries"].items():
        lab = read_volume(cache_dir / pseudo_rel)
        if not isinstance(lab, LabelVolume):
            raise ValueError(f"{pseudo_rel} is not a label volume")
        out[image_rel] = lab
    return out
