"""Concatenate / fine-tune / re-train semi-supervised 3D segmentation."""

from .grid import GridImage, GridLayout, concatenate, grid_layout, inverse_concatenate
from .lora import LoRAAdapter, lora_forward, lora_init, lora_merge
from .losses import dice_ce_loss
from .metrics import MetricsRecord, evaluate
from .pseudo_label import pseudo_label
from .seg2d import Seg2D, Seg2DConfig, build_seg2d, finetune, forward_2d
from .seg3d import Seg3D, Seg3DConfig, build_seg3d
from .ssl import SSLConfig, ema_update, register_unsup_plugin, train_ssl
from .volume_io import (
    DatasetManifest,
    LabelVolume,
    Volume3D,
    generate_phantom,
    read_volume,
    split_dataset,
    write_volume,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "GridImage",
    "GridLayout",
    "LabelVolume",
    "LoRAAdapter",
    "MetricsRecord",
    "Seg2D",
    "Seg2DConfig",
    "Seg3D",
    "Seg3DConfig",
    "SSLConfig",
    "Volume3D",
    "build_seg2d",
    "build_seg3d",
    "concatenate",
    "dice_ce_loss",
    "ema_update",
    "evaluate",
    "finetune",
    "forward_2d",
    "generate_phantom",
    "grid_layout",
    "inverse_concatenate",
    "lora_forward",
    "lora_init",
    "lora_merge",
    "pseudo_label",
    "read_volume",
    "register_unsup_plugin",
    "split_dataset",
    "train_ssl",
    "write_volume",
]
