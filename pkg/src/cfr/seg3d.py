"""Small V-Net-style 3D encoder-decoder used for semi-supervised re-training.

Deliberately much smaller than the 2D fine-tuning model: this is the network
kept for inference once the fine-tuning stage has served its purpose.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .volume_io import LabelVolume, Volume3D

log = logging.getLogger(__name__)


@dataclass
class Seg3DConfig:
    base_channels: int = 8
    levels: int = 2
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.num_classes < 2:
            raise ValueError(f"need num_classes >= 2, got {self.num_classes}")


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    # GELU keeps the loss surface smooth, which the finite-difference
    # gradient verification relies on
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel_size=3, padding=1),
        nn.GroupNorm(min(4, c_out), c_out),
        nn.GELU(),
    )


class Seg3D(nn.Module):
    def __init__(self, config: Seg3DConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.stem = nn.Sequential(_conv_block(1, c), _conv_block(c, c))
        downs, ups, skips = [], [], []
        ch = c
        for _ in range(config.levels):
            downs.append(
                nn.Sequential(
                    nn.Conv3d(ch, ch * 2, kernel_size=2, stride=2),
                    _conv_block(ch * 2, ch * 2),
                )
            )
            ch *= 2
        for _ in range(config.levels):
            ups.append(nn.ConvTranspose3d(ch, ch // 2, kernel_size=2, stride=2))
            skips.append(_conv_block(ch, ch // 2))
            ch //= 2
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.skips = nn.ModuleList(skips)
        self.head = nn.Conv3d(c, config.num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stride = 2 ** self.config.levels
        for dim in x.shape[2:]:
            if dim % stride != 0:
                raise ValueError(
                    f"spatial dims {tuple(x.shape[2:])} must be divisible by {stride}"
                )
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        y = feats[-1]
        for up, skip, feat in zip(self.ups, self.skips, reversed(feats[:-1])):
            y = up(y)
            y = skip(torch.cat([y, feat], dim=1))
        return self.head(y)


def build_seg3d(config: Seg3DConfig) -> Seg3D:
    """Deterministic construction from the config seed."""
    torch.manual_seed(config.seed & 0x7FFFFFFFFFFFFFFF)
    model = Seg3D(config)
    n_params = sum(p.numel() for p in model.parameters())
    log.info("built 3D segmenter with %d parameters", n_params)
    return model


def predict_volume(model: Seg3D, vol: Volume3D) -> LabelVolume:
    """Argmax class-id prediction for one volume."""
    x = torch.from_numpy(vol.data)[None, None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        # batch-1 conv3d is slow on CPU; run the volume as a duplicated pair
        logits = model(torch.cat([x, x], dim=0))[0]
    model.train(was_training)
    ids = logits.argmax(dim=0).numpy().astype(np.uint8)
    return LabelVolume(ids, num_classes=model.config.num_classes)


def save_seg3d(model: Seg3D, path) -> None:
    save_checkpoint(path, "seg3d", asdict(model.config), dict(model.state_dict()))


def load_seg3d(path) -> Seg3D:
    return seg3d_from_checkpoint(load_checkpoint(path))


def seg3d_from_checkpoint(ckpt: Checkpoint) -> Seg3D:
    if ckpt.kind != "seg3d":
        raise ValueError(f"expected a seg3d checkpoint, got kind={ckpt.kind!r}")
    model = build_seg3d(Seg3DConfig(**ckpt.config))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model
