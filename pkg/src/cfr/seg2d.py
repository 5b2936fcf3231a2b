"""Small SAM-like 2D transformer segmenter fine-tuned on concatenated grids.

The encoder (patch embedding, transformer blocks, positional embedding) is
frozen; only the low-rank bypasses on each block's query/value projections and
the convolutional mask decoder receive gradients. The decoder emits one
deterministic mask channel per class (no prompts, no ambiguity heads).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import math
import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .lora import LoRALinear
from .losses import dice_ce_loss

log = logging.getLogger(__name__)


@dataclass
class Seg2DConfig:
    input_size: int = 128
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    num_classes: int = 2
    lora_rank: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.input_size % self.patch_size != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.num_classes < 2:
            raise ValueError(f"need num_classes >= 2, got {self.num_classes}")

    @property
    def tokens_per_side(self) -> int:
        return self.input_size // self.patch_size


class Attention(nn.Module):
    """Multi-head self-attention with LoRA bypasses on q and v."""

    def __init__(self, dim: int, num_heads: int, lora_rank: int, lora_seed: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = LoRALinear(nn.Linear(dim, dim), lora_rank, seed=lora_seed)
        self.k = nn.Linear(dim, dim)
        self.v = LoRALinear(nn.Linear(dim, dim), lora_rank, seed=lora_seed + 1)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, lora_rank: int, lora_seed: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, lora_rank, lora_seed)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _upsample_factors(patch_size: int) -> tuple[int, int]:
    """Split the patch-to-pixel upsampling into two near-square stages."""
    s1 = math.isqrt(patch_size)
    while patch_size % s1 != 0:
        s1 -= 1
    return s1, patch_size // s1


class MaskDecoder(nn.Module):
    """Two transposed-conv upsampling stages plus a 1x1 per-class head."""

    def __init__(self, embed_dim: int, patch_size: int, num_classes: int):
        super().__init__()
        s1, s2 = _upsample_factors(patch_size)
        c1 = max(embed_dim // 4, num_classes)
        c2 = max(embed_dim // 8, num_classes)
        self.up1 = nn.ConvTranspose2d(embed_dim, c1, kernel_size=s1, stride=s1)
        self.up2 = nn.ConvTranspose2d(c1, c2, kernel_size=s2, stride=s2)
        self.act = nn.GELU()
        self.head = nn.Conv2d(c2, num_classes, kernel_size=1)

    def forward(self, x):
        x = self.act(self.up1(x))
        x = self.act(self.up2(x))
        return self.head(x)


class Seg2D(nn.Module):
    def __init__(self, config: Seg2DConfig):
        super().__init__()
        self.config = config
        g = config.tokens_per_side
        self.patch_embed = nn.Conv2d(
            1, config.embed_dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, config.embed_dim))
        self.blocks = nn.ModuleList(
            [
                Block(
                    config.embed_dim,
                    config.num_heads,
                    config.lora_rank,
                    lora_seed=config.seed * 1009 + 2 * i,
                )
                for i in range(config.depth)
            ]
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.decoder = MaskDecoder(config.embed_dim, config.patch_size, config.num_classes)
        nn.init.normal_(self.pos_embed, std=0.02)
        self._freeze_encoder_base()

    def _freeze_encoder_base(self):
        for name, p in self.named_parameters():
            trainable = name.startswith("decoder.") or "lora_" in name
            p.requires_grad_(trainable)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        g = self.config.tokens_per_side
        tok = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, N, C)
        tok = tok + self.pos_embed
        for blk in self.blocks:
            tok = blk(tok)
        tok = self.norm(tok)
        feat = tok.transpose(1, 2).reshape(b, self.config.embed_dim, g, g)
        return self.decoder(feat)

    def encoder_base_state(self) -> dict[str, torch.Tensor]:
        """Snapshot of every frozen parameter (for frozen-base verification)."""
        return {
            n: p.detach().clone()
            for n, p in self.named_parameters()
            if not p.requires_grad
        }


def build_seg2d(config: Seg2DConfig) -> Seg2D:
    """Deterministic construction: same config (incl. seed) -> same parameters."""
    torch.manual_seed(config.seed & 0x7FFFFFFFFFFFFFFF)
    return Seg2D(config)


def parameter_counts(model: nn.Module) -> tuple[int, int]:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


def forward_2d(model: Seg2D, grid: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Run the segmenter on one S x S grid, returning (K, S, S) logits."""
    if isinstance(grid, np.ndarray):
        grid = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float32))
    s = model.config.input_size
    if grid.shape != (s, s):
        raise ValueError(f"expected {s}x{s} input, got {tuple(grid.shape)}")
    if not torch.isfinite(grid).all():
        raise ValueError("non-finite values in model input")
    param = next(model.parameters())
    grid = grid.to(dtype=param.dtype)
    logits = model(grid[None, None])[0]
    return logits


@dataclass
class FinetuneConfig:
    lr: float = 1e-3


def finetune(
    model: Seg2D,
    labeled_grids: list[tuple[np.ndarray, np.ndarray]],
    epochs: int,
    opt_cfg: FinetuneConfig | None = None,
    grid_fn=None,
) -> tuple[Seg2D, list[float]]:
    """Fine-tune adapters + decoder on (image grid, label grid) pairs at size S.

    `grid_fn(epoch) -> pairs` optionally resupplies the training grids each
    epoch (used by the perturbation ablations); by default the static
    `labeled_grids` are reused. Returns the model and the per-epoch mean loss.

    Adam rather than plain SGD: trained from scratch behind a frozen random
    encoder, SGD+momentum stalls in the all-background minimum of the
    class-imbalanced Dice+CE objective.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if grid_fn is None and not labeled_grids:
        raise ValueError("empty fine-tuning set")
    if epochs == 0:
        return model, []
    opt_cfg = opt_cfg or FinetuneConfig()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=opt_cfg.lr)
    trace = []
    model.train()
    for epoch in range(epochs):
        pairs = grid_fn(epoch) if grid_fn is not None else labeled_grids
        if not pairs:
            raise ValueError(f"empty fine-tuning set at epoch {epoch}")
        epoch_loss = 0.0
        for img, lab in pairs:
            logits = forward_2d(model, img)
            target = torch.from_numpy(np.ascontiguousarray(lab)).long()
            loss = dice_ce_loss(logits, target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
        trace.append(epoch_loss / len(pairs))
    model.eval()
    log.info("fine-tuned %d epochs: loss %.4f -> %.4f", epochs, trace[0], trace[-1])
    return model, trace


def save_seg2d(model: Seg2D, path) -> None:
    tensors = {name: t for name, t in model.state_dict().items()}
    save_checkpoint(path, "seg2d", asdict(model.config), tensors)


def load_seg2d(path) -> Seg2D:
    ckpt = load_checkpoint(path)
    return seg2d_from_checkpoint(ckpt)


def seg2d_from_checkpoint(ckpt: Checkpoint) -> Seg2D:
    if ckpt.kind != "seg2d":
        raise ValueError(f"expected a seg2d checkpoint, got kind={ckpt.kind!r}")
    model = build_seg2d(Seg2DConfig(**ckpt.config))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model
