"""Low-rank adapter math: init, bypass forward, and merge-for-inference.

An adapter on an (out x in) weight W adds scale * B @ A with A: (r x in),
B: (out x r). B starts at zero so the adapted model is exactly the base model
until training moves it. `LoRALinear` wraps a frozen nn.Linear with one such
trainable bypass.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class LoRAAdapter:
    target: str
    rank: int
    A: torch.Tensor  # (rank, in_features)
    B: torch.Tensor  # (out_features, rank)
    scale: float = 1.0

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    def num_parameters(self) -> int:
        return self.A.numel() + self.B.numel()


def lora_init(
    out_features: int,
    in_features: int,
    rank: int,
    seed: int,
    target: str = "",
    scale: float = 1.0,
) -> LoRAAdapter:
    """A ~ N(0, 1/in) from seed, B = 0, so the adapter contributes nothing yet."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > min(out_features, in_features):
        raise ValueError(
            f"rank {rank} exceeds min(out={out_features}, in={in_features})"
        )
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    a = torch.randn(rank, in_features, generator=gen, dtype=torch.float32)
    a = a / in_features ** 0.5
    b = torch.zeros(out_features, rank, dtype=torch.float32)
    return LoRAAdapter(target=target, rank=rank, A=a, B=b, scale=scale)


def _check_conformance(w: torch.Tensor, adapter: LoRAAdapter) -> None:
    if w.shape != (adapter.out_features, adapter.in_features):
        raise ValueError(
            f"weight shape {tuple(w.shape)} does not match adapter "
            f"({adapter.out_features}, {adapter.in_features})"
        )


def lora_forward(w: torch.Tensor, adapter: LoRAAdapter, x: torch.Tensor) -> torch.Tensor:
    """y = W x + scale * B (A x) for x of shape (in,) or (in, batch)."""
    _check_conformance(w, adapter)
    if x.shape[0] != adapter.in_features:
        raise ValueError(
            f"input dim {x.shape[0]} does not match adapter in={adapter.in_features}"
        )
    return w @ x + adapter.scale * (adapter.B @ (adapter.A @ x))


def lora_merge(w: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    """Fold the adapter into the base weight: W' = W + scale * B A."""
    _check_conformance(w, adapter)
    return w + adapter.scale * (adapter.B @ adapter.A)


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable rank-r bypass."""

    def __init__(self, base: nn.Linear, rank: int, seed: int, scale: float = 1.0):
        super().__init__()
        if rank < 1 or rank > min(base.out_features, base.in_features):
            raise ValueError(
                f"rank {rank} invalid for {base.out_features}x{base.in_features} layer"
            )
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        init = lora_init(base.out_features, base.in_features, rank, seed, scale=scale)
        self.lora_a = nn.Parameter(init.A.clone())
        self.lora_b = nn.Parameter(init.B.clone())
        self.scale = scale
        self.rank = rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def adapter(self, target: str = "") -> LoRAAdapter:
        return LoRAAdapter(
            target=target,
            rank=self.rank,
            A=self.lora_a.detach().clone(),
            B=self.lora_b.detach().clone(),
            scale=self.scale,
        )

    def merged_weight(self) -> torch.Tensor:
        return lora_merge(self.base.weight.detach(), self.adapter())
