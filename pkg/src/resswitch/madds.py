"""Multiply-add accounting straight from an architecture descriptor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

from .model import get_arch, conv_out


@dataclass(frozen=True)
class MAddsReport:
    resolution: int
    layers: Tuple[Tuple[str, int], ...]

    @property
    def total(self) -> int:
        return sum(n for _, n in self.layers)

    def as_dict(self):
        return dict(self.layers)


def _conv(layers: List, name, size, c_in, c_out, k, stride, pad):
    out = conv_out(size, k, stride, pad)
    layers.append((name, k * k * c_in * c_out * out * out))
    return out


def count_madds(arch_id, r: int, num_classes: int = 1000) -> MAddsReport:
    """Per-layer multiply-adds at input side ``r``.

    Convolutions cost ``k^2 * C_in * C_out * H_out * W_out``, the FC layer
    ``in * out``.  BN, ReLU, pooling and residual additions are not counted.
    """
    arch = get_arch(arch_id)
    if r < 1:
        raise ValueError("resolution must be positive")
    layers: List[Tuple[str, int]] = []
    if arch.stem == "imagenet":
        size = _conv(layers, "conv1", r, 3, arch.stem_width, 7, 2, 3)
        size = conv_out(size, 3, 2, 1)
    else:
        size = _conv(layers, "conv1", r, 3, arch.stem_width, 3, 1, 1)
    if size < 1:
        raise ValueError(f"resolution {r} is too small for {arch.name}")
    in_ch = arch.stem_width
    for i, (depth, width) in enumerate(zip(arch.depths, arch.widths)):
        for j in range(depth):
            stride = 2 if (i > 0 and j == 0) else 1
            prefix = f"layers.{i}.{j}"
            out_ch = width * arch.expansion
            if arch.block == "bottleneck":
                s1 = _conv(layers, f"{prefix}.conv1", size, in_ch, width, 1, 1, 0)
                s2 = _conv(layers, f"{prefix}.conv2", s1, width, width, 3, stride, 1)
                new_size = _conv(layers, f"{prefix}.conv3", s2, width, out_ch, 1, 1, 0)
            else:
                s1 = _conv(layers, f"{prefix}.conv1", size, in_ch, width, 3, stride, 1)
                new_size = _conv(layers, f"{prefix}.conv2", s1, width, width, 3, 1, 1)
            if stride != 1 or in_ch != out_ch:
                _conv(layers, f"{prefix}.downsample.conv", size, in_ch, out_ch, 1, stride, 0)
            size, in_ch = new_size, out_ch
            if size < 1:
                raise ValueError(f"resolution {r} is too small for {arch.name}")
    layers.append(("fc", in_ch * num_classes))
    return MAddsReport(int(r), tuple(layers))


def format_madds(n: int) -> str:
    if n >= 1e9:
        return f"{n / 1e9:.2f}G"
    if n >= 1e6:
        return f"{n / 1e6:.0f}M"
    return f"{n / 1e3:.0f}K"
