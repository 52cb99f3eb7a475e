"""Resolution-switchable residual classifiers.

Convolution and FC weights are shared by every input resolution; each
training resolution owns a private bank of batch-norm parameters and
running statistics.  The bank is picked per call through an explicit
resolution index, so the model carries no "active resolution" state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ResolutionMismatch(ValueError):
    pass


class UnsupportedArchitecture(ValueError):
    pass


# ---------------------------------------------------------------------------
# architecture descriptors


@dataclass(frozen=True)
class ArchSpec:
    """Layer plan of a GAP-before-FC residual network.

    ``stem`` is ``"imagenet"`` (7x7/2 conv followed by 3x3/2 max-pool) or
    ``"cifar"`` (a single 3x3/1 conv).  The first stage keeps the spatial
    size, every later stage halves it.
    """

    name: str
    stem: str
    block: str
    depths: Tuple[int, ...]
    widths: Tuple[int, ...]
    stem_width: int

    @property
    def expansion(self) -> int:
        return 4 if self.block == "bottleneck" else 1

    @property
    def feature_dim(self) -> int:
        return self.widths[-1] * self.expansion


ARCHS: Dict[str, ArchSpec] = {
    "resnet18": ArchSpec("resnet18", "imagenet", "basic", (2, 2, 2, 2), (64, 128, 256, 512), 64),
    "resnet34": ArchSpec("resnet34", "imagenet", "basic", (3, 4, 6, 3), (64, 128, 256, 512), 64),
    "resnet50": ArchSpec("resnet50", "imagenet", "bottleneck", (3, 4, 6, 3), (64, 128, 256, 512), 64),
    "cifar-resnet8": ArchSpec("cifar-resnet8", "cifar", "basic", (1, 1, 1), (16, 32, 64), 16),
    "cifar-resnet20": ArchSpec("cifar-resnet20", "cifar", "basic", (3, 3, 3), (16, 32, 64), 16),
    "tiny": ArchSpec("tiny", "cifar", "basic", (1, 1), (8, 16), 8),
}


def get_arch(arch_id) -> ArchSpec:
    if isinstance(arch_id, ArchSpec):
        return arch_id
    try:
        return ARCHS[arch_id]
    except KeyError:
        raise UnsupportedArchitecture(
            f"unsupported architecture {arch_id!r}; choose from {sorted(ARCHS)}") from None


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def final_feature_size(arch_id, r: int) -> int:
    """Spatial side of the last feature map (just before GAP) for input side ``r``."""
    arch = get_arch(arch_id)
    if arch.stem == "imagenet":
        size = conv_out(r, 7, 2, 3)
        size = conv_out(size, 3, 2, 1)
    else:
        size = conv_out(r, 3, 1, 1)
    for i in range(1, len(arch.depths)):
        # strided 3x3 conv with padding 1; the 1x1 shortcut lands on the same size
        size = conv_out(size, 3, 2, 1)
    return size


# ---------------------------------------------------------------------------
# resolution profile


@dataclass(frozen=True)
class ResolutionProfile:
    """Square training resolutions, largest first."""

    resolutions: Tuple[int, ...]

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolutions)
        if not res:
            raise ValueError("resolution profile is empty")
        if any(r <= 0 for r in res):
            raise ValueError(f"resolutions must be positive, got {res}")
        if len(set(res)) != len(res):
            raise ValueError(f"resolutions must be distinct, got {res}")
        object.__setattr__(self, "resolutions", tuple(sorted(res, reverse=True)))

    def __len__(self):
        return len(self.resolutions)

    def __iter__(self):
        return iter(self.resolutions)

    def __getitem__(self, i):
        return self.resolutions[i]

    def index(self, r: int) -> int:
        try:
            return self.resolutions.index(int(r))
        except ValueError:
            raise ResolutionMismatch(f"{r} is not a training resolution of {self.resolutions}") from None

    def check_arch(self, arch_id):
        for r in self.resolutions:
            if final_feature_size(arch_id, r) < 1:
                raise ValueError(
                    f"resolution {r} collapses below a 1x1 feature map in {get_arch(arch_id).name}")


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_apply(x, gamma, beta, running_mean, running_var, eps=BN_EPS,
                    train=False, momentum=BN_MOMENTUM, update_stats=True):
    """Channel-wise ``gamma * (x - mean) / sqrt(var + eps) + beta``.

    Eval mode normalizes with the stored statistics.  Train mode uses the
    batch statistics and, when ``update_stats`` is set, folds them into the
    running values in place: ``new = (1 - momentum) * old + momentum * batch``
    (the running variance takes the unbiased batch estimate).
    """
    if x.dim() < 2 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"feature map has {x.shape[1] if x.dim() > 1 else '?'} channels, "
                         f"bank entry has {gamma.shape[0]}")
    if train and not update_stats:
        running_mean = running_var = None
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training=train,
                        momentum=momentum, eps=eps)


@dataclass
class BankEntry:
    gamma: torch.Tensor
    beta: torch.Tensor
    running_mean: torch.Tensor
    running_var: torch.Tensor
    eps: float = BN_EPS


@dataclass
class BatchNormBank:
    """One complete set of BN parameters/statistics, keyed by layer name."""

    bound_resolution: float
    layers: Dict[str, BankEntry] = field(default_factory=dict)

    def layout(self):
        return {name: tuple(e.gamma.shape) for name, e in self.layers.items()}


class _BankSlot(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))


class SwitchableBatchNorm2d(nn.Module):
    """A BN layer holding one private slot per training resolution."""

    def __init__(self, channels, num_banks, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.banks = nn.ModuleList(_BankSlot(channels) for _ in range(num_banks))

    def forward(self, x, ctx: "_BNContext"):
        if ctx.override is not None:
            e = ctx.override.layers[ctx.names[self]]
            return batchnorm_apply(x, e.gamma, e.beta, e.running_mean, e.running_var, e.eps)
        slot = self.banks[ctx.bank]
        return batchnorm_apply(x, slot.weight, slot.bias, slot.running_mean, slot.running_var,
                               self.eps, ctx.train, self.momentum, ctx.update_stats)


@dataclass
class _BNContext:
    bank: int
    train: bool
    update_stats: bool
    override: Optional[BatchNormBank]
    names: Dict[nn.Module, str]


# ---------------------------------------------------------------------------
# residual blocks


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch, width, stride, num_banks):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, width, 3, stride, 1, bias=False)
        self.bn1 = SwitchableBatchNorm2d(width, num_banks)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1, bias=False)
        self.bn2 = SwitchableBatchNorm2d(width, num_banks)
        self.downsample = None
        if stride != 1 or in_ch != width:
            self.downsample = Downsample(in_ch, width, stride, num_banks)

    def forward(self, x, ctx):
        out = F.relu(self.bn1(self.conv1(x), ctx))
        out = self.bn2(self.conv2(out), ctx)
        identity = x if self.downsample is None else self.downsample(x, ctx)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, width, stride, num_banks):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, 1, 0, bias=False)
        self.bn1 = SwitchableBatchNorm2d(width, num_banks)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = SwitchableBatchNorm2d(width, num_banks)
        self.conv3 = nn.Conv2d(width, out_ch, 1, 1, 0, bias=False)
        self.bn3 = SwitchableBatchNorm2d(out_ch, num_banks)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = Downsample(in_ch, out_ch, stride, num_banks)

    def forward(self, x, ctx):
        out = F.relu(self.bn1(self.conv1(x), ctx))
        out = F.relu(self.bn2(self.conv2(out), ctx))
        out = self.bn3(self.conv3(out), ctx)
        identity = x if self.downsample is None else self.downsample(x, ctx)
        return F.relu(out + identity)


class Downsample(nn.Module):
    def __init__(self, in_ch, out_ch, stride, num_banks):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1, stride, 0, bias=False)
        self.bn = SwitchableBatchNorm2d(out_ch, num_banks)

    def forward(self, x, ctx):
        return self.bn(self.conv(x), ctx)


# ---------------------------------------------------------------------------
# the classifier


class SwitchableClassifier(nn.Module):
    """Residual classifier with shared weights and per-resolution BN banks.

    ``branches`` lists the input resolution of every training branch and
    defaults to the profile itself.  It only differs from the profile for
    the single-resolution control, where several branches train at one
    resolution and therefore share its bank.  The ensemble raw scores have
    one entry per branch.
    """

    def __init__(self, arch_id, profile: ResolutionProfile, num_classes: int,
                 shared_bn: bool = False, branches: Optional[Sequence[int]] = None):
        super().__init__()
        self.arch = get_arch(arch_id)
        if not isinstance(profile, ResolutionProfile):
            profile = ResolutionProfile(tuple(profile))
        profile.check_arch(self.arch)
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.profile = profile
        self.num_classes = int(num_classes)
        self.shared_bn = bool(shared_bn)
        self.branches = tuple(int(r) for r in (branches if branches is not None else profile))
        for r in self.branches:
            profile.index(r)
        nb = 1 if shared_bn else len(profile)
        self.num_banks = nb

        a = self.arch
        if a.stem == "imagenet":
            self.conv1 = nn.Conv2d(3, a.stem_width, 7, 2, 3, bias=False)
        else:
            self.conv1 = nn.Conv2d(3, a.stem_width, 3, 1, 1, bias=False)
        self.bn1 = SwitchableBatchNorm2d(a.stem_width, nb)
        block = Bottleneck if a.block == "bottleneck" else BasicBlock
        in_ch = a.stem_width
        self.layers = nn.ModuleList()
        for i, (depth, width) in enumerate(zip(a.depths, a.widths)):
            blocks = nn.ModuleList()
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(block(in_ch, width, stride, nb))
                in_ch = width * block.expansion
            self.layers.append(blocks)
        self.fc = nn.Linear(in_ch, self.num_classes)
        self.raw_scores = nn.Parameter(torch.zeros(len(self.branches)))

        self._bn_names = {m: n for n, m in self.named_modules()
                          if isinstance(m, SwitchableBatchNorm2d)}
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, 0.0, 0.01)
                nn.init.zeros_(m.bias)

    # -- bank bookkeeping -------------------------------------------------

    @property
    def bn_layers(self) -> Dict[str, SwitchableBatchNorm2d]:
        return {n: m for m, n in self._bn_names.items()}

    def bank_index(self, s: int) -> int:
        if not 0 <= s < len(self.profile):
            raise ResolutionMismatch(f"resolution index {s} outside 0..{len(self.profile) - 1}")
        return 0 if self.shared_bn else s

    def bank_labels(self) -> List[str]:
        """Checkpoint label of each stored bank."""
        if self.shared_bn:
            return ["shared"]
        return [str(r) for r in self.profile]

    def bank(self, s: int) -> BatchNormBank:
        """Detached copy of the bank serving resolution index ``s``."""
        b = self.bank_index(s)
        layers = {}
        for name, m in self.bn_layers.items():
            slot = m.banks[b]
            layers[name] = BankEntry(slot.weight.detach().clone(), slot.bias.detach().clone(),
                                     slot.running_mean.clone(), slot.running_var.clone(), m.eps)
        return BatchNormBank(self.profile[s], layers)

    @property
    def alpha(self) -> torch.Tensor:
        return torch.softmax(self.raw_scores, dim=0)

    def shared_parameters(self):
        """Conv and FC parameters (everything but BN banks and ensemble scores)."""
        for name, p in self.named_parameters():
            if ".banks." not in name and name != "raw_scores":
                yield name, p

    # -- forward ----------------------------------------------------------

    def features(self, x, s: Optional[int] = None, train: Optional[bool] = None,
                 update_stats: bool = True, bank: Optional[BatchNormBank] = None):
        """GAP output (batch x channels) for images at resolution index ``s``.

        Passing ``bank`` evaluates with an externally supplied bank (for
        example an interpolated one); the input side must then match its
        bound resolution and the call always runs in eval mode.
        """
        if x.dim() != 4 or x.shape[-1] != x.shape[-2]:
            raise ResolutionMismatch(f"expected a batch of square images, got shape {tuple(x.shape)}")
        if train is None:
            train = self.training
        if bank is not None:
            if not math.isclose(x.shape[-1], bank.bound_resolution):
                raise ResolutionMismatch(
                    f"batch side {x.shape[-1]} does not match bank resolution {bank.bound_resolution}")
            ctx = _BNContext(0, False, False, bank, self._bn_names)
        else:
            if s is None:
                raise ValueError("either a resolution index or a bank is required")
            b = self.bank_index(s)
            if x.shape[-1] != self.profile[s]:
                raise ResolutionMismatch(
                    f"batch side {x.shape[-1]} does not match resolution index {s} "
                    f"({self.profile[s]} px)")
            ctx = _BNContext(b, bool(train), update_stats, None, self._bn_names)

        out = F.relu(self.bn1(self.conv1(x), ctx))
        if self.arch.stem == "imagenet":
            out = F.max_pool2d(out, 3, 2, 1)
        for blocks in self.layers:
            for blk in blocks:
                out = blk(out, ctx)
        return out.mean(dim=(2, 3))

    def forward(self, x, s: Optional[int] = None, train: Optional[bool] = None,
                update_stats: bool = True, bank: Optional[BatchNormBank] = None):
        return self.fc(self.features(x, s, train, update_stats, bank))


def build_model(arch_id, profile, num_classes: int, shared_bn: bool = False,
                branches=None, seed: Optional[int] = None) -> SwitchableClassifier:
    if not isinstance(profile, ResolutionProfile):
        profile = ResolutionProfile(tuple(profile))
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return SwitchableClassifier(arch_id, profile, num_classes, shared_bn, branches)
    return SwitchableClassifier(arch_id, profile, num_classes, shared_bn, branches)


def forward(model: SwitchableClassifier, batch, s: int, mode: str = "eval"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model(batch, s, train=(mode == "train"))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# bank interpolation


def interpolate_bn_bank(model: SwitchableClassifier, r: float) -> BatchNormBank:
    """BN bank for an arbitrary side length inside the training range.

    Training resolutions return their own bank untouched.  Anything between
    two neighbours ``lo < r < hi`` blends them linearly in the side length:
    ``lam * bank(lo) + (1 - lam) * bank(hi)`` with ``lam = (hi - r) / (hi - lo)``.
    Extrapolation is refused.
    """
    res = model.profile.resolutions
    if not res[-1] <= r <= res[0]:
        raise ValueError(f"resolution {r} outside the interpolation range [{res[-1]}, {res[0]}]")
    if r in res:
        return model.bank(res.index(r))
    hi_idx = max(i for i, v in enumerate(res) if v > r)
    lo_idx = hi_idx + 1
    hi, lo = res[hi_idx], res[lo_idx]
    lam = (hi - r) / (hi - lo)
    bank_lo, bank_hi = model.bank(lo_idx), model.bank(hi_idx)
    layers = {}
    for name, e_lo in bank_lo.layers.items():
        e_hi = bank_hi.layers[name]

        def mix(a, b):
            return (lam * a.double() + (1 - lam) * b.double()).to(a.dtype)

        layers[name] = BankEntry(mix(e_lo.gamma, e_hi.gamma), mix(e_lo.beta, e_hi.beta),
                                 mix(e_lo.running_mean, e_hi.running_mean),
                                 mix(e_lo.running_var, e_hi.running_var), e_lo.eps)
    return BatchNormBank(r, layers)
