"""Desk-scale encoder-decoder backbone with a segmentation or distance head.

Both networks of the dual-task pair are built from the same descriptor: a
3D U-Net/V-Net style encoder-decoder with concatenating skip connections,
instance normalization and a single-channel output. The segmentation network
ends in a sigmoid; the distance network ends in tanh so its output is a
normalized signed distance map.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidDescriptor, MissingCheckpoint, ShapeMismatch

HEADS = ("seg", "dis")


@dataclass(frozen=True)
class Descriptor:
    levels: int = 3
    width: int = 8
    kernel_size: int = 3

    def validate(self):
        if self.levels < 2:
            raise InvalidDescriptor(f"need at least 2 levels, got {self.levels}")
        if self.width < 4:
            raise InvalidDescriptor(f"base width must be >= 4, got {self.width}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidDescriptor(f"kernel size must be odd and positive, got {self.kernel_size}")

    @property
    def divisor(self) -> int:
        return 2 ** self.levels

    def check_input_shape(self, shape):
        bad = [s for s in shape if s % self.divisor or s < self.divisor]
        if bad:
            raise ShapeMismatch(
                f"spatial shape {tuple(shape)} must be divisible by 2**levels = {self.divisor}"
            )


def _conv_block(c_in, c_out, k):
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, k, padding=k // 2),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.ReLU(inplace=False),
    )


class DualTaskNet(nn.Module):
    """Encoder-decoder with one active output head (``"seg"`` or ``"dis"``)."""

    def __init__(self, descriptor: Descriptor, head: str):
        super().__init__()
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        descriptor.validate()
        self.descriptor = descriptor
        self.head_kind = head
        k = descriptor.kernel_size
        ch = [descriptor.width * 2 ** i for i in range(descriptor.levels + 1)]

        self.encoders = nn.ModuleList(
            _conv_block(1 if i == 0 else ch[i], ch[i], k) for i in range(descriptor.levels)
        )
        self.downs = nn.ModuleList(
            nn.Conv3d(ch[i], ch[i + 1], 2, stride=2) for i in range(descriptor.levels)
        )
        self.bottleneck = _conv_block(ch[-1], ch[-1], k)
        self.ups = nn.ModuleList(
            nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2) for i in range(descriptor.levels)
        )
        self.decoders = nn.ModuleList(
            _conv_block(2 * ch[i], ch[i], k) for i in range(descriptor.levels)
        )
        self.head = nn.Conv3d(ch[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected input of shape (B, 1, H, W, D), got {tuple(x.shape)}")
        self.descriptor.check_input_shape(x.shape[2:])
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for i in reversed(range(len(self.ups))):
            x = self.ups[i](x)
            x = self.decoders[i](torch.cat([x, skips[i]], dim=1))
        logits = self.head(x)
        return torch.sigmoid(logits) if self.head_kind == "seg" else torch.tanh(logits)


def _init_params(net: nn.Module, seed: int):
    # fan-in variance scaling for every conv; norm layers start as identity
    gen = torch.Generator().manual_seed(int(seed))
    for name, module in net.named_modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            if isinstance(module, nn.ConvTranspose3d):
                # stride == kernel: each output voxel sees one input voxel per input channel
                fan_in = module.weight.shape[0]
            else:
                fan_in = module.weight[0].numel()
            std = float(np.sqrt(2.0 / fan_in))
            with torch.no_grad():
                module.weight.normal_(0.0, std, generator=gen)
                module.bias.zero_()
        elif isinstance(module, nn.InstanceNorm3d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def build_backbone(descriptor: Descriptor | dict = Descriptor(), head: str = "seg",
                   seed: int = 0, input_shape=None) -> DualTaskNet:
    """Build and deterministically initialise one network of the pair.

    ``input_shape``, when given, is validated against the descriptor up front
    and raises :class:`InvalidDescriptor` if the net cannot process it.
    """
    if isinstance(descriptor, dict):
        descriptor = Descriptor(**descriptor)
    descriptor.validate()
    if input_shape is not None:
        try:
            descriptor.check_input_shape(tuple(input_shape))
        except ShapeMismatch as exc:
            raise InvalidDescriptor(str(exc)) from None
    net = DualTaskNet(descriptor, head)
    _init_params(net, seed)
    return net


def _as_batch(net: DualTaskNet, x) -> torch.Tensor:
    ref = next(net.parameters())
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if x.ndim == 3:
        x = x[None, None]
    return x.to(dtype=ref.dtype)


def forward_seg(net: DualTaskNet, x) -> torch.Tensor:
    """Segmentation probabilities in (0, 1); 3D inputs are treated as one crop."""
    if net.head_kind != "seg":
        raise ValueError("forward_seg needs a network with the segmentation head")
    return net(_as_batch(net, x))


def forward_dis(net: DualTaskNet, x) -> torch.Tensor:
    """Normalized signed distance prediction in (-1, 1)."""
    if net.head_kind != "dis":
        raise ValueError("forward_dis needs a network with the regression head")
    return net(_as_batch(net, x))


def forward(net: DualTaskNet, x) -> torch.Tensor:
    return net(_as_batch(net, x))


# checkpoint archive: <stem>.npz holds little-endian float32 tensors by name,
# <stem>.json holds descriptor, head, iteration and the tensor index


def save_checkpoint(net: DualTaskNet, stem, iteration: int = 0, extra: dict | None = None):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensors = {
        name: t.detach().cpu().numpy().astype("<f4") for name, t in net.state_dict().items()
    }
    with open(stem.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **tensors)
    meta = {
        "format": "dtml-named-tensors-f4le",
        "descriptor": asdict(net.descriptor),
        "head": net.head_kind,
        "iteration": int(iteration),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()],
    }
    if extra:
        meta.update(extra)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return stem


def load_checkpoint(stem):
    """Returns ``(net, meta)``; the network is float32 and in eval mode."""
    stem = Path(stem)
    npz, side = stem.with_suffix(".npz"), stem.with_suffix(".json")
    if not npz.exists() or not side.exists():
        raise MissingCheckpoint(f"checkpoint not found: {stem} (.npz/.json)")
    meta = json.loads(side.read_text())
    net = DualTaskNet(Descriptor(**meta["descriptor"]), meta["head"])
    with np.load(npz) as archive:
        state = {name: torch.from_numpy(archive[name].astype(np.float32)) for name in archive.files}
    net.load_state_dict(state)
    net.eval()
    return net, meta
