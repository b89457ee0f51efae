"""Pre-activation residual network (ResNet v2) with a Keras-compatible layout.

Layer names follow ``tf.keras.applications.ResNet50V2`` so that weights exported
from Keras can be mapped one-to-one (see :func:`load_keras_h5`).  Padding and
pooling reproduce Keras semantics exactly, including the zero-padded max-pool
after the stem convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BN_EPS = 1.001e-5
# Keras momentum 0.99 == torch momentum 0.01
BN_MOMENTUM = 0.01


@dataclass(frozen=True)
class ArchSpec:
    name: str
    stem_width: int
    widths: tuple[int, ...]
    blocks: tuple[int, ...]
    stem_stride: int = 2
    expansion: int = 4

    @property
    def feature_dim(self) -> int:
        return self.widths[-1] * self.expansion


ARCHITECTURES = {
    "resnet50v2": ArchSpec("resnet50v2", 64, (64, 128, 256, 512), (3, 4, 6, 3)),
    # Same topology, narrowed for CPU-only experiments.
    "resnet-mini": ArchSpec("resnet-mini", 16, (16, 32, 64, 128), (1, 1, 2, 2), stem_stride=4),
}


def _bn(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


class PreActBlock(nn.Module):
    """Bottleneck block: BN-ReLU, 1x1, 3x3 (strided), 1x1, plus shortcut."""

    def __init__(self, in_ch: int, width: int, stride: int, conv_shortcut: bool, expansion: int = 4):
        super().__init__()
        out_ch = width * expansion
        self.stride = stride
        self.preact_bn = _bn(in_ch)
        self.conv0 = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=True) if conv_shortcut else None
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = _bn(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = _bn(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        preact = F.relu(self.preact_bn(x))
        if self.conv0 is not None:
            shortcut = self.conv0(preact)
        elif self.stride > 1:
            shortcut = x[:, :, :: self.stride, :: self.stride]
        else:
            shortcut = x
        h = F.relu(self.bn1(self.conv1(preact)))
        h = F.relu(self.bn2(self.conv2(h)))
        return shortcut + self.conv3(h)


class ResNetV2Trunk(nn.Module):
    """Everything up to (and including) the final BN-ReLU; output is a feature map."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.conv1 = nn.Conv2d(3, arch.stem_width, 7, stride=arch.stem_stride, padding=3, bias=True)
        blocks: list[PreActBlock] = []
        self.block_names: list[str] = []
        in_ch = arch.stem_width
        n_stacks = len(arch.widths)
        for s, (width, n_blocks) in enumerate(zip(arch.widths, arch.blocks)):
            # Keras v2 puts the stride on the last block of every stack but the last.
            last_stride = 1 if s == n_stacks - 1 else 2
            for b in range(n_blocks):
                stride = last_stride if b == n_blocks - 1 else 1
                blocks.append(PreActBlock(in_ch, width, stride, conv_shortcut=(b == 0), expansion=arch.expansion))
                self.block_names.append(f"conv{s + 2}_block{b + 1}")
                in_ch = width * arch.expansion
        self.blocks = nn.ModuleList(blocks)
        self.post_bn = _bn(in_ch)

    def stem(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv1(x)
        # ZeroPadding2D(1) + MaxPooling2D(3, 2): pads with zeros, not -inf.
        return F.max_pool2d(F.pad(x, (1, 1, 1, 1)), 3, stride=2)

    def forward(self, x: torch.Tensor, start_block: int = 0) -> torch.Tensor:
        if start_block == 0:
            x = self.stem(x)
        for block in self.blocks[start_block:]:
            x = block(x)
        return F.relu(self.post_bn(x))

    def prefix(self, x: torch.Tensor, stop_block: int) -> torch.Tensor:
        """Activations entering block ``stop_block``."""
        x = self.stem(x)
        for block in self.blocks[:stop_block]:
            x = block(x)
        return x

    def unit_layout(self) -> list[tuple[str, list[str]]]:
        """Weight-bearing units in forward order as ``(unit_name, module_paths)``.

        A convolution owns the batch-norm that directly follows it in forward
        order: the stem conv owns the first block's pre-activation BN, each
        block's last conv owns the next block's pre-activation BN, and the final
        conv owns ``post_bn``.
        """
        layout: list[tuple[str, list[str]]] = [("conv1_conv", ["conv1"])]
        for i, (name, block) in enumerate(zip(self.block_names, self.blocks)):
            layout[-1][1].append(f"blocks.{i}.preact_bn")
            if block.conv0 is not None:
                layout.append((f"{name}_0_conv", [f"blocks.{i}.conv0"]))
            layout.append((f"{name}_1_conv", [f"blocks.{i}.conv1", f"blocks.{i}.bn1"]))
            layout.append((f"{name}_2_conv", [f"blocks.{i}.conv2", f"blocks.{i}.bn2"]))
            layout.append((f"{name}_3_conv", [f"blocks.{i}.conv3"]))
        layout[-1][1].append("post_bn")
        return layout


def init_default(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded re-initialisation: Glorot-uniform kernels, zero biases, identity BN."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_out, fan_in = m.weight.shape[0], m.weight[0].numel()
            fan_out *= m.weight[0, 0].numel()
            limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
            with torch.no_grad():
                m.weight.copy_((torch.rand(m.weight.shape, generator=generator) * 2 - 1) * limit)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
            m.reset_running_stats()


def load_keras_h5(trunk: ResNetV2Trunk, fc: nn.Linear | None, path) -> None:
    """Copy weights from a Keras ResNet50V2 ``.h5`` file into ``trunk`` (and ``fc``).

    Works with both full-model files and ``*_notop`` files; ``fc`` is only
    filled when a ``predictions`` layer is present.
    """
    import h5py

    with h5py.File(path, "r") as f:
        root = f["model_weights"] if "model_weights" in f else f

        def layer(name):
            grp = root[name]
            while name in grp:  # nested as name/name/kernel:0 in Keras 2 files
                grp = grp[name]
            return {k.split(":")[0]: np.asarray(v) for k, v in grp.items()}

        def conv(mod: nn.Conv2d, name):
            w = layer(name)
            mod.weight.data.copy_(torch.from_numpy(w["kernel"].transpose(3, 2, 0, 1)))
            if mod.bias is not None:
                mod.bias.data.copy_(torch.from_numpy(w["bias"]))

        def bn(mod: nn.BatchNorm2d, name):
            w = layer(name)
            mod.weight.data.copy_(torch.from_numpy(w["gamma"]))
            mod.bias.data.copy_(torch.from_numpy(w["beta"]))
            mod.running_mean.copy_(torch.from_numpy(w["moving_mean"]))
            mod.running_var.copy_(torch.from_numpy(w["moving_variance"]))

        conv(trunk.conv1, "conv1_conv")
        for name, block in zip(trunk.block_names, trunk.blocks):
            bn(block.preact_bn, f"{name}_preact_bn")
            if block.conv0 is not None:
                conv(block.conv0, f"{name}_0_conv")
            conv(block.conv1, f"{name}_1_conv")
            bn(block.bn1, f"{name}_1_bn")
            conv(block.conv2, f"{name}_2_conv")
            bn(block.bn2, f"{name}_2_bn")
            conv(block.conv3, f"{name}_3_conv")
        bn(trunk.post_bn, "post_bn")
        if fc is not None and "predictions" in root:
            w = layer("predictions")
            fc.weight.data.copy_(torch.from_numpy(w["kernel"].T))
            fc.bias.data.copy_(torch.from_numpy(w["bias"]))
