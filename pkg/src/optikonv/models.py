"""CIFAR VGG13 / ResNet18 and their co-designed (optical stage 1) variants.

Stage naming used by ``ModelSpec.stages_removed``:

* VGG13: ``stage{1..5}``, each two 3x3 conv-BN-ReLU units and a max-pool;
  a unit is named ``stage{s}_conv{c}``.
* ResNet18: ``stage1`` is the 3x3 stem plus the first pair of basic blocks,
  ``stage{2..4}`` are the later pairs; a block is ``stage{s}_block{b}``. Only
  shape-preserving blocks (``b = 2``) can be removed.

The co-design variant swaps stage 1's convolutions for an
:class:`~optikonv.optical_layer.OpticalLayer` whose 1x1 expands to the
stage-1 width, followed by ReLU as in the unit it replaces.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import (
    BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Identity, Linear, MaxPool2d, Module, ReLU,
    Sequential,
)
from .optical_layer import OpticalLayer, OpticalLayerSpec

VGG13_WIDTHS = ((64, 64), (128, 128), (256, 256), (512, 512), (512, 512))
RESNET18_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "vgg13"
    variant: str = "electronic"
    optical: OpticalLayerSpec = field(default_factory=OpticalLayerSpec)
    stages_removed: tuple = ()
    width: float = 1.0
    num_classes: int = 10

    def validate(self):
        if self.architecture not in ("vgg13", "resnet18"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.variant not in ("electronic", "codesign"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.width > 0:
            raise ConfigError(f"width must be > 0, got {self.width}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        pat = r"stage(\d)_conv(\d)" if self.architecture == "vgg13" else r"stage(\d)_block(\d)"
        for name in self.stages_removed:
            m = re.fullmatch(pat, name)
            if m is None:
                raise ConfigError(f"{name!r} is not a removable unit of {self.architecture}")
            s, u = int(m.group(1)), int(m.group(2))
            if s == 1:
                raise ConfigError("stage 1 is replaced, not removed; use variant='codesign'")
            if self.architecture == "vgg13" and not (2 <= s <= 5 and u in (1, 2)):
                raise ConfigError(f"{name!r} does not exist in vgg13")
            if self.architecture == "resnet18":
                if not (2 <= s <= 4 and u in (1, 2)):
                    raise ConfigError(f"{name!r} does not exist in resnet18")
                if u == 1:
                    raise ConfigError(f"{name!r} changes resolution and width; only block2 can go")
        if self.variant == "codesign":
            w1 = _w(64, self.width)
            if w1 < self.optical.channels:
                raise ConfigError(f"stage-1 width {w1} is below the optical channel count "
                                  f"{self.optical.channels}; raise width or lower optical.channels")
        if self.architecture == "vgg13":
            for s in range(2, 6):
                if {f"stage{s}_conv1", f"stage{s}_conv2"} <= set(self.stages_removed):
                    raise ConfigError(f"removing both convs empties stage{s}")
        return self


def _w(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _conv_unit(cin, cout, rng):
    return [Conv2d(cin, cout, 3, rng=rng), BatchNorm2d(cout), ReLU()]


def _optical_stage(spec: ModelSpec, width1: int, rng):
    ospec = replace(spec.optical, expand_to=width1).validate()
    layer = OpticalLayer(ospec, rng=rng)
    if ospec.silu_position == "pre_1x1":
        return [layer, ReLU()], ["optical", "relu"]
    return [layer], ["optical"]


class VGG(Module):
    def __init__(self, spec: ModelSpec, rng):
        layers, names = [], []
        cin = 3
        for s, widths in enumerate(VGG13_WIDTHS, start=1):
            stage, snames = [], []
            if s == 1 and spec.variant == "codesign":
                cout = _w(widths[-1], spec.width)
                stage, snames = _optical_stage(spec, cout, rng)
                cin = cout
            else:
                for c, width in enumerate(widths, start=1):
                    if f"stage{s}_conv{c}" in spec.stages_removed:
                        continue
                    cout = _w(width, spec.width)
                    stage += _conv_unit(cin, cout, rng)
                    snames += [f"conv{c}", f"bn{c}", f"relu{c}"]
                    cin = cout
            stage.append(MaxPool2d(2))
            snames.append("pool")
            layers.append(Sequential(*stage, names=snames))
            names.append(f"stage{s}")
        self.features = Sequential(*layers, names=names)
        self.flatten = Flatten()
        self.classifier = Linear(cin, spec.num_classes, rng=rng)

    def forward(self, x):
        return self.classifier(self.flatten(self.features(x)))


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        self.relu2 = ReLU()
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(Conv2d(cin, cout, 1, stride=stride, padding=0, rng=rng),
                                       BatchNorm2d(cout), names=["conv", "bn"])
        else:
            self.shortcut = Identity()

    def forward(self, x):
        y = self.relu1(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.relu2(T.add(y, self.shortcut(x)))


class ResNet(Module):
    def __init__(self, spec: ModelSpec, rng):
        widths = [_w(c, spec.width) for c in RESNET18_WIDTHS]
        stages, names = [], []
        for s, width in enumerate(widths, start=1):
            if s == 1:
                if spec.variant == "codesign":
                    layers, lnames = _optical_stage(spec, width, rng)
                else:
                    layers = [Conv2d(3, width, 3, rng=rng), BatchNorm2d(width), ReLU(),
                              BasicBlock(width, width, 1, rng), BasicBlock(width, width, 1, rng)]
                    lnames = ["stem_conv", "stem_bn", "stem_relu", "block1", "block2"]
            else:
                layers = [BasicBlock(widths[s - 2], width, 2, rng)]
                lnames = ["block1"]
                if f"stage{s}_block2" not in spec.stages_removed:
                    layers.append(BasicBlock(width, width, 1, rng))
                    lnames.append("block2")
            stages.append(Sequential(*layers, names=lnames))
            names.append(f"stage{s}")
        self.features = Sequential(*stages, names=names)
        self.pool = GlobalAvgPool()
        self.flatten = Flatten()
        self.classifier = Linear(widths[-1], spec.num_classes, rng=rng)

    def forward(self, x):
        return self.classifier(self.flatten(self.pool(self.features(x))))


def build_model(spec: ModelSpec, seed: int = 0) -> Module:
    """Instantiate ``spec`` with weights drawn from ``default_rng(seed)``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    model = VGG(spec, rng) if spec.architecture == "vgg13" else ResNet(spec, rng)
    model.spec = spec
    return model


def reference_spec(architecture: str, width: float = 1.0, **optical) -> ModelSpec:
    """Co-design reference: optical stage 1 plus one stage-2 unit removed."""
    removed = ("stage2_conv2",) if architecture == "vgg13" else ("stage2_block2",)
    return ModelSpec(architecture, "codesign", OpticalLayerSpec(**optical), removed, width)


def optical_layers(model: Module):
    return [m for _, m in model.named_modules() if isinstance(m, OpticalLayer)]
