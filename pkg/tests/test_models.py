import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optikonv.errors import ConfigError, UnsupportedOpError
from optikonv.macs import count_macs, format_table, mac_table, reduction
from optikonv.models import ModelSpec, build_model, optical_layers, reference_spec
from optikonv.nn import (
    BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d, Module, ReLU, Sequential, SiLU,
)
from optikonv.optical_layer import OpticalLayer, OpticalLayerSpec
from optikonv.tensor import Tensor


class Square(Module):
    def forward(self, x):
        return x * x


class TestMacRules:
    def test_conv_example(self):
        assert count_macs(Conv2d(3, 64, 3)) == 1_769_472

    def test_linear_example(self):
        assert count_macs(Linear(512, 10), (1, 512)) == 5_120

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 3, 5]), st.integers(1, 2),
           st.integers(5, 12), st.integers(1, 3))
    def test_conv_formula(self, cin, cout, k, stride, size, n):
        conv = Conv2d(cin, cout, k, stride=stride)
        ho = (size + 2 * (k // 2) - k) // stride + 1
        assert count_macs(conv, (n, cin, size, size)) == n * cout * ho * ho * cin * k * k

    @pytest.mark.parametrize("layer", [BatchNorm2d(4), ReLU(), SiLU(), MaxPool2d(2), GlobalAvgPool(), Flatten()])
    def test_free_layers(self, layer):
        assert count_macs(layer, (2, 4, 8, 8)) == 0

    def test_batch_scales_linearly(self):
        net = Sequential(Conv2d(3, 4, 3), ReLU(), GlobalAvgPool(), Flatten(), Linear(4, 10))
        assert count_macs(net, (5, 3, 8, 8)) == 5 * count_macs(net, (1, 3, 8, 8))

    def test_optics_are_free(self):
        layer = OpticalLayer(OpticalLayerSpec(channels=2, kernel=5, branch_sizes=(5, 3), expand_to=4))
        rows = {r.kind: r.macs for r in mac_table(layer)}
        assert rows["OpticalConv"] == 0
        assert rows["Conv2d"] == 4 * 6 * 32 * 32
        eq = {r.kind: r.macs for r in mac_table(layer, electronic_equivalent=True)}
        assert eq["OpticalConv"] == 6 * 32 * 32 * (25 + 9)

    def test_unsupported_is_listed(self):
        net = Sequential(Conv2d(3, 4, 3), Square(), Square(), names=["conv", "sq1", "sq2"])
        with pytest.raises(UnsupportedOpError, match=r"sq1 \(Square\), sq2 \(Square\)"):
            count_macs(net, (1, 3, 8, 8))

    def test_table_totals(self):
        rows = mac_table(build_model(ModelSpec("vgg13", width=0.25)))
        text = format_table(rows)
        assert text.splitlines()[-1].split()[-1] == f"{sum(r.macs for r in rows):,}"

    def test_counting_leaves_mode_alone(self):
        m = build_model(ModelSpec("vgg13", width=0.25))
        m.train()
        before = m.state_dict()
        count_macs(m)
        assert m.training
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(v, before[k])


class TestModelMacs:
    def test_vgg13(self):
        macs = count_macs(build_model(ModelSpec("vgg13")))
        assert macs == 228_267_008
        assert abs(macs / 229e6 - 1) < 0.05

    def test_resnet18_structure(self):
        # standard CIFAR ResNet18 (3x3 stem, 2-2-2-2 basic blocks, 64..512)
        assert count_macs(build_model(ModelSpec("resnet18"))) == 555_422_720

    def test_vgg13_reference_codesign(self):
        e = count_macs(build_model(ModelSpec("vgg13")))
        c = count_macs(build_model(reference_spec("vgg13")))
        assert c == 153_359_360
        assert reduction(c, e) >= 0.30

    def test_resnet18_reference_codesign(self):
        e = count_macs(build_model(ModelSpec("resnet18")))
        c = count_macs(build_model(reference_spec("resnet18")))
        assert reduction(c, e) >= 0.30

    def test_electronic_vs_itself(self):
        e = count_macs(build_model(ModelSpec("vgg13", width=0.5)))
        assert reduction(e, e) == 0.0

    def test_codesign_excludes_optics(self):
        m = build_model(reference_spec("vgg13", width=0.25))
        assert count_macs(m, electronic_equivalent=True) > count_macs(m)


class TestBuild:
    @pytest.mark.parametrize("arch", ["vgg13", "resnet18"])
    @pytest.mark.parametrize("variant", ["electronic", "codesign"])
    def test_logits(self, arch, variant, rng):
        m = build_model(ModelSpec(arch, variant, width=0.25))
        m.eval()
        assert m(Tensor(rng.normal(size=(2, 3, 32, 32)))).shape == (2, 10)

    def test_codesign_replaces_stage1(self):
        m = build_model(ModelSpec("vgg13", "codesign", width=0.5))
        (layer,) = optical_layers(m)
        assert layer.spec.expand_to == 32
        assert not any(n.startswith("features.stage1.conv") for n, _ in m.named_modules())

    def test_removed_units_gone(self):
        names = {n for n, _ in build_model(reference_spec("vgg13", width=0.25)).named_modules()}
        assert "features.stage2.conv1" in names and "features.stage2.conv2" not in names
        names = {n for n, _ in build_model(reference_spec("resnet18", width=0.25)).named_modules()}
        assert "features.stage2.block1" in names and "features.stage2.block2" not in names

    @pytest.mark.parametrize("spec", [
        ModelSpec("vgg19"),
        ModelSpec("vgg13", "hybrid"),
        ModelSpec("vgg13", stages_removed=("stage1_conv1",)),
        ModelSpec("vgg13", stages_removed=("stage2_conv1", "stage2_conv2")),
        ModelSpec("vgg13", stages_removed=("stage2_block2",)),
        ModelSpec("resnet18", stages_removed=("stage2_block1",)),
        ModelSpec("resnet18", stages_removed=("stage5_block2",)),
        ModelSpec("vgg13", "codesign", width=0.125),
        ModelSpec("vgg13", width=0),
    ])
    def test_inconsistent_specs(self, spec):
        with pytest.raises(ConfigError):
            build_model(spec)

    def test_seeded_init(self):
        a = build_model(ModelSpec("resnet18", width=0.25), seed=3).state_dict()
        b = build_model(ModelSpec("resnet18", width=0.25), seed=3).state_dict()
        c = build_model(ModelSpec("resnet18", width=0.25), seed=4).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))

    def test_remove_first_vgg_conv_keeps_shapes(self, rng):
        m = build_model(ModelSpec("vgg13", stages_removed=("stage3_conv1",), width=0.25))
        m.eval()
        assert m(Tensor(rng.normal(size=(1, 3, 32, 32)))).shape == (1, 10)
