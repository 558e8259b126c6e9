"""Model-zoo tests: architecture shape, budget table, static twins, and
config round-trips."""

import numpy as np
import pytest

import dynconv.tensor as T
from dynconv.counting import count_madds, count_model, count_params
from dynconv.layers import DcdConv, StaticConv
from dynconv.models import (
    STATIC_INVARIANTS,
    GlobalPool,
    MaxPool2d,
    build_from_config,
    build_mobilenetv2,
    build_resnet,
    check_golden,
    golden_rows,
    make_divisible,
)


def _conv_layers(graph):
    return [(layer, role) for layer, role, *_ in graph.iter_layers()
            if isinstance(layer, (DcdConv, StaticConv))]


# ---------------------------------------------------------------------------
# building blocks


def test_make_divisible_rounding():
    assert make_divisible(32 * 0.5) == 16
    assert make_divisible(24 * 0.5) == 16      # rounds 12 up to 16
    assert make_divisible(24 * 0.35) == 8      # 8.4 stays at 8 (within 90%)
    assert make_divisible(32 * 0.35) == 16     # 11.2 → 8 < 90%, bumped to 16
    assert make_divisible(1280) == 1280


def test_max_pool_matches_naive_window_maximum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 9, 9))
    out = T.max_pool2d(x, 3, 2, 1)
    assert out.shape == (2, 3, 5, 5)
    padded = np.full((2, 3, 11, 11), -np.inf)
    padded[:, :, 1:10, 1:10] = x
    for n in range(2):
        for c in range(3):
            for i in range(5):
                for j in range(5):
                    window = padded[n, c, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    assert out[n, c, i, j] == window.max()


def test_pool_modules_shapes():
    mp = MaxPool2d("mp", 3, 2, 1)
    assert mp.out_size(56) == 28
    gp = GlobalPool("gp", 8)
    x = np.random.default_rng(1).normal(size=(2, 8, 4, 4))
    pooled = gp.forward(x)
    assert pooled.shape == (2, 8, 1, 1)
    np.testing.assert_allclose(pooled[:, :, 0, 0], x.mean(axis=(2, 3)), rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# architecture shape


def test_mobilenet_x05_channel_progression():
    graph = build_mobilenetv2(width=0.5)
    convs = _conv_layers(graph)
    assert convs[0][0].name == "stem" and convs[0][0].c_out == 16
    projects = [layer.c_out for layer, _ in convs if layer.name.endswith(".project")]
    assert projects == [8, 16, 16, 16, 16, 16, 32, 32, 32, 32, 48, 48, 48, 80, 80, 80, 160]
    head = [layer for layer, _ in convs if layer.name == "head"][0]
    assert (head.c_in, head.c_out) == (160, 1280)
    cls = [layer for layer, _ in convs if layer.name == "cls"][0]
    assert (cls.c_in, cls.c_out) == (1280, 1000)


def test_mobilenet_block_count_and_depthwise_groups():
    graph = build_mobilenetv2(width=0.5)
    convs = _conv_layers(graph)
    dws = [layer for layer, role in convs if role == "dw"]
    assert len(dws) == 17
    assert all(layer.groups == layer.c_in == layer.c_out for layer in dws)
    expands = [layer for layer, _ in convs if layer.name.endswith(".expand")]
    assert len(expands) == 16  # the first block has expansion factor 1


def test_mobilenet_placement_controls_layer_types():
    static = build_mobilenetv2(width=0.35, resolution=32)
    assert all(isinstance(layer, StaticConv) for layer, _ in _conv_layers(static))
    dcd = build_mobilenetv2(width=0.35, placement=("pw", "cls"), resolution=32)
    kinds = {(layer.name, type(layer).__name__) for layer, _ in _conv_layers(dcd)}
    assert ("stem", "StaticConv") in kinds
    assert ("cls", "DcdConv") in kinds
    assert all(type_name == "StaticConv" for name, type_name in kinds if name.endswith(".dw"))
    dw = build_mobilenetv2(width=0.35, placement=("dw",), resolution=32)
    dw_layers = [layer for layer, role in _conv_layers(dw) if role == "dw"]
    assert all(isinstance(layer, DcdConv) and layer.variant == "depthwise" for layer in dw_layers)
    assert all(layer.dims.l_k == 4 for layer in dw_layers)


def test_mobilenet_rejects_unknown_placement():
    with pytest.raises(ValueError):
        build_mobilenetv2(width=0.5, placement=("stem",))


def test_resnet_layouts():
    r10 = build_resnet(depth=10, resolution=32)
    r18 = build_resnet(depth=18, resolution=32)
    convs10 = [layer for layer, role in _conv_layers(r10) if role == "conv3x3"]
    convs18 = [layer for layer, role in _conv_layers(r18) if role == "conv3x3"]
    assert len(convs10) == 2 * (1 + 2 + 1 + 1)
    assert len(convs18) == 2 * (2 + 2 + 2 + 2)
    downs = [layer for layer, role in _conv_layers(r18) if role == "downsample"]
    assert [(d.c_in, d.c_out) for d in downs] == [(64, 128), (128, 256), (256, 512)]
    with pytest.raises(ValueError):
        build_resnet(depth=34)
    with pytest.raises(ValueError):
        build_resnet(depth=18, dcd="everything")


def test_resnet_dcd_policy_latents_and_squeeze():
    graph = build_resnet(depth=18, dcd="channel_only_3x3", resolution=32)
    by_shape = {}
    for layer, role in _conv_layers(graph):
        if role == "conv3x3":
            assert isinstance(layer, DcdConv) and layer.variant == "channel_only_kxk"
            by_shape[(layer.c_in, layer.c_out)] = (layer.dims.l, layer.branch.squeeze)
        else:
            assert isinstance(layer, StaticConv)
    assert by_shape[(64, 64)] == (8, 36)
    assert by_shape[(128, 128)] == (16, 72)
    assert by_shape[(256, 512)] == (32, 144)
    assert by_shape[(512, 512)] == (32, 288)


def test_resnet50_matches_reference_parameter_count():
    graph = build_resnet(depth=50)
    assert count_params(graph).total_params == 25_557_032


def test_resnet50_dcd_builds_and_adds_parameters():
    static = count_params(build_resnet(depth=50)).total_params
    dcd = count_params(build_resnet(depth=50, dcd="channel_only_3x3")).total_params
    assert dcd > static


# ---------------------------------------------------------------------------
# budget table


def test_golden_budget_rows_all_pass():
    results = check_golden()
    assert len(results) == len(golden_rows()) == 6
    for res in results:
        assert res.ok, res.line()


def test_static_width_one_invariant():
    name, build, target, tol = STATIC_INVARIANTS[0]
    params = count_params(build()).total_params
    assert abs(params - target) <= tol


def test_exact_budget_values_are_stable():
    by_id = {res.row_id: res for res in check_golden()}
    assert by_id["mobilenetv2_x0.5/static"].params == 1_968_680
    assert by_id["mobilenetv2_x0.5/static"].madds == 97_133_120
    assert by_id["resnet18/static"].params == 11_176_512
    assert by_id["resnet18/static"].madds == 1_813_561_856
    assert by_id["resnet18/dcd"].params == 13_921_460
    assert by_id["resnet10/dcd"].params == 6_442_252


# ---------------------------------------------------------------------------
# forward passes and twins


def test_mobilenet_forward_shape_and_finiteness():
    graph = build_mobilenetv2(width=0.35, num_classes=13, resolution=32, seed=5)
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
    logits = graph.forward(x)
    assert logits.shape == (2, 13)
    assert np.all(np.isfinite(logits))


def test_resnet_forward_shape():
    graph = build_resnet(depth=10, num_classes=7, resolution=32, seed=2)
    x = np.random.default_rng(1).normal(size=(2, 3, 32, 32))
    logits = graph.forward(x)
    assert logits.shape == (2, 7)


def test_static_twin_is_bit_identical_at_initialization():
    graph = build_mobilenetv2(width=0.35, placement=("pw", "cls"), num_classes=11,
                              resolution=32, seed=3)
    twin = graph.static_twin()
    x = np.random.default_rng(2).normal(size=(2, 3, 32, 32))
    assert np.array_equal(graph.forward(x), twin.forward(x))


def test_static_twin_diverges_once_branch_is_nonzero():
    graph = build_mobilenetv2(width=0.35, placement=("cls",), num_classes=11,
                              resolution=32, seed=3)
    twin = graph.static_twin()
    rng = np.random.default_rng(9)
    cls = [layer for layer, _ in _conv_layers(graph) if isinstance(layer, DcdConv)][0]
    cls.branch.w2.value = rng.normal(size=cls.branch.w2.value.shape) * 0.1
    x = rng.normal(size=(2, 3, 32, 32))
    assert not np.array_equal(graph.forward(x), twin.forward(x))


def test_twin_shares_base_kernel_storage():
    graph = build_resnet(depth=10, dcd="channel_only_3x3", num_classes=5, resolution=32)
    twin = graph.static_twin()
    dcd_params = {p.name: p for p in graph.parameters()}
    for p in twin.parameters():
        if p.name.endswith(".w0"):
            assert p is dcd_params[p.name]


# ---------------------------------------------------------------------------
# reproducibility and config round-trip


def test_same_seed_reproduces_same_weights():
    a = build_mobilenetv2(width=0.35, placement=("pw",), resolution=32, seed=7)
    b = build_mobilenetv2(width=0.35, placement=("pw",), resolution=32, seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)
    c = build_mobilenetv2(width=0.35, placement=("pw",), resolution=32, seed=8)
    assert any(not np.array_equal(pa.value, pc.value)
               for pa, pc in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("build", [
    lambda: build_mobilenetv2(width=0.35, placement=("pw", "cls"), num_classes=21,
                              resolution=48, seed=11, l_multiplier=0.5),
    lambda: build_resnet(depth=10, dcd="channel_only_3x3", num_classes=9,
                         resolution=64, seed=4, r=8.0),
])
def test_config_round_trip_rebuilds_identical_model(build):
    graph = build()
    rebuilt = build_from_config(graph.to_config())
    assert rebuilt.name == graph.name
    assert rebuilt.to_config() == graph.to_config()
    pa, pb = graph.parameters(), rebuilt.parameters()
    assert [p.name for p in pa] == [p.name for p in pb]
    for x, y in zip(pa, pb):
        assert np.array_equal(x.value, y.value)
    ra = count_model(graph, graph.resolution)
    rb = count_model(rebuilt, rebuilt.resolution)
    assert ra.total_params == rb.total_params
    assert ra.total_madds == rb.total_madds


def test_build_from_config_rejects_unknown_family():
    with pytest.raises(ValueError):
        build_from_config({"model.family": "transformer"})


def test_latent_multiplier_scales_latents():
    full = build_mobilenetv2(width=0.5, placement=("pw",), resolution=32, seed=0)
    half = build_mobilenetv2(width=0.5, placement=("pw",), resolution=32, seed=0,
                             l_multiplier=0.5)
    full_l = {layer.name: layer.dims.l for layer, _ in _conv_layers(full)
              if isinstance(layer, DcdConv)}
    half_l = {layer.name: layer.dims.l for layer, _ in _conv_layers(half)
              if isinstance(layer, DcdConv)}
    assert all(half_l[name] == max(1, round(full_l[name] * 0.5)) for name in full_l)
    assert count_params(half).total_params < count_params(full).total_params


def test_iter_layers_tracks_spatial_sizes():
    graph = build_resnet(depth=18, resolution=224)
    sizes = {layer.name if hasattr(layer, "name") else role: (h_in, h_out)
             for layer, role, h_in, h_out in graph.iter_layers(224)}
    assert sizes["stem"] == (224, 112)
    assert sizes["maxpool"] == (112, 56)
    assert sizes["s1b0.conv1"] == (56, 56)
    assert sizes["s2b0.conv1"] == (56, 28)
    assert sizes["s2b0.down"] == (56, 28)
    assert sizes["s4b1.conv2"] == (7, 7)
    assert sizes["fc"] == (1, 1)
