"""Model zoo: MobileNetV2- and ResNet-style graphs with static or dynamic
convolutions sharing one architecture.

A `ModelGraph` is an ordered list of modules (leaf layers, inverted
residuals, residual blocks).  It can run a forward pass (eager or taped),
enumerate its layers with the spatial size each one sees (for accounting),
rebuild itself from a flat config mapping, and derive a *static twin* whose
plain convolutions share the dynamic model's base kernels — at
initialization the two produce bit-identical outputs.

Latent/squeeze policies for the dynamic variants (fixed here so parameter
budgets are reproducible):

* MobileNetV2 pointwise: L = default_latent_dim(max(C_in, C_out)) inside
  inverted residuals; the feature-head expansion (→1280) uses
  default_latent_dim(C_in) since its 8× fan-out makes the larger-endpoint
  rule disproportionate; the classifier uses latent_dim_pow2(C_in).  The
  branch bottleneck is ⌊√(C_in·C_out)/8⌋ below width 1.0 and
  ⌊max(C_in, C_out)/16⌋ at width ≥ 1.0 (reduction r defaults to 8 and 16
  respectively); the classifier keeps the plain ⌊C_in/r⌋ default.
  Depthwise layers use the default kernel-space latent.
* ResNet channel-wise 3×3: L = latent_dim_pow2(C_out) and bottleneck
  ⌊k²·C_in/16⌋, with the latent budget check relaxed (stage-4 layers use
  L = 32 at C = 512, i.e. L² > C, which is the intended spend).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import value_of
from .layers import (
    DcdConv,
    LatentDims,
    StaticConv,
    VanillaDynConv,
    default_latent_dim,
    latent_dim_pow2,
)

PLACEMENTS = ("dw", "pw", "cls")


# ---------------------------------------------------------------------------
# graph modules


class MaxPool2d:
    def __init__(self, name: str, k: int, stride: int, padding: int = 0):
        self.name, self.k, self.stride, self.padding = name, k, stride, padding

    def forward(self, x, train: bool = False, tape=None):
        return ad.max_pool2d(x, self.k, self.stride, self.padding)

    def out_size(self, h: int) -> int:
        return T.conv_out_size(h, self.k, self.stride, self.padding)

    def parameters(self):
        return []

    def buffers(self):
        return []


class GlobalPool:
    """Spatial mean, reshaped to (N, C, 1, 1) so 1×1 heads can follow."""

    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels

    def forward(self, x, train: bool = False, tape=None):
        n = value_of(x).shape[0]
        return ad.reshape(ad.global_avg_pool(x), (n, self.channels, 1, 1))

    def out_size(self, h: int) -> int:
        return 1

    def parameters(self):
        return []

    def buffers(self):
        return []


class Leaf:
    def __init__(self, layer, role: str):
        self.layer, self.role = layer, role

    def forward(self, x, train: bool = False, tape=None):
        return self.layer.forward(x, train=train, tape=tape)

    def walk(self, h: int):
        h_out = self.layer.out_size(h)
        return [(self.layer, self.role, h, h_out)], h_out

    def map_layers(self, fn):
        return Leaf(fn(self.layer), self.role)

    def parameters(self):
        return self.layer.parameters()

    def buffers(self):
        return self.layer.buffers()


class InvertedResidual:
    """(expand) → depthwise → project, with identity skip when shapes allow."""

    def __init__(self, steps: list[tuple[object, str]], use_skip: bool):
        self.steps = steps
        self.use_skip = use_skip

    def forward(self, x, train: bool = False, tape=None):
        h = x
        for layer, _ in self.steps:
            h = layer.forward(h, train=train, tape=tape)
        return ad.add(h, x) if self.use_skip else h

    def walk(self, h: int):
        rows, cur = [], h
        for layer, role in self.steps:
            nxt = layer.out_size(cur)
            rows.append((layer, role, cur, nxt))
            cur = nxt
        return rows, cur

    def map_layers(self, fn):
        return InvertedResidual([(fn(layer), role) for layer, role in self.steps], self.use_skip)

    def parameters(self):
        return [p for layer, _ in self.steps for p in layer.parameters()]

    def buffers(self):
        return [b for layer, _ in self.steps for b in layer.buffers()]


class ResidualBlock:
    """Stacked convolutions plus identity (or 1×1-projected) shortcut; the
    last convolution is linear and the joining ReLU lives here."""

    def __init__(self, convs: list[tuple[object, str]], downsample=None):
        self.convs = convs
        self.downsample = downsample

    def forward(self, x, train: bool = False, tape=None):
        h = x
        for layer, _ in self.convs:
            h = layer.forward(h, train=train, tape=tape)
        shortcut = self.downsample.forward(x, train=train, tape=tape) if self.downsample is not None else x
        return ad.relu(ad.add(h, shortcut))

    def walk(self, h: int):
        rows, cur = [], h
        for layer, role in self.convs:
            nxt = layer.out_size(cur)
            rows.append((layer, role, cur, nxt))
            cur = nxt
        if self.downsample is not None:
            rows.append((self.downsample, "downsample", h, cur))
        return rows, cur

    def map_layers(self, fn):
        down = fn(self.downsample) if self.downsample is not None else None
        return ResidualBlock([(fn(layer), role) for layer, role in self.convs], down)

    def parameters(self):
        out = [p for layer, _ in self.convs for p in layer.parameters()]
        if self.downsample is not None:
            out.extend(self.downsample.parameters())
        return out

    def buffers(self):
        out = [b for layer, _ in self.convs for b in layer.buffers()]
        if self.downsample is not None:
            out.extend(self.downsample.buffers())
        return out


class ModelGraph:
    def __init__(self, name: str, modules: list, input_channels: int, num_classes: int,
                 resolution: int, config: dict[str, str]):
        self.name = name
        self.modules = modules
        self.input_channels = input_channels
        self.num_classes = num_classes
        self.resolution = resolution
        self.config = config

    def forward(self, x, train: bool = False, tape=None):
        xv = value_of(x)
        if xv.ndim != 4 or xv.shape[1] != self.input_channels:
            raise ValueError(f"{self.name} expects (N,{self.input_channels},H,W), got {xv.shape}")
        h = x
        for module in self.modules:
            h = module.forward(h, train=train, tape=tape)
        return ad.reshape(h, (xv.shape[0], self.num_classes))

    def iter_layers(self, resolution: int | None = None):
        h = self.resolution if resolution is None else resolution
        for module in self.modules:
            rows, h = module.walk(h)
            yield from rows

    def parameters(self):
        seen, out = set(), []
        for module in self.modules:
            for p in module.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def buffers(self):
        return [b for module in self.modules for b in module.buffers()]

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Every persistent tensor: learnable parameters plus running stats."""
        return [(p.name, p.value) for p in self.parameters()] + list(self.buffers())

    def load_state(self, data: dict[str, np.ndarray]) -> None:
        """Install tensors by name; callers validate names/shapes first."""
        for p in self.parameters():
            p.value = np.array(data[p.name], dtype=float)
        for layer, *_ in self.iter_layers():
            bn = getattr(layer, "bn", None)
            if bn is not None:
                bn.running_mean = np.array(data[f"{bn.name}.running_mean"], dtype=float)
                bn.running_var = np.array(data[f"{bn.name}.running_var"], dtype=float)

    def static_twin(self) -> "ModelGraph":
        """Same graph with every dynamic convolution replaced by its static
        equivalent (sharing the base kernel, bias, and batch-norm state)."""

        def swap(layer):
            return layer.static_equivalent() if isinstance(layer, DcdConv) else layer

        cfg = dict(self.config)
        cfg["model.twin"] = "static"
        return ModelGraph(f"{self.name}-static-twin", [m.map_layers(swap) for m in self.modules],
                          self.input_channels, self.num_classes, self.resolution, cfg)

    def to_config(self) -> dict[str, str]:
        return dict(self.config)


# ---------------------------------------------------------------------------
# shared builder helpers


def _layer_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _scaled_latent(base: int, multiplier: float) -> int:
    return max(1, round(base * multiplier))


# ---------------------------------------------------------------------------
# MobileNetV2

MOBILENET_SETTINGS = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                      (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def make_divisible(v: float, divisor: int = 8, min_value: int | None = None) -> int:
    if min_value is None:
        min_value = divisor
    out = max(min_value, int(v + divisor / 2) // divisor * divisor)
    if out < 0.9 * v:
        out += divisor
    return int(out)


def build_mobilenetv2(width: float = 1.0, placement=(), r: float | None = None,
                      num_classes: int = 1000, resolution: int = 224, seed: int = 0,
                      l_multiplier: float = 1.0) -> ModelGraph:
    placement = frozenset(placement)
    unknown = placement - set(PLACEMENTS)
    if unknown:
        raise ValueError(f"unknown placement(s) {sorted(unknown)}; choose from {PLACEMENTS}")
    if r is None:
        r = 8.0 if width < 1.0 else 16.0

    counter = {"i": 0}

    def rng():
        counter["i"] += 1
        return _layer_rng(seed, counter["i"])

    def pw_squeeze(c_in: int, c_out: int) -> int:
        if width < 1.0:
            return max(1, math.isqrt(c_in * c_out) // 8)
        return max(1, max(c_in, c_out) // 16)

    def pointwise(name: str, c_in: int, c_out: int, activation: str | None, base_latent: int | None = None):
        if "pw" in placement:
            if base_latent is None:
                base_latent = default_latent_dim(max(c_in, c_out))
            dims = LatentDims(l=_scaled_latent(base_latent, l_multiplier))
            return DcdConv(name, c_in, c_out, k=1, variant="pointwise", dims=dims, r=r,
                           squeeze=pw_squeeze(c_in, c_out), activation=activation, rng=rng(),
                           enforce_budget=False)
        return StaticConv(name, c_in, c_out, k=1, activation=activation, rng=rng())

    def depthwise(name: str, c: int, stride: int):
        if "dw" in placement:
            return DcdConv(name, c, c, k=3, variant="depthwise", r=r, stride=stride, padding=1,
                           activation="relu", rng=rng(), enforce_budget=False)
        return StaticConv(name, c, c, k=3, stride=stride, padding=1, groups=c,
                          activation="relu", rng=rng())

    c_stem = make_divisible(32 * width)
    c_last = make_divisible(1280 * max(1.0, width))
    modules: list = [Leaf(StaticConv("stem", 3, c_stem, k=3, stride=2, padding=1,
                                     activation="relu", rng=rng()), "stem")]

    c_prev = c_stem
    block_idx = 0
    for t, c, n, s in MOBILENET_SETTINGS:
        c_out = make_divisible(c * width)
        for j in range(n):
            stride = s if j == 0 else 1
            prefix = f"b{block_idx}"
            steps: list[tuple[object, str]] = []
            c_mid = c_prev * t
            if t != 1:
                steps.append((pointwise(f"{prefix}.expand", c_prev, c_mid, "relu"), "pw"))
            steps.append((depthwise(f"{prefix}.dw", c_mid, stride), "dw"))
            steps.append((pointwise(f"{prefix}.project", c_mid, c_out, None), "pw"))
            modules.append(InvertedResidual(steps, use_skip=(stride == 1 and c_prev == c_out)))
            c_prev = c_out
            block_idx += 1

    modules.append(Leaf(pointwise("head", c_prev, c_last, "relu",
                                  base_latent=default_latent_dim(c_prev)), "pw"))
    modules.append(Leaf(GlobalPool("pool", c_last), "global_pool"))

    if "cls" in placement:
        cls_base = min(latent_dim_pow2(c_last), num_classes)
        cls_dims = LatentDims(l=_scaled_latent(cls_base, l_multiplier))
        cls = DcdConv("cls", c_last, num_classes, k=1, variant="pointwise", dims=cls_dims, r=r,
                      bias=True, with_bn=False, activation=None, rng=rng(), enforce_budget=False)
    else:
        cls = StaticConv("cls", c_last, num_classes, k=1, bias=True, with_bn=False,
                         activation=None, rng=rng())
    modules.append(Leaf(cls, "classifier"))

    config = {
        "model.family": "mobilenetv2",
        "model.width": repr(width),
        "model.placement": ",".join(sorted(placement)),
        "model.r": repr(r),
        "model.num_classes": str(num_classes),
        "model.resolution": str(resolution),
        "model.seed": str(seed),
        "model.l_multiplier": repr(l_multiplier),
    }
    tag = "+".join(sorted(placement)) if placement else "static"
    return ModelGraph(f"mobilenetv2_x{width:g}/{tag}", modules, 3, num_classes, resolution, config)


# ---------------------------------------------------------------------------
# ResNet

RESNET_LAYOUTS = {10: ("basic", (1, 2, 1, 1)), 18: ("basic", (2, 2, 2, 2)),
                  50: ("bottleneck", (3, 4, 6, 3))}
RESNET_DCD_MODES = ("off", "channel_only_3x3")


def build_resnet(depth: int = 18, dcd: str = "off", r: float = 16.0,
                 num_classes: int = 1000, resolution: int = 224, seed: int = 0,
                 l_multiplier: float = 1.0) -> ModelGraph:
    if depth not in RESNET_LAYOUTS:
        raise ValueError(f"unsupported depth {depth}; choose from {sorted(RESNET_LAYOUTS)}")
    if dcd not in RESNET_DCD_MODES:
        raise ValueError(f"unknown dcd mode {dcd!r}; choose from {RESNET_DCD_MODES}")
    block_kind, layout = RESNET_LAYOUTS[depth]
    dynamic = dcd != "off"

    counter = {"i": 0}

    def rng():
        counter["i"] += 1
        return _layer_rng(seed, counter["i"])

    def latent(c_out: int) -> LatentDims:
        return LatentDims(l=_scaled_latent(latent_dim_pow2(c_out), l_multiplier))

    def conv(name: str, c_in: int, c_out: int, k: int, stride: int, activation: str | None):
        padding = (k - 1) // 2
        if dynamic:
            variant = "channel_only_kxk" if k == 3 else "pointwise"
            return DcdConv(name, c_in, c_out, k=k, variant=variant, dims=latent(c_out), r=r,
                           squeeze=max(1, (k * k * c_in) // 16), stride=stride, padding=padding,
                           activation=activation, rng=rng(), enforce_budget=False)
        return StaticConv(name, c_in, c_out, k=k, stride=stride, padding=padding,
                          activation=activation, rng=rng())

    modules: list = [
        Leaf(StaticConv("stem", 3, 64, k=7, stride=2, padding=3, activation="relu", rng=rng()), "stem"),
        Leaf(MaxPool2d("maxpool", 3, 2, 1), "max_pool"),
    ]

    expansion = 1 if block_kind == "basic" else 4
    c_prev = 64
    for stage, (c_mid, blocks) in enumerate(zip((64, 128, 256, 512), layout)):
        stage_stride = 1 if stage == 0 else 2
        c_out = c_mid * expansion
        for j in range(blocks):
            stride = stage_stride if j == 0 else 1
            prefix = f"s{stage + 1}b{j}"
            if block_kind == "basic":
                convs = [
                    (conv(f"{prefix}.conv1", c_prev, c_mid, 3, stride, "relu"), "conv3x3"),
                    (conv(f"{prefix}.conv2", c_mid, c_out, 3, 1, None), "conv3x3"),
                ]
            else:
                convs = [
                    (conv(f"{prefix}.conv1", c_prev, c_mid, 1, 1, "relu"), "conv1x1"),
                    (conv(f"{prefix}.conv2", c_mid, c_mid, 3, stride, "relu"), "conv3x3"),
                    (conv(f"{prefix}.conv3", c_mid, c_out, 1, 1, None), "conv1x1"),
                ]
            down = None
            if stride != 1 or c_prev != c_out:
                down = StaticConv(f"{prefix}.down", c_prev, c_out, k=1, stride=stride,
                                  activation=None, rng=rng())
            modules.append(ResidualBlock(convs, down))
            c_prev = c_out

    modules.append(Leaf(GlobalPool("pool", c_prev), "global_pool"))
    modules.append(Leaf(StaticConv("fc", c_prev, num_classes, k=1, bias=True, with_bn=False,
                                   activation=None, rng=rng()), "classifier"))

    config = {
        "model.family": "resnet",
        "model.depth": str(depth),
        "model.dcd": dcd,
        "model.r": repr(r),
        "model.num_classes": str(num_classes),
        "model.resolution": str(resolution),
        "model.seed": str(seed),
        "model.l_multiplier": repr(l_multiplier),
    }
    tag = "static" if not dynamic else "dcd"
    return ModelGraph(f"resnet{depth}/{tag}", modules, 3, num_classes, resolution, config)


# ---------------------------------------------------------------------------
# config round-trip

BUILDERS: dict[str, Callable[[dict], ModelGraph]] = {}


def _mobilenet_from_config(cfg: dict) -> ModelGraph:
    placement = tuple(p for p in cfg.get("model.placement", "").split(",") if p)
    return build_mobilenetv2(
        width=float(cfg.get("model.width", "1.0")),
        placement=placement,
        r=float(cfg["model.r"]) if "model.r" in cfg else None,
        num_classes=int(cfg.get("model.num_classes", "1000")),
        resolution=int(cfg.get("model.resolution", "224")),
        seed=int(cfg.get("model.seed", "0")),
        l_multiplier=float(cfg.get("model.l_multiplier", "1.0")),
    )


def _resnet_from_config(cfg: dict) -> ModelGraph:
    return build_resnet(
        depth=int(cfg.get("model.depth", "18")),
        dcd=cfg.get("model.dcd", "off"),
        r=float(cfg.get("model.r", "16.0")),
        num_classes=int(cfg.get("model.num_classes", "1000")),
        resolution=int(cfg.get("model.resolution", "224")),
        seed=int(cfg.get("model.seed", "0")),
        l_multiplier=float(cfg.get("model.l_multiplier", "1.0")),
    )


BUILDERS["mobilenetv2"] = _mobilenet_from_config
BUILDERS["resnet"] = _resnet_from_config


def build_from_config(cfg: dict) -> ModelGraph:
    family = cfg.get("model.family")
    if family not in BUILDERS:
        raise ValueError(f"unknown model family {family!r}; known: {sorted(BUILDERS)}")
    return BUILDERS[family](cfg)


# ---------------------------------------------------------------------------
# reference budgets


@dataclass
class GoldenRow:
    row_id: str
    build: Callable[[], ModelGraph]
    resolution: int
    params_target: int
    params_tol: int
    madds_target: int | None
    madds_rel_tol: float
    include_classifier: bool


def golden_rows() -> list[GoldenRow]:
    return [
        GoldenRow("mobilenetv2_x0.5/static",
                  lambda: build_mobilenetv2(width=0.5), 224,
                  2_000_000, 50_000, 97_000_000, 0.02, True),
        GoldenRow("mobilenetv2_x0.5/dcd",
                  lambda: build_mobilenetv2(width=0.5, placement=("pw", "cls")), 224,
                  3_100_000, 100_000, 104_800_000, 0.02, True),
        GoldenRow("mobilenetv2_x1.0/dcd",
                  lambda: build_mobilenetv2(width=1.0, placement=("pw", "cls")), 224,
                  5_500_000, 150_000, None, 0.02, True),
        GoldenRow("resnet18/static",
                  lambda: build_resnet(depth=18), 224,
                  11_100_000, 100_000, 1_810_000_000, 0.02, False),
        GoldenRow("resnet18/dcd",
                  lambda: build_resnet(depth=18, dcd="channel_only_3x3"), 224,
                  14_000_000, 200_000, 1_830_000_000, 0.02, False),
        GoldenRow("resnet10/dcd",
                  lambda: build_resnet(depth=10, dcd="channel_only_3x3"), 224,
                  6_500_000, 150_000, None, 0.02, False),
    ]


@dataclass
class GoldenResult:
    row_id: str
    params: int
    params_window: tuple[int, int]
    params_ok: bool
    madds: int | None
    madds_window: tuple[int, int] | None
    madds_ok: bool

    @property
    def ok(self) -> bool:
        return self.params_ok and self.madds_ok

    def line(self) -> str:
        state = "ok" if self.ok else "FAIL"
        parts = [f"{self.row_id}: params={self.params} in [{self.params_window[0]}, {self.params_window[1]}]"]
        if self.madds is not None:
            parts.append(f"madds={self.madds} in [{self.madds_window[0]}, {self.madds_window[1]}]")
        return f"[{state}] " + "  ".join(parts)


def check_golden() -> list[GoldenResult]:
    from .counting import count_model

    results = []
    for row in golden_rows():
        graph = row.build()
        report = count_model(graph, row.resolution)
        if row.include_classifier:
            params, madds = report.total_params, report.total_madds
        else:
            params, madds = report.params_excluding_classifier(), report.madds_excluding_classifier()
        p_lo, p_hi = row.params_target - row.params_tol, row.params_target + row.params_tol
        params_ok = p_lo <= params <= p_hi
        if row.madds_target is None:
            madds_val, madds_window, madds_ok = None, None, True
        else:
            m_lo = round(row.madds_target * (1 - row.madds_rel_tol))
            m_hi = round(row.madds_target * (1 + row.madds_rel_tol))
            madds_val, madds_window, madds_ok = madds, (m_lo, m_hi), m_lo <= madds <= m_hi
        results.append(GoldenResult(row.row_id, params, (p_lo, p_hi), params_ok,
                                    madds_val, madds_window, madds_ok))
    return results


STATIC_INVARIANTS = (
    ("mobilenetv2_x1.0/static", lambda: build_mobilenetv2(width=1.0), 3_500_000, 50_000),
)
