"""Builders for the residual classifier, the dual-pooling segmenter and the SegNet-style baseline.

Weights are drawn from N(0, 2/fan_in); biases and BN shifts start at zero,
BN scales at one, running statistics at (0, 1).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import BuilderError
from ..tensor import Tensor, resolve_dtype
from .graph import LayerSpec, ModelGraph, infer_shapes

CTNET = "cov_ctnet"
RASEG = "cov_raseg"
SEGNET = "segnet_baseline"
ARCHITECTURES = (CTNET, RASEG, SEGNET)


@dataclass
class CtNetConfig:
    input_hw: tuple[int, int] = (82, 82)
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 128)
    fc_widths: tuple[int, ...] = (128, 64)
    dropout: float = 0.5
    num_classes: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        d["arch"] = CTNET
        return d


@dataclass
class SegConfig:
    input_hw: tuple[int, int] = (304, 304)
    in_channels: int = 1
    widths: tuple[int, ...] = (32, 64, 128, 256)
    num_classes: int = 2
    # weight of the max branch in every pooling fusion; 0.5 is the plain mean
    max_branch_weight: float = 0.5
    arch: str = RASEG

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class _Builder:
    def __init__(self, config: dict, seed: int, precision):
        self.layers: list[LayerSpec] = []
        self.tensors: dict[str, Tensor] = {}
        self.config = config
        self.dtype = resolve_dtype(precision)
        self.rng = np.random.default_rng(seed)

    def _t(self, name: str, arr) -> None:
        self.tensors[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def add(self, kind: str, name: str, inputs, **attrs) -> str:
        if isinstance(inputs, str):
            inputs = (inputs,)
        self.layers.append(LayerSpec(kind, name, tuple(inputs), attrs))
        return name

    def conv(self, name, x, in_c, out_c, k, stride=1, padding=0) -> str:
        kh, kw = (k, k) if isinstance(k, int) else k
        std = np.sqrt(2.0 / (in_c * kh * kw))
        self._t(f"{name}.weight", self.rng.normal(0.0, std, (out_c, in_c, kh, kw)))
        self._t(f"{name}.bias", np.zeros(out_c))
        return self.add("conv", name, x, stride=stride, padding=padding)

    def bn(self, name, x, c) -> str:
        self._t(f"{name}.gamma", np.ones(c))
        self._t(f"{name}.beta", np.zeros(c))
        self._t(f"{name}.running_mean", np.zeros(c))
        self._t(f"{name}.running_var", np.ones(c))
        self.tensors[f"{name}.running_mean"].requires_grad = False
        self.tensors[f"{name}.running_var"].requires_grad = False
        return self.add("bn", name, x, eps=1e-5, momentum=0.1)

    def conv_bn_relu(self, prefix, x, in_c, out_c, k=3, stride=1) -> str:
        x = self.conv(f"{prefix}_conv", x, in_c, out_c, k, stride=stride, padding=k // 2)
        x = self.bn(f"{prefix}_bn", x, out_c)
        return self.add("relu", f"{prefix}_relu", x)

    def fc(self, name, x, in_f, out_f) -> str:
        self._t(f"{name}.weight", self.rng.normal(0.0, np.sqrt(2.0 / in_f), (out_f, in_f)))
        self._t(f"{name}.bias", np.zeros(out_f))
        return self.add("fc", name, x)

    def finish(self, metadata=None) -> ModelGraph:
        model = ModelGraph(self.layers, self.tensors, self.config, self.dtype, metadata or {})
        infer_shapes(model)
        return model


def _check_widths(widths, stages=4) -> None:
    if len(widths) != stages or any(int(w) < 1 for w in widths):
        raise BuilderError(f"expected {stages} positive channel widths, got {list(widths)}")


def build_cov_ctnet(cfg: CtNetConfig | None = None, seed: int = 0, precision="f32") -> ModelGraph:
    """Residual classifier.

    Input is zero-padded (centred) up to a multiple of 32.  Stem conv-BN-ReLU,
    then four stages of ``[conv-BN-ReLU x2] + skip`` each closed by a stride-2
    conv-BN-ReLU, a 2x2 max-pool, and an FC-ReLU-dropout x2 / FC / softmax head.
    """
    cfg = cfg or CtNetConfig()
    _check_widths(cfg.widths)
    if not 0.0 <= cfg.dropout < 1.0:
        raise BuilderError(f"dropout rate must lie in [0, 1), got {cfg.dropout}")
    h, w = (int(v) for v in cfg.input_hw)
    if h < 1 or w < 1:
        raise BuilderError(f"invalid input size {h}x{w}")
    b = _Builder(cfg.to_dict(), seed, precision)
    x = b.add("input", "input", ())
    # four stride-2 convs and the final 2x2 pool need a multiple of 32
    ph, pw = (-h) % 32, (-w) % 32
    if ph or pw:
        x = b.add("pad", "pad", x, pads=(ph // 2, ph - ph // 2, pw // 2, pw - pw // 2))
    widths = [int(v) for v in cfg.widths]
    c = widths[0]
    x = b.conv_bn_relu("stem", x, cfg.in_channels, c)
    for i, wd in enumerate(widths):
        s = f"stage{i}"
        body = b.conv_bn_relu(f"{s}_a", x, c, wd)
        body = b.conv_bn_relu(f"{s}_b", body, wd, wd)
        skip = x if c == wd else b.conv(f"{s}_proj", x, c, wd, 1)
        x = b.add("add", f"{s}_add", (body, skip))
        x = b.conv_bn_relu(f"{s}_down", x, wd, wd, stride=2)
        c = wd
    x = b.add("maxpool", "pool", x)
    x = b.add("flatten", "flatten", x)
    feat = c * ((h + ph) // 32) * ((w + pw) // 32)
    for j, fw in enumerate(cfg.fc_widths, start=1):
        x = b.fc(f"fc{j}", x, feat, fw)
        x = b.add("relu", f"fc{j}_relu", x)
        feature_layer = x
        x = b.add("dropout", f"fc{j}_dropout", x, rate=cfg.dropout)
        feat = fw
    x = b.fc("classifier", x, feat, cfg.num_classes)
    b.add("softmax", "softmax", x)
    return b.finish({"feature_layer": feature_layer if cfg.fc_widths else "flatten"})


def _build_encoder_decoder(cfg: SegConfig, seed: int, precision, dual: bool) -> ModelGraph:
    _check_widths(cfg.widths)
    h, w = (int(v) for v in cfg.input_hw)
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise BuilderError(f"segmentation input {h}x{w} must be positive multiples of 16")
    if not 0.0 <= cfg.max_branch_weight <= 1.0:
        raise BuilderError("max_branch_weight must lie in [0, 1]")
    b = _Builder(cfg.to_dict(), seed, precision)
    widths = [int(v) for v in cfg.widths]
    alpha = float(cfg.max_branch_weight)

    x = b.add("input", "input", ())
    c = cfg.in_channels
    for i, wd in enumerate(widths):
        x = b.conv_bn_relu(f"enc{i}_a", x, c, wd)
        x = b.conv_bn_relu(f"enc{i}_b", x, wd, wd)
        mx = b.add("maxpool", f"enc{i}_maxpool", x)
        if dual:
            av = b.add("avgpool", f"enc{i}_avgpool", x)
            x = b.add("fuse", f"enc{i}_fuse", (mx, av), alpha=alpha)
        else:
            x = mx
        c = wd
    for i in reversed(range(len(widths))):
        wd = widths[i]
        up = b.add("maxunpool", f"dec{i}_maxunpool", x, link=f"enc{i}_maxpool")
        if dual:
            av = b.add("avgunpool", f"dec{i}_avgunpool", x)
            x = b.add("fuse", f"dec{i}_fuse", (up, av), alpha=alpha)
        else:
            x = up
        out_c = widths[i - 1] if i > 0 else widths[0]
        x = b.conv_bn_relu(f"dec{i}_a", x, wd, wd)
        x = b.conv_bn_relu(f"dec{i}_b", x, wd, out_c)
    # 2x2 'same' convolution: one extra row/column at the bottom/right
    x = b.add("pad", "head_pad", x, pads=(0, 1, 0, 1))
    x = b.conv("head_conv", x, widths[0], cfg.num_classes, 2)
    b.add("softmax", "softmax", x)
    return b.finish()


def build_cov_raseg(cfg: SegConfig | None = None, seed: int = 0, precision="f32") -> ModelGraph:
    """Encoder-decoder segmenter fusing max and average pooling in every stage.

    Downsampling is the mean of max-pool (indices kept) and avg-pool;
    upsampling is the mean of index-driven max-unpool and nearest-neighbour
    avg-unpool.  Head: 2x2 conv to ``num_classes`` channels plus per-pixel softmax.
    """
    cfg = cfg or SegConfig()
    if cfg.arch != RASEG:
        cfg = SegConfig(**{**asdict(cfg), "arch": RASEG})
    return _build_encoder_decoder(cfg, seed, precision, dual=True)


def build_segnet_baseline(cfg: SegConfig | None = None, seed: int = 0, precision="f32") -> ModelGraph:
    """Same topology as :func:`build_cov_raseg` with max-pool / max-unpool only."""
    cfg = cfg or SegConfig()
    cfg = SegConfig(**{**asdict(cfg), "arch": SEGNET, "max_branch_weight": 1.0})
    return _build_encoder_decoder(cfg, seed, precision, dual=False)


def build_model(config: dict, seed: int = 0, precision="f32") -> ModelGraph:
    """Rebuild any architecture from its ``to_dict()`` form."""
    cfg = dict(config)
    arch = cfg.pop("arch", None)
    if "input_hw" in cfg:
        cfg["input_hw"] = tuple(cfg["input_hw"])
    if "widths" in cfg:
        cfg["widths"] = tuple(cfg["widths"])
    try:
        if arch == CTNET:
            if "fc_widths" in cfg:
                cfg["fc_widths"] = tuple(cfg["fc_widths"])
            return build_cov_ctnet(CtNetConfig(**cfg), seed, precision)
        if arch == RASEG:
            return build_cov_raseg(SegConfig(**cfg, arch=RASEG), seed, precision)
        if arch == SEGNET:
            return build_segnet_baseline(SegConfig(**cfg, arch=SEGNET), seed, precision)
    except TypeError as exc:
        raise BuilderError(f"invalid {arch} config: {exc}") from None
    raise BuilderError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
