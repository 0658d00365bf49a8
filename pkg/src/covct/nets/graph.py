"""Declarative layer graphs and their forward execution."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .. import ops
from ..errors import BuilderError, NumericalError, ParameterError, ShapeError
from ..tensor import Tensor, resolve_dtype

LAYER_KINDS = frozenset(
    {
        "input",
        "pad",
        "conv",
        "bn",
        "relu",
        "maxpool",
        "avgpool",
        "maxunpool",
        "avgunpool",
        "fuse",
        "add",
        "flatten",
        "fc",
        "dropout",
        "softmax",
    }
)

# layers whose tensors are state, not trained
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class LayerSpec:
    kind: str
    name: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ModelGraph:
    """Ordered layers plus a named tensor store.

    ``tensors`` holds trainable parameters and batch-norm running statistics
    in declaration order; ``parameters()`` filters out the latter.
    """

    layers: list[LayerSpec]
    tensors: dict[str, Tensor]
    config: dict
    dtype: np.dtype = np.dtype(np.float32)
    metadata: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.config["arch"]

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        h, w = self.config["input_hw"]
        return (self.config.get("in_channels", 1), h, w)

    @property
    def num_classes(self) -> int:
        return self.config.get("num_classes", 2)

    def is_buffer(self, name: str) -> bool:
        return name.endswith(_BUFFER_SUFFIXES)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.tensors.items() if not self.is_buffer(k)]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def conv_params(self, spec: LayerSpec) -> ops.ConvParams:
        a = spec.attrs
        return ops.ConvParams(
            self.tensors[f"{spec.name}.weight"],
            self.tensors[f"{spec.name}.bias"],
            stride=a.get("stride", 1),
            padding=a.get("padding", 0),
        )

    def bn_params(self, spec: LayerSpec) -> ops.BatchNormParams:
        n = spec.name
        return ops.BatchNormParams(
            self.tensors[f"{n}.gamma"],
            self.tensors[f"{n}.beta"],
            self.tensors[f"{n}.running_mean"],
            self.tensors[f"{n}.running_var"],
            epsilon=spec.attrs.get("eps", 1e-5),
            stat_momentum=spec.attrs.get("momentum", 0.1),
        )

    def astype(self, precision) -> "ModelGraph":
        """Cast every tensor in place; returns self."""
        dt = resolve_dtype(precision)
        for t in self.tensors.values():
            t.data = t.data.astype(dt)
        self.dtype = dt
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.tensors[k].data = arr.copy()


# -------------------------------------------------------------- validation


def infer_shapes(model: ModelGraph, batch: int = 1) -> dict[str, tuple[int, ...]]:
    """Static shape propagation; raises BuilderError on any inconsistency."""
    shapes: dict[str, tuple[int, ...]] = {}
    kinds: dict[str, str] = {}
    unpooled: dict[str, str] = {}
    for spec in model.layers:
        if spec.kind not in LAYER_KINDS:
            raise BuilderError(f"layer {spec.name!r}: unknown kind {spec.kind!r}")
        if spec.name in shapes:
            raise BuilderError(f"duplicate layer name {spec.name!r}")
        for ref in spec.inputs:
            if ref not in shapes:
                raise BuilderError(f"layer {spec.name!r} reads {ref!r}, which is not an earlier layer")
        ins = [shapes[r] for r in spec.inputs]
        a = spec.attrs
        k = spec.kind
        if k == "input":
            out = (batch,) + model.input_shape
        elif k == "pad":
            n, c, h, w = ins[0]
            t, b, l, r = a["pads"]
            out = (n, c, h + t + b, w + l + r)
        elif k == "conv":
            n, c, h, w = ins[0]
            wt = model.tensors[f"{spec.name}.weight"].shape
            if wt[1] != c:
                raise BuilderError(f"conv {spec.name!r}: weights expect {wt[1]} channels, input has {c}")
            sh, sw = ops._pair(a.get("stride", 1))
            ph, pw = ops._pair(a.get("padding", 0))
            out = (n, wt[0], ops.conv_output_size(h, wt[2], sh, ph), ops.conv_output_size(w, wt[3], sw, pw))
            if min(out) < 1:
                raise BuilderError(f"conv {spec.name!r}: empty output {out}")
        elif k == "bn":
            if model.tensors[f"{spec.name}.gamma"].shape != (ins[0][1],):
                raise BuilderError(f"bn {spec.name!r}: channel mismatch with input {ins[0]}")
            out = ins[0]
        elif k in ("relu", "dropout", "softmax"):
            out = ins[0]
        elif k in ("maxpool", "avgpool"):
            n, c, h, w = ins[0]
            if h % 2 or w % 2:
                raise BuilderError(f"{k} {spec.name!r}: input {h}x{w} not divisible by 2")
            out = (n, c, h // 2, w // 2)
        elif k == "maxunpool":
            link = a.get("link")
            if kinds.get(link) != "maxpool":
                raise BuilderError(f"maxunpool {spec.name!r} must link an earlier maxpool, got {link!r}")
            if link in unpooled:
                raise BuilderError(f"maxpool {link!r} is linked by both {unpooled[link]!r} and {spec.name!r}")
            unpooled[link] = spec.name
            if ins[0] != shapes[link]:
                raise BuilderError(f"maxunpool {spec.name!r}: input {ins[0]} != linked pool output {shapes[link]}")
            pool_in = model.layer(link).inputs[0]
            out = shapes[pool_in]
        elif k == "avgunpool":
            n, c, h, w = ins[0]
            out = (n, c, 2 * h, 2 * w)
        elif k in ("fuse", "add"):
            if ins[0] != ins[1]:
                raise BuilderError(f"{k} {spec.name!r}: input shapes {ins[0]} and {ins[1]} differ")
            out = ins[0]
        elif k == "flatten":
            out = (ins[0][0], int(np.prod(ins[0][1:])))
        elif k == "fc":
            wt = model.tensors[f"{spec.name}.weight"].shape
            if len(ins[0]) != 2 or ins[0][1] != wt[1]:
                raise BuilderError(f"fc {spec.name!r}: weights {wt} incompatible with input {ins[0]}")
            out = (ins[0][0], wt[0])
        shapes[spec.name] = out
        kinds[spec.name] = k
    return shapes


# ----------------------------------------------------------------- forward


def _dropout_seed(seed: int, layer_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), layer_index]).generate_state(1)[0])


def run_graph(model: ModelGraph, x, mode: str = "eval", seed: int = 0) -> dict[str, Tensor]:
    """Execute every layer; returns the value produced by each layer name."""
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != model.input_shape:
        raise ShapeError(f"{model.arch}: expected input (N,) + {model.input_shape}, got {arr.shape}")
    inp = Tensor(arr.astype(model.dtype, copy=False))

    values: dict[str, Tensor] = {}
    pools: dict[str, ops.IndexMap] = {}
    for idx, spec in enumerate(model.layers):
        k = spec.kind
        args = [values[r] for r in spec.inputs]
        a = spec.attrs
        if k == "input":
            out = inp
        elif k == "pad":
            out = ops.pad2d(args[0], a["pads"])
        elif k == "conv":
            out = ops.conv2d(args[0], model.conv_params(spec))
        elif k == "bn":
            out = ops.batch_norm(args[0], model.bn_params(spec), mode)
        elif k == "relu":
            out = ops.relu(args[0])
        elif k == "maxpool":
            out, pools[spec.name] = ops.max_pool2d(args[0])
        elif k == "avgpool":
            out = ops.avg_pool2d(args[0])
        elif k == "maxunpool":
            out = ops.max_unpool2d(args[0], pools[a["link"]])
        elif k == "avgunpool":
            out = ops.avg_unpool2d(args[0])
        elif k == "fuse":
            out = ops.fuse(args[0], args[1], a.get("alpha", 0.5))
        elif k == "add":
            out = ops.add(args[0], args[1])
        elif k == "flatten":
            out = ops.flatten(args[0])
        elif k == "fc":
            out = ops.fully_connected(
                args[0], model.tensors[f"{spec.name}.weight"], model.tensors[f"{spec.name}.bias"]
            )
        elif k == "dropout":
            out = ops.dropout(args[0], a["rate"], mode, _dropout_seed(seed, idx))
        elif k == "softmax":
            out = ops.softmax(args[0], axis=1)
        else:  # pragma: no cover - rejected by infer_shapes
            raise BuilderError(f"unknown layer kind {k!r}")
        if not np.isfinite(out.data).all():
            raise NumericalError(f"non-finite values produced by layer {spec.name!r} ({k})")
        values[spec.name] = out
    return values


def forward(model: ModelGraph, x, mode: str = "eval", seed: int = 0) -> Tensor:
    """Run ``model`` on a batch and return the final layer's output.

    Classification graphs return (N, classes) probabilities, segmentation
    graphs (N, classes, H, W).  Operations are recorded on whatever
    :class:`~covct.tensor.GradTape` is active; ``seed`` drives dropout masks.
    """
    values = run_graph(model, x, mode, seed)
    return values[model.layers[-1].name]
