"""Residual networks built from Basic or Bottleneck blocks.

A network is described by a :class:`NetworkSpec` and its weights live in a
:class:`ParameterStore`. Forward passes are plain functions of the two, so
attacks and visualizations can differentiate through them w.r.t. the input
without touching any weight gradients.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError
from .tensor import Tensor

BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a residual classifier.

    ``widths[s]`` is the inner width of stage ``s``; bottleneck stages emit
    ``4 * widths[s]`` channels. The first block of every stage after the
    first downsamples by 2.
    """

    input_shape: Tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 4
    block: str = "basic"
    widths: Tuple[int, ...] = (16, 32, 64)
    blocks: Tuple[int, ...] = (2, 2, 2)
    stem_width: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "blocks", tuple(int(v) for v in self.blocks))
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"block must be 'basic' or 'bottleneck', got {self.block!r}")
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ConfigError("widths and blocks must be non-empty and of equal length")
        if min(self.widths) < 1 or min(self.blocks) < 1:
            raise ConfigError("widths and blocks per stage must be positive")
        if self.num_classes < 1 or len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError("num_classes and input_shape extents must be positive")
        if self.stem_width is not None and self.stem_width < 1:
            raise ConfigError("stem_width must be positive")

    @property
    def expansion(self) -> int:
        return BOTTLENECK_EXPANSION if self.block == "bottleneck" else 1

    @property
    def representation_width(self) -> int:
        return self.widths[-1] * self.expansion

    def to_dict(self) -> dict:
        d = asdict(self)
        d["representation_width"] = self.representation_width
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        k = d.pop("representation_width", None)
        spec = cls(**d)
        if k is not None and k != spec.representation_width:
            raise ConfigError(f"representation_width {k} inconsistent with spec ({spec.representation_width})")
        return spec


def micro_resnet(input_shape=(3, 32, 32), num_classes: int = 4) -> NetworkSpec:
    """Three basic-block stages of widths 16/32/64, two blocks each."""
    return NetworkSpec(input_shape=input_shape, num_classes=num_classes)


class ParameterStore:
    """Ordered name -> Tensor map for one network.

    Batchnorm running statistics are stored alongside the weights but are
    not trainable; :meth:`trainable` lists only what SGD updates.
    """

    def __init__(self, spec: NetworkSpec, tensors: "OrderedDict[str, Tensor]"):
        self.spec = spec
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @staticmethod
    def is_buffer(name: str) -> bool:
        return name.endswith(("running_mean", "running_var"))

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(k, v) for k, v in self.tensors.items() if not self.is_buffer(k)]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self, trainable_only: bool = True) -> int:
        return sum(v.size for k, v in self.tensors.items()
                   if not (trainable_only and self.is_buffer(k)))

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def frozen(self) -> "ParameterStore":
        """Same arrays, no gradient tracking: for input-gradient work."""
        return ParameterStore(self.spec, OrderedDict(
            (k, Tensor(v.data)) for k, v in self.tensors.items()))

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "ParameterStore":
        out = OrderedDict()
        for k, v in self.tensors.items():
            out[k] = Tensor(np.array(v.data, dtype=dtype), requires_grad=not self.is_buffer(k))
        return ParameterStore(self.spec, out)

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def equals(self, other: "ParameterStore") -> bool:
        if self.spec != other.spec or self.names() != other.names():
            return False
        return all(self[k].dtype == other[k].dtype and np.array_equal(self[k].data, other[k].data)
                   for k in self.names())


# -- architecture layout ------------------------------------------------------------
@dataclass
class _BlockLayout:
    prefix: str
    in_ch: int
    width: int
    out_ch: int
    stride: int

    @property
    def projected(self) -> bool:
        return self.stride != 1 or self.in_ch != self.out_ch


def _layout(spec: NetworkSpec) -> Tuple[int, List[_BlockLayout]]:
    stem = spec.stem_width or spec.widths[0]
    blocks, in_ch = [], stem
    for s, (w, nb) in enumerate(zip(spec.widths, spec.blocks)):
        for b in range(nb):
            stride = 2 if (s > 0 and b == 0) else 1
            out_ch = w * spec.expansion
            blocks.append(_BlockLayout(f"stage{s}.block{b}", in_ch, w, out_ch, stride))
            in_ch = out_ch
    return stem, blocks


def _conv_shapes(spec: NetworkSpec, blk: _BlockLayout):
    """(name, out, in, k, stride, pad) for each branch conv of a block."""
    p = blk.prefix
    if spec.block == "basic":
        return [(f"{p}.conv1", blk.width, blk.in_ch, 3, blk.stride, 1),
                (f"{p}.conv2", blk.width, blk.width, 3, 1, 1)]
    return [(f"{p}.conv1", blk.width, blk.in_ch, 1, 1, 0),
            (f"{p}.conv2", blk.width, blk.width, 3, blk.stride, 1),
            (f"{p}.conv3", blk.out_ch, blk.width, 1, 1, 0)]


def _bn_names(prefix: str) -> List[str]:
    return [f"{prefix}.{s}" for s in ("gamma", "beta", "running_mean", "running_var")]


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Initialise a parameter store for ``spec`` deterministically from ``seed``.

    Convolutions use He-uniform (bound sqrt(6 / fan_in)), the classifier uses
    uniform(+-1/sqrt(fan_in)); batchnorm starts at gamma=1, beta=0, running
    mean 0 and running variance 1.
    """
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()

    def conv(name, o, i, k):
        bound = np.sqrt(6.0 / (i * k * k))
        params[f"{name}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(o, i, k, k)).astype(dtype), requires_grad=True)

    def bn(name, c):
        params[f"{name}.gamma"] = Tensor(np.ones(c, dtype), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(c, dtype), requires_grad=True)
        params[f"{name}.running_mean"] = Tensor(np.zeros(c, dtype))
        params[f"{name}.running_var"] = Tensor(np.ones(c, dtype))

    in_c = spec.input_shape[0]
    stem, blocks = _layout(spec)
    conv("stem.conv", stem, in_c, 3)
    bn("stem.bn", stem)
    for blk in blocks:
        for idx, (name, o, i, k, _, _) in enumerate(_conv_shapes(spec, blk), start=1):
            conv(name, o, i, k)
            bn(f"{blk.prefix}.bn{idx}", o)
        if blk.projected:
            conv(f"{blk.prefix}.shortcut.conv", blk.out_ch, blk.in_ch, 1)
            bn(f"{blk.prefix}.shortcut.bn", blk.out_ch)
    k = spec.representation_width
    bound = 1.0 / np.sqrt(k)
    params["fc.weight"] = Tensor(
        rng.uniform(-bound, bound, size=(spec.num_classes, k)).astype(dtype), requires_grad=True)
    params["fc.bias"] = Tensor(
        rng.uniform(-bound, bound, size=spec.num_classes).astype(dtype), requires_grad=True)
    return ParameterStore(spec, params)


def expected_names(spec: NetworkSpec) -> List[str]:
    return build(spec, 0).names()


# -- forward ------------------------------------------------------------------------
def _bn(params: ParameterStore, prefix: str, x: Tensor, mode: str) -> Tensor:
    g, b, rm, rv = (params[n] for n in _bn_names(prefix))
    return T.batchnorm2d(x, g, b, rm, rv, mode=mode)


def _as_input(params: ParameterStore, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.dtype))
    if x.ndim != 4 or tuple(x.shape[1:]) != params.spec.input_shape:
        raise DimensionError(
            f"input shape {x.shape} does not match network input (N, {', '.join(map(str, params.spec.input_shape))})")
    return x


def _block(params: ParameterStore, spec: NetworkSpec, blk: _BlockLayout, x: Tensor, mode: str) -> Tensor:
    h = x
    convs = _conv_shapes(spec, blk)
    for idx, (name, _, _, _, stride, pad) in enumerate(convs, start=1):
        h = T.conv2d(h, params[f"{name}.weight"], stride=stride, padding=pad)
        h = _bn(params, f"{blk.prefix}.bn{idx}", h, mode)
        if idx < len(convs):
            h = T.relu(h)
    if blk.projected:
        skip = T.conv2d(x, params[f"{blk.prefix}.shortcut.conv.weight"], stride=blk.stride)
        skip = _bn(params, f"{blk.prefix}.shortcut.bn", skip, mode)
    else:
        skip = x
    return T.relu(h + skip)


def forward_representation(params: ParameterStore, x, mode: str = "eval") -> Tensor:
    """Penultimate activations R(x): globally pooled output of the last stage, shape (N, k)."""
    spec = params.spec
    x = _as_input(params, x)
    h = T.conv2d(x, params["stem.conv.weight"], padding=1)
    h = T.relu(_bn(params, "stem.bn", h, mode))
    _, blocks = _layout(spec)
    for blk in blocks:
        h = _block(params, spec, blk, h, mode)
    return T.global_avgpool2d(h)


def head(params: ParameterStore, rep: Tensor) -> Tensor:
    """Final linear layer mapping R(x) to logits."""
    return T.linear(rep, params["fc.weight"], params["fc.bias"])


def forward_logits(params: ParameterStore, x, mode: str = "eval") -> Tensor:
    """Logits F(x) of shape (N, C), before softmax."""
    return head(params, forward_representation(params, x, mode))


def predict_logits(params: ParameterStore, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a numpy batch without recording a tape."""
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward_logits(params, x[i: i + batch_size], "eval").data)
    if not out:
        return np.zeros((0, params.spec.num_classes), dtype=params.dtype)
    return np.concatenate(out)


def predict_representation(params: ParameterStore, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward_representation(params, x[i: i + batch_size], "eval").data)
    if not out:
        return np.zeros((0, params.spec.representation_width), dtype=params.dtype)
    return np.concatenate(out)


def block_layouts(spec: NetworkSpec) -> List[_BlockLayout]:
    return _layout(spec)[1]


def branch_final_bn(spec: NetworkSpec, blk: _BlockLayout) -> str:
    return f"{blk.prefix}.bn{len(_conv_shapes(spec, blk))}"
