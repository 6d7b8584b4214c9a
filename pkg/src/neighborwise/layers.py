"""Layer descriptions, shape arithmetic and the single-layer forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import ParamStore

KINDS = (
    "dense",
    "conv2d",
    "tconv2d",
    "batchnorm",
    "leaky_relu",
    "relu",
    "tanh",
    "dropout",
    "softmax",
    "maxpool",
    "avgpool",
    "residual",
    "flatten",
)

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    out_pad: int = 0
    p: float = 0.0
    relu_out: bool = True  # residual blocks only
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def dense(name, n_in, n_out):
    return LayerSpec("dense", name, n_in, n_out)


def conv(name, c_in, c_out, k=3, stride=1, pad=None):
    return LayerSpec("conv2d", name, c_in, c_out, k, stride, k // 2 if pad is None else pad)


def tconv(name, c_in, c_out, k=3, stride=2, pad=1, out_pad=1):
    return LayerSpec("tconv2d", name, c_in, c_out, k, stride, pad, out_pad)


def bnorm(name, ch):
    return LayerSpec("batchnorm", name, ch, ch)


def resblock(name, ch, relu_out=True):
    return LayerSpec("residual", name, ch, ch, 3, 1, 1, relu_out=relu_out)


def act(kind):
    return LayerSpec(kind)


def dropout(p):
    return LayerSpec("dropout", p=p)


def output_shape(spec: LayerSpec, in_shape) -> tuple:
    """Per-sample output shape for per-sample input shape ``in_shape``."""
    s = tuple(in_shape)
    k = spec.kind
    if k == "dense":
        _need(spec, s, len(s) == 1 and s[0] == spec.in_ch)
        return (spec.out_ch,)
    if k == "conv2d":
        _need(spec, s, len(s) == 3 and s[0] == spec.in_ch)
        h = T.conv_out_size(s[1], spec.kernel, spec.stride, spec.pad)
        w = T.conv_out_size(s[2], spec.kernel, spec.stride, spec.pad)
        _need(spec, s, h > 0 and w > 0)
        return (spec.out_ch, h, w)
    if k == "tconv2d":
        _need(spec, s, len(s) == 3 and s[0] == spec.in_ch)
        return (
            spec.out_ch,
            T.tconv_out_size(s[1], spec.kernel, spec.stride, spec.pad, spec.out_pad),
            T.tconv_out_size(s[2], spec.kernel, spec.stride, spec.pad, spec.out_pad),
        )
    if k == "batchnorm":
        _need(spec, s, len(s) in (1, 3) and s[0] == spec.in_ch)
        return s
    if k in ("maxpool", "avgpool"):
        _need(spec, s, len(s) == 3 and s[1] >= 2 and s[2] >= 2)
        return (s[0], s[1] // 2, s[2] // 2)
    if k == "residual":
        _need(spec, s, len(s) == 3 and s[0] == spec.in_ch)
        return s
    if k == "softmax":
        _need(spec, s, len(s) == 1)
        return s
    if k == "flatten":
        return (int(np.prod(s)),)
    return s


def _need(spec, shape, ok):
    if not ok:
        raise ShapeError(
            f"layer {spec.name or spec.kind!r} ({spec.kind}) expects "
            f"{_expected(spec)}, got input shape {list(shape)}"
        )


def _expected(spec):
    if spec.kind == "dense":
        return f"[{spec.in_ch}]"
    if spec.kind in ("conv2d", "tconv2d", "residual"):
        return f"[{spec.in_ch}, H, W]"
    if spec.kind == "batchnorm":
        return f"[{spec.in_ch}] or [{spec.in_ch}, H, W]"
    if spec.kind == "softmax":
        return "[K]"
    return "[C, H>=2, W>=2]"


def init_layer(spec: LayerSpec, store: ParamStore, rng: np.random.Generator):
    """Create the parameters a layer needs (He-style fan-in scaling)."""
    n = spec.name
    if spec.kind == "dense":
        store.add(f"{n}.weight", rng.normal(0.0, np.sqrt(2.0 / spec.in_ch), (spec.in_ch, spec.out_ch)))
        store.add(f"{n}.bias", np.zeros(spec.out_ch))
    elif spec.kind == "conv2d":
        fan = spec.in_ch * spec.kernel**2
        shape = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        store.add(f"{n}.weight", rng.normal(0.0, np.sqrt(2.0 / fan), shape))
        store.add(f"{n}.bias", np.zeros(spec.out_ch))
    elif spec.kind == "tconv2d":
        # each output pixel sees about in_ch * k^2 / stride^2 taps
        fan = max(1, spec.in_ch * spec.kernel**2 // spec.stride**2)
        shape = (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel)
        store.add(f"{n}.weight", rng.normal(0.0, np.sqrt(2.0 / fan), shape))
        store.add(f"{n}.bias", np.zeros(spec.out_ch))
    elif spec.kind == "batchnorm":
        store.add(f"{n}.gamma", np.ones(spec.in_ch))
        store.add(f"{n}.beta", np.zeros(spec.in_ch))
        store.add_running(n, spec.in_ch)
    elif spec.kind == "residual":
        fan = spec.in_ch * 9
        shape = (spec.in_ch, spec.in_ch, 3, 3)
        store.add(f"{n}.conv1.weight", rng.normal(0.0, np.sqrt(2.0 / fan), shape))
        store.add(f"{n}.conv1.bias", np.zeros(spec.in_ch))
        # small second conv keeps the block near identity at init
        store.add(f"{n}.conv2.weight", rng.normal(0.0, 0.1 * np.sqrt(2.0 / fan), shape))
        store.add(f"{n}.conv2.bias", np.zeros(spec.in_ch))


def forward_layer(x: T.Tensor, spec: LayerSpec, params, mode: str = "eval", rng=None) -> T.Tensor:
    """Apply one layer to a batch ``x`` of shape [N, ...].

    ``mode`` is ``"train"`` (batch statistics, running-stat update, dropout),
    ``"eval"`` (running statistics, no dropout) or ``"batch"`` (batch
    statistics without touching the running ones, no dropout).
    """
    if mode not in ("train", "eval", "batch"):
        raise ValueError(f"mode must be 'train', 'eval' or 'batch', got {mode!r}")
    output_shape(spec, x.shape[1:])
    k, n = spec.kind, spec.name
    if k == "dense":
        return T.add(T.matmul(x, params[f"{n}.weight"]), params[f"{n}.bias"])
    if k == "conv2d":
        return T.conv2d(x, params[f"{n}.weight"], params[f"{n}.bias"], spec.stride, spec.pad)
    if k == "tconv2d":
        return T.conv_transpose2d(
            x, params[f"{n}.weight"], params[f"{n}.bias"], spec.stride, spec.pad, spec.out_pad
        )
    if k == "batchnorm":
        return T.batch_norm(
            x,
            params[f"{n}.gamma"],
            params[f"{n}.beta"],
            None if mode == "batch" else params.running[n],
            train=(mode != "eval"),
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )
    if k == "relu":
        return T.relu(x)
    if k == "leaky_relu":
        return T.leaky_relu(x, LEAKY_SLOPE)
    if k == "tanh":
        return T.tanh(x)
    if k == "softmax":
        return T.softmax(x, axis=-1)
    if k == "maxpool":
        return T.max_pool2d(x)
    if k == "avgpool":
        return T.avg_pool2d(x)
    if k == "flatten":
        return T.flatten(x)
    if k == "dropout":
        if mode != "train" or spec.p == 0.0:
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= spec.p) / (1.0 - spec.p)
        return T.where_mask(x, keep)
    if k == "residual":
        h = T.conv2d(x, params[f"{n}.conv1.weight"], params[f"{n}.conv1.bias"], 1, 1)
        h = T.relu(h)
        h = T.conv2d(h, params[f"{n}.conv2.weight"], params[f"{n}.conv2.bias"], 1, 1)
        out = T.add(x, h)
        return T.relu(out) if spec.relu_out else out
    raise AssertionError(k)


def forward_seq(x, specs, params, mode="eval", rng=None):
    for spec in specs:
        x = forward_layer(x, spec, params, mode, rng)
    return x


def seq_output_shape(specs, in_shape):
    s = tuple(in_shape)
    for spec in specs:
        s = output_shape(spec, s)
    return s


def init_seq(specs, store, rng):
    for spec in specs:
        init_layer(spec, store, rng)
