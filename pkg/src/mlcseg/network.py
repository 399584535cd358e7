"""Network assembly: residual encoder, dilated-pyramid skips, upsampling head.

The layer graph is described once as a flat plan of named conv/norm layers.
The plan drives parameter initialization, analytic parameter counting,
receptive-field accounting, and the printable summary; the forward builders
reconstruct the same geometry on a tape, so parameter names line up across
all of them.

Layer naming: ``stem.conv``, ``group{g}.unit{u}.{bn1,conv1,bn2,conv2,bn3,
conv3,shortcut}``, ``pdc{stage}.entry.{conv,bn}``, ``pdc{stage}.branch{j}.
{conv,bn}``, ``head.conv``. Parameter names append ``.weight``/``.bias`` or
``.gamma``/``.beta``/``.running_mean``/``.running_var``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .config import INPUT_DIVISOR, TARGET_REDUCTION, GroupSpec, ModelConfig, PdcSpec
from .tensor import ConvSpec


@dataclass(frozen=True)
class PlanLayer:
    """One parameterized layer: a convolution or a channel normalization."""

    name: str
    kind: str
    spec: ConvSpec | None = None
    channels: int | None = None

    def param_count(self) -> int:
        if self.kind == "conv":
            n = int(np.prod(self.spec.weight_shape))
            return n + (self.spec.out_channels if self.spec.has_bias else 0)
        return 2 * self.channels

    def param_names(self) -> tuple:
        """Trainable parameter names; running statistics are separate state."""
        if self.kind == "conv":
            names = (self.name + ".weight",)
            if self.spec.has_bias:
                names += (self.name + ".bias",)
            return names
        return (self.name + ".gamma", self.name + ".beta")


def _conv(name: str, spec: ConvSpec) -> PlanLayer:
    return PlanLayer(name, "conv", spec=spec)


def _bn(name: str, channels: int) -> PlanLayer:
    return PlanLayer(name, "bn", channels=channels)


def unit_param_layers(prefix: str, in_channels: int, mid: int, out: int,
                      stride: int = 1, dilation: int = 1) -> list:
    """Layers of one pre-activation bottleneck unit, in forward order."""
    layers = [
        _bn(f"{prefix}.bn1", in_channels),
        _conv(f"{prefix}.conv1", ConvSpec(in_channels, mid, 1, stride)),
        _bn(f"{prefix}.bn2", mid),
        _conv(f"{prefix}.conv2", ConvSpec(mid, mid, 3, 1, padding=dilation, dilation=dilation)),
        _bn(f"{prefix}.bn3", mid),
        _conv(f"{prefix}.conv3", ConvSpec(mid, out, 1, 1)),
    ]
    if in_channels != out or stride != 1:
        layers.append(_conv(f"{prefix}.shortcut", ConvSpec(in_channels, out, 1, stride)))
    return layers


def group_param_layers(prefix: str, in_channels: int, group: GroupSpec) -> list:
    layers = []
    ch = in_channels
    for u in range(1, group.units + 1):
        stride = group.stride if u == 1 else 1
        layers += unit_param_layers(f"{prefix}.unit{u}", ch, group.mid_channels,
                                    group.out_channels, stride, group.internal_dilation)
        ch = group.out_channels
    return layers


def pdc_param_layers(prefix: str, in_channels: int, pdc: PdcSpec, entry_stride: int) -> list:
    bc = pdc.branch_channels
    layers = [
        _conv(f"{prefix}.entry.conv", ConvSpec(in_channels, bc, 3, entry_stride, padding=1)),
        _bn(f"{prefix}.entry.bn", bc),
    ]
    for j, rate in enumerate(pdc.rates, start=1):
        layers.append(_conv(f"{prefix}.branch{j}.conv",
                            ConvSpec(bc, bc, 3, 1, padding=rate, dilation=rate)))
        layers.append(_bn(f"{prefix}.branch{j}.bn", bc))
    return layers


def model_param_layers(config: ModelConfig) -> list:
    """Every parameterized layer of the full network, in forward order."""
    layers = [_conv("stem.conv", config.stem)]
    ch = config.stem.out_channels
    for gi, g in enumerate(config.groups, start=1):
        layers += group_param_layers(f"group{gi}", ch, g)
        ch = g.out_channels
    for stage, in_ch, entry in config.pdc_taps():
        layers += pdc_param_layers(f"pdc{stage}", in_ch, config.pdc, entry)
    fused = len(config.pdc.entry_strides) * len(config.pdc.rates) * config.pdc.branch_channels
    layers.append(_conv("head.conv", ConvSpec(fused, config.head.out_channels, 1, has_bias=True)))
    return layers


@dataclass(frozen=True)
class RfEntry:
    layer: PlanLayer
    rf: int
    jump: int


def layer_plan(config: ModelConfig) -> "OrderedDict[str, RfEntry]":
    """Flat plan with theoretical receptive field and stride product per layer.

    rf and jump describe the layer's output. The recurrence along a path is
    rf += (k-1)*dilation*jump, then jump *= stride. At merges (residual add,
    channel concat) the wider path wins.
    """
    plan: "OrderedDict[str, RfEntry]" = OrderedDict()

    def put(layer: PlanLayer, rf: int, jump: int):
        if layer.kind == "conv":
            rf = rf + (layer.spec.kernel[0] - 1) * layer.spec.dilation[0] * jump
            jump = jump * layer.spec.stride[0]
        plan[layer.name] = RfEntry(layer, rf, jump)
        return rf, jump

    rf, jump = put(_conv("stem.conv", config.stem), 1, 1)
    ch = config.stem.out_channels
    stage_state = {}
    for gi, g in enumerate(config.groups, start=1):
        for u in range(1, g.units + 1):
            stride = g.stride if u == 1 else 1
            layers = unit_param_layers(f"group{gi}.unit{u}", ch, g.mid_channels,
                                       g.out_channels, stride, g.internal_dilation)
            rf0, jump0 = rf, jump
            for lyr in layers:
                if lyr.name.endswith(".shortcut"):
                    put(lyr, rf0, jump0)
                else:
                    rf, jump = put(lyr, rf, jump)
            ch = g.out_channels
        stage_state[gi] = (rf, jump)
    branch_ends = []
    for stage, in_ch, entry in config.pdc_taps():
        srf, sjump = stage_state[stage]
        layers = pdc_param_layers(f"pdc{stage}", in_ch, config.pdc, entry)
        erf, ejump = put(layers[0], srf, sjump)
        erf, ejump = put(layers[1], erf, ejump)
        for conv_l, bn_l in zip(layers[2::2], layers[3::2]):
            brf, bjump = put(conv_l, erf, ejump)
            put(bn_l, brf, bjump)
            branch_ends.append((brf, bjump))
    head_rf = max(rf for rf, _ in branch_ends)
    fused = len(config.pdc.entry_strides) * len(config.pdc.rates) * config.pdc.branch_channels
    put(_conv("head.conv", ConvSpec(fused, config.head.out_channels, 1, has_bias=True)),
        head_rf, TARGET_REDUCTION)
    return plan


def encoder_conv_layer_count(config: ModelConfig) -> int:
    """Stem plus three convolutions per unit; projection shortcuts not counted."""
    return 1 + sum(g.units * 3 for g in config.groups)


def count_parameters(config: ModelConfig) -> dict:
    """Analytic per-layer trainable-parameter counts (4-byte-float sizing)."""
    per_layer = []
    total = 0
    for layer in model_param_layers(config):
        n = layer.param_count()
        per_layer.append({"name": layer.name, "params": n})
        total += n
    return {"per_layer": per_layer, "total": total, "model_size_bytes": total * 4}


def receptive_field(config: ModelConfig, layer_name: str) -> dict:
    plan = layer_plan(config)
    entry = plan.get(layer_name)
    if entry is None:
        raise ValueError(f"unknown layer '{layer_name}'")
    return {"rf": entry.rf, "jump": entry.jump, "resolution_fraction": 1.0 / entry.jump}


def is_trainable(param_name: str) -> bool:
    return not param_name.endswith((".running_mean", ".running_var"))


def init_layer_params(layers, rng, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """Fan-in-scaled normal conv weights; unit scales, zero shifts and biases.

    Draw order follows layer order, so a fixed rng seed pins every value.
    """
    rng = np.random.default_rng(rng)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for layer in layers:
        if layer.kind == "conv":
            fan_in = layer.spec.in_channels * layer.spec.kernel[0] * layer.spec.kernel[1]
            std = np.sqrt(2.0 / fan_in)
            params[layer.name + ".weight"] = rng.normal(0.0, std, layer.spec.weight_shape).astype(dtype)
            if layer.spec.has_bias:
                params[layer.name + ".bias"] = np.zeros(layer.spec.out_channels, dtype=dtype)
        else:
            c = layer.channels
            params[layer.name + ".gamma"] = np.ones(c, dtype=dtype)
            params[layer.name + ".beta"] = np.zeros(c, dtype=dtype)
            params[layer.name + ".running_mean"] = np.zeros(c, dtype=dtype)
            params[layer.name + ".running_var"] = np.ones(c, dtype=dtype)
    return params


def init_params(config: ModelConfig, rng, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    return init_layer_params(model_param_layers(config), rng, dtype)


def validate_params(config: ModelConfig, params) -> None:
    """Check a parameter map against the layer graph: names and shapes."""
    expected = {}
    for layer in model_param_layers(config):
        for name in layer.param_names():
            if layer.kind == "conv":
                expected[name] = layer.spec.weight_shape if name.endswith(".weight") \
                    else (layer.spec.out_channels,)
            else:
                expected[name] = (layer.channels,)
        if layer.kind == "bn":
            expected[layer.name + ".running_mean"] = (layer.channels,)
            expected[layer.name + ".running_var"] = (layer.channels,)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(
            f"parameters do not match the layer graph: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        got = tuple(np.asarray(params[name]).shape)
        if got != shape:
            raise ValueError(f"parameter '{name}' has shape {got}, layer graph expects {shape}")


class BoundParams:
    """Parameters bound to one tape: trainable leaves plus raw running stats."""

    def __init__(self, tape: Tape, params):
        self.arrays = params
        self._vars = {name: tape.leaf(name, arr) for name, arr in params.items()
                      if is_trainable(name)}

    def var(self, name: str) -> Var:
        v = self._vars.get(name)
        if v is None:
            raise KeyError(f"no trainable parameter '{name}'")
        return v

    def arr(self, name: str) -> np.ndarray:
        return self.arrays[name]


def _norm_relu(tape: Tape, x: Var, p: BoundParams, name: str, training: bool) -> Var:
    h = tape.batchnorm2d(x, p.var(name + ".gamma"), p.var(name + ".beta"),
                         p.arr(name + ".running_mean"), p.arr(name + ".running_var"),
                         training)
    return tape.relu(h)


def residual_unit(tape: Tape, x: Var, p: BoundParams, prefix: str, mid: int, out: int,
                  stride: int = 1, dilation: int = 1, training: bool = True) -> Var:
    """Pre-activation bottleneck: norm-relu, 1x1 (strided), 3x3, 1x1, plus shortcut.

    The projection shortcut, used whenever channels or resolution change,
    reads the pre-activated input; otherwise the shortcut is the raw input.
    """
    in_ch = x.shape[1]
    w1 = p.var(f"{prefix}.conv1.weight")
    if w1.data.shape[1] != in_ch:
        raise ValueError(f"{prefix} expects {w1.data.shape[1]} input channels, got {in_ch}")
    pre = _norm_relu(tape, x, p, f"{prefix}.bn1", training)
    if in_ch != out or stride != 1:
        short = tape.conv2d(pre, p.var(f"{prefix}.shortcut.weight"), None,
                            ConvSpec(in_ch, out, 1, stride))
    else:
        short = x
    h = tape.conv2d(pre, w1, None, ConvSpec(in_ch, mid, 1, stride))
    h = _norm_relu(tape, h, p, f"{prefix}.bn2", training)
    h = tape.conv2d(h, p.var(f"{prefix}.conv2.weight"), None,
                    ConvSpec(mid, mid, 3, 1, padding=dilation, dilation=dilation))
    h = _norm_relu(tape, h, p, f"{prefix}.bn3", training)
    h = tape.conv2d(h, p.var(f"{prefix}.conv3.weight"), None, ConvSpec(mid, out, 1, 1))
    return tape.add(h, short)


def residual_group(tape: Tape, x: Var, p: BoundParams, prefix: str, group: GroupSpec,
                   training: bool = True) -> Var:
    for u in range(1, group.units + 1):
        stride = group.stride if u == 1 else 1
        x = residual_unit(tape, x, p, f"{prefix}.unit{u}", group.mid_channels,
                          group.out_channels, stride, group.internal_dilation, training)
    return x


def pdc_module(tape: Tape, f: Var, p: BoundParams, prefix: str, pdc: PdcSpec,
               entry_stride: int, training: bool = True) -> Var:
    """Strided 3x3 entry, then parallel dilated 3x3 branches, concatenated."""
    h, w = f.shape[2:]
    if h % entry_stride or w % entry_stride:
        raise ValueError(f"{prefix}: extents {h}x{w} not divisible by entry stride {entry_stride}")
    bc = pdc.branch_channels
    e = tape.conv2d(f, p.var(f"{prefix}.entry.conv.weight"), None,
                    ConvSpec(f.shape[1], bc, 3, entry_stride, padding=1))
    e = _norm_relu(tape, e, p, f"{prefix}.entry.bn", training)
    outs = []
    for j, rate in enumerate(pdc.rates, start=1):
        b = tape.conv2d(e, p.var(f"{prefix}.branch{j}.conv.weight"), None,
                        ConvSpec(bc, bc, 3, 1, padding=rate, dilation=rate))
        outs.append(_norm_relu(tape, b, p, f"{prefix}.branch{j}.bn", training))
    return tape.concat_channels(outs)


def mlcnet_forward(tape: Tape, image, p: BoundParams, config: ModelConfig,
                   training: bool = False, dropout_rng=None) -> Var:
    """Image batch to probability map, same spatial size, values in (0, 1)."""
    x = image if isinstance(image, Var) else tape.const(image)
    if x.data.ndim != 4 or x.data.shape[1] != config.input_channels:
        raise ValueError(
            f"input must be N x {config.input_channels} x H x W, got {x.data.shape}")
    h, w = x.data.shape[2:]
    if h % INPUT_DIVISOR or w % INPUT_DIVISOR:
        raise ValueError(f"input extents must be divisible by {INPUT_DIVISOR}, got {h}x{w}")
    bias = p.var("stem.conv.bias") if config.stem.has_bias else None
    x = tape.conv2d(x, p.var("stem.conv.weight"), bias, config.stem)
    feats = {}
    for gi, g in enumerate(config.groups, start=1):
        x = residual_group(tape, x, p, f"group{gi}", g, training)
        feats[gi] = x
    pyramids = [
        pdc_module(tape, feats[stage], p, f"pdc{stage}", config.pdc, entry, training)
        for stage, _, entry in config.pdc_taps()
    ]
    fused = tape.concat_channels(pyramids)
    if training and config.head.dropout_rate > 0.0:
        if dropout_rng is None:
            raise ValueError("training-mode forward needs a dropout rng")
        fused = tape.dropout(fused, config.head.dropout_rate, dropout_rng, True)
    logits = tape.conv2d(fused, p.var("head.conv.weight"), p.var("head.conv.bias"),
                         ConvSpec(fused.shape[1], config.head.out_channels, 1, has_bias=True))
    up = tape.bilinear_upsample(logits, TARGET_REDUCTION)
    return tape.sigmoid(up)


def predict_map(params, image, config: ModelConfig) -> np.ndarray:
    """Inference forward pass without graph recording."""
    tape = Tape(recording=False)
    return mlcnet_forward(tape, image, BoundParams(tape, params), config, training=False).data


def describe_model(config: ModelConfig) -> str:
    """Printable summary: layer table, totals, resolutions, receptive fields."""
    plan = layer_plan(config)
    counts = count_parameters(config)
    lines = [f"{'layer':<28} {'params':>10} {'rf':>6}  resolution"]
    by_name = {row["name"]: row["params"] for row in counts["per_layer"]}
    for name, entry in plan.items():
        lines.append(f"{name:<28} {by_name[name]:>10} {entry.rf:>6}  1/{entry.jump}")
    total = counts["total"]
    mb = counts["model_size_bytes"] / 2**20
    lines.append("")
    lines.append(f"encoder conv layers: {encoder_conv_layer_count(config)}")
    lines.append(f"total parameters: {total}")
    lines.append(f"model size: {mb:.2f} MB (4-byte floats)")
    reductions = config.stage_reductions()
    lines.append("stage resolutions: " + "  ".join(
        f"f{i} 1/{r}" for i, r in enumerate(reductions, start=1)))
    lines.append("pdc outputs: " + "  ".join(
        f"pdc{stage} 1/{entry * reductions[stage - 1]}"
        for stage, _, entry in config.pdc_taps()))
    lines.append("head: dropout %.2f, 1x1 conv, %dx bilinear upsample, sigmoid"
                 % (config.head.dropout_rate, TARGET_REDUCTION))
    return "\n".join(lines)
