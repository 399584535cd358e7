"""Model configuration: encoder groups, skip-pyramid geometry, head.

A :class:`ModelConfig` pins the whole layer graph. The JSON on-disk form
mirrors the dataclass fields key for key; unknown keys anywhere in the
document are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

from .tensor import ConvSpec

# Every skip pyramid output sits at 1/16 of the network input resolution,
# and the head upsamples by the same factor.
TARGET_REDUCTION = 16

# Inputs must divide by this for every stage to land on exact extents.
INPUT_DIVISOR = 32

GROUP_COUNT = 5
RATE_COUNT = 4


@dataclass(frozen=True)
class GroupSpec:
    """One residual group: `units` bottleneck units sharing a channel plan."""

    units: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    internal_dilation: int = 1

    def __post_init__(self):
        if self.units < 1:
            raise ValueError(f"group needs units >= 1, got {self.units}")
        if self.mid_channels < 1 or self.out_channels < 1:
            raise ValueError(
                f"group channels must be >= 1, got mid {self.mid_channels}, out {self.out_channels}")
        if self.stride < 1 or self.internal_dilation < 1:
            raise ValueError(
                f"group stride/dilation must be >= 1, got {self.stride}/{self.internal_dilation}")


@dataclass(frozen=True)
class PdcSpec:
    """Pyramid of parallel dilated 3x3 branches behind a strided entry conv."""

    branch_channels: int = 64
    rates: tuple = (1, 2, 4, 8)
    entry_strides: tuple = (4, 2, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        object.__setattr__(self, "entry_strides", tuple(int(s) for s in self.entry_strides))
        if self.branch_channels < 1:
            raise ValueError(f"branch_channels must be >= 1, got {self.branch_channels}")
        if len(self.rates) != RATE_COUNT:
            raise ValueError(f"exactly {RATE_COUNT} dilation rates required, got {len(self.rates)}")
        if len(self.entry_strides) != RATE_COUNT:
            raise ValueError(
                f"exactly {RATE_COUNT} entry strides required (one per tapped stage), "
                f"got {len(self.entry_strides)}")
        if min(self.rates) < 1 or min(self.entry_strides) < 1:
            raise ValueError(f"rates/entry strides must be >= 1, got {self.rates}/{self.entry_strides}")


@dataclass(frozen=True)
class HeadSpec:
    dropout_rate: float = 0.5
    out_channels: int = 1

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.out_channels < 1:
            raise ValueError(f"head out_channels must be >= 1, got {self.out_channels}")


@dataclass(frozen=True)
class ModelConfig:
    stem: ConvSpec
    groups: tuple
    pdc: PdcSpec
    head: HeadSpec
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.stem.in_channels != self.input_channels:
            raise ValueError(
                f"stem takes {self.stem.in_channels} channels but input_channels is {self.input_channels}")
        if self.stem.stride[0] != self.stem.stride[1]:
            raise ValueError(f"stem stride must be square, got {self.stem.stride}")
        if len(self.groups) != GROUP_COUNT:
            raise ValueError(f"exactly {GROUP_COUNT} groups required, got {len(self.groups)}")
        for g in self.groups:
            if not isinstance(g, GroupSpec):
                raise ValueError(f"groups must be GroupSpec instances, got {type(g).__name__}")
        # The last four stage outputs feed the skip pyramids; each entry
        # stride must bring its stage to exactly 1/TARGET_REDUCTION.
        reductions = self.stage_reductions()
        for i, entry in enumerate(self.pdc.entry_strides):
            stage = i + 2
            total = entry * reductions[stage - 1]
            if total != TARGET_REDUCTION:
                raise ValueError(
                    f"pdc entry stride {entry} at stage {stage} (already 1/{reductions[stage - 1]}) "
                    f"gives 1/{total}, required 1/{TARGET_REDUCTION}")

    def stage_reductions(self) -> tuple:
        """Cumulative downsampling factor after each residual group."""
        r = self.stem.stride[0]
        out = []
        for g in self.groups:
            r *= g.stride
            out.append(r)
        return tuple(out)

    def pdc_taps(self) -> tuple:
        """(stage index, in_channels, entry_stride) for each tapped stage output."""
        return tuple(
            (i + 2, self.groups[i + 1].out_channels, self.pdc.entry_strides[i])
            for i in range(len(self.pdc.entry_strides))
        )


def default_config() -> ModelConfig:
    return ModelConfig(
        stem=ConvSpec(3, 32, kernel=7, stride=2, padding=3),
        groups=(
            GroupSpec(units=3, mid_channels=16, out_channels=64, stride=1),
            GroupSpec(units=3, mid_channels=32, out_channels=128, stride=2),
            GroupSpec(units=3, mid_channels=64, out_channels=256, stride=2),
            GroupSpec(units=3, mid_channels=128, out_channels=512, stride=2),
            GroupSpec(units=3, mid_channels=128, out_channels=512, stride=1, internal_dilation=2),
        ),
        pdc=PdcSpec(),
        head=HeadSpec(),
        input_channels=3,
    )


def _int_or_pair(v, key: str):
    if isinstance(v, int):
        return v
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(e, int) for e in v):
        return tuple(v)
    raise ValueError(f"config key '{key}' must be an int or a pair of ints, got {v!r}")


def _take(d: dict, ctx: str, required, optional=()):
    if not isinstance(d, dict):
        raise ValueError(f"config section '{ctx}' must be an object, got {type(d).__name__}")
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        raise ValueError(f"unknown config key(s) in '{ctx}': {', '.join(sorted(unknown))}")
    missing = set(required) - set(d)
    if missing:
        raise ValueError(f"missing config key(s) in '{ctx}': {', '.join(sorted(missing))}")
    return d


def config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    for k in ("kernel", "stride", "padding", "dilation"):
        d["stem"][k] = list(d["stem"][k])
    d["groups"] = [asdict(g) for g in config.groups]
    d["pdc"]["rates"] = list(config.pdc.rates)
    d["pdc"]["entry_strides"] = list(config.pdc.entry_strides)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    _take(d, "<root>", ("stem", "groups", "pdc", "head"), ("input_channels",))
    sd = _take(dict(d["stem"]), "stem", ("in_channels", "out_channels"),
               ("kernel", "stride", "padding", "dilation", "has_bias"))
    stem = ConvSpec(
        in_channels=sd["in_channels"],
        out_channels=sd["out_channels"],
        kernel=_int_or_pair(sd.get("kernel", 7), "stem.kernel"),
        stride=_int_or_pair(sd.get("stride", 2), "stem.stride"),
        padding=_int_or_pair(sd.get("padding", 3), "stem.padding"),
        dilation=_int_or_pair(sd.get("dilation", 1), "stem.dilation"),
        has_bias=bool(sd.get("has_bias", False)),
    )
    if not isinstance(d["groups"], list):
        raise ValueError("config key 'groups' must be a list")
    groups = []
    for i, gd in enumerate(d["groups"]):
        gd = _take(dict(gd), f"groups[{i}]", ("units", "mid_channels", "out_channels"),
                   ("stride", "internal_dilation"))
        groups.append(GroupSpec(**gd))
    pd = _take(dict(d["pdc"]), "pdc", (), ("branch_channels", "rates", "entry_strides"))
    pdc = PdcSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in pd.items()})
    hd = _take(dict(d["head"]), "head", (), ("dropout_rate", "out_channels"))
    head = HeadSpec(**hd)
    return ModelConfig(stem=stem, groups=tuple(groups), pdc=pdc, head=head,
                       input_channels=int(d.get("input_channels", 3)))


def save_config(config: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2)
        fh.write("\n")


def load_config(path) -> ModelConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValueError(f"config {path} is not valid JSON: line {e.lineno}: {e.msg}") from e
    try:
        return config_from_dict(d)
    except (ValueError, TypeError) as e:
        raise ValueError(f"config {path}: {e}") from e
