"""Shared fixtures: scaled-down model configurations for fast tests."""

from mlcseg.config import GroupSpec, HeadSpec, ModelConfig, PdcSpec, default_config
from mlcseg.tensor import ConvSpec


def tiny_config() -> ModelConfig:
    """Five-group network shrunk to test scale; keeps the 1/16 geometry."""
    return ModelConfig(
        stem=ConvSpec(3, 4, kernel=7, stride=2, padding=3),
        groups=(
            GroupSpec(1, 2, 4, stride=1),
            GroupSpec(1, 2, 4, stride=2),
            GroupSpec(1, 2, 8, stride=2),
            GroupSpec(1, 2, 8, stride=2),
            GroupSpec(1, 2, 8, stride=1, internal_dilation=2),
        ),
        pdc=PdcSpec(branch_channels=2),
        head=HeadSpec(),
    )


def wide_config() -> ModelConfig:
    base = default_config()
    groups = tuple(GroupSpec(2, g.mid_channels // 2, g.out_channels // 2,
                             g.stride, g.internal_dilation) for g in base.groups)
    return ModelConfig(stem=ConvSpec(3, 16, kernel=7, stride=2, padding=3),
                       groups=groups, pdc=PdcSpec(branch_channels=32), head=HeadSpec())
