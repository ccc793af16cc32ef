"""Shared-weight per-cell CNN producing the grid feature map.

Every cell of a CellGrid runs through the same small conv stack (stride-2
stages with ReLU) followed by global average pooling, giving one
k-vector per cell. The vectors are laid out as a k x r x c tensor that
preserves the grid geometry, and the whole thing stays inside the
differentiation graph so the extractor trains end-to-end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gridattn import autodiff as ad
from gridattn.autodiff import Tensor
from gridattn.errors import ConfigError
from gridattn.tiler import CellGrid

DESK_STAGES = ((16, 3, 2), (32, 3, 2), (32, 3, 2))


@dataclass
class ExtractorConfig:
    """Conv stack layout: stages are (out_channels, kernel, stride)."""

    feature_size: int = 32
    stages: tuple = DESK_STAGES
    freeze_depth: int = 0
    in_channels: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("extractor needs at least one conv stage")
        if self.stages[-1][0] != self.feature_size:
            raise ConfigError(
                f"last stage emits {self.stages[-1][0]} channels but feature_size is "
                f"{self.feature_size}; global average pooling must yield exactly k features"
            )
        if not 0 <= self.freeze_depth < len(self.stages):
            raise ConfigError(
                f"freeze_depth {self.freeze_depth} must be < {len(self.stages)} stages"
            )


@dataclass
class FeatureGrid:
    """k x r x c per-cell features plus the tissue mask carried from tiling."""

    u: Tensor
    tissue_mask: np.ndarray = field(default=None)

    @property
    def grid_shape(self):
        return self.u.shape[1], self.u.shape[2]


def msra_normal(rng, shape, fan_in) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng, shape, fan_in, fan_out) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_extractor(config: ExtractorConfig, seed: int) -> dict:
    """Fresh extractor weights, deterministic per seed.

    Conv kernels draw from Normal(0, sqrt(2/fan_in)); biases start at
    zero. Stages below freeze_depth are created without gradients.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    params = {}
    cin = config.in_channels
    for i, (cout, kernel, _stride) in enumerate(config.stages):
        fan_in = cin * kernel * kernel
        trainable = i >= config.freeze_depth
        params[f"conv{i}_w"] = Tensor(
            msra_normal(rng, (cout, cin, kernel, kernel), fan_in), requires_grad=trainable
        )
        params[f"conv{i}_b"] = Tensor(np.zeros(cout), requires_grad=trainable)
        cin = cout
    return params


def extract(grid: CellGrid, params: dict, config: ExtractorConfig) -> FeatureGrid:
    """Apply the shared CNN to every cell, assembling the k x r x c map."""
    if not params:
        raise ValueError("extractor params are uninitialized")
    cells = grid.cells
    r, c, cs = cells.shape[0], cells.shape[1], cells.shape[2]
    batch = np.ascontiguousarray(
        cells.reshape(r * c, cs, cs, 3).transpose(0, 3, 1, 2)
    )
    x = Tensor(batch)
    for i, (cout, kernel, stride) in enumerate(config.stages):
        w = params[f"conv{i}_w"]
        b = params[f"conv{i}_b"]
        pad = kernel // 2
        x = ad.conv2d(x, w, stride=stride, pad=(pad, pad))
        x = ad.relu(x + b.reshape((cout, 1, 1)))
    feats = x.mean(axis=(2, 3))  # [r*c, k]
    u = feats.transpose((1, 0)).reshape((config.feature_size, r, c))
    mask = grid.tissue_mask.copy() if grid.tissue_mask is not None else None
    return FeatureGrid(u=u, tissue_mask=mask)
