"""End-to-end pipeline: pixels -> tiles -> features -> attention -> logits.

Bundles the extractor weights and the attention module with the tiling
and normalization settings they were trained under, so a single object
can be checkpointed, reloaded, and driven by the trainer, the evaluator,
and the CLI.
"""

from __future__ import annotations

import numpy as np

from gridattn import attention, extractor, tiler
from gridattn.autodiff import Tensor
from gridattn.extractor import ExtractorConfig
from gridattn.labels import NUM_CLASSES


class AttentionPipeline:
    def __init__(
        self,
        extractor_config: ExtractorConfig,
        extractor_params: dict,
        module: attention.AttentionModule,
        cell_size: int = 32,
        overlap: int = 0,
        white_threshold: float = tiler.DEFAULT_WHITE_THRESHOLD,
        tissue_fraction: float = tiler.DEFAULT_TISSUE_FRACTION,
        norm_mean=None,
        norm_std=None,
    ):
        self.extractor_config = extractor_config
        self.extractor_params = extractor_params
        self.module = module
        self.cell_size = cell_size
        self.overlap = overlap
        self.white_threshold = white_threshold
        self.tissue_fraction = tissue_fraction
        self.norm_mean = np.zeros(3) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.ones(3) if norm_std is None else np.asarray(norm_std, dtype=np.float64)

    @classmethod
    def create(
        cls,
        extractor_config: ExtractorConfig,
        num_heads: int = 4,
        head_spatial: int = 3,
        hidden: int = 16,
        dropout_p: float = 0.5,
        seed: int = 0,
        **kwargs,
    ) -> "AttentionPipeline":
        params = extractor.init_extractor(extractor_config, seed)
        module = attention.init_attention(
            feature_size=extractor_config.feature_size,
            num_heads=num_heads,
            spatial=head_spatial,
            hidden=hidden,
            dropout_p=dropout_p,
            seed=seed,
            num_classes=NUM_CLASSES,
        )
        return cls(extractor_config, params, module, **kwargs)

    def named_parameters(self) -> dict:
        params = dict(self.extractor_params)
        params.update(self.module.named_parameters())
        return params

    def trainable_parameters(self) -> dict:
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}

    def set_normalization(self, mean, std):
        self.norm_mean = np.asarray(mean, dtype=np.float64)
        self.norm_std = np.asarray(std, dtype=np.float64)

    def feature_grid(self, pixels: np.ndarray) -> extractor.FeatureGrid:
        img = tiler.SlideImage(pixels=pixels, label=0, group_id="")
        grid = tiler.tile(
            img,
            self.cell_size,
            overlap=self.overlap,
            white_threshold=self.white_threshold,
            tissue_fraction=self.tissue_fraction,
        )
        grid = tiler.normalize_cells(grid, self.norm_mean, self.norm_std)
        return extractor.extract(grid, self.extractor_params, self.extractor_config)

    def forward_pixels(self, pixels: np.ndarray, mode: str = "eval", rng=None):
        """Logits and attention maps for one image (already background-cropped)."""
        fg = self.feature_grid(pixels)
        logits, maps = attention.classify(fg, self.module, mode=mode, rng=rng)
        return logits, maps


def softmax_probs(logits: Tensor) -> np.ndarray:
    x = logits.data - logits.data.max()
    e = np.exp(x)
    return e / e.sum()


def predict_pixels(pipeline: AttentionPipeline, pixels: np.ndarray):
    """Predicted class, class probabilities, and attention maps (numpy)."""
    logits, maps = pipeline.forward_pixels(pixels, mode="eval")
    probs = softmax_probs(logits)
    return int(np.argmax(probs)), probs, [m.data.copy() for m in maps]
