"""
Core definitions for the QdaVPR package.

Including the backbone stand-ins, the Bag-of-Queries blocks, the query combiner and the
model wiring them into the global descriptor path.
"""

# annotations needed for classes with self referential type hints
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, overload

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from qdavpr.config import BackboneKind, ModelConfig
from qdavpr.error import ConfigError, DimensionError, InputShapeError

logger = logging.getLogger(__name__)

Mode = Literal["train", "infer"]

####################################################################################################
### Types
####################################################################################################


@dataclass
class LocalFeatureSet:
    """A batch of ``N = H * W`` local features of dimension ``d`` laid out on a grid."""

    data: Tensor  # B x N x d
    grid: tuple[int, int]

    def __post_init__(self) -> None:
        height, width = self.grid
        if self.data.dim() != 3 or self.data.shape[1] != height * width:
            raise InputShapeError(
                f"Local features of shape `{tuple(self.data.shape)}` do not fit the grid "
                f"`{self.grid}`!"
            )

    @property
    def dim(self) -> int:
        return int(self.data.shape[-1])

    def as_map(self) -> Tensor:
        """Reshape to ``B x d x H x W``."""
        return to_feature_map(self.data, self.grid)

    @classmethod
    def from_map(cls, feature_map: Tensor) -> LocalFeatureSet:
        batch, dim, height, width = feature_map.shape
        data = feature_map.reshape(batch, dim, height * width).transpose(1, 2)
        return cls(data=data, grid=(height, width))


@dataclass
class ModelOutput:
    """Everything the training losses consume from one forward pass."""

    descriptor: Tensor  # B x (N_c * d), unit rows
    combinations: Tensor  # B x N_c x d, unit rows per combination
    local_features: list[Tensor]  # per block B x N x d
    query_features: list[Tensor]  # per block B x M x d
    attention: list[Tensor]  # per block B x M x N
    grid: tuple[int, int]

    @property
    def stacked_queries(self) -> Tensor:
        """All ``L * M`` query features per image in block order."""
        return torch.cat(self.query_features, dim=1)

    def feature_maps(self) -> list[Tensor]:
        return [to_feature_map(x, self.grid) for x in self.local_features]


def to_feature_map(data: Tensor, grid: tuple[int, int]) -> Tensor:
    batch, _, dim = data.shape
    return data.transpose(1, 2).reshape(batch, dim, *grid)


####################################################################################################
### Backbones
####################################################################################################


class ToyBackbone(nn.Module):
    """Stride ``patch_size`` patch embedding followed by pre-norm transformer encoder layers."""

    def __init__(
        self, *, out_channels: int, patch_size: int, layers: int, heads: int, ffn_dim: int
    ) -> None:
        super().__init__()
        self.patch_size = patch_size
        self.patch_embed = nn.Conv2d(3, out_channels, kernel_size=patch_size, stride=patch_size)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                out_channels,
                heads,
                ffn_dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(layers)
        )

    def forward(self, images: Tensor) -> Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputShapeError(
                f"Expected a B x 3 x H x W image batch, got `{tuple(images.shape)}`!"
            )
        height, width = images.shape[-2:]
        if height != width:
            raise InputShapeError(f"Expected square images, got `{height}x{width}`!")
        if height % self.patch_size != 0:
            raise InputShapeError(
                f"Image side `{height}` is not a multiple of the patch size `{self.patch_size}`!"
            )

        patches = LocalFeatureSet.from_map(self.patch_embed(images))
        tokens = patches.data
        for layer in self.layers:
            tokens = layer(tokens)
        return to_feature_map(tokens, patches.grid)


class ExternalFeatureBackbone(nn.Module):
    """Pass-through for precomputed ``B x N x c`` features from a frozen foundation model."""

    def __init__(self, *, channels: int) -> None:
        super().__init__()
        self.channels = channels

    def forward(self, features: Tensor) -> Tensor:
        if features.dim() != 3:
            raise InputShapeError(
                f"Expected a B x N x c feature batch, got `{tuple(features.shape)}`!"
            )
        if features.shape[-1] != self.channels:
            raise DimensionError(
                f"Feature channels `{features.shape[-1]}` differ from the configured "
                f"backbone dim `{self.channels}`!"
            )
        side = math.isqrt(features.shape[1])
        if side * side != features.shape[1]:
            raise InputShapeError(f"`{features.shape[1]}` features do not form a square grid!")
        return to_feature_map(features, (side, side))


class ChannelReducer(nn.Conv2d):
    """3x3 same-padding convolution fusing the backbone channels into ``d`` channels."""

    def __init__(self, *, in_channels: int, out_channels: int, identity: bool) -> None:
        super().__init__(in_channels, out_channels, kernel_size=3, padding=1)
        if identity:
            if in_channels != out_channels:
                raise ConfigError("An identity reduction requires equal channel counts!")
            with torch.no_grad():
                self.weight.zero_()
                self.weight[:, :, 1, 1].copy_(torch.eye(out_channels))
                assert self.bias is not None
                self.bias.zero_()


####################################################################################################
### Aggregation
####################################################################################################


class BoQBlock(nn.Module):
    """
    One Bag-of-Queries block.

    The local features are refined by a transformer encoder unit, the learnable queries
    exchange information through self-attention and then aggregate the refined features
    through cross-attention.
    """

    def __init__(self, *, dim: int, queries: int, heads: int, ffn_dim: int) -> None:
        super().__init__()
        self.encoder = nn.TransformerEncoderLayer(
            dim,
            heads,
            ffn_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.queries = nn.Parameter(torch.randn(queries, dim) / math.sqrt(dim))
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, x_prev: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """
        Run the block on ``B x N x d`` local features.

        Returns
        -------
        tuple[Tensor, Tensor, Tensor]
            The refined features ``X_next`` (``B x N x d``), the query features ``O``
            (``B x M x d``) and the head averaged cross-attention weights (``B x M x N``).
        """
        if x_prev.shape[-1] != self.queries.shape[-1]:
            raise DimensionError(
                f"Local feature dim `{x_prev.shape[-1]}` differs from the query dim "
                f"`{self.queries.shape[-1]}`!"
            )
        x_next = self.encoder(x_prev)

        queries = self.queries.unsqueeze(0).expand(x_next.shape[0], -1, -1)
        queries = self.self_attn(queries, queries, queries, need_weights=False)[0] + queries
        out, attn = self.cross_attn(
            queries, x_next, x_next, need_weights=True, average_attn_weights=True
        )
        return x_next, out, attn


def combine_and_normalize(queries: Tensor, weight: Tensor) -> tuple[Tensor, Tensor]:
    """
    Mix the stacked query features into ``N_c`` combinations.

    Parameters
    ----------
    queries : Tensor
        Stacked query features of shape ``B x (L * M) x d`` in block order.
    weight : Tensor
        Mixing matrix of shape ``N_c x (L * M)``, shared across channels.

    Returns
    -------
    tuple[Tensor, Tensor]
        The unit norm global descriptor (``B x (N_c * d)``) and the row normalized
        combinations (``B x N_c x d``), both computed from the same mixture.
    """
    if weight.shape[0] > weight.shape[1]:
        raise ConfigError(
            f"`{weight.shape[0]}` combinations exceed the `{weight.shape[1]}` query features!"
        )
    if weight.shape[1] != queries.shape[1]:
        raise DimensionError(
            f"Mixing matrix expects `{weight.shape[1]}` query features, got `{queries.shape[1]}`!"
        )
    mixed = torch.einsum("cj,bjd->bcd", weight, queries)
    descriptor = F.normalize(mixed.flatten(1), p=2, dim=1)
    combinations = F.normalize(mixed, p=2, dim=-1)
    return descriptor, combinations


class QueryCombiner(nn.Module):
    def __init__(self, *, total_queries: int, combinations: int) -> None:
        super().__init__()
        if combinations > total_queries:
            raise ConfigError(
                f"`{combinations}` combinations exceed the `{total_queries}` query features!"
            )
        bound = 1.0 / math.sqrt(total_queries)
        self.weight = nn.Parameter(torch.empty(combinations, total_queries).uniform_(-bound, bound))

    def forward(self, queries: Tensor) -> tuple[Tensor, Tensor]:
        return combine_and_normalize(queries, self.weight)


####################################################################################################
### Model
####################################################################################################


class QdaVPRModel(nn.Module):
    """
    The base descriptor path: backbone, channel reduction, ``L`` BoQ blocks and combiner.

    The adversarial heads live outside of this module, so the inference descriptor does
    not depend on them.
    """

    config: ModelConfig

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config

        # identical seed and config give bit identical initial weights
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)

            self.backbone: ToyBackbone | ExternalFeatureBackbone
            if config.backbone_kind is BackboneKind.TOY:
                self.backbone = ToyBackbone(
                    out_channels=config.in_channels,
                    patch_size=config.patch_size,
                    layers=config.backbone_layers,
                    heads=_heads_for(config.in_channels, config.encoder_heads),
                    ffn_dim=4 * config.in_channels,
                )
            else:
                self.backbone = ExternalFeatureBackbone(channels=config.in_channels)

            self.reducer = ChannelReducer(
                in_channels=config.in_channels,
                out_channels=config.dim,
                identity=config.backbone_kind is BackboneKind.TOY
                and config.in_channels == config.dim,
            )
            self.blocks = nn.ModuleList(
                BoQBlock(
                    dim=config.dim,
                    queries=config.queries,
                    heads=config.encoder_heads,
                    ffn_dim=config.ffn_dim,
                )
                for _ in range(config.blocks)
            )
            self.combiner = QueryCombiner(
                total_queries=config.total_queries, combinations=config.combinations
            )

        logger.debug(
            "Built model with %d blocks x %d queries, d=%d, descriptor dim %d",
            config.blocks,
            config.queries,
            config.dim,
            config.descriptor_dim,
        )

    def extract_local_features(self, inputs: Tensor) -> LocalFeatureSet:
        """Backbone features reduced to ``d`` channels, the ``X^0`` of the first block."""
        return LocalFeatureSet.from_map(self.reducer(self.backbone(inputs)))

    @overload
    def forward(self, inputs: Tensor, mode: Literal["infer"] = ...) -> Tensor:
        ...

    @overload
    def forward(self, inputs: Tensor, mode: Literal["train"]) -> ModelOutput:
        ...

    def forward(self, inputs: Tensor, mode: Mode = "infer") -> Tensor | ModelOutput:
        if mode not in ("train", "infer"):
            raise ValueError(f"Unknown forward mode `{mode}`!")

        features = self.extract_local_features(inputs)
        x = features.data
        local_features: list[Tensor] = []
        query_features: list[Tensor] = []
        attention: list[Tensor] = []
        for block in self.blocks:
            x, out, attn = block(x)
            local_features.append(x)
            query_features.append(out)
            attention.append(attn)

        descriptor, combinations = self.combiner(torch.cat(query_features, dim=1))
        if mode == "infer":
            return descriptor

        return ModelOutput(
            descriptor=descriptor,
            combinations=combinations,
            local_features=local_features,
            query_features=query_features,
            attention=attention,
            grid=features.grid,
        )

    @torch.no_grad()
    def attention_maps(self, inputs: Tensor) -> list[Tensor]:
        """Head averaged cross-attention per block, reshaped to ``B x M x H x W``."""
        output = self(inputs, mode="train")
        return [attn.reshape(*attn.shape[:2], *output.grid) for attn in output.attention]

    def freeze_backbone(self) -> None:
        for param in self.backbone.parameters():
            param.requires_grad_(False)


def _heads_for(channels: int, preferred: int) -> int:
    # the toy backbone may run at a channel count the preferred head count does not divide
    heads = min(preferred, channels)
    while channels % heads:
        heads -= 1
    return heads
