"""
Dual-level adversarial domain alignment.

A gradient reversal layer, one domain discriminator shared by the query level and the image
level, and a small convolutional domain feature extractor per BoQ block.
"""

from __future__ import annotations

import logging
from typing import Any

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from qdavpr.config import DiscriminatorConfig, GRLConfig
from qdavpr.error import DimensionError, SpatialSizeError

logger = logging.getLogger(__name__)

N_DOMAINS = 6

####################################################################################################
### Gradient reversal
####################################################################################################


class GradientReversal(torch.autograd.Function):
    """Identity in the forward pass, scales the upstream gradient by ``coefficient`` backwards."""

    @staticmethod
    def forward(ctx: Any, x: Tensor, coefficient: float) -> Tensor:
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx: Any, grad_output: Tensor) -> tuple[Tensor, None]:
        return grad_output * ctx.coefficient, None


def grl(x: Tensor, coefficient: float = -1.0) -> Tensor:
    return GradientReversal.apply(x, coefficient)


####################################################################################################
### Heads
####################################################################################################


class DomainDiscriminator(nn.Module):
    """MLP with two ReLU hidden layers mapping a ``d`` vector to six domain logits."""

    def __init__(self, *, dim: int, hidden: int = 512) -> None:
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, N_DOMAINS),
        )

    def forward(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.dim:
            raise DimensionError(
                f"Discriminator expects `{self.dim}` channels, got `{features.shape[-1]}`!"
            )
        return self.net(features)


class DomainFeatureExtractor(nn.Module):
    """
    Per block extractor condensing a ``d x H x W`` map into one ``d`` vector.

    conv 3x3 -> ReLU -> 2x2 average pool -> conv 3x3 -> ReLU -> global average pool.
    The extracted vector itself is not gradient reversed.
    """

    def __init__(self, *, dim: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, kernel_size=3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, kernel_size=3, stride=1, padding=1)
        self.pool = nn.AvgPool2d(kernel_size=2, stride=2)
        for conv in (self.conv1, self.conv2):
            assert conv.bias is not None
            nn.init.zeros_(conv.bias)

    def forward(self, feature_map: Tensor) -> Tensor:
        height, width = feature_map.shape[-2:]
        if height < 2 or width < 2:
            raise SpatialSizeError(
                f"Domain feature extraction needs at least a 2x2 map, got `{height}x{width}`!"
            )
        hidden = F.relu(self.conv1(feature_map))
        hidden = self.pool(hidden)
        hidden = F.relu(self.conv2(hidden))
        return F.adaptive_avg_pool2d(hidden, 1).flatten(1)


class AdversarialHeads(nn.Module):
    """
    Train-only heads of the dual-level adversarial framework.

    They are serialized under their own checkpoint namespace and discarded at inference.
    """

    def __init__(
        self,
        *,
        dim: int,
        blocks: int,
        grl_config: GRLConfig | None = None,
        discriminator_config: DiscriminatorConfig | None = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.grl_config = grl_config or GRLConfig()
        discriminator_config = discriminator_config or DiscriminatorConfig()

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.discriminator = DomainDiscriminator(dim=dim, hidden=discriminator_config.hidden)
            self.extractors = nn.ModuleList(DomainFeatureExtractor(dim=dim) for _ in range(blocks))

    def query_adversarial_loss(self, queries: Tensor, domain_labels: Tensor) -> Tensor:
        """
        Cross-entropy of the discriminator over every query feature of augmented images.

        Parameters
        ----------
        queries : Tensor
            Stacked query features, ``B x (L * M) x d``.
        domain_labels : Tensor
            ``B`` domain ids in ``0..5`` or ``-1`` for original images.
        """
        mask = domain_labels >= 0
        if not bool(mask.any()):
            return queries.sum() * 0.0

        selected = queries[mask]
        per_image = selected.shape[1]
        logits = self.discriminator(grl(selected.reshape(-1, selected.shape[-1]), self.coefficient))
        targets = domain_labels[mask].repeat_interleave(per_image)
        return F.cross_entropy(logits, targets)

    def image_adversarial_loss(self, feature_maps: list[Tensor], domain_labels: Tensor) -> Tensor:
        """Average over blocks of the discriminator cross-entropy on extracted domain features."""
        mask = domain_labels >= 0
        if not bool(mask.any()):
            return sum(fmap.sum() for fmap in feature_maps) * 0.0

        targets = domain_labels[mask]
        losses = []
        for extractor, feature_map in zip(self.extractors, feature_maps, strict=True):
            domain_feature = extractor(grl(feature_map[mask], self.coefficient))
            losses.append(F.cross_entropy(self.discriminator(domain_feature), targets))
        return torch.stack(losses).mean()

    @property
    def coefficient(self) -> float:
        return self.grl_config.coefficient
