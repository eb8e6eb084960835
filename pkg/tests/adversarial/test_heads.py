import math

import numpy as np
import pytest
import torch

from qdavpr.adversarial import (
    N_DOMAINS,
    AdversarialHeads,
    DomainDiscriminator,
    DomainFeatureExtractor,
)
from qdavpr.config import DiscriminatorConfig
from qdavpr.core import QdaVPRModel
from qdavpr.error import DimensionError, SpatialSizeError

from ..helpers import LN_6, cross_entropy_oracle, extractor_oracle, mlp_oracle


def small_heads(dim: int = 3, blocks: int = 2, seed: int = 0) -> AdversarialHeads:
    return AdversarialHeads(
        dim=dim,
        blocks=blocks,
        discriminator_config=DiscriminatorConfig(hidden=6),
        seed=seed,
    ).double()


def discriminator_layers(discriminator: DomainDiscriminator) -> list[tuple[np.ndarray, ...]]:
    return [
        (
            discriminator.net[index].weight.detach().numpy(),
            discriminator.net[index].bias.detach().numpy(),
        )
        for index in (0, 2, 4)
    ]


def conv_params(conv: torch.nn.Conv2d) -> tuple[np.ndarray, np.ndarray]:
    return conv.weight.detach().numpy(), conv.bias.detach().numpy()


def test_discriminator_arity(tiny_heads: AdversarialHeads):
    logits = tiny_heads.discriminator(torch.randn(5, 8))

    assert N_DOMAINS == 6
    assert tuple(logits.shape) == (5, 6)


def test_discriminator_dimension_mismatch(tiny_heads: AdversarialHeads):
    with pytest.raises(DimensionError):
        tiny_heads.discriminator(torch.randn(5, 7))


def test_zero_discriminator_is_uniform():
    heads = small_heads()
    with torch.no_grad():
        for param in heads.discriminator.parameters():
            param.zero_()

    queries = torch.randn(3, 4, 3, dtype=torch.float64)
    loss = heads.query_adversarial_loss(queries, torch.tensor([0, 4, 5]))

    assert math.isclose(float(loss), LN_6, rel_tol=1e-12)


def test_discriminator_matches_mlp_oracle():
    torch.manual_seed(2)
    discriminator = DomainDiscriminator(dim=2, hidden=4).double()
    x = torch.randn(7, 2, dtype=torch.float64)

    logits = discriminator(x).detach().numpy()

    layers = discriminator_layers(discriminator)
    for row, expected in zip(x.numpy(), logits):
        assert np.allclose(mlp_oracle(row, layers), expected)


def test_extractor_zero_input():
    extractor = DomainFeatureExtractor(dim=4)

    out = extractor(torch.zeros(2, 4, 6, 6))

    assert tuple(out.shape) == (2, 4)
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("shape", [(1, 4, 1, 4), (1, 4, 4, 1), (1, 4, 1, 1)])
def test_extractor_needs_two_by_two(shape):
    with pytest.raises(SpatialSizeError):
        DomainFeatureExtractor(dim=4)(torch.rand(*shape))


def test_extractor_matches_conv_oracle():
    torch.manual_seed(3)
    extractor = DomainFeatureExtractor(dim=3).double()
    with torch.no_grad():
        extractor.conv1.bias.uniform_(-0.1, 0.1)
        extractor.conv2.bias.uniform_(-0.1, 0.1)
    fmap = torch.randn(2, 3, 4, 4, dtype=torch.float64)

    out = extractor(fmap).detach().numpy()

    conv1, conv2 = conv_params(extractor.conv1), conv_params(extractor.conv2)
    for sample, expected in zip(fmap.numpy(), out):
        assert np.allclose(extractor_oracle(sample, conv1, conv2), expected)


def test_query_adversarial_loss_oracle():
    heads = small_heads(seed=4)
    generator = torch.Generator().manual_seed(4)
    queries = torch.randn(4, 5, 3, generator=generator, dtype=torch.float64)
    labels = torch.tensor([2, -1, 0, 5])

    loss = float(heads.query_adversarial_loss(queries, labels))

    layers = discriminator_layers(heads.discriminator)
    terms = [
        cross_entropy_oracle(mlp_oracle(query, layers), int(labels[b]))
        for b in range(4)
        if labels[b] >= 0
        for query in queries[b].numpy()
    ]
    assert len(terms) == 15
    assert math.isclose(loss, sum(terms) / len(terms), rel_tol=1e-9)


def test_image_adversarial_loss_oracle():
    heads = small_heads(seed=5)
    generator = torch.Generator().manual_seed(5)
    maps = [torch.randn(3, 3, 4, 4, generator=generator, dtype=torch.float64) for _ in range(2)]
    labels = torch.tensor([-1, 1, 3])

    loss = float(heads.image_adversarial_loss(maps, labels))

    layers = discriminator_layers(heads.discriminator)
    block_losses = []
    for extractor, fmap in zip(heads.extractors, maps):
        conv1, conv2 = conv_params(extractor.conv1), conv_params(extractor.conv2)
        terms = [
            cross_entropy_oracle(
                mlp_oracle(extractor_oracle(fmap[b].numpy(), conv1, conv2), layers),
                int(labels[b]),
            )
            for b in (1, 2)
        ]
        block_losses.append(sum(terms) / len(terms))
    assert math.isclose(loss, sum(block_losses) / 2, rel_tol=1e-9)


def test_all_original_batch_contributes_nothing():
    heads = small_heads()
    queries = torch.randn(3, 4, 3, dtype=torch.float64, requires_grad=True)
    maps = [torch.randn(3, 3, 4, 4, dtype=torch.float64, requires_grad=True)]
    labels = torch.full((3,), -1)

    query_loss = heads.query_adversarial_loss(queries, labels)
    image_loss = heads.image_adversarial_loss(maps, labels)
    (query_loss + image_loss).backward()

    assert float(query_loss) == 0.0
    assert float(image_loss) == 0.0
    assert queries.grad is not None and torch.count_nonzero(queries.grad) == 0
    assert maps[0].grad is not None and torch.count_nonzero(maps[0].grad) == 0
    assert all(param.grad is None for param in heads.discriminator.parameters())


def test_discriminator_is_shared():
    heads = small_heads()
    queries = torch.randn(2, 4, 3, dtype=torch.float64)
    maps = [torch.randn(2, 3, 4, 4, dtype=torch.float64) for _ in range(2)]
    labels = torch.tensor([1, 2])

    before_query = float(heads.query_adversarial_loss(queries, labels))
    before_image = float(heads.image_adversarial_loss(maps, labels))
    with torch.no_grad():
        heads.discriminator.net[4].bias.add_(torch.arange(6, dtype=torch.float64))

    assert float(heads.query_adversarial_loss(queries, labels)) != before_query
    assert float(heads.image_adversarial_loss(maps, labels)) != before_image
    discriminator_params = {id(param) for param in heads.discriminator.parameters()}
    all_params = [id(param) for param in heads.parameters()]
    assert len(all_params) == len(set(all_params))
    assert discriminator_params <= set(all_params)


def test_min_max_directions():
    heads = small_heads(seed=6)
    generator = torch.Generator().manual_seed(6)
    queries = torch.randn(4, 5, 3, generator=generator, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 3])
    step = 1e-3

    loss = heads.query_adversarial_loss(queries, labels)
    loss.backward()
    with torch.no_grad():
        for param in heads.discriminator.parameters():
            assert param.grad is not None
            param -= step * param.grad
        assert queries.grad is not None
        moved = queries - step * queries.grad
    after_discriminator_step = float(heads.query_adversarial_loss(queries.detach(), labels))

    with torch.no_grad():
        for param in heads.discriminator.parameters():
            assert param.grad is not None
            param += step * param.grad
    after_feature_step = float(heads.query_adversarial_loss(moved, labels))

    # the discriminator descends, the features ascend the same cross-entropy
    assert after_discriminator_step < float(loss)
    assert after_feature_step > float(loss)


def test_inference_does_not_carry_heads(tiny_model: QdaVPRModel, tiny_heads, toy_images):
    descriptor = tiny_model(toy_images)
    with torch.no_grad():
        for param in tiny_heads.parameters():
            param.add_(1.0)

    assert torch.equal(tiny_model(toy_images), descriptor)
    assert not any(
        "discriminator" in key or "extractors" in key for key in tiny_model.state_dict()
    )
