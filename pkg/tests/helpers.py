import math

import numpy as np
import torch
from numpy.typing import NDArray

from qdavpr.config import (
    BatchSpec,
    DiscriminatorConfig,
    ExperimentConfig,
    LocalLossConfig,
    ModelConfig,
    TrainConfig,
)
from qdavpr.data.manifest import DatasetManifest, ManifestRow, Split

LN_6 = math.log(6.0)

TOY_SIZE = 56
TOY_PLACES = 8
TOY_PER_PLACE = 6

TINY_MODEL = ModelConfig(
    blocks=2,
    queries=4,
    dim=8,
    combinations=4,
    encoder_heads=2,
    backbone_layers=1,
    train_resize=TOY_SIZE,
    eval_resize=TOY_SIZE,
    seed=0,
)

DEFAULT_MODEL = ModelConfig()


def tiny_experiment(**sections) -> ExperimentConfig:
    """Small experiment on the toy places, sections can be replaced by keyword."""
    defaults = dict(
        model=TINY_MODEL,
        discriminator=DiscriminatorConfig(hidden=16),
        local_loss=LocalLossConfig(alpha=0.05, hard_negatives=3, top_combinations=2),
        batch=BatchSpec(places=4, per_place=2),
        train=TrainConfig(
            epochs=2,
            warmup_epochs=1,
            decay_every=1,
            steps_per_epoch=5,
            progress=False,
        ),
    )
    defaults |= sections
    return ExperimentConfig(**defaults)


def make_manifest(
    n_places: int, per_place: int, size: int, seed: int = 0, split: Split = Split.TRAIN
) -> DatasetManifest:
    """In-memory manifest of random images, no files are written."""
    rng = np.random.default_rng(seed)
    rows: list[ManifestRow] = []
    cache: dict[str, NDArray[np.float32]] = {}
    for place in range(n_places):
        for index in range(per_place):
            path = f"p{place:03d}_{index:02d}.png"
            rows.append(
                ManifestRow(
                    image_path=path,
                    place_id=place,
                    lat=0.0,
                    lon=place * 0.002,
                    frame_id=place * 50 + index,
                    split=split,
                )
            )
            cache[path] = rng.random((size, size, 3)).astype(np.float32)
    return DatasetManifest(rows=rows, cache=cache)


def random_unit(rng: np.random.Generator, *shape: int) -> NDArray[np.float64]:
    data = rng.standard_normal(shape)
    return data / np.linalg.norm(data, axis=-1, keepdims=True)


def random_loss_batch(
    rng: np.random.Generator, batch: int = 8, n_comb: int = 4, dim: int = 3, places: int = 3
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Descriptors, row normalized combinations and place labels of a random batch."""
    combinations = torch.from_numpy(random_unit(rng, batch, n_comb, dim))
    descriptors = torch.nn.functional.normalize(combinations.flatten(1), dim=1)
    labels = torch.from_numpy(rng.integers(0, places, batch))
    return descriptors, combinations, labels


####################################################################################################
### Loss oracles
####################################################################################################


def miner_oracle(
    sim: NDArray[np.float64], labels: list[int], epsilon: float
) -> tuple[set[tuple[int, int]], set[tuple[int, int]]]:
    batch = len(labels)
    positives: set[tuple[int, int]] = set()
    negatives: set[tuple[int, int]] = set()
    for i in range(batch):
        pos = [j for j in range(batch) if j != i and labels[j] == labels[i]]
        neg = [k for k in range(batch) if labels[k] != labels[i]]
        if not pos or not neg:
            continue
        hardest_neg = max(sim[i, k] for k in neg)
        easiest_pos = min(sim[i, j] for j in pos)
        for j in pos:
            if sim[i, j] < hardest_neg + epsilon:
                positives.add((i, j))
        for k in neg:
            if sim[i, k] > easiest_pos - epsilon:
                negatives.add((i, k))
    return positives, negatives


def ms_loss_oracle(
    sim: NDArray[np.float64],
    positives: set[tuple[int, int]],
    negatives: set[tuple[int, int]],
    alpha: float = 1.0,
    beta: float = 50.0,
    base: float = 0.0,
) -> float:
    batch = sim.shape[0]
    total = 0.0
    for i in range(batch):
        pos_sum = sum(math.exp(-alpha * (sim[i, j] - base)) for a, j in positives if a == i)
        neg_sum = sum(math.exp(beta * (sim[i, k] - base)) for a, k in negatives if a == i)
        total += math.log(1.0 + pos_sum) / alpha + math.log(1.0 + neg_sum) / beta
    return total / batch


def local_loss_oracle(
    descriptors: NDArray[np.float64],
    combinations: NDArray[np.float64],
    positives: set[tuple[int, int]],
    negatives: set[tuple[int, int]],
    alpha: float,
    hard_negatives: int,
    top_combinations: int,
) -> float:
    """Straight line query-combination triplet loss, one anchor at a time."""
    batch, n_comb = combinations.shape[:2]
    anchor_losses = []
    for r in range(batch):
        pos = sorted(j for a, j in positives if a == r)
        neg = sorted(k for a, k in negatives if a == r)
        if not pos or not neg:
            continue

        global_sim = [float(np.dot(descriptors[r], descriptors[k])) for k in neg]
        ranked = sorted(range(len(neg)), key=lambda idx: -global_sim[idx])
        pool = [neg[idx] for idx in ranked[: min(hard_negatives, len(neg))]]

        s_pos, s_neg = [], []
        for i in range(n_comb):
            s_pos.append(max(float(np.dot(combinations[r, i], combinations[p, i])) for p in pos))
            s_neg.append(max(float(np.dot(combinations[r, i], combinations[n, i])) for n in pool))

        order = sorted(range(n_comb), key=lambda i: -s_pos[i])
        selected = order[: min(top_combinations, n_comb)]
        hinges = [max(0.0, alpha - s_pos[i] + s_neg[i]) for i in selected]
        anchor_losses.append(sum(hinges) / len(hinges))

    if not anchor_losses:
        return 0.0
    return sum(anchor_losses) / len(anchor_losses)


####################################################################################################
### Network oracles
####################################################################################################


def relu(x: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.maximum(x, 0.0)


def cross_entropy_oracle(logits: NDArray[np.float64], target: int) -> float:
    shifted = logits - logits.max()
    return float(-shifted[target] + math.log(np.exp(shifted).sum()))


def mlp_oracle(x: NDArray[np.float64], layers: list[tuple[NDArray, NDArray]]) -> NDArray:
    """Affine layers with a ReLU between consecutive layers."""
    for index, (weight, bias) in enumerate(layers):
        x = weight @ x + bias
        if index < len(layers) - 1:
            x = relu(x)
    return x


def conv2d_same_oracle(
    fmap: NDArray[np.float64], weight: NDArray[np.float64], bias: NDArray[np.float64]
) -> NDArray[np.float64]:
    """3x3 stride 1 cross-correlation with zero padding, ``c x H x W`` in and out."""
    c_out, c_in, kh, kw = weight.shape
    _, height, width = fmap.shape
    padded = np.zeros((c_in, height + 2, width + 2))
    padded[:, 1:-1, 1:-1] = fmap
    out = np.zeros((c_out, height, width))
    for o in range(c_out):
        for y in range(height):
            for x in range(width):
                window = padded[:, y : y + kh, x : x + kw]
                out[o, y, x] = np.sum(window * weight[o]) + bias[o]
    return out


def avg_pool2_oracle(fmap: NDArray[np.float64]) -> NDArray[np.float64]:
    channels, height, width = fmap.shape
    out = np.zeros((channels, height // 2, width // 2))
    for y in range(height // 2):
        for x in range(width // 2):
            out[:, y, x] = fmap[:, 2 * y : 2 * y + 2, 2 * x : 2 * x + 2].mean(axis=(1, 2))
    return out


def extractor_oracle(
    fmap: NDArray[np.float64],
    conv1: tuple[NDArray, NDArray],
    conv2: tuple[NDArray, NDArray],
) -> NDArray[np.float64]:
    hidden = relu(conv2d_same_oracle(fmap, *conv1))
    hidden = avg_pool2_oracle(hidden)
    hidden = relu(conv2d_same_oracle(hidden, *conv2))
    return hidden.mean(axis=(1, 2))


def haversine_oracle(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    radius = 6_371_000.0
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(a))
