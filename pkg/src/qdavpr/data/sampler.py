"""
Place balanced batch sampling with an on-the-fly seven way source draw.

Every sample owns a seed derived from ``(seed, epoch, step, index)``. The source (original or
one of the six domains), the domain transform and the basic augmentation are pure functions of
that seed, so the delivered stream does not depend on the worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch
from numpy.typing import NDArray
from torch import Tensor

from qdavpr.config import AugmentConfig, BatchSpec
from qdavpr.data.domains import ORIGINAL, SyntheticDomain, basic_augment, render_source
from qdavpr.data.manifest import DatasetManifest
from qdavpr.error import SamplingError

logger = logging.getLogger(__name__)

N_SOURCES = len(SyntheticDomain) + 1


@dataclass
class SampledBatch:
    images: Tensor  # B x 3 x S x S, float32 in [0, 1]
    place_labels: Tensor  # B, int64
    domain_labels: Tensor  # B, int64, ORIGINAL for untransformed images
    seeds: list[int]
    rows: list[int]  # manifest row per sample

    def __len__(self) -> int:
        return len(self.seeds)


def sample_seed(seed: int, epoch: int, step: int, index: int) -> int:
    """Per sample seed, a pure function of the global seed and the sample position."""
    return int(np.random.SeedSequence([seed, epoch, step, index]).generate_state(1)[0])


def draw_source(sample: int) -> int:
    """Uniform draw over the original image and the six domains, ``-1..5``."""
    return int(np.random.default_rng([sample, N_SOURCES]).integers(N_SOURCES)) - 1


def sample_batch(
    manifest: DatasetManifest,
    spec: BatchSpec,
    *,
    epoch: int,
    step: int,
    seed: int,
    image_size: int,
    augment: AugmentConfig | None = None,
    workers: int = 0,
) -> SampledBatch:
    """
    Draw ``spec.places`` places with ``spec.per_place`` images each.

    Samples of one place are contiguous, the batch holds ``places * per_place`` images.

    Raises
    ------
    SamplingError
        If fewer than ``spec.places`` places own at least ``spec.per_place`` images.
    """
    augment = augment or AugmentConfig()
    places = manifest.places()
    eligible = sorted(place for place, rows in places.items() if len(rows) >= spec.per_place)
    if len(eligible) < spec.places:
        raise SamplingError(
            f"Only `{len(eligible)}` places own `{spec.per_place}` images, "
            f"`{spec.places}` are required!"
        )

    rng = np.random.default_rng([seed, epoch, step])
    chosen = rng.choice(eligible, size=spec.places, replace=False)
    rows: list[int] = []
    labels: list[int] = []
    for place in chosen:
        picked = rng.choice(places[int(place)], size=spec.per_place, replace=False)
        rows.extend(int(row) for row in picked)
        labels.extend([int(place)] * spec.per_place)

    seeds = [sample_seed(seed, epoch, step, index) for index in range(len(rows))]
    sources = [draw_source(sample) if spec.domain_sampling else ORIGINAL for sample in seeds]

    def render(index: int) -> tuple[NDArray[np.float32], int]:
        image = manifest.load_image(rows[index], image_size)
        image, applied = render_source(image, sources[index], seeds[index], augment.domains)
        if augment.basic:
            image = basic_augment(image, seeds[index], augment)
        return image, applied

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(render, range(len(rows))))
    else:
        rendered = [render(index) for index in range(len(rows))]
    images = [image for image, _ in rendered]

    for index, (_, applied) in enumerate(rendered):
        if applied != sources[index]:
            raise SamplingError(
                f"Sample `{index}` (seed `{seeds[index]}`) is labelled with domain "
                f"`{sources[index]}` but was rendered as `{applied}`!"
            )

    return SampledBatch(
        images=torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous(),
        place_labels=torch.tensor(labels, dtype=torch.long),
        domain_labels=torch.tensor(sources, dtype=torch.long),
        seeds=seeds,
        rows=rows,
    )


def iter_batches(
    manifest: DatasetManifest,
    spec: BatchSpec,
    *,
    epoch: int,
    steps: int,
    seed: int,
    image_size: int,
    augment: AugmentConfig | None = None,
    workers: int = 0,
) -> Iterator[SampledBatch]:
    """All batches of one epoch."""
    for step in range(steps):
        yield sample_batch(
            manifest,
            spec,
            epoch=epoch,
            step=step,
            seed=seed,
            image_size=image_size,
            augment=augment,
            workers=workers,
        )


def sample_feature_batch(
    manifest: DatasetManifest,
    features: NDArray[np.float32],
    spec: BatchSpec,
    *,
    epoch: int,
    step: int,
    seed: int,
) -> SampledBatch:
    """
    Place balanced batch of precomputed ``N x c`` backbone features.

    ``features`` holds one entry per manifest row. Domain variants cannot be rendered on
    features, so the domain label of a sample is the ``domain`` column of its row (augmented
    copies written by ``augment_manifest``) or ``ORIGINAL``.
    """
    if features.shape[0] != len(manifest):
        raise SamplingError(
            f"`{features.shape[0]}` feature entries for `{len(manifest)}` manifest rows!"
        )
    places = manifest.places()
    eligible = sorted(place for place, rows in places.items() if len(rows) >= spec.per_place)
    if len(eligible) < spec.places:
        raise SamplingError(
            f"Only `{len(eligible)}` places own `{spec.per_place}` entries, "
            f"`{spec.places}` are required!"
        )

    rng = np.random.default_rng([seed, epoch, step])
    rows: list[int] = []
    labels: list[int] = []
    for place in rng.choice(eligible, size=spec.places, replace=False):
        picked = rng.choice(places[int(place)], size=spec.per_place, replace=False)
        rows.extend(int(row) for row in picked)
        labels.extend([int(place)] * spec.per_place)

    domains = [
        ORIGINAL if manifest.rows[row].domain is None else int(manifest.rows[row].domain)
        for row in rows
    ]
    return SampledBatch(
        images=torch.from_numpy(np.ascontiguousarray(features[rows], dtype=np.float32)),
        place_labels=torch.tensor(labels, dtype=torch.long),
        domain_labels=torch.tensor(domains, dtype=torch.long),
        seeds=[sample_seed(seed, epoch, step, index) for index in range(len(rows))],
        rows=rows,
    )
