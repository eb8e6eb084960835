"""
Procedural toy places.

Every place is a composition of coloured shapes over a gradient background drawn on a canvas
larger than the image; the images of a place are shifted crops of the canvas. Place ``p`` sits
at longitude ``p * PLACE_SPACING_DEG`` on the equator, images of one place scatter by at most
``IMAGE_JITTER_DEG`` per axis (about 10 m apart at most).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image, ImageDraw

from qdavpr.data.domains import apply_unseen_domain
from qdavpr.data.manifest import DatasetManifest, ManifestRow, Split, save_image, save_manifest
from qdavpr.error import ConfigError

logger = logging.getLogger(__name__)

PLACE_SPACING_DEG = 0.002  # ~222 m along the equator
IMAGE_JITTER_DEG = 0.000045  # ~5 m
FRAME_SPACING = 50
CANVAS_SCALE = 1.5


@dataclass
class ToyDataset:
    manifest: DatasetManifest
    images: dict[str, NDArray[np.float32]]


def _place_canvas(rng: np.random.Generator, side: int) -> Image.Image:
    canvas = Image.new("RGB", (side, side))
    draw = ImageDraw.Draw(canvas)

    top, bottom = rng.integers(0, 256, size=(2, 3))
    for y in range(side):
        t = y / max(side - 1, 1)
        draw.line([(0, y), (side, y)], fill=tuple(int(v) for v in (1 - t) * top + t * bottom))

    for _ in range(int(rng.integers(6, 11))):
        x0, y0 = rng.integers(0, side, size=2)
        w, h = rng.integers(side // 10, side // 3, size=2)
        box = [int(x0), int(y0), int(x0 + w), int(y0 + h)]
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        kind = rng.integers(3)
        if kind == 0:
            draw.rectangle(box, fill=color)
        elif kind == 1:
            draw.ellipse(box, fill=color)
        else:
            apex = ((box[0] + box[2]) // 2, box[1])
            draw.polygon([(box[0], box[3]), apex, (box[2], box[3])], fill=color)

    # stripe texture so places also differ at high frequency
    period = int(rng.integers(4, 12))
    color = tuple(int(v) for v in rng.integers(0, 256, size=3))
    for x in range(0, side, period):
        draw.line([(x, int(side * 0.8)), (x + period // 2, side)], fill=color, width=2)
    return canvas


def generate_toy_places(
    n_places: int,
    imgs_per_place: int,
    image_size: int,
    seed: int,
    *,
    unseen_queries: bool = False,
    out_dir: Path | str | None = None,
) -> ToyDataset:
    """
    Generate ``n_places * imgs_per_place`` images of ``n_places`` distinct toy places.

    With at least three images per place, image 0 of every place goes to the database, image 1
    to the queries and the rest to training; otherwise all images are training images. With
    ``unseen_queries`` the queries are rendered through the held-out dusk transform. With
    ``out_dir`` the images are written as PNG files next to ``manifest.csv``.
    """
    if n_places < 2:
        raise ConfigError(f"At least two places are required, got `{n_places}`!")

    side = int(round(image_size * CANVAS_SCALE))
    margin = side - image_size
    rows: list[ManifestRow] = []
    images: dict[str, NDArray[np.float32]] = {}
    for place in range(n_places):
        rng = np.random.default_rng([seed, place])
        canvas = np.asarray(_place_canvas(rng, side), dtype=np.uint8)

        for index in range(imgs_per_place):
            if imgs_per_place >= 3 and index < 2:
                split = Split.DB if index == 0 else Split.QUERY
            else:
                split = Split.TRAIN

            top, left = rng.integers(0, margin + 1, size=2)
            crop = canvas[top : top + image_size, left : left + image_size]
            image = crop.astype(np.float32) / 255.0
            dusk_seed = int(rng.integers(2**31))
            if unseen_queries and split is Split.QUERY:
                image = apply_unseen_domain(image, seed=dusk_seed)
                image = np.round(image * 255.0).astype(np.float32) / 255.0

            dlat, dlon = rng.uniform(-IMAGE_JITTER_DEG, IMAGE_JITTER_DEG, size=2)
            path = f"images/place{place:04d}_{index:03d}.png"
            rows.append(
                ManifestRow(
                    image_path=path,
                    place_id=place,
                    lat=float(dlat),
                    lon=float(place * PLACE_SPACING_DEG + dlon),
                    frame_id=place * FRAME_SPACING + index % 5,
                    split=split,
                )
            )
            images[path] = image

    root = Path(out_dir) if out_dir is not None else Path()
    manifest = DatasetManifest(rows=rows, root=root, cache=dict(images))
    if out_dir is not None:
        for path, image in images.items():
            save_image(image, root / path)
        save_manifest(manifest, root / "manifest.csv")
        logger.info("Wrote %d toy images of %d places to %s", len(rows), n_places, root)
    return ToyDataset(manifest=manifest, images=images)
