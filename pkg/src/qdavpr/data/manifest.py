"""
CSV dataset manifests and lazy image loading.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from qdavpr.error import ParsingError, PathError, ProtocolError

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("image_path", "place_id", "lat", "lon", "frame_id", "split")
DOMAIN_COLUMN = "domain"


class Split(str, Enum):
    TRAIN = "train"
    QUERY = "query"
    DB = "db"


@dataclass(frozen=True)
class ManifestRow:
    image_path: str
    place_id: int
    lat: float | None = None
    lon: float | None = None
    frame_id: int | None = None
    split: Split = Split.TRAIN
    domain: int | None = None  # only set for pre-generated augmented copies

    @property
    def has_geo(self) -> bool:
        return self.lat is not None and self.lon is not None

    @property
    def has_frame(self) -> bool:
        return self.frame_id is not None


@dataclass
class DatasetManifest:
    """
    Manifest rows plus the directory relative image paths resolve against.

    Decoded images are cached per path, the cache can also be prefilled with in-memory images
    (the toy generator does so).
    """

    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)
    cache: dict[str, NDArray[np.float32]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        for row in self.rows:
            if row.place_id < 0:
                raise ParsingError(f"Negative place id `{row.place_id}` for `{row.image_path}`!")
            if row.split is not Split.TRAIN and not (row.has_geo or row.has_frame):
                raise ProtocolError(
                    f"Row `{row.image_path}` of split `{row.split.value}` has neither geo tags "
                    "nor a frame id!"
                )

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, split: Split | str) -> DatasetManifest:
        split = Split(split)
        return DatasetManifest(
            rows=[row for row in self.rows if row.split is split],
            root=self.root,
            cache=self.cache,
        )

    def places(self) -> dict[int, list[int]]:
        """Row indices per place id, in manifest order."""
        result: defaultdict[int, list[int]] = defaultdict(list)
        for index, row in enumerate(self.rows):
            result[row.place_id].append(index)
        return dict(result)

    def resolve(self, row: ManifestRow) -> Path:
        path = Path(row.image_path)
        return path if path.is_absolute() else self.root / path

    def load_image(self, index: int, size: int | None = None) -> NDArray[np.float32]:
        """Decoded ``H x W x 3`` image in ``[0, 1]``, optionally resized to ``size x size``."""
        row = self.rows[index]
        image = self.cache.get(row.image_path)
        if image is None:
            path = self.resolve(row)
            if not path.exists():
                raise PathError(f"Image `{path}` does not exist!")
            with Image.open(path) as handle:
                image = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
            self.cache[row.image_path] = image

        if size is not None and image.shape[:2] != (size, size):
            image = resize_image(image, size)
        return image


def resize_image(image: NDArray[np.float32], size: int) -> NDArray[np.float32]:
    pixels = Image.fromarray(to_uint8(image)).resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(pixels, dtype=np.float32) / 255.0


def to_uint8(image: NDArray[np.float32]) -> NDArray[np.uint8]:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: NDArray[np.float32], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


####################################################################################################
### CSV
####################################################################################################


def load_manifest(path: Path | str) -> DatasetManifest:
    """Read a manifest CSV, image paths are relative to the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise PathError(f"Manifest `{path}` does not exist!")

    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ParsingError(f"Manifest `{path}` lacks the columns `{sorted(missing)}`!")
        rows = [_parse_row(record, line) for line, record in enumerate(reader, start=2)]

    logger.debug("Loaded %d manifest rows from %s", len(rows), path)
    return DatasetManifest(rows=rows, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    header = list(MANIFEST_HEADER)
    if any(row.domain is not None for row in manifest.rows):
        header.append(DOMAIN_COLUMN)

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=header)
        writer.writeheader()
        for row in manifest.rows:
            record = {
                "image_path": row.image_path,
                "place_id": row.place_id,
                "lat": _optional(row.lat),
                "lon": _optional(row.lon),
                "frame_id": _optional(row.frame_id),
                "split": row.split.value,
            }
            if DOMAIN_COLUMN in header:
                record[DOMAIN_COLUMN] = _optional(row.domain)
            writer.writerow(record)


def _parse_row(record: dict[str, str], line: int) -> ManifestRow:
    try:
        return ManifestRow(
            image_path=record["image_path"],
            place_id=int(record["place_id"]),
            lat=float(record["lat"]) if record["lat"] else None,
            lon=float(record["lon"]) if record["lon"] else None,
            frame_id=int(record["frame_id"]) if record["frame_id"] else None,
            split=Split(record["split"]),
            domain=int(record[DOMAIN_COLUMN]) if record.get(DOMAIN_COLUMN) else None,
        )
    except ValueError as err:
        raise ParsingError(f"Malformed manifest row on line `{line}`: {err}") from err


def _optional(value: float | int | None) -> str:
    return "" if value is None else repr(value)
