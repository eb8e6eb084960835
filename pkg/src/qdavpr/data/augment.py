"""
Pre-generated domain copies of a dataset.
"""

from __future__ import annotations

import logging
from pathlib import Path, PurePosixPath

import numpy as np

from qdavpr.config import DomainTransformSpec
from qdavpr.data.domains import SyntheticDomain, apply_domain
from qdavpr.data.manifest import DatasetManifest, ManifestRow, save_image, save_manifest

logger = logging.getLogger(__name__)


def augment_manifest(
    manifest: DatasetManifest,
    out_dir: Path | str,
    domains: list[SyntheticDomain],
    seed: int,
    spec: DomainTransformSpec | None = None,
) -> DatasetManifest:
    """
    Write one copy of every image per domain to ``out_dir`` and return the manifest of the
    copies, which is saved as ``out_dir/manifest.csv``.

    Copies keep the place id, tags and split of their source row and record the domain id.
    """
    out_dir = Path(out_dir)
    rows: list[ManifestRow] = []
    for index, row in enumerate(manifest.rows):
        image = manifest.load_image(index)
        image_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        stem = PurePosixPath(row.image_path).stem
        for domain in domains:
            path = f"{domain.name.lower()}/{index:06d}_{stem}.png"
            save_image(apply_domain(image, int(domain), image_seed, spec), out_dir / path)
            rows.append(
                ManifestRow(
                    image_path=path,
                    place_id=row.place_id,
                    lat=row.lat,
                    lon=row.lon,
                    frame_id=row.frame_id,
                    split=row.split,
                    domain=int(domain),
                )
            )

    augmented = DatasetManifest(rows=rows, root=out_dir)
    save_manifest(augmented, out_dir / "manifest.csv")
    logger.info("Wrote %d augmented images to %s", len(rows), out_dir)
    return augmented
